import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.coding import FeatureSet, PCAProjection, apply_pca, fit_pca
from core.config import ConfigManager, RunConfig
from core.dataset import DatasetManifest, ShapeEntry, make_split
from core.engine import ExtractionEngine
from core.errors import DataError, MfmlError
from core.plotting import create_pr_plot
from core.retrieval import (
    RetrievalReport,
    compute_measures,
    embed,
    format_table,
    rank_all,
    save_report,
    summarize,
)
from model import MetricModel, sample_pairs, train
from utils.logger import logger


@contextmanager
def stage(name: str):
    """Tag any pipeline error raised inside the block with ``name``."""
    try:
        yield
    except MfmlError as e:
        raise e.with_stage(name)


@dataclass
class FittedModel:
    """Per-channel PCA projections and the metric trained on their outputs."""

    channels: List[str]
    projections: Dict[str, PCAProjection]
    model: MetricModel

    def project(self, features: Dict[str, FeatureSet], ids: Sequence[str]) -> List[np.ndarray]:
        missing = [c for c in self.channels if c not in features]
        if missing:
            raise DataError(f"feature channels missing: {missing}")
        return [
            apply_pca(self.projections[c], features[c].subset(ids)).vectors
            for c in self.channels
        ]

    def save(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.model.save(directory / "model.json")
        self.model.save_trace(directory / "trace.csv")
        pca = {c: self.projections[c].to_dict() for c in self.channels}
        (directory / "pca.json").write_text(json.dumps(pca), encoding="utf-8")
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "FittedModel":
        directory = Path(directory)
        try:
            model = MetricModel.load(directory / "model.json")
            pca = json.loads((directory / "pca.json").read_text(encoding="utf-8"))
        except OSError as e:
            raise DataError(f"cannot read model from {directory}: {e}")
        channels = list(model.channels) or list(pca)
        return cls(channels, {c: PCAProjection.from_dict(pca[c]) for c in channels}, model)


def labels_manifest(features: FeatureSet) -> DatasetManifest:
    """Path-less manifest over the rows of a feature set, for splitting."""
    return DatasetManifest(
        [ShapeEntry(sid, Path(sid), label) for sid, label in zip(features.shape_ids, features.labels)]
    )


def fit_stage(
    features: Dict[str, FeatureSet],
    train_ids: Sequence[str],
    config: RunConfig,
    seed: int,
) -> FittedModel:
    """PCA per channel, pair sampling and metric training on training rows only.

    Args:
        features: Feature channels keyed by name, covering at least ``train_ids``.
        train_ids: Shapes whose rows fit the projections and the metric.
        config: Run configuration; ``coding.pca_dim`` and ``metric`` are read.
        seed: Seed of pair sampling and training.

    Returns:
        The projections and the trained metric, in the channel order of
        ``features``.
    """
    channels = list(features)
    projections: Dict[str, PCAProjection] = {}
    vectors = []
    labels: List[str] = []
    for name in channels:
        train_set = features[name].subset(train_ids)
        projections[name] = fit_pca(train_set, config.coding.pca_dim)
        vectors.append(apply_pca(projections[name], train_set).vectors)
        labels = train_set.labels

    metric = config.metric
    pairs = sample_pairs(labels, metric.per_class_cap, metric.neg_ratio, seed, metric.tau)
    logger.info(
        f"Training on {len(labels)} shapes, {pairs.num_positive} positive and "
        f"{pairs.num_negative} negative pairs"
    )
    model = train(vectors, pairs, metric.hyperparams(len(channels)), seed, channels)
    return FittedModel(channels, projections, model)


def evaluate_stage(
    features: Dict[str, FeatureSet],
    fitted: FittedModel,
    query_ids: Sequence[str],
    config: RunConfig,
) -> Tuple[RetrievalReport, List[RetrievalReport]]:
    """Leave-one-out ranking over ``query_ids`` under the learned metric and baselines.

    Args:
        features: Feature channels keyed by name.
        fitted: Projections and metric from :func:`fit_stage`.
        query_ids: Shapes ranked against each other, each one in turn the query.
        config: Run configuration; ``eval`` is read.

    Returns:
        The learned-metric report and one Euclidean report per channel, the
        latter empty unless ``eval.baselines`` is set.
    """
    query_ids = list(query_ids)
    labels = features[fitted.channels[0]].subset(query_ids).labels
    label_of = dict(zip(query_ids, labels))
    vectors = fitted.project(features, query_ids)
    ev = config.eval

    ranked = rank_all(embed(vectors, fitted.model, ev.aggregation), query_ids)
    report = compute_measures(ranked, label_of, ev.e_depth, name="MfML")

    baselines = []
    if ev.baselines:
        for name, X in zip(fitted.channels, vectors):
            ranked = rank_all(embed([X]), query_ids)
            baselines.append(compute_measures(ranked, label_of, ev.e_depth, name=name))
    return report, baselines


def write_evaluation(
    directory: Path, report: RetrievalReport, baselines: Sequence[RetrievalReport]
) -> None:
    save_report(report, directory, baselines)
    curves = {report.name: report.pr_curve}
    curves.update({b.name: b.pr_curve for b in baselines})
    create_pr_plot(curves, directory / "pr.svg")
    table = format_table([report, *baselines])
    (directory / "table.txt").write_text(table + "\n", encoding="utf-8")
    for line in table.splitlines():
        logger.info(line)


def make_run_dir(runs_dir: Union[str, Path]) -> Path:
    base = Path(runs_dir) / time.strftime("%Y%m%d-%H%M%S")
    run_dir, k = base, 0
    while run_dir.exists():
        k += 1
        run_dir = base.with_name(f"{base.name}-{k}")
    run_dir.mkdir(parents=True)
    return run_dir


@dataclass
class PipelineResult:
    run_dir: Path
    reports: List[RetrievalReport] = field(default_factory=list)
    baselines: List[List[RetrievalReport]] = field(default_factory=list)
    models: List[FittedModel] = field(default_factory=list)
    summary: Dict[str, Dict[str, float]] = field(default_factory=dict)

    @property
    def report(self) -> RetrievalReport:
        return self.reports[0]

    @property
    def model(self) -> MetricModel:
        return self.models[0].model


def run_pipeline(
    config: RunConfig,
    manifest: DatasetManifest,
    runs_dir: Optional[Union[str, Path]] = None,
    cache_dir: Optional[Union[str, Path]] = None,
) -> PipelineResult:
    """Extract, split, fit coding and metric on train, evaluate, persist.

    With ``run.repeats > 1`` every repeat re-splits with seed ``run.seed + r``
    and writes into ``repeat_XX``; the run directory then holds the mean and
    standard deviation of each measure.

    Args:
        config: Validated before anything is written.
        manifest: Labelled meshes; any splits it carries are ignored.
        runs_dir: Parent of the timestamped run directory, ``run.runs_dir``
            when omitted.
        cache_dir: Descriptor cache, ``run.cache_dir`` when omitted.

    Returns:
        Reports, baselines and fitted models per repeat, plus the summary.
    """
    config.validate()
    rn = config.run
    run_dir = make_run_dir(runs_dir if runs_dir is not None else rn.runs_dir)
    ConfigManager.save(config, run_dir / "config.json")
    logger.info("=" * 60)
    logger.info(f"Starting run {run_dir.name} on {len(manifest)} shapes")
    logger.info("=" * 60)

    engine = ExtractionEngine(config, cache_dir if cache_dir is not None else rn.cache_dir)
    with stage("extract"):
        descriptors = engine.describe(manifest)
    usable = DatasetManifest(manifest.restrict(descriptors).entries)

    result = PipelineResult(run_dir)
    for r in range(rn.repeats):
        seed = rn.seed + r
        out_dir = run_dir if rn.repeats == 1 else run_dir / f"repeat_{r:02d}"
        out_dir.mkdir(parents=True, exist_ok=True)
        with stage("split"):
            split = make_split(usable, rn.train_fraction, seed)
            split.save(out_dir / "split.json")
        train_ids = split.split("train")
        with stage("coding"):
            vocabularies = engine.fit_vocabularies(descriptors, train_ids, seed)
            features = engine.encode(descriptors, vocabularies)
            (out_dir / "vocab.json").write_text(
                json.dumps({k: v.to_dict() for k, v in vocabularies.items()}), encoding="utf-8"
            )
        with stage("train"):
            fitted = fit_stage(features, train_ids, config, seed)
            fitted.save(out_dir)
        query_ids = split.split("test") if config.eval.mode == "test" else usable.ids
        with stage("eval"):
            report, baselines = evaluate_stage(features, fitted, query_ids, config)
            write_evaluation(out_dir, report, baselines)
        result.reports.append(report)
        result.baselines.append(baselines)
        result.models.append(fitted)

    if rn.repeats > 1:
        result.summary = summarize(result.reports)
        (run_dir / "summary.json").write_text(
            json.dumps(result.summary, indent=2), encoding="utf-8"
        )
        for name, values in result.summary.items():
            logger.info(f"{name}: {100 * values['mean']:.1f} +/- {100 * values['std']:.1f}")

    logger.info("=" * 60)
    logger.info(f"Run completed, artifacts in {run_dir}")
    logger.info("=" * 60)
    return result
