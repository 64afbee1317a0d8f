#!/usr/bin/env python3
"""
Multi-feature metric learning for non-rigid 3D shape retrieval

Extracts spectral descriptors (BoW-WKS, BoW-siHKS, ShapeDNA) from triangle
meshes, learns one Mahalanobis metric per descriptor tied together by a LogDet
consensus metric, and evaluates retrieval with the Princeton Shape Benchmark
measures.

Usage:
    python main.py <command> [options]

Examples:
    # Generate a labelled synthetic mesh collection
    python main.py synth shapes --out data/synth

    # Full pipeline with artifacts under runs/
    python main.py run --manifest data/synth/manifest.json

    # Compare precision-recall curves of several runs
    python main.py plot runs/20260101-120000 runs/20260102-093000 --out pr.svg

License: MIT
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, Optional

from core.coding import FeatureSet, load_feature_dir, save_feature_dir
from core.config import ConfigManager, RunConfig
from core.dataset import DatasetManifest, make_split, manifest_from_cla
from core.engine import ExtractionEngine
from core.errors import ConfigError, MfmlError
from core.pipeline import (
    FittedModel,
    evaluate_stage,
    fit_stage,
    labels_manifest,
    run_pipeline,
    stage,
    write_evaluation,
)
from core.plotting import create_pr_plot
from core.retrieval import load_pr_curves
from core.synthetic import complementary_views, gaussian_views, generate_shapes
from utils.logger import logger, set_level


class MfmlApp:
    """Command dispatcher: every subcommand is one method taking parsed args."""

    def __init__(self, repo_path: Path, config_path: Optional[Path] = None, overrides=()):
        self.repo_path = Path(repo_path)
        self.config_manager = ConfigManager(self.repo_path)
        with stage("config"):
            self.config: RunConfig = self.config_manager.load(config_path, overrides)

    def _manifest(self, path: Optional[str], check_paths: bool = True) -> Optional[DatasetManifest]:
        if path is None:
            return None
        with stage("manifest"):
            return DatasetManifest.load(path, check_paths=check_paths)

    def _split_for(self, features: Dict[str, FeatureSet], manifest: Optional[DatasetManifest]):
        if manifest is not None and "train" in manifest.splits:
            return manifest
        first = next(iter(features.values()))
        return make_split(labels_manifest(first), self.config.run.train_fraction, self.config.run.seed)

    def synth(self, args) -> None:
        out = Path(args.out)
        seed = self.config.run.seed if args.seed is None else args.seed
        if args.kind == "shapes":
            generate_shapes(out, per_class=args.per_class, seed=seed)
        else:
            if args.complementary:
                views = complementary_views(args.per_class, args.dim, args.separability, seed)
            else:
                views = gaussian_views(
                    args.classes,
                    args.per_class,
                    args.dim,
                    [args.separability] * args.channels,
                    seed=seed,
                )
            save_feature_dir({v.channel: v for v in views}, out)
            logger.info(f"Wrote {len(views)} feature channels to {out}")

    def split(self, args) -> None:
        manifest = self._manifest(args.manifest)
        with stage("split"):
            split = make_split(manifest, self.config.run.train_fraction, self.config.run.seed)
        split.save(args.out)
        logger.info(
            f"Split {len(manifest)} shapes into {len(split.splits['train'])} train / "
            f"{len(split.splits['test'])} test: {args.out}"
        )

    def extract(self, args) -> None:
        if args.cla:
            manifest = manifest_from_cla(args.cla, args.mesh_dir, args.pattern).check_paths()
        else:
            manifest = self._manifest(args.manifest)
        if manifest is None:
            raise ConfigError("extract needs --manifest or --cla", stage="extract")
        engine = ExtractionEngine(self.config, self.config.run.cache_dir)
        with stage("extract"):
            features, vocabularies, split = engine.extract_all(
                manifest, self.config.run.train_fraction, self.config.run.seed
            )
        out = save_feature_dir(features, args.out)
        split.save(out / "split.json")
        (out / "vocab.json").write_text(
            json.dumps({k: v.to_dict() for k, v in vocabularies.items()}), encoding="utf-8"
        )
        ConfigManager.save(self.config, out / "config.json")
        logger.info(f"Wrote {len(features)} channels for {len(split)} shapes to {out}")

    def train(self, args) -> None:
        features = load_feature_dir(args.features)
        manifest = self._manifest(args.manifest, check_paths=False)
        if manifest is None and (Path(args.features) / "split.json").exists():
            manifest = DatasetManifest.load(Path(args.features) / "split.json", check_paths=False)
        split = self._split_for(features, manifest)
        with stage("train"):
            fitted = fit_stage(features, split.split("train"), self.config, self.config.run.seed)
        out = fitted.save(args.out)
        split.save(out / "split.json")
        logger.info(f"Model written to {out}")

    def eval(self, args) -> None:
        features = load_feature_dir(args.features)
        fitted = FittedModel.load(args.model)
        if self.config.eval.mode == "full":
            query_ids = next(iter(features.values())).shape_ids
        else:
            manifest = self._manifest(args.manifest, check_paths=False)
            if manifest is None:
                split_path = Path(args.model) / "split.json"
                manifest = DatasetManifest.load(split_path, check_paths=False)
            query_ids = manifest.split("test")
        with stage("eval"):
            report, baselines = evaluate_stage(features, fitted, query_ids, self.config)
        write_evaluation(Path(args.out), report, baselines)

    def run(self, args) -> None:
        if args.repeats is not None:
            self.config.run.repeats = args.repeats
        manifest = self._manifest(args.manifest)
        run_pipeline(self.config, manifest, args.runs_dir)

    def plot(self, args) -> None:
        curves = {}
        for run in args.runs:
            path = Path(run)
            path = path / "pr.csv" if path.is_dir() else path
            with stage("plot"):
                if not path.exists():
                    raise ConfigError(f"no precision-recall data at {path}")
                for method, curve in load_pr_curves(path).items():
                    key = method if len(args.runs) == 1 else f"{path.parent.name}: {method}"
                    curves[key] = curve
        create_pr_plot(curves, Path(args.out), args.title)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Multi-feature metric learning for non-rigid 3D shape retrieval",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s synth shapes --out data/synth
  %(prog)s run --manifest data/synth/manifest.json --repeats 5
  %(prog)s synth views --complementary --out data/views
  %(prog)s train --features data/views --out models/views
  %(prog)s eval --features data/views --model models/views --out reports/views
        """,
    )
    parser.add_argument("--config", help="INI or JSON run configuration (default config/config.ini)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one configuration value; repeatable",
    )
    parser.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate synthetic meshes or Gaussian feature views")
    p.add_argument("kind", choices=["shapes", "views"])
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--dim", type=int, default=30)
    p.add_argument("--separability", type=float, default=6.0)
    p.add_argument(
        "--complementary",
        action="store_true",
        help="3 classes, 2 channels, each channel separating only two classes",
    )

    p = sub.add_parser("split", help="Stratified train/test split of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("extract", help="Compute the three feature channels")
    p.add_argument("--manifest")
    p.add_argument("--cla", help="PSB classification file instead of a manifest")
    p.add_argument("--mesh-dir", default=".")
    p.add_argument("--pattern", default="{id}.off", help="Mesh file name for a .cla id")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="Fit PCA and the multi-feature metric")
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", help="Manifest carrying a train split")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="Retrieval measures of a trained model")
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", help="Manifest carrying a test split")
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="Extract, train and evaluate in one run directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--runs-dir")
    p.add_argument("--repeats", type=int, help="Re-split and retrain this many times")

    p = sub.add_parser("plot", help="Precision-recall SVG of one or more runs")
    p.add_argument("runs", nargs="+", help="Run directories or pr.csv files")
    p.add_argument("--out", required=True)
    p.add_argument("--title", default="Precision-Recall")
    return parser


def main(argv=None) -> int:
    """Main entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    set_level(args.log_level)

    try:
        repo_path = Path(__file__).resolve().parent
        app = MfmlApp(repo_path, args.config, args.overrides)
        getattr(app, args.command)(args)
        return 0
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 0
    except MfmlError as e:
        logger.error(f"{e.stage or args.command}: {e.message}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Application failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
