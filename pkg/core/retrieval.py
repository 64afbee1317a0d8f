"""Ranking under a learned metric and the five PSB retrieval measures."""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from core.errors import ConfigError, DataError
from model import MetricModel
from utils.logger import logger

MEASURES = ("NN", "FT", "ST", "E", "DCG")
RECALL_POINTS = np.round(np.arange(21) * 0.05, 2)


@dataclass(frozen=True, eq=False)
class RankedList:
    query_id: str
    ordered_ids: List[str]
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.ordered_ids)


@dataclass
class RetrievalReport:
    """Measures in [0, 1]; ``pr_curve`` is (21, 2) rows of (recall, precision)."""

    name: str
    nn: float
    ft: float
    st: float
    e: float
    dcg: float
    pr_curve: np.ndarray
    per_query: pd.DataFrame = field(default_factory=pd.DataFrame)

    def measures(self) -> Dict[str, float]:
        return {"NN": self.nn, "FT": self.ft, "ST": self.st, "E": self.e, "DCG": self.dcg}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "measures": self.measures(),
            "pr_curve": {
                "recall": self.pr_curve[:, 0].tolist(),
                "precision": self.pr_curve[:, 1].tolist(),
            },
            "num_queries": len(self.per_query),
        }

    def pr_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.pr_curve, columns=["recall", "precision"])


# ---------------------------------------------------------------------------
# distances


def _check_channels(a: Sequence, b: Sequence) -> None:
    if len(a) != len(b):
        raise DataError(f"channel count mismatch: {len(a)} vs {len(b)}")
    for v, (x, y) in enumerate(zip(a, b)):
        if np.shape(x)[-1] != np.shape(y)[-1]:
            raise DataError(f"channel {v} dimension mismatch")


def combined_distance(
    a: Sequence[np.ndarray], b: Sequence[np.ndarray], a_star: np.ndarray
) -> float:
    """``sum_v (a_v - b_v)^T A* (a_v - b_v)`` over matching channels."""
    _check_channels(a, b)
    total = 0.0
    for x, y in zip(a, b):
        diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
        total += float(diff @ a_star @ diff)
    return max(total, 0.0)


def embed(
    channels: Sequence[np.ndarray],
    model: Optional[MetricModel] = None,
    aggregation: str = "sum",
) -> np.ndarray:
    """Map per-channel rows into one space where squared Euclidean distance is the metric.

    ``sum`` factors ``A* = C C^T`` and stacks ``x_v C``; ``channel`` stacks
    ``x_v L_v^T``. Without a model the raw channels are stacked.
    """
    if model is None:
        return np.hstack([np.asarray(X, dtype=np.float64) for X in channels])
    if len(channels) != model.num_channels:
        raise DataError(
            f"{len(channels)} channels for a {model.num_channels}-channel model"
        )
    parts = []
    if aggregation == "sum":
        factor = np.linalg.cholesky(model.a_star)
        for v, X in enumerate(channels):
            parts.append(model.standardize(X, v) @ factor)
    elif aggregation == "channel":
        for v, X in enumerate(channels):
            parts.append(model.standardize(X, v) @ model.L[v].T)
    else:
        raise ConfigError(f"unknown aggregation {aggregation!r}")
    return np.hstack(parts)


def rank_all(
    database: np.ndarray,
    database_ids: Sequence[str],
    queries: Optional[np.ndarray] = None,
    query_ids: Optional[Sequence[str]] = None,
) -> List[RankedList]:
    """Sort the database by ascending distance for every query.

    Rows are embedded vectors (see :func:`embed`). A query never appears in
    its own list; ties are broken by shape id.
    """
    database_ids = [str(s) for s in database_ids]
    if len(database_ids) == 0:
        raise DataError("empty retrieval database")
    if queries is None:
        queries, query_ids = database, database_ids
    query_ids = [str(s) for s in query_ids]
    distances = cdist(queries, database, "sqeuclidean")
    ids = np.asarray(database_ids)

    ranked = []
    for q, query_id in enumerate(query_ids):
        keep = ids != query_id
        row = distances[q, keep]
        candidates = ids[keep]
        order = np.lexsort((candidates, row))
        ranked.append(RankedList(query_id, candidates[order].tolist(), row[order]))
    return ranked


# ---------------------------------------------------------------------------
# measures


def _query_measures(relevant: np.ndarray, e_depth: int) -> Dict[str, float]:
    n_rel = int(relevant.sum())
    measures = {"NN": float(relevant[0]) if len(relevant) else 0.0}
    if n_rel == 0:
        measures.update(FT=np.nan, ST=np.nan, E=np.nan, DCG=np.nan)
        return measures
    measures["FT"] = relevant[:n_rel].sum() / n_rel
    measures["ST"] = relevant[: 2 * n_rel].sum() / n_rel
    top = relevant[:e_depth].sum()
    if top == 0:
        measures["E"] = 0.0
    else:
        precision = top / min(e_depth, len(relevant))
        recall = top / n_rel
        measures["E"] = 2.0 / (1.0 / precision + 1.0 / recall)
    discount = np.ones(len(relevant))
    discount[1:] = 1.0 / np.log2(np.arange(2, len(relevant) + 1))
    measures["DCG"] = float(relevant @ discount) / float(discount[:n_rel].sum())
    return measures


def _interpolated_pr(relevant: np.ndarray) -> np.ndarray:
    hits = np.cumsum(relevant)
    recall = hits / hits[-1]
    precision = hits / np.arange(1, len(relevant) + 1)
    curve = np.empty(len(RECALL_POINTS))
    for k, point in enumerate(RECALL_POINTS):
        reached = recall >= point - 1e-12
        curve[k] = precision[reached].max() if np.any(reached) else 0.0
    return curve


def compute_measures(
    ranked: Sequence[RankedList],
    labels: Mapping[str, str],
    e_depth: int = 32,
    name: str = "",
) -> RetrievalReport:
    """Macro-average NN, FT, ST, E and DCG over queries.

    Queries whose class has no other member in the database count toward NN
    only.
    """
    if not ranked:
        raise DataError("no ranked lists to evaluate")
    rows = []
    curves = []
    skipped = 0
    for item in ranked:
        label = labels[item.query_id]
        relevant = np.asarray(
            [labels[s] == label for s in item.ordered_ids], dtype=np.float64
        )
        measures = _query_measures(relevant, e_depth)
        if np.isnan(measures["FT"]):
            skipped += 1
        else:
            curves.append(_interpolated_pr(relevant))
        rows.append({"queryId": item.query_id, "label": label, **measures})
    if skipped:
        logger.warning(f"{skipped} queries have no same-class shape and count for NN only")

    per_query = pd.DataFrame(rows)
    means = per_query[list(MEASURES)].mean(skipna=True).fillna(0.0)
    precision = np.mean(curves, axis=0) if curves else np.zeros(len(RECALL_POINTS))
    return RetrievalReport(
        name=name,
        nn=float(means["NN"]),
        ft=float(means["FT"]),
        st=float(means["ST"]),
        e=float(means["E"]),
        dcg=float(means["DCG"]),
        pr_curve=np.column_stack([RECALL_POINTS, precision]),
        per_query=per_query,
    )


def nearest_neighbor_accuracy(
    train: np.ndarray,
    train_labels: Sequence[str],
    test: np.ndarray,
    test_labels: Sequence[str],
) -> float:
    """Held-out 1-NN classification accuracy in an embedded space."""
    distances = cdist(test, train, "sqeuclidean")
    nearest = np.argmin(distances, axis=1)
    predicted = np.asarray([str(v) for v in train_labels])[nearest]
    return float(np.mean(predicted == np.asarray([str(v) for v in test_labels])))


# ---------------------------------------------------------------------------
# output


def format_table(reports: Sequence[RetrievalReport]) -> str:
    """Measures x100, one row per method."""
    frame = pd.DataFrame(
        [{"Method": r.name, **{k: 100.0 * v for k, v in r.measures().items()}} for r in reports]
    )
    return frame.to_string(index=False, float_format=lambda v: f"{v:.1f}")


def summarize(reports: Sequence[RetrievalReport]) -> Dict[str, Dict[str, float]]:
    """Mean and standard deviation of every measure over repeated runs."""
    frame = pd.DataFrame([r.measures() for r in reports])
    return {
        k: {"mean": float(frame[k].mean()), "std": float(frame[k].std(ddof=0))}
        for k in MEASURES
    }


def save_report(
    report: RetrievalReport,
    directory: Union[str, Path],
    baselines: Sequence[RetrievalReport] = (),
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["baselines"] = [b.to_dict() for b in baselines]
    path = directory / "report.json"
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")

    curves = [report.pr_frame().assign(method=report.name or "MfML")]
    curves += [b.pr_frame().assign(method=b.name) for b in baselines]
    pd.concat(curves, ignore_index=True)[["method", "recall", "precision"]].to_csv(
        directory / "pr.csv", index=False, float_format="%.17g"
    )
    report.per_query.to_csv(directory / "per_query.csv", index=False)
    return path


def load_pr_curves(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    frame = pd.read_csv(path)
    if "method" not in frame:
        frame["method"] = Path(path).parent.name
    return {
        str(method): group[["recall", "precision"]].to_numpy()
        for method, group in frame.groupby("method", sort=False)
    }
