import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.cluster.vq import vq
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans
from sklearn.decomposition import PCA
from sklearn.exceptions import ConvergenceWarning

from core.errors import CodingError
from core.signatures import PointSignatureMatrix
from utils.logger import logger

CHANNELS = ("BoW-WKS", "BoW-siHKS", "ShapeDNA")


@dataclass
class Vocabulary:
    centers: np.ndarray
    kind: str
    iterations: int = 0
    inertia: float = 0.0

    @property
    def size(self) -> int:
        return len(self.centers)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "iterations": self.iterations,
            "inertia": self.inertia,
            "centers": self.centers.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        return cls(
            np.asarray(data["centers"], dtype=np.float64),
            data["kind"],
            int(data["iterations"]),
            float(data["inertia"]),
        )


@dataclass
class FeatureSet:
    """One feature channel: ``vectors`` is (N, d), one row per shape."""

    channel: str
    vectors: np.ndarray
    labels: List[str]
    shape_ids: List[str]
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            self.vectors = self.vectors.reshape(len(self.shape_ids), -1)
        self.labels = [str(v) for v in self.labels]
        self.shape_ids = [str(v) for v in self.shape_ids]
        if not len(self.vectors) == len(self.labels) == len(self.shape_ids):
            raise CodingError(
                f"{self.channel}: {len(self.vectors)} rows, {len(self.labels)} labels, "
                f"{len(self.shape_ids)} ids"
            )
        if len(set(self.shape_ids)) != len(self.shape_ids):
            raise CodingError(f"{self.channel}: duplicate shape ids")
        if not np.all(np.isfinite(self.vectors)):
            raise CodingError(f"{self.channel}: non-finite feature values")

    def __len__(self) -> int:
        return len(self.shape_ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, shape_ids: Sequence[str]) -> "FeatureSet":
        index = {sid: i for i, sid in enumerate(self.shape_ids)}
        try:
            rows = [index[str(sid)] for sid in shape_ids]
        except KeyError as e:
            raise CodingError(f"{self.channel}: unknown shape id {e.args[0]}")
        return FeatureSet(
            self.channel,
            self.vectors[rows].reshape(len(rows), self.dim),
            [self.labels[i] for i in rows],
            [self.shape_ids[i] for i in rows],
            dict(self.meta),
        )

    def save(self, directory: Union[str, Path]) -> Path:
        """CSV (shapeId, label, values...) plus a JSON sidecar with channel metadata."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(
            self.vectors, columns=[f"f{j}" for j in range(self.dim)]
        )
        frame.insert(0, "label", self.labels)
        frame.insert(0, "shapeId", self.shape_ids)
        csv_path = directory / f"{self.channel}.csv"
        frame.to_csv(csv_path, index=False, float_format="%.17g")
        sidecar = {"channel": self.channel, "rows": len(self), "dim": self.dim}
        sidecar.update(self.meta)
        (directory / f"{self.channel}.json").write_text(
            json.dumps(sidecar, indent=2), encoding="utf-8"
        )
        return csv_path

    @classmethod
    def load(cls, directory: Union[str, Path], channel: str) -> "FeatureSet":
        directory = Path(directory)
        frame = pd.read_csv(
            directory / f"{channel}.csv", dtype={"shapeId": str, "label": str}
        )
        sidecar_path = directory / f"{channel}.json"
        meta = {}
        if sidecar_path.exists():
            meta = json.loads(sidecar_path.read_text(encoding="utf-8"))
            for key in ("channel", "rows", "dim"):
                meta.pop(key, None)
        values = frame.drop(columns=["shapeId", "label"]).to_numpy(dtype=np.float64)
        return cls(channel, values, frame["label"].tolist(), frame["shapeId"].tolist(), meta)


def fit_vocabulary(
    signatures: np.ndarray,
    size: int = 64,
    seed: int = 0,
    max_rows: int = 100_000,
    kind: str = "",
    max_attempts: int = 5,
) -> Vocabulary:
    """k-means++ codebook over pooled signature rows from training meshes."""
    rows = np.asarray(signatures, dtype=np.float64)
    if rows.ndim != 2 or len(rows) < size:
        raise CodingError(f"vocabulary of {size} words needs at least {size} rows")
    rng = np.random.default_rng(seed)
    if len(rows) > max_rows:
        rows = rows[np.sort(rng.choice(len(rows), size=max_rows, replace=False))]

    for attempt in range(max_attempts):
        kmeans = KMeans(
            n_clusters=size,
            init="k-means++",
            n_init=1,
            random_state=int(seed) + attempt,
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=ConvergenceWarning)
            kmeans.fit(rows)
        centers = kmeans.cluster_centers_
        distinct = len(np.unique(centers, axis=0))
        if distinct == size:
            return Vocabulary(centers, kind, int(kmeans.n_iter_), float(kmeans.inertia_))
        logger.warning(
            f"Vocabulary collapsed to {distinct}/{size} distinct centers, "
            f"re-seeding (attempt {attempt + 1}/{max_attempts})"
        )
    raise CodingError(
        f"could not fit {size} distinct codewords after {max_attempts} attempts"
    )


def encode_bow(
    signature: PointSignatureMatrix,
    vocab: Vocabulary,
    mass: np.ndarray,
    assignment: str = "hard",
    soft_sigma: float = 1.0,
) -> np.ndarray:
    """Area-weighted word histogram, L1-normalized to sum 1."""
    values = signature.values
    if values.shape[1] != vocab.centers.shape[1]:
        raise CodingError(
            f"signature dimension {values.shape[1]} does not match "
            f"vocabulary dimension {vocab.centers.shape[1]}"
        )
    mass = np.asarray(mass, dtype=np.float64)
    if assignment == "hard":
        words, _ = vq(values, vocab.centers, check_finite=False)
        histogram = np.bincount(words, weights=mass, minlength=vocab.size)
    elif assignment == "soft":
        distances = cdist(values, vocab.centers, "sqeuclidean")
        # kernel width scales with the typical distance to the nearest word
        scale = soft_sigma**2 * max(float(np.median(distances.min(axis=1))), 1e-300)
        logits = -(distances - distances.min(axis=1, keepdims=True)) / (2.0 * scale)
        weights = np.exp(logits)
        weights /= weights.sum(axis=1, keepdims=True)
        histogram = mass @ weights
    else:
        raise CodingError(f"unknown assignment {assignment!r}")
    return histogram / histogram.sum()


@dataclass
class PCAProjection:
    mean: np.ndarray
    basis: np.ndarray  # (input_dim, out_dim), orthonormal columns
    explained_variance: np.ndarray
    rank_deficient: bool = False

    @property
    def input_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def out_dim(self) -> int:
        return self.basis.shape[1]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "basis": self.basis.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "rank_deficient": self.rank_deficient,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PCAProjection":
        return cls(
            np.asarray(data["mean"], dtype=np.float64),
            np.asarray(data["basis"], dtype=np.float64),
            np.asarray(data["explained_variance"], dtype=np.float64),
            bool(data["rank_deficient"]),
        )


def _pad_columns(vectors: np.ndarray, width: int) -> np.ndarray:
    if vectors.shape[1] >= width:
        return vectors
    return np.hstack([vectors, np.zeros((len(vectors), width - vectors.shape[1]))])


def fit_pca(train: FeatureSet, out_dim: int = 30) -> PCAProjection:
    """Top-``out_dim`` principal directions of the training rows.

    Channels narrower than ``out_dim`` are zero-padded first. When the centered
    data has rank below ``out_dim`` the basis is completed with an orthonormal
    complement and ``rank_deficient`` is set.
    """
    x = _pad_columns(train.vectors, out_dim)
    n_rows, width = x.shape
    if n_rows < 2:
        raise CodingError(f"{train.channel}: PCA needs at least 2 training rows")
    if n_rows <= out_dim:
        logger.warning(
            f"{train.channel}: {n_rows} training rows for a {out_dim}-dim PCA, "
            f"trailing directions are arbitrary"
        )
    n_components = min(out_dim, n_rows, width)
    pca = PCA(n_components=n_components, svd_solver="full").fit(x)
    basis = pca.components_.T
    variance = pca.explained_variance_.copy()

    if n_components < out_dim:
        complement = scipy.linalg.null_space(basis.T)[:, : out_dim - n_components]
        basis = np.hstack([basis, complement])
        variance = np.concatenate([variance, np.zeros(out_dim - n_components)])
    tol = 1e-12 * max(float(variance.max(initial=0.0)), 1e-300)
    rank = int(np.sum(variance > tol))
    rank_deficient = rank < out_dim
    if rank_deficient:
        logger.warning(f"{train.channel}: centered training data has rank {rank} < {out_dim}")
    return PCAProjection(pca.mean_.copy(), basis, variance, rank_deficient)


def apply_pca(projection: PCAProjection, features: FeatureSet) -> FeatureSet:
    x = _pad_columns(features.vectors, projection.out_dim)
    if x.shape[1] != projection.input_dim:
        raise CodingError(
            f"{features.channel}: feature dimension {features.dim} does not match "
            f"projection input {projection.input_dim}"
        )
    projected = (x - projection.mean) @ projection.basis
    return FeatureSet(
        features.channel,
        projected.reshape(len(features), projection.out_dim),
        features.labels,
        features.shape_ids,
        dict(features.meta, pca_dim=projection.out_dim),
    )


def save_feature_dir(features: Dict[str, FeatureSet], directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    for feature_set in features.values():
        feature_set.save(directory)
    (directory / "channels.json").write_text(json.dumps(list(features)), encoding="utf-8")
    return directory


def load_feature_dir(directory: Union[str, Path]) -> Dict[str, FeatureSet]:
    """Channels in the order they were saved; falls back to every CSV present."""
    directory = Path(directory)
    index = directory / "channels.json"
    if index.exists():
        names = json.loads(index.read_text(encoding="utf-8"))
    else:
        names = sorted(p.stem for p in directory.glob("*.csv"))
    if not names:
        raise CodingError(f"no feature channels in {directory}")
    return {name: FeatureSet.load(directory, name) for name in names}
