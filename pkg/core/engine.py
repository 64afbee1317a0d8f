import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from core.coding import CHANNELS, FeatureSet, Vocabulary, encode_bow, fit_vocabulary
from core.config import RunConfig, SignatureConfig, SpectralConfig
from core.dataset import DatasetManifest, ShapeEntry, make_split
from core.errors import DataError, MfmlError
from core.mesh_io import load_mesh
from core.signatures import (
    PointSignatureMatrix,
    compute_shapedna,
    compute_sihks,
    compute_wks,
)
from core.spectral import compute_basis
from utils.logger import logger, show_progress


@dataclass
class MeshDescriptors:
    """Everything extracted from one mesh before vocabulary coding."""

    shape_id: str
    label: str
    wks: np.ndarray
    sihks: np.ndarray
    shapedna: np.ndarray
    mass: np.ndarray

    def save(self, path: Path) -> None:
        with open(path, "wb") as f:
            np.savez(
                f, wks=self.wks, sihks=self.sihks, shapedna=self.shapedna, mass=self.mass
            )

    @classmethod
    def load(cls, path: Path, entry: ShapeEntry) -> "MeshDescriptors":
        with np.load(path) as data:
            return cls(
                entry.shape_id,
                entry.label,
                data["wks"],
                data["sihks"],
                data["shapedna"],
                data["mass"],
            )


@dataclass
class ExtractionTelemetry:
    eigensolves: int = 0
    cache_hits: int = 0
    failures: List[Tuple[str, str]] = field(default_factory=list)


def _cache_key(content_hash: str, spectral: SpectralConfig, signatures: SignatureConfig) -> str:
    params = json.dumps(
        {"spectral": asdict(spectral), "signatures": asdict(signatures)}, sort_keys=True
    )
    return hashlib.sha1(f"{content_hash}:{params}".encode("utf-8")).hexdigest()


def describe_mesh(
    entry: ShapeEntry,
    spectral: SpectralConfig,
    signatures: SignatureConfig,
    cache_dir: Optional[Path] = None,
) -> Tuple[MeshDescriptors, bool]:
    """Spectral basis and all signatures of one mesh.

    Args:
        entry: Manifest row naming the mesh file and its label.
        spectral: Eigensolver settings, including the area rescaling.
        signatures: WKS, siHKS and ShapeDNA settings.
        cache_dir: Directory of ``.npz`` results keyed by mesh content and
            both settings blocks; ``None`` disables caching.

    Returns:
        The descriptors and whether they came from the cache.
    """
    mesh = load_mesh(entry.path, entry.label)
    cache_path = None
    if cache_dir is not None:
        cache_path = Path(cache_dir) / f"{_cache_key(mesh.content_hash(), spectral, signatures)}.npz"
        if cache_path.exists():
            return MeshDescriptors.load(cache_path, entry), True

    if spectral.target_area > 0:
        mesh = mesh.with_area(spectral.target_area)
    basis = compute_basis(
        mesh,
        spectral.num_eigs,
        cot_clamp=spectral.cot_clamp,
        allow_disconnected=spectral.allow_disconnected,
        dense_threshold=spectral.dense_threshold,
        shift=spectral.shift,
        max_iter=spectral.max_iter,
    )
    wks = compute_wks(basis, signatures.wks_energies, signatures.wks_variance)
    sihks = compute_sihks(
        basis,
        signatures.sihks_base,
        (signatures.sihks_tau_min, signatures.sihks_tau_max),
        signatures.sihks_tau_step,
        signatures.sihks_dim,
        signatures.sihks_reference_area or None,
    )
    shapedna = compute_shapedna(
        basis, signatures.shapedna_dim, signatures.shapedna_normalization
    )
    descriptors = MeshDescriptors(
        entry.shape_id, entry.label, wks.values, sihks.values, shapedna.values, basis.mass
    )
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        descriptors.save(cache_path)
    return descriptors, False


def _describe_safely(entry, spectral, signatures, cache_dir):
    try:
        descriptors, hit = describe_mesh(entry, spectral, signatures, cache_dir)
        return entry.shape_id, descriptors, hit, None
    except MfmlError as e:
        return entry.shape_id, None, False, str(e)


class ExtractionEngine:
    """Turns a manifest into the three feature channels.

    Mesh descriptors are computed in a bounded worker pool and cached on disk
    by mesh content and parameters; vocabularies are fitted on training ids
    only.
    """

    def __init__(self, config: RunConfig, cache_dir: Optional[Path] = None) -> None:
        self.config = config
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.telemetry = ExtractionTelemetry()

    def describe(self, manifest: DatasetManifest) -> Dict[str, MeshDescriptors]:
        """Describe every manifest mesh in the worker pool.

        Meshes that fail are logged and left out, up to ``run.max_failure_rate``.

        Returns:
            Descriptors keyed by shape id, in manifest order.

        Raises:
            DataError: When the share of failed meshes exceeds the limit.
        """
        spectral, signatures = self.config.spectral, self.config.signatures
        workers = self.config.run.workers
        jobs = (
            delayed(_describe_safely)(entry, spectral, signatures, self.cache_dir)
            for entry in tqdm(
                manifest.entries, desc="Extracting", disable=not show_progress()
            )
        )
        results = Parallel(n_jobs=workers)(jobs)

        telemetry = ExtractionTelemetry()
        descriptors: Dict[str, MeshDescriptors] = {}
        for shape_id, item, hit, error in results:
            if error is not None:
                telemetry.failures.append((shape_id, error))
                logger.warning(f"Extraction failed for {shape_id}: {error}")
                continue
            descriptors[shape_id] = item
            if hit:
                telemetry.cache_hits += 1
            else:
                telemetry.eigensolves += 1
        self.telemetry = telemetry
        logger.info(
            f"Extracted {len(descriptors)}/{len(manifest)} meshes "
            f"({telemetry.eigensolves} eigensolves, {telemetry.cache_hits} cache hits)"
        )

        rate = len(telemetry.failures) / max(len(manifest), 1)
        if rate > self.config.run.max_failure_rate:
            names = ", ".join(f"{sid} ({msg})" for sid, msg in telemetry.failures[:10])
            raise DataError(
                f"{len(telemetry.failures)}/{len(manifest)} meshes failed: {names}",
                stage="extract",
            )
        return descriptors

    def fit_vocabularies(
        self, descriptors: Dict[str, MeshDescriptors], train_ids: Sequence[str], seed: int
    ) -> Dict[str, Vocabulary]:
        coding = self.config.coding
        train = [descriptors[sid] for sid in train_ids if sid in descriptors]
        if not train:
            raise DataError("no training meshes to fit vocabularies on", stage="coding")
        return {
            "BoW-WKS": fit_vocabulary(
                np.vstack([d.wks for d in train]),
                coding.vocab_size,
                seed,
                coding.vocab_max_rows,
                kind="WKS",
            ),
            "BoW-siHKS": fit_vocabulary(
                np.vstack([d.sihks for d in train]),
                coding.vocab_size,
                seed + 1,
                coding.vocab_max_rows,
                kind="siHKS",
            ),
        }

    def encode(
        self,
        descriptors: Dict[str, MeshDescriptors],
        vocabularies: Dict[str, Vocabulary],
    ) -> Dict[str, FeatureSet]:
        coding = self.config.coding
        ids = list(descriptors)
        labels = [descriptors[sid].label for sid in ids]
        rows: Dict[str, List[np.ndarray]] = {name: [] for name in CHANNELS}
        for sid in ids:
            d = descriptors[sid]
            for name, values, kind in (("BoW-WKS", d.wks, "WKS"), ("BoW-siHKS", d.sihks, "siHKS")):
                rows[name].append(
                    encode_bow(
                        PointSignatureMatrix(values, kind),
                        vocabularies[name],
                        d.mass,
                        coding.assignment,
                        coding.soft_sigma,
                    )
                )
            rows["ShapeDNA"].append(d.shapedna)
        return {
            name: FeatureSet(
                name,
                np.vstack(rows[name]) if ids else np.zeros((0, 1)),
                labels,
                ids,
                {"vocab_size": coding.vocab_size} if name != "ShapeDNA" else {},
            )
            for name in CHANNELS
        }

    def extract_all(
        self, manifest: DatasetManifest, train_fraction: float, seed: int = 0
    ) -> Tuple[Dict[str, FeatureSet], Dict[str, Vocabulary], DatasetManifest]:
        """Describe every mesh, fit vocabularies on the training split, encode all.

        Args:
            manifest: Labelled meshes. A ``train`` split it carries is kept,
                otherwise a stratified split is drawn.
            train_fraction: Per-class training share when a split is drawn.
            seed: Seed of the drawn split and of k-means.

        Returns:
            The feature channels keyed by name, the fitted vocabularies and the
            split restricted to meshes that were described successfully.
        """
        descriptors = self.describe(manifest)
        usable = manifest.restrict(descriptors)
        if "train" in usable.splits:
            split = usable
        else:
            split = make_split(usable, train_fraction, seed)
            logger.info(
                f"Drew a {len(split.splits['train'])}/{len(split.splits['test'])} "
                f"train/test split with seed {seed}"
            )
        vocabularies = self.fit_vocabularies(descriptors, split.split("train"), seed)
        return self.encode(descriptors, vocabularies), vocabularies, split
