import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

from core.errors import ConfigError, DataError
from utils.logger import logger


@dataclass(frozen=True)
class ShapeEntry:
    shape_id: str
    path: Path
    label: str


@dataclass
class DatasetManifest:
    """Labelled mesh collection with optional named splits (``train``/``test``)."""

    entries: List[ShapeEntry]
    splits: Dict[str, List[str]] = field(default_factory=dict)
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        ids = [e.shape_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest shape ids are not unique")
        known = set(ids)
        for name, members in self.splits.items():
            missing = set(members) - known
            if missing:
                raise DataError(f"split {name!r} names unknown shapes: {sorted(missing)[:5]}")
        if "train" in self.splits and "test" in self.splits:
            if set(self.splits["train"]) & set(self.splits["test"]):
                raise DataError("train and test splits overlap")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> List[str]:
        return [e.shape_id for e in self.entries]

    @property
    def labels(self) -> Dict[str, str]:
        return {e.shape_id: e.label for e in self.entries}

    def classes(self) -> Dict[str, List[str]]:
        members: Dict[str, List[str]] = {}
        for entry in self.entries:
            members.setdefault(entry.label, []).append(entry.shape_id)
        return members

    def restrict(self, shape_ids: Iterable[str]) -> "DatasetManifest":
        """Entries and splits limited to ``shape_ids``; order is kept."""
        keep = set(shape_ids)
        return DatasetManifest(
            [e for e in self.entries if e.shape_id in keep],
            {k: [s for s in v if s in keep] for k, v in self.splits.items()},
            self.seed,
        )

    def split(self, name: str) -> List[str]:
        if name not in self.splits:
            raise DataError(f"manifest has no {name!r} split")
        return list(self.splits[name])

    def check_paths(self) -> "DatasetManifest":
        missing = [e.shape_id for e in self.entries if not e.path.exists()]
        if missing:
            raise DataError(f"{len(missing)} mesh files missing, first: {missing[0]}")
        return self

    def to_dict(self, base: Optional[Path] = None) -> dict:
        def rel(path: Path) -> str:
            if base is not None:
                try:
                    return str(path.resolve().relative_to(Path(base).resolve()))
                except ValueError:
                    pass
            return str(path)

        return {
            "entries": [
                {"shapeId": e.shape_id, "path": rel(e.path), "label": e.label}
                for e in self.entries
            ],
            "splits": {k: list(v) for k, v in self.splits.items()},
            "seed": self.seed,
        }

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(path.parent), indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path], check_paths: bool = True) -> "DatasetManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise DataError(f"cannot read manifest {path}: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"manifest {path} is not valid JSON: {e}")
        try:
            entries = [
                ShapeEntry(
                    str(item["shapeId"]),
                    (path.parent / item["path"]).resolve(),
                    str(item["label"]),
                )
                for item in data["entries"]
            ]
        except (KeyError, TypeError) as e:
            raise ConfigError(f"manifest {path} entry lacks field {e}")
        splits = {k: [str(s) for s in v] for k, v in data.get("splits", {}).items()}
        manifest = cls(entries, splits, data.get("seed"))
        return manifest.check_paths() if check_paths else manifest


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def make_split(
    manifest: DatasetManifest, train_fraction: float, seed: int
) -> DatasetManifest:
    """Stratified per-class train/test split, deterministic for a seed."""
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train: List[str] = []
    test: List[str] = []
    for label, members in sorted(manifest.classes().items()):
        if len(members) < 2:
            raise DataError(f"class {label!r} has {len(members)} member, need >= 2")
        n_train = min(max(_round_half_up(train_fraction * len(members)), 1), len(members) - 1)
        order = rng.permutation(len(members))
        chosen = set(order[:n_train].tolist())
        for k, shape_id in enumerate(members):
            (train if k in chosen else test).append(shape_id)
    logger.debug(f"split seed {seed}: {len(train)} train, {len(test)} test")
    return DatasetManifest(
        manifest.entries, {"train": train, "test": test}, seed
    )


def read_cla(path: Union[str, Path]) -> Dict[str, str]:
    """Princeton Shape Benchmark classification file to ``{shape id: class}``.

    Layout: ``PSB <version>``, ``<classes> <models>``, then per class a
    ``<name> <parent> <count>`` line followed by ``count`` model ids.
    """
    path = Path(path)
    try:
        lines = [line.split() for line in path.read_text(encoding="utf-8").splitlines()]
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}")
    lines = [tokens for tokens in lines if tokens]
    if not lines or lines[0][0] != "PSB":
        raise DataError(f"{path}: missing PSB header")
    if len(lines) < 2 or len(lines[1]) < 2:
        raise DataError(f"{path}: missing class and model counts")
    n_classes, n_models = int(lines[1][0]), int(lines[1][1])

    labels: Dict[str, str] = {}
    cursor = 2
    for _ in range(n_classes):
        if cursor >= len(lines) or len(lines[cursor]) < 3:
            raise DataError(f"{path}: truncated class header")
        name, count = lines[cursor][0], int(lines[cursor][2])
        cursor += 1
        for model_id in lines[cursor : cursor + count]:
            labels[model_id[0]] = name
        cursor += count
    if len(labels) != n_models:
        raise DataError(f"{path}: header announces {n_models} models, found {len(labels)}")
    return labels


def manifest_from_cla(
    cla_path: Union[str, Path],
    mesh_dir: Union[str, Path],
    pattern: str = "{id}.off",
) -> DatasetManifest:
    mesh_dir = Path(mesh_dir)
    labels = read_cla(cla_path)
    entries = [
        ShapeEntry(shape_id, (mesh_dir / pattern.format(id=shape_id)).resolve(), label)
        for shape_id, label in sorted(labels.items(), key=lambda kv: _id_key(kv[0]))
    ]
    return DatasetManifest(entries)


def _id_key(shape_id: str):
    return (0, int(shape_id), "") if shape_id.isdigit() else (1, 0, shape_id)

