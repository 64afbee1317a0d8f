"""Desk-scale test data: Gaussian multi-view features and labelled primitive meshes."""

from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.spatial.transform import Rotation
from scipy.special import erf

from core.coding import FeatureSet
from core.dataset import DatasetManifest, ShapeEntry
from core.errors import ConfigError
from core.mesh_io import TriangleMesh, save_mesh
from utils.logger import logger

_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICOSAHEDRON_VERTICES = np.array(
    [
        [-1, _T, 0], [1, _T, 0], [-1, -_T, 0], [1, -_T, 0],
        [0, -1, _T], [0, 1, _T], [0, -1, -_T], [0, 1, -_T],
        [_T, 0, -1], [_T, 0, 1], [-_T, 0, -1], [-_T, 0, 1],
    ],
    dtype=np.float64,
)
_ICOSAHEDRON_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)

SHAPE_CLASSES = ("sphere", "box", "cylinder")


def _normalize_rows(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Midpoint-subdivided icosahedron projected to the sphere; 642 vertices at level 3."""
    v = _normalize_rows(_ICOSAHEDRON_VERTICES)
    f = _ICOSAHEDRON_FACES
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        unique, inverse = np.unique(edges, axis=0, return_inverse=True)
        midpoints = _normalize_rows(0.5 * (v[unique[:, 0]] + v[unique[:, 1]]))
        ab, bc, ca = len(v) + inverse.reshape(3, -1)
        a, b, c = f.T
        v = np.vstack([v, midpoints])
        f = np.concatenate(
            [
                np.stack([a, ab, ca], axis=1),
                np.stack([b, bc, ab], axis=1),
                np.stack([c, ca, bc], axis=1),
                np.stack([ab, bc, ca], axis=1),
            ]
        )
    return TriangleMesh(radius * v, f)


def box(half_extents: Sequence[float] = (1.0, 0.7, 0.5), subdivisions: int = 3) -> TriangleMesh:
    """Icosphere pushed radially onto the surface of an axis-aligned box."""
    sphere = icosphere(subdivisions)
    v = sphere.vertices / np.abs(sphere.vertices).max(axis=1, keepdims=True)
    return TriangleMesh(v * np.asarray(half_extents), sphere.faces)


def cylinder(
    radius: float = 0.3,
    length: float = 3.0,
    segments: int = 24,
    rings: int = 41,
    joint: float = 0.5,
    neck: float = 0.25,
    joint_width: float = 0.3,
    angle: float = 0.0,
) -> TriangleMesh:
    """Capped tube of two rigid halves articulated at a narrow neck.

    The neck sits at ``joint * length`` and narrows to ``neck * radius``.
    ``angle`` turns the far half about the joint; the axis turns smoothly
    over ``joint_width``, so only the neck is strained and the halves move
    rigidly. Vertex order does not depend on ``angle``: two poses correspond
    vertex by vertex.
    """
    if not 0 < joint < 1 or not 0 < neck <= 1 or joint_width <= 0:
        raise ConfigError("cylinder needs 0 < joint < 1, 0 < neck <= 1, joint_width > 0")
    s = np.linspace(0.0, length, rings)
    u = (s - joint * length) / joint_width
    profile = radius * (1.0 - (1.0 - neck) * np.exp(-(u**2)))

    # axis heading integrated on a finer grid; rings are every 16th sample
    fine = np.linspace(0.0, length, 16 * (rings - 1) + 1)
    heading = 0.5 * angle * (1.0 + erf((fine - joint * length) / joint_width))
    axis = np.column_stack(
        [
            np.zeros_like(fine),
            cumulative_trapezoid(np.sin(heading), fine, initial=0.0),
            cumulative_trapezoid(np.cos(heading), fine, initial=0.0),
        ]
    )[::16]
    heading = heading[::16]
    normal = np.column_stack([np.zeros(rings), np.cos(heading), -np.sin(heading)])

    theta = 2.0 * np.pi * np.arange(segments) / segments
    tube = (
        axis[:, None, :]
        + profile[:, None, None] * np.cos(theta)[None, :, None] * np.array([1.0, 0.0, 0.0])
        + profile[:, None, None] * np.sin(theta)[None, :, None] * normal[:, None, :]
    ).reshape(-1, 3)
    v = np.vstack([tube, axis[0], axis[-1]])
    bottom, top = len(tube), len(tube) + 1

    ring = np.arange(rings - 1)[:, None] * segments
    k = np.arange(segments)[None, :]
    p00 = (ring + k).ravel()
    p01 = (ring + (k + 1) % segments).ravel()
    p10 = p00 + segments
    p11 = p01 + segments
    side = np.concatenate([np.stack([p00, p01, p11], 1), np.stack([p00, p11, p10], 1)])
    k = np.arange(segments)
    last = (rings - 1) * segments
    caps = np.concatenate(
        [
            np.stack([np.full(segments, bottom), (k + 1) % segments, k], 1),
            np.stack([np.full(segments, top), last + k, last + (k + 1) % segments], 1),
        ]
    )
    return TriangleMesh(v, np.concatenate([side, caps]))


def _deformed_instance(kind: str, rng: np.random.Generator, subdivisions: int) -> TriangleMesh:
    if kind == "sphere":
        mesh = icosphere(subdivisions)
        mesh = TriangleMesh(mesh.vertices * rng.uniform(0.9, 1.1, size=3), mesh.faces)
    elif kind == "box":
        mesh = box(np.array([1.0, 0.7, 0.5]) * rng.uniform(0.9, 1.1, size=3), subdivisions)
    elif kind == "cylinder":
        mesh = cylinder(
            radius=0.3 * rng.uniform(0.9, 1.1),
            length=3.0 * rng.uniform(0.95, 1.05),
            angle=rng.uniform(0.0, np.pi / 3),
        )
    else:
        raise ConfigError(f"unknown synthetic shape {kind!r}")
    rotation = Rotation.random(random_state=int(rng.integers(2**31 - 1)))
    vertices = rotation.apply(mesh.vertices) + rng.normal(scale=0.1, size=3)
    return TriangleMesh(vertices, mesh.faces, kind)


def generate_shapes(
    out_dir: Union[str, Path],
    per_class: int = 8,
    seed: int = 0,
    classes: Sequence[str] = SHAPE_CLASSES,
    subdivisions: int = 3,
    fmt: str = "off",
) -> DatasetManifest:
    """Write deformed primitive meshes plus ``manifest.json`` under ``out_dir``."""
    if per_class < 2:
        raise ConfigError("per_class must be >= 2")
    out_dir = Path(out_dir)
    mesh_dir = out_dir / "meshes"
    mesh_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for kind in classes:
        for k in range(per_class):
            shape_id = f"{kind}_{k:03d}"
            path = save_mesh(_deformed_instance(kind, rng, subdivisions), mesh_dir / f"{shape_id}.{fmt}")
            entries.append(ShapeEntry(shape_id, path.resolve(), kind))
    manifest = DatasetManifest(entries, seed=seed)
    manifest.save(out_dir / "manifest.json")
    logger.info(f"Wrote {len(entries)} synthetic meshes to {mesh_dir}")
    return manifest


def gaussian_views(
    num_classes: int = 3,
    per_class: int = 30,
    dim: int = 30,
    separability: Sequence[float] = (6.0, 6.0),
    groups: Optional[Sequence[Sequence[int]]] = None,
    seed: int = 0,
) -> List[FeatureSet]:
    """Multi-channel Gaussian classes with unit isotropic noise.

    Channel ``v`` places the mean of class ``k`` at ``separability[v]`` times a
    random unit direction chosen per group ``groups[v][k]``; classes sharing a
    group are indistinguishable in that channel.
    """
    num_channels = len(separability)
    if groups is None:
        groups = [list(range(num_classes))] * num_channels
    if len(groups) != num_channels or any(len(g) != num_classes for g in groups):
        raise ConfigError("groups needs one class-to-group list per channel")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    shape_ids = [f"s{k:04d}" for k in range(len(labels))]
    views = []
    for v in range(num_channels):
        group_of = np.asarray(groups[v])
        directions = _normalize_rows(rng.standard_normal((group_of.max() + 1, dim)))
        means = separability[v] * directions[group_of]
        vectors = means[labels] + rng.standard_normal((len(labels), dim))
        views.append(
            FeatureSet(f"view{v}", vectors, [f"c{k}" for k in labels], shape_ids)
        )
    return views


def complementary_views(
    per_class: int = 30, dim: int = 30, separability: float = 6.0, seed: int = 0
) -> List[FeatureSet]:
    """Three classes, two channels; each channel separates only two of them."""
    return gaussian_views(
        num_classes=3,
        per_class=per_class,
        dim=dim,
        separability=(separability, separability),
        groups=([0, 1, 1], [0, 0, 1]),
        seed=seed,
    )
