import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from core.errors import MeshError, MeshParseError

FORMATS = ("off", "obj")


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Triangle surface: ``vertices`` (n, 3) float64, ``faces`` (m, 3) int64, 0-based."""

    vertices: np.ndarray
    faces: np.ndarray
    label: Optional[str] = None
    _hash: List[str] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self) -> None:
        vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)
        vertices.setflags(write=False)
        faces.setflags(write=False)

        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (n, 3), got {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must be (m, 3), got {faces.shape}")
        if len(vertices) < 4 or len(faces) < 4:
            raise MeshError(
                f"mesh needs at least 4 vertices and 4 faces, "
                f"got {len(vertices)} and {len(faces)}"
            )
        if not np.all(np.isfinite(vertices)):
            raise MeshError("vertex coordinates must be finite")
        if faces.min() < 0 or faces.max() >= len(vertices):
            raise MeshError("face index out of range")
        a, b, c = faces.T
        degenerate = (a == b) | (b == c) | (a == c)
        if np.any(degenerate):
            raise MeshError(
                f"face {int(np.argmax(degenerate))} repeats a vertex index"
            )

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def content_hash(self) -> str:
        """Stable digest of the geometry, used as cache key."""
        if not self._hash:
            digest = hashlib.sha1()
            digest.update(np.asarray(self.vertices.shape, dtype=np.int64).tobytes())
            digest.update(self.vertices.tobytes())
            digest.update(self.faces.tobytes())
            self._hash.append(digest.hexdigest())
        return self._hash[0]

    def scaled(self, factor: float) -> "TriangleMesh":
        return TriangleMesh(self.vertices * factor, self.faces, self.label)

    def with_area(self, target_area: float) -> "TriangleMesh":
        """Uniformly rescale so the surface area equals ``target_area``."""
        area = self.area()
        if area <= 0:
            raise MeshError("mesh has zero surface area")
        return self.scaled(float(np.sqrt(target_area / area)))


def _fan(polygon: List[int]) -> List[Tuple[int, int, int]]:
    return [(polygon[0], polygon[i], polygon[i + 1]) for i in range(1, len(polygon) - 1)]


def _float(token: str, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise MeshParseError(f"non-numeric coordinate {token!r}", line)
    if not np.isfinite(value):
        raise MeshParseError(f"non-finite coordinate {token!r}", line)
    return value


def _int(token: str, line: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise MeshParseError(f"non-integer index {token!r}", line)


def _content_lines(text: str):
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield number, line.split()


def _parse_off(text: str) -> Tuple[np.ndarray, List[Tuple[int, int, int]]]:
    lines = _content_lines(text)
    try:
        number, tokens = next(lines)
    except StopIteration:
        raise MeshParseError("empty file, expected OFF header", 1)
    if not tokens[0].upper().endswith("OFF"):
        raise MeshParseError(f"malformed header {tokens[0]!r}, expected OFF", number)
    if tokens[0].upper() != "OFF":
        raise MeshParseError(f"unsupported OFF variant {tokens[0]!r}", number)
    counts = tokens[1:]
    if not counts:
        try:
            number, counts = next(lines)
        except StopIteration:
            raise MeshParseError("missing vertex/face counts", number)
    if len(counts) < 2:
        raise MeshParseError("malformed header, expected vertex and face counts", number)
    n_vertices, n_faces = _int(counts[0], number), _int(counts[1], number)
    if n_vertices < 0 or n_faces < 0:
        raise MeshParseError("negative element count", number)

    vertices = np.empty((n_vertices, 3))
    for i in range(n_vertices):
        try:
            number, tokens = next(lines)
        except StopIteration:
            raise MeshParseError(f"expected {n_vertices} vertices, found {i}", number)
        if len(tokens) < 3:
            raise MeshParseError("vertex needs three coordinates", number)
        vertices[i] = [_float(t, number) for t in tokens[:3]]

    faces: List[Tuple[int, int, int]] = []
    for i in range(n_faces):
        try:
            number, tokens = next(lines)
        except StopIteration:
            raise MeshParseError(f"expected {n_faces} faces, found {i}", number)
        size = _int(tokens[0], number)
        if size < 3 or len(tokens) < size + 1:
            raise MeshParseError(f"malformed face record of size {size}", number)
        polygon = [_int(t, number) for t in tokens[1 : size + 1]]
        for index in polygon:
            if not 0 <= index < n_vertices:
                raise MeshParseError(
                    f"face index {index} out of range for {n_vertices} vertices", number
                )
        faces.extend(_fan(polygon))
    return vertices, faces


def _parse_obj(text: str) -> Tuple[np.ndarray, List[Tuple[int, int, int]]]:
    vertices: List[List[float]] = []
    raw_faces: List[Tuple[int, List[int]]] = []
    for number, tokens in _content_lines(text):
        tag = tokens[0]
        if tag == "v":
            if len(tokens) < 4:
                raise MeshParseError("vertex needs three coordinates", number)
            vertices.append([_float(t, number) for t in tokens[1:4]])
        elif tag == "f":
            if len(tokens) < 4:
                raise MeshParseError("face needs at least three vertices", number)
            polygon = []
            for token in tokens[1:]:
                index = _int(token.split("/")[0], number)
                if index < 0:
                    index = len(vertices) + index
                else:
                    index -= 1
                if not 0 <= index < len(vertices):
                    raise MeshParseError(
                        f"face index {token!r} out of range for "
                        f"{len(vertices)} vertices",
                        number,
                    )
                polygon.append(index)
            raw_faces.append((number, polygon))
        # vt, vn, g, o, s, usemtl, mtllib carry nothing we need
    faces: List[Tuple[int, int, int]] = []
    for _, polygon in raw_faces:
        faces.extend(_fan(polygon))
    return np.asarray(vertices, dtype=np.float64).reshape(-1, 3), faces


def parse_mesh(
    content: Union[bytes, str], fmt: str, label: Optional[str] = None
) -> TriangleMesh:
    """Parse ASCII OFF or OBJ content; polygons are fan-triangulated."""
    fmt = fmt.lower().lstrip(".")
    if fmt not in FORMATS:
        raise MeshParseError(f"unsupported mesh format {fmt!r}")
    if isinstance(content, bytes):
        try:
            content = content.decode("utf-8")
        except UnicodeDecodeError:
            content = content.decode("latin-1")
    vertices, faces = _parse_off(content) if fmt == "off" else _parse_obj(content)
    faces_array = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(vertices, faces_array, label)


def load_mesh(path: Union[str, Path], label: Optional[str] = None) -> TriangleMesh:
    path = Path(path)
    try:
        content = path.read_bytes()
    except OSError as e:
        raise MeshError(f"cannot read {path}: {e}")
    try:
        return parse_mesh(content, path.suffix, label)
    except MeshError as e:
        e.message = f"{path.name}: {e.message}"
        e.args = (e.message,)
        raise


def format_mesh(mesh: TriangleMesh, fmt: str = "off") -> str:
    fmt = fmt.lower().lstrip(".")
    rows: List[str] = []
    if fmt == "off":
        rows.append("OFF")
        rows.append(f"{mesh.num_vertices} {mesh.num_faces} 0")
        rows.extend(f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices)
        rows.extend(f"3 {a} {b} {c}" for a, b, c in mesh.faces)
    elif fmt == "obj":
        rows.extend(f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices)
        rows.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces)
    else:
        raise MeshParseError(f"unsupported mesh format {fmt!r}")
    return "\n".join(rows) + "\n"


def save_mesh(mesh: TriangleMesh, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(format_mesh(mesh, path.suffix), encoding="utf-8")
    return path
