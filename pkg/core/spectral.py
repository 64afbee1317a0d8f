from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from core.errors import MeshError, SpectralError
from core.mesh_io import TriangleMesh
from utils.logger import logger


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Truncated generalized eigenpairs of ``W phi = lambda M phi``.

    ``eigenfunctions`` is (n, k), one mass-orthonormal column per eigenvalue.
    """

    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    mass: np.ndarray

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    @property
    def num_vertices(self) -> int:
        return len(self.mass)

    @property
    def area(self) -> float:
        return float(self.mass.sum())

    def truncated(self, k: int) -> "SpectralBasis":
        return SpectralBasis(
            self.eigenvalues[:k], self.eigenfunctions[:, :k], self.mass
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "wb") as f:
            np.savez(
                f,
                eigenvalues=self.eigenvalues,
                eigenfunctions=self.eigenfunctions,
                mass=self.mass,
            )
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SpectralBasis":
        with np.load(Path(path)) as data:
            return cls(data["eigenvalues"], data["eigenfunctions"], data["mass"])


def _corner_cotangents(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    cross = np.linalg.norm(np.cross(u, v), axis=1)
    return np.einsum("ij,ij->i", u, v) / cross


def build_laplacian(
    mesh: TriangleMesh, cot_clamp: float = 1e4, allow_disconnected: bool = False
) -> Tuple[sparse.csr_matrix, np.ndarray]:
    """Assemble the cotangent stiffness matrix and the lumped mass diagonal.

    Off-diagonal entries are ``-(cot a + cot b) / 2`` for every interior edge
    (one term on boundary edges), the diagonal is the negated row sum, so the
    matrix is symmetric positive semidefinite with zero row sums. Mass is one
    third of the incident triangle areas per vertex.
    """
    v = mesh.vertices
    f = mesh.faces
    n = mesh.num_vertices

    areas = mesh.face_areas()
    if np.any(areas <= 0.0):
        bad = int(np.argmin(areas))
        raise MeshError(f"triangle {bad} has zero area")

    edges = np.concatenate([f[:, [1, 2]], f[:, [2, 0]], f[:, [0, 1]]])
    keyed = np.sort(edges, axis=1)
    _, counts = np.unique(keyed, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise MeshError(f"{int(np.sum(counts > 2))} edges border more than two faces")

    adjacency = sparse.coo_matrix(
        (np.ones(len(keyed)), (keyed[:, 0], keyed[:, 1])), shape=(n, n)
    )
    n_components, _ = connected_components(adjacency, directed=False)
    if n_components > 1:
        if not allow_disconnected:
            raise MeshError(f"mesh has {n_components} connected components")
        logger.warning(f"Mesh has {n_components} connected components")

    # corner k is opposite the edge listed in position k of `edges`
    p0, p1, p2 = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    cot = np.concatenate(
        [
            _corner_cotangents(p1 - p0, p2 - p0),
            _corner_cotangents(p2 - p1, p0 - p1),
            _corner_cotangents(p0 - p2, p1 - p2),
        ]
    )
    cot = np.clip(cot, -cot_clamp, cot_clamp)

    # one entry per triangle corner; adding the transpose makes W exactly symmetric
    half = sparse.coo_matrix(
        (-0.5 * cot, (edges[:, 0], edges[:, 1])), shape=(n, n)
    ).tocsr()
    off = (half + half.T).tocsr()
    diagonal = -np.asarray(off.sum(axis=1)).ravel()
    stiffness = (off + sparse.diags(diagonal)).tocsr()

    mass = np.bincount(f.ravel(), weights=np.repeat(areas / 3.0, 3), minlength=n)
    if np.any(mass <= 0):
        raise MeshError(f"{int(np.sum(mass <= 0))} vertices belong to no face")
    return stiffness, mass


def _mass_normalize(phi: np.ndarray, mass: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ik,i,ik->k", phi, mass, phi))
    return phi / norms


def _residuals(stiffness, mass, eigenvalues, eigenfunctions) -> np.ndarray:
    if eigenfunctions is None or len(eigenvalues) == 0:
        return np.zeros(0)
    residual = stiffness @ eigenfunctions - (mass[:, None] * eigenfunctions) * eigenvalues
    return np.linalg.norm(residual, axis=0)


def solve_eigs(
    stiffness: sparse.spmatrix,
    mass: np.ndarray,
    k: int,
    dense_threshold: int = 2000,
    shift: float = -0.01,
    max_iter: int = 5000,
) -> SpectralBasis:
    """Smallest ``k`` eigenpairs of ``W phi = lambda M phi``, ascending.

    Small problems use a dense generalized solve; larger ones shift-invert
    Lanczos around ``shift`` (slightly below 0 so the factorized matrix is
    nonsingular), expressed in units of the unit-sphere spectrum of a shape
    with the same area.
    """
    n = len(mass)
    if not 1 <= k < n:
        raise SpectralError(f"need 1 <= k < n, got k={k}, n={n}")

    if n <= dense_threshold:
        eigenvalues, eigenfunctions = scipy.linalg.eigh(
            stiffness.toarray(), np.diag(mass), subset_by_index=[0, k - 1]
        )
    else:
        M = sparse.diags(mass).tocsc()
        sigma = shift * 4.0 * np.pi / float(mass.sum())
        try:
            eigenvalues, eigenfunctions = eigsh(
                stiffness.tocsc(), k=k, M=M, sigma=sigma, which="LM", maxiter=max_iter
            )
        except ArpackNoConvergence as e:
            residuals = _residuals(stiffness, mass, e.eigenvalues, e.eigenvectors)
            raise SpectralError(
                f"eigensolver did not converge after {max_iter} iterations "
                f"({len(e.eigenvalues)}/{k} pairs)",
                residuals=residuals,
            )

    order = np.argsort(eigenvalues, kind="stable")
    eigenvalues = np.asarray(eigenvalues[order], dtype=np.float64)
    eigenfunctions = _mass_normalize(eigenfunctions[:, order], mass)
    return SpectralBasis(eigenvalues, eigenfunctions, np.asarray(mass, dtype=np.float64))


def compute_basis(
    mesh: TriangleMesh,
    k: int,
    cot_clamp: float = 1e4,
    allow_disconnected: bool = False,
    dense_threshold: int = 2000,
    shift: float = -0.01,
    max_iter: int = 5000,
) -> SpectralBasis:
    stiffness, mass = build_laplacian(mesh, cot_clamp, allow_disconnected)
    return solve_eigs(stiffness, mass, k, dense_threshold, shift, max_iter)
