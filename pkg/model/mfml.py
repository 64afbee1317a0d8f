"""
Multi-feature Mahalanobis metric learning with a LogDet consensus regularizer.

Every feature channel v gets a square projection ``L_v``; the per-channel
squared distance is ``||L_v (x_i - x_j)||^2``. Training minimizes, for fixed
consensus metric ``A*``,

    sum_v sum_pairs 1/2 g(1 - delta_ij (tau - d_v^2))
    + beta * sum_v 1/2 D_ld(L_v^T L_v + eps I, A*)
    + sum_v lam_v ||L_v||_F^2

with ``g(x) = log(1 + exp(rho x)) / rho``, alternating with the closed-form
consensus update ``A* = eps I + (1/m) sum_v L_v^T L_v``, which is the exact
minimizer of the LogDet term over ``A*``. The objective therefore never
increases over the alternation.
"""

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tqdm import trange

from core.errors import ConfigError, NumericError, TrainingError
from utils.logger import logger, show_progress

DTYPE = torch.float64

ArrayLike = Union[np.ndarray, torch.Tensor, Sequence[float]]


def _t(x: ArrayLike) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=DTYPE)


@dataclass(frozen=True)
class Hyperparams:
    tau: float = 2.0
    rho: float = 4.0
    beta: float = 0.1
    lam: Tuple[float, ...] = (0.01,)
    eps: float = 1e-3
    learning_rate: float = 1e-2
    max_iters: int = 300
    tol: float = 1e-6
    max_halvings: int = 20
    standardize: bool = True

    def lam_for(self, channel: int) -> float:
        return float(self.lam[channel] if len(self.lam) > 1 else self.lam[0])

    def validate(self, num_channels: int) -> "Hyperparams":
        if self.tau <= 1:
            raise ConfigError(f"tau must be > 1, got {self.tau}")
        if self.rho <= 0 or self.eps <= 0 or self.learning_rate <= 0 or self.tol <= 0:
            raise ConfigError("rho, eps, learning_rate and tol must be positive")
        if self.beta < 0 or any(v < 0 for v in self.lam):
            raise ConfigError("beta and lam must be nonnegative")
        if len(self.lam) not in (1, num_channels):
            raise ConfigError(f"lam has {len(self.lam)} values for {num_channels} channels")
        if self.max_iters < 1 or self.max_halvings < 0:
            raise ConfigError("max_iters must be >= 1 and max_halvings >= 0")
        return self


@dataclass(frozen=True, eq=False)
class PairConstraintSet:
    """Training pairs ``i < j``; ``delta`` is +1 for same class, -1 otherwise."""

    i: np.ndarray
    j: np.ndarray
    delta: np.ndarray
    tau: float = 2.0

    def __post_init__(self) -> None:
        i = np.asarray(self.i, dtype=np.int64).ravel()
        j = np.asarray(self.j, dtype=np.int64).ravel()
        delta = np.asarray(self.delta, dtype=np.float64).ravel()
        if not len(i) == len(j) == len(delta):
            raise ConfigError("pair index and sign arrays differ in length")
        if np.any(i >= j):
            raise ConfigError("pairs must satisfy i < j (no self-pairs)")
        if not np.all(np.isin(delta, (-1.0, 1.0))):
            raise ConfigError("pair signs must be +1 or -1")
        object.__setattr__(self, "i", i)
        object.__setattr__(self, "j", j)
        object.__setattr__(self, "delta", delta)

    def __len__(self) -> int:
        return len(self.i)

    @property
    def num_positive(self) -> int:
        return int(np.sum(self.delta > 0))

    @property
    def num_negative(self) -> int:
        return int(np.sum(self.delta < 0))


def _matrix_dict(matrix: np.ndarray) -> dict:
    return {
        "rows": int(matrix.shape[0]),
        "cols": int(matrix.shape[1]),
        "data": matrix.ravel(order="C").tolist(),
    }


def _matrix_from(data: dict) -> np.ndarray:
    return np.asarray(data["data"], dtype=np.float64).reshape(data["rows"], data["cols"])


@dataclass(frozen=True, eq=False)
class MetricModel:
    L: Tuple[np.ndarray, ...]
    a_star: np.ndarray
    hyper: Hyperparams
    trace: Tuple[float, ...] = ()
    scales: Tuple[float, ...] = ()
    channels: Tuple[str, ...] = ()
    converged: bool = False

    @property
    def num_channels(self) -> int:
        return len(self.L)

    @property
    def dim(self) -> int:
        return self.a_star.shape[0]

    def standardize(self, vectors: np.ndarray, channel: int) -> np.ndarray:
        scale = self.scales[channel] if self.scales else 1.0
        return np.asarray(vectors, dtype=np.float64) / scale

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "dim": self.dim,
            "L": [_matrix_dict(L) for L in self.L],
            "a_star": _matrix_dict(self.a_star),
            "scales": list(self.scales),
            "hyper": asdict(self.hyper),
            "iterations": max(len(self.trace) - 1, 0),
            "converged": self.converged,
            "final_objective": self.trace[-1] if self.trace else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricModel":
        hyper = dict(data["hyper"])
        hyper["lam"] = tuple(hyper["lam"])
        return cls(
            L=tuple(_matrix_from(m) for m in data["L"]),
            a_star=_matrix_from(data["a_star"]),
            hyper=Hyperparams(**hyper),
            scales=tuple(data.get("scales", ())),
            channels=tuple(data.get("channels", ())),
            converged=bool(data.get("converged", False)),
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MetricModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save_trace(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        frame = pd.DataFrame(
            {"iteration": np.arange(len(self.trace)), "objective": list(self.trace)}
        )
        frame.to_csv(path, index=False, float_format="%.17g")
        return path


# ---------------------------------------------------------------------------
# scalar pieces


def smoothed_hinge(x, rho: float):
    """``log(1 + exp(rho x)) / rho`` without overflow.

    Uses ``max(z, 0) + log1p(exp(-|z|))``, so for large ``rho x`` the result is
    ``x`` plus an underflow-safe remainder.
    """
    if rho <= 0:
        raise ConfigError(f"rho must be positive, got {rho}")
    scalar = not torch.is_tensor(x) and np.ndim(x) == 0
    z = rho * _t(x)
    out = (torch.clamp(z, min=0.0) + torch.log1p(torch.exp(-torch.abs(z)))) / rho
    return float(out) if scalar else out


def hinge_slope(x, rho: float):
    """Derivative of :func:`smoothed_hinge`: ``sigmoid(rho x)``."""
    scalar = not torch.is_tensor(x) and np.ndim(x) == 0
    out = torch.sigmoid(rho * _t(x))
    return float(out) if scalar else out


def mahalanobis_sq(x: ArrayLike, y: ArrayLike, L: ArrayLike) -> float:
    diff = _t(x) - _t(y)
    return float(torch.sum((_t(L) @ diff) ** 2))


def logdet_divergence(A: ArrayLike, B: ArrayLike, eps: float = 1e-3) -> float:
    """Burg (LogDet) divergence ``tr(A B^-1) - log det(A B^-1) - n``.

    ``B`` must be positive definite. A singular ``A`` is regularized with
    ``eps * I`` and a warning.
    """
    A, B = _t(A), _t(B)
    n = A.shape[0]
    if A.shape != (n, n) or B.shape != (n, n):
        raise NumericError("LogDet divergence needs square matrices of equal size")
    chol_b, info = torch.linalg.cholesky_ex(B)
    if int(info) != 0:
        raise NumericError("LogDet divergence: second argument is not positive definite")
    chol_a, info = torch.linalg.cholesky_ex(A)
    if int(info) != 0:
        logger.warning(f"LogDet divergence: first argument singular, adding {eps:g} I")
        A = A + eps * torch.eye(n, dtype=DTYPE)
        chol_a, info = torch.linalg.cholesky_ex(A)
        if int(info) != 0:
            raise NumericError("LogDet divergence: first argument is not positive semidefinite")
    trace = torch.trace(torch.cholesky_solve(A, chol_b))
    logdet = 2.0 * (
        torch.log(torch.diagonal(chol_a)).sum() - torch.log(torch.diagonal(chol_b)).sum()
    )
    return float(trace - logdet - n)


# ---------------------------------------------------------------------------
# objective and gradient


@dataclass
class _Consensus:
    """A* with its factorization, fixed while one channel descends."""

    a_star: torch.Tensor
    chol: torch.Tensor
    inverse: torch.Tensor
    logdet: torch.Tensor

    @classmethod
    def of(cls, a_star: torch.Tensor) -> "_Consensus":
        chol, info = torch.linalg.cholesky_ex(a_star)
        if int(info) != 0:
            raise TrainingError("consensus metric is not positive definite")
        eye = torch.eye(a_star.shape[0], dtype=DTYPE)
        inverse = torch.cholesky_solve(eye, chol)
        logdet = 2.0 * torch.log(torch.diagonal(chol)).sum()
        return cls(a_star, chol, inverse, logdet)


@dataclass
class _Channel:
    diffs: torch.Tensor  # (P, d) rows x_i - x_j
    delta: torch.Tensor  # (P,)
    lam: float


def _channels(features: Sequence[ArrayLike], pairs: PairConstraintSet, hyper: Hyperparams):
    delta = _t(pairs.delta)
    out = []
    for v, X in enumerate(features):
        X = _t(X)
        out.append(_Channel(X[pairs.i] - X[pairs.j], delta, hyper.lam_for(v)))
    return out


def _hinge_value(L: torch.Tensor, ch: _Channel, hyper: Hyperparams):
    d2 = torch.sum((ch.diffs @ L.T) ** 2, dim=1)
    z = 1.0 - ch.delta * (hyper.tau - d2)
    return 0.5 * torch.sum(smoothed_hinge(z, hyper.rho)), z


def _logdet_value(L: torch.Tensor, consensus: _Consensus, eps: float) -> torch.Tensor:
    d = L.shape[1]
    shifted = L.T @ L + eps * torch.eye(d, dtype=DTYPE)
    chol = torch.linalg.cholesky(shifted)
    logdet = 2.0 * torch.log(torch.diagonal(chol)).sum()
    trace = torch.sum(consensus.inverse * shifted)
    return trace - logdet + consensus.logdet - d


def _channel_objective(
    L: torch.Tensor,
    ch: _Channel,
    hyper: Hyperparams,
    consensus: Optional[_Consensus],
) -> torch.Tensor:
    value, _ = _hinge_value(L, ch, hyper)
    if consensus is not None and hyper.beta > 0:
        value = value + 0.5 * hyper.beta * _logdet_value(L, consensus, hyper.eps)
    return value + ch.lam * torch.sum(L**2)


def ridge_pinv_transpose(L: torch.Tensor, eps: float) -> torch.Tensor:
    """``L (L^T L + eps I)^-1`` via SVD: ``U diag(s / (s^2 + eps)) V^T``."""
    U, s, Vh = torch.linalg.svd(L)
    return (U * (s / (s**2 + eps))) @ Vh


def _channel_gradient(
    L: torch.Tensor,
    ch: _Channel,
    hyper: Hyperparams,
    consensus: Optional[_Consensus],
) -> torch.Tensor:
    _, z = _hinge_value(L, ch, hyper)
    weights = ch.delta * torch.sigmoid(hyper.rho * z)
    scatter = (ch.diffs * weights[:, None]).T @ ch.diffs
    grad = L @ scatter
    if consensus is not None and hyper.beta > 0:
        grad = grad + hyper.beta * (
            L @ consensus.inverse - ridge_pinv_transpose(L, hyper.eps)
        )
    return grad + 2.0 * ch.lam * L


def consensus_metric(Ls: Sequence[ArrayLike], eps: float) -> torch.Tensor:
    Ls = [_t(L) for L in Ls]
    d = Ls[0].shape[1]
    total = torch.zeros((d, d), dtype=DTYPE)
    for L in Ls:
        total = total + L.T @ L
    return eps * torch.eye(d, dtype=DTYPE) + total / len(Ls)


def _check_finite(value: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(value)):
        raise TrainingError(f"non-finite objective ({what})")


def objective(
    features: Sequence[ArrayLike], pairs: PairConstraintSet, model: MetricModel
) -> float:
    """Full objective with the model's ``A*`` held as given."""
    if len(features) != model.num_channels:
        raise TrainingError(
            f"{len(features)} feature channels for a {model.num_channels}-channel model"
        )
    hyper = model.hyper
    consensus = _Consensus.of(_t(model.a_star)) if hyper.beta > 0 else None
    total = torch.zeros((), dtype=DTYPE)
    for v, ch in enumerate(_channels(features, pairs, hyper)):
        value = _channel_objective(_t(model.L[v]), ch, hyper, consensus)
        _check_finite(value, f"channel {v}, {len(pairs)} pairs")
        total = total + value
    return float(total)


def objective_gradient(
    features: Sequence[ArrayLike], pairs: PairConstraintSet, model: MetricModel, channel: int
) -> np.ndarray:
    """Analytic gradient of :func:`objective` with respect to ``L_channel``."""
    hyper = model.hyper
    consensus = _Consensus.of(_t(model.a_star)) if hyper.beta > 0 else None
    ch = _channels([features[channel]], pairs, hyper)[0]
    ch.lam = hyper.lam_for(channel)
    return _channel_gradient(_t(model.L[channel]), ch, hyper, consensus).numpy()


@dataclass
class StepResult:
    L: np.ndarray
    objective: float
    learning_rate: float
    accepted: bool


def _descend(
    L: torch.Tensor,
    ch: _Channel,
    hyper: Hyperparams,
    consensus: Optional[_Consensus],
) -> Tuple[torch.Tensor, torch.Tensor, float, bool]:
    """One gradient step with step halving until the objective does not increase."""
    current = _channel_objective(L, ch, hyper, consensus)
    grad = _channel_gradient(L, ch, hyper, consensus)
    eta = hyper.learning_rate
    for _ in range(hyper.max_halvings + 1):
        candidate = L - eta * grad
        value = _channel_objective(candidate, ch, hyper, consensus)
        if bool(torch.isfinite(value)) and value <= current:
            return candidate, value, eta, True
        eta *= 0.5
    return L, current, 0.0, False


def gradient_step(
    features: Sequence[ArrayLike], pairs: PairConstraintSet, model: MetricModel, channel: int
) -> StepResult:
    hyper = model.hyper
    consensus = _Consensus.of(_t(model.a_star)) if hyper.beta > 0 else None
    ch = _channels([features[channel]], pairs, hyper)[0]
    ch.lam = hyper.lam_for(channel)
    L, value, eta, accepted = _descend(_t(model.L[channel]), ch, hyper, consensus)
    return StepResult(L.numpy(), float(value), eta, accepted)


def update_consensus(model: MetricModel) -> MetricModel:
    a_star = consensus_metric(model.L, model.hyper.eps)
    return replace(model, a_star=a_star.numpy())


# ---------------------------------------------------------------------------
# training


def channel_scale(X: ArrayLike) -> float:
    """Root mean squared distance over all pairs ``i != j``."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if n < 2:
        return 1.0
    spread = np.sum((X - X.mean(axis=0)) ** 2) / n
    scale = float(np.sqrt(2.0 * n / (n - 1) * spread))
    return scale if scale > 0 else 1.0


def _prepare(features: Sequence[ArrayLike], hyper: Hyperparams):
    arrays = [np.asarray(X, dtype=np.float64) for X in features]
    if not arrays:
        raise TrainingError("no feature channels")
    n, d = arrays[0].shape
    for v, X in enumerate(arrays):
        if X.shape != (n, d):
            raise TrainingError(f"channel {v} is {X.shape}, expected {(n, d)}")
    scales = [channel_scale(X) if hyper.standardize else 1.0 for X in arrays]
    return [X / s for X, s in zip(arrays, scales)], scales, d


def _check_pairs(pairs: PairConstraintSet, n: int) -> None:
    if len(pairs) == 0:
        raise TrainingError("no training pairs")
    if pairs.num_negative == 0:
        raise TrainingError("training needs at least two classes")
    if pairs.j.max() >= n:
        raise TrainingError(f"pair index {int(pairs.j.max())} out of range for {n} samples")


def _relative_change(previous: float, current: float) -> float:
    return abs(previous - current) / max(abs(previous), 1e-300)


def train(
    features: Sequence[ArrayLike],
    pairs: PairConstraintSet,
    hyper: Hyperparams,
    seed: int = 0,
    channels: Sequence[str] = (),
) -> MetricModel:
    """Alternate a descent step on every ``L_v`` with the consensus update.

    Args:
        features: One ``(n, d)`` array per channel, rows aligned across channels.
        pairs: Training pairs indexing those rows.
        hyper: Objective and optimizer settings, validated against the
            channel count.
        seed: Torch seed.
        channels: Optional channel names stored on the model.

    Returns:
        The metrics, their consensus, the objective trace and the channel
        scales. The objective of the returned metrics is ``trace[-1]``.
    """
    hyper.validate(len(features))
    torch.manual_seed(seed)
    standardized, scales, d = _prepare(features, hyper)
    _check_pairs(pairs, len(standardized[0]))
    chans = _channels(standardized, pairs, hyper)

    Ls = [torch.eye(d, dtype=DTYPE) for _ in chans]
    a_star = consensus_metric(Ls, hyper.eps)
    use_consensus = hyper.beta > 0

    def total(consensus):
        return sum(_channel_objective(L, ch, hyper, consensus) for L, ch in zip(Ls, chans))

    consensus = _Consensus.of(a_star) if use_consensus else None
    current = total(consensus)
    if not bool(torch.isfinite(current)):
        raise TrainingError("non-finite objective at initialization")
    trace = [float(current)]
    converged = False

    for iteration in trange(
        hyper.max_iters, desc="MfML", leave=False, disable=not show_progress()
    ):
        previous = (list(Ls), a_star, consensus)
        moved = False
        for v, ch in enumerate(chans):
            Ls[v], _, eta, accepted = _descend(Ls[v], ch, hyper, consensus)
            moved = moved or accepted
            if not accepted:
                logger.debug(f"iteration {iteration}: channel {v} line search exhausted")
        a_star = consensus_metric(Ls, hyper.eps)
        consensus = _Consensus.of(a_star) if use_consensus else None
        value = float(total(consensus))
        if not np.isfinite(value):
            raise TrainingError(f"non-finite objective at iteration {iteration}")
        if value > trace[-1]:
            # only round-off can raise it; keep the metrics of the last recorded point
            logger.debug(f"iteration {iteration}: objective rose by {value - trace[-1]:.3e}")
            Ls[:], a_star, consensus = previous
            converged = True
            break
        trace.append(value)
        if not moved or _relative_change(trace[-2], value) < hyper.tol:
            converged = True
            break

    logger.info(
        f"MfML finished after {len(trace) - 1} iterations, "
        f"objective {trace[0]:.6g} -> {trace[-1]:.6g}"
    )
    return MetricModel(
        L=tuple(L.numpy() for L in Ls),
        a_star=a_star.numpy(),
        hyper=hyper,
        trace=tuple(trace),
        scales=tuple(scales),
        channels=tuple(channels),
        converged=converged,
    )


def train_single_metric(
    features: ArrayLike, pairs: PairConstraintSet, hyper: Hyperparams, seed: int = 0
) -> MetricModel:
    """Single-channel learner: smoothed hinge plus Frobenius penalty only."""
    hyper.validate(1)
    torch.manual_seed(seed)
    (X,), (scale,), d = _prepare([features], hyper)
    _check_pairs(pairs, len(X))
    (ch,) = _channels([X], pairs, hyper)

    L = torch.eye(d, dtype=DTYPE)
    current = _channel_objective(L, ch, hyper, None)
    if not bool(torch.isfinite(current)):
        raise TrainingError("non-finite objective at initialization")
    trace = [float(current)]
    converged = False
    for _ in range(hyper.max_iters):
        candidate, value, _, accepted = _descend(L, ch, hyper, None)
        value = float(value)
        if value > trace[-1]:
            converged = True
            break
        L = candidate
        trace.append(value)
        if not accepted or _relative_change(trace[-2], value) < hyper.tol:
            converged = True
            break
    return MetricModel(
        L=(L.numpy(),),
        a_star=consensus_metric([L], hyper.eps).numpy(),
        hyper=hyper,
        trace=tuple(trace),
        scales=(scale,),
        converged=converged,
    )


# ---------------------------------------------------------------------------
# pair sampling


def sample_pairs(
    labels: Sequence[str],
    per_class_cap: int = 0,
    neg_ratio: float = 1.0,
    seed: int = 0,
    tau: float = 2.0,
) -> PairConstraintSet:
    """Same-class pairs (optionally capped per class) plus sampled cross-class pairs.

    ``per_class_cap=0`` keeps every positive pair; ``neg_ratio=0`` keeps every
    negative pair, otherwise ``round(neg_ratio * positives)`` are drawn.
    """
    labels = np.asarray([str(v) for v in labels])
    n = len(labels)
    if n < 2:
        raise ConfigError("pair sampling needs at least 2 samples")
    rng = np.random.default_rng(seed)

    positives: List[Tuple[int, int]] = []
    for label in sorted(set(labels.tolist())):
        members = np.flatnonzero(labels == label)
        if len(members) < 2:
            logger.warning(f"class {label!r} has 1 member and contributes no positive pairs")
            continue
        class_pairs = list(itertools.combinations(members.tolist(), 2))
        if per_class_cap and len(class_pairs) > per_class_cap:
            keep = np.sort(rng.choice(len(class_pairs), size=per_class_cap, replace=False))
            class_pairs = [class_pairs[k] for k in keep]
        positives.extend(class_pairs)
    positives.sort()

    rows, cols = np.triu_indices(n, k=1)
    different = labels[rows] != labels[cols]
    neg_i, neg_j = rows[different], cols[different]
    if neg_ratio > 0:
        target = int(round(neg_ratio * len(positives)))
        if target < len(neg_i):
            keep = np.sort(rng.choice(len(neg_i), size=target, replace=False))
            neg_i, neg_j = neg_i[keep], neg_j[keep]

    pos = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    i = np.concatenate([pos[:, 0], neg_i])
    j = np.concatenate([pos[:, 1], neg_j])
    delta = np.concatenate([np.ones(len(pos)), -np.ones(len(neg_i))])
    return PairConstraintSet(i, j, delta, tau)
