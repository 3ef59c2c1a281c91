"""Non-negative matrix factorization of feature-vector matrices.

Training finds non-negative W (n x K) and H (K x C) minimizing the squared
Frobenius reconstruction error of V ~ WH via Lee-Seung multiplicative
updates; inference re-solves W for fresh data while H stays fixed.  Rows of
H are the class vectors; W[m, k] is the intensity of class k on row m.

Class labels are 1-based everywhere user-facing (classes 1..K);
label 0 is the reserved "unassigned" sentinel for all-zero weight rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._accel import maybe_njit
from .errors import NumericalError, ValidationError
from .tensor_io import read_tensor, write_tensor

log = logging.getLogger(__name__)

EPS = 1e-12
UNASSIGNED = 0

DEFAULT_TRAIN_ITERS = 200
DEFAULT_INFER_ITERS = 100
DEFAULT_REL_TOL = 1e-4
# inference runs its full (cheap, W-only) iteration budget by default: the
# early-stop heuristic can quit on a plateau before matching training quality
DEFAULT_INFER_REL_TOL = 0.0


@dataclass(frozen=True)
class FactorModel:
    """Trained factorization basis plus training metadata."""

    basis: np.ndarray  # (k, channels) float64, all entries >= 0
    seed: int
    train_iterations: int
    final_objective: float

    @property
    def k(self) -> int:
        return self.basis.shape[0]

    @property
    def channels(self) -> int:
        return self.basis.shape[1]


class TrainResult(NamedTuple):
    model: FactorModel
    weights: np.ndarray  # (n, k) float64
    history: list[float]  # objective at init and after each iteration


def _as_nonneg_matrix(V, name: str = "V") -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2:
        raise ValidationError(f"{name} must be 2-d, got shape {V.shape}")
    if not np.isfinite(V).all():
        raise ValidationError(f"{name} contains NaN or Inf")
    if (V < 0).any():
        raise ValidationError(f"{name} contains negative entries")
    return V


def objective(V, W, H) -> float:
    """Squared Frobenius reconstruction error sum((V - WH)^2)."""
    V = np.asarray(V, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if W.shape[1] != H.shape[0] or V.shape != (W.shape[0], H.shape[1]):
        raise ValidationError(
            f"shape mismatch: V {V.shape}, W {W.shape}, H {H.shape}"
        )
    diff = V - W @ H
    return float(np.sum(diff * diff))


@maybe_njit
def _update_w(V, W, H):
    num = V @ H.T
    den = W @ (H @ H.T) + EPS
    return W * num / den


@maybe_njit
def _update_h(V, W, H):
    num = W.T @ V
    den = (W.T @ W) @ H + EPS
    return H * num / den


def _init_scale(V, k: int) -> float:
    # initial W*H magnitude ~ mean(V): entries ~ sqrt(mean/K) so the K-term
    # product sum lands near the data scale
    return float(np.sqrt(V.mean() / k))


def nmf_train(
    V,
    k: int,
    *,
    max_iters: int = DEFAULT_TRAIN_ITERS,
    rel_tol: float = DEFAULT_REL_TOL,
    seed: int = 0,
) -> TrainResult:
    """Factorize V (n x C) into k classes.

    Deterministic for a fixed seed.  Stops when the relative objective
    decrease falls below ``rel_tol`` or after ``max_iters`` iterations; the
    recorded objective sequence is non-increasing.
    """
    V = _as_nonneg_matrix(V)
    n, c = V.shape
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValidationError(f"k = {k} exceeds number of rows n = {n}")
    if not V.any():
        raise ValidationError("V is all-zero; nothing to factorize")

    rng = np.random.default_rng(seed)
    scale = _init_scale(V, k)
    # 1 - random() lies in (0, 1]: strictly positive starting factors
    W = (1.0 - rng.random((n, k))) * scale
    H = (1.0 - rng.random((k, c))) * scale

    history = [objective(V, W, H)]
    iterations = 0
    for _ in range(max_iters):
        W = _update_w(V, W, H)
        H = _update_h(V, W, H)
        dead = ~H.any(axis=1)
        if dead.any():
            for row in np.flatnonzero(dead):
                log.warning("reinitializing dead class %d", row + 1)
                H[row] = (1.0 - rng.random(c)) * scale
        iterations += 1
        obj = objective(V, W, H)
        history.append(obj)
        prev = history[-2]
        if prev <= 0.0 or (prev - obj) / prev < rel_tol:
            break
    if not np.isfinite(history[-1]):
        raise NumericalError("objective diverged to non-finite value")

    model = FactorModel(
        basis=H,
        seed=seed,
        train_iterations=iterations,
        final_objective=history[-1],
    )
    return TrainResult(model, W, history)


def nmf_infer(
    model: FactorModel,
    V,
    *,
    max_iters: int = DEFAULT_INFER_ITERS,
    rel_tol: float = DEFAULT_INFER_REL_TOL,
) -> np.ndarray:
    """Solve for the weight matrix of fresh data under the fixed basis.

    Deterministic: W starts from V H^T scaled by the row sums of H H^T,
    then runs multiplicative updates on W only.
    """
    V = _as_nonneg_matrix(V)
    H = model.basis
    if V.shape[1] != model.channels:
        raise ValidationError(
            f"V has {V.shape[1]} channels, model expects {model.channels}"
        )
    hht = H @ H.T
    W = (V @ H.T) / (hht.sum(axis=1) + EPS)
    prev = objective(V, W, H)
    for _ in range(max_iters):
        if prev <= 0.0:
            break
        W = _update_w(V, W, H)
        obj = objective(V, W, H)
        if rel_tol > 0.0 and (prev - obj) / prev < rel_tol:
            prev = obj
            break
        prev = obj
    if not np.isfinite(prev):
        raise NumericalError("inference objective diverged to non-finite value")
    return W


DEFAULT_PRUNE_REL = 0.05
DEFAULT_PRUNE_ROW_FLOOR = 0.02


def prune_weights(
    weights,
    rel_tol: float = DEFAULT_PRUNE_REL,
    row_floor: float = DEFAULT_PRUNE_ROW_FLOOR,
) -> np.ndarray:
    """Snap trailing-noise weights to exact zero.

    Multiplicative updates approach the non-negativity boundary only
    asymptotically, so entries that a boundary-reaching solver would set to
    exact zero linger at a small fraction of their row maximum.  Positivity
    masks (class coverage, positive-region IoU, constant-map detection)
    need real zeros, so two cleanups are applied: entries below ``rel_tol``
    times their row max are cleared, and rows whose max falls below
    ``row_floor`` times the strongest row (cells that are essentially
    background) are cleared entirely.  Zero for either tolerance disables
    that cleanup.
    """
    W = np.asarray(weights, dtype=np.float64)
    if rel_tol < 0 or row_floor < 0:
        raise ValidationError("prune tolerances must be >= 0")
    if rel_tol == 0 and row_floor == 0:
        return W
    out = W.copy()
    row_max = out.max(axis=1, keepdims=True)
    if rel_tol > 0:
        out[out < rel_tol * row_max] = 0.0
    if row_floor > 0:
        out[(row_max < row_floor * row_max.max()).ravel()] = 0.0
    return out


def argmax_cluster(weights) -> np.ndarray:
    """Hard clustering: 1-based class of highest weight per row.

    Ties resolve to the lowest class index; all-zero rows map to
    ``UNASSIGNED`` (0).
    """
    W = np.asarray(weights, dtype=np.float64)
    if W.ndim != 2:
        raise ValidationError(f"weights must be 2-d, got shape {W.shape}")
    out = W.argmax(axis=1) + 1
    out[~W.any(axis=1)] = UNASSIGNED
    return out


def save_model(model: FactorModel, path: str | Path) -> None:
    """Store the basis as a K x C x 1 tensor plus a text sidecar (.meta)."""
    path = Path(path)
    write_tensor(path, model.basis[:, :, None])
    meta = path.with_suffix(".meta")
    meta.write_text(
        "\n".join(
            [
                f"k = {model.k}",
                f"channels = {model.channels}",
                f"seed = {model.seed}",
                f"train_iterations = {model.train_iterations}",
                f"final_objective = {model.final_objective!r}",
            ]
        )
        + "\n",
        encoding="utf-8",
    )


def load_model(path: str | Path) -> FactorModel:
    path = Path(path)
    basis = read_tensor(path)[:, :, 0].astype(np.float64)
    meta: dict[str, str] = {}
    for line in path.with_suffix(".meta").read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    if int(meta["k"]) != basis.shape[0] or int(meta["channels"]) != basis.shape[1]:
        raise ValidationError(f"{path}: sidecar dims disagree with tensor shape")
    return FactorModel(
        basis=basis,
        seed=int(meta["seed"]),
        train_iterations=int(meta["train_iterations"]),
        final_objective=float(meta["final_objective"]),
    )
