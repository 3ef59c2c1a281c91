"""Quantitative characterization of the classes.

Three views on what the classes mean: correlation of class weights across
tiles, cosine similarity of the class vectors themselves, and a logistic
regression surrogate predicting the classifier's output from per-tile class
features (sum of weights, coverage, max weight, or average positive weight).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError, ValidationError
from .nmf import FactorModel
from .stats import RunningStats

FEATURE_KINDS = ("sum", "coverage", "max", "avg_positive")


@dataclass(frozen=True)
class TileClassFeatures:
    """Per-tile class summaries feeding the surrogate and correlations."""

    sum_weights: np.ndarray  # (K,) total class weight over cells
    coverage: np.ndarray  # (K,) fraction of cells with weight > 0
    max_weight: np.ndarray  # (K,)
    avg_positive_weight: np.ndarray  # (K,) sum / count of positive cells, 0 if none
    label: int  # model prediction, 1 = cancer

    @property
    def k(self) -> int:
        return self.sum_weights.shape[0]

    def by_kind(self, kind: str) -> np.ndarray:
        if kind == "sum":
            return self.sum_weights
        if kind == "coverage":
            return self.coverage
        if kind == "max":
            return self.max_weight
        if kind == "avg_positive":
            return self.avg_positive_weight
        raise ValidationError(f"unknown feature kind {kind!r}, expected one of {FEATURE_KINDS}")


def tile_class_features(weight_map: np.ndarray, label: int) -> TileClassFeatures:
    """Summarize one tile's (cells x K) or (h, w, K) weight map."""
    w = np.asarray(weight_map, dtype=np.float64)
    if w.ndim == 3:
        w = w.reshape(-1, w.shape[2])
    if w.ndim != 2 or w.shape[0] == 0:
        raise ValidationError(f"weight map must be non-empty (cells, K), got shape {w.shape}")
    positive = w > 0
    pos_count = positive.sum(axis=0)
    sums = w.sum(axis=0)
    with np.errstate(invalid="ignore"):
        avg_pos = np.where(pos_count > 0, sums / np.maximum(pos_count, 1), 0.0)
    return TileClassFeatures(
        sum_weights=sums,
        coverage=pos_count / w.shape[0],
        max_weight=w.max(axis=0),
        avg_positive_weight=avg_pos,
        label=int(label),
    )


def feature_matrix(tiles: list[TileClassFeatures], kind: str) -> np.ndarray:
    if not tiles:
        raise ValidationError("no tiles")
    return np.stack([t.by_kind(kind) for t in tiles]).astype(np.float64)


def labels_vector(tiles: list[TileClassFeatures]) -> np.ndarray:
    return np.array([t.label for t in tiles], dtype=np.int64)


@dataclass(frozen=True)
class CorrelationMatrix:
    """K x K mean and std of class-weight correlations; ``defined`` marks
    entries that could be computed (constant columns make Pearson undefined
    and are reported as missing rather than NaN)."""

    mean: np.ndarray
    std: np.ndarray
    defined: np.ndarray


def _pairwise_pearson(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(K, K) Pearson matrix over columns plus a defined mask."""
    k = X.shape[1]
    sd = X.std(axis=0)
    ok = sd > 0
    corr = np.zeros((k, k))
    if ok.any():
        sub = np.corrcoef(X[:, ok], rowvar=False)
        sub = np.atleast_2d(sub)
        idx = np.flatnonzero(ok)
        corr[np.ix_(idx, idx)] = sub
    defined = np.outer(ok, ok)
    return corr, defined


def weight_correlation_matrix(
    tiles: list[TileClassFeatures],
    kind: str = "sum",
    *,
    n_resamples: int = 100,
    resample_size: int = 1000,
    seed: int = 0,
) -> CorrelationMatrix:
    """Bootstrap mean +- std of pairwise class-weight correlations.

    Each resample draws ``resample_size`` tiles with replacement and
    computes the K x K Pearson matrix of the chosen feature kind; mean and
    std are taken per entry over the resamples where the entry was defined.
    The diagonal is exactly 1.
    """
    if len(tiles) < 2:
        raise ValidationError("need at least 2 tiles")
    X = feature_matrix(tiles, kind)
    k = X.shape[1]
    rng = np.random.default_rng(seed)
    acc = [[RunningStats() for _ in range(k)] for _ in range(k)]
    for _ in range(n_resamples):
        idx = rng.integers(0, X.shape[0], size=resample_size)
        corr, defined = _pairwise_pearson(X[idx])
        for a in range(k):
            for b in range(k):
                if defined[a, b]:
                    acc[a][b].add(corr[a, b])
    mean = np.zeros((k, k))
    std = np.zeros((k, k))
    defined = np.zeros((k, k), dtype=bool)
    for a in range(k):
        for b in range(k):
            if acc[a][b].count:
                mean[a, b] = acc[a][b].mean
                std[a, b] = acc[a][b].std
                defined[a, b] = True
    np.fill_diagonal(mean, 1.0)
    np.fill_diagonal(std, 0.0)
    np.fill_diagonal(defined, True)
    return CorrelationMatrix(mean=mean, std=std, defined=defined)


def per_tile_weight_correlation(weight_maps: list[np.ndarray]) -> CorrelationMatrix:
    """Alternative resampling unit: correlate class channels over each
    tile's cells, then aggregate mean +- std across tiles."""
    if not weight_maps:
        raise ValidationError("no tiles")
    k = np.asarray(weight_maps[0]).shape[-1]
    acc = [[RunningStats() for _ in range(k)] for _ in range(k)]
    for wmap in weight_maps:
        w = np.asarray(wmap, dtype=np.float64).reshape(-1, k)
        corr, defined = _pairwise_pearson(w)
        for a in range(k):
            for b in range(k):
                if defined[a, b]:
                    acc[a][b].add(corr[a, b])
    mean = np.zeros((k, k))
    std = np.zeros((k, k))
    defined = np.zeros((k, k), dtype=bool)
    for a in range(k):
        for b in range(k):
            if acc[a][b].count:
                mean[a, b] = acc[a][b].mean
                std[a, b] = acc[a][b].std
                defined[a, b] = True
    np.fill_diagonal(mean, 1.0)
    np.fill_diagonal(std, 0.0)
    np.fill_diagonal(defined, True)
    return CorrelationMatrix(mean=mean, std=std, defined=defined)


def class_cosine_similarity(model: FactorModel | np.ndarray) -> np.ndarray:
    """Cosine similarity between class vectors (rows of H).

    Symmetric, unit diagonal, entries in [0, 1] since H is non-negative.
    """
    H = model.basis if isinstance(model, FactorModel) else np.asarray(model, dtype=np.float64)
    norms = np.linalg.norm(H, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValidationError(f"class {zero[0] + 1} has an all-zero vector")
    sim = (H @ H.T) / np.outer(norms, norms)
    sim = np.clip(sim, 0.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    return sim


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    flags: tuple[str, ...] = ()


def _tie_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_score(scores, labels) -> float | None:
    """Rank-statistic AUC (Mann-Whitney) with 0.5 credit for ties.

    None when one of the label groups is empty.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _tie_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metric_suite(scores, labels, threshold: float = 0.5) -> Metrics:
    """Accuracy / precision / recall / F1 at the threshold, plus AUC.

    Zero-denominator metrics are reported as 0 with an explanatory flag.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise ValidationError(f"length mismatch: {scores.shape} vs {labels.shape}")
    if scores.size < 1:
        raise ValidationError("need at least one sample")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be binary 0/1")
    pred = scores >= threshold
    pos = labels == 1
    tp = int((pred & pos).sum())
    fp = int((pred & ~pos).sum())
    fn = int((~pred & pos).sum())
    flags: list[str] = []
    accuracy = float((pred == pos).mean())
    if tp + fp == 0:
        precision = 0.0
        flags.append("precision undefined (no predicted positives); reported as 0")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        flags.append("recall undefined (no positive labels); reported as 0")
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0:
        f1 = 0.0
        flags.append("f1 undefined (precision + recall = 0); reported as 0")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    auc = auc_score(scores, labels)
    if auc is None:
        auc = 0.0
        flags.append("auc undefined (single-label data); reported as 0")
    return Metrics(
        accuracy=accuracy,
        precision=float(precision),
        recall=float(recall),
        f1=float(f1),
        auc=float(auc),
        flags=tuple(flags),
    )


@dataclass(frozen=True)
class SurrogateModel:
    """Logistic surrogate of the classifier over class features.

    Coefficients live in standardized feature space (each input column
    shifted/scaled to mean 0, var 1 before fitting), so their signs are the
    interpretable part; metrics are computed on the fitting data, since the
    surrogate measures fidelity to the model rather than generalization.
    """

    coefficients: np.ndarray  # (K,)
    intercept: float
    feature_kind: str
    metrics: Metrics
    converged: bool
    n_iters: int
    loss_history: tuple[float, ...]
    feature_mean: np.ndarray
    feature_scale: np.ndarray

    def scores(self, features: np.ndarray) -> np.ndarray:
        X = (np.asarray(features, dtype=np.float64) - self.feature_mean) / self.feature_scale
        return _sigmoid(X @ self.coefficients + self.intercept)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _nll(z: np.ndarray, y: np.ndarray, w: np.ndarray, l2: float) -> float:
    # log(1 + e^z) - y z, computed stably, plus the ridge term
    return float(np.sum(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * np.sum(w * w))


def fit_surrogate(
    tiles: list[TileClassFeatures],
    kind: str = "sum",
    *,
    l2: float = 1e-4,
    max_iters: int = 100,
    tol: float = 1e-8,
) -> SurrogateModel:
    """L2-regularized logistic regression by damped Newton (IRLS) steps.

    Step sizes are backtracked until the regularized negative log-likelihood
    decreases, so the loss history is non-increasing.  Non-convergence
    within ``max_iters`` is reported on the model, not raised.
    """
    X = feature_matrix(tiles, kind)
    y = labels_vector(tiles).astype(np.float64)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValidationError("both labels must be present to fit the surrogate")

    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    if (sd == 0).all():
        raise DegenerateDataError("all feature columns are constant")
    scale = np.where(sd > 0, sd, 1.0)
    Xs = (X - mu) / scale

    n, k = Xs.shape
    A = np.hstack([Xs, np.ones((n, 1))])
    theta = np.zeros(k + 1)
    reg = np.zeros(k + 1)
    reg[:k] = l2
    loss = _nll(A @ theta, y, theta[:k], l2)
    history = [loss]
    converged = False
    iters = 0
    for _ in range(max_iters):
        p = _sigmoid(A @ theta)
        grad = A.T @ (p - y) + reg * theta
        s = p * (1.0 - p)
        hess = A.T @ (A * s[:, None]) + np.diag(reg)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        slope = float(grad @ step)
        t = 1.0
        new_theta = theta - step
        new_loss = _nll(A @ new_theta, y, new_theta[:k], l2)
        while new_loss > loss - 1e-4 * t * slope and t > 1e-12:
            t *= 0.5
            new_theta = theta - t * step
            new_loss = _nll(A @ new_theta, y, new_theta[:k], l2)
        iters += 1
        if new_loss > loss:
            break  # no descent direction left; keep the best iterate
        theta, prev, loss = new_theta, loss, new_loss
        history.append(loss)
        if abs(prev - loss) <= tol * max(1.0, abs(prev)):
            converged = True
            break

    scores = _sigmoid(A @ theta)
    return SurrogateModel(
        coefficients=theta[:k],
        intercept=float(theta[k]),
        feature_kind=kind,
        metrics=metric_suite(scores, y.astype(np.int64)),
        converged=converged,
        n_iters=iters,
        loss_history=tuple(history),
        feature_mean=mu,
        feature_scale=scale,
    )


def format_matrix_tsv(matrix: CorrelationMatrix | np.ndarray, *, header: str = "class") -> str:
    """Correlation (mean/std/missing) or plain matrix as a TSV table."""
    if isinstance(matrix, CorrelationMatrix):
        k = matrix.mean.shape[0]
        rows = [header + "\t" + "\t".join(str(b + 1) for b in range(k))]
        for a in range(k):
            cells = []
            for b in range(k):
                if matrix.defined[a, b]:
                    cells.append(f"{matrix.mean[a, b]:.4f}±{matrix.std[a, b]:.4f}")
                else:
                    cells.append("missing")
            rows.append(f"{a + 1}\t" + "\t".join(cells))
        return "\n".join(rows) + "\n"
    m = np.asarray(matrix)
    k = m.shape[0]
    rows = [header + "\t" + "\t".join(str(b + 1) for b in range(k))]
    for a in range(k):
        rows.append(f"{a + 1}\t" + "\t".join(f"{m[a, b]:.4f}" for b in range(k)))
    return "\n".join(rows) + "\n"


def format_surrogate_tsv(model: SurrogateModel) -> str:
    lines = ["class\tcoefficient"]
    for i, c in enumerate(model.coefficients):
        lines.append(f"{i + 1}\t{c:+.4f}")
    m = model.metrics
    lines += [
        "",
        "metric\tvalue",
        f"accuracy\t{m.accuracy:.4f}",
        f"precision\t{m.precision:.4f}",
        f"recall\t{m.recall:.4f}",
        f"f1\t{m.f1:.4f}",
        f"auc\t{m.auc:.4f}",
    ]
    for flag in m.flags:
        lines.append(f"# {flag}")
    return "\n".join(lines) + "\n"
