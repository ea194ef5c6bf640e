"""Training losses for progress estimation and action classification.

Three progress objectives live here: squared-error regression on the bin
value, cross-entropy over bins, and a cumulative-probability loss that
compares the CDF of the normalized sigmoid scores against the ground-truth
step function. The CDF form penalizes a wrong bin in proportion to its
distance from the true bin, which plain cross-entropy cannot do.

Every loss returns its analytic gradient; the test suite checks each one
against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import sigmoid, softmax

Array = np.ndarray


@dataclass(frozen=True)
class ProgressBin:
    """A discrete progress label: bin index within an N-bin granularity."""

    bin_index: int
    n_bins: int

    def __post_init__(self) -> None:
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if not 0 <= self.bin_index < self.n_bins:
            raise ValueError(f"bin_index {self.bin_index} outside [0, {self.n_bins})")


def progress_bin(prefix_len: int, total_len: int, n_bins: int) -> ProgressBin:
    """Discretize a prefix of a sequence into one of ``n_bins`` progress bins.

    ``floor(prefix_len * n_bins / total_len)``, clamped to the last bin when
    the prefix covers the whole sequence (the raw floor would land one past
    the end there).
    """
    if total_len <= 0:
        raise ValueError("total_len must be positive")
    if not 1 <= prefix_len <= total_len:
        raise ValueError(f"prefix_len {prefix_len} outside [1, {total_len}]")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    raw = (prefix_len * n_bins) // total_len
    return ProgressBin(min(raw, n_bins - 1), n_bins)


def one_hot_progress(g: ProgressBin) -> Array:
    """Binary indicator vector with a single 1 at the labeled bin."""
    v = np.zeros(g.n_bins)
    v[g.bin_index] = 1.0
    return v


def cumulative_matrix(n_bins: int) -> Array:
    """Upper-triangular all-ones matrix; row-vector right-multiplication by
    it turns a probability vector into its CDF."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    return np.triu(np.ones((n_bins, n_bins)))


def _as_bin(g: ProgressBin | int, n_bins: int) -> int:
    if isinstance(g, ProgressBin):
        if g.n_bins != n_bins:
            raise ValueError(f"bin granularity {g.n_bins} does not match vector length {n_bins}")
        return g.bin_index
    g = int(g)
    if not 0 <= g < n_bins:
        raise ValueError(f"bin index {g} outside [0, {n_bins})")
    return g


# ---------------------------------------------------------------------------
# Scalar regression
# ---------------------------------------------------------------------------

def l2_progress_loss(target: float, predicted: float) -> tuple[float, float]:
    """Squared error on the progress value; gradient w.r.t. the prediction.

    Penalty grows with the squared gap, so the same absolute error costs far
    more near the end of a sequence than near the start: loss(9 vs 1) is 64
    while loss(4 vs 1) is 9, a ratio above 7.
    """
    diff = float(target) - float(predicted)
    return diff * diff, -2.0 * diff


# ---------------------------------------------------------------------------
# Cross-entropy
# ---------------------------------------------------------------------------

def cross_entropy_loss(logits: Array, target: int) -> tuple[float, Array]:
    """Softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ValueError("logits must be a nonempty vector")
    if not 0 <= target < logits.size:
        raise ValueError(f"target {target} outside [0, {logits.size})")
    shifted = logits - logits.max()
    log_z = np.log(np.sum(np.exp(shifted)))
    loss = float(log_z - shifted[target])
    grad = softmax(logits)
    grad[target] -= 1.0
    return loss, grad


def cross_entropy_batch(logits: Array, targets: Array) -> tuple[Array, Array]:
    """Row-wise cross-entropy: per-sample losses and per-sample logit grads."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets < 0) or np.any(targets >= logits.shape[1]):
        raise ValueError("target class outside logit range")
    rows = np.arange(logits.shape[0])
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    losses = log_z - shifted[rows, targets]
    grads = softmax(logits, axis=1)
    grads[rows, targets] -= 1.0
    return losses, grads


# ---------------------------------------------------------------------------
# Cumulative probability loss
# ---------------------------------------------------------------------------

def cdf_distance(p: Array, g: ProgressBin | int) -> float:
    """Squared distance between the CDF of ``p`` and the true step function.

    For a point mass at bin b this equals |b - g| exactly: the two step
    functions disagree on exactly that many indices. The final summand is
    always zero since both CDFs end at 1.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("p must be a nonempty vector")
    if abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValueError(f"p must sum to 1 (got {p.sum()!r})")
    n = p.size
    b = _as_bin(g, n)
    cdf = np.cumsum(p)
    truth = (np.arange(n) >= b).astype(np.float64)
    diff = cdf - truth
    return float(diff @ diff)


def cp_loss(logits: Array, g: ProgressBin | int) -> tuple[float, Array]:
    """Cumulative probability loss on raw bin scores, with exact gradient.

    Scores pass through a sigmoid and are normalized by their sum to form a
    probability vector p; the loss is ``cdf_distance(p, g)``. With
    s = sigmoid(v), Z = sum(s), P = cdf(p) and V the target step function,
    the exact derivative is

        dL/dv_k = (2 * s_k * (1 - s_k) / Z) * sum_j (P_j - V_j) * (1[k <= j] - P_j)

    Retaining only the j = k term of that sum gives a truncated one-term
    approximation (see ``cp_loss_truncated_grad``); it fails finite-difference
    checks and is kept only as a diagnostic, never for training.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ValueError("logits must be a nonempty vector")
    n = logits.size
    b = _as_bin(g, n)
    s = sigmoid(logits)
    z = float(s.sum())
    assert z > 1e-12, "sigmoid outputs are positive; Z cannot vanish"
    p = s / z
    cdf = np.cumsum(p)
    truth = (np.arange(n) >= b).astype(np.float64)
    diff = cdf - truth
    loss = float(diff @ diff)
    # suffix sums: rev[k] = sum_{j >= k} diff_j  (the 1[k <= j] part)
    rev = np.cumsum(diff[::-1])[::-1]
    grad = (2.0 / z) * s * (1.0 - s) * (rev - float(diff @ cdf))
    return loss, grad


def cp_loss_truncated_grad(logits: Array, g: ProgressBin | int) -> Array:
    """One-term (j = k) truncation of the cumulative-probability gradient.

    Diagnostic only: it drops every cross-bin coupling term and therefore
    disagrees with finite differences on almost all inputs.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.size
    b = _as_bin(g, n)
    s = sigmoid(logits)
    z = float(s.sum())
    p = s / z
    cdf = np.cumsum(p)
    truth = (np.arange(n) >= b).astype(np.float64)
    diff = cdf - truth
    return (2.0 / z) * s * (1.0 - s) * diff * (1.0 - cdf)


def cp_loss_batch(logits: Array, bins: Array) -> tuple[Array, Array]:
    """Row-wise cumulative probability loss over a batch of score vectors."""
    logits = np.asarray(logits, dtype=np.float64)
    bins = np.asarray(bins, dtype=np.int64)
    n = logits.shape[1]
    if np.any(bins < 0) or np.any(bins >= n):
        raise ValueError("bin index outside granularity range")
    s = sigmoid(logits)
    z = s.sum(axis=1, keepdims=True)
    p = s / z
    cdf = np.cumsum(p, axis=1)
    truth = (np.arange(n)[None, :] >= bins[:, None]).astype(np.float64)
    diff = cdf - truth
    losses = np.sum(diff * diff, axis=1)
    rev = np.cumsum(diff[:, ::-1], axis=1)[:, ::-1]
    dot = np.sum(diff * cdf, axis=1, keepdims=True)
    grads = (2.0 / z) * s * (1.0 - s) * (rev - dot)
    return losses, grads


def predicted_bin(logits: Array) -> int:
    """Most likely bin from raw scores; ties break toward the lower index.

    The sigmoid-normalized probabilities are monotone in the raw scores with
    a shared normalizer, so the argmax can be taken on the scores directly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ValueError("logits must be a nonempty vector")
    return int(np.argmax(logits))
