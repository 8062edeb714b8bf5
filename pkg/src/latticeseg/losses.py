"""Training losses: cross-entropy, Lovasz-softmax, and the discriminative
embedding loss used for proposal-free instance segmentation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .tape import Tensor, constant, log_softmax, matmul, norm, record, relu, softmax, square, take

IGNORE = -1


def _valid(labels, n_classes=None):
    labels = np.asarray(labels).astype(np.int64).ravel()
    if n_classes is not None and np.any((labels >= n_classes) | (labels < IGNORE)):
        raise InvalidInputError("labels must lie in 0..K-1 or be the ignore index -1")
    return labels, labels >= 0


def cross_entropy(scores, labels) -> Tensor:
    """Mean negative log-likelihood over points whose label is not ignored."""
    scores = constant(scores)
    m, K = scores.shape
    labels, keep = _valid(labels, K)
    if labels.shape[0] != m:
        raise InvalidInputError("one label per score row is required")
    if not keep.any():
        warnings.warn("cross_entropy: every point is ignored, loss defined as 0", RuntimeWarning)
        return (scores * 0.0).sum()
    onehot = np.zeros((m, K))
    onehot[np.flatnonzero(keep), labels[keep]] = -1.0 / keep.sum()
    return (log_softmax(scores) * onehot).sum()


def lovasz_grad(gt_sorted):
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    gt_sorted = np.asarray(gt_sorted, dtype=np.float64)
    total = gt_sorted.sum()
    inter = total - np.cumsum(gt_sorted)
    union = total + np.cumsum(1.0 - gt_sorted)
    jac = 1.0 - inter / union
    if len(jac) > 1:
        jac[1:] = jac[1:] - jac[:-1]
    return jac


def lovasz_softmax_probs(probs, labels) -> Tensor:
    """Lovasz-softmax on class probabilities, averaged over classes present in the labels."""
    probs = constant(probs)
    m, K = probs.shape
    labels, keep = _valid(labels, K)
    rows = np.flatnonzero(keep)
    p = probs.data[rows]
    lab = labels[rows]
    present = np.unique(lab)
    if len(present) == 0:
        return (probs * 0.0).sum()
    total = 0.0
    dp = np.zeros_like(p)
    for c in present:
        fg = (lab == c).astype(np.float64)
        err = np.abs(fg - p[:, c])
        order = np.argsort(-err, kind="stable")
        grad = lovasz_grad(fg[order])
        total += float(err[order] @ grad)
        de = np.empty_like(err)
        de[order] = grad
        dp[:, c] = de * np.where(fg > 0, -1.0, 1.0)
    scale = 1.0 / len(present)

    def vjp(g):
        full = np.zeros((m, K))
        full[rows] = g * scale * dp
        return (full,)

    return record(np.array(total * scale), (probs,), vjp, "lovasz_softmax")


def lovasz_softmax(scores, labels) -> Tensor:
    return lovasz_softmax_probs(softmax(constant(scores)), labels)


def semantic_loss(scores, labels) -> Tensor:
    """Equal-weight sum of cross-entropy and Lovasz-softmax."""
    scores = constant(scores)
    return 0.5 * cross_entropy(scores, labels) + 0.5 * lovasz_softmax(scores, labels)


@dataclass(frozen=True)
class DiscriminativeMargins:
    delta_v: float = 0.5
    delta_d: float = 1.5
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.001

    def __post_init__(self):
        if self.delta_v < 0 or self.delta_d < 0:
            raise InvalidInputError("margins must be non-negative")
        if self.delta_d <= 2 * self.delta_v:
            warnings.warn("delta_d <= 2 * delta_v: pull and push margins overlap", RuntimeWarning)


def discriminative_loss(embeddings, instances, margins: DiscriminativeMargins | None = None):
    """Return (L, L_var, L_dist, L_reg) as tape scalars.

    Points with instance label -1 are ignored. Both the pull and the push
    terms are squared hinges.
    """
    margins = margins or DiscriminativeMargins()
    x = constant(embeddings)
    inst = np.asarray(instances).astype(np.int64).ravel()
    if inst.shape[0] != x.shape[0]:
        raise InvalidInputError("one instance label per embedding row is required")
    rows = np.flatnonzero(inst >= 0)
    if len(rows) == 0:
        raise InvalidInputError("discriminative loss needs at least one instance")
    ids, inv = np.unique(inst[rows], return_inverse=True)
    C = len(ids)
    counts = np.bincount(inv, minlength=C).astype(np.float64)
    avg = np.zeros((C, x.shape[0]))
    avg[inv, rows] = 1.0 / counts[inv]

    mu = matmul(constant(avg), x)
    spread = norm(take(x, rows) - take(mu, inv), axis=1)
    pull = square(relu(spread - margins.delta_v))
    l_var = (pull * (1.0 / (C * counts[inv]))).sum()

    if C > 1:
        a, b = np.nonzero(~np.eye(C, dtype=bool))
        gap = norm(take(mu, a) - take(mu, b), axis=1)
        l_dist = square(relu(2.0 * margins.delta_d - gap)).sum() * (1.0 / (C * (C - 1)))
    else:
        l_dist = (mu * 0.0).sum()

    l_reg = norm(mu, axis=1).mean()
    total = margins.alpha * l_var + margins.beta * l_dist + margins.gamma * l_reg
    return total, l_var, l_dist, l_reg
