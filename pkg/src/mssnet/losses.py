"""Training objective: cross-entropy plus Lovász-softmax, linearly combined."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import ConfigurationError, ContractError, DegenerateBatchError

IGNORE_LABEL = 255


@dataclass(frozen=True)
class LossWeights:
    w_ce: float = 1.0
    w_lovasz: float = 1.0

    def __post_init__(self):
        if self.w_ce < 0 or self.w_lovasz < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.w_ce == 0 and self.w_lovasz == 0:
            raise ConfigurationError("at least one loss weight must be positive")


def cross_entropy(logits: Value, labels, ignore_label: int = IGNORE_LABEL) -> Value:
    """Mean negative log-softmax probability of the true class.

    Rows labeled ``ignore_label`` are excluded from both the mean and the
    gradient.
    """
    logits = logits if isinstance(logits, Value) else Value(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    n, k = z.shape
    scored = labels != ignore_label
    n_scored = int(scored.sum())
    if n_scored == 0:
        raise DegenerateBatchError("all rows carry the ignore label")
    if labels[scored].min() < 0 or labels[scored].max() >= k:
        raise ContractError("labels out of range for the logit width")

    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logsumexp
    picked = log_probs[scored, labels[scored]]
    out = Value(-picked.sum() / n_scored)

    def rule(g):
        grad = np.exp(log_probs)
        grad[scored, labels[scored]] -= 1.0
        grad[~scored] = 0.0
        return (grad * (float(g) / n_scored),)

    tape = ad.active_tape()
    if tape is not None:
        tape.record("cross_entropy", (logits,), out, rule)
    return out


def _jaccard_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Jaccard extension along the sorted-error chain."""
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs: Value, labels, ignore_label: int = IGNORE_LABEL) -> Value:
    """Lovász extension of the per-class Jaccard loss, averaged over the
    classes present in the batch ("classes present" variant).

    The gradient treats the descending error sort as fixed, which is the
    standard piecewise-linear derivative of the extension.
    """
    probs = probs if isinstance(probs, Value) else Value(probs)
    labels = np.asarray(labels, dtype=np.int64)
    p = probs.data
    if np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ContractError("probability rows must sum to 1")

    scored = np.nonzero(labels != ignore_label)[0]
    if scored.size == 0:
        raise DegenerateBatchError("all rows carry the ignore label")
    y = labels[scored]
    present = np.unique(y)

    total = 0.0
    # per class: (rows, signs, jaccard gradient in unsorted row order)
    contribs = []
    for c in present.tolist():
        fg = (y == c).astype(np.float64)
        pc = p[scored, c]
        errors = np.where(fg > 0, 1.0 - pc, pc)
        order = np.argsort(-errors, kind="stable")
        grad_sorted = _jaccard_grad(fg[order])
        total += float(errors[order] @ grad_sorted)
        unsorted = np.empty_like(grad_sorted)
        unsorted[order] = grad_sorted
        signs = np.where(fg > 0, -1.0, 1.0)
        contribs.append((c, signs * unsorted))

    m = len(present)
    out = Value(total / m)

    def rule(g):
        dp = np.zeros_like(p)
        for c, derr in contribs:
            dp[scored, c] += derr
        return (dp * (float(g) / m),)

    tape = ad.active_tape()
    if tape is not None:
        tape.record("lovasz_softmax", (probs,), out, rule)
    return out


def combined_loss(
    logits: Value,
    labels,
    weights: LossWeights = LossWeights(),
    ignore_label: int = IGNORE_LABEL,
):
    """w_ce * CE(logits) + w_lovasz * Lovász(softmax(logits)).

    Returns the scalar loss Value plus a dict of the component values.
    """
    parts: dict[str, float] = {}
    total = None
    if weights.w_ce > 0:
        ce = cross_entropy(logits, labels, ignore_label)
        parts["ce"] = float(ce.data)
        total = ad.mul(ce, weights.w_ce)
    if weights.w_lovasz > 0:
        lov = lovasz_softmax(ad.softmax_rows(logits), labels, ignore_label)
        parts["lovasz"] = float(lov.data)
        term = ad.mul(lov, weights.w_lovasz)
        total = term if total is None else ad.add(total, term)
    return total, parts
