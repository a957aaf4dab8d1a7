"""Training objectives.

The regression loss is one minus an equal-weight combination of the
concordance correlation coefficients of the three emotion dimensions,
computed with population statistics over the batch:

    CCC = 2*rho*sx*sy / (sx^2 + sy^2 + (mx - my)^2)

A softmax cross-entropy over the seven discrete emotion classes is the
auxiliary task (its 0.2 weight is applied in `total_loss`). Distillation
adds the mean cosine distance between frozen teacher embeddings and student
embeddings, weighted per sample by a confidence `gamma` in [0,1] derived
from the teacher's own label residuals. A two-phase coefficient schedule
emphasizes distillation first and the emotion tasks afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from emodist.nnstack.value import Value, as_value

__all__ = [
    "CCC_WEIGHTS",
    "CE_WEIGHT",
    "COSINE_EPS",
    "LABEL_RANGE",
    "SCHEDULE_SWITCH_EPOCH",
    "ScheduleState",
    "ccc",
    "ccc_loss",
    "cross_entropy",
    "distillation_loss",
    "gamma_confidence",
    "schedule",
    "total_loss",
]

# alpha = beta = 1/3: equal weight for valence, activation, dominance
CCC_WEIGHTS = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
CE_WEIGHT = 0.2
COSINE_EPS = 1e-8
LABEL_RANGE = 6.0          # dynamic range of the 7-point score scale
SCHEDULE_SWITCH_EPOCH = 40
N_CLASSES = 7


def ccc(x, y) -> float:
    """Concordance correlation coefficient of two score vectors, with
    population statistics. Returns 0.0 if either variance is exactly zero
    (a constant input cannot concord)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"need equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("CCC needs at least 2 samples")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy = (dx * dx).mean(), (dy * dy).mean()
    if vx == 0.0 or vy == 0.0:
        return 0.0
    cov = (dx * dy).mean()
    return 2.0 * cov / (vx + vy + (mx - my) ** 2)


def _ccc_value(pred: Value, target: np.ndarray) -> Value:
    """Differentiable CCC of a predicted column against constant targets."""
    n = target.size
    ty = np.asarray(target, dtype=np.float64)
    my = ty.mean()
    vy = float(((ty - my) ** 2).mean())
    if vy == 0.0 or float(np.var(pred.data)) == 0.0:
        # degenerate: defined as 0, with no useful gradient direction
        return as_value(0.0)
    mx = pred.mean()
    dxv = pred - mx
    vx = (dxv * dxv).mean()
    cov = (dxv * (ty - my)).mean()
    return 2.0 * cov / (vx + vy + (mx - my) ** 2)


def ccc_loss(batch_scores: Value, batch_labels: np.ndarray) -> Value:
    """1 - (weighted sum of per-dimension CCCs) over a [B,3] batch."""
    batch_scores = as_value(batch_scores)
    labels = np.asarray(batch_labels, dtype=np.float64)
    if batch_scores.data.shape != labels.shape or labels.ndim != 2 \
            or labels.shape[1] != 3:
        raise ValueError("scores and labels must both be [B,3]")
    if labels.shape[0] < 2:
        raise ValueError("CCC loss needs a batch of at least 2")
    # weights pair as (valence, activation, dominance) on columns (a, v, d)
    wv, wa, wd = CCC_WEIGHTS
    total = (wa * _ccc_value(batch_scores[:, 0], labels[:, 0])
             + wv * _ccc_value(batch_scores[:, 1], labels[:, 1])
             + wd * _ccc_value(batch_scores[:, 2], labels[:, 2]))
    return 1.0 - total


def cross_entropy(logits: Value, classes: np.ndarray) -> Value:
    """Mean softmax cross-entropy of [B,C] logits against integer classes."""
    logits = as_value(logits)
    cls = np.asarray(classes)
    b, c = logits.data.shape
    if cls.shape != (b,):
        raise ValueError(f"classes must be [{b}], got {cls.shape}")
    if cls.min() < 0 or cls.max() >= c:
        raise ValueError(f"class index out of range [0,{c})")
    shift = logits.data.max(axis=1, keepdims=True)
    ex = np.exp(logits.data - shift)
    log_probs = (logits.data - shift) - np.log(ex.sum(axis=1, keepdims=True))
    out = Value(-log_probs[np.arange(b), cls].mean(), (logits,), "cross_entropy")

    def back():
        if logits.requires_grad:
            g = ex / ex.sum(axis=1, keepdims=True)
            g[np.arange(b), cls] -= 1.0
            g *= float(out.grad) / b
            logits.accumulate_owned(g)

    out._backward = back
    return out


@dataclass(frozen=True)
class GammaInputs:
    """True labels, teacher estimates, and the label dynamic range."""

    labels: np.ndarray          # [3]: activation, valence, dominance
    teacher_scores: np.ndarray  # [3]
    label_range: float = LABEL_RANGE


def gamma_confidence(g: GammaInputs) -> float:
    """Confidence in a teacher's sample: 1 minus its mean absolute label
    residual normalized by the label range, clamped to [0, 1]."""
    if g.label_range <= 0:
        raise ValueError("label range must be positive")
    resid = np.abs(np.asarray(g.labels, dtype=np.float64)
                   - np.asarray(g.teacher_scores, dtype=np.float64))
    raw = 1.0 - resid.mean() / g.label_range
    return float(min(1.0, max(0.0, raw)))


def distillation_loss(teacher_emb: np.ndarray, student_emb: Value,
                      gamma: np.ndarray) -> Value:
    """Mean over the batch of gamma_i * (1 - cos(teacher_i, student_i)).

    Teacher embeddings are constants; gradients flow only into the student
    embeddings. The norm product is floored at COSINE_EPS.
    """
    student_emb = as_value(student_emb)
    et = np.asarray(teacher_emb, dtype=np.float64)
    if et.shape != student_emb.data.shape or et.ndim != 2:
        raise ValueError(
            f"embedding shapes differ: {et.shape} vs {student_emb.data.shape}")
    gam = np.asarray(gamma, dtype=np.float64)
    if gam.shape != (et.shape[0],):
        raise ValueError(f"gamma must be [{et.shape[0]}], got {gam.shape}")
    tnorm = np.sqrt((et * et).sum(axis=1))
    dots = (student_emb * et).sum(axis=1)
    snorm = (student_emb * student_emb).sum(axis=1).sqrt()
    cos = dots / (snorm * tnorm).maximum(COSINE_EPS)
    return ((1.0 - cos) * gam).mean()


@dataclass(frozen=True)
class ScheduleState:
    """Loss coefficients in effect for one epoch."""

    epoch: int
    kappa: float
    lam: float


def schedule(epoch: int) -> ScheduleState:
    """Two-phase coefficients: (kappa, lambda) = (0.001, 1) for epochs
    0..39, then (1, 0.01)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < SCHEDULE_SWITCH_EPOCH:
        return ScheduleState(epoch, 0.001, 1.0)
    return ScheduleState(epoch, 1.0, 0.01)


def total_loss(l_ccc: Value, l_ce: Value, l_dis: Value | None,
               s: ScheduleState | None) -> Value:
    """kappa*(L_ccc + 0.2*L_ce) + lambda*L_dis. Without a distillation term
    (no teacher attached) the task losses are applied at full weight."""
    task = l_ccc + CE_WEIGHT * l_ce
    if l_dis is None or s is None:
        return task
    if s.lam == 0.0:
        # keep the graph identical to a no-teacher run
        return s.kappa * task
    return s.kappa * task + s.lam * l_dis
