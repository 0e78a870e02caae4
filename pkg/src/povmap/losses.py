"""Training objectives with hand-derived analytic gradients.

All four losses return ``(value, grads)`` where ``grads`` maps input names
to arrays of the same shape; every gradient is validated against central
finite differences in the tests.  Reductions run in index-ascending order
via numpy, so values are reproducible bit for bit on a fixed platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError

TAU_INIT = 0.07
TAU_MIN, TAU_MAX = 0.01, 100.0
DEGENERATE_STD = 1e-12

__all__ = [
    "contrastive_loss",
    "precondition_loss",
    "combined_access_loss",
    "pearson_loss",
    "PearsonResult",
    "clamp_log_tau",
    "TAU_INIT",
    "TAU_MIN",
    "TAU_MAX",
]


def _normalize_rows(e: np.ndarray, label: str):
    norms = np.sqrt((e * e).sum(axis=1, keepdims=True))
    if (norms < 1e-30).any():
        raise NumericError(f"zero-norm embedding in {label}")
    return e / norms, norms


def contrastive_loss(e_img: np.ndarray, e_poi: np.ndarray, log_tau: float):
    """InfoNCE over in-batch candidates, image-to-POI direction only.

    Rows are positive pairs; every POI embedding in the batch serves as a
    candidate.  Embeddings are L2-normalized internally, similarities are
    cosine, and the temperature is exp(log_tau).

    Returns (loss, {"e_img", "e_poi", "log_tau"}).
    """
    e_img = np.asarray(e_img, dtype=np.float64)
    e_poi = np.asarray(e_poi, dtype=np.float64)
    if e_img.ndim != 2 or e_img.shape != e_poi.shape:
        raise DomainError(f"mismatched batch shapes {e_img.shape} vs {e_poi.shape}")
    b = e_img.shape[0]
    if b == 0:
        raise DomainError("empty batch")

    u, un = _normalize_rows(e_img, "image embeddings")
    v, vn = _normalize_rows(e_poi, "poi embeddings")
    tau = math.exp(float(log_tau))
    sims = u @ v.T
    logits = sims / tau
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float(np.mean(lse - np.diag(logits)))

    soft = np.exp(logits - lse[:, None])
    g_sims = (soft - np.eye(b)) / (b * tau)
    d_log_tau = float(-(g_sims * sims).sum())

    du = g_sims @ v
    dv = g_sims.T @ u
    d_img = (du - u * (du * u).sum(axis=1, keepdims=True)) / un
    d_poi = (dv - v * (dv * v).sum(axis=1, keepdims=True)) / vn
    return loss, {"e_img": d_img, "e_poi": d_poi, "log_tau": d_log_tau}


def precondition_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy over all entries, numerically stable.

    Returns (loss, {"logits"}).
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape or z.size == 0:
        raise DomainError(f"mismatched or empty shapes {z.shape} vs {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise DomainError("labels must be 0 or 1")
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float(per.mean())
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
    return loss, {"logits": (sig - y) / z.size}


def combined_access_loss(loss_c: float, loss_p: float, lambda1: float):
    """Weighted sum of the contrastive and precondition terms.

    Returns (value, {"loss_c": 1, "loss_p": lambda1}); callers scale and add
    the upstream gradients accordingly.
    """
    if not (np.isfinite(loss_c) and np.isfinite(loss_p)):
        raise NumericError("non-finite loss term")
    if lambda1 < 0:
        raise DomainError("lambda1 must be >= 0")
    return float(loss_c + lambda1 * loss_p), {"loss_c": 1.0, "loss_p": float(lambda1)}


@dataclass
class PearsonResult:
    loss: float
    grad_pred: np.ndarray
    degenerate: bool


def pearson_loss(pred: np.ndarray, target: np.ndarray) -> PearsonResult:
    """Negative Pearson correlation of predictions against targets.

    With standardized vectors p_hat and t_hat (population std), the
    correlation is r = mean(p_hat * t_hat) and

        d(-r)/d pred = -(t_hat - r * p_hat) / (B * std(pred)).

    A batch whose prediction or target std is below ``DEGENERATE_STD``
    yields loss 0, zero gradient and the degenerate flag so training can
    skip the step.
    """
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise DomainError(f"mismatched shapes {p.shape} vs {t.shape}")
    b = p.size
    if b < 2:
        raise DomainError("pearson loss needs at least 2 samples")

    sp = float(np.sqrt(np.mean((p - p.mean()) ** 2)))
    st = float(np.sqrt(np.mean((t - t.mean()) ** 2)))
    if sp < DEGENERATE_STD or st < DEGENERATE_STD:
        return PearsonResult(0.0, np.zeros_like(p), True)

    p_hat = (p - p.mean()) / sp
    t_hat = (t - t.mean()) / st
    r = float(np.mean(p_hat * t_hat))
    grad = -(t_hat - r * p_hat) / (b * sp)
    return PearsonResult(-r, grad, False)


def clamp_log_tau(log_tau: float) -> float:
    return float(min(max(log_tau, math.log(TAU_MIN)), math.log(TAU_MAX)))
