"""Evaluation metrics and the split/ablation/transfer protocol.

Metrics are implemented directly (no stats dependency): sample Pearson,
Spearman via average-tied ranks, out-of-sample R^2 against the test-fold
mean, and a paired two-sided Student t-test whose p-value comes from an
internal regularized incomplete beta (continued fraction) evaluation.

The protocol fits a fresh forest per split repetition and aggregates each
metric as mean and standard deviation over repetitions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .district import ForestModel, SplitPlan, fit_forest, predict
from .errors import DomainError, UndefinedMetricError

__all__ = [
    "pearson",
    "spearman",
    "r_squared",
    "average_ranks",
    "paired_ttest",
    "TTestResult",
    "pca_explained",
    "VariantResult",
    "evaluate_variant",
    "variant_feature_matrix",
    "VARIANT_BLOCKS",
    "quartile_analysis",
    "transfer_matrix",
]


def _as_pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DomainError(f"length mismatch {x.shape} vs {y.shape}")
    if x.size < 2:
        raise DomainError("need at least 2 observations")
    return x, y


def pearson(x, y) -> float:
    x, y = _as_pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(xc @ xc)), math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedMetricError("pearson undefined for zero-variance input")
    return float(xc @ yc) / (sx * sy)


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    x, y = _as_pair(x, y)
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedMetricError("spearman undefined for constant input")
    return pearson(average_ranks(x), average_ranks(y))


def r_squared(y_true, y_pred) -> float:
    y_true, y_pred = _as_pair(y_true, y_pred)
    ss_tot = float(((y_true - y_true.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise UndefinedMetricError("r_squared undefined for zero target variance")
    ss_res = float(((y_true - y_pred) ** 2).sum())
    return 1.0 - ss_res / ss_tot


# ---------------------------------------------------------------------------
# paired t-test with internal incomplete beta


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    return h


def _betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


@dataclass
class TTestResult:
    t: float
    p: float
    degenerate: bool


def paired_ttest(a, b) -> TTestResult:
    """Two-sided paired t-test; degenerate when differences have no variance."""
    a, b = _as_pair(a, b)
    d = a - b
    n = d.size
    sd = float(d.std(ddof=1))
    if sd < 1e-300:
        return TTestResult(float("nan"), float("nan"), True)
    t = float(d.mean() / (sd / math.sqrt(n)))
    nu = n - 1
    p = _betainc_reg(nu / 2.0, 0.5, nu / (nu + t * t))
    return TTestResult(t, p, False)


def pca_explained(x) -> np.ndarray:
    """Explained-variance ratios of the column-centered data, descending."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 1:
        raise DomainError("need a 2-D matrix with >= 2 rows")
    xc = x - x.mean(axis=0)
    s = np.linalg.svd(xc, compute_uv=False)
    eig = np.zeros(x.shape[1])
    eig[: s.size] = (s * s) / (x.shape[0] - 1)
    total = eig.sum()
    if total <= 0.0:
        return np.zeros(x.shape[1])
    return np.sort(eig)[::-1] / total


# ---------------------------------------------------------------------------
# split-protocol evaluation


@dataclass
class VariantResult:
    name: str
    pearson: list[float] = field(default_factory=list)
    spearman: list[float] = field(default_factory=list)
    r2: list[float] = field(default_factory=list)
    # district -> predictions collected whenever the district was in a test fold
    test_predictions: dict[int, list[float]] = field(default_factory=dict)

    def summary(self) -> dict[str, tuple[float, float]]:
        out = {}
        for m in ("pearson", "spearman", "r2"):
            vals = np.asarray(getattr(self, m), dtype=np.float64)
            ok = vals[np.isfinite(vals)]
            out[m] = (float(ok.mean()), float(ok.std(ddof=1)) if ok.size > 1 else 0.0)
        return out

    def mean_prediction(self) -> dict[int, float]:
        return {d: float(np.mean(v)) for d, v in sorted(self.test_predictions.items())}


def evaluate_variant(
    features_by_id: dict[int, np.ndarray],
    targets_by_id: dict[int, float],
    plan: SplitPlan,
    name: str = "variant",
) -> VariantResult:
    """Fit a forest per repetition on the train districts, score the test."""
    missing = [d for ids in (plan.repetitions[0][0], plan.repetitions[0][1]) for d in ids if d not in features_by_id]
    if missing:
        raise DomainError(f"plan references districts without features: {missing}")
    res = VariantResult(name)
    for train_ids, test_ids in plan.repetitions:
        x_tr = np.stack([features_by_id[d] for d in train_ids])
        y_tr = np.array([targets_by_id[d] for d in train_ids])
        x_te = np.stack([features_by_id[d] for d in test_ids])
        y_te = np.array([targets_by_id[d] for d in test_ids])
        model: ForestModel = fit_forest(x_tr, y_tr, seed=plan.seed)
        y_hat = predict(model, x_te)
        for metric, fn in (("pearson", pearson), ("spearman", spearman), ("r2", r_squared)):
            try:
                value = fn(y_te, y_hat)
            except UndefinedMetricError:
                value = float("nan")
            getattr(res, metric).append(value)
        for d, p in zip(test_ids, y_hat):
            res.test_predictions.setdefault(d, []).append(float(p))
    return res


# Block composition of each reporting variant, in (morph, access, econ) order.
VARIANT_BLOCKS = {
    "full": ("morph", "access", "econ"),
    "noaccess": ("morph", "econ"),
    "nomorph": ("access", "econ"),
    "noecon": ("morph", "access"),
    "nobackdoor": ("morph", "access", "econ_q0"),
    "proxy": ("econ_q0",),
}


def variant_feature_matrix(
    blocks_by_id: dict[int, dict[str, np.ndarray]], variant: str
) -> dict[int, np.ndarray]:
    """Concatenate the named embedding blocks per district for a variant."""
    if variant not in VARIANT_BLOCKS:
        raise DomainError(f"unknown variant {variant!r}; valid: {sorted(VARIANT_BLOCKS)}")
    picks = VARIANT_BLOCKS[variant]
    out = {}
    for did, blocks in blocks_by_id.items():
        missing = [b for b in picks if b not in blocks]
        if missing:
            raise DomainError(f"district {did} missing blocks {missing} for variant {variant}")
        out[did] = np.concatenate([blocks[b] for b in picks])
    if out and next(iter(out.values())).size == 0:
        raise DomainError("variant selects no features")
    return out


def quartile_analysis(
    targets_by_id: dict[int, float], predictions_by_id: dict[int, float]
) -> dict[str, float | None]:
    """Pearson within districts grouped by ground-truth quantile.

    Groups overlap deliberately: bottom/top 25% and bottom/top 50%, with
    group size round(q * N) on a stable (value, id) ordering.  Groups with
    fewer than 2 members report None.
    """
    ids = sorted(targets_by_id)
    if len(ids) < 8:
        raise DomainError("quartile analysis needs at least 8 districts")
    ordered = sorted(ids, key=lambda d: (targets_by_id[d], d))
    n = len(ordered)
    k25, k50 = int(round(0.25 * n)), int(round(0.5 * n))
    groups = {
        "bottom25": ordered[:k25],
        "bottom50": ordered[:k50],
        "top50": ordered[n - k50 :],
        "top25": ordered[n - k25 :],
    }
    out: dict[str, float | None] = {}
    for gname, members in groups.items():
        if len(members) < 2:
            out[gname] = None
            continue
        t = [targets_by_id[d] for d in members]
        p = [predictions_by_id[d] for d in members]
        try:
            out[gname] = pearson(t, p)
        except UndefinedMetricError:
            out[gname] = None
    return out


def transfer_matrix(
    cells: dict[tuple[str, str], tuple[dict[int, dict[str, np.ndarray]], dict[int, float], SplitPlan]],
    variant: str,
) -> dict[tuple[str, str], VariantResult]:
    """Cross-city evaluation grid for one variant.

    ``cells[(source, target)] = (blocks_by_id, targets_by_id, plan)`` where
    the blocks were pooled on the TARGET city's tiles with encoders trained
    on the SOURCE city, and the plan/targets belong to the target city.
    Diagonal cells therefore coincide bit for bit with a plain
    ``evaluate_variant`` run of that city.
    """
    out = {}
    for key, (blocks, targets, plan) in sorted(cells.items()):
        feats = variant_feature_matrix(blocks, variant)
        out[key] = evaluate_variant(feats, targets, plan, name=f"{variant}:{key[0]}->{key[1]}")
    return out
