"""Paired significance tests for differences in verification metrics.

A metric V is a function of the time mean of a per-initialisation statistic
series (CRPS_k, MSE_k, Brier components, confusion matrices). The two systems'
series are resampled jointly with the stationary bootstrap, V_A - V_B is
recomputed from the resampled means, and a BCa interval decides the test.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import metrics

RESAMPLE_CHUNK = 1000


@dataclass(frozen=True)
class StatisticSeries:
    """Per-initialisation statistics for one system at one lead time.

    ``values`` is ``(K, ...)``; ``missing`` flags initialisations with no data
    (before imputation) or imputed data (after).
    """

    init_times: np.ndarray  # datetime64
    values: np.ndarray
    lead_hours: float = 0.0
    missing: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "init_times", np.asarray(self.init_times, dtype="datetime64[m]"))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.missing is None:
            object.__setattr__(self, "missing", ~np.isfinite(self.values.reshape(len(self.values), -1)).all(axis=1))
        else:
            object.__setattr__(self, "missing", np.asarray(self.missing, dtype=bool))
        if len(self.init_times) != len(self.values):
            raise ValueError("init_times and values differ in length")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def spacing(self) -> np.timedelta64:
        d = np.diff(self.init_times)
        if len(d) == 0 or np.any(d != d[0]):
            raise ValueError("series is not uniformly spaced in time")
        return d[0]


@dataclass(frozen=True)
class PairedSeries:
    init_times: np.ndarray
    a: np.ndarray
    b: np.ndarray
    lead_hours: float
    b_source: np.ndarray  # (K, 2) indices into the b-series lookup, -1 when unused

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.a.reshape(len(self.a), -1), self.b.reshape(len(self.b), -1)], axis=1)


def impute_missing(series: StatisticSeries) -> StatisticSeries:
    """Fill isolated missing entries with the mean of their two neighbours."""
    series.spacing  # noqa: B018 -- validates uniform spacing
    miss = series.missing
    if not miss.any():
        return series
    idx = np.flatnonzero(miss)
    if idx[0] == 0 or idx[-1] == len(series) - 1:
        raise ValueError("missing value at the series boundary cannot be interpolated")
    if np.any(np.diff(idx) == 1):
        raise ValueError("consecutive missing values; only isolated gaps are imputed")
    values = series.values.copy()
    values[idx] = 0.5 * (values[idx - 1] + values[idx + 1])
    return replace(series, values=values, missing=miss.copy())


def align_series(a: StatisticSeries, b, mode: str = "shift", offset_h: float = 6.0) -> PairedSeries:
    """Pair each entry of ``a`` with entries of ``b`` that share its lead or validity time.

    ``b`` is one series or a collection of series at different lead times.

    * ``shift``: b initialised ``offset_h`` earlier at the same lead time.
    * ``bracket_average``: mean of b initialised ``offset_h`` earlier at lead
      ``+offset_h`` and ``offset_h`` later at lead ``-offset_h``; both share
      a's validity time.
    """
    pool = [b] if isinstance(b, StatisticSeries) else list(b)
    lookup = {}
    flat = []
    for s in pool:
        for t, v in zip(s.init_times, s.values):
            lookup[(float(s.lead_hours), t)] = len(flat)
            flat.append(v)
    dt = np.timedelta64(int(round(offset_h * 60)), "m")

    def find(lead, t):
        key = (float(lead), t)
        if key not in lookup:
            raise ValueError(f"no b statistic for init {t} at lead {lead} h; series cannot be paired")
        return lookup[key]

    src = np.full((len(a), 2), -1)
    b_vals = []
    for k, t in enumerate(a.init_times):
        if mode == "shift":
            src[k, 0] = find(a.lead_hours, t - dt)
            b_vals.append(flat[src[k, 0]])
        elif mode == "bracket_average":
            src[k, 0] = find(a.lead_hours + offset_h, t - dt)
            src[k, 1] = find(a.lead_hours - offset_h, t + dt)
            b_vals.append(0.5 * (flat[src[k, 0]] + flat[src[k, 1]]))
        else:
            raise ValueError(f"unknown alignment mode {mode!r}")
    return PairedSeries(a.init_times, a.values, np.asarray(b_vals), a.lead_hours, src)


def auto_block_length(x) -> float:
    """Mean block length for the stationary bootstrap (Politis-White, Patton correction).

    A flat-top lag window estimates the long-run variance and its derivative
    term from autocovariances up to a data-chosen bandwidth. The result is
    capped at ``min(3 sqrt(n), n/3)`` and floored at 1.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    n = len(x)
    if n < 32:
        raise ValueError(f"block length selection needs at least 32 observations, got {n}")
    eps = x - x.mean()
    if np.allclose(eps, 0.0):
        return 1.0
    b_max = np.ceil(min(3 * np.sqrt(n), n / 3))
    kn = max(5, int(np.log10(n)))
    m_max = int(np.ceil(np.sqrt(n))) + kn
    band = 2 * np.sqrt(np.log10(n) / n)
    acv = np.zeros(m_max + 1)
    abs_acorr = np.zeros(m_max + 1)
    opt_m = None
    for i in range(m_max + 1):
        v1 = eps[i + 1:] @ eps[i + 1:]
        v2 = eps[: -(i + 1)] @ eps[: -(i + 1)]
        cross = eps[i:] @ eps[: n - i]
        acv[i] = cross / n
        abs_acorr[i] = abs(cross) / np.sqrt(v1 * v2) if v1 * v2 > 0 else 0.0
        if i >= kn and opt_m is None and np.all(abs_acorr[i - kn:i] < band):
            opt_m = i - kn
    m = 2 * max(opt_m, 1) if opt_m is not None else m_max
    m = min(m, m_max)
    g = 0.0
    lr_acv = acv[0]
    for k in range(1, m + 1):
        lam = 1.0 if k / m <= 0.5 else 2.0 * (1.0 - k / m)
        g += 2.0 * lam * k * acv[k]
        lr_acv += 2.0 * lam * acv[k]
    d_sb = 2.0 * lr_acv**2
    if d_sb <= 0:
        return 1.0
    b = ((2.0 * g**2) / d_sb) ** (1.0 / 3.0) * n ** (1.0 / 3.0)
    return float(max(1.0, min(b, b_max)))


def _chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chunk,)))


def _check_resampling(n_resamples, mean_block):
    if n_resamples <= 0:
        raise ValueError("n_resamples must be positive")
    if not mean_block >= 1:
        raise ValueError(f"mean block length must be >= 1, got {mean_block}")


def stationary_bootstrap_blocks(n: int, n_resamples: int, mean_block: float, seed: int = 0):
    """Yield ``(origin, length)`` block arrays, ``(rows, J)``, chunk by chunk.

    Blocks start at uniform origins and have geometric lengths with mean
    ``mean_block``; each row's lengths are truncated so they sum to ``n``
    (trailing blocks get length 0). Resample r comes from the random stream of
    chunk ``r // 1000``, so results depend only on ``(seed, r)``.
    """
    _check_resampling(n_resamples, mean_block)
    p = 0.0 if np.isinf(mean_block) else 1.0 / mean_block
    for c, start in enumerate(range(0, n_resamples, RESAMPLE_CHUNK)):
        rows = min(RESAMPLE_CHUNK, n_resamples - start)
        rng = _chunk_rng(seed, c)
        lam = n * p
        n_blocks = min(n, int(np.ceil(lam + 6.0 * np.sqrt(lam) + 8.0)))
        while True:
            origin = rng.integers(0, n, size=(RESAMPLE_CHUNK, n_blocks))[:rows]
            if p >= 1.0:  # n unit blocks; no lengths to draw
                length = np.ones(origin.shape, dtype=np.int64)
                end = np.broadcast_to(np.arange(1, n_blocks + 1), origin.shape)
            elif p == 0.0:
                length = np.full(origin.shape, n, dtype=np.int64)
                end = np.cumsum(length, axis=1)
            else:
                u = rng.random((RESAMPLE_CHUNK, n_blocks), dtype=np.float32)[:rows]
                length = 1 + (np.log1p(-u) / np.float32(np.log1p(-p))).astype(np.int64)
                end = np.cumsum(length, axis=1)
            if n_blocks == n or np.all(end[:, -1] >= n):
                break
            n_blocks = min(n, 2 * n_blocks)
        length = np.clip(n - (end - length), 0, length)
        yield origin, length


def stationary_bootstrap_indices(n: int, n_resamples: int, mean_block: float, seed: int = 0) -> np.ndarray:
    """``(n_resamples, n)`` index matrix: concatenated wraparound blocks."""
    rows = []
    for origin, length in stationary_bootstrap_blocks(n, n_resamples, mean_block, seed):
        start = np.cumsum(length, axis=1) - length
        for o, L, s0 in zip(origin, length, start):
            keep = L > 0
            pos = np.repeat(s0[keep], L[keep])
            org = np.repeat(o[keep], L[keep])
            rows.append((org + np.arange(n) - pos) % n)
    return np.asarray(rows)


def resample_means(series, indices: np.ndarray) -> np.ndarray:
    """Means of ``series`` (``(n, ...)``) under each row of ``indices``."""
    series = np.asarray(series, dtype=np.float64)
    n = series.shape[0]
    cols = series.reshape(n, -1)
    means = np.stack([np.take(col, indices).mean(axis=1) for col in cols.T], axis=-1)
    return means.reshape((len(indices),) + series.shape[1:])


def stationary_bootstrap(series, n_resamples: int, mean_block: float, seed: int = 0) -> np.ndarray:
    """Resampled time means ``(n_resamples, ...)`` of a (possibly multi-column, paired) series.

    Block sums come from prefix sums of the doubled series, so the cost scales
    with the number of blocks rather than the series length.
    """
    series = np.asarray(series, dtype=np.float64)
    n = series.shape[0]
    cols = series.reshape(n, -1)
    prefix = np.concatenate([np.zeros((1, cols.shape[1])), np.cumsum(np.concatenate([cols, cols]), axis=0)])
    prefix = np.ascontiguousarray(prefix.T).T
    out = []
    unit = not np.isinf(mean_block) and mean_block <= 1.0
    for origin, length in stationary_bootstrap_blocks(n, n_resamples, mean_block, seed):
        if unit:  # i.i.d. resampling: gather values directly
            out.append(np.stack([np.take(c, origin).mean(axis=1) for c in cols.T], axis=-1))
            continue
        stop = origin + length
        out.append(np.stack([(np.take(pc, stop) - np.take(pc, origin)).sum(axis=1) for pc in prefix.T], axis=-1) / n)
    return np.concatenate(out).reshape((n_resamples,) + series.shape[1:])


def jackknife_means(series) -> np.ndarray:
    """Delete-one time means, shape ``(n, ...)``."""
    series = np.asarray(series, dtype=np.float64)
    n = series.shape[0]
    return (series.sum(axis=0, keepdims=True) - series) / (n - 1)


@dataclass(frozen=True)
class BCaInterval:
    lo: float
    hi: float
    z0: float
    acceleration: float
    z0_clamped: bool = False


def bca_interval(resample_stats, original_stat: float, jackknife_stats, alpha: float = 0.05) -> BCaInterval:
    """Bias-corrected and accelerated (1 - alpha) bootstrap interval.

    The bias correction uses the share of resamples below the original
    statistic (ties count half); when every resample falls on one side, that
    share is clamped to ``[1/(2B), 1 - 1/(2B)]`` and the result is flagged.
    """
    th = np.asarray(resample_stats, dtype=np.float64).ravel()
    B = len(th)
    if B < 100:
        raise ValueError(f"BCa needs at least 100 resamples, got {B}")
    if np.all(th == th[0]):
        return BCaInterval(float(th[0]), float(th[0]), 0.0, 0.0)
    share = (np.sum(th < original_stat) + 0.5 * np.sum(th == original_stat)) / B
    lo_p, hi_p = 0.5 / B, 1.0 - 0.5 / B
    clamped = not lo_p <= share <= hi_p
    z0 = stats.norm.ppf(np.clip(share, lo_p, hi_p))
    acc = _acceleration(jackknife_stats)
    z = stats.norm.ppf([alpha / 2, 1 - alpha / 2])
    adj = stats.norm.cdf(z0 + (z0 + z) / (1 - acc * (z0 + z)))
    lo, hi = np.percentile(th, 100 * adj)
    return BCaInterval(float(lo), float(hi), float(z0), float(acc), clamped)


def _acceleration(jackknife_stats) -> float:
    jk = np.asarray(jackknife_stats, dtype=np.float64).ravel()
    u = jk.mean() - jk
    denom = 6.0 * np.sum(u**2) ** 1.5
    if denom <= 0:
        return 0.0
    return float(np.sum(u**3) / denom)


def bca_p_value(resample_stats, bca: BCaInterval, null_value: float = 0.0) -> float:
    """Two-sided achieved significance level: smallest alpha whose BCa interval excludes the null."""
    th = np.asarray(resample_stats, dtype=np.float64).ravel()
    B = len(th)
    if bca.lo == bca.hi:
        return 1.0 if bca.lo == null_value else 0.0
    share = (np.sum(th < null_value) + 0.5 * np.sum(th == null_value)) / B
    share = np.clip(share, 0.5 / B, 1.0 - 0.5 / B)
    w = stats.norm.ppf(share) - bca.z0
    z_alpha = w / (1.0 + bca.acceleration * w) - bca.z0
    tail = stats.norm.cdf(z_alpha)
    return float(min(1.0, 2.0 * min(tail, 1.0 - tail)))


# -- metrics as functions of time means --------------------------------------------


@dataclass(frozen=True)
class MetricSpec:
    """``value`` maps time-mean components ``(..., *component_shape)`` to V;
    ``proxy`` maps a full ``(K, ...)`` series to a per-init proxy of V."""

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    proxy: Callable[[np.ndarray], np.ndarray]


def _first(m):
    return np.asarray(m)[..., 0]


CRPS = MetricSpec("crps", _first, _first)
RMSE = MetricSpec("rmse", lambda m: np.sqrt(np.asarray(m)[..., 0]), _first)


def _bss_value(m):
    m = np.asarray(m)
    bs, base = m[..., 0], m[..., 1]
    return 1.0 - bs / (base * (1.0 - base))


def _bss_proxy(series):
    series = np.asarray(series)
    base = series[:, 1].mean()
    return 1.0 - series[:, 0] / (base * (1.0 - base))


BSS = MetricSpec("bss", _bss_value, _bss_proxy)


def rev_metric(cost_loss_ratio: float) -> MetricSpec:
    """REV* at one cost/loss ratio; components are confusion matrices ``(n_thresholds, 4)``."""

    def value(m):
        return metrics.rev_from_confusion(m, [cost_loss_ratio])[..., 0].max(axis=-1)

    def proxy(series):
        series = np.asarray(series)
        overall = series.mean(axis=0)
        j = int(np.argmax(metrics.rev_from_confusion(overall, [cost_loss_ratio])[:, 0]))
        tn, fn, fp, tp = overall[j]
        base = tp + fn
        e_clim = min(base, cost_loss_ratio)
        e_perfect = base * cost_loss_ratio
        conf = series[:, j]
        e_forecast = (conf[:, 3] + conf[:, 2]) * cost_loss_ratio + conf[:, 1]
        return (e_clim - e_forecast) / (e_clim - e_perfect)

    return MetricSpec(f"rev@{cost_loss_ratio:g}", value, proxy)


@dataclass(frozen=True)
class TestResult:
    metric: str
    difference: float
    ci_lo: float
    ci_hi: float
    reject: bool
    p_value: float
    block_length: float
    n_resamples: int
    z0_clamped: bool = False

    def record(self, lead_time=None, level=None) -> dict:
        return {
            "metric": self.metric,
            "lead_time": lead_time,
            "level": level,
            "diff": self.difference,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "p_reject": self.p_value,
            "reject": self.reject,
            "block_length": self.block_length,
            "n_resamples": self.n_resamples,
        }


def paired_metric_test(
    series_a,
    series_b,
    metric: MetricSpec = CRPS,
    alpha: float = 0.05,
    n_resamples: int = 10000,
    seed: int = 0,
    mean_block: float | None = None,
) -> TestResult:
    """Two-sided test of V_A = V_B from paired per-initialisation statistics.

    ``series_a`` and ``series_b`` are aligned, imputed ``(K, ...)`` arrays.
    Block length is chosen on the proxy difference series unless given.
    """
    a = np.asarray(series_a, dtype=np.float64)
    b = np.asarray(series_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired series differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    n = a.shape[0]
    comp = a.shape[1:]
    diff = float(metric.value(a.mean(axis=0)) - metric.value(b.mean(axis=0)))
    if mean_block is None:
        mean_block = auto_block_length(metric.proxy(a) - metric.proxy(b))
    joint = np.concatenate([a.reshape(n, -1), b.reshape(n, -1)], axis=1)
    boot = stationary_bootstrap(joint, n_resamples, mean_block, seed)
    half = joint.shape[1] // 2

    def v_diff(means):
        ma = means[..., :half].reshape(means.shape[:-1] + comp)
        mb = means[..., half:].reshape(means.shape[:-1] + comp)
        return metric.value(ma) - metric.value(mb)

    boot_stats = v_diff(boot)
    jk_stats = v_diff(jackknife_means(joint))
    ci = bca_interval(boot_stats, diff, jk_stats, alpha)
    reject = not (ci.lo <= 0.0 <= ci.hi)
    p = bca_p_value(boot_stats, ci)
    return TestResult(metric.name, diff, ci.lo, ci.hi, reject, p, float(mean_block), n_resamples, ci.z0_clamped)
