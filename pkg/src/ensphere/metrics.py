"""Probabilistic verification metrics for ensembles of gridded fields.

Array conventions used throughout:

* ensemble ``ens``: ``(M, K, *spatial)`` -- member, initialisation time, grid
* target ``tgt``: ``(K, *spatial)``
* ``weights``: broadcastable to ``spatial``, unit mean over the grid (``None``
  means uniform)
* ``mask``: optional ``(K,)`` boolean, False for missing initialisations

Spatial reductions are ``1/|G| sum_i a_i (.)``. Every metric that is a
function of a time mean has a ``*_series`` companion returning the
per-initialisation statistic, which is what the significance tests resample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import LatLonGrid, cell_area_weights


def _as_float(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_pair(ens: np.ndarray, tgt: np.ndarray) -> None:
    if ens.ndim < 2 or ens.shape[1:] != tgt.shape:
        raise ValueError(f"ensemble shape {ens.shape} does not pair with target shape {tgt.shape}")


def spatial_mean(x: np.ndarray, weights=None, n_lead: int = 1) -> np.ndarray:
    """Area-weighted mean over all axes after the first ``n_lead``."""
    x = _as_float(x)
    axes = tuple(range(n_lead, x.ndim))
    if weights is None:
        return x.mean(axis=axes)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), x.shape[n_lead:])
    return (x * w).mean(axis=axes)


def time_mean(series: np.ndarray, mask=None) -> np.ndarray:
    series = np.asarray(series)
    if mask is None:
        return series.mean(axis=0)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != series.shape[:1]:
        raise ValueError(f"mask shape {mask.shape} != number of init times {series.shape[0]}")
    if not mask.any():
        raise ValueError("all initialisation times are masked")
    return series[mask].mean(axis=0)


def weights_for(grid: LatLonGrid) -> np.ndarray:
    return cell_area_weights(grid)


# -- CRPS -------------------------------------------------------------------


def crps_pointwise(ens, tgt) -> np.ndarray:
    """Traditional ensemble CRPS estimator at every (k, i), shape of ``tgt``.

    The member double sum uses the sorted-ensemble identity
    ``sum_{m,m'} |x_m - x_m'| = 2 sum_j (2j - M - 1) x_(j)``.
    """
    ens = _as_float(ens)
    tgt = _as_float(tgt)
    _check_pair(ens, tgt)
    M = ens.shape[0]
    skill = np.abs(ens - tgt[None]).mean(axis=0)
    coef = (2.0 * np.arange(1, M + 1) - M - 1).reshape((M,) + (1,) * tgt.ndim)
    spread = (coef * np.sort(ens, axis=0)).sum(axis=0) / (M * M)
    return skill - spread


def crps_series(ens, tgt, weights=None) -> np.ndarray:
    return spatial_mean(crps_pointwise(ens, tgt), weights)


def crps(ens, tgt, weights=None, mask=None) -> float:
    """Area-weighted ensemble CRPS averaged over initialisation times."""
    return float(time_mean(crps_series(ens, tgt, weights), mask))


# -- ensemble mean error, spread, bias ---------------------------------------


def mse_series(ens, tgt, weights=None) -> np.ndarray:
    ens = _as_float(ens)
    tgt = _as_float(tgt)
    _check_pair(ens, tgt)
    return spatial_mean((ens.mean(axis=0) - tgt) ** 2, weights)


def ensemble_mean_rmse(ens, tgt, weights=None, mask=None) -> float:
    return float(np.sqrt(time_mean(mse_series(ens, tgt, weights), mask)))


def variance_series(ens, weights=None) -> np.ndarray:
    """Spatial mean of the unbiased (divisor M-1) member variance."""
    ens = _as_float(ens)
    if ens.shape[0] < 2:
        raise ValueError("spread needs at least two members")
    return spatial_mean(ens.var(axis=0, ddof=1), weights)


def spread_skill_from_means(mean_variance: float, mean_mse: float, n_members: int) -> float:
    if n_members < 2:
        raise ValueError("spread/skill needs at least two members")
    if mean_mse <= 0:
        raise ValueError("ensemble-mean error is zero; spread/skill ratio is undefined")
    return float(np.sqrt((n_members + 1) / n_members) * np.sqrt(mean_variance / mean_mse))


def spread_skill_ratio(ens, tgt, weights=None, mask=None) -> float:
    ens = _as_float(ens)
    var = time_mean(variance_series(ens, weights), mask)
    mse = time_mean(mse_series(ens, tgt, weights), mask)
    return spread_skill_from_means(var, mse, ens.shape[0])


def bias_series(ens, tgt, weights=None) -> np.ndarray:
    ens = _as_float(ens)
    tgt = _as_float(tgt)
    _check_pair(ens, tgt)
    return spatial_mean(ens.mean(axis=0) - tgt, weights)


def bias(ens, tgt, weights=None, mask=None) -> float:
    """Mean of ensemble mean minus truth."""
    return float(time_mean(bias_series(ens, tgt, weights), mask))


def derive_wind_speed(u, v) -> np.ndarray:
    """Per-member wind speed sqrt(u**2 + v**2)."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape:
        raise ValueError(f"u shape {u.shape} != v shape {v.shape}")
    return np.hypot(u, v)


# -- rank histogram -------------------------------------------------------------

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
    return x ^ (x >> np.uint64(31))


def counter_uniform(seed: int, counters) -> np.ndarray:
    """Uniform [0, 1) draws addressed by (seed, counter); independent of evaluation order."""
    counters = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _splitmix64(np.uint64(seed) ^ np.uint64(0xD1B54A32D192ED03))
        bits = _splitmix64(counters ^ key)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def truth_ranks(ens, tgt, seed: int = 0) -> np.ndarray:
    """Rank (1..M+1) of the truth among members; ties split uniformly at random.

    The tie-break draw for point ``(k, i)`` depends only on ``seed`` and the
    flat index of that point.
    """
    ens = _as_float(ens)
    tgt = _as_float(tgt)
    _check_pair(ens, tgt)
    below = (ens < tgt[None]).sum(axis=0)
    ties = (ens == tgt[None]).sum(axis=0)
    u = counter_uniform(seed, np.arange(tgt.size)).reshape(tgt.shape)
    return 1 + below + np.floor(u * (ties + 1)).astype(int)


def rank_histogram(ens, tgt, seed: int = 0) -> np.ndarray:
    ranks = truth_ranks(ens, tgt, seed)
    M = np.shape(ens)[0]
    return np.bincount(ranks.ravel() - 1, minlength=M + 1)


# -- binary events: Brier and relative economic value ---------------------------


def _check_binary(*arrays) -> None:
    for a in arrays:
        a = np.asarray(a)
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("binary metric received values other than 0 and 1")


def brier_series(ens, tgt, weights=None) -> np.ndarray:
    """Per-init ``[BrierScore_k, base_rate_k]``, shape ``(K, 2)``."""
    _check_binary(ens, tgt)
    ens = _as_float(ens)
    tgt = _as_float(tgt)
    _check_pair(ens, tgt)
    prob = ens.mean(axis=0)
    return np.stack([spatial_mean((prob - tgt) ** 2, weights), spatial_mean(tgt, weights)], axis=-1)


def brier_from_means(brier_score: float, base_rate: float) -> tuple[float, float]:
    """(BS, BSS) with the fixed climatological forecast p_clim = base rate.

    For binary targets and unit-mean weights the climatological score reduces
    to ``p_clim * (1 - p_clim)``.
    """
    bs_clim = base_rate * (1.0 - base_rate)
    if bs_clim <= 0:
        raise ValueError("event never or always occurs; Brier skill score is undefined")
    return float(brier_score), float(1.0 - brier_score / bs_clim)


def brier(ens, tgt, weights=None, mask=None) -> tuple[float, float]:
    bs, base = time_mean(brier_series(ens, tgt, weights), mask)
    return brier_from_means(bs, base)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Area-weighted proportions; sums to one."""

    tn: float
    fn: float
    fp: float
    tp: float

    @classmethod
    def from_array(cls, a) -> "ConfusionMatrix":
        return cls(*map(float, np.asarray(a)[..., :4]))

    def as_array(self) -> np.ndarray:
        return np.array([self.tn, self.fn, self.fp, self.tp])


def rev_thresholds(n_members: int) -> np.ndarray:
    """Probability thresholds (j - 1/2)/M for j = 0..M+1, incl. always/never act."""
    j = np.arange(n_members + 2)
    return (j - 0.5) / n_members


def confusion_series(prob, tgt, weights=None, thresholds=None, n_members: int | None = None) -> np.ndarray:
    """Per-init confusion matrices ``(K, n_thresholds, 4)`` ordered [TN, FN, FP, TP]."""
    prob = _as_float(prob)
    tgt = _as_float(tgt)
    _check_binary(tgt)
    if prob.shape != tgt.shape:
        raise ValueError(f"probability shape {prob.shape} != target shape {tgt.shape}")
    if thresholds is None:
        if n_members is None:
            raise ValueError("pass thresholds or n_members")
        thresholds = rev_thresholds(n_members)
    out = np.empty((tgt.shape[0], len(thresholds), 4))
    for j, q in enumerate(thresholds):
        x = (prob > q).astype(np.float64)
        out[:, j, 0] = spatial_mean((1 - x) * (1 - tgt), weights)
        out[:, j, 1] = spatial_mean((1 - x) * tgt, weights)
        out[:, j, 2] = spatial_mean(x * (1 - tgt), weights)
        out[:, j, 3] = spatial_mean(x * tgt, weights)
    return out


def rev_from_confusion(conf, cost_loss_ratios) -> np.ndarray:
    """REV for each (threshold, ratio); ``conf`` is ``(..., 4)`` [TN, FN, FP, TP].

    Expenses are in units of the loss L, so only C/L matters.
    """
    conf = np.asarray(conf, dtype=np.float64)
    alpha = np.asarray(cost_loss_ratios, dtype=np.float64)
    if np.any((alpha <= 0) | (alpha >= 1)):
        raise ValueError("cost/loss ratios must lie in (0, 1)")
    tn, fn, fp, tp = (conf[..., i, None] for i in range(4))
    base = tp + fn
    if np.any(base <= 0) or np.any(base >= 1):
        raise ValueError("event base rate is 0 or 1; relative economic value is undefined")
    e_forecast = (tp + fp) * alpha + fn
    e_clim = np.minimum(base, alpha)
    e_perfect = base * alpha
    return (e_clim - e_forecast) / (e_clim - e_perfect)


def rev_star_from_confusion(conf, cost_loss_ratios) -> np.ndarray:
    """Maximum REV over thresholds; ``conf`` is ``(n_thresholds, 4)``."""
    return rev_from_confusion(conf, cost_loss_ratios).max(axis=-2)


def rev_from_probabilities(prob, tgt, weights, n_members: int, cost_loss_ratios, mask=None) -> np.ndarray:
    conf = time_mean(confusion_series(prob, tgt, weights, n_members=n_members), mask)
    # never/always act are among the thresholds, so [0, 1] holds exactly; clip roundoff
    return np.clip(rev_star_from_confusion(conf, cost_loss_ratios), 0.0, 1.0)


def rev_curve(ens, tgt, weights, cost_loss_ratios, mask=None) -> np.ndarray:
    """Potential relative economic value REV*(C/L) for every ratio."""
    _check_binary(ens, tgt)
    ens = _as_float(ens)
    _check_pair(ens, _as_float(tgt))
    return rev_from_probabilities(ens.mean(axis=0), tgt, weights, ens.shape[0], cost_loss_ratios, mask)


# -- climatological extremes ------------------------------------------------------


@dataclass(frozen=True)
class ClimatologyPercentiles:
    percentiles: tuple
    thresholds: np.ndarray  # (n_percentiles, *spatial)

    def threshold(self, percentile: float) -> np.ndarray:
        try:
            return self.thresholds[self.percentiles.index(percentile)]
        except ValueError:
            raise KeyError(f"percentile {percentile} not computed; have {self.percentiles}") from None


def climatology_percentiles(history, percentiles) -> ClimatologyPercentiles:
    """Per-cell empirical percentiles over time (axis 0), linear interpolation."""
    history = _as_float(history)
    if history.ndim < 1 or history.shape[0] == 0:
        raise ValueError("climatology history is empty")
    if history.shape[0] < 2:
        raise ValueError("climatology needs at least two time samples per cell")
    pct = tuple(float(p) for p in percentiles)
    thresholds = np.percentile(history, pct, axis=0, method="linear")
    return ClimatologyPercentiles(pct, thresholds)


def exceedance_binarize(values, threshold, direction: str = "above") -> np.ndarray:
    """Strict-inequality exceedance indicator; threshold broadcasts over leading dims."""
    values = np.asarray(values)
    threshold = np.asarray(threshold)
    if values.shape[values.ndim - threshold.ndim:] != threshold.shape:
        raise ValueError(f"threshold grid {threshold.shape} does not match values {values.shape}")
    if direction == "above":
        return (values > threshold).astype(np.int8)
    if direction == "below":
        return (values < threshold).astype(np.int8)
    raise ValueError(f"direction must be 'above' or 'below', got {direction!r}")


def metric_record(variable: str, level, lead_time_h, metric: str, value) -> dict:
    return {
        "variable": variable,
        "level": level,
        "lead_time_h": lead_time_h,
        "metric": metric,
        "value": value if np.ndim(value) == 0 else np.asarray(value).tolist(),
    }
