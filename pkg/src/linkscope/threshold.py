"""Fixed-threshold detectors: no training, constants in dB.

Three rules, one per representation that admits a predetermined cut:

  time-value  D'Agostino-Pearson omnibus normality test; a link whose sample
              distribution departs from Gaussian at p < 1e-3 is anomalous.
  aggregated  |mean - median| > 3 dB or 2*stdev > 2.5 dB.
  histogram   any sample strictly below -85 dBm (existential; an optional
              minimum-fraction knob tightens it).

The normality test is implemented here directly from the published moment
transforms so the rule carries no statistics dependency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .inject import Label
from .traces import RssiTrace


@dataclass(frozen=True)
class ThresholdConfig:
    p_value_cut: float = 1e-3
    mean_median_cut_db: float = 3.0
    two_std_cut_db: float = 2.5
    hist_floor_dbm: float = -85.0
    hist_min_fraction: float = 0.0


def _as_matrix(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected 1-d or 2-d samples, got shape {x.shape}")
    return x


def normality_pvalues(samples) -> np.ndarray:
    """Vectorized D'Agostino-Pearson omnibus p-values, one per row.

    K^2 = Z(skew)^2 + Z(kurt)^2 is chi-square with 2 dof under normality,
    so p = exp(-K^2 / 2).  Constant rows get p = 0 by definition.  Needs at
    least 20 samples for the kurtosis moment transform to be valid.
    """
    x = _as_matrix(samples)
    n = x.shape[1]
    if n < 20:
        raise ValueError(f"normality test needs >= 20 samples, got {n}")
    mean = x.mean(axis=1, keepdims=True)
    d = x - mean
    m2 = np.mean(d**2, axis=1)
    m3 = np.mean(d**3, axis=1)
    m4 = np.mean(d**4, axis=1)
    constant = m2 == 0.0
    m2safe = np.where(constant, 1.0, m2)

    # skewness transform (D'Agostino)
    b1 = m3 / m2safe**1.5
    y = b1 * np.sqrt(((n + 1) * (n + 3)) / (6.0 * (n - 2)))
    beta2 = 3.0 * (n * n + 27 * n - 70) * (n + 1) * (n + 3) / ((n - 2.0) * (n + 5) * (n + 7) * (n + 9))
    w2 = -1.0 + np.sqrt(2.0 * (beta2 - 1.0))
    delta = 1.0 / np.sqrt(0.5 * np.log(w2))
    alpha = np.sqrt(2.0 / (w2 - 1.0))
    y = np.where(y == 0, 1.0, y)
    z_skew = delta * np.log(y / alpha + np.sqrt((y / alpha) ** 2 + 1.0))

    # kurtosis transform (Anscombe-Glynn)
    b2 = m4 / m2safe**2
    e_b2 = 3.0 * (n - 1) / (n + 1)
    var_b2 = 24.0 * n * (n - 2) * (n - 3) / ((n + 1.0) ** 2 * (n + 3) * (n + 5))
    xs = (b2 - e_b2) / np.sqrt(var_b2)
    sqrt_beta1 = (
        6.0 * (n * n - 5 * n + 2) / ((n + 7.0) * (n + 9)) * np.sqrt(6.0 * (n + 3) * (n + 5) / (n * (n - 2.0) * (n - 3)))
    )
    a = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + np.sqrt(1.0 + 4.0 / sqrt_beta1**2))
    term1 = 1.0 - 2.0 / (9.0 * a)
    denom = 1.0 + xs * np.sqrt(2.0 / (a - 4.0))
    denom_safe = np.where(denom == 0, 1.0, denom)
    term2 = np.sign(denom) * np.cbrt((1.0 - 2.0 / a) / np.abs(denom_safe))
    z_kurt = (term1 - term2) / np.sqrt(2.0 / (9.0 * a))

    k2 = z_skew**2 + z_kurt**2
    p = np.exp(-0.5 * k2)
    p = np.where(denom == 0, 0.0, p)
    return np.where(constant, 0.0, p)


def normality_pvalue(samples) -> float:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d sample vector, got shape {x.shape}")
    return float(normality_pvalues(x[None, :])[0])


def _values(t) -> np.ndarray:
    if isinstance(t, RssiTrace):
        return t.values()
    return np.asarray(t, dtype=np.float64)


def detect_time_value(t, cfg: ThresholdConfig = ThresholdConfig()) -> Label:
    p = normality_pvalue(_values(t))
    return Label.ANOMALOUS if p < cfg.p_value_cut else Label.NORMAL


def detect_aggregated(v, cfg: ThresholdConfig = ThresholdConfig()) -> Label:
    """v is the 7-dim aggregated vector [mean, std, min, q25, median, q75, max]."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (7,):
        raise ValueError(f"expected the 7-dim aggregated vector, got shape {v.shape}")
    mean, std, median = v[0], v[1], v[4]
    if abs(mean - median) > cfg.mean_median_cut_db or 2.0 * std > cfg.two_std_cut_db:
        return Label.ANOMALOUS
    return Label.NORMAL


def detect_histogram(t, cfg: ThresholdConfig = ThresholdConfig()) -> Label:
    """Flag a trace whose low tail reaches below the floor cut.

    With the default min fraction of 0 a single sample strictly below
    hist_floor_dbm is enough.
    """
    x = _values(t)
    frac_low = float(np.mean(x < cfg.hist_floor_dbm))
    return Label.ANOMALOUS if frac_low > cfg.hist_min_fraction else Label.NORMAL
