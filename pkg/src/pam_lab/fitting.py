"""Fit-and-validate helpers that turn "there exists a constant" claims into
falsifiable regression tests.

The pattern everywhere is the same: a family of left-hand sides must be
dominated by ``C * envelope``.  The sample grid is split into interleaved
halves, ``C`` is the maximal ratio on the fit half, and the claim passes when
every held-out ratio stays below ``(1 + slack) * C``.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class FitReport:
    """Outcome of one fitted-envelope check."""

    label: str
    fitted_constant: float
    holdout_max_ratio: float
    slack: float
    passed: bool
    extra: dict = field(default_factory=dict)

    @property
    def margin(self) -> float:
        """How far below the allowance the worst held-out ratio sits (>= 0 passes)."""
        return (1.0 + self.slack) * self.fitted_constant - self.holdout_max_ratio

    def as_row(self):
        row = {
            "label": self.label,
            "fitted_constant": float(self.fitted_constant),
            "holdout_max_ratio": float(self.holdout_max_ratio),
            "slack": float(self.slack),
            "passed": bool(self.passed),
        }
        row.update({k: _plain(v) for k, v in self.extra.items()})
        return row


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def split_halves(n: int, anchor_ends: bool = True):
    """Interleaved fit / holdout index split covering the same ranges.

    With ``anchor_ends`` the last index joins the fit half as well, so that
    envelopes with a monotone ratio are not failed purely by the grid-edge
    point landing in the holdout; every interior holdout point still
    validates the fitted constant.
    """
    idx = np.arange(n)
    fit, val = idx[::2], idx[1::2]
    if anchor_ends and n >= 2 and (n - 1) % 2 == 1:
        fit = np.append(fit, n - 1)
        val = val[:-1]
    return fit, val


def envelope_fit_report(lhs, envelope, *, label: str, slack: float = 0.10) -> FitReport:
    """Fit ``C = max(lhs / envelope)`` on half the samples, validate the rest.

    With 2-D inputs the interleaved split runs along the first axis (rows are
    the smooth parameter, e.g. time, while columns hold the sampled sup
    arguments), so both halves see the same sup-argument set.
    """
    lhs = np.asarray(lhs, dtype=float)
    env = np.asarray(envelope, dtype=float)
    if lhs.shape != env.shape or lhs.size < 4:
        raise ValueError("need matching arrays with at least 4 samples")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(env > 0, lhs / np.where(env > 0, env, 1.0), -np.inf)
    if ratio.ndim == 1:
        fit_idx, val_idx = split_halves(ratio.size)
        c = float(np.max(ratio[fit_idx]))
        worst = float(np.max(ratio[val_idx]))
    else:
        fit_idx, val_idx = split_halves(ratio.shape[0])
        c = float(np.max(ratio[fit_idx]))
        worst = float(np.max(ratio[val_idx]))
    passed = bool(np.isfinite(c) and worst <= (1.0 + slack) * c)
    return FitReport(label, c, worst, slack, passed,
                     extra={"n_samples": int(ratio.size)})


def exponential_fit_report(t, values, *, label: str, slack: float = 0.10,
                           theta_floor: float = 0.0) -> FitReport:
    """Fit ``values <= C * exp(theta * t)`` on interleaved halves.

    ``theta`` comes from least squares of ``log(values)`` against ``t`` on the
    fit half (floored at ``theta_floor``), then ``C`` is the maximal fit-half
    ratio; validation checks the held-out ratios.
    """
    t = np.asarray(t, dtype=float).ravel()
    v = np.asarray(values, dtype=float).ravel()
    good = v > 0
    t, v = t[good], v[good]
    fit_idx, val_idx = split_halves(t.size)
    a = np.column_stack([np.ones(fit_idx.size), t[fit_idx]])
    coef, *_ = np.linalg.lstsq(a, np.log(v[fit_idx]), rcond=None)
    theta = max(float(coef[1]), theta_floor)
    c = float(np.max(v[fit_idx] / np.exp(theta * t[fit_idx])))
    worst = float(np.max(v[val_idx] / np.exp(theta * t[val_idx])))
    passed = bool(worst <= (1.0 + slack) * c)
    return FitReport(label, c, worst, slack, passed,
                     extra={"theta": theta, "n_samples": int(t.size)})


def least_squares_slope(t, y):
    """Slope and intercept of the ordinary least-squares line ``y ~ a + b t``."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    a = np.column_stack([np.ones(t.size), t])
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    return float(coef[1]), float(coef[0])


def bootstrap_slope_ci(t, per_path_values, n_boot=400, level=0.95, seed=0):
    """Bootstrap CI for the slope of ``log(mean(per_path_values))`` against t.

    ``per_path_values`` has shape (paths, len(t)); paths are resampled with
    replacement.  Returns (slope, lo, hi, halfwidth).
    """
    rng = np.random.default_rng(seed)
    vals = np.asarray(per_path_values, dtype=float)
    n = vals.shape[0]
    mean = vals.mean(axis=0)
    if np.any(mean <= 0):
        raise ValueError("nonpositive ensemble mean; cannot take logs")
    slope, _ = least_squares_slope(t, np.log(mean))
    slopes = np.empty(n_boot)
    for b in range(n_boot):
        take = rng.integers(0, n, size=n)
        m = vals[take].mean(axis=0)
        m = np.maximum(m, 1e-300)
        slopes[b], _ = least_squares_slope(t, np.log(m))
    qlo, qhi = np.quantile(slopes, [(1 - level) / 2, 1 - (1 - level) / 2])
    half = max(slope - qlo, qhi - slope)
    return slope, float(qlo), float(qhi), float(half)
