"""Log-log exponent fits shared by the blow-up and tube-volume experiments."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ScalingReport:
    """Fitted power law ``y ~ C x**slope`` over a grid of scales."""

    xs: np.ndarray
    ys: np.ndarray
    slope: float
    intercept: float
    r2: float
    target: tuple = None
    ci: np.ndarray = None
    degenerate: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def passed(self):
        if self.degenerate or self.target is None:
            return False
        lo, hi = self.target
        return bool(lo <= self.slope <= hi)

    def to_dict(self):
        out = {
            "xs": [float(x) for x in self.xs],
            "ys": [float(y) for y in self.ys],
            "slope": _num(self.slope),
            "intercept": _num(self.intercept),
            "r2": _num(self.r2),
            "degenerate": bool(self.degenerate),
        }
        if self.target is not None:
            out["target"] = [float(t) for t in self.target]
            out["passed"] = self.passed
        if self.ci is not None:
            out["ci"] = [float(c) for c in self.ci]
        out.update(self.meta)
        return out


def _num(x):
    x = float(x)
    return x if np.isfinite(x) else None


def fit_loglog(xs, ys, weights=None, target=None, **meta):
    """Weighted least-squares line through ``(log x, log y)``.

    Non-positive ``ys`` make the fit degenerate (slope is NaN); the caller
    decides whether that is an error.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if np.any(ys <= 0) or xs.size < 2:
        return ScalingReport(xs, ys, np.nan, np.nan, np.nan, target=target,
                             degenerate=True, meta=meta)
    lx, ly = np.log(xs), np.log(ys)
    w = np.ones_like(lx) if weights is None else np.asarray(weights, dtype=float)
    W = np.sum(w)
    mx, my = np.sum(w * lx) / W, np.sum(w * ly) / W
    sxx = np.sum(w * (lx - mx) ** 2)
    sxy = np.sum(w * (lx - mx) * (ly - my))
    slope = sxy / sxx
    intercept = my - slope * mx
    resid = ly - (intercept + slope * lx)
    syy = np.sum(w * (ly - my) ** 2)
    r2 = 1.0 - np.sum(w * resid**2) / syy if syy > 0 else 1.0
    return ScalingReport(xs, ys, float(slope), float(intercept), float(r2),
                         target=target, meta=meta)
