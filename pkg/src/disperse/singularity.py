"""Tangential singularities: tangency sets, resolution charts, pullbacks.

The tangency functional of a line is ``Fbar(line) = min_t R(p + t v)``:
negative for lines that cross the scatterer, zero for tangent lines and
positive for lines that miss it. Near a tangent line we use the chart
coordinates ``(p_1..p_{d-2}, upsilon, w)`` where ``tau = upsilon**2 = -Fbar``
measures how deep the line cuts into the body. The half-map
``tau -> reflected line`` has a square-root singularity; in ``upsilon`` it
is smooth and continues through ``upsilon = 0`` by reflecting at the exit
point of the chord instead of the entry point ("phantom continuation").
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize_scalar

from . import fd
from .billiard import (
    OrientedLine,
    PhasePoint,
    billiard_map_n,
    inverse_step,
    reflect_velocity,
    tangent_frame,
)
from .errors import (
    ContinuationUnavailableError,
    DisperseError,
    NoConvergenceError,
    NoHitError,
    NoMinimumError,
    OutOfChartError,
    PreconditionError,
    StencilCrossingError,
)
from .geometry import min_hessian_eigenvalue
from .scaling import fit_loglog


def _line_min(cfg, instance, p, v):
    s = cfg.scatterer(instance)
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    y0 = p - instance.offset - s.center
    if s.is_quadratic:
        A = float(np.sum(s.diag * v * v))
        t = -float((y0 * s.diag) @ v) / A
        q = p + t * v
        val, grad = cfg.evaluate(instance, q, order=1)
        return float(val), t, q, grad, 2.0 * A
    t = -float(y0 @ v)
    max_iter = cfg.tolerances.newton_max_iter
    for _ in range(max_iter):
        val, grad, hess = cfg.evaluate(instance, p + t * v, order=2)
        g1, g2 = grad @ v, v @ hess @ v
        if g2 <= 0:
            break
        step = g1 / g2
        t -= step
        if abs(step) < 1e-15:
            break
    else:
        g2 = -1.0
    if g2 <= 0:
        rho = s.bounding_radius
        tc = -float(y0 @ v)
        res = minimize_scalar(
            lambda tt: float(cfg.evaluate(instance, p + tt * v, order=0)[0]),
            bounds=(tc - rho, tc + rho), method="bounded", options={"xatol": 1e-14},
        )
        if not res.success:
            raise NoMinimumError("no interior minimizer along the line")
        t = res.x
    q = p + t * v
    val, grad, hess = cfg.evaluate(instance, q, order=2)
    fpp = float(v @ hess @ v)
    if fpp <= 0:
        raise NoMinimumError("scatterer function is not convex along the line")
    return float(val), float(t), q, grad, fpp


def line_tangency_value(cfg, instance, line):
    """``(Fbar, t_star)`` for ``line`` against one scatterer instance."""
    fbar, t, _, _, _ = _line_min(cfg, instance, line.p, line.v)
    return fbar, t


@dataclass(frozen=True, eq=False)
class TangencySolution:
    instance: object
    line: OrientedLine
    t_star: float
    q_star: np.ndarray
    residuals: tuple
    iterations: int = 0

    def phase_point(self):
        return PhasePoint(self.instance, self.q_star, self.line.v)


def solve_tangent_line(cfg, instance, l0):
    """Newton on ``R = 0, dR/dt = 0`` in one line coordinate and ``t``.

    The moving coordinate is the offset of ``p`` inside the plane normal to
    ``v`` along the gradient at the initial minimizer; the other line
    coordinates stay frozen.
    """
    tol = cfg.tolerances
    v = l0.v
    _, t, _, grad, _ = _line_min(cfg, instance, l0.p, v)
    e = grad - (grad @ v) * v
    e = e / np.linalg.norm(e)
    sigma = 0.0
    for it in range(tol.newton_max_iter + 1):
        q = l0.p + sigma * e + t * v
        val, g, H = cfg.evaluate(instance, q, order=2)
        r = np.array([val, g @ v])
        if np.max(np.abs(r)) < tol.newton_residual:
            line = OrientedLine(l0.p + sigma * e, v)
            return TangencySolution(instance, line, float(t), q, (abs(r[0]), abs(r[1])), it)
        if it == tol.newton_max_iter:
            break
        J = np.array([[g @ e, g @ v], [e @ H @ v, v @ H @ v]])
        delta = np.linalg.solve(J, -r)
        sigma += delta[0]
        t += delta[1]
    raise NoConvergenceError("tangent-line Newton did not converge",
                             last_iterate=OrientedLine(l0.p + sigma * e, v))


def sample_tangency_set(cfg, instance, count, seed, near=None, spread=0.02):
    """``count`` tangent lines to ``instance`` with distinct tangency points.

    Global sampling draws the tangency point from uniform directions about
    the center and a uniform tangent direction. With ``near`` (a
    :class:`TangencySolution`) both are perturbed by ``spread`` around it.
    """
    if count <= 0:
        return []
    rng = np.random.default_rng(seed)
    s = cfg.scatterer(instance)
    d = s.dim
    if near is None:
        U = rng.standard_normal((count, d))
        V = rng.standard_normal((count, d))
    else:
        u0 = near.q_star - instance.offset - s.center
        u0 = u0 / np.linalg.norm(u0)
        U = u0 + spread * rng.standard_normal((count, d))
        V = near.line.v + spread * rng.standard_normal((count, d))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    Q = s.surface_points(U) + instance.offset
    G = cfg.evaluate(instance, Q, order=1)[1]
    out, seen = [], set()
    for q, g, v in zip(Q, G, V):
        n = g / np.linalg.norm(g)
        v = v - (v @ n) * n
        v = v / np.linalg.norm(v)
        key = tuple(np.round(q, 12))
        if key in seen:
            continue
        seen.add(key)
        out.append(solve_tangent_line(cfg, instance, OrientedLine.through(q, v)))
    return out


# -- pullbacks of the tangency set ---------------------------------------------


@dataclass
class PullbackResult:
    points: list = field(default_factory=list)
    sources: list = field(default_factory=list)
    dropped: list = field(default_factory=list)


def pullback_singularity(cfg, tangent_samples, k, check_tol=1e-8):
    """Push tangency states ``k`` steps backwards, onto ``T^{-k} S``.

    Samples whose backward orbit grazes again or escapes the horizon are
    dropped with a reason. Every retained point is re-simulated forwards
    and must land tangentially (``|cos phi| < check_tol``) on its source.
    """
    out = PullbackResult()
    for idx, sol in enumerate(tangent_samples):
        x = sol.phase_point()
        reason = None
        try:
            for _ in range(k):
                x, ev = inverse_step(cfg, x)
                if ev.tangency:
                    reason = "backward tangency"
                    break
        except NoHitError:
            reason = "backward no-hit"
        except DisperseError as exc:
            reason = f"backward failure: {exc}"
        if reason is None and k > 0:
            rec = billiard_map_n(cfg, x, k)
            last = rec.events[-1] if len(rec.events) == k else None
            if (last is None or last.instance != sol.instance
                    or abs(last.cos_phi) >= check_tol):
                reason = "forward check failed"
        if reason is None:
            out.points.append(x)
            out.sources.append(idx)
        else:
            out.dropped.append((idx, reason))
    return out


# -- quasi-regular chart --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuasiRegularChart:
    """Coordinates ``(p_1..p_{d-2}, upsilon, w_1..w_{d-1})`` near a tangent line.

    ``w`` moves the direction as ``normalize(v0 + W w)``; ``p_i`` shift the
    line inside the plane normal to ``v`` along the tangency slice; the
    remaining offset is fixed by ``-Fbar = upsilon**2``.
    """

    cfg: object
    base: TangencySolution
    normal: np.ndarray
    slice_frame: np.ndarray
    velocity_frame: np.ndarray
    radius: float
    tau_definition: str = "tau = -Fbar"

    @property
    def dim(self):
        return self.normal.size

    def split(self, coords):
        coords = np.asarray(coords, dtype=float)
        d = self.dim
        if coords.shape != (2 * d - 2,):
            raise ValueError(f"expected {2 * d - 2} chart coordinates")
        return coords[: d - 2], float(coords[d - 2]), coords[d - 1:]

    def check(self, coords):
        if np.max(np.abs(coords)) > self.radius:
            raise OutOfChartError(f"coordinates exceed the chart radius {self.radius}")

    def line(self, coords):
        pc, ups, w = self.split(coords)
        self.check(coords)
        v = self.base.line.v + self.velocity_frame @ w
        v = v / np.linalg.norm(v)
        nt = self.normal - (self.normal @ v) * v
        nt = nt / np.linalg.norm(nt)
        frame = []
        for col in self.slice_frame.T:
            e = col - (col @ v) * v - (col @ nt) * nt
            for f in frame:
                e = e - (e @ f) * f
            frame.append(e / np.linalg.norm(e))
        q0 = self.base.q_star
        pb = q0 - (q0 @ v) * v
        for c, e in zip(pc, frame):
            pb = pb + c * e
        target = -ups * ups
        inst = self.base.instance
        s = 0.0
        for _ in range(self.cfg.tolerances.newton_max_iter):
            fbar, _, _, grad, _ = _line_min(self.cfg, inst, pb - s * nt, v)
            slope = -(grad @ nt)
            step = (fbar - target) / slope
            s -= step
            if abs(step) < 1e-16:
                break
        return OrientedLine(pb - s * nt, v)

    def tau(self, line):
        return -line_tangency_value(self.cfg, self.base.instance, line)[0]


def quasi_regular_chart(cfg, base, radius=None):
    inst = base.instance
    grad = cfg.evaluate(inst, base.q_star, order=1)[1]
    n0 = grad / np.linalg.norm(grad)
    v0 = base.line.v
    d = v0.size
    Q, _ = np.linalg.qr(np.column_stack([v0, n0, np.eye(d)]))
    slice_frame = Q[:, 2:d]
    if radius is None:
        lam0 = min_hessian_eigenvalue(cfg.scatterer(inst), 200, 0)
        radius = min(0.1, lam0 / 2.0)
    return QuasiRegularChart(cfg, base, n0, slice_frame, tangent_frame(v0), float(radius))


def continued_reflection(chart, coords):
    """Reflected line for chart coordinates, smooth through ``upsilon = 0``.

    ``upsilon > 0`` reflects at the entry point of the chord (the true
    billiard reflection); ``upsilon < 0`` reflects the same line at the exit
    point, which continues the map smoothly across the tangency.
    """
    cfg = chart.cfg
    inst = chart.base.instance
    line = chart.line(coords)
    _, ups, _ = chart.split(coords)
    fbar, t_star, _, _, fpp = _line_min(cfg, inst, line.p, line.v)
    u = 0.0
    if ups != 0.0:
        u = -ups * np.sqrt(2.0 / fpp)
        for _ in range(cfg.tolerances.newton_max_iter):
            val, grad = cfg.evaluate(inst, line.point(t_star + u), order=1)
            step = val / (grad @ line.v)
            u -= step
            if abs(step) <= 1e-16 * max(1.0, abs(u)):
                break
    h = line.point(t_star + u)
    grad = cfg.evaluate(inst, h, order=1)[1]
    n = grad / np.linalg.norm(grad)
    return OrientedLine.through(h, reflect_velocity(line.v, n))


def _check_tau_grid(taus):
    taus = np.asarray(taus, dtype=float)
    if taus.size < 8:
        raise PreconditionError("tau grid needs at least 8 points")
    if taus.min() < 1e-7 * (1 - 1e-12) or taus.max() > 1e-3 * (1 + 1e-12):
        raise PreconditionError("tau grid must lie in [1e-7, 1e-3]")
    ratios = np.diff(np.log(np.sort(taus)))
    if not np.allclose(ratios, ratios[0], rtol=1e-6):
        raise PreconditionError("tau grid must be logarithmically spaced")
    return np.sort(taus)


def derivative_blowup_exponent(cfg, chart, tau_grid, kind="tau", h=1e-6):
    """Fit ``log ||D(map)||`` against the log of the transverse coordinate.

    ``kind="tau"`` differentiates in ``(p, tau, w)``; the largest singular
    value grows like ``tau**-0.5``. ``kind="upsilon"`` differentiates in
    ``(p, upsilon, w)`` with ``upsilon = sqrt(tau)`` and stays bounded.
    """
    if chart.cfg is not cfg:
        raise ValueError("chart was built for a different configuration")
    taus = _check_tau_grid(tau_grid)
    d = chart.dim
    k = d - 2
    norms = []
    for tau in taus:
        if kind == "tau":
            steps = np.full(2 * d - 2, h)
            steps[k] = 1e-3 * tau
            if tau - steps[k] <= 0:
                raise StencilCrossingError("tau stencil crosses the tangency")

            def G(c):
                cc = c.copy()
                cc[k] = np.sqrt(cc[k])
                return continued_reflection(chart, cc).coords()

            x0 = np.zeros(2 * d - 2)
            x0[k] = tau
        elif kind == "upsilon":
            steps = np.full(2 * d - 2, h)

            def G(c):
                return continued_reflection(chart, c).coords()

            x0 = np.zeros(2 * d - 2)
            x0[k] = np.sqrt(tau)
        else:
            raise ValueError("kind must be 'tau' or 'upsilon'")
        J, _ = fd.central_jacobian(G, x0, steps)
        norms.append(np.linalg.svd(J, compute_uv=False)[0])
    xs = taus if kind == "tau" else np.sqrt(taus)
    target = (-0.55, -0.45) if kind == "tau" else (-0.05, 0.05)
    return fit_loglog(xs, np.array(norms), target=target, chart=kind)


# -- even / odd resolution --------------------------------------------------------


@dataclass
class ResolutionTable:
    """Even and odd parts of a function along an ``upsilon`` line.

    ``F(upsilon) = G_plus(upsilon**2) + upsilon * G_minus(upsilon**2)``.
    """

    upsilon: np.ndarray
    tau: np.ndarray
    G_plus: np.ndarray
    G_minus: np.ndarray
    residual: float

    def __post_init__(self):
        self._plus = CubicSpline(self.tau, self.G_plus)
        self._minus = CubicSpline(self.tau, self.G_minus)

    def evaluate(self, tau):
        tau = np.asarray(tau, dtype=float)
        return self._plus(tau), self._minus(tau)

    def resolved(self, tau):
        """``G_plus**2 - tau * G_minus**2`` at ``tau``."""
        gp, gm = self.evaluate(tau)
        return gp * gp - tau * gm * gm

    def to_json(self):
        return [
            {"tau": float(t), "G_plus": float(gp), "G_minus": float(gm)}
            for t, gp, gm in zip(self.tau, self.G_plus, self.G_minus)
        ]


def even_odd_decompose(F_sampler, upsilon_grid):
    """Tabulate ``G_plus, G_minus`` on ``tau = upsilon**2``.

    ``F_sampler`` must be evaluable at negative ``upsilon``. ``G_minus(0)``
    is a quadratic extrapolation in ``tau`` from the three smallest
    positive nodes.
    """
    ups = np.unique(np.abs(np.asarray(upsilon_grid, dtype=float)))
    if ups[0] != 0.0:
        ups = np.concatenate([[0.0], ups])
    if ups.size < 4:
        raise ValueError("need at least three positive upsilon nodes")
    fp = np.array([float(F_sampler(u)) for u in ups])
    fm = np.empty_like(fp)
    for i, u in enumerate(ups):
        try:
            fm[i] = fp[i] if u == 0 else float(F_sampler(-u))
        except DisperseError as exc:
            raise ContinuationUnavailableError(f"sampler failed at upsilon={-u}") from exc
    tau = ups * ups
    g_plus = 0.5 * (fp + fm)
    g_minus = np.empty_like(fp)
    g_minus[1:] = (fp[1:] - fm[1:]) / (2.0 * ups[1:])
    coef = np.polyfit(tau[1:4], g_minus[1:4], 2)
    g_minus[0] = np.polyval(coef, 0.0)
    residual = max(
        np.max(np.abs(g_plus + ups * g_minus - fp)),
        np.max(np.abs(g_plus - ups * g_minus - fm)),
    )
    return ResolutionTable(ups, tau, g_plus, g_minus, float(residual))


def resolved_level_check(F_sampler, table, probes):
    """Largest violation of ``G_plus^2 - x G_minus^2 = F(sqrt x) F(-sqrt x)``.

    The right-hand side vanishes exactly where ``F(sqrt x) = 0`` (or its
    phantom mirror does), so a small value certifies that the resolved
    equation describes the same level set. ``G`` values come from the
    table by cubic interpolation.
    """
    xs = np.asarray(probes, dtype=float)
    if np.any(xs < 0):
        raise ValueError("probe points must satisfy x >= 0")
    worst = 0.0
    for x in xs:
        r = np.sqrt(x)
        lhs = float(table.resolved(x))
        rhs = float(F_sampler(r)) * float(F_sampler(-r))
        worst = max(worst, abs(lhs - rhs))
    return worst


def jet_nonvanishing_order(F_sampler, x0, max_order=4, tol=1e-6, scale=1.0):
    """Smallest ``m`` with some ``|d^alpha F(x0)| > tol``, ``|alpha| = m``.

    Returns ``None`` when every derivative up to ``max_order`` is below
    ``tol``; finite differences cannot certify anything above order 4.
    """
    if max_order > fd.MAX_ORDER:
        raise PreconditionError(f"max_order is capped at {fd.MAX_ORDER}")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    f = lambda x: float(F_sampler(x))
    for m in range(max_order + 1):
        for alpha in fd.multi_indices(x0.size, m):
            value, _ = fd.partial_derivative(f, x0, alpha, scale=scale)
            if abs(float(value)) > tol:
                return m
    return None
