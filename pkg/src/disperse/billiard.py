"""The billiard map on the collision space and the line-space chart.

States are stored in universal-cover coordinates: ``q`` is never wrapped
into the unit cell, and the scatterer instance carries the lattice shift.
Grazing collisions follow the "graze = pass through" convention: the
outgoing velocity equals the incoming one and the event is flagged.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .errors import (
    InvalidStartError,
    MultipleCollisionError,
    NoHitError,
    NoIntersectionError,
    PreconditionError,
    StencilCrossingError,
)
from .geometry import ScattererInstance
from . import fd

_START_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class PhasePoint:
    instance: ScattererInstance
    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))

    def allclose(self, other, atol):
        return (
            self.instance == other.instance
            and np.allclose(self.q, other.q, rtol=0, atol=atol)
            and np.allclose(self.v, other.v, rtol=0, atol=atol)
        )

    def distance(self, other):
        return float(max(np.max(np.abs(self.q - other.q)), np.max(np.abs(self.v - other.v))))


@dataclass(frozen=True, eq=False)
class OrientedLine:
    """Oriented line ``{p + t v}`` with ``|v| = 1`` and ``(p, v) = 0``."""

    p: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))

    @classmethod
    def through(cls, point, direction):
        v = np.asarray(direction, dtype=float)
        v = v / np.linalg.norm(v)
        point = np.asarray(point, dtype=float)
        return cls(point - (point @ v) * v, v)

    def point(self, t):
        return self.p + t * self.v

    def coords(self):
        return np.concatenate([self.p, self.v])


@dataclass(frozen=True, eq=False)
class ReflectionEvent:
    instance: ScattererInstance
    t_flight: float
    q_hit: np.ndarray
    cos_phi: float
    tangency: bool
    v_in: np.ndarray
    normal: np.ndarray
    v_out: np.ndarray = None


@dataclass
class TrajectoryRecord:
    initial: PhasePoint
    events: list = field(default_factory=list)
    states: list = field(default_factory=list)
    termination: str = "completed"
    message: str = ""

    @property
    def final(self):
        return self.states[-1] if self.states else self.initial


def reflect_velocity(v, n):
    """Specular reflection ``v - 2 (v, n) n``."""
    v = np.asarray(v, dtype=float)
    n = np.asarray(n, dtype=float)
    return v - 2.0 * (v @ n) * n


# -- first hit ------------------------------------------------------------------


def _candidates(cfg, q, v, t_lo, t_hi):
    """Yield ``(scatterer, shifts)`` whose bounding balls meet the segment."""
    a = q + t_lo * v
    b = q + t_hi * v
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    for s in cfg.scatterers:
        rho = s.bounding_radius
        rho_s = rho * (1.0 + 1e-8)
        smin = np.ceil(lo - rho_s - s.center).astype(int)
        smax = np.floor(hi + rho_s - s.center).astype(int)
        if np.any(smax < smin):
            continue
        axes = [np.arange(x, y + 1) for x, y in zip(smin, smax)]
        S = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, s.dim)
        C = s.center + S
        tc = np.clip((C - q) @ v, t_lo, t_hi)
        dist = np.linalg.norm(C - (q + tc[:, None] * v), axis=1)
        # slack: a grazing line sits exactly at the bounding radius of a ball
        keep = dist <= rho_s
        if np.any(keep):
            yield s, S[keep]


def _quadratic_events(s, shifts, q, v, t_lo, t_hi, tol):
    """Exact first events for a batch of translates of a quadratic scatterer."""
    D = s.diag
    Y = q - (s.center + shifts)
    A = float(np.sum(D * v * v))
    B = (Y * D) @ v
    C = np.einsum("ni,i,ni->n", Y, D, Y) - s.kappa
    out = []
    for k in range(len(shifts)):
        b, c = B[k], C[k]
        if c < -tol.on_surface:
            raise InvalidStartError(f"start lies inside scatterer {s.id} shift {tuple(shifts[k])}")
        fmin = c - b * b / A
        if fmin > tol.newton_residual:
            continue
        tstar = -b / A
        if fmin >= -tol.newton_residual:
            if t_lo < tstar <= t_hi:
                out.append((tstar, s, shifts[k], True))
            continue
        sq = np.sqrt(b * b - A * c)
        if b > 0:
            t1 = -(b + sq) / A
            t2 = c / (A * t1)
        else:
            t2 = (-b + sq) / A
            t1 = c / (A * t2) if t2 != 0 else -2.0 * b / A
        if t1 > t_lo:
            if t1 <= t_hi:
                out.append((t1, s, shifts[k], False))
        elif t2 > t_lo + _START_SLACK:
            raise InvalidStartError(f"segment starts inside scatterer {s.id} shift {tuple(shifts[k])}")
    return out


def _march_events(cfg, s, shift, q, v, t_lo, t_hi):
    """Grazing-safe scan along the ray for a non-quadratic scatterer."""
    tol = cfg.tolerances
    off = np.asarray(shift, dtype=float)
    tc = (s.center + off - q) @ v
    rho = s.bounding_radius
    a, b = max(t_lo, tc - rho), min(t_hi, tc + rho)
    if a >= b:
        return None
    step = min(cfg.tau0 / 10.0, s.min_feature / 4.0)
    ts = np.linspace(a, b, int(np.ceil((b - a) / step)) + 1)
    f, g = s.evaluate(q + ts[:, None] * v - off, order=1)
    fp = g @ v

    def F(t):
        return float(s.value(q + t * v - off))

    def FP(t):
        return float(s.evaluate(q + t * v - off, order=1)[1] @ v)

    xtol = 1e-15
    if f[0] < -tol.on_surface and a == t_lo:
        raise InvalidStartError(f"start lies inside scatterer {s.id} shift {tuple(shift)}")
    if f[0] <= tol.on_surface and a == t_lo and fp[0] < 0:
        raise InvalidStartError(f"start on scatterer {s.id} heading inwards")
    for i in range(len(ts) - 1):
        if f[i] > 0 >= f[i + 1]:
            return brentq(F, ts[i], ts[i + 1], xtol=xtol), False
        if fp[i] < 0 <= fp[i + 1]:
            tm = brentq(FP, ts[i], ts[i + 1], xtol=xtol)
            fm = F(tm)
            if fm < -tol.newton_residual:
                return brentq(F, ts[i], tm, xtol=xtol), False
            if fm <= tol.newton_residual:
                return tm, True
    return None


def first_hit(cfg, q, v, t_min=0.0, exclude=None):
    """First collision of the ray ``q + t v``, ``t_min < t <= L_max``.

    Returns a :class:`ReflectionEvent` (``v_out`` unset) or ``None`` when
    nothing is hit within the horizon bound. Both transversal roots and
    grazing double roots are resolved.
    """
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    tol = cfg.tolerances
    t_hi = cfg.horizon_bound
    found = []
    for s, shifts in _candidates(cfg, q, v, t_min, t_hi):
        if exclude is not None and exclude.base_id == s.id:
            shifts = shifts[np.any(shifts != np.asarray(exclude.shift), axis=1)]
            if not len(shifts):
                continue
        if s.is_quadratic:
            found.extend(_quadratic_events(s, shifts, q, v, t_min, t_hi, tol))
        else:
            for shift in shifts:
                hit = _march_events(cfg, s, shift, q, v, t_min, t_hi)
                if hit is not None:
                    found.append((hit[0], s, shift, hit[1]))
    if not found:
        return None
    found.sort(key=lambda e: e[0])
    t, s, shift, grazing = found[0]
    if len(found) > 1 and found[1][0] - t < cfg.tau0 / 2:
        raise MultipleCollisionError(
            f"instances ({s.id}, {tuple(shift)}) and ({found[1][1].id}, {tuple(found[1][2])}) "
            f"hit {found[1][0] - t:.3g} apart"
        )
    inst = ScattererInstance(s.id, tuple(shift))
    q_hit = q + t * v
    grad = s.evaluate(q_hit - inst.offset, order=1)[1]
    n = grad / np.linalg.norm(grad)
    cos_phi = float(-(v @ n))
    return ReflectionEvent(
        instance=inst,
        t_flight=float(t),
        q_hit=q_hit,
        cos_phi=cos_phi,
        tangency=bool(grazing or abs(cos_phi) < tol.tangency_cos),
        v_in=v,
        normal=n,
    )


# -- the map --------------------------------------------------------------------


def normal_at(cfg, x):
    grad = cfg.evaluate(x.instance, x.q, order=1)[1]
    return grad / np.linalg.norm(grad)


def cos_phi(cfg, x):
    """``(v, n(q))`` of a state; non-negative for outgoing states."""
    return float(x.v @ normal_at(cfg, x))


def billiard_step(cfg, x):
    """One application of the billiard map: fly, then reflect."""
    ev = first_hit(cfg, x.q, x.v, 0.0, exclude=x.instance)
    if ev is None:
        raise NoHitError(f"no collision within horizon {cfg.horizon_bound}")
    v_out = ev.v_in.copy() if ev.tangency else reflect_velocity(ev.v_in, ev.normal)
    ev = replace(ev, v_out=v_out)
    return PhasePoint(ev.instance, ev.q_hit, v_out), ev


def billiard_map_n(cfg, x, n, abort_on_tangency=False):
    rec = TrajectoryRecord(initial=x)
    current = x
    for _ in range(n):
        try:
            current, ev = billiard_step(cfg, current)
        except NoHitError as exc:
            rec.termination = "no-hit"
            rec.message = str(exc)
            return rec
        rec.events.append(ev)
        rec.states.append(current)
        if abort_on_tangency and ev.tangency:
            rec.termination = "tangency-abort"
            return rec
    return rec


def involution(cfg, x):
    """Time reversal ``(q, v) -> (q, -v + 2 (v, n) n)`` on outgoing states."""
    n = normal_at(cfg, x)
    return PhasePoint(x.instance, x.q, -x.v + 2.0 * (x.v @ n) * n)


def inverse_step(cfg, x):
    """``T^{-1}`` realized as ``iota . T . iota``; the event is the backward one."""
    y, ev = billiard_step(cfg, involution(cfg, x))
    return involution(cfg, y), ev


# -- line space -----------------------------------------------------------------


def phase_to_line(x):
    q, v = x.q, x.v
    return OrientedLine(q - (q @ v) * v, v)


def line_minimum(cfg, instance, p, v):
    """Minimum of the scatterer function along the line ``p + t v``.

    Returns ``(fbar, t_star, q_star, grad_at_q_star, second_derivative)``.
    Exact for quadratic scatterers; Newton with a bounded fallback otherwise.
    """
    from .singularity import _line_min

    return _line_min(cfg, instance, p, v)


def _chord_root(cfg, instance, p, v, fbar, t_star, fpp, side):
    """Entry (``side=-1``) or exit (``side=+1``) root on a crossing line."""
    s = cfg.scatterer(instance)
    if s.is_quadratic:
        A = float(np.sum(s.diag * v * v))
        return t_star + side * np.sqrt(-fbar / A)
    F = lambda t: float(cfg.evaluate(instance, p + t * v, order=0)[0])
    span = 2.0 * s.bounding_radius
    return brentq(F, t_star, t_star + side * span, xtol=1e-15) if side > 0 else \
        brentq(F, t_star - span, t_star, xtol=1e-15)


def line_to_phase(cfg, l, target, side="entry"):
    """State on ``target`` determined by the line ``l``.

    ``side="entry"`` gives the first intersection with the line's own
    direction (an incoming velocity); ``side="exit"`` gives the outgoing
    preimage under :func:`phase_to_line`. A grazing line returns its
    tangency point.
    """
    tol = cfg.tolerances
    fbar, t_star, q_star, _, fpp = line_minimum(cfg, target, l.p, l.v)
    if fbar > tol.newton_residual:
        raise NoIntersectionError(f"line misses the target (min R = {fbar:.3g})")
    if fbar >= -tol.newton_residual:
        return PhasePoint(target, q_star, l.v)
    t = _chord_root(cfg, target, l.p, l.v, fbar, t_star, fpp, -1 if side == "entry" else 1)
    return PhasePoint(target, l.p + t * l.v, l.v)


# -- finite-difference Jacobian ---------------------------------------------------


def tangent_frame(n):
    """Orthonormal basis (columns) of ``n``'s complement, by Gram-Schmidt
    of the standard basis with the axis most aligned with ``n`` skipped."""
    n = np.asarray(n, dtype=float)
    d = n.size
    skip = int(np.argmax(np.abs(n)))
    basis = [n / np.linalg.norm(n)]
    for i in range(d):
        if i == skip:
            continue
        e = np.zeros(d)
        e[i] = 1.0
        for b in basis:
            e = e - (e @ b) * b
        basis.append(e / np.linalg.norm(e))
    return np.stack(basis[1:], axis=1)


def project_to_surface(cfg, instance, point, direction, tol=None, max_iter=50):
    """Move ``point`` along ``direction`` onto the scatterer surface (Newton)."""
    lam = 0.0
    for _ in range(max_iter):
        val, grad = cfg.evaluate(instance, point + lam * direction, order=1)
        step = val / (grad @ direction)
        lam -= step
        if abs(step) < 1e-17:
            break
    return point + lam * direction


@dataclass
class JacobianResult:
    matrix: np.ndarray
    surface_frame: np.ndarray
    velocity_frame: np.ndarray
    image_surface_frame: np.ndarray
    image_velocity_frame: np.ndarray
    image: PhasePoint
    cos_in: float
    cos_out: float
    error: np.ndarray

    @property
    def measure_ratio(self):
        """``|det J| cos(phi(Tx)) / cos(phi(x))``; equals 1 for an invariant ``mu_1``."""
        return abs(np.linalg.det(self.matrix)) * self.cos_out / self.cos_in


def chart_state(cfg, x, E, F, coords):
    """State at chart coordinates ``(s, w)`` around ``x``."""
    d = x.q.size
    s, w = coords[: d - 1], coords[d - 1:]
    n0 = normal_at(cfg, x)
    q = project_to_surface(cfg, x.instance, x.q + E @ s, n0)
    v = x.v + F @ w
    return PhasePoint(x.instance, q, v / np.linalg.norm(v))


def map_jacobian_fd(cfg, x, h=None):
    """Derivative of the billiard map in orthonormal surface x hemisphere charts.

    Central differences at steps ``h`` and ``h/2``, Richardson-combined.
    Every stencil point must hit the same instance as ``x`` does, without
    grazing.
    """
    tol = cfg.tolerances
    if h is None:
        h = 1e-6 * cfg.diameter
    c_in = cos_phi(cfg, x)
    if abs(c_in) <= 10 * tol.tangency_cos:
        raise PreconditionError("input state is too close to tangency")
    y, ev = billiard_step(cfg, x)
    if ev.tangency or ev.cos_phi <= 10 * tol.tangency_cos:
        raise PreconditionError("image state is too close to tangency")
    d = x.q.size
    E, F = tangent_frame(normal_at(cfg, x)), tangent_frame(x.v)
    E2, F2 = tangent_frame(ev.normal), tangent_frame(y.v)

    def image_coords(coords):
        z, e = billiard_step(cfg, chart_state(cfg, x, E, F, coords))
        if e.instance != ev.instance or e.tangency:
            raise StencilCrossingError("stencil point leaves the smooth branch of the map")
        return np.concatenate([E2.T @ (z.q - y.q), F2.T @ z.v])

    J, err = fd.central_jacobian(image_coords, np.zeros(2 * d - 2), h)
    return JacobianResult(J, E, F, E2, F2, y, c_in, cos_phi(cfg, y), err)
