"""Implicit-surface scatterers on the unit torus and scene bookkeeping.

Every scatterer is the zero set of a function ``R`` with ``R < 0`` inside the
body and ``R > 0`` in the billiard domain, so ``grad R / |grad R|`` is the
normal pointing into the domain. Spheres use ``R = |x - c|^2 - r^2`` and
ellipsoids ``R = sum((x - c)_i^2 / a_i^2) - 1``. Optional bumps add
``-sign * a * exp(-1 / (1 - |x - b|^2 / rho^2))`` inside ``|x - b| < rho``;
positive ``sign`` pushes the surface outwards.

The configuration lives on the unit torus and is lifted periodically to
``R^d``; a :class:`ScattererInstance` is a base scatterer plus an integer
lattice shift.
"""

import itertools
import json
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.optimize import brentq, minimize

from . import fd
from .errors import (
    ConfigurationError,
    ConvexityError,
    DegenerateGradientError,
    MultipleCollisionError,
    PreconditionError,
    UnsupportedOrderError,
)

_EINV = np.exp(-1.0)


@dataclass(frozen=True)
class Tolerances:
    on_surface: float = 1e-10
    gradient_floor: float = 1e-8
    tangency_cos: float = 1e-7
    newton_residual: float = 1e-12
    newton_max_iter: int = 50

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown tolerances: {sorted(unknown)}")
        if "newton_max_iter" in data:
            data["newton_max_iter"] = int(data["newton_max_iter"])
        return cls(**{k: v for k, v in data.items()})

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True, eq=False)
class Bump:
    """Compactly supported C-infinity bump added to a scatterer function."""

    center: np.ndarray
    radius: float
    amplitude: float
    sign: int = 1

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise ConfigurationError("bump radius must be positive")
        if self.sign not in (1, -1):
            raise ConfigurationError("bump sign must be +1 or -1")

    @property
    def outward_amplitude(self):
        return max(self.sign * self.amplitude, 0.0)

    def to_dict(self):
        return {
            "center": self.center.tolist(),
            "radius": self.radius,
            "amplitude": self.amplitude,
            "sign": self.sign,
        }


@dataclass(frozen=True)
class DerivativeBundle:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    higher: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class Scatterer:
    id: int
    kind: str
    center: np.ndarray
    radius: float = None
    semi_axes: np.ndarray = None
    bumps: tuple = ()
    derivative_order: int = 4

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "bumps", tuple(self.bumps))
        if self.kind == "sphere":
            if self.radius is None or not self.radius > 0:
                raise ConfigurationError("sphere needs a positive radius")
            diag = np.ones_like(center)
            kappa = float(self.radius) ** 2
        elif self.kind == "ellipsoid":
            axes = np.asarray(self.semi_axes, dtype=float)
            if axes.shape != center.shape or np.any(axes <= 0):
                raise ConfigurationError("ellipsoid needs positive semi_axes, one per axis")
            object.__setattr__(self, "semi_axes", axes)
            diag = 1.0 / axes**2
            kappa = 1.0
        else:
            raise ConfigurationError(f"unknown scatterer kind {self.kind!r}")
        if self.derivative_order < 2:
            raise ConfigurationError("derivative_order must be at least 2")
        for b in self.bumps:
            if b.center.shape != center.shape:
                raise ConfigurationError("bump center dimension mismatch")
        object.__setattr__(self, "_diag", diag)
        object.__setattr__(self, "_kappa", kappa)

    @property
    def dim(self):
        return self.center.size

    @property
    def diag(self):
        return self._diag

    @property
    def kappa(self):
        return self._kappa

    @property
    def is_quadratic(self):
        return not any(b.amplitude != 0 for b in self.bumps)

    @property
    def active_bumps(self):
        return [b for b in self.bumps if b.amplitude != 0]

    @cached_property
    def _outward_total(self):
        return sum(b.outward_amplitude for b in self.bumps) * _EINV

    @cached_property
    def bounding_radius(self):
        """Radius of a ball about ``center`` containing the whole body."""
        return float(np.sqrt((self.kappa + self._outward_total) / self.diag.min()))

    @cached_property
    def half_widths(self):
        """Per-axis half widths of an axis-aligned box containing the body."""
        return np.sqrt((self.kappa + self._outward_total) / self.diag)

    @cached_property
    def min_feature(self):
        """Smallest geometric length scale (semi-axis or bump radius)."""
        scales = list(np.sqrt(self.kappa / self.diag))
        scales += [b.radius for b in self.active_bumps]
        return float(min(scales))

    def evaluate(self, X, order=2):
        """Vectorized ``(R, grad R, Hess R)`` truncated at ``order`` (<= 2).

        ``X`` has shape ``(..., d)``; returns a tuple with ``order + 1``
        arrays.
        """
        X = np.asarray(X, dtype=float)
        Y = X - self.center
        D = self.diag
        val = np.einsum("...i,i,...i->...", Y, D, Y) - self.kappa
        out = [val]
        if order >= 1:
            grad = 2.0 * D * Y
            out.append(grad)
        if order >= 2:
            hess = np.broadcast_to(np.diag(2.0 * D), X.shape[:-1] + (self.dim, self.dim)).copy()
            out.append(hess)
        for b in self.active_bumps:
            _add_bump(b, X, out, order)
        return tuple(out)

    def value(self, X):
        return self.evaluate(X, order=0)[0]

    def surface_points(self, directions):
        """Project unit ``directions`` from the center onto ``{R = 0}``."""
        U = np.atleast_2d(np.asarray(directions, dtype=float))
        s = np.sqrt(self.kappa / np.einsum("ni,i,ni->n", U, self.diag, U))
        if not self.is_quadratic:
            smax = 2.0 * self.bounding_radius
            for k, u in enumerate(U):
                f = lambda t, u=u: float(self.value(self.center + t * u))
                s[k] = brentq(f, 0.0, smax, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        return self.center + s[:, None] * U

    def with_bump(self, bump):
        return replace(self, bumps=self.bumps + (bump,))

    def to_dict(self):
        out = {"id": self.id, "kind": self.kind, "center": self.center.tolist()}
        if self.kind == "sphere":
            out["radius"] = self.radius
        else:
            out["semi_axes"] = self.semi_axes.tolist()
        if self.bumps:
            out["bumps"] = [b.to_dict() for b in self.bumps]
        return out

    @classmethod
    def from_dict(cls, data, default_id=0):
        bumps = tuple(
            Bump(b["center"], b["radius"], b["amplitude"], int(b.get("sign", 1)))
            for b in data.get("bumps", [])
        )
        return cls(
            id=int(data.get("id", default_id)),
            kind=data["kind"],
            center=data["center"],
            radius=data.get("radius"),
            semi_axes=data.get("semi_axes"),
            bumps=bumps,
            derivative_order=int(data.get("derivative_order", 4)),
        )


def _add_bump(b, X, out, order):
    Z = X - b.center
    u = np.einsum("...i,...i->...", Z, Z) / b.radius**2
    inside = u < 1.0
    if not np.any(inside):
        return
    scale = b.sign * b.amplitude
    one = np.where(inside, 1.0 - u, 1.0)
    g = np.where(inside, np.exp(-1.0 / one), 0.0)
    out[0] = out[0] - scale * g
    if order >= 1:
        g1 = -g / one**2
        out[1] = out[1] - scale * (g1 * 2.0 / b.radius**2)[..., None] * Z
    if order >= 2:
        g2 = g * (1.0 / one**4 - 2.0 / one**3)
        d = X.shape[-1]
        outer = np.einsum("...i,...j->...ij", Z, Z)
        hb = (g2 * 4.0 / b.radius**4)[..., None, None] * outer
        hb = hb + (g1 * 2.0 / b.radius**2)[..., None, None] * np.eye(d)
        out[2] = out[2] - scale * hb


@dataclass(frozen=True, order=True)
class ScattererInstance:
    base_id: int
    shift: tuple

    def __post_init__(self):
        object.__setattr__(self, "shift", tuple(int(s) for s in self.shift))

    @property
    def offset(self):
        return np.asarray(self.shift, dtype=float)


@dataclass(frozen=True, eq=False)
class BilliardConfig:
    dimension: int
    scatterers: tuple
    horizon_bound: float
    tau0: float
    tolerances: Tolerances = Tolerances()

    def __post_init__(self):
        object.__setattr__(self, "scatterers", tuple(self.scatterers))
        if self.dimension < 2:
            raise ConfigurationError("dimension must be at least 2")
        if not self.scatterers:
            raise ConfigurationError("at least one scatterer is required")
        ids = [s.id for s in self.scatterers]
        if ids != list(range(len(ids))):
            raise ConfigurationError("scatterer ids must be 0..K-1 in order")
        for s in self.scatterers:
            if s.dim != self.dimension:
                raise ConfigurationError(f"scatterer {s.id} has wrong dimension")
        if not (self.horizon_bound > 0 and self.tau0 > 0):
            raise ConfigurationError("horizon_bound and tau0 must be positive")

    def scatterer(self, instance):
        if isinstance(instance, ScattererInstance):
            return self.scatterers[instance.base_id]
        return self.scatterers[instance]

    def evaluate(self, instance, X, order=2):
        """Evaluate the lifted scatterer function of ``instance`` at ``X``."""
        return self.scatterer(instance).evaluate(np.asarray(X, dtype=float) - instance.offset, order)

    @property
    def diameter(self):
        """Diagonal of the unit cell; the natural length scale of the scene."""
        return float(np.sqrt(self.dimension))

    def with_scatterer(self, scatterer):
        items = list(self.scatterers)
        items[scatterer.id] = scatterer
        return replace(self, scatterers=tuple(items))

    def to_dict(self):
        return {
            "dimension": self.dimension,
            "scatterers": [s.to_dict() for s in self.scatterers],
            "horizon_bound": self.horizon_bound,
            "tau0": self.tau0,
            "tolerances": self.tolerances.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            scatterers = [
                Scatterer.from_dict(s, default_id=i) for i, s in enumerate(data["scatterers"])
            ]
            return cls(
                dimension=int(data["dimension"]),
                scatterers=scatterers,
                horizon_bound=float(data["horizon_bound"]),
                tau0=float(data["tau0"]),
                tolerances=Tolerances.from_dict(data.get("tolerances")),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed scene: {exc}") from exc


def load_scene(path):
    with open(path) as fh:
        return BilliardConfig.from_dict(json.load(fh))


def save_scene(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)


def eval_scatterer(s, x, order=2):
    """Value and derivatives of ``s`` at a single point ``x``.

    Orders 0-2 are analytic. Orders 3 and 4 are central differences of the
    analytic Hessian with Richardson extrapolation; their error estimates
    are returned in ``errors``.
    """
    if order > min(s.derivative_order, fd.MAX_ORDER):
        raise UnsupportedOrderError(
            f"order {order} exceeds the supported maximum {min(s.derivative_order, fd.MAX_ORDER)}"
        )
    x = np.asarray(x, dtype=float)
    val, grad, hess = s.evaluate(x, order=2)
    higher, errors = {}, {}
    d = s.dim
    hess_fn = lambda y: s.evaluate(y, order=2)[2]
    h_scale = s.min_feature
    for m in range(3, order + 1):
        k = m - 2
        tensor = np.zeros((d,) * m)
        worst = 0.0
        for alpha in fd.multi_indices(d, k):
            value, err = fd.partial_derivative(hess_fn, x, alpha, scale=h_scale)
            idx = tuple(i for i, a in enumerate(alpha) for _ in range(a))
            tensor[(Ellipsis,) + idx] = value
            worst = max(worst, err)
        # fill the remaining index orderings of the trailing axes
        for alpha in fd.multi_indices(d, k):
            idx = tuple(i for i, a in enumerate(alpha) for _ in range(a))
            for perm in set(itertools.permutations(idx)):
                tensor[(Ellipsis,) + perm] = tensor[(Ellipsis,) + idx]
        higher[m] = _symmetrize(tensor)
        errors[m] = worst
    return DerivativeBundle(float(val), grad, hess, higher, errors)


def _symmetrize(t):
    perms = list(itertools.permutations(range(t.ndim)))
    return sum(np.transpose(t, p) for p in perms) / len(perms)


def unit_normal(s, q, tolerances=Tolerances(), shift=None):
    """Unit normal at a surface point, pointing from the body into the domain."""
    q = np.asarray(q, dtype=float)
    if shift is not None:
        q = q - np.asarray(shift, dtype=float)
    val, grad = s.evaluate(q, order=1)
    if abs(val) >= tolerances.on_surface:
        raise PreconditionError(f"point is off the surface: R(q) = {float(val):.3g}")
    norm = np.linalg.norm(grad)
    if norm < tolerances.gradient_floor:
        raise DegenerateGradientError(f"|grad R| = {norm:.3g} below the floor")
    return grad / norm


def _random_directions(rng, n, d):
    U = rng.standard_normal((n, d))
    return U / np.linalg.norm(U, axis=1, keepdims=True)


def _bump_directions(s, rng, n):
    """Directions from the center concentrated on each bump's support."""
    out = []
    for b in s.active_bumps:
        axis = b.center - s.center
        dist = np.linalg.norm(axis)
        if dist == 0:
            continue
        spread = b.radius / dist
        U = axis / dist + spread * rng.standard_normal((n, s.dim)) / np.sqrt(s.dim)
        out.append(U / np.linalg.norm(U, axis=1, keepdims=True))
    return out


def min_hessian_eigenvalue(s, n_samples, seed):
    """Estimate the convexity constant: min over surface samples of the
    smallest Hessian eigenvalue. Bumped scatterers get extra samples on
    each bump support so the perturbation cannot be missed.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    dirs = [_random_directions(rng, n_samples, s.dim)]
    dirs += _bump_directions(s, rng, n_samples)
    pts = s.surface_points(np.vstack(dirs))
    hess = s.evaluate(pts, order=2)[2]
    lam = float(np.linalg.eigvalsh(hess)[:, 0].min())
    if lam <= 0:
        raise ConvexityError(f"smallest Hessian eigenvalue {lam:.3g} <= 0", lam)
    return lam


def enumerate_instances(cfg, center, radius):
    """Instances whose bounding box meets the bounding box of a ball.

    This is a superset of the instances whose body meets the ball; it is
    monotone in ``radius`` and ordered by ``(base_id, shift)``.
    """
    center = np.asarray(center, dtype=float)
    out = []
    for s in cfg.scatterers:
        lo = np.ceil(center - radius - s.half_widths - s.center).astype(int)
        hi = np.floor(center + radius + s.half_widths - s.center).astype(int)
        ranges = [range(a, b + 1) for a, b in zip(lo, hi)]
        for shift in itertools.product(*ranges):
            out.append(ScattererInstance(s.id, shift))
    return sorted(out)


# -- configuration validation -------------------------------------------------


@dataclass
class ValidationReport:
    min_gap: float
    gaps: list
    lambda0: list
    max_flight: float
    min_flight: float
    no_hit_count: int
    corridor: object
    flags: list

    @property
    def ok(self):
        return not self.flags

    def to_dict(self):
        return {
            "min_gap": self.min_gap,
            "gaps": self.gaps,
            "lambda0": self.lambda0,
            "max_flight": self.max_flight,
            "min_flight": self.min_flight,
            "no_hit_count": self.no_hit_count,
            "corridor": self.corridor,
            "flags": self.flags,
            "ok": self.ok,
        }


def _support(s, u):
    """Support function of a conservative quadratic hull of ``s``."""
    kappa = s.kappa + s._outward_total
    return float(s.center @ u + np.sqrt(kappa * np.sum(u * u / s.diag)))


def signed_gap(a, b, shift=None):
    """Signed separation of two convex bodies (negative means overlap).

    Maximizes the separating-axis gap ``min_B <u, y> - max_A <u, x>`` over
    unit ``u``; for spheres this is ``|c_b - c_a| - r_a - r_b`` exactly.
    """
    off = np.zeros(a.dim) if shift is None else np.asarray(shift, dtype=float)

    def neg_gap(w):
        u = w / np.linalg.norm(w)
        return _support(a, u) + _support(b, -u) - off @ u

    start = b.center + off - a.center
    if not np.any(start):
        start = np.eye(a.dim)[0]
    res = minimize(neg_gap, start, method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000})
    return float(-res.fun)


def _pairwise_gaps(cfg):
    out = []
    reach = max(s.bounding_radius for s in cfg.scatterers)
    for a, b in itertools.combinations_with_replacement(cfg.scatterers, 2):
        lo = np.floor(a.center - b.center - 2 * reach).astype(int)
        hi = np.ceil(a.center - b.center + 2 * reach).astype(int)
        for shift in itertools.product(*[range(x, y + 1) for x, y in zip(lo, hi)]):
            if a.id == b.id and not any(shift):
                continue
            if a.id == b.id and shift < tuple(-np.asarray(shift)):
                continue
            dist = np.linalg.norm(b.center + np.asarray(shift) - a.center)
            if dist > a.bounding_radius + b.bounding_radius + reach:
                continue
            out.append({"pair": [a.id, b.id], "shift": list(shift),
                        "gap": signed_gap(a, b, shift)})
    return out


def axis_corridor(cfg, resolution=64):
    """Look for an axis-parallel line that provably misses every scatterer.

    Returns ``{"axis": k, "offset": [...]}`` for the first certified line
    (transverse distance to every projected center exceeds the bounding
    radius, with periodic wrap), or ``None``.
    """
    d = cfg.dimension
    grid = (np.arange(resolution) + 0.5) / resolution
    for axis in range(d):
        keep = [i for i in range(d) if i != axis]
        pts = np.array(list(itertools.product(grid, repeat=d - 1)))
        clear = np.ones(len(pts), dtype=bool)
        for s in cfg.scatterers:
            delta = pts - s.center[keep]
            delta -= np.round(delta)
            clear &= np.linalg.norm(delta, axis=1) > s.bounding_radius
        if np.any(clear):
            return {"axis": axis, "offset": pts[np.argmax(clear)].tolist()}
    return None


def random_phase_point(cfg, rng, min_cos=0.0):
    """Uniformly placed outgoing state on a random base scatterer."""
    from .billiard import PhasePoint

    s = cfg.scatterers[rng.integers(len(cfg.scatterers))]
    q = s.surface_points(_random_directions(rng, 1, s.dim))[0]
    n = unit_normal(s, q, cfg.tolerances)
    while True:
        v = _random_directions(rng, 1, s.dim)[0]
        c = v @ n
        if c < 0:
            v, c = v - 2 * c * n, -c
        if c > min_cos:
            break
    return PhasePoint(ScattererInstance(s.id, (0,) * s.dim), q, v)


def validate_configuration(cfg, n_samples, seed, n_steps=100):
    """Check the standing assumptions; violations are reported, not raised."""
    from .billiard import billiard_map_n

    flags = []
    gaps = _pairwise_gaps(cfg)
    min_gap = min((g["gap"] for g in gaps), default=np.inf)
    if min_gap <= 0:
        flags.append("disjointness")
    elif min_gap < cfg.tau0:
        flags.append("tau0")

    lambda0 = []
    for s in cfg.scatterers:
        try:
            lambda0.append(min_hessian_eigenvalue(s, 200, seed))
        except ConvexityError as exc:
            lambda0.append(exc.min_eigenvalue)
            flags.append("convexity")

    flights = []
    no_hit = 0
    if "disjointness" not in flags:
        rng = np.random.default_rng(seed)
        for _ in range(n_samples):
            x = random_phase_point(cfg, rng)
            try:
                rec = billiard_map_n(cfg, x, n_steps, abort_on_tangency=False)
            except MultipleCollisionError:
                if "multiple_collision" not in flags:
                    flags.append("multiple_collision")
                continue
            flights.extend(ev.t_flight for ev in rec.events)
            if rec.termination == "no-hit":
                no_hit += 1
    max_flight = max(flights, default=np.nan)
    min_flight = min(flights, default=np.nan)
    if flights and min_flight < cfg.tau0:
        if "tau0" not in flags:
            flags.append("tau0")

    corridor = axis_corridor(cfg)
    if corridor is not None or no_hit or (flights and max_flight > cfg.horizon_bound):
        flags.append("finite_horizon")

    return ValidationReport(
        min_gap=float(min_gap),
        gaps=gaps,
        lambda0=lambda0,
        max_flight=float(max_flight),
        min_flight=float(min_flight),
        no_hit_count=no_hit,
        corridor=corridor,
        flags=flags,
    )
