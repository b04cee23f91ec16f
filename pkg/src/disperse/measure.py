"""Monte Carlo tube volumes around zero sets and singularity manifolds."""

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import fd
from ._parallel import map_chunks
from .billiard import PhasePoint, phase_to_line
from .errors import InsufficientSamplesError, PreconditionError, ResolutionError
from .geometry import ScattererInstance
from .scaling import fit_loglog
from .singularity import pullback_singularity, sample_tangency_set

CHUNK = 1 << 16


# -- scalar fields ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScalarFieldSpec:
    """A smooth field ``F`` on the ball ``B(center, radius)``.

    ``func`` and ``grad`` act on arrays of shape ``(N, d)``. Without
    ``grad`` the gradient is taken by central differences. ``order`` is the
    ``m`` for which some derivative of order ``m - 1`` is nonzero at the
    center.
    """

    func: object
    dim: int
    radius: float = 1.0
    center: np.ndarray = None
    order: int = 1
    grad: object = None
    c1: float = 0.5
    name: str = "field"

    def __post_init__(self):
        c = np.zeros(self.dim) if self.center is None else np.asarray(self.center, dtype=float)
        object.__setattr__(self, "center", c)

    @property
    def sample_radius(self):
        return self.c1 * self.radius

    def value(self, X):
        return np.asarray(self.func(np.atleast_2d(X)), dtype=float)

    def gradient(self, X):
        X = np.atleast_2d(X)
        if self.grad is not None:
            return np.asarray(self.grad(X), dtype=float)
        h = 1e-6 * max(self.radius, 1.0)
        G = np.empty_like(X)
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = h
            G[:, i] = (self.func(X + e) - self.func(X - e)) / (2 * h)
        return G

    def jet_bounds(self, n_samples=64, seed=0):
        """Estimates of ``(c0, C0, C1)``.

        ``c0 = C0`` is the largest ``|d^alpha F(center)|`` over
        ``|alpha| = m - 1``; ``C1`` is the largest order-``m`` derivative over
        random points of the sampling ball.
        """
        f = lambda x: float(self.func(x[None, :])[0])
        m = self.order
        top = max(abs(fd.partial_derivative(f, self.center, a, scale=self.radius)[0])
                  for a in fd.multi_indices(self.dim, m - 1))
        rng = np.random.default_rng(seed)
        pts = uniform_ball(rng, n_samples, self.dim) * self.sample_radius + self.center
        C1 = 0.0
        if m <= fd.MAX_ORDER:
            for x in pts:
                for a in fd.multi_indices(self.dim, m):
                    C1 = max(C1, abs(fd.partial_derivative(f, x, a, scale=self.radius)[0]))
        return float(top), float(top), float(C1)


def hyperplane_field(d=2, radius=1.0):
    return ScalarFieldSpec(
        func=lambda X: X[:, 0],
        grad=lambda X: np.broadcast_to(np.eye(d)[0], X.shape).copy(),
        dim=d, radius=radius, order=2, name="hyperplane",
    )


def circle_field(d=2, r0=0.5, radius=1.5):
    """``|x|^2 - r0^2``; the default ball has sampling radius ``0.75 > r0``."""
    return ScalarFieldSpec(
        func=lambda X: np.einsum("ni,ni->n", X, X) - r0 * r0,
        grad=lambda X: 2.0 * X,
        dim=d, radius=radius, order=1, name="circle",
    )


def crossing_field(radius=1.0):
    """``x1^2 - x2^2``: two lines crossing where the gradient vanishes."""
    return ScalarFieldSpec(
        func=lambda X: X[:, 0] ** 2 - X[:, 1] ** 2,
        grad=lambda X: np.stack([2 * X[:, 0], -2 * X[:, 1]], axis=1),
        dim=2, radius=radius, order=3, name="crossing",
    )


def no_zero_field(d=2, radius=1.0):
    return ScalarFieldSpec(
        func=lambda X: X[:, 0] ** 2 + 1.0,
        grad=lambda X: np.stack([2 * X[:, 0]] + [0 * X[:, 0]] * (d - 1), axis=1),
        dim=d, radius=radius, order=1, name="no_zero",
    )


FIELDS = {
    "hyperplane": hyperplane_field,
    "circle": circle_field,
    "crossing": crossing_field,
    "no_zero": no_zero_field,
}


def uniform_ball(rng, n, d):
    X = rng.standard_normal((n, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    return X * rng.random(n)[:, None] ** (1.0 / d)


# -- distance to the zero set -------------------------------------------------------------


def _newton_project(spec, X, tol=1e-12, max_iter=60):
    """Damped Newton ``x -> x - F grad F / |grad F|^2``; NaN rows did not converge."""
    Y = np.array(X, dtype=float)
    active = np.ones(len(Y), dtype=bool)
    done = np.zeros(len(Y), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        Ya = Y[idx]
        f = spec.value(Ya)
        conv = np.abs(f) < tol
        done[idx[conv]] = True
        active[idx[conv]] = False
        idx, Ya, f = idx[~conv], Ya[~conv], f[~conv]
        if not len(idx):
            break
        g = spec.gradient(Ya)
        gg = np.einsum("ni,ni->n", g, g)
        bad = gg < 1e-300
        active[idx[bad]] = False
        step = (f / np.where(bad, 1.0, gg))[:, None] * g
        # damp steps that would leave the ball by a wide margin
        lim = spec.radius
        sn = np.linalg.norm(step, axis=1)
        step *= np.minimum(1.0, lim / np.maximum(sn, 1e-300))[:, None]
        Y[idx] = Ya - step
    Y[~done] = np.nan
    return Y


def _foot_points(spec, X, iters=8):
    """Orthogonal foot points by alternating tangent moves and Newton projections."""
    Y = _newton_project(spec, X)
    for _ in range(iters):
        ok = ~np.isnan(Y[:, 0])
        if not ok.any():
            break
        g = spec.gradient(Y[ok])
        n = g / np.linalg.norm(g, axis=1, keepdims=True)
        D = X[ok] - Y[ok]
        T = Y[ok] + D - np.einsum("ni,ni->n", D, n)[:, None] * n
        Z = _newton_project(spec, T)
        keep = ~np.isnan(Z[:, 0])
        upd = np.flatnonzero(ok)[keep]
        better = np.linalg.norm(X[upd] - Z[keep], axis=1) <= np.linalg.norm(X[upd] - Y[upd], axis=1)
        Y[upd[better]] = Z[keep][better]
    return Y


def zero_cloud(spec, per_axis=None, spacing=1e-4):
    """Zero-set points from Newton projections of a grid over the ball.

    Points are thinned to one per cell of size ``spacing * radius``; grid
    points along a common ray land on nearly the same zero, and such
    clusters make nearest-neighbor queries slow without adding accuracy.
    """
    if per_axis is None:
        per_axis = {1: 2000, 2: 400, 3: 60}.get(spec.dim, 16)
    axes = [np.linspace(-1.0, 1.0, per_axis)] * spec.dim
    G = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, spec.dim)
    G = G[np.linalg.norm(G, axis=1) <= 1.0] * spec.radius + spec.center
    Z = _newton_project(spec, G)
    Z = Z[~np.isnan(Z[:, 0])]
    Z = Z[np.linalg.norm(Z - spec.center, axis=1) <= spec.radius]
    _, keep = np.unique(np.floor(Z / (spacing * spec.radius)), axis=0, return_index=True)
    return Z[np.sort(keep)]


@dataclass
class ZeroSetIndex:
    """Precomputed cloud plus KD-tree for repeated distance queries."""

    spec: ScalarFieldSpec
    cloud: np.ndarray
    tree: object = None

    def __post_init__(self):
        if len(self.cloud):
            self.tree = cKDTree(self.cloud)

    @classmethod
    def build(cls, spec, per_axis=None):
        return cls(spec, zero_cloud(spec, per_axis))

    @property
    def spacing(self):
        if len(self.cloud) < 2:
            return np.inf
        d, _ = self.tree.query(self.cloud, 2)
        return float(np.median(d[:, 1]))

    def distances(self, X, method="both", cutoff=np.inf):
        """Distances to the zero set; values beyond ``cutoff`` may read ``inf``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.full(len(X), np.inf)
        if method in ("both", "newton"):
            Y = _foot_points(self.spec, X)
            ok = ~np.isnan(Y[:, 0])
            ok[ok] = np.linalg.norm(Y[ok] - self.spec.center, axis=1) <= self.spec.radius
            out[ok] = np.linalg.norm(X[ok] - Y[ok], axis=1)
        if method in ("both", "cloud") and self.tree is not None:
            out = np.minimum(out, self.tree.query(X, distance_upper_bound=cutoff)[0])
        return out


def zero_set_distance(spec, x, index=None, method="both"):
    """Distance from ``x`` to ``{F = 0}`` inside the ball; ``inf`` if none is found."""
    index = ZeroSetIndex.build(spec) if index is None else index
    return float(index.distances(np.asarray(x, dtype=float)[None, :], method)[0])


# -- tube volumes -----------------------------------------------------------------------


@dataclass
class TubeEstimate:
    delta: float
    volume_fraction: float
    confidence_halfwidth: float
    n_samples: int
    seed: int
    count: int = 0

    def to_dict(self):
        return dict(self.__dict__)


def _estimate(delta, count, n, seed):
    p = count / n
    return TubeEstimate(float(delta), p, 1.96 * np.sqrt(p * (1 - p) / n), n, seed, int(count))


def _chunk_sizes(n):
    return [min(CHUNK, n - i) for i in range(0, n, CHUNK)]


def tube_counts(distance_fn, sampler, deltas, n_samples, seed):
    """Exact integer counts of ``distance < delta`` for each delta.

    Chunk ``i`` draws from ``default_rng([seed, i])`` so the counts do not
    depend on how chunks are scheduled.
    """
    deltas = np.asarray(deltas, dtype=float)

    def work(i, size):
        rng = np.random.default_rng([seed, i])
        dist = distance_fn(sampler(rng, size))
        return (dist[:, None] < deltas[None, :]).sum(axis=0)

    parts = map_chunks(work, list(enumerate(_chunk_sizes(n_samples))))
    return np.sum(parts, axis=0).astype(np.int64) if parts else np.zeros(len(deltas), np.int64)


def _ball_sampler(spec):
    def sample(rng, n):
        return uniform_ball(rng, n, spec.dim) * spec.sample_radius + spec.center
    return sample


def tube_volumes(spec, deltas, n_samples, seed, index=None):
    index = ZeroSetIndex.build(spec) if index is None else index
    for dl in np.atleast_1d(deltas):
        if not 0 < dl < spec.c1:
            raise PreconditionError(f"delta {dl} outside (0, c1)")
    cutoff = 2.0 * float(np.max(deltas))
    counts = tube_counts(lambda X: index.distances(X, cutoff=cutoff), _ball_sampler(spec),
                         deltas, n_samples, seed)
    return [_estimate(dl, c, n_samples, seed) for dl, c in zip(deltas, counts)]


def tube_volume(spec, delta, n_samples, seed, index=None):
    """Monte Carlo fraction of the sampling ball within ``delta`` of ``{F = 0}``."""
    return tube_volumes(spec, [delta], n_samples, seed, index)[0]


def _check_deltas(deltas, lo=1e-3, hi=1e-1):
    deltas = np.sort(np.asarray(deltas, dtype=float))
    if deltas.size < 5:
        raise PreconditionError("need at least 5 deltas")
    if deltas[0] < lo * (1 - 1e-9) or deltas[-1] > hi * (1 + 1e-9):
        raise PreconditionError(f"deltas must lie in [{lo}, {hi}]")
    return deltas


def _fit_estimates(estimates, target, **meta):
    zero = [e.delta for e in estimates if e.count == 0]
    xs = np.array([e.delta for e in estimates])
    ps = np.array([e.volume_fraction for e in estimates])
    if len(zero) == len(estimates):
        rep = fit_loglog(xs, ps, target=target, **meta)
        rep.meta["estimates"] = [e.to_dict() for e in estimates]
        return rep
    if zero:
        raise InsufficientSamplesError(f"no samples inside the tube for delta in {zero}")
    n = np.array([e.n_samples for e in estimates])
    weights = n * ps / (1 - ps)  # inverse variance of log(p_hat)
    ratio = ps / xs
    rep = fit_loglog(xs, ps, weights=weights, target=target,
                     fraction_over_delta_ratio=float(ratio.max() / ratio.min()), **meta)
    rep.meta["estimates"] = [e.to_dict() for e in estimates]
    return rep


def scaling_fit(spec, delta_list, n_samples, seed, target=(0.9, 1.1)):
    """Slope of ``log fraction`` against ``log delta`` (expected 1)."""
    deltas = _check_deltas(delta_list)
    est = tube_volumes(spec, deltas, n_samples, seed)
    return _fit_estimates(est, target, field=spec.name, n_samples=n_samples, seed=seed)


# -- tubes around singularity manifolds -----------------------------------------------------


@dataclass(frozen=True)
class PhaseWindow:
    """Outgoing states on a cap of one scatterer instance.

    ``axis`` points from the scatterer center to the middle of the cap;
    ``half_angle`` is the cap's angular radius seen from the center and
    ``max_angle`` bounds the reflection angle ``phi`` (``pi/2`` allows
    grazing states).
    """

    base_id: int
    shift: tuple
    axis: tuple
    half_angle: float
    max_angle: float = np.pi / 2

    @property
    def instance(self):
        return ScattererInstance(self.base_id, tuple(self.shift))


def _cap_directions(rng, n, axis, half_angle):
    """Uniform directions on the spherical cap around ``axis``."""
    d = axis.size
    cmin = np.cos(half_angle)
    out = np.empty((0, d))
    while len(out) < n:
        U = rng.standard_normal((2 * n, d))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        out = np.vstack([out, U[U @ axis >= cmin]])
    return out[:n]


def sample_mu1(cfg, window, rng, n):
    """Rejection sampler for ``cos(phi) dq dv`` restricted to ``window``.

    Returns line-space coordinates ``(p, v)`` (shape ``(n, 2d)``) together
    with the surface points and velocities.
    """
    inst = window.instance
    s = cfg.scatterer(inst)
    d = cfg.dimension
    axis = np.asarray(window.axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    cmin = np.cos(window.max_angle)
    Qs, Vs = [], []
    have = 0
    while have < n:
        m = 2 * (n - have) + 16
        U = _cap_directions(rng, m, axis, window.half_angle)
        Q = s.surface_points(U)
        _, G = s.evaluate(Q, order=1)
        gn = np.linalg.norm(G, axis=1)
        N = G / gn[:, None]
        # surface element per unit solid angle
        r = np.linalg.norm(Q - s.center, axis=1)
        jac = r ** d / np.einsum("ni,ni->n", Q - s.center, N)
        V = rng.standard_normal((m, d))
        V /= np.linalg.norm(V, axis=1, keepdims=True)
        c = np.einsum("ni,ni->n", V, N)
        V = np.where(c[:, None] < 0, V - 2 * c[:, None] * N, V)
        c = np.abs(c)
        acc = (rng.random(m) < c * jac / _jac_cap(s, d)) & (c >= cmin)
        Qs.append(Q[acc] + inst.offset)
        Vs.append(V[acc])
        have += int(acc.sum())
    Q = np.vstack(Qs)[:n]
    V = np.vstack(Vs)[:n]
    P = Q - np.einsum("ni,ni->n", Q, V)[:, None] * V
    return np.hstack([P, V]), Q, V


def _jac_cap(s, d):
    """Upper bound of ``r^(d-1) / cos(radial, normal)`` over the scatterer."""
    rmax = s.bounding_radius
    lam = np.sqrt(s.diag.min() / s.diag.max())
    return rmax ** (d - 1) / lam + 1e-12


def _line_coords(states):
    return np.array([phase_to_line(x).coords() for x in states])


@dataclass
class SingularityCloud:
    """Line-space samples of a singularity manifold inside one window."""

    points: np.ndarray
    k: int
    n_sources: int
    dropped: int
    tree: object = None
    manifold_dim: int = 1

    def __post_init__(self):
        if len(self.points):
            self.tree = cKDTree(self.points)

    @property
    def spacing(self):
        if len(self.points) < 2:
            return np.inf
        d, _ = self.tree.query(self.points, 2)
        return float(np.median(d[:, 1]))

    def components(self, gap=None):
        """Single-linkage component labels: points closer than ``gap`` share one.

        The default gap is three times the largest nearest-neighbor distance,
        so no sampling hole splits a sheet; sheets closer than that merge.
        """
        if self.tree is None:
            return np.empty(0, dtype=int)
        if gap is None:
            gap = 3.0 * float(self.tree.query(self.points, 2)[0][:, 1].max()) if len(self.points) > 1 else 0.0
        pairs = self.tree.query_pairs(gap, output_type="ndarray")
        n = len(self.points)
        graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        return connected_components(graph, directed=False)[1]

    def distances(self, X, neighbors=None, cutoff=np.inf):
        """Nearest-neighbor distance refined by a local PCA plane fit.

        Points farther than ``cutoff`` from the cloud read ``inf``.
        """
        X = np.atleast_2d(X)
        out = np.full(len(X), np.inf)
        if self.tree is None:
            return out
        kn = neighbors or max(4 * self.manifold_dim, 6)
        kn = min(kn, len(self.points))
        d0 = self.tree.query(X, distance_upper_bound=cutoff)[0]
        near = np.flatnonzero(np.isfinite(d0))
        if not len(near):
            return out
        dist, idx = self.tree.query(X[near], kn)
        dist, idx = dist.reshape(len(near), kn), idx.reshape(len(near), kn)
        res = dist[:, 0].copy()
        if kn > self.manifold_dim:
            res = np.minimum(res, self._plane_distance(X[near], idx))
        out[near] = res
        return out

    def _plane_distance(self, X, idx):
        out = np.full(len(X), np.inf)
        P = self.points[idx]
        mu = P.mean(axis=1)
        C = P - mu[:, None, :]
        _, sv, Vt = np.linalg.svd(C, full_matrices=False)
        B = Vt[:, : self.manifold_dim, :]
        D = X - mu
        proj = np.einsum("nkj,nj->nk", B, D)
        resid = np.linalg.norm(D - np.einsum("nk,nkj->nj", proj, B), axis=1)
        # trust the plane only within the patch it was fitted on
        extent = np.sqrt(np.max(np.einsum("nkj,nkj->nk", C, C), axis=1))
        inside = np.linalg.norm(proj, axis=1) <= extent
        out[inside] = resid[inside]
        return out


def singularity_cloud(cfg, k, window, count, seed):
    """Line-space cloud of ``T^{-k} S`` on the window's scatterer.

    Tangent lines to every base scatterer are pushed back ``k`` steps;
    results landing on a translate of the window's scatterer are moved to
    the window instance by lattice symmetry.
    """
    d = cfg.dimension
    pts = []
    n_src, dropped = 0, 0
    targets = [window.base_id] if k == 0 else [s.id for s in cfg.scatterers]
    for j, bid in enumerate(targets):
        inst = ScattererInstance(bid, (0,) * d)
        sols = sample_tangency_set(cfg, inst, count, [seed, j])
        res = pullback_singularity(cfg, sols, k)
        n_src += len(sols)
        dropped += len(res.dropped)
        for x in res.points:
            if x.instance.base_id != window.base_id:
                continue
            move = np.asarray(window.shift) - np.asarray(x.instance.shift)
            pts.append(PhasePoint(window.instance, x.q + move, x.v))
    coords = _line_coords(pts) if pts else np.empty((0, 2 * d))
    return SingularityCloud(coords, k, n_src, dropped, manifold_dim=2 * d - 3)


def singularity_tube_measure(cfg, k, window, delta_list, n_samples, seed,
                             cloud=None, cloud_size=20000, target=(0.85, 1.15)):
    """mu_1 fraction of the window within ``delta`` of ``T^{-k} S``.

    Distances are Euclidean in line-space coordinates ``(p, v)``.
    """
    deltas = np.sort(np.asarray(delta_list, dtype=float))
    if deltas.size < 5:
        raise PreconditionError("need at least 5 deltas")
    if cloud is None:
        cloud = singularity_cloud(cfg, k, window, cloud_size, seed)
    if len(cloud.points) and cloud.spacing > deltas[0] / 2:
        raise ResolutionError(
            f"cloud spacing {cloud.spacing:.3g} exceeds delta_min/2 = {deltas[0] / 2:.3g}; "
            "increase cloud_size"
        )

    def sampler(rng, n):
        return sample_mu1(cfg, window, rng, n)[0]

    cutoff = 2.0 * float(deltas[-1])
    counts = tube_counts(lambda X: cloud.distances(X, cutoff=cutoff), sampler, deltas,
                         n_samples, seed)
    est = [_estimate(dl, c, n_samples, seed) for dl, c in zip(deltas, counts)]
    return _fit_estimates(est, target, k=k, n_samples=n_samples, seed=seed,
                          cloud_points=len(cloud.points), cloud_spacing=cloud.spacing,
                          cloud_components=int(len(np.unique(cloud.components())))
                          if len(cloud.points) else 0)
