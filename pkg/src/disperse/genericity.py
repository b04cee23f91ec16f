"""Searching for trajectories with several tangencies.

A combinatorial type lists the scatterer instances a trajectory meets, in
order, each marked as a reflection or a tangency. Tangency-marked
instances are passed straight through.

Two residuals are tracked per tangency. The solver works with
``Fbar / |grad R|`` at the minimizer along the segment: smooth, positive
for a near miss, negative for a shallow crossing and linear in the offset
of the line. Reports use ``cos phi`` at the event, which behaves like the
square root of the first: the entry angle of a crossing line, the same
expression with a minus sign for a near miss (its phantom continuation),
and zero once ``|Fbar|`` drops below the hit solver's tangency threshold.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .billiard import OrientedLine, first_hit, reflect_velocity, tangent_frame
from .errors import (
    ConvexityError,
    DisperseError,
    InfeasibleTypeError,
    MultipleCollisionError,
    NoMinimumError,
    PreconditionError,
)
from .geometry import Bump, ScattererInstance, enumerate_instances, min_hessian_eigenvalue
from .singularity import _line_min, sample_tangency_set

REFLECTION = "reflection"
TANGENCY = "tangency"
CONVERGED = 1e-9


@dataclass(frozen=True, eq=False)
class TangencyConstraintProblem:
    """Unknowns are ``2d - 2`` chart coordinates of the initial line.

    ``a`` (``d - 1`` values) shifts the foot point inside the plane normal
    to ``v0`` and ``w`` tilts the direction to ``normalize(v0 + W w)``.
    The trajectory starts at the point of the line closest to ``anchor``,
    which must lie in free space.
    """

    cfg: object
    ctype: tuple
    base: OrientedLine
    anchor: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ctype", tuple((inst, kind) for inst, kind in self.ctype))
        for _, kind in self.ctype:
            if kind not in (REFLECTION, TANGENCY):
                raise ValueError(f"unknown event kind {kind!r}")
        object.__setattr__(self, "_frame", tangent_frame(self.base.v))

    @property
    def dim(self):
        return self.base.v.size

    @property
    def n_unknowns(self):
        return 2 * self.dim - 2

    @property
    def j(self):
        return sum(kind == TANGENCY for _, kind in self.ctype)

    def line(self, coords):
        coords = np.asarray(coords, dtype=float)
        d = self.dim
        E = self._frame
        v = self.base.v + E @ coords[d - 1:]
        v = v / np.linalg.norm(v)
        p = self.base.p + E @ coords[: d - 1]
        return OrientedLine(p - (p @ v) * v, v)

    def start(self, coords):
        l = self.line(coords)
        return l.point(float((self.anchor - l.p) @ l.v)), l.v

    def with_type(self, ctype):
        return TangencyConstraintProblem(self.cfg, ctype, self.base, self.anchor)


def _scaled_fbar(cfg, inst, q, v):
    fbar, t, qs, grad, _ = _line_min(cfg, inst, q, v)
    norm = np.linalg.norm(grad)
    if norm < cfg.tolerances.gradient_floor:
        # the line runs through the critical point of R, far from any tangency
        raise NoMinimumError(f"line passes the critical point of {inst}")
    return fbar / norm, t, qs


def _cos_equivalent(cfg, inst, q, v):
    fbar, _, _, grad, fpp = _line_min(cfg, inst, q, v)
    if abs(fbar) <= cfg.tolerances.newton_residual:
        return 0.0
    c = np.sqrt(2.0 * fpp * abs(fbar)) / np.linalg.norm(grad)
    return float(c if fbar < 0 else -c)


def _trace(problem, coords, metric="distance"):
    """Follow the prescribed type; returns residuals and the visited points."""
    cfg = problem.cfg
    q, v = problem.start(coords)
    res, pts = [], [q]
    skip = None
    for step, (inst, kind) in enumerate(problem.ctype):
        try:
            ev = first_hit(cfg, q, v, 0.0, exclude=skip)
        except MultipleCollisionError as exc:
            raise InfeasibleTypeError(str(exc), step=step) from exc
        if kind == REFLECTION:
            if ev is None or ev.instance != inst:
                raise InfeasibleTypeError(f"expected a reflection on {inst}", step=step)
            q = ev.q_hit
            v = ev.v_in if ev.tangency else reflect_velocity(ev.v_in, ev.normal)
        else:
            try:
                r, t, qs = _scaled_fbar(cfg, inst, q, v)
            except NoMinimumError as exc:
                raise InfeasibleTypeError(str(exc), step=step) from exc
            if t <= 0:
                raise InfeasibleTypeError(f"tangency with {inst} lies behind the segment", step=step)
            if ev is not None and ev.instance != inst and ev.t_flight < t:
                raise InfeasibleTypeError(f"{ev.instance} blocks the tangency with {inst}", step=step)
            res.append(r if metric == "distance" else _cos_equivalent(cfg, inst, q, v))
            q = qs
        skip = inst
        pts.append(q)
    return np.array(res), pts


def tangency_residuals(problem, coords, metric="distance"):
    """Residual at every tangency-marked event.

    ``metric="distance"`` gives the smooth ``Fbar / |grad R|``;
    ``metric="cos"`` gives the (continued) ``cos phi`` at the event.
    """
    return _trace(problem, coords, metric)[0]


def _jacobian(problem, coords, h=1e-7):
    n = coords.size
    r0 = tangency_residuals(problem, coords)
    J = np.empty((r0.size, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        J[:, i] = (tangency_residuals(problem, coords + e)
                   - tangency_residuals(problem, coords - e)) / (2 * h)
    return r0, J


@dataclass
class SolveResult:
    coords: np.ndarray
    residual_norm: float
    converged: bool
    iterations: int
    condition: float = np.nan
    residuals: np.ndarray = None
    cos_residual_norm: float = np.nan

    def line(self, problem):
        return problem.line(self.coords)


def multi_tangency_solve(problem, start=None, seed=0, max_iter=40, polish=3):
    """Gauss-Newton (minimum-norm steps) with backtracking on ``|r|^2 / 2``.

    Converged means ``|r| < 1e-9``; a few extra iterations then push the
    residual to rounding level so that a fresh simulation classifies the
    events as grazing.
    """
    if problem.j > problem.n_unknowns + 1:
        raise PreconditionError(f"j = {problem.j} exceeds 2d - 1")
    x = np.zeros(problem.n_unknowns) if start is None else np.asarray(start, dtype=float).copy()
    if problem.j == 0:
        return SolveResult(x, 0.0, True, 0, 1.0, np.zeros(0), 0.0)
    r, J = _jacobian(problem, x)
    norm = float(np.linalg.norm(r))
    best_norm, extra, it, cond = norm, 0, 0, np.nan
    for it in range(1, max_iter + 1):
        step, *_, sv = np.linalg.lstsq(J, -r, rcond=None)
        cond = float(sv[0] / sv[-1]) if sv.size and sv[-1] > 0 else np.inf
        lam, moved = 1.0, False
        while lam > 1e-6:
            trial = x + lam * step
            try:
                rt = tangency_residuals(problem, trial)
            except DisperseError:
                lam *= 0.5
                continue
            if np.linalg.norm(rt) < norm or (norm < CONVERGED and np.linalg.norm(rt) <= norm):
                x, moved = trial, True
                break
            lam *= 0.5
        if not moved:
            break
        r, J = _jacobian(problem, x)
        norm = float(np.linalg.norm(r))
        if norm < CONVERGED:
            extra += 1
            if extra > polish or norm == 0.0:
                break
        elif best_norm - norm < 1e-14 * best_norm and it > 10:
            break
        best_norm = min(best_norm, norm)
    cos_norm = float(np.linalg.norm(tangency_residuals(problem, x, "cos")))
    return SolveResult(x, norm, norm < CONVERGED, it, cond, r, cos_norm)


@dataclass
class Resimulation:
    ok: bool
    instances: list
    cos_phi: list
    message: str = ""


def resimulate(problem, coords, tol=1e-8):
    """Run the billiard map from the solved line and compare with the type.

    Grazing events must be flagged as tangencies by the hit solver and
    carry ``|cos phi| < tol``; every other event must be a reflection on
    the prescribed instance.
    """
    cfg = problem.cfg
    q, v = problem.start(coords)
    skip, insts, cosines = None, [], []
    for step, (inst, kind) in enumerate(problem.ctype):
        try:
            ev = first_hit(cfg, q, v, 0.0, exclude=skip)
        except DisperseError as exc:
            return Resimulation(False, insts, cosines, f"step {step}: {exc}")
        if ev is None:
            return Resimulation(False, insts, cosines, f"step {step}: no hit")
        insts.append(ev.instance)
        cosines.append(ev.cos_phi)
        if ev.instance != inst:
            return Resimulation(False, insts, cosines, f"step {step}: hit {ev.instance}")
        if kind == TANGENCY and not (ev.tangency and abs(ev.cos_phi) < tol):
            return Resimulation(False, insts, cosines, f"step {step}: not grazing")
        if kind == REFLECTION and ev.tangency:
            return Resimulation(False, insts, cosines, f"step {step}: unexpected grazing")
        q = ev.q_hit
        v = ev.v_in if ev.tangency else reflect_velocity(ev.v_in, ev.normal)
        skip = ev.instance
    return Resimulation(True, insts, cosines)


# -- census ---------------------------------------------------------------------------


@dataclass
class CensusRow:
    """Aggregate of one ``j``; ``best_residual`` is the smallest ``cos phi`` norm."""

    j: int
    trials: int
    converged: int
    best_residual: float
    median_iters: float
    best_distance_residual: float = float("inf")

    def as_tuple(self):
        return (self.j, self.trials, self.converged, self.best_residual, self.median_iters)


def _free_anchor(cfg, q, v):
    """A point behind ``q`` on the line that lies in free space."""
    back = first_hit(cfg, q, -v, 1e-9)
    gap = cfg.horizon_bound if back is None else back.t_flight
    return q - min(0.5 * gap, 0.5 * cfg.tau0) * v


def _events_along(problem, coords, max_len):
    """Instances met by the current solution, with a distance-like margin.

    Returns the prescribed events followed by up to ``max_len`` in total of
    free continuation, each as ``(inst, kind, margin)`` where ``margin`` is
    the scaled ``Fbar`` (negative for crossings). Near misses inside each
    segment are reported as extra tangency candidates.
    """
    cfg = problem.cfg
    q, v = problem.start(coords)
    out, near = [], []
    skip = None
    k = 0
    while len(out) < max_len:
        ev = first_hit(cfg, q, v, 0.0, exclude=skip)
        seg = cfg.horizon_bound if ev is None else ev.t_flight
        mid = q + 0.5 * seg * v
        for inst in enumerate_instances(cfg, mid, 0.5 * seg + 1e-9):
            if inst == skip or (ev is not None and inst == ev.instance):
                continue
            try:
                r, t, _ = _scaled_fbar(cfg, inst, q, v)
            except NoMinimumError:
                continue
            if 0 < t < seg and r > 0:
                near.append((r, len(out), inst))
        if k < len(problem.ctype) and problem.ctype[k][1] == TANGENCY:
            inst = problem.ctype[k][0]
            r, t, qs = _scaled_fbar(cfg, inst, q, v)
            out.append((inst, TANGENCY, r))
            q, skip = qs, inst
        else:
            if ev is None:
                break
            r, _, _ = _scaled_fbar(cfg, ev.instance, q, v)
            out.append((ev.instance, REFLECTION, r))
            q = ev.q_hit
            v = ev.v_in if ev.tangency else reflect_velocity(ev.v_in, ev.normal)
            skip = ev.instance
        k += 1
    return out, near


def _next_type(problem, coords, max_len):
    """Add the event closest to grazing as one more tangency."""
    events, near = _events_along(problem, coords, max_len)
    j = problem.j
    best = None
    for pos, (inst, kind, r) in enumerate(events):
        if kind == REFLECTION and pos >= 0:
            if best is None or abs(r) < best[0]:
                best = (abs(r), pos, inst, False)
    for r, pos, inst in near:
        if pos < max_len - 1 and (best is None or r < best[0]):
            best = (r, pos, inst, True)
    if best is None:
        return None
    _, pos, inst, insert = best
    ctype = [(i, k) for i, k, _ in events]
    if insert:
        ctype.insert(pos, (inst, TANGENCY))
    else:
        ctype[pos] = (inst, TANGENCY)
    last = max(i for i, (_, k) in enumerate(ctype) if k == TANGENCY)
    ctype = ctype[: last + 1]
    if sum(k == TANGENCY for _, k in ctype) != j + 1 or len(ctype) > max_len:
        return None
    return problem.with_type(ctype)


def _initial_problem(cfg, rng):
    s = cfg.scatterers[int(rng.integers(len(cfg.scatterers)))]
    inst = ScattererInstance(s.id, (0,) * cfg.dimension)
    sol = sample_tangency_set(cfg, inst, 1, int(rng.integers(2**31)))[0]
    v = sol.line.v
    anchor = _free_anchor(cfg, sol.q_star, v)
    return TangencyConstraintProblem(cfg, [(inst, TANGENCY)], sol.line, anchor)


def census_trial(cfg, j_max, seed, trial, max_len=6):
    """One incremental chain ``j = 1, 2, ...``; returns per-``j`` results."""
    rng = np.random.default_rng([seed, trial])
    results = {}
    try:
        problem = _initial_problem(cfg, rng)
    except DisperseError:
        return results
    coords = np.zeros(problem.n_unknowns)
    for j in range(1, j_max + 1):
        if j > 1:
            try:
                nxt = _next_type(problem, coords, max_len)
            except DisperseError:
                nxt = None
            if nxt is None:
                break
            problem = nxt
        try:
            sol = multi_tangency_solve(problem, coords)
        except DisperseError:
            break
        results[j] = (sol, problem)
        coords = sol.coords
    return results


def tangency_census(cfg, j_max, trials, seed, max_len=6, falsification_dir=None):
    """Rows ``j = 1..j_max`` aggregated over ``trials`` incremental chains.

    A chain that cannot form a type for some ``j`` counts as a failed
    attempt with infinite residual. Any converged ``j >= 2d - 1`` solution is
    written to ``falsification_dir`` together with the scene and seed.
    """
    if trials <= 0:
        return []
    from ._parallel import map_chunks

    chains = map_chunks(lambda t: census_trial(cfg, j_max, seed, t, max_len),
                        [(t,) for t in range(trials)])
    bound = 2 * cfg.dimension - 2
    rows = []
    for j in range(1, j_max + 1):
        res = [c[j][0] for c in chains if j in c]
        conv = [r for r in res if r.converged]
        rows.append(CensusRow(
            j=j,
            trials=trials,
            converged=len(conv),
            best_residual=min((r.cos_residual_norm for r in res), default=float("inf")),
            median_iters=float(np.median([r.iterations for r in res])) if res else float("nan"),
            best_distance_residual=min((r.residual_norm for r in res), default=float("inf")),
        ))
        if j > bound and conv and falsification_dir is not None:
            for t, c in enumerate(chains):
                if j in c and c[j][0].converged:
                    write_falsification(falsification_dir, cfg, seed, t, c[j][1], c[j][0])
    return rows


def write_falsification(directory, cfg, seed, trial, problem, sol):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    line = problem.line(sol.coords)
    doc = {
        "scene": cfg.to_dict(),
        "seed": seed,
        "trial": trial,
        "j": problem.j,
        "residual_norm": sol.residual_norm,
        "cos_residual_norm": sol.cos_residual_norm,
        "type": [[inst.base_id, list(inst.shift), kind] for inst, kind in problem.ctype],
        "line": {"p": line.p.tolist(), "v": line.v.tolist()},
        "anchor": problem.anchor.tolist(),
    }
    path = directory / f"falsification_seed{seed}_trial{trial}_j{problem.j}.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


def count_near_tangencies(record, tol):
    """Number of events with ``|cos phi| <= tol``."""
    return sum(abs(ev.cos_phi) <= tol for ev in record.events)


def bump_perturb(s, c, rho, a, sign=1, n_check=400, seed=0):
    """``s`` with a compact bump of radius ``rho`` and amplitude ``a`` at ``c``.

    Positive ``sign * a`` pushes the surface outwards. Values farther than
    ``rho`` from ``c`` are unchanged bit for bit. Convexity is re-checked by
    surface sampling, with extra samples on the bump.
    """
    out = s.with_bump(Bump(np.asarray(c, dtype=float), float(rho), float(a), int(sign)))
    try:
        min_hessian_eigenvalue(out, n_check, seed)
    except ConvexityError as exc:
        raise ConvexityError(
            f"amplitude too large: minimum Hessian eigenvalue {exc.min_eigenvalue:.3g}",
            min_eigenvalue=exc.min_eigenvalue,
        ) from exc
    return out
