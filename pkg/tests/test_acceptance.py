"""Acceptance criteria 1-10, each at its stated tolerance and time budget.

Every test records one PASS/FAIL line (printed in the terminal summary)
before asserting, so a failing criterion still reports its numbers.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.spatial import cKDTree

from conftest import record
from disperse import scenes
from disperse.billiard import (
    billiard_map_n,
    inverse_step,
    involution,
    map_jacobian_fd,
    normal_at,
    reflect_velocity,
)
from disperse.errors import DisperseError
from disperse.genericity import tangency_census
from disperse.geometry import ScattererInstance, random_phase_point, validate_configuration
from disperse.measure import (
    PhaseWindow,
    circle_field,
    crossing_field,
    hyperplane_field,
    scaling_fit,
    singularity_cloud,
    singularity_tube_measure,
)
from disperse.singularity import (
    _line_min,
    continued_reflection,
    derivative_blowup_exponent,
    even_odd_decompose,
    quasi_regular_chart,
    resolved_level_check,
    sample_tangency_set,
)


def check(number, title, passed, detail):
    record(number, title, passed, detail)
    assert passed, detail


# -- 1 -------------------------------------------------------------------------------


def test_criterion_01_reflection_algebra():
    cfg = scenes.two_disk()
    rng = np.random.default_rng(1)
    states = [random_phase_point(cfg, rng) for _ in range(10_000)]
    V = rng.standard_normal((10_000, 3))
    N = rng.standard_normal((10_000, 3))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    t0 = time.perf_counter()
    inv_err = max(np.max(np.abs(involution(cfg, involution(cfg, x)).v - x.v)) for x in states)
    refl_err = max(abs(reflect_velocity(v, n) @ n + v @ n) for v, n in zip(V, N))
    dt = time.perf_counter() - t0
    ok = inv_err <= 1e-12 and refl_err <= 1e-12 and dt < 1.0
    check(1, "reflection algebra", ok,
          f"max |iota(iota x) - x| = {inv_err:.1e}, max |(v',n) + (v,n)| = {refl_err:.1e}, "
          f"{dt:.2f} s")


# -- 2 -------------------------------------------------------------------------------


def _round_trip_errors(cfg, n, seed):
    rng = np.random.default_rng(seed)
    errs, rejected = [], 0
    while len(errs) < n:
        x = random_phase_point(cfg, rng, min_cos=1e-3)
        rec = billiard_map_n(cfg, x, 10)
        if rec.termination != "completed" or min(ev.cos_phi for ev in rec.events) < 1e-3:
            rejected += 1
            continue
        y = rec.final
        for _ in range(10):
            y, _ = inverse_step(cfg, y)
        errs.append(y.distance(x) if y.instance == x.instance else np.inf)
    return np.array(errs), rejected


def test_criterion_02_reversibility():
    t0 = time.perf_counter()
    e2, r2 = _round_trip_errors(scenes.two_disk(), 100, 2)
    e3, r3 = _round_trip_errors(scenes.dense_bcc(), 100, 3)
    dt = time.perf_counter() - t0
    ok = e2.max() < 1e-7 and e3.max() < 1e-7 and dt < 30
    check(2, "reversibility", ok,
          f"max error d=2 {e2.max():.1e}, d=3 {e3.max():.1e} over 100 + 100 trajectories "
          f"({r2} + {r3} near-grazing draws replaced), {dt:.1f} s")


# -- 3 -------------------------------------------------------------------------------


def _measure_ratios(cfg, n, seed):
    rng = np.random.default_rng(seed)
    out, skipped = [], 0
    while len(out) < n:
        x = random_phase_point(cfg, rng, min_cos=1e-3)
        try:
            out.append(abs(map_jacobian_fd(cfg, x).measure_ratio - 1.0))
        except DisperseError:
            skipped += 1
    return np.array(out), skipped


def test_criterion_03_measure_preservation():
    t0 = time.perf_counter()
    m2, s2 = _measure_ratios(scenes.two_disk(), 1000, 4)
    m3, s3 = _measure_ratios(scenes.dense_bcc(), 1000, 5)
    dt = time.perf_counter() - t0
    ok = np.median(m2) < 1e-3 and np.median(m3) < 1e-3 and dt < 120
    check(3, "measure preservation", ok,
          f"median |det J cos ratio - 1| d=2 {np.median(m2):.1e}, d=3 {np.median(m3):.1e} "
          f"on 1000 + 1000 points ({s2} + {s3} stencils crossed a singularity), {dt:.1f} s")


# -- 4 -------------------------------------------------------------------------------


def _discriminant_residual(cfg, sols):
    worst = 0.0
    for s in sols:
        fbar, t, q, grad, _ = _line_min(cfg, s.instance, s.line.p, s.line.v)
        worst = max(worst, abs(fbar), abs(grad @ s.line.v))
    return worst


def test_criterion_04_tangency_manifold():
    t0 = time.perf_counter()
    cfg2, cfg3 = scenes.two_disk(), scenes.three_sphere()
    inst2, inst3 = ScattererInstance(0, (0, 0)), ScattererInstance(0, (0, 0, 0))
    sols2 = sample_tangency_set(cfg2, inst2, 1000, seed=0)
    sols3 = sample_tangency_set(cfg3, inst3, 1000, seed=0)
    res = max(_discriminant_residual(cfg2, sols2), _discriminant_residual(cfg3, sols3))
    # local PCA in line space (p, v) on 50-neighbor patches of a dense local sample
    local = sample_tangency_set(cfg3, inst3, 1000, seed=1, near=sols3[0])
    X = np.array([s.line.coords() for s in local])
    tree = cKDTree(X)
    dims, gaps = [], []
    for i in np.random.default_rng(2).choice(len(X), 20, replace=False):
        _, idx = tree.query(X[i], 50)
        ev = np.sort(np.linalg.eigvalsh(np.cov(X[idx].T)))[::-1]
        ratios = ev[:-1] / np.maximum(ev[1:], 1e-300)
        k = int(np.argmax(ratios[:5])) + 1
        dims.append(k)
        gaps.append(ratios[k - 1])
    dt = time.perf_counter() - t0
    ok = res < 1e-10 and set(dims) == {3} and min(gaps) >= 100 and dt < 120
    check(4, "tangency manifold", ok,
          f"max discriminant residual {res:.1e} on 1000 + 1000 lines; PCA dimension {sorted(set(dims))} "
          f"(2d-3 = 3), smallest variance gap {min(gaps):.0f}x, {dt:.1f} s")


# -- 5 -------------------------------------------------------------------------------


def test_criterion_05_blowup_law():
    t0 = time.perf_counter()
    taus = np.logspace(-7, -3, 9)
    lines = []
    ok = True
    for cfg, inst in ((scenes.two_disk(), ScattererInstance(0, (0, 0))),
                      (scenes.three_sphere(), ScattererInstance(0, (0, 0, 0)))):
        chart = quasi_regular_chart(cfg, sample_tangency_set(cfg, inst, 1, seed=0)[0])
        tau = derivative_blowup_exponent(cfg, chart, taus, kind="tau")
        ups = derivative_blowup_exponent(cfg, chart, taus, kind="upsilon")
        ok &= -0.55 <= tau.slope <= -0.45 and tau.r2 > 0.99 and -0.05 <= ups.slope <= 0.05
        lines.append(f"d={cfg.dimension}: tau slope {tau.slope:.4f} (r2 {tau.r2:.5f}), "
                     f"upsilon slope {ups.slope:.4f}")
    dt = time.perf_counter() - t0
    ok &= dt < 120
    check(5, "blow-up law", ok, "; ".join(lines) + f", {dt:.1f} s")


# -- 6 -------------------------------------------------------------------------------


def _grazing_pullback_field():
    """A line-space coordinate of the continued reflection near a grazing line."""
    cfg = scenes.two_disk()
    sol = sample_tangency_set(cfg, ScattererInstance(0, (0, 0)), 1, seed=11)[0]
    chart = quasi_regular_chart(cfg, sol)
    base = continued_reflection(chart, np.zeros(2))
    normal = np.array([-base.v[1], base.v[0]])
    w0 = 0.004
    level = continued_reflection(chart, np.array([0.03, w0])).p @ normal
    return lambda u: continued_reflection(chart, np.array([u, w0])).p @ normal - level


def test_criterion_06_resolution_identities():
    t0 = time.perf_counter()
    grid = np.linspace(0.0, 0.5, 101)
    recon = 0.0
    for coefs in ([1.0, 0.0], [1.0, 0.0, 0.0], [2.5, -1.2, 0.3], [0.7, -0.2, 1.1, -3.0, 0.4]):
        recon = max(recon, even_odd_decompose(lambda u, c=coefs: np.polyval(c, u), grid).residual)
    probes = np.linspace(0.0, 0.2, 1000)
    toy = 0.0
    for F in (lambda u: u - 0.3, lambda u: u * u - 0.1):
        toy = max(toy, resolved_level_check(F, even_odd_decompose(F, grid), probes))
    F = _grazing_pullback_field()
    table = even_odd_decompose(F, np.linspace(0.0, 0.09, 161))
    recon = max(recon, table.residual)
    pull = resolved_level_check(F, table, np.linspace(0.0, 0.085**2, 1000))
    zero = abs(float(table.resolved(0.03**2)))
    dt = time.perf_counter() - t0
    ok = recon < 1e-12 and toy < 1e-8 and pull < 1e-8 and zero < 1e-8 and dt < 60
    check(6, "resolution identities", ok,
          f"reconstruction {recon:.1e}; resolved level vs F(+)F(-) {toy:.1e} (polynomials), "
          f"{pull:.1e} (grazing pullback field, 1000 probes); resolved level at the known zero "
          f"{zero:.1e}, {dt:.1f} s")


# -- 7 -------------------------------------------------------------------------------


@pytest.mark.parametrize("make", [hyperplane_field, circle_field, crossing_field],
                         ids=["hyperplane", "circle", "crossing"])
def test_criterion_07_tube_volume_scaling(make):
    spec = make()
    t0 = time.perf_counter()
    rep = scaling_fit(spec, np.logspace(-3, -1, 7), 1_000_000, seed=0)
    dt = time.perf_counter() - t0
    ratio = rep.meta["fraction_over_delta_ratio"]
    ok = 0.9 <= rep.slope <= 1.1 and ratio < 3 and dt < 120
    check(7, f"tube-volume scaling ({spec.name})", ok,
          f"slope {rep.slope:.4f} (r2 {rep.r2:.5f}), fraction/delta max/min {ratio:.3f}, "
          f"n = 1e6, {dt:.1f} s")


# -- 8 -------------------------------------------------------------------------------


def test_criterion_08_singularity_tube_measure():
    cfg = scenes.two_disk()
    t0 = time.perf_counter()
    flags = validate_configuration(cfg, 50, 0).flags
    deltas = np.logspace(-3, -1.5, 6)
    w0 = PhaseWindow(1, (0, 0), (1.0, 0.0), 0.6)
    k0 = singularity_tube_measure(cfg, 0, w0, deltas, 200_000, seed=0, cloud_size=20_000)
    # the k = 1 window stays away from S itself: reflection angles below 1.2
    w1 = PhaseWindow(1, (0, 0), (1.0, 0.0), 0.6, max_angle=1.2)
    k1 = singularity_tube_measure(cfg, 1, w1, deltas, 200_000, seed=0, cloud_size=20_000)
    k1_double = singularity_tube_measure(cfg, 1, w1, deltas, 200_000, seed=0, cloud_size=40_000)
    dt = time.perf_counter() - t0
    ok = (flags == [] and 0.85 <= k0.slope <= 1.15 and 0.85 <= k1.slope <= 1.15
          and abs(k1.slope - k1_double.slope) < 0.05 and dt < 300)
    check(8, "singularity tube measure", ok,
          f"k=0 slope {k0.slope:.4f}, k=1 slope {k1.slope:.4f} (doubled cloud "
          f"{k1_double.slope:.4f}), scene flags {flags}, {dt:.1f} s")


# -- 9 -------------------------------------------------------------------------------


def test_criterion_09_tangency_census(tmp_path):
    cfg = scenes.three_sphere()
    t0 = time.perf_counter()
    rows = tangency_census(cfg, 5, 200, seed=0, falsification_dir=tmp_path / "falsification")
    dt = time.perf_counter() - t0
    j4, j5 = rows[3], rows[4]
    found = sorted((tmp_path / "falsification").glob("*.json")) if j5.converged else []
    if found:
        # keep the offending scene and seed where the build can pick them up
        keep = os.environ.get("DISPERSE_FALSIFICATION_DIR", "falsification")
        os.makedirs(keep, exist_ok=True)
        for f in found:
            with open(os.path.join(keep, f.name), "w") as fh:
                fh.write(f.read_text())
    ok = j4.converged >= 1 and j5.converged == 0 and j5.best_residual > 1e-4 and dt < 600
    check(9, "tangency census", ok,
          f"j=4 converged {j4.converged}/200 (best {j4.best_distance_residual:.1e}); "
          f"j=5 converged {j5.converged}/200, best cos residual {j5.best_residual:.2e} "
          f"(distance residual {j5.best_distance_residual:.2e}), "
          f"{len(found)} falsification files, {dt:.1f} s")


# -- 10 ------------------------------------------------------------------------------

COMMANDS = [
    ["simulate", "--scene", "two_disk", "--steps", "20", "--trajectories", "6"],
    ["validate", "--scene", "three_sphere", "--samples", "20"],
    ["blowup", "--scene", "two_disk"],
    ["tube", "--field", "circle", "--n", "200000"],
    ["tube", "--scene", "two_disk", "--k", "0", "--n", "100000", "--cloud-size", "20000",
     "--deltas", "1e-3,2e-3,4e-3,8e-3,1.6e-2,3.2e-2"],
    ["census", "--scene", "two_disk", "--trials", "8"],
]


def _run(cmd, out, threads):
    env = dict(os.environ, DISPERSE_THREADS=str(threads))
    proc = subprocess.run([sys.executable, "-m", "disperse", *cmd, "--seed", "7", "--out", str(out)],
                          env=env, capture_output=True, text=True)
    files = {}
    for path in sorted(out.rglob("*")):
        if path.is_file():
            data = path.read_bytes()
            if path.name == "manifest.json":
                man = json.loads(data)
                man.pop("duration_s")
                data = json.dumps(man, sort_keys=True).encode()
            files[str(path.relative_to(out))] = data
    return proc.returncode, files


def test_criterion_10_determinism(tmp_path):
    t0 = time.perf_counter()
    bad = []
    for i, cmd in enumerate(COMMANDS):
        code1, one = _run(cmd, tmp_path / f"{i}_one", 1)
        code4, four = _run(cmd, tmp_path / f"{i}_four", 4)
        code1b, again = _run(cmd, tmp_path / f"{i}_again", 1)
        if not (code1 == code4 == code1b and one == four == again and one):
            bad.append(cmd[0])
    dt = time.perf_counter() - t0
    check(10, "determinism", not bad,
          f"{len(COMMANDS)} commands x (1, 4, 1) workers, byte-identical outputs except manifest "
          f"duration; mismatches: {bad or 'none'}, {dt:.1f} s")
