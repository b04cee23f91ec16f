import json

import numpy as np
import pytest

from disperse import scenes
from disperse.billiard import OrientedLine, billiard_map_n
from disperse.errors import ConvexityError, DisperseError
from disperse.geometry import BilliardConfig, Scatterer, ScattererInstance
from disperse.genericity import (
    REFLECTION,
    TANGENCY,
    TangencyConstraintProblem,
    _free_anchor,
    bump_perturb,
    census_trial,
    count_near_tangencies,
    multi_tangency_solve,
    resimulate,
    tangency_census,
    tangency_residuals,
)
from disperse.singularity import line_tangency_value, pullback_singularity, sample_tangency_set

I2 = ScattererInstance(0, (0, 0))


def single_tangency_problem(cfg, seed):
    sol = sample_tangency_set(cfg, I2, 1, seed)[0]
    anchor = _free_anchor(cfg, sol.q_star, sol.line.v)
    return TangencyConstraintProblem(cfg, [(I2, TANGENCY)], sol.line, anchor)


@pytest.fixture
def row_scene():
    """Disks B at (0, 0.5) and A at (0.5, 0.5), radius 0.2: y = 0.7 grazes B, A and B + e1."""
    return BilliardConfig(2, [
        Scatterer(0, "sphere", [0.0, 0.5], radius=0.2),
        Scatterer(1, "sphere", [0.5, 0.5], radius=0.2),
    ], horizon_bound=2.0, tau0=0.05)


def row_problem(cfg, n_tangencies=3):
    B, A, B1 = ScattererInstance(0, (0, 0)), ScattererInstance(1, (0, 0)), ScattererInstance(0, (1, 0))
    ctype = [(B, TANGENCY), (A, TANGENCY), (B1, TANGENCY)][:n_tangencies]
    return TangencyConstraintProblem(cfg, ctype, OrientedLine([0.0, 0.7], [1.0, 0.0]),
                                     np.array([-0.3, 0.7]))


def test_residual_zero_on_tangency_set(two_disk):
    for seed in range(5):
        pb = single_tangency_problem(two_disk, seed)
        assert np.max(np.abs(tangency_residuals(pb, np.zeros(2)))) < 1e-10
        assert np.max(np.abs(tangency_residuals(pb, np.zeros(2), "cos"))) < 1e-10


def test_residual_empty_without_tangencies(two_disk):
    pb = single_tangency_problem(two_disk, 0).with_type([])
    assert tangency_residuals(pb, np.zeros(2)).shape == (0,)
    assert multi_tangency_solve(pb).converged


def test_residual_is_linear_in_the_normal_offset(two_disk):
    pb = single_tangency_problem(two_disk, 1)
    for eps in (1e-4, 1e-5):
        r1 = tangency_residuals(pb, np.array([eps, 0.0]))[0]
        r2 = tangency_residuals(pb, np.array([eps / 2, 0.0]))[0]
        assert r1 / r2 == pytest.approx(2.0, rel=1e-3)


def test_cos_residual_sign(two_disk):
    pb = single_tangency_problem(two_disk, 2)
    plus = tangency_residuals(pb, np.array([1e-4, 0.0]), "cos")[0]
    minus = tangency_residuals(pb, np.array([-1e-4, 0.0]), "cos")[0]
    # one side crosses the disk (cos > 0), the other misses it (continued, cos < 0)
    assert plus * minus < 0
    assert abs(plus) == pytest.approx(abs(minus), rel=0.05)


def test_j1_success_rate(two_disk):
    rng = np.random.default_rng(0)
    ok = 0
    for seed in range(20):
        pb = single_tangency_problem(two_disk, seed)
        try:
            ok += multi_tangency_solve(pb, rng.normal(0, 0.01, 2)).converged
        except DisperseError:
            pass
    assert ok >= 10


def test_converged_solution_resimulates(row_scene):
    pb = row_problem(row_scene, 2)
    sol = multi_tangency_solve(pb, np.array([1e-3, -2e-3]))
    assert sol.converged
    res = resimulate(pb, sol.coords)
    assert res.ok
    assert max(abs(c) for c in res.cos_phi) < 1e-8


def test_census_d2(two_disk):
    rows = tangency_census(two_disk, 3, 20, seed=0)
    assert [r.j for r in rows] == [1, 2, 3]
    assert rows[1].converged >= 1
    assert rows[2].converged == 0
    for r in rows:
        assert 0 <= r.converged <= r.trials
        assert r.best_residual >= 0


def test_census_empty_and_deterministic(two_disk):
    assert tangency_census(two_disk, 3, 0, seed=0) == []
    a = tangency_census(two_disk, 2, 4, seed=7)
    b = tangency_census(two_disk, 2, 4, seed=7)
    assert [r.as_tuple() for r in a] == [r.as_tuple() for r in b]


def test_census_chain_outputs_resimulate(two_disk):
    for trial in range(5):
        for j, (sol, pb) in census_trial(two_disk, 2, 0, trial).items():
            if sol.converged:
                assert resimulate(pb, sol.coords).ok


def test_count_near_tangencies(two_disk):
    rec = billiard_map_n(two_disk, scenes.period_two_state(two_disk), 6)
    assert count_near_tangencies(rec, 0.999) == 0
    sols = sample_tangency_set(two_disk, ScattererInstance(1, (0, 0)), 5, seed=0)
    x = pullback_singularity(two_disk, sols, 1).points[0]
    rec = billiard_map_n(two_disk, x, 4)
    assert count_near_tangencies(rec, 1e-7) == 1
    assert count_near_tangencies(rec, 1.0) == len(rec.events)
    counts = [count_near_tangencies(rec, t) for t in (1e-9, 1e-7, 0.1, 0.5, 1.0)]
    assert counts == sorted(counts)


def test_bump_zero_amplitude_is_identity():
    s = Scatterer(0, "sphere", [0.5, 0.5], radius=0.2)
    b = bump_perturb(s, [0.5, 0.7], 0.05, 0.0)
    X = np.random.default_rng(0).uniform(0, 1, (200, 2))
    np.testing.assert_array_equal(b.value(X), s.value(X))


def test_bump_support_is_exact():
    s = Scatterer(0, "sphere", [0.5, 0.5], radius=0.2)
    b = bump_perturb(s, [0.5, 0.7], 0.05, 1e-4)
    X = np.random.default_rng(1).uniform(0, 1, (2000, 2))
    far = np.linalg.norm(X - [0.5, 0.7], axis=1) > 0.05
    for k in range(3):
        np.testing.assert_array_equal(b.evaluate(X[far], order=2)[k], s.evaluate(X[far], order=2)[k])
    assert np.any(b.value(X[~far]) != s.value(X[~far]))


def test_bump_makes_grazing_line_cross(sphere2):
    line = OrientedLine([0.0, 0.7], [1.0, 0.0])
    assert abs(line_tangency_value(sphere2, I2, line)[0]) < 1e-15
    s = bump_perturb(sphere2.scatterers[0], [0.5, 0.7], 0.05, 1e-4)
    fbar, _ = line_tangency_value(sphere2.with_scatterer(s), I2, line)
    assert fbar < 0


def test_bump_too_large():
    s = Scatterer(0, "sphere", [0.5, 0.5], radius=0.2)
    with pytest.raises(ConvexityError, match="amplitude too large"):
        bump_perturb(s, [0.5, 0.7], 0.05, 5e-3)


def test_type2_bump_destroys_excess_tangency(row_scene):
    # y = 0.7 grazes three disks in a row: j = 3 = 2d - 1, possible only in this symmetric scene
    pb = row_problem(row_scene)
    sol = multi_tangency_solve(pb, np.array([1e-3, -2e-3]))
    assert sol.converged and resimulate(pb, sol.coords).ok
    A = row_scene.scatterers[1]
    bumped = row_scene.with_scatterer(bump_perturb(A, [0.5, 0.7], 0.05, 1e-4))
    pb2 = TangencyConstraintProblem(bumped, pb.ctype, pb.base, pb.anchor)
    r = tangency_residuals(pb2, sol.coords)
    # the bumped tangency is gone while the other two survive untouched
    assert abs(r[1]) > 1e-6
    assert abs(r[0]) < 1e-12 and abs(r[2]) < 1e-12
    again = multi_tangency_solve(pb2, sol.coords)
    assert not again.converged
    assert again.residual_norm > 1e-6


def test_type2_bump_moves_a_codimension_two_tangency(row_scene):
    # with j = 2d - 2 the common tangent persists: the bump only moves it
    pb = row_problem(row_scene, 2)
    sol = multi_tangency_solve(pb, np.zeros(2))
    A = row_scene.scatterers[1]
    bumped = row_scene.with_scatterer(bump_perturb(A, [0.5, 0.7], 0.05, 1e-4))
    pb2 = TangencyConstraintProblem(bumped, pb.ctype, pb.base, pb.anchor)
    again = multi_tangency_solve(pb2, sol.coords)
    assert again.converged
    assert np.linalg.norm(again.coords - sol.coords) > 1e-5


def test_reflection_kind_validation(row_scene):
    with pytest.raises(ValueError):
        TangencyConstraintProblem(row_scene, [(I2, "graze")], OrientedLine([0, 0.7], [1, 0]),
                                  np.zeros(2))
    pb = row_problem(row_scene).with_type([(I2, REFLECTION)])
    assert pb.j == 0


def test_census_writes_falsification_file(row_scene, tmp_path, monkeypatch):
    # force a converged j = 3 = 2d - 1 chain to exercise the falsification channel
    pb = row_problem(row_scene)
    sol = multi_tangency_solve(pb, np.array([1e-3, -2e-3]))
    assert sol.converged
    monkeypatch.setattr("disperse.genericity.census_trial",
                        lambda cfg, j_max, seed, trial, max_len=6: {3: (sol, pb)} if trial == 1 else {})
    rows = tangency_census(row_scene, 3, 2, seed=5, falsification_dir=tmp_path)
    assert rows[2].converged == 1
    files = sorted(tmp_path.glob("*.json"))
    assert [f.name for f in files] == ["falsification_seed5_trial1_j3.json"]
    doc = json.loads(files[0].read_text())
    assert doc["seed"] == 5 and doc["j"] == 3 and doc["residual_norm"] < 1e-9
    assert len(doc["type"]) == 3


def test_census_no_falsification_below_bound(row_scene, tmp_path, monkeypatch):
    pb = row_problem(row_scene, 2)
    sol = multi_tangency_solve(pb, np.zeros(2))
    monkeypatch.setattr("disperse.genericity.census_trial",
                        lambda cfg, j_max, seed, trial, max_len=6: {2: (sol, pb)})
    tangency_census(row_scene, 2, 3, seed=0, falsification_dir=tmp_path)
    assert list(tmp_path.iterdir()) == []
