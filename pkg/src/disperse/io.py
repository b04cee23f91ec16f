"""CSV and JSON writers for trajectories, censuses, tangency samples and reports.

Floats are written with ``repr`` (shortest round-trip decimal) so files
are byte-identical across runs that compute identical numbers.
"""

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .billiard import PhasePoint
from .geometry import ScattererInstance


def _f(x):
    return repr(float(x))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else repr(x)
    return obj


def dumps(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(obj, path):
    Path(path).write_text(dumps(obj))
    return Path(path)


def sha256_text(text):
    return hashlib.sha256(text.encode()).hexdigest()


def trajectory_header(d):
    return (["step", "scatterer_id"] + [f"shift_{i}" for i in range(d)]
            + [f"q_{i}" for i in range(d)] + [f"v_{i}" for i in range(d)]
            + ["t_flight", "cos_phi", "tangency"])


def _state_dict(x):
    return {"scatterer_id": x.instance.base_id, "shift": list(x.instance.shift),
            "q": x.q.tolist(), "v": x.v.tolist()}


def write_trajectory(record, path, extra=None):
    """One row per collision, with ``q`` in the base cell and the shift kept.

    The initial state, the termination reason and ``extra`` go to the JSON
    sidecar ``<path>.json``.
    """
    path = Path(path)
    d = record.initial.q.size
    lines = [",".join(trajectory_header(d))]
    for k, (ev, x) in enumerate(zip(record.events, record.states), start=1):
        shift = np.asarray(ev.instance.shift, dtype=float)
        row = ([str(k), str(ev.instance.base_id)] + [str(s) for s in ev.instance.shift]
               + [_f(c) for c in x.q - shift] + [_f(c) for c in x.v]
               + [_f(ev.t_flight), _f(ev.cos_phi), "1" if ev.tangency else "0"])
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")
    side = {"initial": _state_dict(record.initial), "termination": record.termination,
            "message": record.message, "n_events": len(record.events)}
    if extra:
        side.update(extra)
    write_json(side, str(path) + ".json")
    return path


def read_trajectory(path):
    """Rows of a trajectory CSV as dicts of floats, states in cover coordinates."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        d = sum(1 for h in reader.fieldnames if h.startswith("q_"))
        for r in reader:
            shift = tuple(int(r[f"shift_{i}"]) for i in range(d))
            q = np.array([float(r[f"q_{i}"]) for i in range(d)]) + np.array(shift, dtype=float)
            v = np.array([float(r[f"v_{i}"]) for i in range(d)])
            rows.append({
                "step": int(r["step"]),
                "state": PhasePoint(ScattererInstance(int(r["scatterer_id"]), shift), q, v),
                "t_flight": float(r["t_flight"]),
                "cos_phi": float(r["cos_phi"]),
                "tangency": r["tangency"] == "1",
            })
    return rows


def state_from_dict(data):
    inst = ScattererInstance(int(data["scatterer_id"]), tuple(int(s) for s in data["shift"]))
    return PhasePoint(inst, np.asarray(data["q"], dtype=float), np.asarray(data["v"], dtype=float))


def load_states(path):
    """Initial states from a JSON list of ``{scatterer_id, shift, q, v}``."""
    return [state_from_dict(d) for d in json.loads(Path(path).read_text())]


def write_census(rows, path):
    lines = ["j,trials,converged,best_residual,median_iters"]
    for r in rows:
        lines.append(f"{r.j},{r.trials},{r.converged},{_f(r.best_residual)},{_f(r.median_iters)}")
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def write_tangency_samples(samples, path):
    d = samples[0].line.v.size if samples else 0
    head = [f"p_{i}" for i in range(d)] + [f"v_{i}" for i in range(d)] + ["t_star", "res_F", "res_dF"]
    lines = [",".join(head)]
    for s in samples:
        vals = list(s.line.p) + list(s.line.v) + [s.t_star, s.residuals[0], s.residuals[1]]
        lines.append(",".join(_f(x) for x in vals))
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def write_resolution_table(table, path):
    return write_json(table.to_json(), path)


def tube_report(report):
    """The tube report layout: deltas, fractions, CI halfwidths and the fit."""
    est = report.meta.get("estimates", [])
    return {
        "deltas": [e["delta"] for e in est],
        "fractions": [e["volume_fraction"] for e in est],
        "ci": [e["confidence_halfwidth"] for e in est],
        "counts": [e["count"] for e in est],
        "slope": report.slope,
        "intercept": report.intercept,
        "r2": report.r2,
        "passed": report.passed,
        "degenerate": report.degenerate,
        "n_samples": report.meta.get("n_samples"),
        "seed": report.meta.get("seed"),
        "meta": {k: v for k, v in report.meta.items() if k != "estimates"},
    }
