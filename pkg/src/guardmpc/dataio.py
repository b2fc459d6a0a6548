"""Dataset generation, file formats, run-log persistence, and reporting.

Dataset files come in pairs: a JSON manifest (self-describing, canonical key
order, no timestamps, so identical seeds give byte-identical files) and a
flat little-endian float64 binary block with one row per kept sample,
``[x0 | u_0 ... u_{N-1} | cost]``.  Run logs are newline-delimited JSON, one
object per step plus a summary footer; timing fields live in a clearly
separated key that digesting excludes.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import guard as _guard
from . import models as _models
from . import ocp as _ocp
from . import solver as _solver

__all__ = [
    "Dataset",
    "Report",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "dataset_digest",
    "write_run_log",
    "read_run_log",
    "run_log_digest",
    "aggregate_report",
    "render_report",
    "sample_feasible_states",
    "worker_count",
]


def worker_count(jobs=None) -> int:
    if jobs is not None:
        return max(1, int(jobs))
    env = os.environ.get("GUARDMPC_WORKERS")
    if env:
        return max(1, int(env))
    return 1


@dataclass
class Dataset:
    records: np.ndarray          # (rows, n_x + n_u*N + 1)
    manifest: dict


def _scaling_block(model) -> dict:
    in_off, in_sc, out_off, out_sc = _policy_scaling(model)
    return {
        "in_offset": in_off.tolist(),
        "in_scale": in_sc.tolist(),
        "out_offset": out_off.tolist(),
        "out_scale": out_sc.tolist(),
    }


def _policy_scaling(model):
    from . import policy as _policy

    return _policy.default_scaling(model, model.N)


def _solve_one(args):
    model, spec, seed, index, tightened, options = args
    x0 = _models.sample_initial_state(model, seed, index)
    try:
        res = _solver.solve_ocp(model, spec, x0, options, tightened=tightened)
        return index, x0, res.status, res.useq, res.cost, res.iters, res.kkt_residual
    except Exception as err:  # rollout blowups on wild samples count as errors
        return index, x0, f"error:{type(err).__name__}", None, float("nan"), 0, float("nan")


def generate_dataset(model, spec, n_points: int, seed: int, tightened: bool = False,
                     options: _solver.SolveOptions | None = None,
                     jobs=None, screen: bool | None = None) -> Dataset:
    """Sample initial states, solve each, keep the feasible solutions.

    Records are ordered by draw index whatever the execution schedule, so
    the output is reproducible for a fixed seed.  Per-point solver
    diagnostics land in the manifest.
    """
    if n_points < 1:
        raise ValueError("need at least one point")
    if screen is None:
        screen = _solver.screen_by_default(model)
    n_jobs = worker_count(jobs)
    tasks = []
    screened_out = 0
    for i in range(n_points):
        if screen:
            x0 = _models.sample_initial_state(model, seed, i)
            if not _solver.feasibility_screen(model, spec, x0, tightened=tightened):
                screened_out += 1
                continue
        tasks.append((model, spec, seed, i, tightened, options))
    results = []
    if n_jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_solve_one, tasks, chunksize=8))
    else:
        results = [_solve_one(t) for t in tasks]
    results.sort(key=lambda r: r[0])

    n_x, n_u, N = model.n_x, model.n_u, spec.N
    rows = []
    diagnostics = []
    counts = {"attempted": n_points, "feasible": 0, "infeasible": screened_out, "error": 0}
    for index, x0, status, useq, cost, iters, kkt in results:
        diagnostics.append({
            "index": index, "status": status, "iters": iters,
            "kkt": None if not np.isfinite(kkt) else kkt,
        })
        if status in ("converged", "max_iters"):
            rows.append(np.concatenate([x0, useq.ravel(), [cost]]))
            counts["feasible"] += 1
        elif status.startswith("error"):
            counts["error"] += 1
        else:
            counts["infeasible"] += 1
    records = np.array(rows, dtype="<f8").reshape(len(rows), n_x + n_u * N + 1)

    tight_summary = _ocp._tightening_to_dict(spec.tightening)
    manifest = {
        "format": "guardmpc-dataset-v1",
        "benchmark": model.name,
        "spec_hash": _ocp.spec_digest(spec),
        "seed": seed,
        "tightened": tightened,
        "counts": counts,
        "row_count": len(rows),
        "n_x": n_x,
        "n_u": n_u,
        "N": N,
        "row_layout": "x0 | u_0..u_{N-1} | cost",
        "scaling": _scaling_block(model),
        "tightening": tight_summary,
        "screen": screen,
        "diagnostics": diagnostics,
    }
    return Dataset(records=records, manifest=manifest)


def write_dataset(ds: Dataset, basepath) -> tuple[str, str]:
    """Write `<base>.json` and `<base>.bin`; returns both paths."""
    base = str(basepath)
    if base.endswith(".json") or base.endswith(".bin"):
        base = base.rsplit(".", 1)[0]
    manifest = dict(ds.manifest)
    manifest["data_file"] = os.path.basename(base) + ".bin"
    jpath, bpath = base + ".json", base + ".bin"
    with open(jpath, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
    with open(bpath, "wb") as fh:
        fh.write(np.ascontiguousarray(ds.records, dtype="<f8").tobytes())
    return jpath, bpath


def read_dataset(basepath) -> Dataset:
    base = str(basepath)
    if base.endswith(".json") or base.endswith(".bin"):
        base = base.rsplit(".", 1)[0]
    with open(base + ".json") as fh:
        manifest = json.load(fh)
    width = manifest["n_x"] + manifest["n_u"] * manifest["N"] + 1
    raw = np.fromfile(base + ".bin", dtype="<f8")
    records = raw.reshape(manifest["row_count"], width)
    return Dataset(records=records, manifest=manifest)


def dataset_digest(basepath) -> str:
    base = str(basepath)
    if base.endswith(".json") or base.endswith(".bin"):
        base = base.rsplit(".", 1)[0]
    h = hashlib.sha256()
    for path in (base + ".json", base + ".bin"):
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Run logs (JSONL)
# ---------------------------------------------------------------------------

def write_run_log(log: _guard.RunLog, path) -> None:
    with open(path, "w") as fh:
        for rec in log.records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")
        fh.write(json.dumps(log.summary(), sort_keys=True, separators=(",", ":")))
        fh.write("\n")


def read_run_log(path) -> tuple[list[dict], dict]:
    """Returns (step records, summary footer)."""
    records = []
    summary = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            if doc.get("record") == "summary":
                summary = doc
            else:
                records.append(doc)
    if summary is None:
        raise ValueError(f"{path}: missing summary footer")
    return records, summary


def _strip_timings(doc):
    if isinstance(doc, dict):
        return {k: _strip_timings(v) for k, v in doc.items() if k != "timings_ns"}
    if isinstance(doc, list):
        return [_strip_timings(v) for v in doc]
    return doc


def run_log_digest(log_or_path) -> str:
    """Digest of a run log with the timing columns excluded."""
    if isinstance(log_or_path, _guard.RunLog):
        docs = [r.to_json() for r in log_or_path.records] + [log_or_path.summary()]
    else:
        records, summary = read_run_log(log_or_path)
        docs = records + [summary]
    h = hashlib.sha256()
    for doc in docs:
        h.update(json.dumps(_strip_timings(doc), sort_keys=True,
                            separators=(",", ":")).encode())
        h.update(b"\n")
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Aggregation (the safe-vs-naive comparison table)
# ---------------------------------------------------------------------------

@dataclass
class Report:
    benchmark: str
    modes: dict = field(default_factory=dict)


def aggregate_report(summaries: list[dict]) -> Report:
    """Fold run summaries into per-mode safety and rejection statistics.

    A step can count toward several rejection reasons at once, so the reason
    percentages (taken over candidate-applied steps) need not sum to 100.
    """
    if not summaries:
        raise ValueError("no run summaries given")
    benchmarks = {s["benchmark"] for s in summaries}
    if len(benchmarks) != 1:
        raise ValueError(f"mixed benchmarks in one report: {sorted(benchmarks)}")
    report = Report(benchmark=benchmarks.pop())
    by_mode: dict[str, list[dict]] = {}
    for s in summaries:
        by_mode.setdefault(s["mode"], []).append(s)
    for mode, runs in sorted(by_mode.items()):
        n_runs = len(runs)
        n_safe = sum(1 for r in runs if r["safe"])
        steps = sum(r["steps"] for r in runs)
        kept = sum(r["candidate_applied"] for r in runs)
        reasons = {"state": 0, "terminal": 0, "input": 0, "cost": 0}
        for r in runs:
            for k, v in r.get("reject_reason_counts", {}).items():
                reasons[k] += v
        report.modes[mode] = {
            "runs": n_runs,
            "safe_pct": 100.0 * n_safe / n_runs,
            "steps": steps,
            "candidate_applied_pct": 100.0 * kept / steps if steps else 0.0,
            "reason_state_pct": 100.0 * reasons["state"] / kept if kept else 0.0,
            "reason_terminal_pct": 100.0 * reasons["terminal"] / kept if kept else 0.0,
            "reason_input_pct": 100.0 * reasons["input"] / kept if kept else 0.0,
            "reason_cost_pct": 100.0 * reasons["cost"] / kept if kept else 0.0,
        }
    return report


def render_report(report: Report) -> str:
    """Fixed-width table: safety per mode and candidate-application reasons."""
    header = (
        f"benchmark: {report.benchmark}\n"
        f"{'mode':<8} {'runs':>5} {'safe %':>7} {'cand %':>7} "
        f"{'state %':>8} {'term %':>7} {'input %':>8} {'cost %':>7}"
    )
    lines = [header]
    for mode, m in report.modes.items():
        lines.append(
            f"{mode:<8} {m['runs']:>5d} {m['safe_pct']:>7.1f} "
            f"{m['candidate_applied_pct']:>7.1f} {m['reason_state_pct']:>8.1f} "
            f"{m['reason_terminal_pct']:>7.1f} {m['reason_input_pct']:>8.1f} "
            f"{m['reason_cost_pct']:>7.1f}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Feasible-state sampling shared by experiments
# ---------------------------------------------------------------------------

def _feasible_task(args):
    model, spec, i, x0, options = args
    try:
        res = _solver.solve_ocp(model, spec, x0, options)
    except Exception:
        return i, x0, None
    return i, x0, (res.useq if res.feasible else None)


def sample_feasible_states(model, spec, count: int, seed: int,
                           options: _solver.SolveOptions | None = None,
                           jobs=None, max_attempts: int | None = None,
                           sampler=None, screen: bool | None = None):
    """First `count` draw indices whose sampled state the solver can serve.

    Returns (states, solutions, attempts).  `sampler(seed, index)` may
    override the model's box sampling.  Deterministic in (seed, count): the
    kept states are the feasible ones in draw order.
    """
    if max_attempts is None:
        max_attempts = max(200000, 2000 * count)
    if screen is None:
        screen = _solver.screen_by_default(model)
    n_jobs = worker_count(jobs)
    kept_x, kept_u = [], []
    attempts = 0
    batch = max(8 * n_jobs, min(64, 4 * count))

    def draw(i):
        if sampler is not None:
            return sampler(seed, i)
        return _models.sample_initial_state(model, seed, i)

    next_index = 0
    pool = ProcessPoolExecutor(max_workers=n_jobs) if n_jobs > 1 else None
    try:
        while len(kept_x) < count and attempts < max_attempts:
            todo = []
            while len(todo) < batch and attempts < max_attempts:
                x0 = draw(next_index)
                attempts += 1
                idx = next_index
                next_index += 1
                if not screen or _solver.feasibility_screen(model, spec, x0):
                    todo.append((model, spec, idx, x0, options))
            if not todo:
                continue
            if pool is not None:
                outs = list(pool.map(_feasible_task, todo, chunksize=4))
            else:
                outs = [_feasible_task(t) for t in todo]
            for _, x0, useq in sorted(outs, key=lambda o: o[0]):
                if useq is not None and len(kept_x) < count:
                    kept_x.append(x0)
                    kept_u.append(useq)
    finally:
        if pool is not None:
            pool.shutdown()
    if len(kept_x) < count:
        raise RuntimeError(
            f"found only {len(kept_x)}/{count} feasible states in {attempts} draws"
        )
    return np.array(kept_x), np.array(kept_u), attempts
