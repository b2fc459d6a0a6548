"""Command-line entry points for the full pipeline.

Subcommands: gen (dataset generation), simulate (closed-loop batches in
safe/naive/solver mode), report (safety and rejection-reason table over run
logs), synth-terminal (terminal ingredients to a spec file), lemma1
(perturbation probe of the tightened design), plotdata (per-step CSV export
of one run log), and fixture-policy (constant-output weight files for
adversarial or hover baselines).

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Commands are deterministic for fixed flags and seeds; wall-clock timing
fields in run logs are excluded from the published digests.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import dataio, guard, models, ocp, policy, solver

__all__ = ["main", "build_spec", "default_tightening"]


def default_tightening(model, terminal, eps=None, est_samples=3000, seed=0):
    """Desk-scale tightening defaults: a scalar tube for every benchmark.

    Tube parameters are derived from the sampled disturbance gain and the
    terminal feedback's contraction rate; they are configuration values, not
    identified constants.  The growth-factor variant is available through
    the library (see lipschitz_tightening_for) but is not the default here:
    its geometric factors blow up at benchmark horizons on the unstable
    reactor, emptying the tightened set.
    """
    if eps is None:
        eps = 1e-4 if model.name == "stir_tank" else 5e-3
    est = solver.estimate_lipschitz(model, est_samples, eps=eps, seed=seed)
    _, A, B = solver.step_jacobians(model, model.x_e, model.u_e)
    decay = float(np.max(np.abs(np.linalg.eigvals(A + B @ terminal.K_f))))
    rho = max(-np.log(min(decay, 0.999)) / model.T_s, 1e-2)
    wbar = est.eps_tilde * rho / (1.0 - np.exp(-rho * model.T_s))
    c = np.abs(model.state_rows).sum(axis=1)
    t_probe = ocp.TubeTightening(rho=rho, wbar=wbar, c=c, alpha_bar=terminal.alpha)
    s_N = ocp.tube_levels(t_probe, model.N, model.T_s)[-1]
    shrink = s_N * ocp._box_to_ellipsoid_norm(terminal.P_f)
    alpha_bar = terminal.alpha - shrink
    if alpha_bar <= 0:
        raise ValueError(
            "tube swallows the terminal set; reduce eps or supply parameters"
        )
    return ocp.TubeTightening(rho=rho, wbar=wbar, c=c, alpha_bar=alpha_bar,
                              K_delta=terminal.K_f)


def build_spec(model, spec_path=None, tightened=False, n_check=4000, seed=0):
    """Spec from a file when given, otherwise synthesized with defaults."""
    if spec_path:
        with open(spec_path) as fh:
            spec = ocp.spec_from_json(fh.read())
        if tightened and spec.tightening is None:
            raise SystemExit(2)
        return spec
    terminal = solver.synth_terminal(model, n_check=n_check, seed=seed)
    tightening = default_tightening(model, terminal) if tightened else None
    return ocp.spec_for_model(model, terminal, tightening=tightening)


def _add_common(p):
    p.add_argument("--benchmark", required=True, choices=models.BENCHMARK_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", default=None, help="OcpSpec JSON file to use as-is")
    p.add_argument("--masses", type=int, default=3,
                   help="chain length for the chain_mass benchmark")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker processes (default: GUARDMPC_WORKERS or 1)")


def _get_model(args):
    kwargs = {}
    if args.benchmark == "chain_mass":
        kwargs["masses"] = args.masses
    return models.make_model(args.benchmark, **kwargs)


def _cmd_gen(args) -> int:
    model = _get_model(args)
    spec = build_spec(model, args.spec, tightened=args.tightened)
    ds = dataio.generate_dataset(model, spec, args.n, args.seed,
                                 tightened=args.tightened, jobs=args.jobs)
    jpath, bpath = dataio.write_dataset(ds, args.out)
    c = ds.manifest["counts"]
    print(f"feasible: {c['feasible']}/{c['attempted']} "
          f"(infeasible {c['infeasible']}, error {c['error']})")
    print(f"wrote {jpath} and {bpath}")
    return 0


def _load_policy_arg(path):
    return policy.load_policy(path)


def _run_one_sim(task):
    (model, spec, pol, x0, steps, mode, useq0) = task
    if mode == "solver":
        return guard.simulate_closed_loop(model, spec, None, x0, steps, mode="solver")
    if mode == "safe":
        return guard.simulate_closed_loop(
            model, spec, pol, x0, steps, mode="safe", init_sequence=useq0
        )
    return guard.simulate_closed_loop(model, spec, pol, x0, steps, mode="naive")


def _cmd_simulate(args) -> int:
    model = _get_model(args)
    spec = build_spec(model, args.spec)
    pol = None
    if args.mode in ("safe", "naive"):
        if not args.policy:
            print("simulate: --policy is required for safe and naive modes",
                  file=sys.stderr)
            return 2
        if not os.path.exists(args.policy):
            print(f"simulate: weights file not found: {args.policy}", file=sys.stderr)
            return 2
        pol = _load_policy_arg(args.policy)
    states, solutions, attempts = dataio.sample_feasible_states(
        model, spec, args.n_runs, args.seed, jobs=args.jobs
    )
    os.makedirs(args.out, exist_ok=True)
    tasks = [
        (model, spec, pol, states[i], args.steps, args.mode, solutions[i])
        for i in range(args.n_runs)
    ]
    n_jobs = dataio.worker_count(args.jobs)
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            logs = list(pool.map(_run_one_sim, tasks, chunksize=1))
    else:
        logs = [_run_one_sim(t) for t in tasks]
    n_safe = 0
    for i, log in enumerate(logs):
        dataio.write_run_log(log, os.path.join(args.out, f"run_{i:04d}.jsonl"))
        n_safe += log.safe
    print(f"sampled {attempts} states for {args.n_runs} feasible starts")
    print(f"safe: {100.0 * n_safe / args.n_runs:.1f}%")
    return 0


def _cmd_report(args) -> int:
    summaries = []
    for d in args.logs:
        names = sorted(os.listdir(d))
        for name in names:
            if name.endswith(".jsonl"):
                _, summary = dataio.read_run_log(os.path.join(d, name))
                summaries.append(summary)
    if not summaries:
        print("report: no run logs found", file=sys.stderr)
        return 2
    report = dataio.aggregate_report(summaries)
    print(dataio.render_report(report))
    return 0


def _cmd_synth_terminal(args) -> int:
    model = _get_model(args)
    terminal = solver.synth_terminal(model, n_check=args.n_check, seed=args.seed)
    tightening = default_tightening(model, terminal) if args.tightened else None
    spec = ocp.spec_for_model(model, terminal, tightening=tightening)
    with open(args.out, "w") as fh:
        fh.write(ocp.spec_to_json(spec))
    print(f"terminal radius: {terminal.alpha:.6g}")
    print(f"wrote {args.out}")
    return 0


def _cmd_lemma1(args) -> int:
    model = _get_model(args)
    terminal = solver.synth_terminal(model, seed=args.seed)
    est = solver.estimate_lipschitz(model, 3000, eps=args.eps, seed=args.seed)
    tightening = ocp.LipschitzTightening(L_f=est.L_f, eps=args.eps,
                                         eps_tilde=est.eps_tilde)
    spec = ocp.spec_for_model(model, terminal, tightening=tightening)
    n_pass = 0
    checked = 0
    i = 0
    while checked < args.n_states and i < 200 * args.n_states:
        x0 = models.sample_initial_state(model, args.seed, i)
        i += 1
        try:
            rep = solver.lemma1_probe(model, spec, x0, args.eps, args.trials,
                                      seed=args.seed)
        except ValueError:
            continue  # tightened problem infeasible here; not a probe state
        checked += 1
        n_pass += rep.passed
    if checked == 0:
        print("lemma1: no tightened-feasible states found", file=sys.stderr)
        return 1
    verdict = "PASS" if n_pass == checked else "FAIL"
    print(f"{verdict}: {n_pass}/{checked} states kept every perturbation "
          f"nominally feasible (eps={args.eps:g}, L_f={est.L_f:.4g}, "
          f"eps_tilde={est.eps_tilde:.4g})")
    return 0


def _cmd_plotdata(args) -> int:
    records, summary = dataio.read_run_log(args.log)
    n_x = len(records[0]["x"])
    n_u = len(records[0]["u"])
    cols = (["t"] + [f"x{i}" for i in range(n_x)] + [f"u{i}" for i in range(n_u)]
            + ["accepted", "reject_kinds", "violations", "cumulative_cost"])
    with open(args.out, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in records:
            dec = r.get("decision")
            accepted = "" if dec is None else str(int(dec["accepted"]))
            kinds = "" if dec is None else "|".join(dec["reject_kinds"])
            viol = "|".join(r["violations"])
            row = ([str(r["t"])] + [repr(v) for v in r["x"]]
                   + [repr(v) for v in r["u"]]
                   + [accepted, kinds, viol, repr(r["cumulative_cost"])])
            fh.write(",".join(row) + "\n")
    print(f"wrote {args.out} ({len(records)} steps, safe={summary['safe']})")
    return 0


def _cmd_fixture_policy(args) -> int:
    model = _get_model(args)
    pol = policy.make_fixture_policy(model, args.kind, probe_seed=args.seed)
    policy.save_policy(pol, args.out)
    print(f"wrote {args.out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="guardmpc",
        description="Safety-augmented approximate MPC toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset of solved initial states")
    _add_common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--tightened", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("simulate", help="closed-loop batches from feasible starts")
    _add_common(p)
    p.add_argument("--mode", required=True, choices=["safe", "naive", "solver"])
    p.add_argument("--policy", default=None, help="weights file for NN modes")
    p.add_argument("--n-runs", type=int, default=50)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out", required=True, help="directory for run logs")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("report", help="aggregate run logs into a safety table")
    p.add_argument("--logs", nargs="+", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("synth-terminal", help="synthesize terminal ingredients")
    _add_common(p)
    p.add_argument("--n-check", type=int, default=10000)
    p.add_argument("--tightened", action="store_true",
                   help="also attach the default tightening")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth_terminal)

    p = sub.add_parser("lemma1", help="perturbation probe of the tightened design")
    _add_common(p)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--n-states", type=int, default=20)
    p.set_defaults(func=_cmd_lemma1)

    p = sub.add_parser("plotdata", help="per-step CSV export of one run log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plotdata)

    p = sub.add_parser("fixture-policy", help="write a constant fixture policy")
    _add_common(p)
    p.add_argument("--kind", choices=["adversarial", "hover"], default="adversarial")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fixture_policy)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except (ValueError, FileNotFoundError, json.JSONDecodeError,
            policy.WeightFileError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:
        print(f"failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
