"""Command line front end.

    driftlab {simulate,filter,solve,evaluate,regularize} [--config PATH] [--seed N]
             [--out DIR] [--workers N] [--timing]

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 statistical-validity failure.  Every command writes ``resolved_config.json``
(the configuration with all defaults filled in) next to its outputs.
"""

from __future__ import annotations

import argparse
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from ._linalg import row_sum_norm
from .config import RESOLVED_NAME, RunConfig, validate_against
from .control_eval import append_ledger, measure_change_identity, reward_mc
from .dpe_solver import (Grid2D, ValueGrid, default_grid, is_quadratic_case, optimal_rule, reference_error,
                         solve_dpe)
from .errors import (ConfigError, ConsistencyError, GridError, NumericalError, ParameterError,
                     StatisticalValidityError)
from .filter import covariance_bound, run_filter
from .io import write_csv, write_json
from .market_model import ModelParams, simulate_bundle
from .regularization_lab import convergence_report
from .rng import derive_seed
from .rules import constant_rule, myopic_rule, zero_rule
from .state_space import VecState

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_STATISTICAL = 0, 2, 3, 4
N_PROBES = 10
WELL_POSEDNESS_LIMIT = 10.0


class WellPosednessWarning(UserWarning):
    pass


def well_posedness_warning(params: ModelParams) -> str | None:
    """Heuristic flag for theta in (0, 1): large ``T theta/(1-theta) |Sigma_R^{-1}|`` can blow up the criterion."""
    th = params.theta
    if not 0 < th < 1:
        return None
    load = params.T * th / (1.0 - th) * row_sum_norm(params.Sigma_R_inv)
    if load > WELL_POSEDNESS_LIMIT:
        return (f"theta={th} with T*theta/(1-theta)*|Sigma_R^-1|={load:.3g} > {WELL_POSEDNESS_LIMIT}: "
                "the risk-sensitive criterion may be infinite for these parameters")
    return None


def _grid(cfg: RunConfig, params: ModelParams) -> Grid2D:
    g = cfg["grid"]
    return default_grid(params, n_m=g["n_m"], n_q=g["n_q"], n_t=g["n_t"], dt=g["dt"],
                        q_factor=g["q_factor"], m_width=g["m_width"])


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / RESOLVED_NAME, cfg.resolved())
    return out


def _wants(cfg: RunConfig, fmt: str) -> bool:
    return fmt in cfg["output"]["formats"]


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig, workers: int = 1, timing: bool = False) -> dict:
    params = cfg.model()
    out = _out_dir(cfg)
    mc = cfg["mc"]
    n_views, drift_end = [], []
    for i in range(mc["n_bundles"]):
        b = simulate_bundle(params, cfg.seed, counter=i, n_steps=mc["n_steps"])
        b.to_csv(out / f"paths_{i:04d}.csv", out / f"views_{i:04d}.csv")
        n_views.append(len(b.views))
        drift_end.append(b.drift_path[-1])
    summary = {"n_bundles": mc["n_bundles"], "mean_views": float(np.mean(n_views)),
               "mean_terminal_drift": np.mean(drift_end, axis=0).tolist()}
    if _wants(cfg, "json"):
        write_json(out / "simulate_summary.json", summary)
    print(f"simulated {summary['n_bundles']} bundles, {summary['mean_views']:.3f} views per bundle")
    return summary


def cmd_filter(cfg: RunConfig, workers: int = 1, timing: bool = False) -> dict:
    params = cfg.model()
    out = _out_dir(cfg)
    mc = cfg["mc"]
    bound = covariance_bound(params)
    probes = np.linspace(0.0, params.T, N_PROBES + 1)[1:]
    sq_err, q_tr = [], []
    violations = 0
    for i in range(mc["n_bundles"]):
        b = simulate_bundle(params, cfg.seed, counter=i, n_steps=mc["n_steps"])
        fp = run_filter(b, params.m0, params.q0, params)
        if _wants(cfg, "csv"):
            fp.to_csv(out / f"filter_{i:04d}.csv")
        violations += int(np.sum(row_sum_norm(fp.Q) > bound))
        t, M, Q = fp.on_grid()
        idx = np.minimum(np.searchsorted(t, probes - 1e-12 * params.T), t.size - 1)
        err = b.drift_path[idx] - M[idx]
        sq_err.append(np.sum(err * err, axis=1))
        q_tr.append(np.trace(Q[idx], axis1=1, axis2=2))
    sq_err, q_tr = np.array(sq_err), np.array(q_tr)
    n = sq_err.shape[0]
    diff = sq_err - q_tr
    se = diff.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(N_PROBES, np.nan)
    within = np.abs(diff.mean(axis=0)) <= 3.0 * se
    summary = {"n_bundles": n, "covariance_bound": bound, "bound_violations": violations,
               "probe_times": probes.tolist(), "mse": sq_err.mean(axis=0).tolist(),
               "mean_trace_Q": q_tr.mean(axis=0).tolist(), "diff_se": se.tolist(),
               "mse_within_3se": within.tolist()}
    if _wants(cfg, "json"):
        write_json(out / "filter_summary.json", summary)
    if _wants(cfg, "csv"):
        write_csv(out / "filter_mse.csv", ["t", "mse", "mean_trace_Q", "diff_se", "within_3se"],
                  np.column_stack([probes, summary["mse"], summary["mean_trace_Q"], se, within]))
    print(f"filtered {n} bundles; covariance bound {bound:.6g}, violations {violations}; "
          f"MSE within 3 SE at {int(within.sum())}/{N_PROBES} probes")
    return summary


def cmd_solve(cfg: RunConfig, workers: int = 1, timing: bool = False) -> dict:
    params = cfg.model()
    out = _out_dir(cfg)
    g = cfg["grid"]
    value = solve_dpe(params, _grid(cfg, params), gh_order=g["gh_order"], richardson=g["richardson"])
    rule = optimal_rule(value)
    value.to_files(out / "value_grid.csv", out / "value_grid.json", rule)
    m0, q0 = float(params.m0[0]), float(params.q0[0, 0])
    summary = {"value_at_y0": float(value.value_at(0.0, m0, q0)), "diagnostics": value.diagnostics}
    if is_quadratic_case(params):
        summary.update(reference_error(value))
    if _wants(cfg, "json"):
        write_json(out / "solve_summary.json", summary)
    line = f"V(0, m0, q0) = {summary['value_at_y0']:.10g}"
    if "max_rel_error" in summary:
        line += f"; max relative error vs quadratic reference {summary['max_rel_error']:.3e}"
    print(line)
    return summary


def _rules(cfg: RunConfig, params: ModelParams) -> list:
    ev = cfg["evaluate"]
    rules = []
    for kind in ev["rules"]:
        if kind == "zero":
            rules.append(zero_rule(params.d))
        elif kind == "constant":
            val = np.broadcast_to(np.asarray(ev["constant_value"], dtype=float), (params.d,))
            rules.append(constant_rule(val))
        elif kind == "myopic":
            rules.append(myopic_rule(params))
        else:
            src = ev["value_grid"]
            if src is not None:
                _, rule = ValueGrid.from_files(Path(src).with_suffix(".csv"), Path(src).with_suffix(".json"))
                if rule is None:
                    raise ConfigError(f"evaluate/value_grid: {src} carries no rule table")
            else:
                value = solve_dpe(params, _grid(cfg, params), gh_order=cfg["grid"]["gh_order"],
                                  richardson=cfg["grid"]["richardson"])
                rule = optimal_rule(value)
            rules.append(rule)
    return rules


def cmd_evaluate(cfg: RunConfig, workers: int = 1, timing: bool = False) -> dict:
    params = cfg.model()
    out = _out_dir(cfg)
    ev, mc = cfg["evaluate"], cfg["mc"]
    y0 = VecState.from_mq(params.m0, params.q0)
    ledger = out / "ledger.csv"
    results, identity_rows = [], []
    for ri, rule in enumerate(_rules(cfg, params)):
        for run in range(ev["runs"]):
            seed = derive_seed(cfg.seed, "evaluate", ri * ev["runs"] + run)
            t0 = time.perf_counter()
            est = reward_mc(rule, 0.0, y0, mc["n_paths"], params, None, seed, mc["n_steps"], workers)
            wall = time.perf_counter() - t0 if timing else None
            run_id = f"{rule.kind}-{ri}-{run}"
            append_ledger(ledger, run_id, rule, params, est, seed, wall)
            results.append({"run_id": run_id, **est.as_dict()})
            print(f"{run_id}: D = {est.mean:.8g} +- {est.std_error:.3g}")
        if ev["identity"]:
            seed = derive_seed(cfg.seed, "identity", ri)
            rep = measure_change_identity(rule, params, mc["n_paths"], seed, mc["n_steps"], workers)
            identity_rows.append([rule.kind, rep.utility, rep.scaled_reward, rep.difference, rep.joint_se,
                                  int(rep.passed)])
            print(f"{rule.kind}: identity difference {rep.difference:.3g} (joint SE {rep.joint_se:.3g}) "
                  f"{'pass' if rep.passed else 'FAIL'}")
    if identity_rows:
        write_csv(out / "identity.csv", ["rule_kind", "utility", "scaled_reward", "difference", "joint_se",
                                         "passed"], identity_rows)
    if _wants(cfg, "json"):
        write_json(out / "evaluate_summary.json", {"runs": results})
    return {"runs": results, "identity": identity_rows}


def cmd_regularize(cfg: RunConfig, workers: int = 1, timing: bool = False) -> dict:
    params = cfg.model()
    out = _out_dir(cfg)
    reg, mc = cfg["regularization"], cfg["mc"]
    kind = reg["rule"]
    if kind == "zero":
        rule = zero_rule(params.d)
    elif kind == "constant":
        rule = constant_rule(np.broadcast_to(np.asarray(cfg["evaluate"]["constant_value"], float), (params.d,)))
    else:
        rule = myopic_rule(params)
    with_pide = reg["with_pide"] and params.d == 1
    rep = convergence_report(params, rule, reg["k_list"], mc["n_paths"], cfg.seed, reg["delta"], reg["epsilon"],
                             _grid(cfg, params) if with_pide else None, mc["n_steps"], workers, with_pide)
    data = rep.as_dict()
    validate_against(data, "convergence_report.schema.json")
    if _wants(cfg, "json"):
        rep.to_json(out / "convergence_report.json")
    if _wants(cfg, "csv"):
        rep.to_csv(out / "convergence_report.csv")
    for i, k in enumerate(rep.k_values):
        print(f"k={k:g}: L2 gap {rep.l2_gaps[i]:.4g}, reward gap {rep.reward_gaps[i]:.4g}")
    return data


COMMANDS = {"simulate": cmd_simulate, "filter": cmd_filter, "solve": cmd_solve,
            "evaluate": cmd_evaluate, "regularize": cmd_regularize}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="driftlab", description="Hidden-drift portfolio experiments.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", type=Path, help="JSON configuration file (defaults used when omitted)")
    ap.add_argument("--seed", type=int, help="master seed, overrides mc.seed")
    ap.add_argument("--out", type=Path, help="output directory, overrides output.directory")
    ap.add_argument("--workers", type=int, default=1, help="worker processes (1 is bit-reproducible)")
    ap.add_argument("--timing", action="store_true", help="report wall times (output no longer reproducible)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
        cfg = cfg.with_overrides(seed=args.seed, out=args.out)
        msg = well_posedness_warning(cfg.model())
        if msg:
            warnings.warn(msg, WellPosednessWarning, stacklevel=1)
        t0 = time.perf_counter()
        COMMANDS[args.command](cfg, workers=args.workers, timing=args.timing)
        if args.timing:
            print(f"wall time {time.perf_counter() - t0:.2f} s", file=sys.stderr)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, GridError, ConsistencyError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except StatisticalValidityError as exc:
        print(f"statistical validity failure: {exc}", file=sys.stderr)
        return EXIT_STATISTICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
