"""Experiment orchestration: the six subcommands behind the CLI.

Every artifact is written deterministically (fixed float format, fixed row
order, no timestamps), so identical (config, seed) pairs produce
byte-identical output trees.  Exit status convention: 0 all checks passed,
2 at least one check failed, 1 execution error (raised to the CLI).
"""

from __future__ import annotations

import concurrent.futures
import itertools
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import abm as abm_mod
from . import diagnostics as diag
from .closure import (
    DiscreteDistribution,
    averaged_coefficients_exact,
    closure_coefficients,
)
from .config import ExperimentConfig, apply_overrides, serialize_config, validate_config
from .model import ModelParams, verify_p_conditions
from .pde import Grid, discretize_gaussian, geometric_record_times, solve


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    v = float(x)
    if math.isnan(v):
        return "nan"
    return format(v, ".17g")


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def _window_label(R: float) -> str:
    return f"sort_is_below_nothing{R:g}"  # overwritten below; kept for clarity


def window_col(prefix: str, R: float) -> str:
    return f"{prefix}{R:g}"


def write_report(outdir, name, payload: dict):
    with open(os.path.join(outdir, f"{name}.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    with open(os.path.join(outdir, f"{name}.txt"), "w", encoding="utf-8") as fh:
        for key in sorted(payload):
            fh.write(f"{key} = {payload[key]}\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")


def moment_series_csv(path, series: diag.MomentSeries, windows):
    header = ["t", "mass", "alpha", "beta", "a", "b", "c", "d", "energy",
              "grad_energy", "phi"]
    header += [window_col("sorting_R", R) for R in windows]
    header += ["bmass_left", "bmass_right"]
    rows = []
    for r in series.records:
        row = [r.t, r.mass, r.alpha, r.beta, r.a, r.b, r.c, r.d, r.energy,
               r.grad_energy, r.phi]
        row += [r.sorting[R] for R in windows]
        row += [r.bmass_left, r.bmass_right]
        rows.append(row)
    write_csv(path, header, rows)


def abm_series_csv(path, series: abm_mod.AbmSeries, windows):
    header = ["n", "t", "m_mean", "m_se", "alpha_hat", "a_hat"]
    header += [window_col("sort_frac_R", R) for R in windows]
    header += ["replica_count"]
    rows = []
    for k, r in enumerate(series.records):
        row = [r.n, r.t, r.m, series.m_se[k], r.alpha_hat, r.a_hat]
        row += [r.sorting[R] for R in windows]
        row += [series.replica_count]
        rows.append(row)
    write_csv(path, header, rows)


def _record_times(cfg: ExperimentConfig, T: float):
    pde = cfg.raw["pde"]
    return geometric_record_times(
        T, first=float(pde["record_first"]), ratio=float(pde["record_ratio"]),
        uniform_count=int(pde["record_uniform_count"]),
    )


def _initial_density(cfg: ExperimentConfig):
    ini = cfg.raw["initial"]
    return discretize_gaussian(cfg.grid, float(ini["center"]), float(ini["sigma"]))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def run_pde(cfg: ExperimentConfig, outdir: str) -> int:
    os.makedirs(outdir, exist_ok=True)
    dcfg = cfg.raw["diagnostics"]
    windows = cfg.sorting_windows
    T = float(cfg.raw["pde"]["horizon"])
    f0 = _initial_density(cfg)
    drift = [0.0]
    snapshots, series = solve(
        f0, T, cfg.grid, cfg.pf, cfg.params, cfg.solver,
        record_times=_record_times(cfg, T),
        snapshot_times=[float(t) for t in cfg.raw["pde"]["snapshot_times"]],
        max_step_drift=drift, sorting_windows=windows,
    )

    moment_series_csv(os.path.join(outdir, "moments.csv"), series, windows)
    p = np.atleast_1d(cfg.pf(cfg.grid.centers, 0))
    for t_snap in sorted(snapshots):
        snap = snapshots[t_snap]
        write_csv(
            os.path.join(outdir, f"snapshot_t{t_snap:g}.csv"),
            ["x_center", "f", "p", "pf_flux_left_face"],
            zip(cfg.grid.centers, snap["f"], p, snap["flux_left_face"]),
        )

    energy = diag.check_energy_inequality(series, tol=float(dcfg["energy_tol"]))
    c0 = diag.assemble_c0(cfg.pf.c_p, series)
    bounds = diag.check_moment_bounds(
        series, c0, fd_slack=float(dcfg["fd_slack"]),
        beta_lb_tol=float(dcfg["beta_lb_tol"]),
    )
    verdict = diag.sorting_and_learning_verdict(
        series, cfg.params, cfg.pf,
        phi_frac=float(dcfg["phi_frac"]), sorting_tol=float(dcfg["sorting_tol"]),
        bound_factor=float(dcfg["bound_factor"]),
        trailing_frac=float(dcfg["trailing_frac"]),
        phi_floor_frac=float(dcfg["phi_floor_frac"]),
    )
    scales = diag.timescale_report(cfg.params, C_T=float(dcfg["c_T"]))

    t = series.t
    t_learn = diag.first_crossing_time(
        t, series.column("alpha"),
        lambda v: verdict.alpha_band[0] < v < verdict.alpha_band[1])
    R_sort = float(dcfg["sorting_time_R"])
    t_sort = diag.first_crossing_time(
        t, series.sorting_column(R_sort),
        lambda v: v <= float(dcfg["sorting_time_threshold"]))

    report = {
        "mass_final": series.records[-1].mass,
        "max_step_mass_drift": drift[0],
        "clipped_mass_note": "clipping is logged by the solver state; see max_step_mass_drift",
        "energy_ok": energy.ok,
        "energy_max_violation": energy.max_violation,
        "bounds_ok": bounds.ok,
        "bounds_c0": c0,
        "bounds_c0_formula": "c_p (1 + 2 c_p) (sup|c| + sup d) over the realised run",
        "verdict_conclusive": verdict.conclusive,
        "verdict_all_ok": verdict.all_ok,
        "phi_initial": verdict.phi_initial,
        "phi_final": verdict.phi_final,
        "phi_final_ok": verdict.phi_final_ok,
        "phi_trailing_ok": verdict.phi_decreasing_ok,
        "sorting_final": {f"{R:g}": v for R, v in verdict.sorting_final.items()},
        "sorting_ok": {f"{R:g}": v for R, v in verdict.sorting_ok.items()},
        "alpha_band": list(verdict.alpha_band),
        "alpha_trailing_range": list(verdict.alpha_trailing_range),
        "alpha_band_ok": verdict.alpha_band_ok,
        "a_trailing_max": verdict.a_trailing_max,
        "a_surrogate_bound": verdict.a_surrogate_bound,
        "a_surrogate_ok": verdict.a_surrogate_ok,
        "a_surrogate_note": "bound_factor is a configured surrogate for the "
                            "non-constructive transport-dominance constant",
        "regime_surrogate_ok": verdict.regime_surrogate_ok,
        "regime_lhs": verdict.regime_lhs,
        "regime_rhs": verdict.regime_rhs,
        "transport_rate": scales.transport_rate,
        "diffusion_rate": scales.diffusion_rate,
        "rate_ratio": scales.ratio,
        "t_learn_measured": t_learn,
        "t_sort_measured": t_sort,
    }
    write_report(outdir, "pde_report", report)
    ok = energy.ok and bounds.ok and verdict.all_ok
    return 0 if ok else 2


def run_abm(cfg: ExperimentConfig, outdir: str, base_seed=None) -> int:
    os.makedirs(outdir, exist_ok=True)
    windows = cfg.sorting_windows
    acfg = cfg.raw["abm"]
    seed = int(acfg["base_seed"]) if base_seed is None else int(base_seed)
    rounds = int(acfg["rounds"])
    every = int(acfg["record_every"])
    record_rounds = (list(range(0, rounds + 1, every)) if every > 0
                     else abm_mod.thinned_rounds(rounds))
    f0 = _initial_density(cfg)
    sampler = abm_mod.density_sampler(f0, cfg.grid)
    series = abm_mod.ensemble_run(
        int(acfg["replicas"]), seed, sampler, rounds, cfg.params, cfg.pf,
        R_windows=tuple(windows), record_rounds=record_rounds,
        keep_final_propensities=True,
    )
    abm_series_csv(os.path.join(outdir, "abm_series.csv"), series, windows)
    f_hat, out_l, out_r = abm_mod.empirical_density(
        series._final_propensities, cfg.grid)
    write_csv(os.path.join(outdir, "abm_hist_final.csv"),
              ["x_center", "f_hat"], zip(cfg.grid.centers, f_hat))
    last = series.records[-1]
    report = {
        "replicas": series.replica_count,
        "rounds": rounds,
        "base_seed": seed,
        "final_m_mean": last.m,
        "final_alpha_hat": last.alpha_hat,
        "final_sorting": {f"{R:g}": last.sorting[R] for R in windows},
        "hist_out_of_range_left": out_l,
        "hist_out_of_range_right": out_r,
        "nash_band_entrants": [cfg.params.Mc - 1.0, cfg.params.Mc],
    }
    write_report(outdir, "abm_report", report)
    return 0


def run_compare(cfg: ExperimentConfig, outdir: str, base_seed=None) -> int:
    """ABM vs PDE on matched initial data; round n aligns to t = tau*n."""
    os.makedirs(outdir, exist_ok=True)
    windows = cfg.sorting_windows
    ccfg = cfg.raw["compare"]
    acfg = cfg.raw["abm"]
    seed = int(acfg["base_seed"]) if base_seed is None else int(base_seed)
    tau = cfg.params.tau
    T = float(cfg.raw["pde"]["horizon"])
    rounds = int(round(T / tau))
    every = int(ccfg["checkpoint_every"])
    checkpoints = list(range(0, rounds + 1, every))
    if checkpoints[-1] != rounds:
        checkpoints.append(rounds)
    t_checks = [tau * n for n in checkpoints]
    l1_rounds = sorted(set(
        int(round(float(frac) * rounds)) for frac in ccfg["l1_times_frac"]))
    l1_times = [tau * n for n in l1_rounds]

    f0 = _initial_density(cfg)
    snapshots, series = solve(
        f0, T, cfg.grid, cfg.pf, cfg.params, cfg.solver,
        record_times=t_checks, snapshot_times=l1_times,
        sorting_windows=windows,
    )
    moment_series_csv(os.path.join(outdir, "pde_moments.csv"), series, windows)

    sampler = abm_mod.density_sampler(f0, cfg.grid)
    replicas = int(acfg["replicas"])
    abm_full = abm_mod.ensemble_run(
        replicas, seed, sampler, rounds, cfg.params, cfg.pf,
        R_windows=tuple(windows), record_rounds=checkpoints,
        keep_final_propensities=True,
    )
    abm_series_csv(os.path.join(outdir, "abm_series.csv"), abm_full, windows)

    pde_by_t = {round(r.t, 12): r for r in series.records}
    rows = []
    gaps = []
    for k, rec in enumerate(abm_full.records):
        pde_rec = pde_by_t[round(rec.t, 12)]
        gap = abs(rec.alpha_hat - pde_rec.alpha)
        gaps.append(gap)
        rows.append([rec.n, rec.t, rec.alpha_hat, abm_full.alpha_se[k],
                     pde_rec.alpha, gap])
    write_csv(os.path.join(outdir, "comparison.csv"),
              ["n", "t", "alpha_abm", "alpha_se", "alpha_pde", "alpha_gap"],
              rows)

    max_se = float(np.max(abm_full.alpha_se))
    sup_gap = float(np.max(gaps))
    alpha_tol = 3.0 * max_se + 0.01

    agg = int(ccfg["l1_aggregate_cells"])
    n_agg = cfg.grid.n_cells - (cfg.grid.n_cells % agg)
    l1 = {}
    for n_r, t_r in zip(l1_rounds, l1_times):
        rep = abm_mod.ensemble_run(
            replicas, seed, sampler, n_r, cfg.params, cfg.pf,
            R_windows=tuple(windows), record_rounds=[0, n_r],
            keep_final_propensities=True,
        )
        f_hat, _, _ = abm_mod.empirical_density(rep._final_propensities, cfg.grid)
        f_pde = snapshots[t_r]["f"]
        a_hat = f_hat[:n_agg].reshape(-1, agg).mean(axis=1)
        a_pde = f_pde[:n_agg].reshape(-1, agg).mean(axis=1)
        l1[t_r] = float(np.sum(np.abs(a_hat - a_pde)) * cfg.grid.dx * agg)
        write_csv(os.path.join(outdir, f"density_t{t_r:g}.csv"),
                  ["x_center", "f_abm", "f_pde"],
                  zip(cfg.grid.centers, f_hat, f_pde))

    l1_tol = 0.1
    ok = sup_gap <= alpha_tol and all(v < l1_tol for v in l1.values())
    report = {
        "replicas": replicas,
        "rounds": rounds,
        "base_seed": seed,
        "sup_alpha_gap": sup_gap,
        "max_alpha_se": max_se,
        "alpha_tol": alpha_tol,
        "alpha_ok": sup_gap <= alpha_tol,
        "l1_distances": {f"{t:g}": v for t, v in l1.items()},
        "l1_tol": l1_tol,
        "l1_ok": all(v < l1_tol for v in l1.values()),
        "l1_aggregate_cells": agg,
        "l1_bin_width": agg * cfg.grid.dx,
        "ok": ok,
    }
    write_report(outdir, "compare_report", report)
    return 0 if ok else 2


def run_checkp(cfg: ExperimentConfig, outdir: str) -> int:
    os.makedirs(outdir, exist_ok=True)
    ccfg = cfg.raw["condition_check"]
    grid = np.linspace(float(ccfg["x_lo"]), float(ccfg["x_hi"]),
                       int(ccfg["n_points"]))
    rep = verify_p_conditions(cfg.pf, grid, cfg.pf.c_p)
    rows = [
        ("monotonicity", len(rep.monotonicity_violations)),
        ("slope_bound", len(rep.slope_bound_violations)),
        ("curvature_bound", len(rep.curvature_bound_violations)),
        ("curvature_vs_slope", len(rep.curvature_slope_violations)),
    ]
    write_csv(os.path.join(outdir, "condition_report.csv"),
              ["condition", "violations"], rows)
    report = {
        "family": cfg.raw["probability"]["family"],
        "c_p_tested": rep.c_p_tested,
        "minimal_c_p_on_grid": rep.minimal_c_p,
        "has_flat_regions": rep.has_flat_regions,
        "ok": rep.ok,
        "p_min": cfg.pf.p_min,
    }
    write_report(outdir, "condition_report", report)
    return 0 if rep.ok else 2


def run_checkclosure(cfg: ExperimentConfig, outdir: str) -> int:
    """Verify the closure identities by enumeration across M and random f."""
    os.makedirs(outdir, exist_ok=True)
    ccfg = cfg.raw["closure_check"]
    rng = np.random.default_rng(int(ccfg["seed"]))
    tol = float(ccfg["tol"])
    rows = []
    all_ok = True
    for M in [int(m) for m in ccfg["M_values"]]:
        params = ModelParams(M=M, Mc=(1.0 + M) / 2.0, h=cfg.params.h,
                             tau=cfg.params.tau)
        worst_drift = worst_diff = 0.0
        for _ in range(int(ccfg["n_distributions"])):
            k = int(rng.integers(1, int(ccfg["max_atoms"]) + 1))
            xs = np.sort(rng.uniform(-6.0, 6.0, size=k))
            while len(np.unique(xs)) != k:
                xs = np.sort(rng.uniform(-6.0, 6.0, size=k))
            ws = rng.dirichlet(np.ones(k))
            ws = ws / ws.sum()
            f = DiscreteDistribution(xs=xs, ws=ws)
            x_q = float(rng.uniform(-6.0, 6.0))
            _, _, a, b, diff_coeff = closure_coefficients(f, params, cfg.pf)
            drift, diff = averaged_coefficients_exact(f, x_q, params, cfg.pf)
            worst_drift = max(worst_drift, abs(drift - (M - 1) * a))
            worst_diff = max(worst_diff, abs(diff - diff_coeff))
        ok = worst_drift <= tol and worst_diff <= tol
        all_ok = all_ok and ok
        rows.append([M, worst_drift, worst_diff, ok])
        print(f"M={M:2d}  drift_err={worst_drift:.3e}  diffusion_err={worst_diff:.3e}  "
              f"{'PASS' if ok else 'FAIL'}")
    write_csv(os.path.join(outdir, "closure_check.csv"),
              ["M", "max_drift_error", "max_diffusion_error", "pass"], rows)
    write_report(outdir, "closure_report", {
        "tol": tol, "ok": all_ok,
        "n_distributions": int(ccfg["n_distributions"]),
        "M_values": [int(m) for m in ccfg["M_values"]],
    })
    return 0 if all_ok else 2


def _sweep_points(cfg: ExperimentConfig):
    sweep = cfg.raw["sweep"]
    points = [dict(p) for p in sweep["points"]]
    axes = sweep["axes"]
    if axes:
        keys = sorted(axes)
        for combo in itertools.product(*(axes[k] for k in keys)):
            points.append(dict(zip(keys, combo)))
    return points


def _run_sweep_point(idx, overrides, base_raw, outdir):
    point_dir = os.path.join(outdir, f"point_{idx:03d}")
    os.makedirs(point_dir, exist_ok=True)
    row = {"point": idx, **{k: v for k, v in sorted(overrides.items())}}
    try:
        raw = apply_overrides(base_raw, overrides)
        sub_cfg = validate_config(raw)
        status = run_pde(sub_cfg, point_dir)
        with open(os.path.join(point_dir, "pde_report.json"), encoding="utf-8") as fh:
            rep = json.load(fh)
        row.update(
            status=status,
            t_learn=rep["t_learn_measured"],
            t_sort=rep["t_sort_measured"],
            separation=(rep["t_sort_measured"] / rep["t_learn_measured"]
                        if rep["t_learn_measured"] else math.nan),
            predicted_rate_ratio=rep["rate_ratio"],
            verdict_all_ok=rep["verdict_all_ok"],
        )
    except Exception as exc:  # noqa: BLE001 - a failed point must not kill the sweep
        row.update(status=1, t_learn=math.nan, t_sort=math.nan,
                   separation=math.nan, predicted_rate_ratio=math.nan,
                   verdict_all_ok=False, error=str(exc))
    return row


def run_sweep(cfg: ExperimentConfig, outdir: str, threads: int = 0) -> int:
    os.makedirs(outdir, exist_ok=True)
    points = _sweep_points(cfg)
    if not points:
        raise ValueError("sweep requested but sweep.axes and sweep.points are empty")
    workers = threads if threads > 0 else min(len(points), os.cpu_count() or 1)
    rows = [None] * len(points)
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            futs = {
                pool.submit(_run_sweep_point, i, pt, cfg.raw, outdir): i
                for i, pt in enumerate(points)
            }
            for fut in concurrent.futures.as_completed(futs):
                rows[futs[fut]] = fut.result()
    else:
        for i, pt in enumerate(points):
            rows[i] = _run_sweep_point(i, pt, cfg.raw, outdir)

    keys = sorted({k for row in rows for k in row if k not in ("point",)})
    header = ["point"] + keys
    csv_rows = [[row["point"]] + [row.get(k, "") for k in keys] for row in rows]
    write_csv(os.path.join(outdir, "sweep_summary.csv"), header,
              [[v if v != "" else math.nan for v in r] for r in csv_rows])
    statuses = [row["status"] for row in rows]
    return 0 if all(s == 0 for s in statuses) else 2


def run(subcommand: str, cfg: ExperimentConfig, outdir: str,
        seed=None, threads: int = 0) -> int:
    """Dispatch a subcommand; returns the exit status."""
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "config_echo.yaml"), "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
    if subcommand == "pde":
        return run_pde(cfg, outdir)
    if subcommand == "abm":
        return run_abm(cfg, outdir, base_seed=seed)
    if subcommand == "compare":
        return run_compare(cfg, outdir, base_seed=seed)
    if subcommand == "sweep":
        return run_sweep(cfg, outdir, threads=threads)
    if subcommand == "checkp":
        return run_checkp(cfg, outdir)
    if subcommand == "checkclosure":
        return run_checkclosure(cfg, outdir)
    raise ValueError(f"unknown subcommand {subcommand!r}")
