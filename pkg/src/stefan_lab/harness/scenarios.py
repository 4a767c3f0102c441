"""Dispatch a validated :class:`ScenarioConfig` to the numerical modules.

Every command writes ``<command>.csv`` plus ``<command>.json`` into the output
directory.  Outputs depend only on the config and its seed.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .. import modulation_dynamics as md
from .. import spectral_operator as so
from .. import stefan_solver as ss
from ..errors import ConfigurationError, DomainError, NumericalError, StefanLabError
from .config import ScenarioConfig, serialize_config
from .outputs import csv_text, write_outputs
from .verify import format_line, run_checks

THREADS_ENV = "STEFAN_LAB_THREADS"

SPECTRUM_COLUMNS = ["b", "k", "lambda", "lambda_minus_leading", "remainder_scaled",
                    "norm_sq", "sign_changes"]


@dataclass
class ExitReport:
    command: str
    exit_code: int
    files: dict[str, Path] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)
    error: str | None = None


def derive_seed(seed: int, *stream: int) -> int:
    """64-bit seed for one randomized sub-task, keyed by the config seed."""
    return int(np.random.SeedSequence([seed, *stream]).generate_state(1, np.uint64)[0])


def worker_count(requested: int = 0) -> int:
    """``requested`` if positive, else ``STEFAN_LAB_THREADS``, else 1; never above the cap."""
    cap = os.environ.get(THREADS_ENV)
    try:
        cap_n = max(1, int(cap)) if cap else None
    except ValueError as exc:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {cap!r}") from exc
    n = requested if requested > 0 else (cap_n or 1)
    return min(n, cap_n) if cap_n else n


# ----------------------------------------------------------------------------
# spectrum and sweep
# ----------------------------------------------------------------------------


def spectrum_rows(b: float, K: int, n: int, z_max: float = 12.0, sign: str = "minus"
                  ) -> tuple[list[dict], list[so.EigenPair]]:
    """One row per mode of ``H_b`` (``sign = minus``) or ``-Delta - Lambda`` (``plus``)."""
    if sign == "plus":
        pairs = so.direct_freezing_spectrum(b, K, n, min(z_max, 8.0))
        shift = 2.0
    else:
        pairs = so.eig_pairs(so.assemble(b, n, z_max), K)
        shift = 0.0
    L = abs(math.log(b)) if b > 0 else math.inf
    rows = []
    for p in pairs:
        lead = 2 * p.k + shift + (2.0 / L if b > 0 else 0.0)
        diff = p.lam - lead
        rows.append({"b": b, "k": p.k, "lambda": p.lam, "lambda_minus_leading": diff,
                     "remainder_scaled": diff * L * L if b > 0 else float("nan"),
                     "norm_sq": p.norm_sq, "sign_changes": p.sign_changes})
    return rows, pairs


def _spectrum(cfg: ScenarioConfig) -> tuple[list[dict], list[str], dict]:
    p = cfg.parameters
    rows, pairs = spectrum_rows(p["b"], p["K"], p["n"], p["z_max"], p["sign"])
    summary: dict[str, Any] = {
        "residual_max": max(q.residual for q in pairs),
        "mu_coefficients": {str(q.k): q.mu_coeffs for q in pairs},
    }
    if p["gap_trials"] > 0 and p["sign"] == "minus" and p["b"] > 0:
        gaps = {}
        for k in range(min(p["K"], 2)):
            g = so.spectral_gap_test(p["b"], k, p["gap_trials"], derive_seed(cfg.seed, 1, k),
                                     pairs=pairs)
            gaps[str(k)] = {"min_quotient": g.min_quotient, "redraws": g.redraws,
                            "bound": 2 * k + 2}
        summary["gap"] = gaps
    return rows, SPECTRUM_COLUMNS, summary


def _sweep_entry(args: tuple) -> tuple[int, list[dict], str]:
    idx, b, ks, n, directory = args
    rows, _ = spectrum_rows(b, max(ks), n)
    rows = [r for r in rows if r["k"] in ks]
    path = Path(directory) / "entries" / f"sweep_{idx:03d}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    text, _ = csv_text(rows, SPECTRUM_COLUMNS)
    path.write_text(text, encoding="utf-8", newline="")
    return idx, rows, str(path)


def _sweep(cfg: ScenarioConfig) -> tuple[list[dict], list[str], dict]:
    p = cfg.parameters
    ks = tuple(sorted(set(p["k_list"])))
    jobs = [(i, b, ks, p["n"], cfg.output_dir) for i, b in enumerate(p["b_list"])]
    workers = min(worker_count(p["workers"]), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_entry, jobs))
    else:
        results = [_sweep_entry(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    rows = [row for _, entry, _ in results for row in entry]
    summary = {"entries": [path for _, _, path in results], "workers": workers}
    return rows, SPECTRUM_COLUMNS, summary


# ----------------------------------------------------------------------------
# reduced ODE
# ----------------------------------------------------------------------------


def _rate_summary(fit_fn: Callable[[], md.RateFit]) -> dict:
    try:
        fit = fit_fn()
    except (DomainError, NumericalError) as exc:
        return {"error": str(exc)}
    return {"regime": fit.regime, "terminal": fit.terminal, "c_star": fit.c_star,
            "exponents": fit.exponents, "variation": fit.variation,
            "tail_fraction": fit.tail_fraction}


def _ode(cfg: ScenarioConfig) -> tuple[list[dict], list[str], dict]:
    p = cfg.parameters
    k, regime = p["k"], p["regime"]
    summary: dict[str, Any] = {}
    if regime == "melt" and k == 0:
        st = md.melt_k0_state(p["b0"])
        traj = md.integrate("melt", 0, st, st.s * p["s_end_ratio"], p["tol"], p["per_decade"])
        summary["invariant_drift"] = float(np.ptp(md.k0_invariant(traj.scale, traj.s)))
        summary["rate_fit"] = _rate_summary(lambda: md.melt_rate_extract(traj))
    elif regime == "melt":
        s0 = p["s0"]
        s_end = s0 * p["s_end_ratio"]
        if p["shoot"]:
            res = md.shoot_unstable(k, s0, s_end, p["k_bound"])
            traj = res.traj
            summary["shooting"] = {"w_unstable": res.w_unstable, "V_lower": res.V_lower,
                                   "exit_s": res.exit_s, "survived": res.survived,
                                   "mu1": res.mu1, "mu2": res.mu2,
                                   "bisections": res.bisections}
        else:
            traj = md.integrate("melt", k, md.approximate_solution(s0, k), s_end, p["tol"],
                                p["per_decade"])
        summary["rate_fit"] = _rate_summary(lambda: md.melt_rate_extract(traj))
    else:
        s0 = p["s0"]
        st = md.approximate_solution(s0, k, "freeze")
        traj = md.integrate("freeze", k, st, s0 * p["s_end_ratio"], p["tol"], p["per_decade"])
        summary["rate_fit"] = _rate_summary(lambda: md.freeze_rate_extract(traj))
    summary["status"] = traj.status
    columns = ["s", "t", "lambda", "b_or_B"] + [f"mode_{j}" for j in range(
        traj.modes.shape[0])] + ["a_or_A"]
    return traj.rows(), columns, summary


# ----------------------------------------------------------------------------
# PDE
# ----------------------------------------------------------------------------


def freezing_profile(amplitude: float) -> Callable[[np.ndarray], np.ndarray]:
    """Compactly supported nonpositive data: ``-A (y-1) exp(-(y-1)^2) chi(y/3)``."""
    def prof(y):
        return -amplitude * (y - 1) * np.exp(-((y - 1) ** 2)) * ss.cutoff(y / 3)
    return prof


def _pde(cfg: ScenarioConfig) -> tuple[list[dict], list[str], dict]:
    p = cfg.parameters
    k = p["k"]
    grid = ss.make_radial_grid(p["grid_n"], p["ymax"])
    lam0 = p["lambda0"]
    t_end = None if math.isinf(p["t_end"]) else p["t_end"]
    summary: dict[str, Any] = {}
    if p["regime"] == "melt":
        prep = ss.init_prepared_data(p["b0"], k, grid, lam0, scheme=p["scheme"])
        state0 = prep.state
        summary["prepared"] = {"alpha": prep.alpha, "B": prep.B,
                               "orthogonality": prep.orthogonality,
                               "dirichlet_energy": prep.dirichlet_energy, "s0": state0.s}
        s_end = state0.s * p["s_end_ratio"]
        project_every = p["project_every"]
        growth = p["growth"]
    else:
        if t_end is None:
            raise ConfigurationError("pde.t_end: freezing runs need a finite t_end")
        state0 = ss.init_profile(freezing_profile(p["amplitude"]), grid, lam0,
                                 scheme=p["scheme"])
        summary["lambda_inf_formula"] = ss.lambda_infinity_formula(state0)
        s_end = None
        project_every = 0
        growth = p["growth"] or 0.02
    res = ss.run(state0, p["dt0"], t_end=t_end, lambda_floor=p["lambda_floor"] * lam0,
                 s_end=s_end, every=p["every"], growth=growth, max_steps=p["max_steps"],
                 project_every=project_every, project_k=k)
    far = max(r.far_field_ratio for r in res.records)
    summary.update(status=res.status, steps=res.steps, final_lambda=res.final.lam,
                   final_s=res.final.s, final_t=res.final.t, far_field_max=far,
                   far_field_ok=far <= ss.DECAY_MONITOR)
    rows = [r.row() for r in res.records]
    columns = list(rows[0])
    extra = ["b_proj"] + [f"mode_{j}" for j in range(k + 1)] + ["eps_norm", "phi",
                                                                 "projection_ok"]
    columns += extra
    by_s = {pr.s: pr for pr in res.projections}
    for row in rows:
        pr = by_s.get(row["s"])
        if pr is None:
            continue
        row["b_proj"] = pr.b
        for j, m in enumerate(pr.modes):
            row[f"mode_{j}"] = m
        row.update(eps_norm=pr.eps_norm, phi=pr.phi, projection_ok=pr.ok)
    if p["regime"] == "freeze":
        try:
            lam_inf, _ = ss.extrapolate_lambda_infinity(res.column("t"), res.column("lambda"))
            summary["lambda_inf_extrapolated"] = lam_inf
        except NumericalError as exc:
            summary["lambda_inf_extrapolated"] = {"error": str(exc)}
    elif res.status == "lambda_floor" and k == 0 and res.projections and res.projections[-1].ok:
        summary["ode_continuation"] = _continue_with_ode(res.projections[-1])
    return rows, columns, summary


def _continue_with_ode(pr: ss.Projection) -> dict:
    """Carry the projected ``(s, b, lambda, t)`` into the k = 0 law to estimate ``T``."""
    st = md.melt_k0_state(pr.b, pr.s, pr.lam)
    st.t = pr.t
    try:
        traj = md.integrate("melt", 0, st, pr.s * 1e4, per_decade=50)
        tau, tail = md.time_to_go(traj)
    except (DomainError, NumericalError) as exc:
        return {"error": str(exc)}
    return {"s_start": pr.s, "b_start": pr.b, "T": float(traj.t[0] + tau[0]),
            "tail_fraction": tail / float(traj.t[0] + tau[0])}


# ----------------------------------------------------------------------------
# verify
# ----------------------------------------------------------------------------


def _verify(cfg: ScenarioConfig, echo: Callable[[str], None] | None = None
            ) -> tuple[list[dict], list[str], dict]:
    progress = (lambda r: echo(format_line(r))) if echo else None
    results = run_checks(cfg.parameters["quick"], cfg.seed, progress=progress)
    rows = [r.row() for r in results]
    failed = [f"{r.module}.{r.name}" for r in results if not r.passed]
    summary = {"passed": len(results) - len(failed), "failed": len(failed),
               "failures": failed}
    return rows, ["module", "check", "passed", "value", "limit", "detail"], summary


_DISPATCH = {"spectrum": _spectrum, "sweep": _sweep, "ode": _ode, "pde": _pde}


def run_scenario(cfg: ScenarioConfig, echo: Callable[[str], None] | None = None,
                 raise_errors: bool = False) -> ExitReport:
    """Run one command and write its outputs.

    Package errors become a nonzero ``exit_code`` (configuration 2, numerical 3,
    regime 4) with the message recorded in ``<command>.json``; pass
    ``raise_errors`` to propagate them instead.
    """
    out = Path(cfg.output_dir)
    meta = {"command": cfg.command, "seed": cfg.seed, "config": serialize_config(cfg)}
    try:
        if cfg.command == "verify":
            rows, columns, summary = _verify(cfg, echo)
        else:
            rows, columns, summary = _DISPATCH[cfg.command](cfg)
    except StefanLabError as exc:
        if raise_errors:
            raise
        summary = {**meta, "error": {"category": type(exc).__name__, "message": str(exc)}}
        files = write_outputs([], [], out, cfg.command, summary)
        return ExitReport(cfg.command, exc.exit_code, files, summary, str(exc))
    summary = {**meta, **summary}
    files = write_outputs(rows, columns, out, cfg.command, summary)
    code = 1 if cfg.command == "verify" and summary["failed"] else 0
    return ExitReport(cfg.command, code, files, summary)
