"""Unified command line interface.

One subcommand per experiment; every run writes its delimited results, an
overview figure (disable with ``--no-plot``), and a ``run.json`` provenance
record (config hash, seed, library versions, wall time, summary numbers)
into the output location.  All writes are atomic (temp file + rename) and
reruns with the same config and seed produce byte-identical CSV bodies.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .model import (ConfigError, SystemConfig, config_from_dict, diagonalize,
                    diagonalize_all)
from .liouvillian import rabi_from_power
from .propagate import (NumericsError, decay_experiment, jqf_frequency_sweep,
                        reflection_experiment, reflection_truncations)
from . import dde as dde_mod
from . import optimize as opt_mod
from . import pulse as pulse_mod

TWO_PI = 2.0 * math.pi
DDE_DEFAULT_LADDER = (10**8, 3 * 10**8, 10**9)
DDE_FULL_STEPS = 10**12


def paper_config_path() -> Path:
    """Path of the bundled reference configuration."""
    return Path(resources.files("jqf_sim").joinpath("configs/paper.json"))


# ---------------------------------------------------------------------------
# Manifest and plumbing
# ---------------------------------------------------------------------------

@dataclass
class ExperimentManifest:
    """Everything needed to reproduce one experiment invocation."""

    kind: str
    config_path: str
    out: str
    overrides: list = field(default_factory=list)
    seed: int = 0
    jobs: int = 1
    no_jqf: bool = False
    plot: bool = True
    options: dict = field(default_factory=dict)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_csv(path: Path, header: str, rows) -> None:
    lines = [header]
    lines.extend(rows)
    _atomic_write_text(path, "\n".join(lines) + "\n")


def _fmt(*values) -> str:
    return ",".join(f"{v:.17g}" for v in values)


def _apply_overrides(raw: dict, overrides: list) -> dict:
    data = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if isinstance(node, list):
                node = node[int(part)]
            elif part in node:
                node = node[part]
            else:
                raise ConfigError(f"override references unknown config key: {key!r}")
        leaf = parts[-1]
        if isinstance(node, list):
            node[int(leaf)] = value
        elif leaf in node:
            node[leaf] = value
        else:
            raise ConfigError(f"override references unknown config key: {key!r}")
    return data


def _load_config(manifest: ExperimentManifest) -> tuple[SystemConfig, dict]:
    with open(manifest.config_path) as fh:
        raw = json.load(fh)
    raw = _apply_overrides(raw, manifest.overrides)
    config = config_from_dict(raw)
    if manifest.no_jqf:
        config = config.without_bare_transmons()
    return config, raw


def _run_record(manifest: ExperimentManifest, raw_config: dict, summary: dict,
                outputs: list, wall: float) -> dict:
    digest = hashlib.sha256(
        json.dumps(raw_config, sort_keys=True).encode()).hexdigest()
    import numba
    import scipy
    return {
        "experiment": manifest.kind,
        "config_path": str(manifest.config_path),
        "config_sha256": digest,
        "overrides": list(manifest.overrides),
        "no_jqf": manifest.no_jqf,
        "seed": manifest.seed,
        "jobs": manifest.jobs,
        "versions": {
            "jqf_sim": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
        "wall_time_s": wall,
        "outputs": [str(p) for p in outputs],
        "summary": summary,
    }


# ---------------------------------------------------------------------------
# Experiment runners
# ---------------------------------------------------------------------------

def _run_decay(manifest, config, args):
    result = decay_experiment(config,
                              steps_per_period=args.steps_per_period,
                              reduce_levels=not args.full_levels)
    out = Path(manifest.out)
    _write_csv(out, "t_s,F,F_tilde,n_res,n_jqf",
               (_fmt(t, f, fs, nr, nj) for t, f, fs, nr, nj in
                zip(result.times, result.fidelity, result.fidelity_strict,
                    result.n_res, result.n_jqf)))
    outputs = [out]
    if manifest.plot:
        from .reporting import render_decay
        fig = out.with_suffix(".png")
        render_decay(result.times, result.fidelity, fig)
        outputs.append(fig)
    summary = {
        "t_final_s": float(result.times[-1]),
        "final_fidelity": float(result.fidelity[-1]),
        "max_trace_error": result.max_trace_error,
        "n_steps": result.grid.n_steps,
        "dt_s": result.grid.dt,
    }
    return summary, outputs


def _run_sweep_jqf(manifest, config, args):
    freqs_hz = np.linspace(args.f_min_ghz * 1e9, args.f_max_ghz * 1e9,
                           args.points)
    finals = jqf_frequency_sweep(config, TWO_PI * freqs_hz, jobs=manifest.jobs,
                                 steps_per_period=args.steps_per_period)
    out = Path(manifest.out)
    _write_csv(out, "f_jqf_Hz,F_final",
               (_fmt(f, v) for f, v in zip(freqs_hz, finals)))
    outputs = [out]
    if manifest.plot:
        from .reporting import render_sweep
        fig = out.with_suffix(".png")
        render_sweep(freqs_hz, finals, fig)
        outputs.append(fig)
    peak = int(np.argmax(finals))
    summary = {
        "points": int(args.points),
        "peak_f_Hz": float(freqs_hz[peak]),
        "peak_fidelity": float(finals[peak]),
        "grid_step_Hz": float(freqs_hz[1] - freqs_hz[0]) if args.points > 1 else 0.0,
    }
    return summary, outputs


def dressed_cavity_center(config: SystemConfig) -> float:
    """Midpoint of the qubit-conditioned dressed cavity transitions (rad/s)."""
    d1 = diagonalize(config.subsystems[0], excitation_cap=2)
    wc0 = d1.frequencies[2] - d1.frequencies[0]
    block2 = np.where(d1.excitations == 2)[0]
    cand = d1.frequencies[block2] - d1.frequencies[1]
    wc1 = cand[np.argmin(np.abs(cand - wc0))]
    return 0.5 * (wc0 + wc1)


def _run_reflect(manifest, config, args):
    if args.power_dbm is not None:
        probe = dressed_cavity_center(config)
        rabi = rabi_from_power(args.power_dbm, probe, config)
    else:
        rabi = TWO_PI * args.rabi_mhz * 1e6
    run_cfg = reflection_truncations(config, rabi) if not args.full_levels \
        else config
    center = TWO_PI * args.center_ghz * 1e9 if args.center_ghz else \
        dressed_cavity_center(run_cfg)
    span = TWO_PI * args.span_mhz * 1e6
    grid = np.linspace(center - span / 2.0, center + span / 2.0, args.points)
    sweep = reflection_experiment(run_cfg, grid, rabi, jobs=manifest.jobs,
                                  theta_max=args.theta_max)
    out = Path(manifest.out)
    r0, r1 = sweep["r_ground"], sweep["r_excited"]
    _write_csv(out,
               "f_drive_Hz,arg_r_state0,arg_r_state1,abs_r_state0,abs_r_state1",
               (_fmt(w / TWO_PI, np.angle(a), np.angle(b), abs(a), abs(b))
                for w, a, b in zip(grid, r0, r1)))
    outputs = [out]
    if manifest.plot:
        from .reporting import render_reflection
        fig = out.with_suffix(".png")
        render_reflection(grid / TWO_PI, {"state 0": r0, "state 1": r1}, fig)
        outputs.append(fig)
    summary = {
        "rabi_rad_s": rabi,
        "center_f_Hz": center / TWO_PI,
        "span_Hz": span / TWO_PI,
        "points": int(args.points),
        "levels": [(s.n_transmon, s.n_resonator) for s in run_cfg.subsystems],
        "max_abs_r_dev": float(np.max(np.abs(np.concatenate(
            [np.abs(r0), np.abs(r1)]) - 1.0))),
    }
    return summary, outputs


def _run_dde(manifest, config, args):
    steps = int(args.steps)
    if args.full:
        steps = DDE_FULL_STEPS
        print("warning: full-scale delay run requested; this takes hours",
              file=sys.stderr)
    result = dde_mod.dde_decay(config, steps)
    out = Path(manifest.out)
    _write_csv(out, "t_s,F",
               (_fmt(t, f) for t, f in zip(result.times, result.fidelity)))
    outputs = [out]
    if manifest.plot:
        from .reporting import render_dde
        fig = out.with_suffix(".png")
        render_dde(result.times, result.fidelity, fig)
        outputs.append(fig)
    summary = {
        "n_steps": result.state.n_steps,
        "dt_s": result.state.dt,
        "delay_steps": result.state.k_delay,
        "final_fidelity": float(result.fidelity[-1]),
        "max_norm": float(result.norm.max()),
    }
    if args.ladder:
        ladder = [int(float(x)) for x in args.ladder.split(",")] \
            if args.ladder != "default" else list(DDE_DEFAULT_LADDER)
        report = dde_mod.markov_error_report(config, ladder)
        rep_path = out.with_name(out.stem + "_markov_report.json")
        _atomic_write_text(rep_path, json.dumps(report.as_dict(), indent=1))
        outputs.append(rep_path)
        summary["markov_report"] = report.as_dict()
    return summary, outputs


def _run_optimize(manifest, config, args):
    outdir = Path(manifest.out)
    outdir.mkdir(parents=True, exist_ok=True)
    run_cfg = opt_mod.control_config(config) if not args.full_levels else config
    kappa = run_cfg.subsystems[0].gamma
    sigma_f = args.sigma_f_s if args.sigma_f_s else 0.1 / kappa
    t_final = args.tf_ns * 1e-9
    options = opt_mod.LbfgsOptions(max_iters=args.max_iters)
    result = opt_mod.optimize_pi_pulse(
        run_cfg, n_coeffs=args.nc, t_final=t_final,
        omega_max=TWO_PI * args.omega_max_mhz * 1e6, sigma_f=sigma_f,
        sigma_w=args.sigma_w, n_steps=args.nt, seed=manifest.seed,
        warm_start=args.warm_start, options=options,
        memory_budget=int(args.memory_gb * (1 << 30)),
        target_fidelity=args.target,
    )

    pulse_csv = outdir / "pulse.csv"
    pulse_mod.write_pulse_csv(result.params, pulse_csv)
    coeffs = outdir / "coeffs.json"
    pulse_mod.save_coeffs(result.params, coeffs)
    hist = outdir / "history.csv"
    _write_csv(hist, "iteration,F_tilde,grad_norm",
               (f"{it},{f:.17g},{g:.17g}" for it, f, g in result.history))

    from .liouvillian import build_generator
    from .propagate import product_state_vec
    liou, diags = build_generator(run_cfg, omega_drive=result.omega_drive)
    rho0 = product_state_vec(diags, [0] * len(diags))
    rows = opt_mod.forward_populations(liou, result.params, rho0, diags)
    pops = outdir / "populations.csv"
    _write_csv(pops, "t_s,F_tilde,n_res,n_jqf",
               (_fmt(r.time, r.fidelity_strict, r.n_res, r.n_jqf) for r in rows))
    outputs = [pulse_csv, coeffs, hist, pops]

    if manifest.plot:
        from .reporting import render_history, render_populations, render_pulse
        re_g, _, im_g, _ = result.params.waveform()
        tb = result.params.tables
        times = np.arange(tb.n_steps + 1) * tb.dt
        render_pulse(times, re_g, im_g, outdir / "pulse.png")
        render_populations(np.array([r.time for r in rows]),
                           np.array([r.fidelity_strict for r in rows]),
                           np.array([r.n_res for r in rows]),
                           np.array([r.n_jqf for r in rows]),
                           outdir / "populations.png")
        render_history([h[0] for h in result.history],
                       [h[1] for h in result.history], outdir / "history.png")
        outputs += [outdir / "pulse.png", outdir / "populations.png",
                    outdir / "history.png"]

    summary = {
        "fidelity": result.fidelity,
        "iterations": result.history[-1][0],
        "grad_calls": result.grad_calls,
        "n_steps": result.params.tables.n_steps,
        "n_coeffs": args.nc,
        "omega_drive_Hz": result.omega_drive / TWO_PI,
        "levels": [(s.n_transmon, s.n_resonator) for s in run_cfg.subsystems],
        "table_checksum": result.params.tables.checksum,
    }
    return summary, outputs


def _run_gradcheck(manifest, config, args):
    from .liouvillian import build_generator
    from .propagate import product_state_vec

    levels = [(3, 3) if s.kind == "transmon-with-resonator" else (3, 0)
              for s in config.subsystems]
    small = config.with_truncations(levels)
    diags = diagonalize_all(small)
    omega_drive = float(diags[0].frequencies[1])
    liou, diags = build_generator(small, diags, omega_drive=omega_drive)
    n_coeffs, n_steps, t_final = 4, 200, 5e-9
    kappa = small.subsystems[0].gamma
    tables = pulse_mod.build_tables(n_coeffs, t_final, n_steps, 0.1 / kappa, 0.1)
    # Coefficients carry the natural unit sqrt(t_f/2) set by the basis
    # normalization; the difference step is 1e-6 in that unit.
    scale = math.sqrt(t_final / 2.0)
    rng = np.random.default_rng(manifest.seed)
    params = pulse_mod.PulseParams(scale * rng.uniform(-10, 10, n_coeffs),
                                   scale * rng.uniform(-10, 10, n_coeffs),
                                   TWO_PI * 200e6, tables)
    target = opt_mod.TargetFunctional.transfer_target(liou.dims)
    rho0 = product_state_vec(diags, [0] * len(diags))
    fid, ga, gb = opt_mod.adjoint_gradient(liou, params, rho0, target)

    step = 1e-6 * scale
    x0 = np.concatenate([params.a, params.b])
    grad_fd = np.zeros_like(x0)
    for i in range(x0.size):
        for sgn in (1.0, -1.0):
            x = x0.copy()
            x[i] += sgn * step
            p = pulse_mod.PulseParams(x[:n_coeffs], x[n_coeffs:],
                                      params.omega_max, tables)
            grad_fd[i] += sgn * opt_mod.forward_fidelity(liou, p, rho0, target)
        grad_fd[i] /= 2.0 * step
    grad = np.concatenate([ga, gb])
    rel = float(np.linalg.norm(grad - grad_fd) / np.linalg.norm(grad_fd))
    print(f"gradcheck: fidelity {fid:.8f}, max rel err {rel:.3e} "
          f"({'PASS' if rel <= 1e-6 else 'FAIL'} at 1e-6)")
    summary = {"fidelity": fid, "rel_err": rel, "passed": rel <= 1e-6}
    return summary, []


_RUNNERS = {
    "decay": _run_decay,
    "sweep-jqf": _run_sweep_jqf,
    "reflect": _run_reflect,
    "dde": _run_dde,
    "optimize": _run_optimize,
    "gradcheck": _run_gradcheck,
}


def run(manifest: ExperimentManifest, args) -> int:
    t0 = time.time()
    try:
        config, raw = _load_config(manifest)
        summary, outputs = _RUNNERS[manifest.kind](manifest, config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericsError, dde_mod.ConfigError) as exc:
        print(f"numeric error in {manifest.kind}: {exc}", file=sys.stderr)
        return 1
    wall = time.time() - t0
    record = _run_record(manifest, raw, summary, outputs, wall)
    out = Path(manifest.out)
    run_json = (out / "run.json") if out.is_dir() else \
        out.with_name((out.stem or manifest.kind) + "_run.json")
    _atomic_write_text(run_json, json.dumps(record, indent=1))
    if manifest.kind == "gradcheck" and not summary.get("passed", True):
        return 1
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jqf-sim",
        description="Circuit-QED chain simulator with a saturable decay filter",
    )
    sub = parser.add_subparsers(dest="kind", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", required=True, help="JSON system config")
        if needs_out:
            p.add_argument("--out", required=True,
                           help="output CSV path (or directory for optimize)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
        p.add_argument("--no-jqf", action="store_true",
                       help="drop directly attached transmons from the chain")
        p.add_argument("--no-plot", action="store_true",
                       help="skip figure rendering")
        p.add_argument("--full-levels", action="store_true",
                       help="keep the config truncations instead of the "
                            "experiment-sized defaults")

    p = sub.add_parser("decay", help="free decay of the stored excitation")
    common(p)
    p.add_argument("--steps-per-period", type=int, default=40)

    p = sub.add_parser("sweep-jqf", help="final fidelity vs filter frequency")
    common(p)
    p.add_argument("--f-min-ghz", type=float, default=7.95)
    p.add_argument("--f-max-ghz", type=float, default=8.04)
    p.add_argument("--points", type=int, default=91)
    p.add_argument("--steps-per-period", type=int, default=40)

    p = sub.add_parser("reflect", help="driven reflection-phase sweep")
    common(p)
    p.add_argument("--rabi-mhz", type=float, default=1.0)
    p.add_argument("--power-dbm", type=float, default=None,
                   help="set the probe amplitude from input power instead")
    p.add_argument("--center-ghz", type=float, default=None,
                   help="sweep center (defaults to the dressed cavity)")
    p.add_argument("--span-mhz", type=float, default=6.0)
    p.add_argument("--points", type=int, default=13)
    p.add_argument("--theta-max", type=float, default=2.0)

    p = sub.add_parser("dde", help="single-excitation delay integration")
    common(p)
    p.add_argument("--steps", type=float, default=1e9)
    p.add_argument("--ladder", nargs="?", const="default", default=None,
                   help="run a refinement ladder and write the Markov report")
    p.add_argument("--full", action="store_true",
                   help="use the full-scale 1e12-step run (hours)")

    p = sub.add_parser("optimize", help="transfer-pulse optimization")
    common(p)
    p.add_argument("--nc", type=int, default=100)
    p.add_argument("--tf-ns", type=float, default=50.0)
    p.add_argument("--nt", type=int, default=None,
                   help="RK4 steps (default: detuning rule)")
    p.add_argument("--omega-max-mhz", type=float, default=200.0)
    p.add_argument("--sigma-f-s", type=float, default=None,
                   help="filter width in seconds (default 0.1/kappa_1)")
    p.add_argument("--sigma-w", type=float, default=0.1)
    p.add_argument("--max-iters", type=int, default=300)
    p.add_argument("--target", type=float, default=None,
                   help="stop once this fidelity is reached")
    p.add_argument("--warm-start", action="store_true")
    p.add_argument("--memory-gb", type=float, default=2.0)

    p = sub.add_parser("gradcheck", help="adjoint-vs-finite-difference check")
    common(p, needs_out=False)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    manifest = ExperimentManifest(
        kind=args.kind,
        config_path=args.config,
        out=getattr(args, "out", "."),
        overrides=list(args.set),
        seed=args.seed,
        jobs=args.jobs,
        no_jqf=args.no_jqf,
        plot=not args.no_plot,
    )
    return run(manifest, args)


if __name__ == "__main__":
    sys.exit(main())
