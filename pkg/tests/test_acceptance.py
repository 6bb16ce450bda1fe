"""Acceptance suite: one test per exit criterion, each printing a verdict.

Run the quick criteria with plain pytest; the long ones (readout sweep,
pulse optimizations) are marked slow and enabled with ``--run-slow``.
Criteria and tolerances:

1. effective decay rate of the unfiltered chain matches the closed form
   within 1 percent (runtime < 1 min)
2. filtered decay reaches the dark plateau within 2e-5 (runtime < 5 min)
3. filter-frequency sweep peaks at 7.994 GHz within one grid step
4. readout transparency: phase change from adding the filter <= 0.02 rad
   across the sweep for both initial states; empty-resonator photon number
   1.00 +- 0.01; high-power sweep keeps |r| = 1 +- 1e-3
5. adjoint gradient matches finite differences to 1e-6; the one-step map
   composition matches the five-stage update to 1e-12 (runtime < 2 min)
6. transfer-pulse optimization reaches 0.999 at the reference
   hyperparameters; the reduced smoke variant reaches 0.99 in < 30 min
7. delay-equation ladder places the Markov plateau offset in [1e-6, 4e-6]
   with a positive extrapolated long-time rate
8. trace preserved to 1e-10, strict fidelity never exceeds the traced one,
   reruns are byte-identical
"""

import json
import math
import time

import numpy as np
import pytest
import scipy.sparse as sp

from jqf_sim.cli import dressed_cavity_center, main, paper_config_path
from jqf_sim.dde import markov_error_report
from jqf_sim.liouvillian import build_generator
from jqf_sim.model import SubsystemSpec, SystemConfig, diagonalize_all, load_config
from jqf_sim.optimize import (LbfgsOptions, TargetFunctional, adjoint_gradient,
                              control_config, evaluate_pulse_fidelity,
                              forward_fidelity, forward_populations,
                              optimize_pi_pulse)
from jqf_sim.optimize import _StepApplier, _rk4_forward_step
from jqf_sim.propagate import (decay_experiment, jqf_frequency_sweep,
                               product_state_vec, reflection_experiment,
                               reflection_run, reflection_truncations)
from jqf_sim.pulse import PulseParams, build_tables

from conftest import TWO_PI, dark_fidelity, make_chain, purcell_rate

KAPPA = TWO_PI * 2e6


def _report(number: int, passed: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}")
    assert passed, f"criterion {number}: {detail}"


@pytest.fixture(scope="module")
def paper():
    return load_config(paper_config_path())


@pytest.fixture(scope="module")
def decay_with_filter(paper):
    return decay_experiment(paper)


# ---------------------------------------------------------------------------

def test_criterion_1_purcell_rate(paper):
    t0 = time.time()
    bare = paper.without_bare_transmons()
    result = decay_experiment(bare)
    kp = purcell_rate(paper)
    assert abs(kp / TWO_PI - 4753.4) < 1.0  # kHz-scale closed-form anchor
    mask = result.times > 0
    rate = -np.polyfit(result.times[mask], np.log(result.fidelity[mask]), 1)[0]
    wall = time.time() - t0
    rel = abs(rate - kp) / kp
    _report(1, rel <= 0.01 and wall < 60.0,
            f"fitted rate {rate / TWO_PI:.1f} Hz*2pi vs {kp / TWO_PI:.1f}, "
            f"rel err {rel:.2e}, wall {wall:.1f}s")


def test_criterion_2_dark_plateau(paper, decay_with_filter):
    t0 = time.time()
    result = decay_with_filter
    f_dark = dark_fidelity(paper)
    late = result.times >= 100.0 / paper.subsystems[1].gamma
    dev = float(np.max(np.abs(result.fidelity[late] - f_dark)))
    wall = time.time() - t0
    _report(2, dev <= 2e-5 and wall < 300.0,
            f"plateau deviation {dev:.2e} from {f_dark:.7f}, wall {wall:.1f}s")


def test_criterion_3_filter_tuning(paper):
    freqs_hz = np.linspace(7.95e9, 8.04e9, 91)
    finals = jqf_frequency_sweep(paper, TWO_PI * freqs_hz, jobs=2)
    peak = freqs_hz[int(np.argmax(finals))]
    step = freqs_hz[1] - freqs_hz[0]
    _report(3, abs(peak - 7.994e9) <= step + 1e-3,
            f"peak at {peak / 1e9:.4f} GHz (step {step / 1e6:.1f} MHz)")


# ---------------------------------------------------------------------------

def test_criterion_4_empty_resonator(paper):
    empty = SystemConfig((SubsystemSpec(
        "transmon-with-resonator", omega_a=TWO_PI * 8e9,
        alpha=-TWO_PI * 400e6, gamma=TWO_PI * 2e6, phase=0.0, n_transmon=2,
        n_resonator=16, omega_r=TWO_PI * 10e9, g_r=0.0),))
    res = reflection_run(empty, TWO_PI * 10e9, TWO_PI * 1e6)
    n = float(res.n_res[-1])
    _report(4, abs(n - 1.0) <= 0.01,
            f"empty-resonator steady photon number {n:.4f}")


def _phase_distance(a, b):
    d = np.abs(a - b)
    return np.minimum(d, 2.0 * math.pi - d)


@pytest.mark.slow
def test_criterion_4_readout_transparency(paper):
    rabi = TWO_PI * 1e6
    cfg = reflection_truncations(paper, rabi)
    cfg_no = reflection_truncations(paper.without_bare_transmons(), rabi)
    center = dressed_cavity_center(cfg)
    grid = np.linspace(center - TWO_PI * 3e6, center + TWO_PI * 3e6, 13)
    with_f = reflection_experiment(cfg, grid, rabi, jobs=2)
    without = reflection_experiment(cfg_no, grid, rabi, jobs=2)
    d0 = _phase_distance(np.angle(with_f["r_ground"]),
                         np.angle(without["r_ground"]))
    d1 = _phase_distance(np.angle(with_f["r_excited"]),
                         np.angle(without["r_excited"]))
    # Side check: the state-dependent phase contrast is present.
    sep = _phase_distance(np.angle(with_f["r_ground"]),
                          np.angle(with_f["r_excited"]))
    _report(4, float(d0.max()) <= 0.02 and float(d1.max()) <= 0.02
            and float(sep.max()) > 0.5,
            f"max filter-induced phase change {max(d0.max(), d1.max()):.4f} "
            f"rad (state contrast {sep.max():.2f} rad)")


@pytest.mark.slow
def test_criterion_4_high_power_unitarity(paper):
    rabi = TWO_PI * 4e6
    cfg = reflection_truncations(paper, rabi)
    assert cfg.subsystems[0].n_resonator == 40  # enlarged truncation
    center = dressed_cavity_center(cfg)
    grid = center + TWO_PI * np.array([-1e6, 0.0, 1e6])
    sweep = reflection_experiment(cfg, grid, rabi, jobs=2)
    devs = np.abs(np.concatenate([np.abs(sweep["r_ground"]),
                                  np.abs(sweep["r_excited"])]) - 1.0)
    _report(4, float(devs.max()) <= 1e-3,
            f"high-power |r| deviation {devs.max():.2e} over {grid.size} points")


# ---------------------------------------------------------------------------

def test_criterion_5_adjoint(paper):
    t0 = time.time()
    small = paper.with_truncations([(3, 3), (3, 0)])
    diags = diagonalize_all(small)
    wd = float(diags[0].frequencies[1])
    liou, diags = build_generator(small, diags, omega_drive=wd)
    n_coeffs, n_steps, t_final = 4, 200, 5e-9
    tables = build_tables(n_coeffs, t_final, n_steps, 0.1 / KAPPA, 0.1)
    # Coefficient unit sqrt(t_f/2) from the basis normalization; the
    # difference step is 1e-6 in that unit.
    scale = math.sqrt(t_final / 2.0)
    rng = np.random.default_rng(0)
    params = PulseParams(scale * rng.uniform(-10, 10, n_coeffs),
                         scale * rng.uniform(-10, 10, n_coeffs),
                         TWO_PI * 200e6, tables)
    target = TargetFunctional.transfer_target(liou.dims)
    rho0 = product_state_vec(diags, [0, 0])
    fid, ga, gb = adjoint_gradient(liou, params, rho0, target)

    x0 = np.concatenate([params.a, params.b])
    step = 1e-6 * scale
    grad_fd = np.zeros_like(x0)
    for i in range(x0.size):
        for sgn in (1.0, -1.0):
            x = x0.copy()
            x[i] += sgn * step
            p = PulseParams(x[:n_coeffs], x[n_coeffs:], params.omega_max,
                            tables)
            grad_fd[i] += sgn * forward_fidelity(liou, p, rho0, target)
        grad_fd[i] /= 2.0 * step
    grad = np.concatenate([ga, gb])
    rel = float(np.linalg.norm(grad - grad_fd) / np.linalg.norm(grad_fd))

    # One-step composition identity against the five-stage update.
    ap = _StepApplier(liou, params)
    l0 = liou.superoperator("drift")
    tre = liou.superoperator("drive_re")
    tim = liou.superoperator("drive_im")
    s1, s2, s3 = ap.stage_amps(17)
    mk = lambda s: sp.csr_matrix((l0 + s[0] * tre + s[1] * tim) * ap.dt)
    l1, l2, l3 = mk(s1), mk(s2), mk(s3)
    ident = sp.identity(liou.dim**2, format="csr", dtype=complex)
    k_n = ident + l1 / 6 + (l2 + l2 @ l1 / 2) / 3 \
        + (l2 + l2 @ l2 / 2 + l2 @ l2 @ l1 / 4) / 3 \
        + (l3 + l3 @ l2 + l3 @ l2 @ l2 / 2 + l3 @ l2 @ l2 @ l1 / 4) / 6
    vec = rng.standard_normal(liou.dim**2) + 1j * rng.standard_normal(liou.dim**2)
    state = vec.reshape(liou.dim, liou.dim).copy()
    work = tuple(np.empty_like(state) for _ in range(3))
    _rk4_forward_step(ap, state, 17, work)
    comp = float(np.linalg.norm(k_n @ vec - state.reshape(-1))
                 / np.linalg.norm(k_n @ vec))
    wall = time.time() - t0
    _report(5, rel <= 1e-6 and comp <= 1e-12 and wall < 120.0,
            f"gradient rel err {rel:.2e}, composition residual {comp:.2e}, "
            f"wall {wall:.1f}s")


# ---------------------------------------------------------------------------

SMOKE_LEVELS = ((3, 4), (3, 0))


@pytest.mark.slow
def test_criterion_6_smoke_optimization(paper):
    t0 = time.time()
    cfg = paper.with_truncations(list(SMOKE_LEVELS))
    res = optimize_pi_pulse(cfg, n_coeffs=20, t_final=50e-9,
                            omega_max=TWO_PI * 200e6, sigma_f=0.1 / KAPPA,
                            n_steps=2048, seed=0, warm_start=True,
                            options=LbfgsOptions(max_iters=200),
                            target_fidelity=0.992)
    wall = time.time() - t0
    _report(6, res.fidelity >= 0.99 and wall < 1800.0,
            f"smoke variant reached {res.fidelity:.5f} in "
            f"{res.history[-1][0]} iterations, {wall / 60:.1f} min")


@pytest.mark.slow
def test_criterion_6_reference_optimization(paper):
    cfg = control_config(paper)
    res = optimize_pi_pulse(cfg, n_coeffs=100, t_final=50e-9,
                            omega_max=TWO_PI * 200e6, sigma_f=0.1 / KAPPA,
                            sigma_w=0.1, n_steps=4096, seed=0,
                            warm_start=True,
                            options=LbfgsOptions(max_iters=220),
                            target_fidelity=0.9992)
    # Convergence gates: doubled step count and enlarged truncation.
    fine = evaluate_pulse_fidelity(cfg, res.params, res.omega_drive,
                                   n_steps=8192)
    big = evaluate_pulse_fidelity(
        paper.with_truncations([(5, 6), (6, 0)]), res.params,
        res.omega_drive, n_steps=8192)
    shift = abs(big - fine)
    # Saturation mechanism: the filter is driven well above its linear range.
    liou, diags = build_generator(cfg, omega_drive=res.omega_drive)
    rows = forward_populations(liou, res.params,
                               product_state_vec(diags, [0, 0]), diags)
    max_filter_pop = max(r.n_jqf for r in rows)
    _report(6, res.fidelity >= 0.999 and big >= 0.999 and shift < 5e-4
            and max_filter_pop > 0.1,
            f"reference optimization reached {res.fidelity:.5f} "
            f"(refined grid {fine:.5f}, enlarged levels {big:.5f}, "
            f"shift {shift:.1e}, peak filter population {max_filter_pop:.2f})")


# ---------------------------------------------------------------------------

def test_criterion_7_markov_error(paper):
    report = markov_error_report(paper, [10**8, 3 * 10**8, 10**9])
    offset = report.extrapolated_offset
    _report(7, 1e-6 <= offset <= 4e-6 and report.extrapolated_rate > 0.0,
            f"extrapolated plateau offset {offset:.2e}, "
            f"extrapolated rate {report.extrapolated_rate:+.3f}/s, "
            f"order {report.order:.2f}")


def test_criterion_8_structural(paper, decay_with_filter, tmp_path):
    result = decay_with_filter
    trace_ok = result.max_trace_error <= 1e-10
    order_ok = bool(np.all(result.fidelity_strict <= result.fidelity + 1e-9))
    outs = []
    for name in ("a.csv", "b.csv"):
        out = tmp_path / name
        assert main(["decay", "--config", str(paper_config_path()), "--out",
                     str(out), "--no-plot", "--seed", "3"]) == 0
        outs.append(out.read_bytes())
    identical = outs[0] == outs[1]
    _report(8, trace_ok and order_ok and identical,
            f"trace error {result.max_trace_error:.1e}, strict<=traced "
            f"{order_ok}, byte-identical reruns {identical}")
