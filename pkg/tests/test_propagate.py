"""Tests for the RK4 propagator and the canned experiments."""

import math

import numpy as np
import pytest
import scipy.linalg

from jqf_sim.liouvillian import build_generator
from jqf_sim.model import KIND_COMPOSITE, SubsystemSpec, SystemConfig
from jqf_sim.propagate import (NumericsError, ObservableSet, PropagationGrid,
                               constant_action, decay_experiment,
                               jqf_frequency_sweep, product_state_vec,
                               propagate_sampled, reflection_run,
                               reflection_truncations, rk4_step)

from conftest import TWO_PI, dark_fidelity, make_chain, purcell_rate


def empty_resonator(n_res=16) -> SystemConfig:
    """Resonator with a decoupled transmon: standard single-cavity physics."""
    return SystemConfig((SubsystemSpec(
        KIND_COMPOSITE, omega_a=TWO_PI * 8e9, alpha=-TWO_PI * 400e6,
        gamma=TWO_PI * 2e6, phase=0.0, n_transmon=2, n_resonator=n_res,
        omega_r=TWO_PI * 10e9, g_r=0.0),))


# ---------------------------------------------------------------------------
# RK4 stepper
# ---------------------------------------------------------------------------

class TestRk4:
    def test_scalar_exponential(self):
        # One step of rho' = -rho at dt = 0.1: the degree-4 Taylor value.
        def apply_fn(t, x, out):
            np.multiply(x, -1.0, out=out)

        rho = np.array([1.0 + 0.0j])
        out = rk4_step(apply_fn, rho, 0.0, 0.1)
        assert out[0].real == pytest.approx(0.9048375, abs=1e-12)

    def test_matches_matrix_exponential(self, rng):
        # Three-level toy generator with dt * |L| = 1e-2 against expm.
        a = rng.standard_normal((9, 9)) + 1j * rng.standard_normal((9, 9))
        a /= np.linalg.norm(a, 2)
        dt = 1e-2
        rho = rng.standard_normal(9) + 1j * rng.standard_normal(9)

        def apply_fn(t, x, out):
            out[:] = a @ x

        got = rk4_step(apply_fn, rho, 0.0, dt)
        expect = scipy.linalg.expm(a * dt) @ rho
        assert np.linalg.norm(got - expect) <= 1e-8 * np.linalg.norm(expect)

    def test_nan_detection(self):
        def apply_fn(t, x, out):
            out[:] = np.nan

        with pytest.raises(NumericsError):
            rk4_step(apply_fn, np.ones(2, dtype=complex), 0.0, 0.1)

    def test_trace_drift(self):
        # The default decay grid takes over 1e4 steps.
        cfg = make_chain()
        result = decay_experiment(cfg, n_samples=100)
        assert result.grid.n_steps >= 1e4
        assert result.max_trace_error <= 1e-10


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

class TestGrid:
    def test_detuning_rule(self, chain):
        liou, _ = build_generator(chain.with_truncations([(2, 2), (2, 0)]))
        grid = PropagationGrid.from_detunings(liou, 1e-7)
        w_max = float(np.max(np.abs(liou.detunings)))
        assert grid.dt <= TWO_PI / (40.0 * w_max)
        assert grid.n_steps % grid.stride == 0

    def test_halving_convergence_gate(self):
        # Halving the step count moves the final fidelity below 1e-8.
        cfg = make_chain()
        fine = decay_experiment(cfg, t_final=1e-7, n_samples=10)
        coarse = decay_experiment(cfg, t_final=1e-7, n_samples=10,
                                  steps_per_period=20)
        assert abs(fine.fidelity[-1] - coarse.fidelity[-1]) < 1e-8

    def test_stride_validation(self):
        with pytest.raises(Exception):
            PropagationGrid(1.0, 10, stride=3)


# ---------------------------------------------------------------------------
# Decay experiment
# ---------------------------------------------------------------------------

class TestDecay:
    def test_purcell_rate_without_filter(self, chain):
        cfg = chain.without_bare_transmons()
        result = decay_experiment(cfg)
        kp = purcell_rate(chain)
        mask = result.times > 0
        rate = -np.polyfit(result.times[mask], np.log(result.fidelity[mask]),
                           1)[0]
        assert abs(rate - kp) <= 0.01 * kp
        assert result.fidelity[0] == pytest.approx(1.0, abs=1e-12)
        # Final value against the analytic exponential.
        assert result.fidelity[-1] == pytest.approx(
            math.exp(-kp * result.times[-1]), abs=1e-6)

    def test_dark_plateau_with_filter(self, chain):
        result = decay_experiment(chain)
        f_dark = dark_fidelity(chain)
        late = result.times >= 100.0 / chain.subsystems[1].gamma
        assert np.all(np.abs(result.fidelity[late] - f_dark) <= 2e-5)

    def test_monotone_up_to_artifact(self, chain):
        result = decay_experiment(chain)
        assert np.max(np.diff(result.fidelity)) <= 5e-6

    def test_fidelity_bounds_and_ordering(self, chain):
        result = decay_experiment(chain)
        assert np.all(result.fidelity <= 1.0 + 1e-9)
        assert np.all(result.fidelity_strict <= result.fidelity + 1e-9)

    def test_level_reduction_is_exact(self, chain):
        # Undriven single-excitation dynamics cannot reach the truncated
        # sectors, so reduced and full truncations must agree.
        short = 2e-8
        reduced = decay_experiment(chain, t_final=short, n_samples=50)
        full = decay_experiment(chain, t_final=short, n_samples=50,
                                reduce_levels=False)
        # Match at common sample times (grids differ; compare the endpoints).
        assert abs(reduced.fidelity[-1] - full.fidelity[-1]) < 1e-9
        assert abs(reduced.fidelity_strict[-1] - full.fidelity_strict[-1]) < 1e-9

    def test_determinism(self, chain):
        r1 = decay_experiment(chain, t_final=5e-8)
        r2 = decay_experiment(chain, t_final=5e-8)
        assert np.array_equal(r1.fidelity, r2.fidelity)


def test_sweep_points_bracket_peak(chain):
    freqs = TWO_PI * np.array([7.97e9, 7.994e9, 8.02e9])
    finals = jqf_frequency_sweep(chain, freqs)
    assert finals[1] > finals[0] and finals[1] > finals[2]
    # Far detuned, the filter is ineffective: no-filter value.
    far = jqf_frequency_sweep(chain, TWO_PI * np.array([9.5e9]))[0]
    bare = decay_experiment(chain.without_bare_transmons()).fidelity[-1]
    assert abs(far - bare) < 2e-3


# ---------------------------------------------------------------------------
# Reflection
# ---------------------------------------------------------------------------

class TestReflection:
    RABI = TWO_PI * 1e6

    def test_empty_resonator_photon_number(self):
        res = reflection_run(empty_resonator(), TWO_PI * 10e9, self.RABI)
        assert abs(res.n_res[-1] - 1.0) <= 0.01
        assert abs(abs(res.reflection[-1]) - 1.0) <= 1e-3

    def test_steady_state_unitarity(self):
        # Null-space steady state: all input power reflects.
        for det in (0.0, 1.5e6, -2.5e6):
            res = reflection_run(empty_resonator(), TWO_PI * (10e9 + det),
                                 self.RABI, steady_state=True)
            assert abs(abs(res.reflection[-1]) - 1.0) <= 1e-6

    def test_against_analytic_cavity(self):
        # r = (i*delta - keff/2) / (i*delta + keff/2) for the bare cavity.
        kappa = TWO_PI * 2e6
        for det in (0.7e6, -1.8e6, 3.0e6):
            wd = TWO_PI * (10e9 + det)
            res = reflection_run(empty_resonator(), wd, self.RABI,
                                 steady_state=True)
            delta = TWO_PI * 10e9 - wd
            alpha = -1j * self.RABI / (1j * delta + kappa / 2.0)
            expected = 1.0 - 1j * (kappa / self.RABI) * alpha
            assert res.reflection[-1] == pytest.approx(expected, rel=1e-10)

    def test_zero_drive_rejected(self):
        with pytest.raises(Exception, match="zero drive"):
            reflection_run(empty_resonator(), TWO_PI * 10e9, 0.0)

    def test_truncation_sizing(self, chain):
        cfg = reflection_truncations(chain, self.RABI)
        assert cfg.subsystems[0].n_resonator == 16  # one photon expected
        cfg4 = reflection_truncations(chain, 4 * self.RABI)
        assert cfg4.subsystems[0].n_resonator == 40  # sixteen photons


@pytest.mark.slow
def test_full_system_steady_unitarity(chain):
    # With the filter present the pinned-wave-vector approximation breaks
    # exact input-output unitarity near resonance at the 1e-4 level; the
    # single-cavity case above meets 1e-6.
    rabi = TWO_PI * 1e6
    cfg = chain.with_truncations([(3, 10), (2, 0)])
    from jqf_sim.cli import dressed_cavity_center
    center = dressed_cavity_center(cfg)
    for det in (-2e6, 0.0, 2e6):
        res = reflection_run(cfg, center + TWO_PI * det, rabi,
                             steady_state=True)
        assert abs(abs(res.reflection[-1]) - 1.0) <= 1e-3
