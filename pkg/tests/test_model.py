"""Tests for the configuration layer and subsystem diagonalization."""

import math

import numpy as np
import pytest

from jqf_sim.model import (KIND_BARE, KIND_COMPOSITE, ConfigError,
                           DiagonalizedSubsystem, DomainError, SubsystemSpec,
                           SystemConfig, config_from_dict, coupling_from_shift,
                           diagonalize, dispersive_shift)

from conftest import TWO_PI, make_chain, reference_coupling


# ---------------------------------------------------------------------------
# Dispersive shift and its inversion
# ---------------------------------------------------------------------------

class TestDispersiveShift:
    W_R = TWO_PI * 10e9
    W_A = TWO_PI * 8e9
    ALPHA = -TWO_PI * 400e6

    def test_reference_value(self):
        g = TWO_PI * 109.544e6
        chi = dispersive_shift(g, self.W_R, self.W_A, self.ALPHA)
        assert abs(chi / TWO_PI - 1.0e6) < 1e3  # within 0.001 MHz

    def test_zero_coupling(self):
        assert dispersive_shift(0.0, self.W_R, self.W_A, self.ALPHA) == 0.0

    def test_two_level_limit(self):
        # Effectively infinite anharmonicity reduces to g^2 / detuning.
        g = TWO_PI * 100e6
        chi = dispersive_shift(g, self.W_R, self.W_A, -TWO_PI * 1e15)
        assert abs(chi - g**2 / (self.W_R - self.W_A)) < 1e-3 * abs(chi)

    def test_degenerate_denominators(self):
        with pytest.raises(DomainError, match="omega_r - omega_a"):
            dispersive_shift(1.0, self.W_A, self.W_A, self.ALPHA)
        with pytest.raises(DomainError, match="alpha"):
            dispersive_shift(1.0, 10.0, 8.0, 2.0)  # detuning equals alpha

    def test_inversion_reference_value(self):
        g = coupling_from_shift(TWO_PI * 1e6, self.W_R, self.W_A, self.ALPHA)
        assert abs(g / TWO_PI - 109.544e6) < 1e3

    def test_inversion_zero(self):
        assert coupling_from_shift(0.0, self.W_R, self.W_A, self.ALPHA) == 0.0

    def test_inversion_no_real_solution(self):
        with pytest.raises(DomainError):
            coupling_from_shift(-TWO_PI * 1e6, self.W_R, self.W_A, self.ALPHA)

    def test_round_trip_against_bisection(self, rng):
        # Closed-form inversion vs a bisection oracle on random valid inputs.
        for _ in range(100):
            w_r = TWO_PI * rng.uniform(8e9, 12e9)
            w_a = TWO_PI * rng.uniform(5e9, 7.5e9)
            alpha = -TWO_PI * rng.uniform(1e8, 6e8)
            chi = TWO_PI * rng.uniform(1e5, 5e6)
            g = coupling_from_shift(chi, w_r, w_a, alpha)
            back = dispersive_shift(g, w_r, w_a, alpha)
            assert abs(back - chi) <= 1e-10 * chi

            lo, hi = 0.0, TWO_PI * 1e10
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if dispersive_shift(mid, w_r, w_a, alpha) < chi:
                    lo = mid
                else:
                    hi = mid
            assert abs(g - 0.5 * (lo + hi)) <= 1e-6 * g


# ---------------------------------------------------------------------------
# Diagonalization
# ---------------------------------------------------------------------------

class TestDiagonalize:
    def test_single_excitation_frequency(self, chain):
        d = diagonalize(chain.subsystems[0])
        aa = chain.subsystems[0]
        # Closed form for the lower hybridized single-excitation state.
        expected = 0.5 * (aa.omega_r + aa.omega_a) - math.sqrt(
            ((aa.omega_r - aa.omega_a) / 2.0) ** 2 + aa.g_r**2)
        assert abs(d.frequencies[1] - expected) < 1e-6 * abs(expected)
        assert abs(d.frequencies[1] / TWO_PI - 7.994018e9) < 1e3

    def test_frequency_ratio(self, chain):
        d = diagonalize(chain.subsystems[0])
        assert abs(d.frequencies[1] / chain.subsystems[0].omega_r
                   - 0.7994) < 5e-5

    def test_bare_transmon_ladder(self, chain):
        jqf = chain.subsystems[1]
        d = diagonalize(jqf)
        assert d.frequencies[1] == pytest.approx(jqf.omega_a)
        assert d.frequencies[2] == pytest.approx(2 * jqf.omega_a + jqf.alpha)
        assert d.lowering[0, 1] == pytest.approx(1.0)
        assert d.lowering[1, 2] == pytest.approx(math.sqrt(2.0))

    def test_mixing_angle(self, chain):
        aa = chain.subsystems[0]
        theta = 0.5 * math.atan2(aa.g_r, (aa.omega_r - aa.omega_a) / 2.0)
        assert abs(theta - 0.054554) < 1e-5
        d = diagonalize(aa)
        assert abs(abs(d.lowering[0, 1]) ** 2 - math.sin(theta) ** 2) < 1e-12
        assert abs(math.sin(theta) ** 2 - 2.9732e-3) < 1e-6

    def test_excitation_ordering_and_selection_rule(self, chain):
        d = diagonalize(chain.subsystems[0])
        assert np.all(np.diff(d.excitations) >= 0)
        for j in range(d.dim):
            for jp in range(d.dim):
                if d.excitations[jp] != d.excitations[j] + 1:
                    assert d.lowering[j, jp] == 0.0  # exact, by construction

    def test_block_frequency_ordering(self, chain):
        d = diagonalize(chain.subsystems[0])
        for n in np.unique(d.excitations):
            block = d.frequencies[d.excitations == n]
            assert np.all(np.diff(block) >= 0)

    def test_lowering_completeness(self, chain):
        # Sum over |C|^2 down one excitation equals the bare photon number.
        d = diagonalize(chain.subsystems[0])
        num_bare = np.array([na for (nb, na) in d.bare_labels], dtype=float)
        for jp in range(d.dim):
            expect = float(num_bare @ (np.abs(d.bare_vectors[:, jp]) ** 2))
            got = float(np.sum(np.abs(d.lowering[:, jp]) ** 2))
            assert abs(got - expect) <= 1e-10 * max(expect, 1e-30)

    def test_eigen_residual(self, chain):
        aa = chain.subsystems[0]
        d = diagonalize(aa)
        # Rebuild the full bare-basis Hamiltonian and test every eigenpair.
        dim = d.dim
        idx = {lab: i for i, lab in enumerate(d.bare_labels)}
        h = np.zeros((dim, dim))
        for (nb, na), i in idx.items():
            h[i, i] = aa.omega_a * nb + 0.5 * aa.alpha * nb * (nb - 1) \
                + aa.omega_r * na
            if (nb + 1, na - 1) in idx:
                k = idx[(nb + 1, na - 1)]
                g = aa.g_r * math.sqrt(nb + 1) * math.sqrt(na)
                h[i, k] = h[k, i] = g
        norm_h = np.linalg.norm(h, 2)
        for j in range(dim):
            v = d.bare_vectors[:, j]
            res = np.linalg.norm(h @ v - d.frequencies[j] * v)
            assert res <= 1e-10 * norm_h

    def test_excitation_cap(self, chain):
        d = diagonalize(chain.subsystems[0], excitation_cap=1)
        assert d.dim == 3
        full = diagonalize(chain.subsystems[0])
        assert np.allclose(d.frequencies, full.frequencies[:3])
        with pytest.raises(ConfigError, match="excitation cap"):
            diagonalize(chain.subsystems[1], excitation_cap=99)


# ---------------------------------------------------------------------------
# Config validation and file format
# ---------------------------------------------------------------------------

def _paper_dict():
    return {
        "subsystems": [
            {"kind": KIND_COMPOSITE, "f_a_Hz": 8e9, "alpha_Hz": -400e6,
             "f_r_Hz": 10e9, "chi_Hz": 1e6, "Gamma_Hz": 2e6,
             "phase_over_pi": 0.0, "n_transmon": 5, "n_resonator": 6},
            {"kind": KIND_BARE, "f_a_Hz": 7.994e9, "alpha_Hz": -400e6,
             "Gamma_Hz": 100e6, "phase_over_pi": 1.0, "n_transmon": 5},
        ],
        "reference_index": 1,
    }


class TestConfig:
    def test_chi_routing(self):
        cfg = config_from_dict(_paper_dict())
        assert cfg.subsystems[0].g_r == pytest.approx(reference_coupling())

    def test_unknown_key_named(self):
        data = _paper_dict()
        data["bogus_key"] = 1
        with pytest.raises(ConfigError, match="bogus_key"):
            config_from_dict(data)
        data = _paper_dict()
        data["subsystems"][0]["surprise"] = 2
        with pytest.raises(ConfigError, match="surprise"):
            config_from_dict(data)

    def test_exactly_one_coupling_key(self):
        data = _paper_dict()
        data["subsystems"][0]["g_r_Hz"] = 1e8
        with pytest.raises(ConfigError, match="exactly one"):
            config_from_dict(data)
        del data["subsystems"][0]["g_r_Hz"]
        del data["subsystems"][0]["chi_Hz"]
        with pytest.raises(ConfigError, match="exactly one"):
            config_from_dict(data)

    def test_first_subsystem_at_origin(self):
        data = _paper_dict()
        data["subsystems"][0]["phase_over_pi"] = 0.5
        with pytest.raises(ConfigError, match="origin"):
            config_from_dict(data)

    def test_positions_non_decreasing(self):
        aa = make_chain().subsystems[0]
        jqf = make_chain().subsystems[1]
        bad = SubsystemSpec(KIND_BARE, omega_a=jqf.omega_a, alpha=jqf.alpha,
                            gamma=jqf.gamma, phase=0.5, n_transmon=3)
        worse = SubsystemSpec(KIND_BARE, omega_a=jqf.omega_a, alpha=jqf.alpha,
                              gamma=jqf.gamma, phase=0.2, n_transmon=3)
        with pytest.raises(ConfigError, match="non-decreasing"):
            SystemConfig((aa, bad, worse))

    def test_truncation_minimum(self):
        with pytest.raises(ConfigError, match="n_transmon"):
            SubsystemSpec(KIND_BARE, omega_a=1.0, alpha=-0.1, gamma=0.1,
                          phase=0.0, n_transmon=1)

    def test_rate_positivity(self):
        with pytest.raises(ConfigError):
            SubsystemSpec(KIND_BARE, omega_a=1.0, alpha=-0.1, gamma=0.0,
                          phase=0.0, n_transmon=2)

    def test_without_bare_transmons(self, chain):
        stripped = chain.without_bare_transmons()
        assert len(stripped.subsystems) == 1
        assert stripped.subsystems[0].kind == KIND_COMPOSITE
