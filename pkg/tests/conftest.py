"""Shared fixtures: reference chain configurations at various truncations."""

import math

import numpy as np
import pytest

from jqf_sim.model import (KIND_BARE, KIND_COMPOSITE, SubsystemSpec,
                           SystemConfig, coupling_from_shift)

TWO_PI = 2.0 * math.pi


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run the long acceptance checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow") or "slow" in config.getoption("-m", ""):
        return
    skip = pytest.mark.skip(reason="slow; enable with --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def reference_coupling() -> float:
    return coupling_from_shift(TWO_PI * 1e6, TWO_PI * 10e9, TWO_PI * 8e9,
                               -TWO_PI * 400e6)


def make_chain(n_aa=5, n_res=6, n_jqf=5, f_jqf=7.994e9, jqf_phase=math.pi,
               with_jqf=True) -> SystemConfig:
    """Reference parameter set: 10 GHz resonator, 8 GHz data transmon,
    1 MHz dispersive shift, 100 MHz filter at half a wavelength."""
    aa = SubsystemSpec(KIND_COMPOSITE, omega_a=TWO_PI * 8e9,
                       alpha=-TWO_PI * 400e6, gamma=TWO_PI * 2e6, phase=0.0,
                       n_transmon=n_aa, n_resonator=n_res,
                       omega_r=TWO_PI * 10e9, g_r=reference_coupling())
    subs = [aa]
    if with_jqf:
        subs.append(SubsystemSpec(KIND_BARE, omega_a=TWO_PI * f_jqf,
                                  alpha=-TWO_PI * 400e6, gamma=TWO_PI * 100e6,
                                  phase=jqf_phase, n_transmon=n_jqf))
    return SystemConfig(tuple(subs))


def purcell_rate(config: SystemConfig) -> float:
    """Analytic effective decay rate of the stored excitation (rad/s)."""
    aa = config.subsystems[0]
    delta = aa.omega_r - aa.omega_a
    theta = 0.5 * math.atan2(aa.g_r, delta / 2.0)
    w11 = 0.5 * (aa.omega_r + aa.omega_a) \
        - math.sqrt((delta / 2.0) ** 2 + aa.g_r**2)
    return math.sin(theta) ** 2 * aa.gamma * (w11 / aa.omega_r)


def dark_fidelity(config: SystemConfig) -> float:
    gamma2 = config.subsystems[1].gamma
    kp = purcell_rate(config)
    return (gamma2 / (kp + gamma2)) ** 2


@pytest.fixture
def chain():
    return make_chain()


@pytest.fixture
def chain_small():
    return make_chain(n_aa=3, n_res=3, n_jqf=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
