"""Single-excitation delay integrator and the Markov-error estimate.

Without the phase-factor (Markov) approximation, tracing out the line leaves
delay differential equations for the three single-excitation amplitudes:
the two eigenstates of the resonator-coupled transmon and the filter
excitation.  Cross terms are delayed by one line transit, the filter's
mirror self-term by the round trip.  Euler integration with the step an
exact divisor of the transit time avoids any interpolation of the history.

Comparing the late-time plateau of this integrator against the
master-equation plateau quantifies the Markov approximation error; a
refinement ladder with Richardson extrapolation removes the leading
first-order Euler error from the estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._kernels import dde_euler
from .liouvillian import XI_MODE_FREE, build_xi
from .model import (KIND_BARE, KIND_COMPOSITE, ConfigError, SystemConfig,
                    diagonalize)


@dataclass(frozen=True)
class DdeState:
    """Integration setup: grid, delays in steps, and coefficient matrix."""

    dt: float
    n_steps: int
    k_delay: int
    stride: int
    local: np.ndarray
    delayed: dict

    @property
    def t_final(self) -> float:
        return self.dt * self.n_steps


@dataclass
class DdeResult:
    times: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b: np.ndarray
    state: DdeState

    @property
    def fidelity(self) -> np.ndarray:
        return np.abs(self.a1) ** 2

    @property
    def norm(self) -> np.ndarray:
        return np.abs(self.a1) ** 2 + np.abs(self.a2) ** 2 + np.abs(self.b) ** 2


def _paper_topology(config: SystemConfig):
    if len(config.subsystems) != 2 \
            or config.subsystems[0].kind != KIND_COMPOSITE \
            or config.subsystems[1].kind != KIND_BARE:
        raise ConfigError(
            "delay integration expects one resonator-coupled transmon at the "
            "origin plus one directly attached transmon"
        )
    return config.subsystems


def dde_coefficients(config: SystemConfig) -> tuple[np.ndarray, dict, float]:
    """Coefficient matrix and delayed couplings of the three amplitudes.

    Amplitudes rotate at the reference transmon frequency.  The propagation
    phase of every delayed term is evaluated at that same reference
    frequency, matching the delay encoded by the stored position phase.
    Coefficients follow from the single-excitation restriction of the
    line-mediated couplings; the mirror self-term keeps only half the
    instantaneous rate, the other half arriving after the round trip.
    """
    aa, jqf = _paper_topology(config)
    d1 = diagonalize(aa, excitation_cap=1)
    d2 = diagonalize(jqf, excitation_cap=1)
    w_rot = config.phase_reference_frequency

    c01 = d1.lowering[0, 1]
    c02 = d1.lowering[0, 2]
    c2 = d2.lowering[0, 1]
    w11 = d1.frequencies[1]
    w12 = d1.frequencies[2]
    w21 = d2.frequencies[1]
    kappa, gamma = aa.gamma, jqf.gamma
    wr, wa2 = aa.omega_ref, jqf.omega_ref
    phase = config.wave_phase(w_rot, jqf.phase)
    hop = np.exp(1j * phase)

    cross = math.sqrt(kappa * gamma) / 2.0

    local = np.zeros((3, 3), dtype=complex)
    local[0, 0] = -1j * (w11 - w_rot) - abs(c01) ** 2 * (kappa / 2.0) * (w11 / wr)
    local[0, 1] = -np.conj(c01) * c02 * (kappa / 2.0) * (w12 / wr)
    local[1, 1] = -1j * (w12 - w_rot) - abs(c02) ** 2 * (kappa / 2.0) * (w12 / wr)
    local[1, 0] = -np.conj(c02) * c01 * (kappa / 2.0) * (w11 / wr)
    local[2, 2] = -1j * (w21 - w_rot) \
        - abs(c2) ** 2 * (gamma / 4.0) * (w21 / wa2)

    delayed = {
        "a1_from_b": -np.conj(c01) * c2 * cross * (w21 / math.sqrt(wr * wa2)) * hop,
        "a2_from_b": -np.conj(c02) * c2 * cross * (w21 / math.sqrt(wr * wa2)) * hop,
        "b_from_a1": -np.conj(c2) * c01 * cross * (w11 / math.sqrt(wr * wa2)) * hop,
        "b_from_a2": -np.conj(c2) * c02 * cross * (w12 / math.sqrt(wr * wa2)) * hop,
        "b_mirror": -abs(c2) ** 2 * (gamma / 4.0) * (w21 / wa2) * hop * hop,
    }
    tau = jqf.phase / w_rot
    return local, delayed, tau


def plan_grid(config: SystemConfig, n_steps: int, t_final: float | None = None,
              n_samples: int = 2000) -> DdeState:
    """Choose a step that divides the transit time exactly.

    The requested step count is adjusted so the one-way delay is an integer
    number of steps and the horizon an integer number of delays; the final
    time moves by at most one transit (tens of picoseconds).
    """
    local, delayed, tau = dde_coefficients(config)
    if t_final is None:
        t_final = 10.0 / config.subsystems[0].gamma
    if tau == 0.0:
        k_delay = 0
        dt = t_final / n_steps
        n = n_steps
    else:
        k_delay = max(1, round(n_steps * tau / t_final))
        dt = tau / k_delay
        n = k_delay * max(1, math.ceil(t_final / tau))
    stride = max(1, n // n_samples)
    n = stride * math.ceil(n / stride)
    if k_delay and n % k_delay != 0:
        n = k_delay * math.ceil(n / k_delay)
        stride = max(1, n // n_samples)
        while n % stride != 0:
            stride -= 1
    return DdeState(dt=dt, n_steps=n, k_delay=k_delay, stride=stride,
                    local=local, delayed=delayed)


def dde_decay(config: SystemConfig, n_steps: int, t_final: float | None = None,
              n_samples: int = 2000, enable_delays: bool = True) -> DdeResult:
    """Integrate the delay equations from a stored excitation, no input field.

    Returns the sampled amplitudes; the decay fidelity is ``|a1|^2``.
    ``enable_delays=False`` drops every delayed term (used to verify the
    causal gating: trajectories must match bit for bit before the first
    transit).
    """
    st = plan_grid(config, n_steps, t_final, n_samples)
    n_out = st.n_steps // st.stride + 1
    out_a1 = np.zeros(n_out, dtype=np.complex128)
    out_a2 = np.zeros(n_out, dtype=np.complex128)
    out_b = np.zeros(n_out, dtype=np.complex128)
    loc, dly = st.local, st.delayed
    dde_euler(loc[0, 0], loc[0, 1], loc[1, 0], loc[1, 1], loc[2, 2],
              dly["a1_from_b"], dly["a2_from_b"], dly["b_mirror"],
              dly["b_from_a1"], dly["b_from_a2"],
              st.dt, st.n_steps, st.k_delay, st.stride,
              out_a1, out_a2, out_b, enable_delays)
    times = np.arange(n_out) * (st.dt * st.stride)
    result = DdeResult(times, out_a1, out_a2, out_b, st)
    if not np.all(np.isfinite(result.norm)):
        raise ConfigError("delay integration diverged")
    return result


# ---------------------------------------------------------------------------
# Markov error report
# ---------------------------------------------------------------------------

def plateau_and_rate(times: np.ndarray, fidelity: np.ndarray,
                     window: float = 0.2) -> tuple[float, float]:
    """Late-time plateau (value at the horizon) and decay rate from a log fit."""
    t0 = times[-1] * (1.0 - window)
    mask = times >= t0
    t = times[mask]
    logf = np.log(np.maximum(fidelity[mask], 1e-300))
    slope, intercept = np.polyfit(t, logf, 1)
    plateau = math.exp(intercept + slope * times[-1])
    return plateau, -slope


@dataclass
class MarkovErrorReport:
    """Plateau convergence ladder against the master-equation reference."""

    n_steps: list
    dts: list
    plateaus: list
    rates: list
    reference_plateau: float
    extrapolated_plateau: float
    extrapolated_rate: float
    order: float
    monotone: bool

    @property
    def extrapolated_offset(self) -> float:
        return self.reference_plateau - self.extrapolated_plateau

    @property
    def offsets(self) -> list:
        return [self.reference_plateau - p for p in self.plateaus]

    def as_dict(self) -> dict:
        return {
            "plateau": self.plateaus[-1],
            "rate": self.extrapolated_rate,
            "extrapolated": self.extrapolated_plateau,
            "order": self.order,
            "offset_extrapolated": self.extrapolated_offset,
            "offsets": self.offsets,
            "rates": self.rates,
            "n_steps": self.n_steps,
            "monotone": self.monotone,
            "reference_plateau": self.reference_plateau,
        }


def markov_error_report(config: SystemConfig, n_steps_ladder,
                        t_final: float | None = None,
                        reference_plateau: float | None = None) -> MarkovErrorReport:
    """Estimate the Markov-approximation error of the master equation.

    Runs the delay integrator on a refinement ladder, extrapolates the
    late-time plateau linearly in the step size (first-order Euler), and
    reports the offset against the master-equation plateau.  Non-monotone
    ladder convergence is flagged but not fatal.
    """
    ladder = sorted(int(n) for n in n_steps_ladder)
    if len(ladder) < 3:
        raise ConfigError("the refinement ladder needs at least three step counts")

    if reference_plateau is None:
        from .propagate import decay_experiment
        ref = decay_experiment(config, t_final=t_final)
        tail = ref.times >= ref.times[-1] * 0.8
        reference_plateau = float(ref.fidelity[tail].mean())

    dts, plateaus, rates = [], [], []
    for n in ladder:
        res = dde_decay(config, n, t_final=t_final)
        p, r = plateau_and_rate(res.times, res.fidelity)
        dts.append(res.state.dt)
        plateaus.append(p)
        rates.append(r)

    # Linear-in-dt extrapolation to dt -> 0 (first-order Euler error).
    extrapolated = float(np.polyfit(np.asarray(dts), np.asarray(plateaus), 1)[1])
    rate_extrap = float(np.polyfit(np.asarray(dts), np.asarray(rates), 1)[1])

    diffs = np.diff(np.asarray(plateaus))
    monotone = bool(np.all(diffs >= 0) or np.all(diffs <= 0))
    # Observed order from the last three rungs of a (generally non-geometric)
    # ladder: plateau differences scale like the dt differences to the order.
    order = math.nan
    d_lo = plateaus[-2] - plateaus[-3]
    d_hi = plateaus[-1] - plateaus[-2]
    h_lo = dts[-3] - dts[-2]
    h_hi = dts[-2] - dts[-1]
    if d_hi != 0 and d_lo / d_hi > 0 and h_hi > 0 and h_lo / h_hi > 1:
        order = math.log(d_lo / d_hi) / math.log(h_lo / h_hi)

    return MarkovErrorReport(ladder, dts, plateaus, rates,
                             float(reference_plateau), extrapolated,
                             rate_extrap, order, monotone)
