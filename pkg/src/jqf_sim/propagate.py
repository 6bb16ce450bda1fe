"""Fixed-step RK4 propagation and the canned experiments.

Three experiments are provided on top of the shared propagation core: free
decay of the stored qubit (with or without the filter), the filter-frequency
sweep of the final fidelity, and the driven reflection-phase spectrum.
Fixed-step RK4 (no adaptivity) is used everywhere so that the optimizer's
discrete adjoint differentiates exactly the same scheme.

Step-size policy: the default grid resolves the largest retained detuning
with ``steps_per_period`` (default 40) steps per period.  For the long
driven reflection runs that rule is replaced by a stability-margin step
(``theta_max`` per step at the estimated spectral radius), since the
observable there is a quasi-steady expectation value carried by MHz-scale
modes; a convergence gate in the test suite backs this up.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._kernels import GeneratorAction, _terms_superop
from .liouvillian import Liouvillian, build_generator
from .model import (KIND_BARE, KIND_COMPOSITE, ConfigError, SystemConfig,
                    diagonalize_all)

TWO_PI = 2.0 * math.pi


class NumericsError(RuntimeError):
    """Propagation produced a non-finite state."""


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PropagationGrid:
    """Uniform time grid with a decimated observable-sampling stride."""

    t_final: float
    n_steps: int
    stride: int = 1

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be at least 1")
        if self.n_steps % self.stride != 0:
            raise ConfigError("n_steps must be a multiple of the sample stride")

    @property
    def dt(self) -> float:
        return self.t_final / self.n_steps

    @property
    def n_samples(self) -> int:
        return self.n_steps // self.stride + 1

    @property
    def sample_times(self) -> np.ndarray:
        return np.arange(self.n_samples) * (self.dt * self.stride)

    @classmethod
    def from_detunings(cls, liou: Liouvillian, t_final: float,
                       steps_per_period: int = 40,
                       n_samples: int = 1000) -> "PropagationGrid":
        """Grid resolving the largest rotating-frame detuning."""
        w_max = float(np.max(np.abs(liou.detunings)))
        dt_max = TWO_PI / (steps_per_period * w_max) if w_max > 0 else t_final
        return cls._rounded(t_final, dt_max, n_samples)

    @classmethod
    def from_stability(cls, liou: Liouvillian, t_final: float,
                       theta_max: float = 2.0,
                       n_samples: int = 1000) -> "PropagationGrid":
        """Grid placing every generator eigenvalue inside the RK4 region."""
        bound = liou.spectral_bound()
        dt_max = theta_max / bound if bound > 0 else t_final
        return cls._rounded(t_final, dt_max, n_samples)

    @classmethod
    def _rounded(cls, t_final, dt_max, n_samples):
        n = max(1, math.ceil(t_final / dt_max))
        stride = max(1, n // max(1, n_samples))
        n = stride * math.ceil(n / stride)
        return cls(t_final, n, stride)


# ---------------------------------------------------------------------------
# RK4
# ---------------------------------------------------------------------------

class _RK4Work:
    def __init__(self, shape):
        self.k = np.empty(shape, dtype=np.complex128)
        self.arg = np.empty(shape, dtype=np.complex128)
        self.acc = np.empty(shape, dtype=np.complex128)


def _rk4_step_into(apply_fn, rho, t, dt, out, work):
    """One classic RK4 update; ``apply_fn(t, x, out)`` evaluates L(t) x."""
    k, arg, acc = work.k, work.arg, work.acc
    apply_fn(t, rho, k)                      # k1 / dt
    np.multiply(k, dt / 6.0, out=acc)
    np.multiply(k, dt / 2.0, out=arg)
    arg += rho
    apply_fn(t + dt / 2.0, arg, k)           # k2 / dt
    acc += (dt / 3.0) * k
    np.multiply(k, dt / 2.0, out=arg)
    arg += rho
    apply_fn(t + dt / 2.0, arg, k)           # k3 / dt
    acc += (dt / 3.0) * k
    np.multiply(k, dt, out=arg)
    arg += rho
    apply_fn(t + dt, arg, k)                 # k4 / dt
    acc += (dt / 6.0) * k
    np.add(rho, acc, out=out)


def rk4_step(apply_fn, rho: np.ndarray, t: float, dt: float) -> np.ndarray:
    """Single RK4 step of ``drho/dt = L(t) rho``; returns the new state.

    ``apply_fn(t, x, out)`` must write ``L(t) x`` into ``out`` for states of
    the same shape as ``rho`` (matrix or vector alike).
    """
    work = _RK4Work(rho.shape)
    out = np.empty_like(rho)
    _rk4_step_into(apply_fn, rho, t, dt, out, work)
    if not np.all(np.isfinite(out.view(np.float64))):
        raise NumericsError("non-finite state after RK4 step")
    return out


# ---------------------------------------------------------------------------
# Observables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObservableRecord:
    """Sampled observables at one time point."""

    time: float
    fidelity: float
    fidelity_strict: float
    n_res: float
    n_jqf: float
    trace: float
    reflection: complex | None = None


def _trace_functional(op: np.ndarray) -> np.ndarray:
    """Row vector u with tr(op @ rho) = u . vec(rho) (row-major vec)."""
    return np.ascontiguousarray(op.T.reshape(-1).astype(np.complex128))


class ObservableSet:
    """Precompiled trace functionals for the chain's standard observables.

    ``fidelity`` projects subsystem 1 on its first excited eigenstate and
    traces out the rest; ``fidelity_strict`` additionally requires every
    other subsystem to sit in its ground state.
    """

    def __init__(self, diags, reflection_op: np.ndarray | None = None,
                 qubit_state: int = 1):
        dims = [d.dim for d in diags]
        dim = int(np.prod(dims))
        self.dim = dim
        self.dims = tuple(dims)

        def embed(op, which):
            full = np.array([[1.0 + 0.0j]])
            for i, d in enumerate(dims):
                factor = op if i == which else np.eye(d)
                full = np.kron(full, factor)
            return full

        proj1 = np.zeros((dims[0], dims[0]))
        proj1[qubit_state, qubit_state] = 1.0
        fid_op = embed(proj1, 0)
        strict_op = fid_op.copy()
        if len(dims) > 1:
            strict = np.array([[1.0 + 0.0j]])
            for i, d in enumerate(dims):
                op = proj1 if i == 0 else np.diag(
                    (np.arange(d) == 0).astype(complex))
                strict = np.kron(strict, op)
            strict_op = strict

        self._u_trace = _trace_functional(np.eye(dim))
        self._u_fid = _trace_functional(fid_op)
        self._u_strict = _trace_functional(strict_op)
        self._u_nres = _trace_functional(embed(diags[0].number_operator(), 0))
        if len(dims) > 1:
            self._u_njqf = _trace_functional(embed(diags[1].number_operator(), 1))
        else:
            self._u_njqf = None
        self._u_refl = _trace_functional(reflection_op) \
            if reflection_op is not None else None

    def measure(self, rho_vec: np.ndarray, t: float) -> ObservableRecord:
        tr = self._u_trace @ rho_vec
        if not np.isfinite(tr):
            raise NumericsError("non-finite trace")
        refl = None
        if self._u_refl is not None:
            refl = complex(1.0 - 1j * (self._u_refl @ rho_vec))
        return ObservableRecord(
            time=t,
            fidelity=float((self._u_fid @ rho_vec).real),
            fidelity_strict=float((self._u_strict @ rho_vec).real),
            n_res=float((self._u_nres @ rho_vec).real),
            n_jqf=float((self._u_njqf @ rho_vec).real)
            if self._u_njqf is not None else 0.0,
            trace=float(tr.real),
            reflection=refl,
        )


def reflection_operator(diags, config: SystemConfig, omega_drive: float,
                        rabi: float) -> np.ndarray:
    """Operator whose expectation gives the scattered part of r.

    The reflection coefficient is ``r = 1 - i tr(W rho)`` with W summing all
    line-coupled lowering transitions weighted by their transition frequency,
    rate ratios relative to the reference drive amplitude, and the standing
    wave factor at the drive frequency.
    """
    if rabi == 0.0:
        raise ConfigError("reflection is undefined for zero drive amplitude")
    dims = [d.dim for d in diags]
    ref = config.subsystems[0]
    total = np.zeros((int(np.prod(dims)), int(np.prod(dims))), dtype=complex)
    for m, (spec, d) in enumerate(zip(config.subsystems, diags)):
        cosm = math.cos(config.wave_phase(omega_drive, spec.phase))
        pref = math.sqrt(ref.gamma * spec.gamma) / rabi * cosm
        w_mat = np.zeros((d.dim, d.dim), dtype=complex)
        for j in range(d.dim):
            for jp in range(d.dim):
                if d.lowering[j, jp] == 0.0:
                    continue
                w_t = d.frequencies[jp] - d.frequencies[j]
                w_mat[j, jp] = (w_t / math.sqrt(ref.omega_ref * spec.omega_ref)) \
                    * d.lowering[j, jp]
        full = np.array([[1.0 + 0.0j]])
        for i, dd in enumerate(dims):
            factor = w_mat if i == m else np.eye(dd)
            full = np.kron(full, factor)
        total += pref * full
    return total


# ---------------------------------------------------------------------------
# Shared propagation core
# ---------------------------------------------------------------------------

@dataclass
class TimeSeriesResult:
    """Observable time series from one propagation run."""

    times: np.ndarray
    fidelity: np.ndarray
    fidelity_strict: np.ndarray
    n_res: np.ndarray
    n_jqf: np.ndarray
    trace: np.ndarray
    reflection: np.ndarray | None = None
    grid: PropagationGrid | None = None

    @property
    def records(self) -> list[ObservableRecord]:
        out = []
        for i, t in enumerate(self.times):
            out.append(ObservableRecord(
                t, self.fidelity[i], self.fidelity_strict[i], self.n_res[i],
                self.n_jqf[i], self.trace[i],
                complex(self.reflection[i]) if self.reflection is not None else None))
        return out

    @property
    def max_trace_error(self) -> float:
        return float(np.max(np.abs(self.trace - self.trace[0])))


def constant_action(liou: Liouvillian, re: float = 0.0, im: float = 0.0,
                    mode: str = "auto") -> GeneratorAction:
    """Fold a constant drive amplitude into a single generator action."""
    terms = list(liou.drift_terms)
    if re != 0.0:
        terms += [(a, b, c * re) for a, b, c in liou.drive_re_terms]
    if im != 0.0:
        terms += [(a, b, c * im) for a, b, c in liou.drive_im_terms]
    return GeneratorAction(liou.dim, terms, mode=mode)


def propagate_sampled(action: GeneratorAction, rho0: np.ndarray,
                      grid: PropagationGrid,
                      observables: ObservableSet) -> TimeSeriesResult:
    """Run the RK4 loop, sampling observables on the decimated grid."""
    dim = action.dim
    rho = np.ascontiguousarray(rho0.astype(np.complex128))
    work = _RK4Work(rho.shape)
    out = np.empty_like(rho)
    dt = grid.dt

    n_samp = grid.n_samples
    fid = np.empty(n_samp)
    fid_s = np.empty(n_samp)
    n_res = np.empty(n_samp)
    n_jqf = np.empty(n_samp)
    trace = np.empty(n_samp)
    refl = np.empty(n_samp, dtype=complex) \
        if observables._u_refl is not None else None

    def record(idx, t):
        try:
            rec = observables.measure(rho.reshape(-1), t)
        except NumericsError as exc:
            step = idx * grid.stride
            raise NumericsError(f"{exc} at step {step}") from None
        fid[idx] = rec.fidelity
        fid_s[idx] = rec.fidelity_strict
        n_res[idx] = rec.n_res
        n_jqf[idx] = rec.n_jqf
        trace[idx] = rec.trace
        if refl is not None:
            refl[idx] = rec.reflection

    def apply_fn(t, x, y):
        action.apply(x, y)

    record(0, 0.0)
    for s in range(grid.n_steps):
        _rk4_step_into(apply_fn, rho, s * dt, dt, out, work)
        rho, out = out, rho
        if (s + 1) % grid.stride == 0:
            record((s + 1) // grid.stride, (s + 1) * dt)

    return TimeSeriesResult(grid.sample_times, fid, fid_s, n_res, n_jqf,
                            trace, refl, grid)


def product_state_vec(diags, indices) -> np.ndarray:
    """Vectorized pure product state |i1 i2 ...><i1 i2 ...|."""
    dims = [d.dim for d in diags]
    flat = 0
    for d, idx in zip(dims, indices):
        flat = flat * d + idx
    dim = int(np.prod(dims))
    rho = np.zeros((dim, dim), dtype=np.complex128)
    rho[flat, flat] = 1.0
    return rho


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

DECAY_TRUNCATIONS = (2, 2)  # exact for undriven single-excitation dynamics


def _decay_config(config: SystemConfig, reduce_levels: bool) -> SystemConfig:
    if not reduce_levels:
        return config
    levels = [(DECAY_TRUNCATIONS if s.kind == KIND_COMPOSITE
               else (DECAY_TRUNCATIONS[0], 0)) for s in config.subsystems]
    levels = [(nt, nr) for nt, nr in levels]
    return config.with_truncations(levels)


def decay_experiment(config: SystemConfig, t_final: float | None = None,
                     steps_per_period: int = 40, n_samples: int = 1000,
                     reduce_levels: bool = True) -> TimeSeriesResult:
    """Free decay of the stored excitation; returns fidelity time series.

    The chain starts with subsystem 1 in its first excited eigenstate and
    everything else in the ground state, with no drive.  Undriven
    single-excitation dynamics never leaves the one-excitation sector, so by
    default each subsystem is truncated to the smallest levels containing
    that sector; the full-truncation run is available for cross-checks.
    """
    cfg = _decay_config(config, reduce_levels)
    if t_final is None:
        t_final = 10.0 / cfg.subsystems[0].gamma
    liou, diags = build_generator(cfg)
    grid = PropagationGrid.from_detunings(liou, t_final, steps_per_period,
                                          n_samples)
    action = constant_action(liou)
    rho0 = product_state_vec(diags, [1] + [0] * (len(diags) - 1))
    obs = ObservableSet(diags)
    return propagate_sampled(action, rho0, grid, obs)


def _sweep_point(args):
    config, omega, kwargs = args
    subs = list(config.subsystems)
    bare = [i for i, s in enumerate(subs) if s.kind == KIND_BARE]
    if not bare:
        raise ConfigError("frequency sweep requires a bare-transmon subsystem")
    subs[bare[0]] = replace(subs[bare[0]], omega_a=omega)
    swept = SystemConfig(tuple(subs), config.reference_index, config.omega_drive)
    result = decay_experiment(swept, **kwargs)
    return float(result.fidelity[-1])


def jqf_frequency_sweep(config: SystemConfig, omega_grid: np.ndarray,
                        jobs: int = 1, **decay_kwargs) -> np.ndarray:
    """Final decay fidelity as a function of the filter transition frequency."""
    tasks = [(config, float(w), decay_kwargs) for w in omega_grid]
    if jobs <= 1:
        return np.array([_sweep_point(t) for t in tasks])
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return np.array(list(pool.map(_sweep_point, tasks)))


def steady_state_vec(liou: Liouvillian, re: float = 0.0,
                     im: float = 0.0) -> np.ndarray:
    """Null-space steady state of the constant generator, traced to one.

    The redundant first row of the singular generator is replaced by the
    trace functional; the resulting square system is solved sparsely.
    """
    dim = liou.dim
    total = liou.superoperator("drift")
    if re != 0.0:
        total = total + re * liou.superoperator("drive_re")
    if im != 0.0:
        total = total + im * liou.superoperator("drive_im")
    a = total.tolil()
    trace_row = np.zeros(dim * dim)
    trace_row[np.arange(dim) * dim + np.arange(dim)] = 1.0
    a[0, :] = trace_row
    b = np.zeros(dim * dim, dtype=complex)
    b[0] = 1.0
    return spla.spsolve(sp.csc_matrix(a), b)


def reflection_run(config: SystemConfig, omega_drive: float, rabi: float,
                   initial: str = "ground", t_final: float | None = None,
                   theta_max: float = 2.0, n_samples: int = 200,
                   steady_state: bool = False) -> TimeSeriesResult:
    """Drive the chain at one frequency and record the reflection trajectory.

    ``initial`` selects the ground state or the stored-excitation state of
    subsystem 1.  With ``steady_state`` the finite-time protocol is replaced
    by a direct null-space solve (cross-check mode).
    """
    if rabi == 0.0:
        raise ConfigError("reflection is undefined for zero drive amplitude")
    if t_final is None:
        t_final = 20.0 / config.subsystems[0].gamma
    liou, diags = build_generator(config, omega_drive=omega_drive)
    w_op = reflection_operator(diags, config, omega_drive, rabi)
    obs = ObservableSet(diags, reflection_op=w_op)

    if steady_state:
        vec = steady_state_vec(liou, re=rabi)
        rec = obs.measure(vec, 0.0)
        one = np.array([0.0])
        return TimeSeriesResult(one, np.array([rec.fidelity]),
                                np.array([rec.fidelity_strict]),
                                np.array([rec.n_res]), np.array([rec.n_jqf]),
                                np.array([rec.trace]),
                                np.array([rec.reflection], dtype=complex))

    action = constant_action(liou, re=rabi)
    grid = PropagationGrid.from_stability(liou, t_final, theta_max, n_samples)
    idx0 = [1 if initial == "excited" else 0] + [0] * (len(diags) - 1)
    rho0 = product_state_vec(diags, idx0)
    return propagate_sampled(action, rho0, grid, obs)


def _reflection_point(args):
    config, omega, kwargs = args
    out = {}
    for label in ("ground", "excited"):
        res = reflection_run(config, omega, initial=label, **kwargs)
        out[label] = complex(res.reflection[-1])
    return out


def reflection_experiment(config: SystemConfig, omega_grid: np.ndarray,
                          rabi: float, jobs: int = 1,
                          **run_kwargs) -> dict[str, np.ndarray]:
    """Reflection coefficient across a drive-frequency sweep.

    Returns arrays ``r_ground`` and ``r_excited`` with the complex
    reflection coefficient at the end of each finite-time run.
    """
    kwargs = dict(run_kwargs)
    kwargs["rabi"] = rabi
    tasks = [(config, float(w), kwargs) for w in omega_grid]
    if jobs <= 1:
        results = [_reflection_point(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_reflection_point, tasks))
    return {
        "omega": np.asarray(omega_grid, dtype=float),
        "r_ground": np.array([r["ground"] for r in results], dtype=complex),
        "r_excited": np.array([r["excited"] for r in results], dtype=complex),
    }


def reflection_truncations(config: SystemConfig, rabi: float,
                           n_transmon: int = 3,
                           n_jqf: int = 2) -> SystemConfig:
    """Truncations sized for a driven reflection run.

    The resonator keeps ``8 sqrt(n) + 8`` levels for the expected on-resonance
    photon number of an empty resonator at this drive; transmon levels stay
    small because the probe is far detuned from all transmon transitions.
    """
    kappa = config.subsystems[0].gamma
    n_expected = (2.0 * rabi / kappa) ** 2
    n_res = int(math.ceil(8.0 * math.sqrt(max(n_expected, 1.0)) + 8.0))
    levels = []
    for s in config.subsystems:
        if s.kind == KIND_COMPOSITE:
            levels.append((n_transmon, n_res))
        else:
            levels.append((n_jqf, 0))
    return config.with_truncations(levels)
