"""Rotating-frame generator of the master equation.

The equation of motion for the vectorized density matrix is
``drho/dt = L(t) rho`` with ``L(t) = L0 + Re[Omega](t) T_Re + Im[Omega](t) T_Im``.
``L0`` contains the detuning Hamiltonian and the non-local dissipator built
from the emission coefficients (the xi table); ``T_Re`` and ``T_Im`` are the
time-independent drive superoperators whose prefactors carry the full time
dependence of the drive.

Vectorization is row-major throughout: ``rho_vec[l * dim + l'] = rho[l, l']``,
so a sandwich ``A rho B`` maps to ``kron(A, B.T)``.  Generators are kept in a
factored form (left factor, right factor, sandwich pairs) so that applying
them costs sparse matrix products on the ``dim x dim`` density matrix; the
full ``dim^2 x dim^2`` superoperator is only materialized on demand for
small systems, tests, and debug dumps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.constants import hbar

from .model import ConfigError, DiagonalizedSubsystem, SystemConfig, diagonalize_all

XI_MODE_FREE = "free"      # wave vector at each transition frequency
XI_MODE_DRIVEN = "driven"  # wave vector pinned to the drive frequency


# ---------------------------------------------------------------------------
# Emission coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class XiTable:
    """Complex emission coefficients xi[(m, n)][j, j'] for subsystem pairs.

    Entry ``[j, j']`` multiplies the lowering matrix element ``C_n[j, j']``
    of subsystem ``n`` in the collective jump operator sourced at subsystem
    ``m``.  ``drive_mode`` records whether propagation phases were evaluated
    at each transition frequency or pinned to the drive frequency.
    """

    entries: dict = field(repr=False)
    drive_mode: str = XI_MODE_FREE
    omega_drive: float | None = None


def build_xi(diags: list[DiagonalizedSubsystem], config: SystemConfig,
             drive_mode: str = XI_MODE_FREE,
             omega_drive: float | None = None) -> XiTable:
    """Assemble the non-local emission coefficients for all subsystem pairs.

    The coefficient couples the transition (j' -> j) of subsystem n to the
    line coupling of subsystem m through the phases accumulated over the
    direct path |x_m - x_n| and the mirror path |x_m + x_n|.  The frequency
    ratio prefactor always uses the exact transition frequency; only the
    propagation phases switch to the drive frequency in driven mode.
    """
    if drive_mode not in (XI_MODE_FREE, XI_MODE_DRIVEN):
        raise ConfigError(f"unknown xi drive mode {drive_mode!r}")
    if drive_mode == XI_MODE_DRIVEN and omega_drive is None:
        raise ConfigError("driven xi mode requires a drive frequency")

    entries = {}
    n_sub = len(config.subsystems)
    for m in range(n_sub):
        spec_m = config.subsystems[m]
        for n in range(n_sub):
            spec_n = config.subsystems[n]
            dn = diags[n]
            table = np.zeros((dn.dim, dn.dim), dtype=complex)
            rate = math.sqrt(spec_m.gamma * spec_n.gamma) / 2.0
            denom = math.sqrt(spec_m.omega_ref * spec_n.omega_ref)
            phase_diff = abs(spec_m.phase - spec_n.phase)
            phase_sum = abs(spec_m.phase + spec_n.phase)
            for j in range(dn.dim):
                for jp in range(dn.dim):
                    if dn.lowering[j, jp] == 0.0:
                        continue
                    w_t = dn.frequencies[jp] - dn.frequencies[j]
                    w_k = omega_drive if drive_mode == XI_MODE_DRIVEN else w_t
                    scale = w_k / config.phase_reference_frequency
                    table[j, jp] = rate * (w_t / denom) * (
                        np.exp(1j * scale * phase_diff)
                        + np.exp(1j * scale * phase_sum)
                    )
            entries[(m, n)] = table
    return XiTable(entries, drive_mode, omega_drive)


# ---------------------------------------------------------------------------
# Rotating frame
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RotatingFrame:
    """Frame frequencies proportional to each eigenstate's excitation number.

    With ``omega_ref`` equal to the drive frequency (or the reference
    transmon frequency when undriven), every line-allowed transition rotates
    at exactly ``omega_ref``, which removes the explicit drive phases.
    """

    omega_ref: float
    frequencies: tuple = field(repr=False)

    @classmethod
    def for_system(cls, diags: list[DiagonalizedSubsystem], config: SystemConfig,
                   omega_drive: float | None = None) -> "RotatingFrame":
        if omega_drive is not None:
            w_ref = omega_drive
        else:
            w_ref = config.reference.omega_a
        freqs = tuple(d.excitations * w_ref for d in diags)
        return cls(w_ref, freqs)

    def detunings(self, diags: list[DiagonalizedSubsystem]) -> list[np.ndarray]:
        """Eigenfrequency minus frame frequency for every subsystem state."""
        return [d.frequencies - f for d, f in zip(diags, self.frequencies)]


# ---------------------------------------------------------------------------
# Generator container
# ---------------------------------------------------------------------------

def _embed(op, which: int, dims: list[int]) -> sp.csr_matrix:
    """Embed a one-subsystem operator into the chain's product space."""
    mat = sp.csr_matrix(op)
    full = None
    for i, d in enumerate(dims):
        factor = mat if i == which else sp.identity(d, format="csr", dtype=complex)
        full = factor if full is None else sp.kron(full, factor, format="csr")
    return sp.csr_matrix(full)


@dataclass
class Liouvillian:
    """Factored rotating-frame generator.

    ``drift_terms``, ``drive_re_terms`` and ``drive_im_terms`` are lists of
    ``(left, right, coeff)`` with sparse factors (``None`` means identity);
    a term contributes ``coeff * left @ rho @ right``.  The drive terms are
    not premultiplied by the time step; propagators and the optimizer apply
    their own scaling.
    """

    dim: int
    dims: tuple[int, ...]
    frame: RotatingFrame
    drift_terms: list = field(repr=False)
    drive_re_terms: list = field(default_factory=list, repr=False)
    drive_im_terms: list = field(default_factory=list, repr=False)
    drive_ratios: np.ndarray | None = None
    detunings: np.ndarray | None = field(default=None, repr=False)

    # -- materialization ----------------------------------------------------

    @staticmethod
    def _terms_matrix(terms, dim) -> sp.csr_matrix:
        ident = sp.identity(dim, format="csr", dtype=complex)
        total = sp.csr_matrix((dim * dim, dim * dim), dtype=complex)
        for left, right, coeff in terms:
            a = left if left is not None else ident
            b = right if right is not None else ident
            total = total + coeff * sp.kron(a, b.T, format="csr")
        return sp.csr_matrix(total)

    def superoperator(self, part: str = "drift") -> sp.csr_matrix:
        """Materialize one generator piece on the vectorized density matrix."""
        terms = {"drift": self.drift_terms,
                 "drive_re": self.drive_re_terms,
                 "drive_im": self.drive_im_terms}[part]
        return self._terms_matrix(terms, self.dim)

    def dump(self, path, part: str = "drift") -> None:
        """Write a generator piece as coordinate text: row, col, re, im."""
        mat = self.superoperator(part).tocoo()
        with open(path, "w") as fh:
            fh.write(f"# {part} superoperator, dim {mat.shape[0]}\n")
            for r, c, v in zip(mat.row, mat.col, mat.data):
                fh.write(f"{r} {c} {v.real:.17g} {v.imag:.17g}\n")

    def spectral_bound(self) -> float:
        """Cheap upper estimate of the generator's spectral radius (rad/s).

        Detuning spread dominates; dissipator and drive norms are added as
        crude one-norm bounds.  Used for step-size heuristics only.
        """
        spread = float(self.detunings.max() - self.detunings.min()) \
            if self.detunings is not None else 0.0
        diss = 0.0
        for left, right, coeff in self.drift_terms:
            if left is not None and right is not None:
                diss += 2.0 * abs(coeff) * max(
                    np.abs(left).sum(axis=1).max(), np.abs(right).sum(axis=1).max())
        return spread + diss


def build_drift(diags: list[DiagonalizedSubsystem], config: SystemConfig,
                frame: RotatingFrame, xi: XiTable) -> Liouvillian:
    """Assemble the time-independent part of the generator.

    Produces the detuning Hamiltonian commutator plus the non-local
    dissipator.  Grouping the pair sums by the emitting subsystem leaves two
    sandwich terms per subsystem, with single-sided remainders merged into
    one left factor and its adjoint acting from the right.
    """
    dims = [d.dim for d in diags]
    dim = int(np.prod(dims))
    n_sub = len(diags)

    dets = frame.detunings(diags)
    h0 = sp.csr_matrix((dim, dim), dtype=complex)
    for m in range(n_sub):
        h0 = h0 + _embed(sp.diags(dets[m].astype(complex)), m, dims)

    lower_full = [_embed(d.lowering, m, dims) for m, d in enumerate(diags)]
    lower_tot = []
    for m in range(n_sub):
        tot = sp.csr_matrix((dim, dim), dtype=complex)
        for n in range(n_sub):
            weighted = xi.entries[(m, n)] * diags[n].lowering
            tot = tot + _embed(weighted, n, dims)
        lower_tot.append(sp.csr_matrix(tot))

    left = -1j * h0
    for m in range(n_sub):
        left = left - 0.5 * (lower_full[m].conj().T @ lower_tot[m])
    left = sp.csr_matrix(left)
    right = sp.csr_matrix(left.conj().T)

    terms = [(left, None, 1.0), (None, right, 1.0)]
    for m in range(n_sub):
        terms.append((lower_tot[m], sp.csr_matrix(lower_full[m].conj().T), 0.5))
        terms.append((lower_full[m], sp.csr_matrix(lower_tot[m].conj().T), 0.5))

    det_full = np.zeros(dim)
    for m in range(n_sub):
        det_full = det_full + _embed(sp.diags(dets[m]), m, dims).diagonal().real
    return Liouvillian(dim=dim, dims=tuple(dims), frame=frame, drift_terms=terms,
                       detunings=det_full)


def drive_amplitude_ratios(diags: list[DiagonalizedSubsystem], config: SystemConfig,
                           omega_drive: float) -> np.ndarray:
    """Per-subsystem drive amplitude relative to the reference subsystem.

    The ratios depend only on rates, reference frequencies, and the standing
    wave pattern at the drive frequency, so they are time independent.
    """
    ref = config.reference
    cos_ref = math.cos(config.wave_phase(omega_drive, ref.phase))
    if abs(cos_ref) < 1e-12:
        raise ConfigError(
            "reference subsystem sits at a node of the drive standing wave"
        )
    ratios = np.empty(len(config.subsystems))
    for m, spec in enumerate(config.subsystems):
        cos_m = math.cos(config.wave_phase(omega_drive, spec.phase))
        ratios[m] = math.sqrt(
            (ref.omega_ref / spec.omega_ref) * (spec.gamma / ref.gamma)
        ) * cos_m / cos_ref
    return ratios


def build_drive_superops(liou: Liouvillian, diags: list[DiagonalizedSubsystem],
                         config: SystemConfig, omega_drive: float) -> None:
    """Attach the two time-independent drive superoperators to ``liou``.

    ``T_Re`` is the commutator superoperator of the symmetric drive
    Hamiltonian, ``T_Im`` of the antisymmetric one; their scalar prefactors
    Re[Omega](t), Im[Omega](t) are supplied at application time.
    """
    dims = list(liou.dims)
    ratios = drive_amplitude_ratios(diags, config, omega_drive)
    h_re = sp.csr_matrix((liou.dim, liou.dim), dtype=complex)
    h_im = sp.csr_matrix((liou.dim, liou.dim), dtype=complex)
    for m, d in enumerate(diags):
        low = _embed(d.lowering, m, dims)
        h_re = h_re + ratios[m] * (low + low.conj().T)
        h_im = h_im + 1j * ratios[m] * (low.conj().T - low)
    h_re = sp.csr_matrix(h_re)
    h_im = sp.csr_matrix(h_im)
    liou.drive_re_terms = [(sp.csr_matrix(-1j * h_re), None, 1.0),
                           (None, sp.csr_matrix(1j * h_re), 1.0)]
    liou.drive_im_terms = [(sp.csr_matrix(-1j * h_im), None, 1.0),
                           (None, sp.csr_matrix(1j * h_im), 1.0)]
    liou.drive_ratios = ratios


def build_generator(config: SystemConfig, diags: list[DiagonalizedSubsystem] | None = None,
                    omega_drive: float | None = None) -> tuple[Liouvillian, list]:
    """Convenience assembly: diagonalize, pick frame and xi mode, build terms.

    With ``omega_drive`` set, the frame rotates at the drive, the xi phases
    are pinned to the drive wave vector, and the drive superoperators are
    attached.  Without it, the frame rotates at the reference transmon
    frequency and xi uses per-transition wave vectors.
    """
    if diags is None:
        diags = diagonalize_all(config)
    frame = RotatingFrame.for_system(diags, config, omega_drive)
    if omega_drive is not None:
        xi = build_xi(diags, config, XI_MODE_DRIVEN, omega_drive)
    else:
        xi = build_xi(diags, config, XI_MODE_FREE)
    liou = build_drift(diags, config, frame, xi)
    if omega_drive is not None:
        build_drive_superops(liou, diags, config, omega_drive)
    return liou, diags


# ---------------------------------------------------------------------------
# Drive power calibration
# ---------------------------------------------------------------------------

def rabi_from_power(power_dbm: float, omega_drive: float,
                    config: SystemConfig) -> float:
    """Reference Rabi frequency (rad/s) for a given input power in dBm."""
    power_w = 1e-3 * 10.0 ** (power_dbm / 10.0)
    flux = power_w / (hbar * omega_drive)
    ref = config.reference
    cos_ref = math.cos(config.wave_phase(omega_drive, ref.phase))
    return math.sqrt((omega_drive / ref.omega_ref) * ref.gamma * flux) * cos_ref


def power_from_rabi(rabi: float, omega_drive: float, config: SystemConfig) -> float:
    """Input power in dBm producing the given reference Rabi frequency."""
    ref = config.reference
    cos_ref = math.cos(config.wave_phase(omega_drive, ref.phase))
    if abs(cos_ref) < 1e-12:
        raise ConfigError("reference subsystem sits at a drive node")
    flux = (rabi / cos_ref) ** 2 * ref.omega_ref / (omega_drive * ref.gamma)
    power_w = flux * hbar * omega_drive
    return 10.0 * math.log10(power_w / 1e-3)
