"""Physical configuration of the transmission-line chain and subsystem eigenbases.

The chain consists of subsystems attached to a single semi-infinite
transmission line: either a transmon dispersively coupled through a readout
resonator ("transmon-with-resonator") or a transmon wired directly to the
line ("bare-transmon", the saturable filter).  Each subsystem Hamiltonian is
diagonalized block-by-block in its total-excitation sectors, and the line
coupling operator (resonator or transmon annihilation operator) is
transformed into that eigenbasis.  Everything downstream (generator
assembly, propagation, reflection, control) works in these eigenbases.

All frequencies and rates are angular (rad/s).  Positions on the line are
stored as dimensionless phases accumulated at the reference transition
frequency of the first subsystem; a wave vector at any other frequency
``w`` is obtained by scaling the phase with ``w / w_ref``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * math.pi

KIND_COMPOSITE = "transmon-with-resonator"
KIND_BARE = "bare-transmon"


class ConfigError(ValueError):
    """Invalid physical configuration (bad value, key, or combination)."""


class DomainError(ValueError):
    """Formula evaluated outside its domain (vanishing denominator etc.)."""


# ---------------------------------------------------------------------------
# Closed-form helpers
# ---------------------------------------------------------------------------

def dispersive_shift(g_r: float, omega_r: float, omega_a: float, alpha: float) -> float:
    """Qubit-state dependent pull of the resonator frequency, in rad/s.

    Difference of the level shifts of the two lowest transmon levels for a
    transmon (anharmonicity ``alpha``) coupled with strength ``g_r`` to a
    resonator detuned by ``omega_r - omega_a``.
    """
    delta = omega_r - omega_a
    if delta == 0.0:
        raise DomainError("dispersive shift undefined: omega_r - omega_a = 0")
    if delta - alpha == 0.0:
        raise DomainError("dispersive shift undefined: omega_r - omega_a - alpha = 0")
    return g_r**2 / (2.0 * delta) * (1.0 - (delta + alpha) / (delta - alpha))


def coupling_from_shift(chi: float, omega_r: float, omega_a: float, alpha: float) -> float:
    """Invert :func:`dispersive_shift`: coupling g_r >= 0 producing ``chi``.

    The shift is quadratic in the coupling, chi = -g^2 alpha / (delta (delta - alpha)),
    so the inversion is a square root with a sign condition on ``chi``.
    """
    delta = omega_r - omega_a
    if delta == 0.0:
        raise DomainError("coupling inversion undefined: omega_r - omega_a = 0")
    if delta - alpha == 0.0:
        raise DomainError("coupling inversion undefined: omega_r - omega_a - alpha = 0")
    if chi == 0.0:
        return 0.0
    g_squared = -chi * delta * (delta - alpha) / alpha if alpha != 0.0 else math.nan
    if alpha == 0.0:
        raise DomainError("coupling inversion undefined for alpha = 0 (shift vanishes)")
    if g_squared < 0.0:
        raise DomainError(
            f"no real coupling reproduces chi={chi:g} at this detuning/anharmonicity"
        )
    return math.sqrt(g_squared)


# ---------------------------------------------------------------------------
# Configuration types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubsystemSpec:
    """One subsystem attached to the transmission line.

    Parameters
    ----------
    kind : str
        ``"transmon-with-resonator"`` or ``"bare-transmon"``.
    omega_a : float
        Angular frequency of the lowest transmon transition (rad/s).
    alpha : float
        Transmon anharmonicity (rad/s, negative for transmons).
    gamma : float
        Line coupling rate (rad/s): resonator decay for the composite kind,
        direct transmon decay for the bare kind.
    phase : float
        Dimensionless line position, k(w_ref) * x, at the reference frequency.
    n_transmon, n_resonator : int
        Truncation levels; ``n_resonator`` is ignored for the bare kind.
    omega_r, g_r : float
        Resonator frequency and transmon-resonator coupling (composite only).
    """

    kind: str
    omega_a: float
    alpha: float
    gamma: float
    phase: float
    n_transmon: int
    n_resonator: int = 0
    omega_r: float = 0.0
    g_r: float = 0.0

    def __post_init__(self):
        if self.kind not in (KIND_COMPOSITE, KIND_BARE):
            raise ConfigError(f"unknown subsystem kind {self.kind!r}")
        if self.omega_a <= 0.0:
            raise ConfigError("omega_a must be strictly positive")
        if self.gamma <= 0.0:
            raise ConfigError("line coupling rate must be strictly positive")
        if self.phase < 0.0:
            raise ConfigError("position phase must be non-negative")
        if self.n_transmon < 2:
            raise ConfigError("n_transmon must be at least 2")
        if self.kind == KIND_COMPOSITE:
            if self.omega_r <= 0.0:
                raise ConfigError("omega_r must be strictly positive")
            if self.g_r < 0.0:
                raise ConfigError("g_r must be non-negative")
            if self.n_resonator < 2:
                raise ConfigError("n_resonator must be at least 2")

    @property
    def omega_ref(self) -> float:
        """Line-coupling reference frequency of the subsystem (rad/s)."""
        return self.omega_r if self.kind == KIND_COMPOSITE else self.omega_a

    @property
    def dim(self) -> int:
        return self.n_transmon * self.n_resonator if self.kind == KIND_COMPOSITE \
            else self.n_transmon


@dataclass(frozen=True)
class SystemConfig:
    """Ordered chain of subsystems on one transmission line.

    ``reference_index`` selects the subsystem whose Rabi frequency is used as
    the drive amplitude reference (1-based, as in the config file format).
    """

    subsystems: tuple[SubsystemSpec, ...]
    reference_index: int = 1
    omega_drive: float | None = None

    def __post_init__(self):
        if not self.subsystems:
            raise ConfigError("at least one subsystem is required")
        if self.subsystems[0].phase != 0.0:
            raise ConfigError("the first subsystem must sit at the origin (phase 0)")
        phases = [s.phase for s in self.subsystems]
        if any(b < a for a, b in zip(phases, phases[1:])):
            raise ConfigError("subsystem positions must be non-decreasing")
        if not 1 <= self.reference_index <= len(self.subsystems):
            raise ConfigError("reference_index out of range")

    @property
    def reference(self) -> SubsystemSpec:
        return self.subsystems[self.reference_index - 1]

    @property
    def phase_reference_frequency(self) -> float:
        """Frequency at which the stored position phases were measured."""
        return self.subsystems[0].omega_a

    def wave_phase(self, omega: float, phase: float) -> float:
        """Propagation phase k(omega) * x for a position stored as ``phase``."""
        return (omega / self.phase_reference_frequency) * phase

    def without_bare_transmons(self) -> "SystemConfig":
        """Drop all directly-attached transmons (the filters) from the chain."""
        kept = tuple(s for s in self.subsystems if s.kind == KIND_COMPOSITE)
        if not kept:
            raise ConfigError("removing bare transmons would leave an empty chain")
        ref = min(self.reference_index, len(kept))
        return SystemConfig(kept, ref, self.omega_drive)

    def with_truncations(self, levels: list[tuple[int, int]]) -> "SystemConfig":
        """Return a copy with per-subsystem (n_transmon, n_resonator) overrides."""
        if len(levels) != len(self.subsystems):
            raise ConfigError("one truncation pair per subsystem is required")
        subs = tuple(
            replace(s, n_transmon=nt, n_resonator=(nr if s.kind == KIND_COMPOSITE else 0))
            for s, (nt, nr) in zip(self.subsystems, levels)
        )
        return SystemConfig(subs, self.reference_index, self.omega_drive)


# ---------------------------------------------------------------------------
# Diagonalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiagonalizedSubsystem:
    """Eigenbasis data of one subsystem.

    ``frequencies[j]`` is the eigenfrequency (rad/s), ``excitations[j]`` the
    total excitation number of eigenstate j, and ``lowering[j, j']`` the
    matrix element of the line-coupling annihilation operator between
    eigenstates.  States are ordered by excitation number, then ascending
    frequency inside each fixed-excitation block.
    """

    spec: SubsystemSpec
    frequencies: np.ndarray
    excitations: np.ndarray
    lowering: np.ndarray
    bare_vectors: np.ndarray = field(repr=False)
    bare_labels: tuple = field(repr=False)

    @property
    def dim(self) -> int:
        return self.frequencies.size

    def number_operator(self) -> np.ndarray:
        """Photon/excitation-number operator of the line-coupled mode."""
        return self.lowering.conj().T @ self.lowering


def _fix_gauge(vectors: np.ndarray) -> np.ndarray:
    """Make the first non-negligible component of each eigenvector positive."""
    out = vectors.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        idx = np.argmax(np.abs(col) > 1e-12)
        if col[idx] < 0.0:
            out[:, k] = -col
    return out


def diagonalize(spec: SubsystemSpec, excitation_cap: int | None = None) -> DiagonalizedSubsystem:
    """Diagonalize one subsystem block-by-block in total excitation number.

    The exchange coupling conserves the total excitation, so the composite
    Hamiltonian is diagonalized within each fixed-excitation block of the
    truncated product basis.  ``excitation_cap`` optionally discards all
    eigenstates above a total excitation number.
    """
    if spec.kind == KIND_BARE:
        levels = np.arange(spec.n_transmon)
        freqs = spec.omega_a * levels + 0.5 * spec.alpha * levels * (levels - 1)
        if excitation_cap is not None:
            if excitation_cap > spec.n_transmon - 1:
                raise ConfigError(
                    f"excitation cap {excitation_cap} exceeds what n_transmon="
                    f"{spec.n_transmon} can hold"
                )
            levels = levels[: excitation_cap + 1]
            freqs = freqs[: excitation_cap + 1]
        dim = levels.size
        lowering = np.zeros((dim, dim), dtype=complex)
        for j in range(dim - 1):
            lowering[j, j + 1] = math.sqrt(j + 1)
        vectors = np.eye(dim)
        labels = tuple((int(j),) for j in levels)
        return DiagonalizedSubsystem(spec, freqs.astype(float), levels.astype(int),
                                     lowering, vectors, labels)

    nt, nr = spec.n_transmon, spec.n_resonator
    max_exc = (nt - 1) + (nr - 1)
    if excitation_cap is not None:
        if excitation_cap > max_exc:
            raise ConfigError(
                f"excitation cap {excitation_cap} exceeds what truncations "
                f"({nt}, {nr}) can hold"
            )
        max_exc = excitation_cap

    # Bare product labels (n_transmon_excitations, n_photons), grouped by block.
    labels: list[tuple[int, int]] = []
    freqs: list[float] = []
    excs: list[int] = []
    vec_blocks: list[np.ndarray] = []
    for n_tot in range(max_exc + 1):
        block = [(nb, n_tot - nb) for nb in range(nt)
                 if 0 <= n_tot - nb <= nr - 1]
        size = len(block)
        h = np.zeros((size, size))
        for i, (nb, na) in enumerate(block):
            h[i, i] = spec.omega_a * nb + 0.5 * spec.alpha * nb * (nb - 1) \
                + spec.omega_r * na
            for k, (mb, ma) in enumerate(block):
                if mb == nb + 1 and ma == na - 1:
                    g = spec.g_r * math.sqrt(nb + 1) * math.sqrt(na)
                    h[i, k] = g
                    h[k, i] = g
        vals, vecs = np.linalg.eigh(h)
        vecs = _fix_gauge(vecs)
        order = _degenerate_order(vals, vecs, block)
        vals, vecs = vals[order], vecs[:, order]
        labels.extend(block)
        freqs.extend(vals.tolist())
        excs.extend([n_tot] * size)
        vec_blocks.append(vecs)

    dim = len(freqs)
    frequencies = np.asarray(freqs)
    excitations = np.asarray(excs, dtype=int)

    # Full eigenvector matrix in the bare product basis (block diagonal).
    bare_index = {lab: i for i, lab in enumerate(labels)}
    vectors = np.zeros((dim, dim))
    col = 0
    row_sets = []
    start = 0
    for n_tot in range(max_exc + 1):
        block = [(nb, n_tot - nb) for nb in range(nt) if 0 <= n_tot - nb <= nr - 1]
        rows = [bare_index[lab] for lab in block]
        row_sets.append(rows)
        blk = vec_blocks[n_tot]
        for k in range(len(block)):
            vectors[rows, col] = blk[:, k]
            col += 1
        start += len(block)

    # Annihilation operator of the resonator in the bare product basis,
    # transformed into the eigenbasis.  Only blocks differing by one
    # excitation connect, which keeps the selection rule exact.
    a_bare = np.zeros((dim, dim))
    for (nb, na), i in bare_index.items():
        if na >= 1:
            a_bare[bare_index[(nb, na - 1)], i] = math.sqrt(na)
    lowering_real = vectors.T @ a_bare @ vectors
    lowering = np.zeros((dim, dim), dtype=complex)
    for j in range(dim):
        for jp in range(dim):
            if excitations[jp] == excitations[j] + 1:
                lowering[j, jp] = lowering_real[j, jp]

    return DiagonalizedSubsystem(spec, frequencies, excitations, lowering,
                                 vectors, tuple(labels))


def _degenerate_order(vals: np.ndarray, vecs: np.ndarray, block: list) -> np.ndarray:
    """Ascending frequency; degenerate pairs ordered by resonator weight.

    Degenerate eigenvalues inside a block (possible for exotic parameter
    choices) are ordered by descending amplitude for annihilating a photon
    straight into the block's lowest resonator occupation, which keeps
    labels stable under parameter sweeps.
    """
    order = np.argsort(vals, kind="stable")
    vals_sorted = vals[order]
    scale = max(1.0, float(np.max(np.abs(vals))))
    i = 0
    while i < len(order) - 1:
        j = i
        while j + 1 < len(order) and abs(vals_sorted[j + 1] - vals_sorted[i]) <= 1e-12 * scale:
            j += 1
        if j > i:
            weights = []
            for k in order[i:j + 1]:
                w = sum(abs(vecs[m, k]) * math.sqrt(na) for m, (nb, na) in enumerate(block)
                        if na >= 1)
                weights.append(-w)
            sub = np.argsort(np.asarray(weights), kind="stable")
            order[i:j + 1] = order[i:j + 1][sub]
        i = j + 1
    return order


def diagonalize_all(config: SystemConfig,
                    excitation_cap: int | None = None) -> list[DiagonalizedSubsystem]:
    return [diagonalize(s, excitation_cap) for s in config.subsystems]


# ---------------------------------------------------------------------------
# Config file format
# ---------------------------------------------------------------------------

_SUBSYSTEM_KEYS = {
    "kind", "f_a_Hz", "alpha_Hz", "f_r_Hz", "g_r_Hz", "chi_Hz", "Gamma_Hz",
    "phase_over_pi", "n_transmon", "n_resonator",
}
_TOP_KEYS = {"subsystems", "reference_index", "f_drive_Hz"}


def config_from_dict(data: dict) -> SystemConfig:
    """Build a :class:`SystemConfig` from the JSON config structure.

    The file quotes ordinary frequencies in Hz; they are converted to
    angular frequencies here.  Exactly one of ``g_r_Hz``/``chi_Hz`` must be
    given per composite subsystem; ``chi_Hz`` is converted through
    :func:`coupling_from_shift`.
    """
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config key: {sorted(unknown)[0]!r}")
    if "subsystems" not in data:
        raise ConfigError("missing config key: 'subsystems'")

    subsystems = []
    for i, raw in enumerate(data["subsystems"]):
        where = f"subsystems[{i}]"
        unknown = set(raw) - _SUBSYSTEM_KEYS
        if unknown:
            raise ConfigError(f"unknown config key: {where}.{sorted(unknown)[0]}")
        try:
            kind = raw["kind"]
            omega_a = TWO_PI * float(raw["f_a_Hz"])
            alpha = TWO_PI * float(raw["alpha_Hz"])
            gamma = TWO_PI * float(raw["Gamma_Hz"])
            phase = math.pi * float(raw["phase_over_pi"])
            n_transmon = int(raw["n_transmon"])
        except KeyError as exc:
            raise ConfigError(f"missing config key: {where}.{exc.args[0]}") from None
        omega_r = g_r = 0.0
        n_resonator = 0
        if kind == KIND_COMPOSITE:
            if "f_r_Hz" not in raw:
                raise ConfigError(f"missing config key: {where}.f_r_Hz")
            omega_r = TWO_PI * float(raw["f_r_Hz"])
            has_g = "g_r_Hz" in raw
            has_chi = "chi_Hz" in raw
            if has_g == has_chi:
                raise ConfigError(
                    f"{where}: exactly one of 'g_r_Hz' or 'chi_Hz' is required"
                )
            if has_g:
                g_r = TWO_PI * float(raw["g_r_Hz"])
            else:
                chi = TWO_PI * float(raw["chi_Hz"])
                g_r = coupling_from_shift(chi, omega_r, omega_a, alpha)
            n_resonator = int(raw.get("n_resonator", 0))
        elif kind != KIND_BARE:
            raise ConfigError(f"{where}: unknown subsystem kind {kind!r}")
        subsystems.append(SubsystemSpec(
            kind=kind, omega_a=omega_a, alpha=alpha, gamma=gamma, phase=phase,
            n_transmon=n_transmon, n_resonator=n_resonator,
            omega_r=omega_r, g_r=g_r,
        ))

    omega_drive = None
    if data.get("f_drive_Hz") is not None:
        omega_drive = TWO_PI * float(data["f_drive_Hz"])
    return SystemConfig(tuple(subsystems), int(data.get("reference_index", 1)),
                        omega_drive)


def load_config(path: str | Path) -> SystemConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))
