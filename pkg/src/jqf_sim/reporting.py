"""Figure rendering for the CLI report path.

Every experiment writes delimited output as the source of truth; these
helpers render a matplotlib overview figure next to each CSV so a run
directory is inspectable at a glance.  Rendering is best effort and never
fails a run.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

TWO_PI = 2.0 * math.pi


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_decay(times, fidelity, path, analytic=None, dark_level=None):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(times * 1e9, fidelity, label="numeric", lw=1.2)
    if analytic is not None:
        ax.plot(times * 1e9, analytic, "--", label="exponential", lw=1.0)
    if dark_level is not None:
        ax.axhline(dark_level, color="k", ls=":", lw=0.8, label="dark level")
    ax.set_xlabel("time (ns)")
    ax.set_ylabel("fidelity")
    ax.legend(loc="best", fontsize=8)
    _save(fig, path)


def render_sweep(freqs_hz, final_fidelity, path):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(np.asarray(freqs_hz) / 1e9, final_fidelity, ".-", lw=1.0)
    ax.set_xlabel("filter transition frequency (GHz)")
    ax.set_ylabel("final fidelity")
    _save(fig, path)


def render_reflection(freqs_hz, data, path):
    """``data`` maps label -> complex reflection array."""
    fig, axes = plt.subplots(2, 1, figsize=(6.0, 5.2), sharex=True)
    x = (np.asarray(freqs_hz) - np.mean(freqs_hz)) / 1e6
    for label, r in data.items():
        axes[0].plot(x, np.unwrap(np.angle(r)), lw=1.0, label=label)
        axes[1].plot(x, np.abs(r), lw=1.0, label=label)
    axes[0].set_ylabel("arg r (rad)")
    axes[1].set_ylabel("|r|")
    axes[1].set_xlabel("probe detuning from sweep center (MHz)")
    axes[0].legend(loc="best", fontsize=7)
    _save(fig, path)


def render_pulse(times, re_omega, im_omega, path):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(times * 1e9, np.asarray(re_omega) / TWO_PI / 1e6, label="Re", lw=1.0)
    ax.plot(times * 1e9, np.asarray(im_omega) / TWO_PI / 1e6, label="Im", lw=1.0)
    ax.set_xlabel("time (ns)")
    ax.set_ylabel("drive amplitude / 2$\\pi$ (MHz)")
    ax.legend(loc="best", fontsize=8)
    _save(fig, path)


def render_populations(times, fidelity, n_res, n_jqf, path):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(times * 1e9, fidelity, label="transfer fidelity", lw=1.2)
    ax.plot(times * 1e9, n_res, label="resonator population", lw=1.0)
    ax.plot(times * 1e9, n_jqf, label="filter population", lw=1.0)
    ax.set_xlabel("time (ns)")
    ax.set_ylabel("population / fidelity")
    ax.legend(loc="best", fontsize=8)
    _save(fig, path)


def render_history(iterations, fidelity, path):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.semilogy(np.asarray(iterations), 1.0 - np.asarray(fidelity), ".-", lw=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("1 - fidelity")
    _save(fig, path)


def render_dde(times, fidelity, path):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(times * 1e9, fidelity, lw=0.8)
    ax.set_xlabel("time (ns)")
    ax.set_ylabel("|stored amplitude|$^2$")
    _save(fig, path)
