"""Compiled inner loops: sparse generator application and the delay integrator.

The master-equation generators are applied in a factored form,
``L(rho) = E rho + rho F + sum_k c_k A_k rho B_k``, using CSR matrix times
dense matrix kernels on the ``dim x dim`` density matrix.  Right
multiplications go through the transposed identity ``rho B = (B^T rho^T)^T``
so every product is a row-contiguous CSR pass.  For small systems the fully
materialized superoperator matvec is cheaper than many tiny kernel calls,
so both paths exist behind one interface.

All kernels are single-threaded and allocation-free, which keeps reruns
bit-for-bit deterministic and lets sweeps parallelize across processes.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from numba import njit

_SUPEROP_DIM_LIMIT = 48  # below this, one big matvec beats many small kernels


# ---------------------------------------------------------------------------
# numba primitives
# ---------------------------------------------------------------------------

@njit(cache=True)
def _csr_mm(alpha, data, indices, indptr, x, y, accumulate):
    """y (+)= alpha * A @ x for CSR A and C-contiguous 2-D x, y."""
    n = indptr.shape[0] - 1
    ncol = x.shape[1]
    if not accumulate:
        for i in range(n):
            for j in range(ncol):
                y[i, j] = 0.0
    for r in range(n):
        for p in range(indptr[r], indptr[r + 1]):
            v = alpha * data[p]
            c = indices[p]
            for j in range(ncol):
                y[r, j] += v * x[c, j]


@njit(cache=True)
def _csr_mv(alpha, data, indices, indptr, x, y, accumulate):
    """y (+)= alpha * A @ x for CSR A and 1-D x, y."""
    n = indptr.shape[0] - 1
    if not accumulate:
        for i in range(n):
            y[i] = 0.0
    for r in range(n):
        acc = 0.0 + 0.0j
        for p in range(indptr[r], indptr[r + 1]):
            acc += data[p] * x[indices[p]]
        y[r] += alpha * acc


@njit(cache=True)
def _transpose_into(out, x):
    n, m = x.shape
    for i in range(n):
        for j in range(m):
            out[j, i] = x[i, j]


@njit(cache=True)
def _add_transposed(y, w, alpha):
    n, m = y.shape
    for i in range(n):
        for j in range(m):
            y[i, j] += alpha * w[j, i]


@njit(cache=True)
def _axpy(y, x, alpha):
    n = x.size
    yf = y.reshape(n)
    xf = x.reshape(n)
    for i in range(n):
        yf[i] += alpha * xf[i]


# ---------------------------------------------------------------------------
# Generator action
# ---------------------------------------------------------------------------

def _csr_arrays(mat: sp.spmatrix):
    m = sp.csr_matrix(mat)
    m.sum_duplicates()
    return (np.ascontiguousarray(m.data.astype(np.complex128)),
            np.ascontiguousarray(m.indices.astype(np.int32)),
            np.ascontiguousarray(m.indptr.astype(np.int32)))


def _merge_single_sided(terms, dim):
    """Split terms into merged left factor, merged right factor, pair list."""
    left = None
    right = None
    pairs = []
    for a, b, coeff in terms:
        if a is not None and b is not None:
            pairs.append((a, b, coeff))
        elif a is not None:
            left = coeff * a if left is None else left + coeff * a
        elif b is not None:
            right = coeff * b if right is None else right + coeff * b
        else:
            left_eye = coeff * sp.identity(dim, format="csr", dtype=complex)
            left = left_eye if left is None else left + left_eye
    return left, right, pairs


def _dagger_terms(terms):
    out = []
    for a, b, coeff in terms:
        ad = sp.csr_matrix(a.conj().T) if a is not None else None
        bd = sp.csr_matrix(b.conj().T) if b is not None else None
        out.append((ad, bd, np.conj(coeff)))
    return out


class GeneratorAction:
    """Applies ``L0 + re*T_re + im*T_im`` to density matrices.

    Built once from the factored term lists of a generator; ``apply`` then
    runs entirely in preallocated compiled kernels.  ``mode`` selects the
    factored path or a materialized-superoperator matvec (chosen
    automatically by dimension).
    """

    def __init__(self, dim, drift_terms, drive_re_terms=(), drive_im_terms=(),
                 dagger=False, mode="auto"):
        self.dim = dim
        if dagger:
            drift_terms = _dagger_terms(drift_terms)
            drive_re_terms = _dagger_terms(drive_re_terms)
            drive_im_terms = _dagger_terms(drive_im_terms)
        self.has_drive = bool(drive_re_terms) or bool(drive_im_terms)
        if mode == "auto":
            mode = "super" if dim <= _SUPEROP_DIM_LIMIT else "factored"
        self.mode = mode

        if mode == "super":
            self._l0 = _csr_arrays(_terms_superop(drift_terms, dim))
            self._tre = _csr_arrays(_terms_superop(drive_re_terms, dim)) \
                if drive_re_terms else None
            self._tim = _csr_arrays(_terms_superop(drive_im_terms, dim)) \
                if drive_im_terms else None
            return

        left, right, pairs = _merge_single_sided(drift_terms, dim)
        self._left = _csr_arrays(left) if left is not None else None
        self._rightT = _csr_arrays(right.T) if right is not None else None
        self._pairs = [(_csr_arrays(a), _csr_arrays(b.T), complex(coeff))
                       for a, b, coeff in pairs]
        self._drive = {}
        for name, terms in (("re", drive_re_terms), ("im", drive_im_terms)):
            if not terms:
                continue
            dl, dr, dp = _merge_single_sided(terms, dim)
            if dp:
                raise ValueError("drive terms must be single-sided")
            self._drive[name] = (
                _csr_arrays(dl) if dl is not None else None,
                _csr_arrays(dr.T) if dr is not None else None,
            )
        self._xt = np.empty((dim, dim), dtype=np.complex128)
        self._w = np.empty((dim, dim), dtype=np.complex128)
        self._w2 = np.empty((dim, dim), dtype=np.complex128)

    # -- application ---------------------------------------------------------

    def apply(self, x: np.ndarray, out: np.ndarray, re: float = 0.0,
              im: float = 0.0) -> None:
        """out = (L0 + re*T_re + im*T_im) x, with x, out of shape (dim, dim)."""
        if self.mode == "super":
            xf = x.reshape(-1)
            yf = out.reshape(-1)
            _csr_mv(1.0 + 0.0j, *self._l0, xf, yf, False)
            if re != 0.0 and self._tre is not None:
                _csr_mv(complex(re), *self._tre, xf, yf, True)
            if im != 0.0 and self._tim is not None:
                _csr_mv(complex(im), *self._tim, xf, yf, True)
            return

        xt, w, w2 = self._xt, self._w, self._w2
        _transpose_into(xt, x)
        started = False
        if self._left is not None:
            _csr_mm(1.0 + 0.0j, *self._left, x, out, False)
            started = True
        if self._rightT is not None:
            _csr_mm(1.0 + 0.0j, *self._rightT, xt, w, False)
            if not started:
                out[:] = 0.0
                started = True
            _add_transposed(out, w, 1.0 + 0.0j)
        if not started:
            out[:] = 0.0
        for a, bt, coeff in self._pairs:
            _csr_mm(1.0 + 0.0j, *bt, xt, w, False)
            _transpose_into(w2, w)
            _csr_mm(coeff, *a, w2, out, True)
        for name, scale in (("re", re), ("im", im)):
            if scale == 0.0 or name not in self._drive:
                continue
            dl, dr = self._drive[name]
            if dl is not None:
                _csr_mm(complex(scale), *dl, x, out, True)
            if dr is not None:
                _csr_mm(1.0 + 0.0j, *dr, xt, w, False)
                _add_transposed(out, w, complex(scale))

    def apply_vec(self, x: np.ndarray, out: np.ndarray, re: float = 0.0,
                  im: float = 0.0) -> None:
        """Same as :meth:`apply` for vectorized states of shape (dim**2,)."""
        d = self.dim
        self.apply(x.reshape(d, d), out.reshape(d, d), re, im)


def _terms_superop(terms, dim):
    ident = sp.identity(dim, format="csr", dtype=complex)
    total = sp.csr_matrix((dim * dim, dim * dim), dtype=complex)
    for a, b, coeff in terms:
        left = a if a is not None else ident
        right = b if b is not None else ident
        total = total + coeff * sp.kron(left, right.T, format="csr")
    return sp.csr_matrix(total)


# ---------------------------------------------------------------------------
# Delay integrator
# ---------------------------------------------------------------------------

@njit(cache=True)
def dde_euler(m00, m01, m10, m11, m22, c1b, c2b, cbb, cb1, cb2,
              dt, n_steps, k_delay, stride, out_a1, out_a2, out_b,
              enable_delays):
    """Euler integration of the three single-excitation amplitudes.

    ``m..`` are the instantaneous coefficients, ``c1b``/``c2b`` couple the
    filter amplitude delayed by one line transit into the first two
    amplitudes, ``cb1``/``cb2`` the reverse, and ``cbb`` is the mirror
    self-coupling delayed by the round trip.  Delayed contributions switch
    on only once the corresponding transit has elapsed (``k_delay`` steps
    one way); with ``k_delay == 0`` they act instantaneously.

    Amplitudes are sampled every ``stride`` steps into the ``out_*`` arrays
    (index 0 holds the initial state).
    """
    a1 = 1.0 + 0.0j
    a2 = 0.0 + 0.0j
    b = 0.0 + 0.0j

    len1 = k_delay + 1 if k_delay > 0 else 1
    len2 = 2 * k_delay + 1 if k_delay > 0 else 1
    buf_a1 = np.zeros(len1, dtype=np.complex128)
    buf_a2 = np.zeros(len1, dtype=np.complex128)
    buf_b = np.zeros(len2, dtype=np.complex128)

    out_a1[0] = a1
    out_a2[0] = a2
    out_b[0] = b
    n_out = out_a1.shape[0]

    for s in range(n_steps):
        buf_a1[s % len1] = a1
        buf_a2[s % len1] = a2
        buf_b[s % len2] = b

        d_a1 = m00 * a1 + m01 * a2
        d_a2 = m10 * a1 + m11 * a2
        d_b = m22 * b
        if enable_delays:
            if k_delay == 0:
                d_a1 += c1b * b
                d_a2 += c2b * b
                d_b += cbb * b + cb1 * a1 + cb2 * a2
            else:
                if s >= k_delay:
                    b_tau = buf_b[(s - k_delay) % len2]
                    d_a1 += c1b * b_tau
                    d_a2 += c2b * b_tau
                    d_b += cb1 * buf_a1[(s - k_delay) % len1]
                    d_b += cb2 * buf_a2[(s - k_delay) % len1]
                if s >= 2 * k_delay:
                    d_b += cbb * buf_b[(s - 2 * k_delay) % len2]

        a1 = a1 + dt * d_a1
        a2 = a2 + dt * d_a2
        b = b + dt * d_b

        if (s + 1) % stride == 0:
            idx = (s + 1) // stride
            if idx < n_out:
                out_a1[idx] = a1
                out_a2[idx] = a2
                out_b[idx] = b
