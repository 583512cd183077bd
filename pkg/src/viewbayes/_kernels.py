"""Compiled inner loops for the rotation Monte-Carlo average."""

import math

import numpy as np
from numba import njit

# Large-argument expansion of I0: e^z / sqrt(2 pi z) * sum_n c_n / z^n.
I0_ASYMPTOTIC = np.empty(10)
I0_ASYMPTOTIC[0] = 1.0
for _n in range(1, 10):
    I0_ASYMPTOTIC[_n] = I0_ASYMPTOTIC[_n - 1] * (2 * _n - 1) ** 2 / (8 * _n)
I0_SWITCH = 50.0


@njit(cache=True, nogil=True)
def log_i0(z):
    if z < I0_SWITCH:
        # Power series sum (z^2/4)^n / (n!)^2; all terms positive.
        q = 0.25 * z * z
        term = 1.0
        total = 1.0
        n = 1
        while True:
            term *= q / (n * n)
            total += term
            if term < 1e-17 * total:
                break
            n += 1
        return math.log(total)
    inv = 1.0 / z
    series = 0.0
    for i in range(I0_ASYMPTOTIC.size - 1, -1, -1):
        series = series * inv + I0_ASYMPTOTIC[i]
    return z - 0.5 * math.log(2.0 * math.pi * z) + math.log(series)


# Entries whose upper bound sits this far below the largest bound contribute
# less than exp(-40) relative to the mean and are treated as zero.
SKIP_GAP = 50.0


@njit(cache=True, nogil=True)
def row_log_mean_exp(re, im, model_sq, scatter, axis_outer, log_iw, const, var, analytic):
    """Per row: log of the mean integrand and the delta-method SE of that log.

    With ``p = model_sq[s] - scatter[s] . axis_outer[q]`` the squared norm of
    the projected model, the integrand at (s, q) is
    ``const - p/(2 var) + log I0(|re + i im| / var)`` (``analytic``) or
    ``const - p/(2 var) + re/var``, plus the importance log-weight
    ``log_iw[q]`` of rotation q.  Since
    ``log I0(z) <= z``, the Bessel factor is only evaluated where that bound
    comes within ``SKIP_GAP`` of the row maximum.
    """
    nrow, ncol = re.shape
    out_log = np.empty(nrow)
    out_se = np.empty(nrow)
    buf = np.empty(ncol)
    zbuf = np.empty(ncol)
    inv2 = 0.5 / var
    inv = 1.0 / var
    for s in range(nrow):
        top = -np.inf
        for q in range(ncol):
            p = model_sq[s]
            for c in range(9):
                p -= scatter[s, c] * axis_outer[q, c]
            val = const - p * inv2 + log_iw[q]
            if analytic:
                z = math.sqrt(re[s, q] * re[s, q] + im[s, q] * im[s, q]) * inv
                zbuf[q] = z
                val += z
            else:
                val += re[s, q] * inv
            buf[q] = val
            if val > top:
                top = val
        if top == -np.inf:
            out_log[s] = -np.inf
            out_se[s] = np.inf
            continue
        if analytic:
            cutoff = top - SKIP_GAP
            top = -np.inf
            for q in range(ncol):
                if buf[q] > cutoff:
                    z = zbuf[q]
                    buf[q] = buf[q] - z + log_i0(z)
                    if buf[q] > top:
                        top = buf[q]
                else:
                    buf[q] = -np.inf
        total = 0.0
        for q in range(ncol):
            buf[q] = math.exp(buf[q] - top)
            total += buf[q]
        mean = total / ncol
        ss = 0.0
        for q in range(ncol):
            d = buf[q] - mean
            ss += d * d
        out_log[s] = math.log(mean) + top
        if ncol > 1:
            out_se[s] = math.sqrt(ss / (ncol - 1) / ncol) / mean
        else:
            out_se[s] = 0.0
    return out_log, out_se
