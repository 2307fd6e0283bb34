"""Slow reference values for the CDF parameter derivatives.

Gamma: dP(alpha, z)/dalpha = P (log z - psi(alpha)) - z^alpha / (alpha Gamma(alpha + 1)) * S,
with S = sum_k alpha^2/(alpha+k)^2 (-z)^k / k!  (the 2F2(alpha, alpha; alpha+1, alpha+1; -z)
series), summed with Neumaier compensation.  The series alternates and cancels
badly once z is large; such points are flagged, and :func:`gamma_cdf_dalpha_batch`
re-evaluates them by adaptive quadrature of the differentiated integrand.

von Mises: the Bessel series of the CDF differentiated term by term, truncated
after 100 terms.

These routines use SciPy's special functions throughout and share no code with
:mod:`implicit_reparam.special`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy import special as sp

from .errors import ConvergenceError, DomainError

GAMMA_GRID = (1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)
VON_MISES_GRID = (1e-2, 1e-1, 1.0, 1e1)
GRID_DRAWS = 1000

# Largest term / |sum| tolerated before the series result is distrusted.
MAX_CANCELLATION = 1e6
VON_MISES_TERMS = 100


@dataclass(frozen=True)
class OracleResult:
    value: float
    terms_used: int
    tail_estimate: float
    flagged: bool = False
    method: str = "series"


@dataclass(frozen=True)
class GridBlock:
    family: str
    parameter: float
    samples: np.ndarray


def _check_gamma_args(z, alpha):
    z = np.asarray(z, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(np.isnan(z)) or np.any(np.isnan(alpha)):
        raise DomainError("NaN argument")
    if np.any(z < 0) or np.any(alpha <= 0):
        raise DomainError("need z >= 0 and alpha > 0")
    return np.broadcast_arrays(z, alpha)


def _hyp_series(z, a):
    """Neumaier-summed 2F2 series; returns (sum, terms, last |term|, cancellation)."""
    n = z.size
    total = np.ones(n)
    comp = np.zeros(n)
    t = np.ones(n)  # (-z)^k / k!
    biggest = np.ones(n)
    last = np.ones(n)
    terms = np.ones(n, dtype=np.int64)
    cap = np.floor(10.0 * z + 200.0)
    out_sum = np.empty(n)
    out_terms = np.empty(n, dtype=np.int64)
    out_last = np.empty(n)
    out_big = np.empty(n)
    idx = np.arange(n)
    a2 = a * a
    k = 0
    while idx.size:
        k += 1
        t = t * (-z) / k
        term = t * a2 / ((a + k) ** 2)
        s = total + term
        comp = comp + np.where(
            np.abs(total) >= np.abs(term), (total - s) + term, (term - s) + total
        )
        total = s
        biggest = np.maximum(biggest, np.abs(term))
        last = np.abs(term)
        terms = terms + 1
        done = (last < 1e-17 * np.abs(total + comp)) | (k >= cap) | ~np.isfinite(t)
        if done.any():
            sel = idx[done]
            out_sum[sel] = (total + comp)[done]
            out_terms[sel] = terms[done]
            out_last[sel] = last[done]
            out_big[sel] = biggest[done]
            keep = ~done
            idx = idx[keep]
            z, a, a2, t, total, comp = z[keep], a[keep], a2[keep], t[keep], total[keep], comp[keep]
            biggest, last, terms, cap = biggest[keep], last[keep], terms[keep], cap[keep]
    with np.errstate(divide="ignore", invalid="ignore"):
        cancel = out_big / np.abs(out_sum)
    cancel = np.where(np.isfinite(cancel), cancel, np.inf)
    return out_sum, out_terms, out_last, cancel


def _gamma_series_eval(z, a):
    """Vectorized series oracle; returns (value, terms, tail, flagged)."""
    n = z.size
    val = np.zeros(n)
    terms = np.zeros(n, dtype=np.int64)
    tail = np.zeros(n)
    flagged = np.zeros(n, dtype=bool)
    pos = z > 0
    if pos.any():
        zp, ap = z[pos], a[pos]
        # overflowing terms only occur at points that get flagged
        with np.errstate(over="ignore", invalid="ignore"):
            s, nt, last, cancel = _hyp_series(zp, ap)
            logz = np.log(zp)
            # z^a / (a Gamma(a + 1)) in log space
            scale = np.exp(ap * logz - np.log(ap) - sp.gammaln(ap + 1.0))
            v = sp.gammainc(ap, zp) * (logz - sp.psi(ap)) - scale * s
        val[pos] = v
        terms[pos] = nt
        tail[pos] = scale * last
        flagged[pos] = (cancel > MAX_CANCELLATION) | ~np.isfinite(v)
    return val, terms, tail, flagged


def gamma_cdf_dalpha(z: float, alpha: float) -> OracleResult:
    """dP(alpha, z)/dalpha from the hypergeometric series.

    Raises :class:`ConvergenceError` when the alternating series cancels by
    more than ``MAX_CANCELLATION``; the error carries the (untrusted) value.
    """
    z, alpha = _check_gamma_args(z, alpha)
    v, nt, tail, flag = _gamma_series_eval(z.reshape(1), alpha.reshape(1))
    res = OracleResult(float(v[0]), int(nt[0]), float(tail[0]), bool(flag[0]), "series")
    if res.flagged:
        raise ConvergenceError(
            f"2F2 series cancels catastrophically at z={float(z)}, alpha={float(alpha)}",
            last=res,
            failed=True,
        )
    return res


def _gamma_integrand(t, a, psi_a, lg_a):
    if t <= 0.0:
        return 0.0
    lt = math.log(t)
    return math.exp((a - 1.0) * lt - t - lg_a) * (lt - psi_a)


def gamma_cdf_dalpha_quad(z: float, alpha: float) -> OracleResult:
    """dP(alpha, z)/dalpha by adaptive quadrature of the differentiated integrand.

    Uses int_0^z t^(a-1) e^-t (log t - psi(a)) / Gamma(a) dt, or minus the same
    integral over [z, inf) when z lies above the mode (the full integral is 0).
    """
    z, alpha = _check_gamma_args(z, alpha)
    z, a = float(z), float(alpha)
    if z == 0.0:
        return OracleResult(0.0, 0, 0.0, False, "quadrature")
    psi_a = float(sp.psi(a))
    lg_a = float(sp.gammaln(a))
    opts = dict(epsabs=1e-15, epsrel=1e-13, limit=500)
    with warnings.catch_warnings():
        # quad warns when it cannot reach epsabs=1e-15; its error estimate is still returned
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        return _gamma_quad(z, a, psi_a, lg_a, opts)


def _gamma_quad(z, a, psi_a, lg_a, opts):
    if a < 1.0 and z <= max(a, 1.0):
        # t = s^(1/a) removes the t^(a-1) singularity at the origin
        def f(s):
            if s <= 0.0:
                return 0.0
            lt = math.log(s) / a
            return math.exp(-math.exp(lt) - lg_a) * (lt - psi_a) / a

        val, err = integrate.quad(f, 0.0, z**a, **opts)
        return OracleResult(val, 0, err, False, "quadrature")
    width = 40.0 * math.sqrt(a) + 40.0
    mode = max(a - 1.0, 0.0)
    if z <= max(a, 1.0):
        lo = max(0.0, mode - width)
        val, err = integrate.quad(_gamma_integrand, lo, z, args=(a, psi_a, lg_a), **opts)
    else:
        hi = max(z, mode) + width
        val, err = integrate.quad(_gamma_integrand, z, hi, args=(a, psi_a, lg_a), **opts)
        val = -val
    return OracleResult(val, 0, err, False, "quadrature")


@dataclass(frozen=True)
class BatchOracle:
    """Oracle values for a batch of points.

    ``method`` is "series" or "quadrature" per point; ``excluded`` marks points
    where neither method produced a trusted value.
    """

    value: np.ndarray
    method: np.ndarray
    excluded: np.ndarray

    @property
    def n_excluded(self) -> int:
        return int(self.excluded.sum())


def gamma_cdf_dalpha_batch(z, alpha, fallback: bool = True) -> BatchOracle:
    """Series oracle on arrays; flagged points fall back to quadrature."""
    z, alpha = _check_gamma_args(z, alpha)
    shape = z.shape
    zf, af = z.ravel(), alpha.ravel()
    val, _, _, flagged = _gamma_series_eval(zf, af)
    method = np.where(flagged, "quadrature", "series").astype(object)
    excluded = np.zeros(zf.size, dtype=bool)
    for i in np.flatnonzero(flagged):
        if not fallback:
            excluded[i] = True
            continue
        try:
            res = gamma_cdf_dalpha_quad(zf[i], af[i])
        except (ArithmeticError, ValueError):
            excluded[i] = True
            continue
        if np.isfinite(res.value) and res.tail_estimate <= 1e-12 + 1e-8 * abs(res.value):
            val[i] = res.value
        else:
            excluded[i] = True
    val[excluded] = np.nan
    return BatchOracle(val.reshape(shape), method.reshape(shape), excluded.reshape(shape))


def _von_mises_terms(z, kappa):
    z = np.asarray(z, dtype=np.float64)
    k = np.asarray(kappa, dtype=np.float64)
    if np.any(np.isnan(z)) or np.any(np.isnan(k)):
        raise DomainError("NaN argument")
    if np.any(np.abs(z) > math.pi) or np.any(k <= 0):
        raise DomainError("need z in [-pi, pi] and kappa > 0")
    z, k = np.broadcast_arrays(z, k)
    j = np.arange(1, VON_MISES_TERMS + 2, dtype=np.float64)
    kk = k[..., None]
    # Exponentially scaled Bessel functions; the scaling cancels in every ratio.
    ie = sp.ive(j, kk)
    i0 = sp.ive(0, k)[..., None]
    i1 = ie[..., :1]
    if not np.all(np.isfinite(ie)) or np.any(i0 == 0):
        raise ConvergenceError("Bessel evaluation out of range", last=None, failed=True)
    ij, ij1 = ie[..., :-1], ie[..., 1:]
    jj = j[:-1]
    coef = ((jj / kk) * ij + ij1) / i0 - ij * i1 / (i0 * i0)
    return coef * np.sin(jj * z[..., None]) / jj / math.pi


def von_mises_cdf_dkappa(z: float, kappa: float) -> OracleResult:
    """dF(z | 0, kappa)/dkappa from the Bessel series (100 terms)."""
    terms = _von_mises_terms(z, kappa)
    val = float(math.fsum(terms.ravel()))
    tail = float(abs(terms[..., -1]).max())
    flagged = tail > max(1e-3 * abs(val), 1e-17)
    return OracleResult(val, VON_MISES_TERMS, tail, flagged, "series")


def von_mises_cdf_dkappa_batch(z, kappa) -> BatchOracle:
    terms = _von_mises_terms(z, kappa)
    val = terms.sum(axis=-1)
    tail = np.abs(terms[..., -1])
    excluded = tail > np.maximum(1e-3 * np.abs(val), 1e-17)
    method = np.full(val.shape, "series", dtype=object)
    return BatchOracle(np.where(excluded, np.nan, val), method, excluded)


def oracle_grid(rng: np.random.Generator) -> list[GridBlock]:
    """The accuracy grid: 1000 draws from each distribution at each parameter value.

    Gamma draws are from Gamma(alpha, 1) and von Mises draws from
    vonMises(0, kappa), both using NumPy's own samplers, so the grid is
    independent of the samplers under test.
    """
    blocks = []
    for a in GAMMA_GRID:
        blocks.append(GridBlock("gamma", a, rng.standard_gamma(a, size=GRID_DRAWS)))
    for k in VON_MISES_GRID:
        blocks.append(GridBlock("von_mises", k, rng.vonmises(0.0, k, size=GRID_DRAWS)))
    return blocks
