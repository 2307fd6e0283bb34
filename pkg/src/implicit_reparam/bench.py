"""Computations behind the command-line benchmarks and checks."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy import special as sp

from . import distributions as dist
from . import oracle
from . import special as S
from .dual import Dual
from .errors import ConvergenceError, DegenerateWindowError, DomainError
from .estimators import Objective, implicit_pathwise

PRECISIONS = {"single": np.float32, "double": np.float64}
FAMILIES = ("gamma", "von-mises")
METHODS = ("autodiff", "finite-diff")
MAX_ORACLE_FAILURE_RATE = 0.05


def fd_step(family: str, precision: str) -> float:
    return dist.FD_STEPS[(family.replace("-", "_"), precision)]


def _cdf(family):
    return S.reg_inc_gamma if family == "gamma" else S.von_mises_cdf


def cdf_derivative(family: str, method: str, z, param, delta: float | None = None):
    """dF(z | param)/dparam in the dtype of ``z``; returns (values, failed mask).

    Gamma autodiff uses the forward-mode kernel with the tangent written into
    the loops; von Mises autodiff evaluates the CDF on a dual.
    """
    z = np.asarray(z)
    p = np.full_like(z, param)
    cdf = _cdf(family)
    try:
        if method == "autodiff" and family == "gamma":
            return S.reg_inc_gamma_with_dalpha(z, p)[1], np.zeros(z.shape, dtype=bool)
        if method == "autodiff":
            return cdf(z, Dual(p, np.ones_like(p))).tan, np.zeros(z.shape, dtype=bool)
        return S.cdf_param_fd(cdf, z, p, delta), np.zeros(z.shape, dtype=bool)
    except ConvergenceError as err:
        last = err.last.tan if isinstance(err.last, Dual) else err.last
        return np.asarray(last), np.asarray(err.failed)


def median_time(fn: Callable[[], object], repeats: int = 5, warmup: bool = True) -> float:
    if warmup:
        fn()
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


@dataclass
class AccuracyRow:
    family: str
    precision: str
    method: str
    mean_abs_error: float
    mean_abs_error_dz: float
    seconds_per_element: float
    n_points: int
    n_excluded: int
    n_quadrature: int
    n_not_converged: int
    delta: float | None

    def as_dict(self):
        return asdict(self)


TIMING_FIELDS = ("seconds_per_element", "seconds_per_sample")


def median_times(fns: list[Callable[[], object]], repeats: int = 5) -> list[float]:
    """Median wall time of each function, run in turn on every repeat so that
    drift in machine state affects all of them alike."""
    for fn in fns:
        fn()
    ts = [[] for _ in fns]
    for _ in range(repeats):
        for fn, t in zip(fns, ts):
            t0 = time.perf_counter()
            fn()
            t.append(time.perf_counter() - t0)
    return [float(np.median(t)) for t in ts]


def _family_blocks(family, seed):
    name = family.replace("-", "_")
    return [b for b in oracle.oracle_grid(np.random.default_rng(seed)) if b.family == name]


def accuracy(
    family: str, precision: str, method: str, seed: int = 0, delta: float | None = None
) -> AccuracyRow:
    """Mean absolute error of dF/dparam against the oracle on the accuracy grid.

    Grid points are rounded to the working precision first and the oracle is
    evaluated in double precision at the rounded points.  ``mean_abs_error_dz``
    is the corresponding error of dz/dparam = -(dF/dparam)/pdf.
    """
    if family not in FAMILIES or precision not in PRECISIONS or method not in METHODS:
        raise ValueError("invalid family/precision/method")
    dtype = PRECISIONS[precision]
    if method == "finite-diff" and delta is None:
        delta = fd_step(family, precision)
    errs, errs_dz = [], []
    n_points = n_excl = n_quad = n_fail = 0
    timings = []
    for block in _family_blocks(family, seed):
        z = block.samples.astype(dtype)
        p = dtype(block.parameter)
        d, failed = cdf_derivative(family, method, z, p, delta)
        timings.append(median_time(lambda: cdf_derivative(family, method, z, p, delta)))
        z64, p64 = z.astype(np.float64), float(p)
        if family == "gamma":
            orc = oracle.gamma_cdf_dalpha_batch(z64, p64)
            with np.errstate(divide="ignore", over="ignore"):
                logpdf = (p64 - 1) * np.log(z64) - z64 - sp.gammaln(p64)
        else:
            orc = oracle.von_mises_cdf_dkappa_batch(z64, p64)
            logpdf = p64 * (np.cos(z64) - 1) - math.log(2 * math.pi) - np.log(sp.ive(0, p64))
        keep = ~orc.excluded & ~failed
        err = np.abs(d.astype(np.float64) - orc.value)
        errs.append(err[keep])
        pdf = np.exp(logpdf)
        ok_dz = keep & (pdf > 0) & np.isfinite(pdf)
        errs_dz.append(err[ok_dz] / pdf[ok_dz])
        n_points += z.size
        n_excl += orc.n_excluded
        n_quad += int(np.sum(orc.method == "quadrature"))
        n_fail += int(failed.sum())
    all_err = np.concatenate(errs)
    all_dz = np.concatenate(errs_dz)
    return AccuracyRow(
        family,
        precision,
        method,
        float(all_err.mean()),
        float(all_dz.mean()),
        float(sum(timings) / n_points),
        n_points,
        n_excl,
        n_quad,
        n_fail,
        delta,
    )


@dataclass
class SpeedReport:
    precision: str
    n: int
    plain: float
    autodiff: float
    dual: float
    fused: float
    finite_diff: float

    @property
    def autodiff_ratio(self) -> float:
        return self.autodiff / self.plain

    @property
    def dual_ratio(self) -> float:
        return self.dual / self.plain

    @property
    def fused_ratio(self) -> float:
        return self.fused / self.plain


def gamma_speed(precision: str = "double", n: int = 100_000, seed: int = 0, repeats: int = 5) -> SpeedReport:
    """Median wall time of the CDF and of its alpha-derivative by each route.

    ``autodiff`` is the forward-mode kernel, ``dual`` the CDF evaluated on a
    dual, ``fused`` the cancelled dz/dalpha kernel.

    The shapes cycle through the accuracy grid and the points are Gamma draws.
    """
    dtype = PRECISIONS[precision]
    rng = np.random.default_rng(seed)
    alpha = np.resize(np.array(oracle.GAMMA_GRID), n)
    z = rng.standard_gamma(alpha).astype(dtype)
    a = alpha.astype(dtype)
    z = np.maximum(z, np.finfo(dtype).tiny)
    ad = Dual(a, np.ones_like(a))
    delta = fd_step("gamma", precision)
    times = median_times(
        [
            lambda: S.reg_inc_gamma(z, a),
            lambda: S.reg_inc_gamma_with_dalpha(z, a),
            lambda: S.reg_inc_gamma(z, ad),
            lambda: S.gamma_dlogz_dalpha(z, a),
            lambda: S.cdf_param_fd(S.reg_inc_gamma, z, a, delta),
        ],
        repeats,
    )
    return SpeedReport(precision, n, *times)


# ---------------------------------------------------------------------------
# sanity checks


@dataclass
class CheckResult:
    family: str
    parameter: float
    estimate: float
    target: float
    stderr: float
    passed: bool

    def as_dict(self):
        return asdict(self)


def _identity():
    return Objective(lambda z: z[:, 0], lambda z: np.ones_like(z))


def _cosine():
    return Objective(lambda z: np.cos(z[:, 0]), lambda z: -np.sin(z))


def check_gamma(alpha: float, n: int, rng) -> CheckResult:
    rep = implicit_pathwise(_identity(), "gamma", [alpha, 1.0], n, rng, wrt=[0])
    est, se = float(rep.mean_grad[0]), float(rep.stderr[0])
    return CheckResult("gamma", alpha, est, 1.0, se, abs(est - 1.0) <= 3 * se)


def von_mises_cos_target(kappa: float) -> float:
    return float(S.bessel_i_ratio_dkappa(kappa))


def check_von_mises(kappa: float, n: int, rng) -> CheckResult:
    rep = implicit_pathwise(_cosine(), "von_mises", [0.0, kappa], n, rng, wrt=[1])
    est, se = float(rep.mean_grad[0]), float(rep.stderr[0])
    t = von_mises_cos_target(kappa)
    return CheckResult("von-mises", kappa, est, t, se, abs(est - t) <= 3 * se)


def max_ulp_gap(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ulp = np.spacing(np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / ulp))


def check_normal(n: int, rng) -> CheckResult:
    """Explicit and implicit Normal Jacobians over n random (mu, sigma, draw) triples."""
    mus = rng.uniform(-10, 10, n)
    sigmas = np.exp(rng.uniform(-3, 3, n))
    z = mus + sigmas * rng.standard_normal(n)
    e, i = dist.normal_jacobians(z, mus, sigmas)
    worst = max_ulp_gap(e, i)
    return CheckResult("normal", float(n), worst, 4.0, 0.0, worst <= 4.0)


def sanity(families, n: int, seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for fam in families:
        if fam == "gamma":
            out += [check_gamma(a, n, rng) for a in (0.3, 1.0, 10.0)]
        elif fam == "von-mises":
            out += [check_von_mises(k, n, rng) for k in (0.5, 2.0)]
        elif fam == "normal":
            out.append(check_normal(1000, rng))
        else:
            raise ValueError(f"unknown family {fam!r}")
    return out


# ---------------------------------------------------------------------------
# single-point gradient check


@dataclass
class GradcheckRow:
    family: str
    parameter: str
    z: float
    autodiff: float
    finite_diff: float
    oracle: float | None
    delta: float
    autodiff_minus_fd: float
    autodiff_minus_oracle: float | None

    def as_dict(self):
        return asdict(self)


def gradcheck(family: str, params: dict, z: float, delta: float | None = None) -> GradcheckRow:
    """dF(z)/dparam by autodiff, finite differences and (where available) the oracle."""
    if family == "gamma":
        a = float(params.get("alpha", params.get("shape", 1.0)))
        delta = delta or fd_step("gamma", "double")
        ad = float(S.reg_inc_gamma(z, Dual(a, 1.0)).tan)
        fd = float(S.cdf_param_fd(S.reg_inc_gamma, z, a, delta))
        try:
            orc = oracle.gamma_cdf_dalpha(z, a).value
        except ConvergenceError:
            orc = oracle.gamma_cdf_dalpha_quad(z, a).value
        pname = "alpha"
    elif family == "von-mises":
        k = float(params.get("kappa", params.get("concentration", 1.0)))
        delta = delta or fd_step("von-mises", "double")
        ad = float(S.von_mises_cdf(z, Dual(k, 1.0)).tan)
        fd = float(S.cdf_param_fd(S.von_mises_cdf, z, k, delta))
        orc = oracle.von_mises_cdf_dkappa(z, k).value
        pname = "kappa"
    elif family == "truncated-normal":
        mu = float(params.get("mu", 0.0))
        sigma = float(params.get("sigma", 1.0))
        a, b = float(params.get("a", -1.0)), float(params.get("b", 1.0))
        win = dist.TruncationWindow(a, b)
        delta = delta or 1e-6

        def fhat(m):
            Fa, Fb = (S.normal_cdf((x - m) / sigma) for x in (win.a, win.b))
            mass = Fb - Fa
            if not float(getattr(mass, "val", mass)) > dist.MIN_WINDOW_MASS:
                raise DegenerateWindowError(
                    f"window [{a}, {b}] has probability mass {float(getattr(mass, 'val', mass)):.3g}"
                    f" under normal(mu={mu}, sigma={sigma})"
                )
            return (S.normal_cdf((z - m) / sigma) - Fa) / mass

        ad = float(fhat(Dual(mu, 1.0)).tan)
        h = delta * max(abs(mu), 1.0)
        fd = float((fhat(mu + h) - fhat(mu - h)) / (2 * h))
        orc = None
        pname = "mu"
    else:
        raise DomainError(f"gradcheck does not support family {family!r}")
    return GradcheckRow(
        family,
        pname,
        float(z),
        ad,
        fd,
        orc,
        float(delta),
        ad - fd,
        None if orc is None else ad - orc,
    )
