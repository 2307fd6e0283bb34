"""Samplers paired with implicit reparameterization Jacobians.

Every sampler returns a :class:`GradSample` holding a batch of draws ``z`` of
shape ``(n, D)`` and the Jacobian ``jac[s, d, j] = dz_d/dphi_j`` of shape
``(n, D, P)``.  Drawing and differentiating are separate steps: the Jacobian is
obtained from the standardization function S_phi (a CDF, or a chain of
conditional CDFs) evaluated at the finished draw,

    dz/dphi = -(dS/dz)^-1 dS/dphi,

so any exact sampler can back a family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special as sp

from . import dual as D
from . import special as S
from .dual import Dual, value
from .errors import (
    DegenerateResponsibilityError,
    DegenerateWindowError,
    DomainError,
    GradientOverflowError,
    SamplerError,
)

CLIP_RANGE = (1e-3, 1e3)
MIN_WINDOW_MASS = 1e-12
MAX_REJECTION_ROUNDS = 10_000

# Relative finite-difference steps per (family, precision), used when
# grad_method="finite-diff" and no delta is given.
FD_STEPS = {
    ("gamma", "single"): 1e-3,
    ("gamma", "double"): 1e-5,
    ("von_mises", "single"): 1e-1,
    ("von_mises", "double"): 1e-4,
}
GRAD_METHODS = ("autodiff", "finite-diff")


def wrap_angle(x):
    """Map angles into [-pi, pi)."""
    return np.mod(np.asarray(x) + math.pi, 2.0 * math.pi) - math.pi


# ---------------------------------------------------------------------------
# parameter records


def _positive(name, x):
    if not (np.isfinite(x) and x > 0):
        raise DomainError(f"{name} must be a positive finite number, got {x!r}")


@dataclass(frozen=True)
class GammaParams:
    shape: float
    rate: float = 1.0

    def __post_init__(self):
        _positive("shape", self.shape)
        _positive("rate", self.rate)

    @classmethod
    def clipped(cls, shape, rate=1.0):
        lo, hi = CLIP_RANGE
        return cls(float(np.clip(shape, lo, hi)), float(np.clip(rate, lo, hi)))

    def as_tuple(self):
        return (self.shape, self.rate)


@dataclass(frozen=True)
class VonMisesParams:
    loc: float
    concentration: float

    def __post_init__(self):
        _positive("concentration", self.concentration)
        if not np.isfinite(self.loc):
            raise DomainError("loc must be finite")
        object.__setattr__(self, "loc", float(wrap_angle(self.loc)))

    @classmethod
    def from_xy(cls, x, y, concentration):
        """Location given as mu = atan2(x, y)."""
        return cls(math.atan2(x, y), concentration)

    def as_tuple(self):
        return (self.loc, self.concentration)


@dataclass(frozen=True)
class TruncationWindow:
    a: float
    b: float

    def __post_init__(self):
        if np.isnan(self.a) or np.isnan(self.b) or not self.a < self.b:
            raise DomainError(f"window needs a < b, got [{self.a}, {self.b}]")


MIXTURE_FAMILIES = ("normal", "gamma")


@dataclass(frozen=True)
class MixtureParams:
    """K-component mixture with factorized components.

    ``components[k, d]`` holds the base-family parameters of component k in
    dimension d: (loc, scale) for normal, (shape, rate) for gamma.
    """

    weights: np.ndarray
    components: np.ndarray
    family: str = "normal"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        c = np.asarray(self.components, dtype=np.float64)
        if c.ndim == 2:
            c = c[:, None, :]
        if self.family not in MIXTURE_FAMILIES:
            raise DomainError(f"mixture base family must be one of {MIXTURE_FAMILIES}")
        if w.ndim != 1 or w.size < 1 or c.ndim != 3 or c.shape[0] != w.size or c.shape[2] != 2:
            raise DomainError("weights (K,) and components (K, D, 2) are inconsistent")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("mixture weights must be nonnegative and sum to 1")
        if np.any(~(c[..., 1] > 0)) or (self.family == "gamma" and np.any(~(c[..., 0] > 0))):
            raise DomainError("invalid component parameters")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", c)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    def param_names(self) -> list[str]:
        p = ("loc", "scale") if self.family == "normal" else ("shape", "rate")
        names = [f"w{k}" for k in range(self.n_components)]
        for k in range(self.n_components):
            for d in range(self.dim):
                names += [f"{p[0]}[{k},{d}]", f"{p[1]}[{k},{d}]"]
        return names


@dataclass
class GradSample:
    """Draws ``z`` (n, D) and Jacobians ``jac`` (n, D, P) with parameter names."""

    z: np.ndarray
    jac: np.ndarray
    params: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.z.ndim != 2 or self.jac.ndim != 3 or self.jac.shape[:2] != self.z.shape:
            raise ValueError(f"inconsistent shapes z{self.z.shape} jac{self.jac.shape}")

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def column(self, name: str) -> np.ndarray:
        """dz/dphi for one named parameter, shape (n, D)."""
        return self.jac[:, :, self.params.index(name)]


def _finite_jac(jac, what):
    if not np.all(np.isfinite(jac)):
        raise GradientOverflowError(f"{what}: density at a draw is numerically zero")
    return jac


def _check_method(grad_method):
    if grad_method not in GRAD_METHODS:
        raise ValueError(f"grad_method must be one of {GRAD_METHODS}")


def _rng_check(n):
    if int(n) != n or n < 1:
        raise ValueError("n must be a positive integer")
    return int(n)


# ---------------------------------------------------------------------------
# Gamma


def _mt_log_gamma(alpha, rng, n):
    """log of Gamma(alpha, 1) draws by the Marsaglia-Tsang squeeze method.

    For alpha < 1 the draw for alpha + 1 is multiplied by U^(1/alpha), which is
    applied in log space so tiny shapes do not underflow.
    """
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n,))
    boost = alpha < 1
    a = np.where(boost, alpha + 1.0, alpha)
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty(n)
    todo = np.arange(n)
    for _ in range(MAX_REJECTION_ROUNDS):
        m = todo.size
        x = rng.standard_normal(m)
        u = rng.random(m)
        dd, cc = d[todo], c[todo]
        v = 1.0 + cc * x
        ok = v > 0
        v3 = np.where(ok, v, 1.0) ** 3
        x2 = x * x
        accept = ok & (
            (u < 1.0 - 0.0331 * x2 * x2)
            | (np.log(u) < 0.5 * x2 + dd * (1.0 - v3 + np.log(v3)))
        )
        out[todo[accept]] = np.log(dd[accept]) + np.log(v3[accept])
        todo = todo[~accept]
        if todo.size == 0:
            break
    else:
        raise SamplerError("gamma sampler exceeded its rejection budget")
    if boost.any():
        u = rng.random(int(boost.sum()))
        out[boost] += np.log(u) / alpha[boost]
    return out


def _numpy_log_gamma(alpha, rng, n):
    with np.errstate(divide="ignore"):
        return np.log(rng.standard_gamma(alpha, size=n))


GAMMA_SAMPLERS: dict[str, Callable] = {
    "marsaglia-tsang": _mt_log_gamma,
    "numpy": _numpy_log_gamma,
}


def gamma_cdf_dalpha_fd(z, alpha, delta):
    """Central finite difference of P(alpha, z) in alpha with relative step delta."""
    return S.cdf_param_fd(S.reg_inc_gamma, z, alpha, delta)


def _dlog_gamma(g, log_g, alpha, grad_method, delta):
    """d(log g)/d(alpha) for standard gamma draws g."""
    if grad_method == "autodiff":
        return S.gamma_dlogz_dalpha(g, alpha, log_z=log_g)
    if delta is None:
        delta = FD_STEPS[("gamma", "double")]
    dF = gamma_cdf_dalpha_fd(g, alpha, delta)
    with np.errstate(over="ignore", divide="ignore"):
        return -dF / np.exp(S.gamma_log_pdf_std(g, np.broadcast_to(alpha, np.shape(g))) + log_g)


def log_standard_gamma(alpha, rng, n, sampler="marsaglia-tsang"):
    if sampler not in GAMMA_SAMPLERS:
        raise ValueError(f"unknown gamma sampler {sampler!r}")
    return GAMMA_SAMPLERS[sampler](alpha, rng, n)


def sample_gamma(
    params: GammaParams,
    rng: np.random.Generator,
    n: int = 1,
    *,
    sampler: str = "marsaglia-tsang",
    grad_method: str = "autodiff",
    delta: float | None = None,
) -> GradSample:
    """Gamma(shape, rate) draws with Jacobian columns (shape, rate).

    The shape derivative uses the fused incomplete-gamma kernel (autodiff) or
    central differences of the CDF (finite-diff); the rate derivative is -z/rate.
    """
    n = _rng_check(n)
    _check_method(grad_method)
    a, b = params.shape, params.rate
    log_g = log_standard_gamma(a, rng, n, sampler)
    g = np.exp(log_g)
    z = g / b
    if grad_method == "autodiff" or np.all(g > 0):
        dlog = _dlog_gamma(g, log_g, a, grad_method, delta)
    else:
        raise GradientOverflowError("finite-difference gradient at an underflowed draw")
    jac = np.stack([z * dlog, -z / b], axis=-1)
    jac = np.where(z[:, None] == 0, 0.0, jac)
    return GradSample(z[:, None], _finite_jac(jac, "gamma")[:, None, :], ("shape", "rate"))


# ---------------------------------------------------------------------------
# Beta, Dirichlet, Student-t


def sample_beta(
    a: float,
    b: float,
    rng: np.random.Generator,
    n: int = 1,
    *,
    sampler: str = "marsaglia-tsang",
    grad_method: str = "autodiff",
    delta: float | None = None,
) -> GradSample:
    """Beta(a, b) as g1 / (g1 + g2) with independent standard gamma draws."""
    _positive("a", a)
    _positive("b", b)
    n = _rng_check(n)
    _check_method(grad_method)
    lg1 = log_standard_gamma(a, rng, n, sampler)
    lg2 = log_standard_gamma(b, rng, n, sampler)
    z = sp.expit(lg1 - lg2)
    zc = sp.expit(lg2 - lg1)
    d1 = _dlog_gamma(np.exp(lg1), lg1, a, grad_method, delta)
    d2 = _dlog_gamma(np.exp(lg2), lg2, b, grad_method, delta)
    w = z * zc
    jac = np.stack([w * d1, -w * d2], axis=-1)
    return GradSample(z[:, None], _finite_jac(jac, "beta")[:, None, :], ("a", "b"))


def sample_dirichlet(
    alphas: Sequence[float],
    rng: np.random.Generator,
    n: int = 1,
    *,
    wrt: Sequence[int] | None = None,
    sampler: str = "marsaglia-tsang",
    grad_method: str = "autodiff",
    delta: float | None = None,
) -> GradSample:
    """Dirichlet(alphas) by normalizing gamma draws.

    ``jac[s, i, j] = dz_i/dalpha_j = z_j (delta_ij - z_i) dlog g_j/dalpha_j``,
    restricted to the columns in ``wrt`` (all by default).
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.ndim != 1 or alphas.size < 2:
        raise DomainError("Dirichlet needs at least two concentrations")
    for a in alphas:
        _positive("concentration", a)
    n = _rng_check(n)
    _check_method(grad_method)
    dim = alphas.size
    cols = list(range(dim)) if wrt is None else [int(j) for j in wrt]
    log_g = np.stack([log_standard_gamma(a, rng, n, sampler) for a in alphas], axis=-1)
    z = sp.softmax(log_g, axis=-1)
    jac = np.empty((n, dim, len(cols)))
    for c, j in enumerate(cols):
        dlog = _dlog_gamma(np.exp(log_g[:, j]), log_g[:, j], alphas[j], grad_method, delta)
        col = -z * (z[:, j] * dlog)[:, None]
        col[:, j] += z[:, j] * dlog
        jac[:, :, c] = col
    names = tuple(f"alpha[{j}]" for j in cols)
    return GradSample(z, _finite_jac(jac, "dirichlet"), names)


def sample_student_t(
    df: float,
    rng: np.random.Generator,
    n: int = 1,
    *,
    sampler: str = "marsaglia-tsang",
    grad_method: str = "autodiff",
    delta: float | None = None,
) -> GradSample:
    """Student-t(df) as a Normal scale mixture.

    tau ~ Gamma(df/2, rate df/2) is the precision and z = eps / sqrt(tau) with
    eps ~ N(0, 1) held fixed, so with tau = 2 g / df, g ~ Gamma(df/2, 1):

        dz/ddf = z/2 * (1/df - 1/2 * dlog g/dalpha).
    """
    _positive("df", df)
    n = _rng_check(n)
    _check_method(grad_method)
    log_g = log_standard_gamma(0.5 * df, rng, n, sampler)
    eps = rng.standard_normal(n)
    # z = eps * sqrt(df / (2 g))
    z = eps * np.exp(0.5 * (math.log(0.5 * df) - log_g))
    dlog = _dlog_gamma(np.exp(log_g), log_g, 0.5 * df, grad_method, delta)
    jac = 0.5 * z * (1.0 / df - 0.5 * dlog)
    return GradSample(z[:, None], _finite_jac(jac, "student_t")[:, None, None], ("df",))


# ---------------------------------------------------------------------------
# von Mises


def _best_fisher(kappa, rng, n):
    """vonMises(0, kappa) draws by Best-Fisher wrapped-Cauchy rejection."""
    if kappa < 1e-8:
        return math.pi * (2.0 * rng.random(n) - 1.0)
    if kappa < 1e-5:
        s = 0.5 / kappa
    else:
        r = 1.0 + math.sqrt(1.0 + 4.0 * kappa * kappa)
        rho = (r - math.sqrt(2.0 * r)) / (2.0 * kappa)
        s = (1.0 + rho * rho) / (2.0 * rho)
    out = np.empty(n)
    todo = np.arange(n)
    for _ in range(MAX_REJECTION_ROUNDS):
        m = todo.size
        u = rng.random(m)
        v = rng.random(m)
        zc = np.cos(math.pi * u)
        w = (1.0 + s * zc) / (s + zc)
        y = kappa * (s - w)
        with np.errstate(divide="ignore", invalid="ignore"):
            accept = (y * (2.0 - y) - v >= 0) | (np.log(y / v) + 1.0 - y >= 0)
        out[todo[accept]] = np.arccos(np.clip(w[accept], -1.0, 1.0))
        todo = todo[~accept]
        if todo.size == 0:
            break
    else:
        raise SamplerError("von Mises sampler exceeded its rejection budget")
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return sign * out


def von_mises_cdf_dkappa_fd(z, kappa, delta):
    return S.cdf_param_fd(S.von_mises_cdf, z, kappa, delta)


def von_mises_dz_dkappa(z0, kappa, grad_method="autodiff", delta=None):
    """dz/dkappa for standardized von Mises draws z0 in [-pi, pi]."""
    z0 = np.asarray(z0, dtype=np.float64)
    k = np.broadcast_to(np.asarray(kappa, dtype=np.float64), z0.shape)
    if grad_method == "autodiff":
        dF = S.von_mises_cdf(z0, Dual(k, np.ones_like(k))).tan
    else:
        dF = von_mises_cdf_dkappa_fd(z0, k, delta or FD_STEPS[("von_mises", "double")])
    with np.errstate(divide="ignore", invalid="ignore"):
        return -dF / np.exp(S.von_mises_log_pdf_std(z0, k))


def sample_von_mises(
    params: VonMisesParams,
    rng: np.random.Generator,
    n: int = 1,
    *,
    grad_method: str = "autodiff",
    delta: float | None = None,
) -> GradSample:
    """vonMises(loc, concentration) draws in [-pi, pi) with columns (loc, concentration)."""
    n = _rng_check(n)
    _check_method(grad_method)
    z0 = _best_fisher(params.concentration, rng, n)
    z = wrap_angle(z0 + params.loc)
    dk = von_mises_dz_dkappa(z0, params.concentration, grad_method, delta)
    jac = np.stack([np.ones(n), dk], axis=-1)
    return GradSample(z[:, None], _finite_jac(jac, "von_mises")[:, None, :], ("loc", "concentration"))


# ---------------------------------------------------------------------------
# CDFs written over duals, shared by the truncated and mixture constructions

BASE_FAMILIES = ("normal", "gamma")


def base_cdf(family, z, p0, p1):
    """CDF of the base family; z and parameters may be duals."""
    if family == "normal":
        return S.normal_cdf((z - p0) / p1)
    if family == "gamma":
        return S.reg_inc_gamma(z * p1, p0)
    raise DomainError(f"unsupported base family {family!r}")


def base_log_pdf(family, z, p0, p1):
    if family == "normal":
        return S.log_pdf("normal", z, (p0, p1))
    if family == "gamma":
        return S.log_pdf("gamma", z, (p0, p1))
    raise DomainError(f"unsupported base family {family!r}")


def _base_params(family, params):
    if hasattr(params, "as_tuple"):
        params = params.as_tuple()
    p0, p1 = (float(x) for x in params)
    if family == "normal":
        _positive("scale", p1)
    elif family == "gamma":
        _positive("shape", p0)
        _positive("rate", p1)
    else:
        raise DomainError(f"unsupported base family {family!r}")
    return p0, p1


def _support(family):
    return (-math.inf, math.inf) if family == "normal" else (0.0, math.inf)


def bisect_inverse(cdf: Callable, target, lo, hi, log_space=False, iters=2000):
    """Solve cdf(x) = target elementwise by bisection on [lo, hi].

    Infinite bounds are replaced by expanding brackets.  With ``log_space``
    the search runs over log x (for positive supports).
    """
    target = np.asarray(target, dtype=np.float64)
    n = target.size
    if log_space:
        fwd, inv = np.exp, np.log
        with np.errstate(divide="ignore"):
            lo = np.full(n, -745.0 if lo <= 0 else math.log(lo))
            hi = np.full(n, math.inf if not np.isfinite(hi) else math.log(hi))
    else:
        fwd = inv = None
        lo, hi = np.full(n, float(lo)), np.full(n, float(hi))

    def F(x):
        return cdf(fwd(x) if log_space else x)

    step = 1.0
    for arr, sgn in ((lo, -1.0), (hi, 1.0)):
        bad = ~np.isfinite(arr)
        width = step
        while bad.any():
            cand = np.where(bad, sgn * width, arr)
            arr[bad] = cand[bad]
            v = F(arr)
            bad = bad & ((v > target) if sgn < 0 else (v < target))
            width *= 2.0
            if width > 1e300:
                raise DomainError("could not bracket the inverse CDF")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.all((mid == lo) | (mid == hi)):
            break
        below = F(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    x = 0.5 * (lo + hi)
    return fwd(x) if log_space else x


# ---------------------------------------------------------------------------
# truncated distributions


def _cdf_and_grads(family, x, p0, p1, grad_method, delta):
    """F(x) and [dF/dp0, dF/dp1] (each shaped like x); infinite x gives 0 gradients."""
    x = np.asarray(x, dtype=np.float64)
    F = np.empty_like(x)
    G = np.zeros(x.shape + (2,))
    lo_sup, _ = _support(family)
    fin = np.isfinite(x) & (x > lo_sup)
    F[~fin] = np.where(x[~fin] > 0, 1.0, 0.0)
    if not fin.any():
        return F, G
    xf = x[fin]
    F[fin] = value(base_cdf(family, xf, p0, p1))
    for j in range(2):
        if grad_method == "autodiff":
            ps = [p0, p1]
            ps[j] = Dual(np.full_like(xf, ps[j]), np.ones_like(xf))
            G[fin, j] = base_cdf(family, xf, *ps).tan
        else:
            d = delta or 1e-5
            hi_ps, lo_ps = [p0, p1], [p0, p1]
            hi_ps[j] *= 1 + d
            lo_ps[j] *= 1 - d
            G[fin, j] = (base_cdf(family, xf, *hi_ps) - base_cdf(family, xf, *lo_ps)) / (
                2 * [p0, p1][j] * d
            )
    return F, G


def sample_truncated(
    family: str,
    params,
    window: TruncationWindow,
    rng: np.random.Generator,
    n: int = 1,
    *,
    grad_method: str = "autodiff",
    delta: float | None = None,
) -> GradSample:
    """Draws from ``family`` restricted to [a, b], by bisection on the base CDF.

    With M = F(b) - F(a) and Fhat = (F(z) - F(a)) / M, differentiating
    Fhat(z(phi) | phi) = u gives

        dz/dphi = -[dF(z) - (1 - Fhat) dF(a) - Fhat dF(b)] / q(z)

    where q is the base density (the 1/M factors cancel).
    """
    n = _rng_check(n)
    _check_method(grad_method)
    p0, p1 = _base_params(family, params)
    lo_sup, hi_sup = _support(family)
    a, b = max(window.a, lo_sup), min(window.b, hi_sup)
    if not a < b:
        raise DegenerateWindowError(f"window [{window.a}, {window.b}] misses the support")
    (Fa, Fb), Gab = zip(
        *(_cdf_and_grads(family, np.array([x]), p0, p1, grad_method, delta) for x in (a, b))
    )
    mass = float(Fb[0] - Fa[0])
    if not mass > MIN_WINDOW_MASS:
        raise DegenerateWindowError(
            f"window [{window.a}, {window.b}] has probability mass {mass:.3g} "
            f"under {family}{(p0, p1)}"
        )
    u = Fa[0] + rng.random(n) * mass

    def cdf(x):
        return value(base_cdf(family, x, p0, p1))

    z = bisect_inverse(cdf, u, a, b, log_space=(family == "gamma"))
    z = np.clip(z, a, b)
    Fz, Gz = _cdf_and_grads(family, z, p0, p1, grad_method, delta)
    Fhat = (Fz - Fa[0]) / mass
    num = Gz - (1.0 - Fhat)[:, None] * Gab[0] - Fhat[:, None] * Gab[1]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if family == "gamma" and np.any(z <= 0):
            raise GradientOverflowError("truncated gamma draw underflowed to zero")
        q = np.exp(value(base_log_pdf(family, z, p0, p1)))
        jac = -num / q[:, None]
    names = ("loc", "scale") if family == "normal" else ("shape", "rate")
    return GradSample(z[:, None], _finite_jac(jac, "truncated")[:, None, :], names)


# ---------------------------------------------------------------------------
# mixtures via the distributional transform


def _logsumexp_weights(logw):
    """Normalized weights exp(l_k) / sum_j exp(l_j) for a list of (dual) logs."""
    m = np.max(np.stack([value(l) for l in logw]), axis=0)
    if not np.all(np.isfinite(m)):
        raise DegenerateResponsibilityError("all posterior mixture weights vanish")
    e = [D.exp(l - m) for l in logw]
    tot = e[0]
    for t in e[1:]:
        tot = tot + t
    return [t / tot for t in e]


def mixture_transform(params: MixtureParams, z, weights=None, components=None):
    """Distributional transform S(z) of a factorized mixture, one entry per dimension.

    S_d = sum_k w_k^d F_kd(z_d), with posterior weights
    w_k^d proportional to w_k prod_{e<d} q_ke(z_e).  ``z`` is a list of D
    arrays (or duals); ``weights`` (K entries) and ``components`` (K x D x 2
    nested lists) override the stored parameters and may contain duals.  The
    weights are used as w / sum(w).
    """
    K, Dm = params.n_components, params.dim
    fam = params.family
    w = list(params.weights) if weights is None else list(weights)
    comp = (
        [[list(params.components[k, d]) for d in range(Dm)] for k in range(K)]
        if components is None
        else components
    )
    wsum = w[0]
    for t in w[1:]:
        wsum = wsum + t
    logw = []
    for k in range(K):
        wk = w[k] / wsum
        if np.all(value(wk) == 0):
            logw.append(np.full(np.shape(value(z[0])), -np.inf))
        else:
            logw.append(D.log(wk) + 0.0 * z[0])
    out = []
    for d in range(Dm):
        post = _logsumexp_weights(logw)
        Sd = 0.0
        for k in range(K):
            Sd = Sd + post[k] * base_cdf(fam, z[d], *comp[k][d])
        out.append(Sd)
        if d + 1 < Dm:
            for k in range(K):
                if np.all(np.isneginf(value(logw[k]))):
                    continue
                logw[k] = logw[k] + base_log_pdf(fam, z[d], *comp[k][d])
    return out


def _lift(x, shape, active):
    v = np.full(shape, float(x))
    return Dual(v, np.ones(shape) if active else np.zeros(shape))


def mixture_jacobian_blocks(params: MixtureParams, z, grad_method="autodiff", delta=None):
    """Return (dS/dz, dS/dphi) with shapes (n, D, D) and (n, D, P)."""
    z = np.asarray(z, dtype=np.float64)
    n, Dm = z.shape
    K = params.n_components
    shape = (n,)
    zs = [z[:, d] for d in range(Dm)]
    Jz = np.zeros((n, Dm, Dm))
    for e in range(Dm):
        zd = [Dual(zs[d], np.full(n, 1.0 if d == e else 0.0)) for d in range(Dm)]
        Sv = mixture_transform(params, zd)
        for d in range(e, Dm):
            Jz[:, d, e] = Sv[d].tan if isinstance(Sv[d], Dual) else 0.0
    P = K + 2 * K * Dm
    Jp = np.zeros((n, Dm, P))
    flat = list(params.weights) + list(params.components.ravel())
    for j in range(P):
        if grad_method == "autodiff":
            vals = [_lift(x, shape, i == j) for i, x in enumerate(flat)]
            Sv = mixture_transform(params, zs, vals[:K], _nest(vals[K:], K, Dm))
            for d in range(Dm):
                Jp[:, d, j] = Sv[d].tan
        else:
            h = (delta or 1e-6) * max(abs(flat[j]), 1e-3)
            up, dn = list(flat), list(flat)
            up[j] += h
            dn[j] -= h
            Su = mixture_transform(params, zs, up[:K], _nest(up[K:], K, Dm))
            Sl = mixture_transform(params, zs, dn[:K], _nest(dn[K:], K, Dm))
            for d in range(Dm):
                Jp[:, d, j] = (np.asarray(Su[d]) - np.asarray(Sl[d])) / (2 * h)
    return Jz, Jp


def _nest(flat, K, Dm):
    return [[[flat[(k * Dm + d) * 2], flat[(k * Dm + d) * 2 + 1]] for d in range(Dm)] for k in range(K)]


def solve_lower_triangular(L, B):
    """Solve L X = B for batched lower-triangular L (n, D, D) and B (n, D, P)."""
    n, Dm, _ = L.shape
    X = np.zeros_like(B)
    for d in range(Dm):
        acc = B[:, d, :] - np.einsum("ne,nep->np", L[:, d, :d], X[:, :d, :])
        X[:, d, :] = acc / L[:, d, d][:, None]
    return X


def _draw_mixture(params: MixtureParams, rng, n):
    k = rng.choice(params.n_components, size=n, p=params.weights)
    c = params.components[k]  # (n, D, 2)
    if params.family == "normal":
        return c[..., 0] + c[..., 1] * rng.standard_normal(c.shape[:2])
    return rng.standard_gamma(c[..., 0]) / c[..., 1]


def sample_mixture(
    params: MixtureParams,
    rng: np.random.Generator,
    n: int = 1,
    *,
    grad_method: str = "autodiff",
    delta: float | None = None,
    dense: bool = False,
) -> GradSample:
    """Ancestral mixture draws; the Jacobian solves (dS/dz) X = -dS/dphi.

    dS/dz is lower triangular, so forward substitution is used unless
    ``dense`` asks for a general solve.
    """
    n = _rng_check(n)
    _check_method(grad_method)
    z = _draw_mixture(params, rng, n)
    Jz, Jp = mixture_jacobian_blocks(params, z, grad_method, delta)
    if dense:
        jac = np.linalg.solve(Jz, -Jp)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            jac = solve_lower_triangular(Jz, -Jp)
    return GradSample(z, _finite_jac(jac, "mixture"), tuple(params.param_names()))


# ---------------------------------------------------------------------------
# Normal: explicit and implicit routes


@dataclass
class NormalJacobians:
    z: np.ndarray
    explicit: np.ndarray
    implicit: np.ndarray


def normal_jacobians(z, mu, sigma):
    """Explicit and implicit Jacobians (columns mu, sigma) of N(mu, sigma) draws z.

    Explicit: z = mu + sigma * eps gives dz/dmu = 1 and dz/dsigma = eps, with
    eps recomputed as (z - mu)/sigma from the stored draw.  Implicit: minus the
    dual derivative of the Normal CDF over the density at z.
    """
    z, mu, sigma = (np.asarray(x, dtype=np.float64) for x in np.broadcast_arrays(z, mu, sigma))
    s = (z - mu) / sigma
    explicit = np.stack([np.ones_like(s), s], axis=-1)
    dens = S.normal_pdf(s) / sigma
    cols = []
    for j in range(2):
        m = Dual(mu, np.full_like(mu, 1.0 if j == 0 else 0.0))
        sg = Dual(sigma, np.full_like(sigma, 1.0 if j == 1 else 0.0))
        cols.append(-S.normal_cdf((z - m) / sg).tan / dens)
    return explicit, np.stack(cols, axis=-1)


def explicit_normal(mu: float, sigma: float, rng: np.random.Generator, n: int = 1) -> NormalJacobians:
    """N(mu, sigma) draws with Jacobians from both routes (see :func:`normal_jacobians`)."""
    _positive("sigma", sigma)
    n = _rng_check(n)
    z = mu + sigma * rng.standard_normal(n)
    explicit, implicit = normal_jacobians(z, mu, sigma)
    return NormalJacobians(z, explicit, implicit)


# ---------------------------------------------------------------------------
# generic implicit solve for scalar families


def implicit_grad(
    cdf: Callable,
    z,
    params: Sequence[float],
    transform: Callable | None = None,
):
    """dz/dphi for scalar draws from a standardization S = T(cdf(z, *params)).

    Both dS/dz and dS/dphi come from dual passes; ``transform`` is an optional
    strictly monotone map T applied to the CDF output, which must leave the
    result unchanged.  Returns shape (n, len(params)).
    """
    z = np.asarray(z, dtype=np.float64)
    T = transform or (lambda u: u)
    n = z.size
    params = [float(p) for p in params]
    dSdz = T(cdf(Dual(z, np.ones(n)), *[np.full(n, p) for p in params])).tan
    cols = []
    for j in range(len(params)):
        ps = [Dual(np.full(n, p), np.full(n, 1.0 if i == j else 0.0)) for i, p in enumerate(params)]
        cols.append(-T(cdf(z, *ps)).tan / dSdz)
    return np.stack(cols, axis=-1)


def logit_scale(u, lo=0.05, hi=0.95):
    """Strictly increasing map (0, 1) -> R: logit of an affine squeeze."""
    v = lo + (hi - lo) * u
    return D.log(v) - D.log(1.0 - v)
