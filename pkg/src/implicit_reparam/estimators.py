"""Monte Carlo estimators of d/dphi E_q[f(z)] and their variance.

Three estimators share one family registry:

* implicit_pathwise: mean of grad_z f(z) . dz/dphi with implicit Jacobians,
* finite_difference_pathwise: the same with CDF derivatives by central
  differences,
* score_function: mean of f(z) d/dphi log q(z), with no control variate.

The two cross-entropy toy problems (Dirichlet and von Mises) come with their
analytic gradients, which serve as the reference value c in the variance
E[(g - c)^2].
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Sequence

import numpy as np
from scipy import special as sp

from . import distributions as dist
from . import dual as D
from . import special as S
from .dual import Dual

WARMUP_SAMPLES = 100
TIMING_BATCHES = 5
_WARMUP_SEED = 20180501


@dataclass(frozen=True)
class Objective:
    """f(z) and its gradient; both act on arrays of draws of shape (n, D)."""

    eval: Callable[[np.ndarray], np.ndarray]
    grad_z: Callable[[np.ndarray], np.ndarray]

    def check_grad(self, rng: np.random.Generator, probes: np.ndarray, h: float = 1e-6) -> float:
        """Largest relative gap between grad_z and central differences of eval at ``probes``."""
        probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
        g = self.grad_z(probes)
        worst = 0.0
        for d in range(probes.shape[1]):
            step = h * np.maximum(1.0, np.abs(probes[:, d]))
            up, dn = probes.copy(), probes.copy()
            up[:, d] += step
            dn[:, d] -= step
            fd = (self.eval(up) - self.eval(dn)) / (2 * step)
            gap = np.abs(fd - g[:, d]) / np.maximum(1.0, np.abs(g[:, d]))
            worst = max(worst, float(gap.max()))
        return worst


@dataclass(frozen=True)
class EstimatorReport:
    """Mean gradient over the sample, with variance and per-sample timing.

    ``variance`` is E[(g - c)^2] for the reference c when one was supplied and
    the sample variance otherwise, summed over gradient coordinates;
    ``coord_variance`` keeps the per-coordinate values.
    """

    mean_grad: np.ndarray
    variance: float
    n_samples: int
    seconds_per_sample: float
    coord_variance: np.ndarray

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(self.coord_variance / self.n_samples)


# ---------------------------------------------------------------------------
# family registry


@dataclass(frozen=True)
class Family:
    """How to draw, differentiate and score one family.

    ``sample(params, rng, n, grad_method, delta, wrt)`` returns a GradSample,
    ``draw(params, rng, n)`` returns z only, and ``log_prob(z, params)``
    accepts duals inside ``params`` (a list of floats).
    """

    name: str
    sample: Callable
    draw: Callable
    log_prob: Callable


def _gamma_sample(p, rng, n, grad_method, delta, wrt):
    return dist.sample_gamma(dist.GammaParams(*p), rng, n, grad_method=grad_method, delta=delta)


def _gamma_draw(p, rng, n):
    return (np.exp(dist.log_standard_gamma(p[0], rng, n)) / p[1])[:, None]


def _beta_draw(p, rng, n):
    lg1 = dist.log_standard_gamma(p[0], rng, n)
    lg2 = dist.log_standard_gamma(p[1], rng, n)
    return sp.expit(lg1 - lg2)[:, None]


def _dirichlet_draw(p, rng, n):
    lg = np.stack([dist.log_standard_gamma(a, rng, n) for a in p], axis=-1)
    return sp.softmax(lg, axis=-1)


def _dirichlet_log_prob(z, p):
    alpha = list(p)
    lp = D.lgamma(_total(alpha))
    for d, a in enumerate(alpha):
        lp = lp + (a - 1.0) * D.log(z[:, d]) - D.lgamma(a)
    return lp


def _total(xs):
    t = xs[0]
    for x in xs[1:]:
        t = t + x
    return t


def _student_t_draw(p, rng, n):
    log_g = dist.log_standard_gamma(0.5 * p[0], rng, n)
    eps = rng.standard_normal(n)
    return (eps * np.exp(0.5 * (math.log(0.5 * p[0]) - log_g)))[:, None]


def _von_mises_draw(p, rng, n):
    return dist.wrap_angle(dist._best_fisher(p[1], rng, n) + p[0])[:, None]


def _normal_sample(p, rng, n, grad_method, delta, wrt):
    r = dist.explicit_normal(p[0], p[1], rng, n)
    return dist.GradSample(r.z[:, None], r.implicit[:, None, :], ("loc", "scale"))


def _normal_draw(p, rng, n):
    return (p[0] + p[1] * rng.standard_normal(n))[:, None]


FAMILIES: dict[str, Family] = {
    "gamma": Family(
        "gamma", _gamma_sample, _gamma_draw, lambda z, p: S.log_pdf("gamma", z[:, 0], p)
    ),
    "beta": Family(
        "beta",
        lambda p, rng, n, gm, d, w: dist.sample_beta(p[0], p[1], rng, n, grad_method=gm, delta=d),
        _beta_draw,
        lambda z, p: S.log_pdf("beta", z[:, 0], p),
    ),
    "dirichlet": Family(
        "dirichlet",
        lambda p, rng, n, gm, d, w: dist.sample_dirichlet(p, rng, n, wrt=w, grad_method=gm, delta=d),
        _dirichlet_draw,
        _dirichlet_log_prob,
    ),
    "student_t": Family(
        "student_t",
        lambda p, rng, n, gm, d, w: dist.sample_student_t(p[0], rng, n, grad_method=gm, delta=d),
        _student_t_draw,
        lambda z, p: S.log_pdf("student_t", z[:, 0], p),
    ),
    "von_mises": Family(
        "von_mises",
        lambda p, rng, n, gm, d, w: dist.sample_von_mises(
            dist.VonMisesParams(*p), rng, n, grad_method=gm, delta=d
        ),
        _von_mises_draw,
        lambda z, p: S.log_pdf("von_mises", z[:, 0], p),
    ),
    "normal": Family(
        "normal", _normal_sample, _normal_draw, lambda z, p: S.log_pdf("normal", z[:, 0], p)
    ),
}


def register_family(family: Family) -> None:
    FAMILIES[family.name] = family


def _family(name) -> Family:
    if name not in FAMILIES:
        raise ValueError(f"unknown family {name!r}; known: {sorted(FAMILIES)}")
    return FAMILIES[name]


def score(family: str, z: np.ndarray, params: Sequence[float], wrt: Sequence[int] | None = None):
    """d/dphi_j log q(z | phi) for each draw, shape (n, len(wrt)); one dual pass per j."""
    fam = _family(family)
    params = [float(x) for x in params]
    cols = range(len(params)) if wrt is None else wrt
    out = []
    for j in cols:
        ps = list(params)
        ps[j] = Dual(params[j], 1.0)
        lp = fam.log_prob(z, ps)
        out.append(np.broadcast_to(lp.tan, (z.shape[0],)))
    return np.stack(out, axis=-1)


# ---------------------------------------------------------------------------
# estimators


def _timed_batches(fn: Callable[[np.random.Generator, int], np.ndarray], n, rng):
    """Run ``fn`` over n samples in TIMING_BATCHES chunks drawn from ``rng``.

    A warm-up on a separate generator comes first; the reported cost is the
    median per-sample time over the chunks.
    """
    fn(np.random.default_rng(_WARMUP_SEED), WARMUP_SAMPLES)
    sizes = [len(c) for c in np.array_split(np.arange(n), min(TIMING_BATCHES, n)) if len(c)]
    parts, per = [], []
    for m in sizes:
        t0 = time.perf_counter()
        parts.append(fn(rng, m))
        per.append((time.perf_counter() - t0) / m)
    return np.concatenate(parts, axis=0), float(np.median(per))


def _report(g: np.ndarray, secs: float, target=None) -> EstimatorReport:
    n = g.shape[0]
    if n < 2:
        raise ValueError("need at least two samples")
    mean = g.mean(axis=0)
    if target is None:
        cv = g.var(axis=0, ddof=1)
    else:
        cv = np.mean((g - np.asarray(target, dtype=np.float64)) ** 2, axis=0)
    return EstimatorReport(mean, float(cv.sum()), n, secs, cv)


def _pathwise(objective, family, params, n, rng, grad_method, delta, wrt, target):
    fam = _family(family)
    params = [float(x) for x in np.atleast_1d(params)]

    def run(r, m):
        gs = fam.sample(params, r, m, grad_method, delta, wrt)
        jac = gs.jac
        if wrt is not None and jac.shape[2] != len(wrt):
            jac = jac[:, :, list(wrt)]
        gz = np.asarray(objective.grad_z(gs.z), dtype=np.float64).reshape(gs.z.shape)
        return np.einsum("nd,ndp->np", gz, jac)

    g, secs = _timed_batches(run, n, rng)
    return _report(g, secs, target)


def implicit_pathwise(
    objective: Objective,
    family: str,
    params,
    n: int,
    rng: np.random.Generator,
    *,
    wrt: Sequence[int] | None = None,
    target=None,
) -> EstimatorReport:
    """Average of grad_z f(z) . dz/dphi over n implicit-gradient draws."""
    return _pathwise(objective, family, params, n, rng, "autodiff", None, wrt, target)


def finite_difference_pathwise(
    objective: Objective,
    family: str,
    params,
    n: int,
    delta: float,
    rng: np.random.Generator,
    *,
    wrt: Sequence[int] | None = None,
    target=None,
) -> EstimatorReport:
    """As implicit_pathwise, with dF/dphi by central differences of relative step delta."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return _pathwise(objective, family, params, n, rng, "finite-diff", delta, wrt, target)


def score_function(
    objective: Objective,
    family: str,
    params,
    n: int,
    rng: np.random.Generator,
    *,
    wrt: Sequence[int] | None = None,
    target=None,
) -> EstimatorReport:
    """Average of f(z) d/dphi log q(z) (REINFORCE, no baseline)."""
    fam = _family(family)
    params = [float(x) for x in np.atleast_1d(params)]

    def run(r, m):
        z = fam.draw(params, r, m)
        f = np.asarray(objective.eval(z), dtype=np.float64).reshape(m)
        return f[:, None] * score(family, z, params, wrt)

    g, secs = _timed_batches(run, n, rng)
    return _report(g, secs, target)


ESTIMATORS = ("implicit", "score", "finite-diff")


# ---------------------------------------------------------------------------
# cross-entropy toy problems

TOY_DIM_VON_MISES = 10
TOY_VON_MISES_KAPPA = 2.0
DIRICHLET_DATA = "dirichlet_toy_alpha.txt"


def make_dirichlet_toy_alpha(seed: int = 2018, dim: int = 100, n_obs: int = 100) -> np.ndarray:
    """Posterior concentrations after n_obs categorical draws under a uniform Dirichlet prior.

    The categorical probabilities are themselves drawn from that prior.
    """
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(dim))
    counts = rng.multinomial(n_obs, probs)
    return 1.0 + counts.astype(np.float64)


def dirichlet_toy_alpha() -> np.ndarray:
    """The persisted toy concentration vector (100 values)."""
    text = resources.files("implicit_reparam").joinpath("data", DIRICHLET_DATA).read_text()
    return np.array([float(x) for x in text.split()])


@dataclass(frozen=True)
class ToyProblem:
    """Cross-entropy E_q[-log p(z)] with a single active parameter phi."""

    name: str
    family: str
    objective: Objective
    phi_star: float
    params: Callable[[float], list]
    wrt: tuple[int, ...]
    analytic: Callable[[float], float]

    def phi_grid(self, points: int = 7) -> np.ndarray:
        """Geometric grid around the optimum, from phi*/8 to 8 phi*."""
        return self.phi_star * 2.0 ** np.linspace(-3, 3, points)


def _dirichlet_toy() -> ToyProblem:
    alpha = dirichlet_toy_alpha()
    const = float(sp.gammaln(alpha).sum() - sp.gammaln(alpha.sum()))

    def f(z):
        return const - np.log(z) @ (alpha - 1.0)

    def grad(z):
        return -(alpha - 1.0) / z

    def c(phi):
        rest = alpha[1:].sum()
        return float(
            -(alpha[0] - 1.0) * S.D.psi1(phi)
            + (alpha.sum() - alpha.size) * S.D.psi1(phi + rest)
        )

    return ToyProblem(
        "dirichlet",
        "dirichlet",
        Objective(f, grad),
        float(alpha[0]),
        lambda phi: [phi] + list(alpha[1:]),
        (0,),
        c,
    )


def _von_mises_toy_sample(p, rng, n, grad_method, delta, wrt):
    phi = p[0]
    first = dist.sample_von_mises(dist.VonMisesParams(0.0, phi), rng, n, grad_method=grad_method, delta=delta)
    rest = np.stack(
        [dist._best_fisher(TOY_VON_MISES_KAPPA, rng, n) for _ in range(TOY_DIM_VON_MISES - 1)],
        axis=-1,
    )
    z = np.concatenate([first.z, rest], axis=1)
    jac = np.zeros((n, TOY_DIM_VON_MISES, 1))
    jac[:, 0, 0] = first.column("concentration")[:, 0]
    return dist.GradSample(z, jac, ("phi",))


def _von_mises_toy_draw(p, rng, n):
    first = dist._best_fisher(p[0], rng, n)
    rest = [dist._best_fisher(TOY_VON_MISES_KAPPA, rng, n) for _ in range(TOY_DIM_VON_MISES - 1)]
    return np.stack([first] + rest, axis=-1)


def _von_mises_toy_log_prob(z, p):
    # only z_1 depends on phi; the other factors are constant in phi
    return S.log_pdf("von_mises", z[:, 0], (0.0, p[0]))


register_family(
    Family("von_mises_toy", _von_mises_toy_sample, _von_mises_toy_draw, _von_mises_toy_log_prob)
)


def _von_mises_toy() -> ToyProblem:
    k = TOY_VON_MISES_KAPPA
    log_norm = math.log(2.0 * math.pi) + float(np.log(sp.ive(0, k))) + k

    def f(z):
        return TOY_DIM_VON_MISES * log_norm - k * np.cos(z).sum(axis=-1)

    def grad(z):
        return k * np.sin(z)

    def c(phi):
        return float(-k * S.bessel_i_ratio_dkappa(phi))

    return ToyProblem(
        "von-mises",
        "von_mises_toy",
        Objective(f, grad),
        k,
        lambda phi: [phi],
        (0,),
        c,
    )


TOY_PROBLEMS: dict[str, Callable[[], ToyProblem]] = {
    "dirichlet": _dirichlet_toy,
    "von-mises": _von_mises_toy,
}


def toy_problem(name: str) -> ToyProblem:
    if name not in TOY_PROBLEMS:
        raise ValueError(f"unknown toy problem {name!r}; known: {sorted(TOY_PROBLEMS)}")
    return TOY_PROBLEMS[name]()


def analytic_cross_entropy_grad(problem: str | ToyProblem, phi: float | None = None) -> float:
    """c = d/dphi E_q[-log p(z)] in closed form (at the optimum phi* by default)."""
    prob = toy_problem(problem) if isinstance(problem, str) else problem
    return prob.analytic(prob.phi_star if phi is None else float(phi))


@dataclass(frozen=True)
class VariancePoint:
    estimator: str
    phi: float
    variance: float
    seconds_per_sample: float
    mean_grad: float
    target: float
    n: int


def run_estimator(kind: str, prob: ToyProblem, phi: float, n: int, rng, delta: float = 1e-5):
    c = prob.analytic(phi)
    args = (prob.objective, prob.family, prob.params(phi), n)
    if kind == "implicit":
        return implicit_pathwise(*args, rng, wrt=prob.wrt, target=[c]), c
    if kind == "score":
        return score_function(*args, rng, wrt=prob.wrt, target=[c]), c
    if kind == "finite-diff":
        return finite_difference_pathwise(*args, delta, rng, wrt=prob.wrt, target=[c]), c
    raise ValueError(f"unknown estimator {kind!r}; known: {ESTIMATORS}")


def variance_of(
    kind: str,
    problem: str | ToyProblem,
    phi_grid: Sequence[float] | None,
    n: int,
    rng: np.random.Generator,
    *,
    threads: int = 1,
    delta: float = 1e-5,
) -> list[VariancePoint]:
    """Single-sample variance E[(g - c)^2] at each phi, with c the analytic gradient.

    Each grid point gets its own child generator (``rng.spawn``), so results do
    not depend on ``threads``.
    """
    prob = toy_problem(problem) if isinstance(problem, str) else problem
    grid = prob.phi_grid() if phi_grid is None else [float(p) for p in phi_grid]
    children = rng.spawn(len(grid))

    def one(i):
        rep, c = run_estimator(kind, prob, grid[i], n, children[i], delta)
        return VariancePoint(
            kind, grid[i], rep.variance, rep.seconds_per_sample, float(rep.mean_grad[0]), c, n
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, range(len(grid))))
    return [one(i) for i in range(len(grid))]
