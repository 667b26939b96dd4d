"""Likelihood-free posterior sampling: rejection ABC and adaptive-tolerance population Monte Carlo.

Every particle slot draws from its own counter-based stream keyed on
``(seed, generation, slot)``, so a generation gives the same particles whether
slots run sequentially or on a thread pool.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .csvio import write_table

_LOG_2PI = math.log(2.0 * math.pi)
_MAX_BLOCK = 4096


class AcceptanceRateError(RuntimeError):
    def __init__(self, message: str, generation: int | None = None, proposals: int = 0):
        self.generation = generation
        self.proposals = proposals
        self.base_message = message
        super().__init__(self._text())

    def _text(self) -> str:
        where = "" if self.generation is None else f"generation {self.generation}: "
        return f"{where}{self.base_message}"

    def at_generation(self, t: int) -> "AcceptanceRateError":
        self.generation = t
        self.args = (self._text(),)
        return self


# ---------------------------------------------------------------------------
# priors


@dataclass
class Prior:
    """Independent per-dimension prior on a box.

    ``kinds[i]`` is ``("uniform",)`` or ``("gaussian", mean, std)``; Gaussians are
    truncated to ``[lower[i], upper[i]]``.
    """

    lower: np.ndarray
    upper: np.ndarray
    kinds: list[tuple] = field(default_factory=list)

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if np.any(self.lower >= self.upper):
            raise ValueError("prior needs lower < upper in every dimension")
        if not self.kinds:
            self.kinds = [("uniform",)] * len(self.lower)
        if len(self.kinds) != len(self.lower):
            raise ValueError("one prior kind per dimension is required")
        for k in self.kinds:
            if k[0] not in ("uniform", "gaussian"):
                raise ValueError(f"unknown prior kind {k[0]!r}")
            if k[0] == "gaussian" and not k[2] > 0:
                raise ValueError("gaussian prior needs a positive std")

    @classmethod
    def from_space(cls, space) -> "Prior":
        kinds = []
        for spec in space.prior:
            if spec.get("kind", "uniform") == "gaussian":
                kinds.append(("gaussian", float(spec["mean"]), float(spec["std"])))
            else:
                kinds.append(("uniform",))
        return cls(space.lower, space.upper, kinds)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def _gauss_cdf_bounds(self, i):
        _, mu, sd = self.kinds[i]
        return special.ndtr((self.lower[i] - mu) / sd), special.ndtr((self.upper[i] - mu) / sd)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.random((n, self.dim))
        out = np.empty_like(u)
        for i, k in enumerate(self.kinds):
            if k[0] == "uniform":
                out[:, i] = self.lower[i] + u[:, i] * (self.upper[i] - self.lower[i])
            else:
                a, b = self._gauss_cdf_bounds(i)
                out[:, i] = k[1] + k[2] * special.ndtri(a + u[:, i] * (b - a))
        return np.clip(out, self.lower, self.upper)

    def logpdf(self, theta) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        inside = np.all((theta >= self.lower) & (theta <= self.upper), axis=1)
        lp = np.zeros(theta.shape[0])
        for i, k in enumerate(self.kinds):
            if k[0] == "uniform":
                lp -= math.log(self.upper[i] - self.lower[i])
            else:
                a, b = self._gauss_cdf_bounds(i)
                z = (theta[:, i] - k[1]) / k[2]
                lp += -0.5 * z * z - 0.5 * _LOG_2PI - math.log(k[2]) - math.log(b - a)
        return np.where(inside, lp, -np.inf)

    def pdf(self, theta) -> np.ndarray:
        return np.exp(self.logpdf(theta))


# ---------------------------------------------------------------------------
# pools and summaries


@dataclass
class ParticlePool:
    t: int
    theta: np.ndarray  # (N, d)
    weights: np.ndarray  # normalized
    distances: np.ndarray
    sigma: np.ndarray  # kernel scale computed from this generation
    epsilon: float
    proposals: int

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return self.n / self.proposals if self.proposals else 1.0

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


@dataclass
class PosteriorSummary:
    mean: np.ndarray
    std: np.ndarray
    theta: np.ndarray
    weights: np.ndarray
    distances: np.ndarray
    epsilon_trace: list[float] = field(default_factory=list)
    acceptance_trace: list[float] = field(default_factory=list)
    history: list[ParticlePool] = field(default_factory=list)

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    @property
    def standard_error(self) -> np.ndarray:
        return self.std / math.sqrt(self.ess)


def summarize(theta, weights=None) -> PosteriorSummary:
    """Weighted mean and population-convention STD per dimension."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 1:
        theta = theta[:, None]
    n = theta.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mean = w @ theta
    var = w @ (theta - mean) ** 2
    return PosteriorSummary(mean, np.sqrt(np.maximum(var, 0.0)), theta, w, np.zeros(n))


# ---------------------------------------------------------------------------
# building blocks


def distance(zo, zhat) -> np.ndarray | float:
    """Euclidean distance; ``zhat`` may be one vector or a stack of rows."""
    zo = np.asarray(zo, dtype=np.float64)
    zhat = np.asarray(zhat, dtype=np.float64)
    if zhat.shape[-1] != zo.shape[-1]:
        raise ValueError(f"length mismatch: {zo.shape[-1]} vs {zhat.shape[-1]}")
    d = np.sqrt(np.sum((zhat - zo) ** 2, axis=-1))
    return float(d) if np.ndim(d) == 0 else d


def kernel_scale(theta, weights=None, lower=None, upper=None, floor: float = 1e-12) -> np.ndarray:
    """Per-dimension perturbation scale ``sqrt(2 * weighted variance)``.

    The variance is floored at ``floor * (upper - lower)**2`` (or ``floor`` without bounds).
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 1:
        theta = theta[:, None]
    n = theta.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64) / np.sum(weights)
    mean = w @ theta
    var = w @ (theta - mean) ** 2
    span2 = 1.0 if lower is None else (np.asarray(upper) - np.asarray(lower)) ** 2
    return np.sqrt(2.0 * np.maximum(var, floor * span2))


def adapt_tolerance(distances, q: float = 0.5, eps_prev: float = math.inf) -> float:
    """Linear-interpolation q-quantile of accepted distances, capped at the previous tolerance."""
    distances = np.asarray(distances, dtype=np.float64)
    if distances.size == 0:
        raise ValueError("need at least one accepted distance")
    if not 0.0 < q < 1.0:
        raise ValueError("quantile must lie in (0, 1)")
    return float(min(np.quantile(distances, q), eps_prev))


def log_kernel_mixture(theta_new, theta_prev, weights_prev, sigma) -> np.ndarray:
    """``log sum_j w_j q(theta_new | theta_prev_j, sigma)`` for a diagonal Gaussian q."""
    theta_new = np.atleast_2d(theta_new)
    sigma = np.asarray(sigma, dtype=np.float64)
    logw = np.log(np.asarray(weights_prev, dtype=np.float64))
    const = -np.sum(np.log(sigma)) - 0.5 * len(sigma) * _LOG_2PI
    out = np.empty(theta_new.shape[0])
    scaled_prev = theta_prev / sigma
    for start in range(0, theta_new.shape[0], 256):
        chunk = theta_new[start : start + 256] / sigma
        d2 = (
            np.sum(chunk**2, axis=1)[:, None]
            + np.sum(scaled_prev**2, axis=1)[None, :]
            - 2.0 * chunk @ scaled_prev.T
        )
        np.maximum(d2, 0.0, out=d2)
        out[start : start + 256] = special.logsumexp(logw[None, :] - 0.5 * d2, axis=1) + const
    return out


def pmc_weights(pool_prev: ParticlePool, theta_new, prior: Prior, normalize: bool = True) -> np.ndarray:
    """Importance weights prior / kernel mixture of the previous generation."""
    denom = log_kernel_mixture(theta_new, pool_prev.theta, pool_prev.weights, pool_prev.sigma)
    if np.any(~np.isfinite(denom)):
        raise ValueError("kernel mixture density vanished for a proposed particle")
    logw = prior.logpdf(theta_new) - denom
    if not normalize:
        return np.exp(logw)
    w = np.exp(logw - np.max(logw))
    return w / w.sum()


def slot_rng(seed: int, t: int, slot: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, t, slot])))


def worker_count(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("INVABC_THREADS")
    return max(1, int(env)) if env else 1


def _map_slots(fn, n: int, workers: int) -> list:
    if workers <= 1 or n < 2:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, range(n)))


def _draw_slot(propose, forward, zo, epsilon, rng, max_proposals):
    """Propose in growing blocks until one candidate is within ``epsilon``.

    Only candidates up to and including the accepted one count as proposals.
    """
    used = 0
    block = 8
    while True:
        cand = propose(rng, block)
        if len(cand):
            d = distance(zo, forward(cand))
            d = np.atleast_1d(d)
            ok = np.flatnonzero(d <= epsilon)
            if ok.size:
                i = ok[0]
                return cand[i], float(d[i]), used + i + 1
            used += len(cand)
        if used >= max_proposals:
            raise AcceptanceRateError(
                f"no acceptance after {used} proposals at epsilon={epsilon:.6g}", proposals=used
            )
        block = min(2 * block, _MAX_BLOCK)


def _run_generation(propose, forward, zo, epsilon, n, seed, t, acceptance_floor, workers):
    zo = np.asarray(zo, dtype=np.float64)
    max_props = math.ceil(1.0 / acceptance_floor)

    def one(slot):
        return _draw_slot(propose, forward, zo, epsilon, slot_rng(seed, t, slot), max_props)

    results = _map_slots(one, n, worker_count(workers))
    theta = np.array([r[0] for r in results])
    dist = np.array([r[1] for r in results])
    props = int(sum(r[2] for r in results))
    if n / props < acceptance_floor:
        raise AcceptanceRateError(f"acceptance rate {n / props:.3g} below floor {acceptance_floor:g}", t, props)
    return theta, dist, props


def rejection_sample(
    prior: Prior,
    forward,
    zo,
    epsilon: float,
    n: int,
    seed: int,
    t: int = 1,
    acceptance_floor: float = 1e-6,
    workers: int | None = None,
) -> ParticlePool:
    """``n`` prior draws whose simulated summaries lie within ``epsilon`` of ``zo``.

    ``forward`` maps an ``(k, d)`` array of parameters to ``(k, m)`` summaries.
    """
    if not epsilon >= 0:
        raise ValueError("epsilon must be non-negative")

    def propose(rng, k):
        return prior.sample(rng, k)

    theta, dist, props = _run_generation(propose, forward, zo, epsilon, n, seed, t, acceptance_floor, workers)
    w = np.full(n, 1.0 / n)
    sigma = kernel_scale(theta, w, prior.lower, prior.upper)
    return ParticlePool(t, theta, w, dist, sigma, float(epsilon), props)


def pmc_iterate(
    pool_prev: ParticlePool,
    prior: Prior,
    forward,
    zo,
    epsilon: float,
    n: int,
    seed: int,
    acceptance_floor: float = 1e-6,
    workers: int | None = None,
) -> ParticlePool:
    """One population Monte Carlo generation at tolerance ``epsilon``.

    Ancestors are chosen by weight and perturbed with a diagonal Gaussian of
    scale ``pool_prev.sigma``; a perturbation leaving the prior support is
    discarded and the ancestor is chosen afresh.
    """
    if epsilon > pool_prev.epsilon:
        raise ValueError(f"tolerance must not grow: {epsilon} > {pool_prev.epsilon}")
    t = pool_prev.t + 1
    cum = np.cumsum(pool_prev.weights)
    cum[-1] = 1.0

    def propose(rng, k):
        anc = np.searchsorted(cum, rng.random(k), side="right")
        cand = pool_prev.theta[anc] + pool_prev.sigma * rng.standard_normal((k, prior.dim))
        return cand[np.isfinite(prior.logpdf(cand))]

    theta, dist, props = _run_generation(propose, forward, zo, epsilon, n, seed, t, acceptance_floor, workers)
    w = pmc_weights(pool_prev, theta, prior)
    sigma = kernel_scale(theta, w, prior.lower, prior.upper)
    return ParticlePool(t, theta, w, dist, sigma, float(epsilon), props)


@dataclass
class NpmcConfig:
    n: int = 500
    t_max: int = 20
    q: float = 0.5
    epsilon_stop: float = 0.0
    seed: int = 0
    n_pilot: int | None = None
    min_improvement: float = 0.01
    acceptance_floor: float = 1e-6
    workers: int | None = None


def run_npmc(prior: Prior, forward, zo, cfg: NpmcConfig = NpmcConfig()) -> PosteriorSummary:
    """Adaptive-tolerance PMC.

    The first tolerance is the q-quantile of pilot prior-predictive distances;
    each later one is the q-quantile of the previous generation's accepted
    distances. A tolerance that would drop below ``epsilon_stop`` is clamped to
    it and that generation is the last. The run also stops at ``t_max``
    generations or once the relative tolerance improvement falls below
    ``min_improvement``.
    """
    zo = np.asarray(zo, dtype=np.float64)
    n_pilot = cfg.n_pilot or cfg.n
    pilot_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 0])))
    pilot = prior.sample(pilot_rng, n_pilot)
    eps = adapt_tolerance(np.atleast_1d(distance(zo, forward(pilot))), cfg.q)
    eps = max(eps, cfg.epsilon_stop)
    try:
        pool = rejection_sample(prior, forward, zo, eps, cfg.n, cfg.seed, 1, cfg.acceptance_floor, cfg.workers)
    except AcceptanceRateError as exc:
        raise exc.at_generation(1)
    history = [pool]
    while pool.t < cfg.t_max and pool.epsilon > 0 and pool.epsilon > cfg.epsilon_stop:
        nxt = adapt_tolerance(pool.distances, cfg.q, pool.epsilon)
        nxt = max(nxt, cfg.epsilon_stop)
        if (pool.epsilon - nxt) / pool.epsilon < cfg.min_improvement:
            break
        try:
            pool = pmc_iterate(pool, prior, forward, zo, nxt, cfg.n, cfg.seed, cfg.acceptance_floor, cfg.workers)
        except AcceptanceRateError as exc:
            raise exc.at_generation(pool.t + 1)
        history.append(pool)
    summary = summarize(pool.theta, pool.weights)
    summary.distances = pool.distances
    summary.epsilon_trace = [p.epsilon for p in history]
    summary.acceptance_trace = [p.acceptance_rate for p in history]
    summary.history = history
    return summary


# ---------------------------------------------------------------------------
# output files


def write_posterior_csv(path, summary: PosteriorSummary, names=None) -> None:
    d = summary.theta.shape[1]
    names = list(names) if names else [f"theta_{i + 1}" for i in range(d)]
    rows = []
    for pool in summary.history or []:
        rows += [(*th, w, dist, pool.t) for th, w, dist in zip(pool.theta, pool.weights, pool.distances)]
    if not summary.history:
        rows = [(*th, w, dist, 1) for th, w, dist in zip(summary.theta, summary.weights, summary.distances)]
    write_table(path, names + ["weight", "distance", "generation"], rows)


def write_traces_csv(path, summary: PosteriorSummary) -> None:
    pools = summary.history
    rows = [(p.t, p.epsilon, p.acceptance_rate, p.proposals, p.ess) for p in pools]
    write_table(path, ["generation", "epsilon", "acceptance_rate", "proposals", "ess"], rows)


def format_summary_table(names, mean, std) -> str:
    width = max(9, *(len(n) for n in names))
    lines = [f"{'parameter':<{width}}  {'mean':>14}  {'STD':>14}"]
    for n, m, s in zip(names, mean, std):
        lines.append(f"{n:<{width}}  {m:>14.6g}  {s:>14.6g}")
    return "\n".join(lines) + "\n"
