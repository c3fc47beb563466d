"""Priors, stochastic simulators, and the named inference tasks.

Tasks are looked up by name with :func:`make_task`:

* ``"conjugate"``: theta ~ N(0, I_2), x | theta ~ N(theta, I_2). Analytic posterior.
* ``"nonlinear-gaussian"``: 5 parameters, 8-dimensional x (four bivariate
  Gaussian draws), tractable likelihood, multimodal posterior.
* ``"lotka-volterra"``: Markov jump predator-prey process, 4 log-rates, 9 summaries.
* ``"mg1"``: single-server FIFO queue, 3 parameters, 5 inter-departure quantiles.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np

from .diffcore import ContractViolation

# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class BoxUniformPrior:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.asarray(self.low, dtype=np.float64)
        high = np.asarray(self.high, dtype=np.float64)
        if low.shape != high.shape or low.ndim != 1 or not np.all(low < high):
            raise ContractViolation("box prior needs 1-D low < high elementwise")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def dim(self) -> int:
        return self.low.size

    @property
    def bounded(self) -> bool:
        return True

    def _check(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape[-1] != self.dim:
            raise ContractViolation(f"expected trailing dimension {self.dim}, got {theta.shape}")
        return theta

    def contains(self, theta) -> np.ndarray:
        theta = self._check(theta)
        return np.all((theta >= self.low) & (theta <= self.high), axis=-1)

    def log_prob(self, theta):
        inside = self.contains(theta)
        val = -float(np.sum(np.log(self.high - self.low)))
        return np.where(inside, val, -np.inf)

    def sample(self, rng, n: Optional[int] = None) -> np.ndarray:
        size = (self.dim,) if n is None else (n, self.dim)
        return self.low + (self.high - self.low) * rng.random(size)


@dataclass(frozen=True)
class GaussianPrior:
    """Diagonal Gaussian; ``var`` holds the variances."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        if mean.shape != var.shape or np.any(var <= 0):
            raise ContractViolation("gaussian prior needs matching shapes and positive variances")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def bounded(self) -> bool:
        return False

    def contains(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape[-1] != self.dim:
            raise ContractViolation(f"expected trailing dimension {self.dim}, got {theta.shape}")
        return np.all(np.isfinite(theta), axis=-1)

    def log_prob(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape[-1] != self.dim:
            raise ContractViolation(f"expected trailing dimension {self.dim}, got {theta.shape}")
        z2 = (theta - self.mean) ** 2 / self.var
        return -0.5 * np.sum(z2 + np.log(2 * np.pi * self.var), axis=-1)

    def sample(self, rng, n: Optional[int] = None) -> np.ndarray:
        size = (self.dim,) if n is None else (n, self.dim)
        return self.mean + np.sqrt(self.var) * rng.standard_normal(size)


def prior_log_prob(prior, theta):
    return prior.log_prob(theta)


def prior_sample(prior, rng, n: Optional[int] = None):
    return prior.sample(rng, n)


# ---------------------------------------------------------------------------
# tasks


@dataclass
class SimTask:
    name: str
    prior: object
    simulator: Callable  # (theta_batch (n, d), rng) -> x_batch (n, x_dim)
    theta_star: np.ndarray
    x0: np.ndarray
    log_likelihood: Optional[Callable] = None  # (theta, x) -> log p(x | theta), when tractable
    info: dict = field(default_factory=dict)

    @property
    def theta_dim(self) -> int:
        return self.theta_star.size

    @property
    def x_dim(self) -> int:
        return self.x0.size

    def simulate(self, theta, rng) -> np.ndarray:
        """Simulate one x per row of ``theta`` (a single vector gives a single x)."""
        theta = np.asarray(theta, dtype=np.float64)
        single = theta.ndim == 1
        out = self.simulator(np.atleast_2d(theta), rng)
        return out[0] if single else out


def _rows(theta, dim):
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    if theta.shape[1] != dim:
        raise ContractViolation(f"theta must have {dim} columns, got shape {theta.shape}")
    return theta


# conjugate Gaussian oracle ---------------------------------------------------

CONJUGATE_THETA_STAR = np.array([1.0, -0.5])


def conjugate_simulate(theta, rng) -> np.ndarray:
    theta = _rows(theta, 2)
    return theta + rng.standard_normal(theta.shape)


def conjugate_log_likelihood(theta, x):
    theta, x = np.asarray(theta, dtype=np.float64), np.asarray(x, dtype=np.float64)
    return -0.5 * np.sum((x - theta) ** 2, axis=-1) - np.log(2 * np.pi)


def conjugate_posterior(x0):
    """Posterior mean and (diagonal) covariance for the N(0, I) prior, N(theta, I) likelihood."""
    x0 = np.asarray(x0, dtype=np.float64)
    return x0 / 2.0, np.full(x0.shape, 0.5)


def conjugate_posterior_log_prob(theta, x0):
    mean, var = conjugate_posterior(x0)
    return GaussianPrior(mean, var).log_prob(theta)


# nonlinear Gaussian -----------------------------------------------------------

NLG_LOW, NLG_HIGH = -3.0, 3.0
NLG_THETA_STAR = np.array([0.7, -2.9, -1.0, -0.9, 0.6])
NLG_DRAWS = 4


def _nlg_moments(theta):
    m = theta[:, :2]
    s1, s2 = theta[:, 2] ** 2, theta[:, 3] ** 2
    rho = np.tanh(theta[:, 4])
    return m, s1, s2, rho


def _nlg_check(theta):
    theta = _rows(theta, 5)
    if np.any(theta < NLG_LOW) or np.any(theta > NLG_HIGH):
        raise ContractViolation("nonlinear-gaussian theta outside the prior box [-3, 3]^5")
    return theta


def nlg_simulate(theta, rng) -> np.ndarray:
    theta = _nlg_check(theta)
    m, s1, s2, rho = _nlg_moments(theta)
    n = theta.shape[0]
    z = rng.standard_normal((n, NLG_DRAWS, 2))
    a = s1[:, None] * z[..., 0]
    b = s2[:, None] * (rho[:, None] * z[..., 0] + np.sqrt(1 - rho**2)[:, None] * z[..., 1])
    x = np.stack([m[:, None, 0] + a, m[:, None, 1] + b], axis=-1)
    return x.reshape(n, 2 * NLG_DRAWS)


def nlg_log_likelihood(theta, x):
    """Exact log p(x | theta): sum of four bivariate normal log-densities."""
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    m, s1, s2, rho = _nlg_moments(theta)
    pts = x.reshape(x.shape[0], NLG_DRAWS, 2)
    d1 = (pts[..., 0] - m[:, None, 0]) / s1[:, None]
    d2 = (pts[..., 1] - m[:, None, 1]) / s2[:, None]
    r = rho[:, None]
    q = (d1**2 - 2 * r * d1 * d2 + d2**2) / (1 - r**2)
    logdet = 2 * np.log(s1) + 2 * np.log(s2) + np.log(1 - rho**2)
    out = -0.5 * q.sum(axis=1) - NLG_DRAWS * (np.log(2 * np.pi) + 0.5 * logdet)
    return out if out.size > 1 else out[0]


# Lotka-Volterra ---------------------------------------------------------------

LV_LOW, LV_HIGH = -5.0, 2.0
LV_THETA_STAR = np.log(np.array([0.01, 0.5, 1.0, 0.01]))
LV_INIT = (50, 100)  # predators, prey
LV_DURATION = 30.0
LV_DT = 0.2
LV_MAX_EVENTS = 100_000


@numba.njit(cache=True)
def _gillespie_lv(rates, x_init, y_init, duration, dt, uniforms, max_events):
    n_points = int(round(duration / dt)) + 1
    series = np.empty((n_points, 2))
    x, y = float(x_init), float(y_init)
    t = 0.0
    k = 0  # next record index
    events = 0
    while k < n_points:
        h1 = rates[0] * x * y
        h2 = rates[1] * x
        h3 = rates[2] * y
        h4 = rates[3] * x * y
        total = h1 + h2 + h3 + h4
        if total <= 0.0:
            t_next = np.inf
        else:
            if events >= max_events:
                return series[:k], events, True
            t_next = t - np.log(uniforms[2 * events]) / total
        while k < n_points and k * dt < t_next:
            series[k, 0] = x
            series[k, 1] = y
            k += 1
        if k >= n_points:
            break
        r = uniforms[2 * events + 1] * total
        if r < h1:
            x += 1.0
        elif r < h1 + h2:
            x -= 1.0
        elif r < h1 + h2 + h3:
            y += 1.0
        else:
            y -= 1.0
        t = t_next
        events += 1
    return series, events, False


def _lv_rates(theta):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (4,):
        raise ContractViolation(f"lotka-volterra theta must have shape (4,), got {theta.shape}")
    with np.errstate(over="ignore"):
        rates = np.exp(theta)
    if np.any(np.isnan(rates)) or np.any(np.isinf(rates)):
        raise ContractViolation("lotka-volterra rates must be finite")
    return rates


def lv_trajectory(theta, rng, max_events: int = LV_MAX_EVENTS):
    """Gillespie simulation. Returns (series of shape (T, 2) as [predators, prey], truncated flag)."""
    rates = _lv_rates(theta)
    # 1 - U keeps the exponential draw away from log(0)
    uniforms = 1.0 - rng.random(2 * max_events)
    series, _, truncated = _gillespie_lv(
        rates, LV_INIT[0], LV_INIT[1], LV_DURATION, LV_DT, uniforms, max_events
    )
    return series, bool(truncated)


def _autocorr(z, lag, n):
    if z.size <= lag:
        return 0.0
    return float(np.dot(z[:-lag], z[lag:]) / (n - 1))


def lv_summaries(series) -> np.ndarray:
    """Nine summaries: per series mean, log(1 + variance), lag-1 and lag-2 autocorrelation; cross-correlation."""
    series = np.asarray(series, dtype=np.float64)
    n = series.shape[0]
    if n == 0:
        return np.zeros(9)
    out = []
    normed = []
    for j in range(2):
        s = series[:, j]
        mean, std = s.mean(), s.std(ddof=1) if n > 1 else 0.0
        z = (s - mean) / std if std > 0 else np.zeros_like(s)
        normed.append(z)
        out += [mean, math.log1p(std**2)]
    for z in normed:
        out += [_autocorr(z, 1, n), _autocorr(z, 2, n)]
    out.append(float(np.dot(normed[0], normed[1]) / (n - 1)) if n > 1 else 0.0)
    return np.array(out)


def lv_simulate(theta, rng) -> np.ndarray:
    """Raw (unstandardised) 9-dimensional summary vector of one Gillespie run."""
    series, _ = lv_trajectory(theta, rng)
    return lv_summaries(series)


# M/G/1 queue ----------------------------------------------------------------

MG1_LOW = np.array([0.0, 0.0, 0.0])
MG1_HIGH = np.array([10.0, 10.0, 1.0 / 3.0])
MG1_THETA_STAR = np.array([1.0, 5.0, 0.2])
MG1_JOBS = 50
MG1_QUANTILES = (0.0, 25.0, 50.0, 75.0, 100.0)


def mg1_interdepartures(theta, rng, jobs: int = MG1_JOBS) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (3,):
        raise ContractViolation(f"mg1 theta must have shape (3,), got {theta.shape}")
    lo, width, rate = theta
    if width < 0 or rate <= 0:
        raise ContractViolation("mg1 needs service width >= 0 and arrival rate > 0")
    service = lo + width * rng.random(jobs)
    arrivals = np.cumsum(rng.exponential(1.0 / rate, size=jobs))
    departures = np.empty(jobs)
    last = 0.0
    for i in range(jobs):
        last = max(last, arrivals[i]) + service[i]
        departures[i] = last
    return np.diff(departures, prepend=0.0)


def mg1_simulate(theta, rng) -> np.ndarray:
    return np.percentile(mg1_interdepartures(theta, rng), MG1_QUANTILES)


# ---------------------------------------------------------------------------
# registry


def _loop(fn):
    def run(theta, rng):
        return np.stack([fn(t, rng) for t in theta])
    return run


def _make_conjugate(seed):
    prior = GaussianPrior(np.zeros(2), np.ones(2))
    x0 = conjugate_simulate(CONJUGATE_THETA_STAR, np.random.default_rng(seed))[0]
    return SimTask("conjugate", prior, conjugate_simulate, CONJUGATE_THETA_STAR.copy(), x0,
                   log_likelihood=conjugate_log_likelihood)


def _make_nlg(seed):
    prior = BoxUniformPrior(np.full(5, NLG_LOW), np.full(5, NLG_HIGH))
    x0 = nlg_simulate(NLG_THETA_STAR, np.random.default_rng(seed))[0]
    return SimTask("nonlinear-gaussian", prior, nlg_simulate, NLG_THETA_STAR.copy(), x0,
                   log_likelihood=nlg_log_likelihood)


@functools.lru_cache(maxsize=4)
def lv_pilot_statistics(n_pilot: int = 1000, seed: int = 0):
    """Per-summary mean and std of raw summaries over prior simulations."""
    rng = np.random.default_rng(seed)
    prior = BoxUniformPrior(np.full(4, LV_LOW), np.full(4, LV_HIGH))
    stats = np.stack([lv_simulate(prior.sample(rng), rng) for _ in range(n_pilot)])
    std = stats.std(axis=0)
    return stats.mean(axis=0), np.where(std > 0, std, 1.0)


def _make_lv(seed, n_pilot: int = 1000):
    prior = BoxUniformPrior(np.full(4, LV_LOW), np.full(4, LV_HIGH))
    mean, std = lv_pilot_statistics(n_pilot)

    def simulator(theta, rng):
        return (np.stack([lv_simulate(t, rng) for t in theta]) - mean) / std

    x0 = simulator(LV_THETA_STAR[None], np.random.default_rng(seed))[0]
    return SimTask("lotka-volterra", prior, simulator, LV_THETA_STAR.copy(), x0,
                   info={"summary_mean": mean, "summary_std": std, "n_pilot": n_pilot})


def _make_mg1(seed):
    prior = BoxUniformPrior(MG1_LOW, MG1_HIGH)
    x0 = mg1_simulate(MG1_THETA_STAR, np.random.default_rng(seed))
    return SimTask("mg1", prior, _loop(mg1_simulate), MG1_THETA_STAR.copy(), x0)


TASKS = {
    "conjugate": _make_conjugate,
    "nonlinear-gaussian": _make_nlg,
    "lotka-volterra": _make_lv,
    "mg1": _make_mg1,
}


def make_task(name: str, seed: int = 0, **kwargs) -> SimTask:
    """Build a task by name; ``x0`` is simulated from ``theta_star`` with ``seed``."""
    try:
        factory = TASKS[name]
    except KeyError:
        raise ContractViolation(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None
    return factory(seed, **kwargs)
