"""Axis-aligned slice sampling, rejection sampling against a prior's support, and Gaussian KDE."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffcore import ContractViolation, NumericFailure, logsumexp


class LeakageFailure(RuntimeError):
    """Rejection sampling accepted nothing within the proposal budget."""

    def __init__(self, proposed: int, rate_bound: float):
        super().__init__(f"no proposals accepted out of {proposed}; acceptance rate < {rate_bound:.3g}")
        self.proposed = proposed
        self.rate_bound = rate_bound


# ---------------------------------------------------------------------------
# slice sampling


@dataclass
class SliceChain:
    """State of a single persistent slice-sampling chain.

    ``target`` maps one parameter vector to an unnormalised log density.
    Replacing it through :meth:`set_target` keeps the position and flags the
    chain as needing burn-in.
    """

    position: np.ndarray
    target: Callable[[np.ndarray], float]
    rng: np.random.Generator
    widths: np.ndarray = None
    max_step_out: int = 100
    max_shrink: int = 1000
    evaluations: int = 0
    sweeps: int = 0
    needs_burn_in: bool = True
    log_density: float = field(default=math.nan, repr=False)

    def __post_init__(self):
        self.position = np.array(self.position, dtype=np.float64)
        if self.widths is None:
            self.widths = np.ones_like(self.position)
        self.widths = np.broadcast_to(np.asarray(self.widths, dtype=np.float64), self.position.shape).copy()
        self._refresh()

    def _eval(self, theta) -> float:
        self.evaluations += 1
        return float(self.target(theta))

    def _refresh(self):
        self.log_density = self._eval(self.position)
        if not self.log_density > -math.inf:
            raise ContractViolation(f"target log density is -inf (or NaN) at the chain position {self.position}")

    def set_target(self, target):
        self.target = target
        self.needs_burn_in = True
        self._refresh()

    def sweep(self):
        """Update every coordinate once (stepping out, then shrinkage)."""
        x = self.position
        logp = self.log_density
        rng = self.rng
        for d in range(x.size):
            w = self.widths[d]
            log_y = logp + math.log(rng.random() or 1e-300)
            x0 = x[d]
            left = x0 - w * rng.random()
            right = left + w
            j = int(self.max_step_out * rng.random())
            k = self.max_step_out - 1 - j
            probe = x.copy()
            while j > 0:
                probe[d] = left
                if self._eval(probe) <= log_y:
                    break
                left -= w
                j -= 1
            while k > 0:
                probe[d] = right
                if self._eval(probe) <= log_y:
                    break
                right += w
                k -= 1
            for _ in range(self.max_shrink):
                probe[d] = left + (right - left) * rng.random()
                lp = self._eval(probe)
                if lp > log_y:
                    x = probe
                    logp = lp
                    break
                if probe[d] < x0:
                    left = probe[d]
                else:
                    right = probe[d]
            else:
                raise NumericFailure(f"slice shrinkage exceeded {self.max_shrink} steps on coordinate {d}")
        self.position = x
        self.log_density = logp
        self.sweeps += 1


def slice_sample(chain: SliceChain, n: int, burn_in: int = 200, thin: int = 10) -> np.ndarray:
    """Run ``burn_in`` discarded sweeps, then keep every ``thin``-th sweep until ``n`` samples."""
    if n < 1 or thin < 1 or burn_in < 0:
        raise ContractViolation("need n >= 1, thin >= 1, burn_in >= 0")
    for _ in range(burn_in):
        chain.sweep()
    chain.needs_burn_in = False
    out = np.empty((n, chain.position.size))
    for i in range(n):
        for _ in range(thin):
            chain.sweep()
        out[i] = chain.position
    return out


# ---------------------------------------------------------------------------
# rejection sampling


def rejection_sample(sampler: Callable[[int, np.random.Generator], np.ndarray], prior, n_target: int,
                     max_proposals: int, rng, batch_cap: int = 100_000):
    """Keep draws from ``sampler`` that fall inside ``prior``'s support.

    ``sampler(count, rng)`` returns a (count, dim) array, e.g. a bound
    ``MafModel.sample`` at a fixed observation. Returns (samples, acceptance
    rate over every proposal made). Fewer than ``n_target`` samples come
    back only if ``max_proposals`` runs out first.
    """
    if n_target < 1 or max_proposals < 1:
        raise ContractViolation("n_target and max_proposals must be >= 1")
    kept = []
    accepted = proposed = 0
    while accepted < n_target and proposed < max_proposals:
        need = n_target - accepted
        rate = accepted / proposed if accepted else (1.0 if proposed == 0 else 0.0)
        count = need if proposed == 0 else (int(1.2 * need / rate) + 1 if rate > 0 else batch_cap)
        count = max(1, min(count, batch_cap, max_proposals - proposed))
        draws = sampler(count, rng)
        inside = draws[prior.contains(draws)]
        kept.append(inside)
        accepted += inside.shape[0]
        proposed += count
    if accepted == 0:
        raise LeakageFailure(proposed, 1.0 / proposed)
    samples = np.concatenate(kept)[:n_target]
    return samples, accepted / proposed


def support_fraction(sampler: Callable[[int, np.random.Generator], np.ndarray], prior, n_proposals: int,
                     rng, chunk: int = 100_000) -> float:
    """Fraction of ``n_proposals`` fresh draws from ``sampler`` inside the prior support."""
    if n_proposals < 1:
        raise ContractViolation("n_proposals must be >= 1")
    inside = 0
    for s in range(0, n_proposals, chunk):
        count = min(chunk, n_proposals - s)
        inside += int(np.count_nonzero(prior.contains(sampler(count, rng))))
    return inside / n_proposals


# ---------------------------------------------------------------------------
# kernel density estimation


@dataclass(frozen=True)
class KdeModel:
    points: np.ndarray
    bandwidth: np.ndarray

    @classmethod
    def fit(cls, samples) -> "KdeModel":
        """Gaussian KDE with Scott's rule per dimension: h = sd * n ** (-1 / (d + 4))."""
        pts = np.asarray(samples, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        n, d = pts.shape
        if n < 2:
            raise ContractViolation("KDE needs at least 2 support points")
        sd = pts.std(axis=0, ddof=1)
        if np.any(~(sd > 0)):
            raise ContractViolation(f"degenerate KDE dimension(s): {np.flatnonzero(~(sd > 0)).tolist()}")
        return cls(pts, sd * n ** (-1.0 / (d + 4)))

    def log_prob(self, theta) -> np.ndarray:
        q = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        n, d = self.points.shape
        if q.shape[1] != d:
            raise ContractViolation(f"query dimension {q.shape[1]} != KDE dimension {d}")
        norm = -np.sum(np.log(self.bandwidth)) - 0.5 * d * math.log(2 * math.pi) - math.log(n)
        out = np.empty(q.shape[0])
        for i, row in enumerate(q):
            z = (row - self.points) / self.bandwidth
            out[i] = logsumexp(-0.5 * np.sum(z * z, axis=1)) + norm
        return out


def kde_log_prob(model: KdeModel, theta) -> float:
    return float(model.log_prob(theta)[0])
