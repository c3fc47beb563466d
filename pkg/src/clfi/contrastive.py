"""Contrastive likelihood-free inference.

A critic f(theta, x) is trained to pick out, among K candidate parameters,
the one that actually generated x. The softmax over candidates is the class
posterior, and the optimal critic equals log p(theta | x) / p(theta) up to an
additive function of x. Two parameterisations share this objective:

* ``sre``: f is a free-form residual classifier.
* ``snpec``: f = log q(theta | x) - log p(theta) for a normalised conditional
  flow q, which then is itself the posterior estimate.

``snl`` (surrogate likelihood q(x | theta) fitted by maximum likelihood) is
included as a baseline. :func:`run_round` performs one round of the
sequential procedure for any of them.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .densnets import (
    MafModel,
    ResidualClassifier,
    Standardizer,
    TrainConfig,
    TrainHistory,
    classifier_inputs,
    classifier_logit_ops,
    init_classifier,
    init_maf,
    maf_log_prob,
    maf_log_prob_ops,
    maf_sample,
    prepare_inputs,
    train,
)
from .diffcore import ContractViolation, NumericFailure, np_ops
from .sampling import LeakageFailure, SliceChain, rejection_sample, slice_sample
from .simulators import SimTask

log = logging.getLogger(__name__)

ALGORITHMS = ("sre", "snpec", "snpec-mcmc", "snl")


# ---------------------------------------------------------------------------
# critics


@dataclass(frozen=True)
class Critic:
    """A logit function f(theta, x); ``kind`` is ``"sre"`` or ``"snpec"``.

    For ``snpec`` the model is a flow over theta conditioned on x and the
    logit subtracts the prior log density.
    """

    kind: str
    model: object
    prior: object = None

    def __post_init__(self):
        if self.kind not in ("sre", "snpec"):
            raise ContractViolation(f"unknown critic kind {self.kind!r}")
        if self.kind == "snpec" and self.prior is None:
            raise ContractViolation("an snpec critic needs the prior")

    @property
    def params(self):
        return self.model.params

    def with_params(self, params) -> "Critic":
        return dataclasses.replace(self, model=self.model.with_params(params))

    def logits_ops(self, ops, params, theta, x):
        """Logits for row-paired (theta, x) batches, on any ops backend."""
        if self.kind == "sre":
            return classifier_logit_ops(ops, params, self.model, classifier_inputs(self.model, theta, x))
        th, ctx = prepare_inputs(self.model, theta, x)
        offset = -self.model.theta_norm.log_abs_det - self.prior.log_prob(np.atleast_2d(theta))
        return ops.add(maf_log_prob_ops(ops, params, self.model, th, ctx), offset)

    def logit(self, theta, x) -> np.ndarray:
        return np.asarray(self.logits_ops(np_ops, self.params, theta, x))


def make_sre_critic(theta, x, rng, hidden: int = 50, n_blocks: int = 2) -> Critic:
    """Residual classifier with input standardisation fitted on (theta, x)."""
    theta, x = np.atleast_2d(theta), np.atleast_2d(x)
    model = init_classifier(theta.shape[1], x.shape[1], rng, hidden=hidden, n_blocks=n_blocks)
    model = dataclasses.replace(model, theta_norm=Standardizer.fit(theta), x_norm=Standardizer.fit(x))
    return Critic("sre", model)


def make_flow(target, context, rng, n_layers: int = 5, hidden: int = 50) -> MafModel:
    """Identity-initialised MAF over ``target`` given ``context``, standardised on the data."""
    target, context = np.atleast_2d(target), np.atleast_2d(context)
    model = init_maf(target.shape[1], context.shape[1], rng, n_layers=n_layers, hidden=hidden)
    return dataclasses.replace(model, theta_norm=Standardizer.fit(target),
                               context_norm=Standardizer.fit(context))


def make_snpec_critic(theta, x, prior, rng, **kw) -> Critic:
    return Critic("snpec", make_flow(theta, x, rng, **kw), prior)


# ---------------------------------------------------------------------------
# atoms and the contrastive objective


@dataclass(frozen=True)
class AtomSet:
    """Candidate parameters for one observation; exactly one generated it."""

    theta: np.ndarray
    positive_index: int = 0

    def __post_init__(self):
        th = np.atleast_2d(np.asarray(self.theta, dtype=np.float64))
        object.__setattr__(self, "theta", th)
        if not 0 <= self.positive_index < th.shape[0]:
            raise ContractViolation("positive_index out of range")

    @property
    def K(self) -> int:
        return self.theta.shape[0]


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()


def class_posterior(critic, atoms: AtomSet, x) -> np.ndarray:
    """Probability, for each atom, that it is the one that generated ``x``."""
    logits = critic.logit(atoms.theta, np.asarray(x)[None, :])
    bad = np.flatnonzero(~np.isfinite(logits))
    if bad.size:
        raise NumericFailure(f"non-finite logit for atom(s) {bad.tolist()}")
    return softmax(logits)


def atom_indices(B: int, K: int, rng) -> np.ndarray:
    """(B, K) indices into a batch: column 0 is the row itself, then K-1 distinct others.

    With K == B every row is a permutation of the whole batch, i.e. the full
    Cartesian product of parameters and observations.
    """
    if not 2 <= K <= B:
        raise ContractViolation(f"need 2 <= K <= B, got K={K}, B={B}")
    rows = np.arange(B)
    if K == B:
        others = np.array([np.r_[rows[:b], rows[b + 1:]] for b in rows]).reshape(B, B - 1)
    else:
        pick = np.argsort(rng.random((B, B - 1)), axis=1)[:, : K - 1]
        others = pick + (pick >= rows[:, None])
    return np.concatenate([rows[:, None], others], axis=1)


def contrastive_loss_ops(ops, params, critic, theta, x, K: int, rng, chunk_pairs: int = 1000):
    """Mean over the batch of -log softmax probability of the true parameter among K atoms.

    The B*K logit table is evaluated a few rows at a time (about
    ``chunk_pairs`` pairs per piece) so intermediates stay cache-sized; the
    result does not depend on the chunking.
    """
    theta, x = np.atleast_2d(theta), np.atleast_2d(x)
    B = theta.shape[0]
    K = min(K, B)
    idx = atom_indices(B, K, rng)
    rows = max(1, chunk_pairs // K)
    total = None
    for s in range(0, B, rows):
        sub = idx[s:s + rows]
        g = sub.shape[0]
        logits = critic.logits_ops(ops, params, theta[sub.ravel()], np.repeat(x[s:s + rows], K, axis=0))
        part = logit_table_loss_sum(ops, ops.reshape(logits, (g, K)))
        total = part if total is None else ops.add(total, part)
    return ops.mul(total, 1.0 / B)


def logit_table_loss_sum(ops, table):
    """Summed loss over rows of a (B, K) logit table whose column 0 holds the positive pair."""
    B, K = table.shape
    first = np.zeros((B, K))
    first[:, 0] = 1.0
    positive = ops.sum(ops.mul(table, first), axis=1)
    return ops.sum(ops.add(ops.logsumexp(table, axis=1), ops.mul(positive, -1.0)))


def logit_table_loss(ops, table):
    """Mean loss for a (B, K) logit table whose column 0 holds the positive pair."""
    return ops.mul(logit_table_loss_sum(ops, table), 1.0 / table.shape[0])


def minibatch_loss(critic, theta, x, K: int, rng) -> float:
    """Contrastive classification loss of a batch of B (theta, x) pairs, 2 <= K <= B."""
    theta = np.atleast_2d(theta)
    if not 2 <= K <= theta.shape[0]:
        raise ContractViolation(f"need 2 <= K <= B, got K={K}, B={theta.shape[0]}")
    return float(contrastive_loss_ops(np_ops, critic.params, critic, theta, x, K, rng))


def flow_nll_ops(ops, params, model: MafModel, target, context):
    """Mean negative log density of ``target`` rows under the flow given ``context`` rows."""
    t, c = prepare_inputs(model, target, context)
    lp = maf_log_prob_ops(ops, params, model, t, c)
    n = t.shape[0]
    return ops.add(ops.mul(ops.sum(lp), -1.0 / n), model.theta_norm.log_abs_det)


def snpec_first_round_loss(q: MafModel, theta, x) -> float:
    """Maximum-likelihood loss, mean -log q(theta | x), used while parameters come from the prior."""
    return float(flow_nll_ops(np_ops, q.params, q, theta, x))


def snl_loss(q_x: MafModel, theta, x) -> float:
    """Mean -log q(x | theta) for a flow over observations conditioned on parameters."""
    return float(flow_nll_ops(np_ops, q_x.params, q_x, x, theta))


def contrastive_loss_fn(critic, K):
    return lambda ops, params, th, x, rng: contrastive_loss_ops(ops, params, critic, th, x, K, rng)


def posterior_ml_loss_fn(model):
    return lambda ops, params, th, x, rng: flow_nll_ops(ops, params, model, th, x)


def likelihood_ml_loss_fn(model):
    return lambda ops, params, th, x, rng: flow_nll_ops(ops, params, model, x, th)


# ---------------------------------------------------------------------------
# sequential rounds


@dataclass
class AlgoConfig:
    algorithm: str = "snpec"
    K: int = 100
    sims_per_round: int = 1000
    train: TrainConfig = field(default_factory=TrainConfig)
    burn_in: int = 200
    thin: int = 10
    slice_width: float = 1.0
    acceptance_floor: float = 1e-5
    max_proposals: int = 10**7
    hidden: int = 50
    flow_layers: int = 5

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ContractViolation(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.sims_per_round < 1:
            raise ContractViolation("sims_per_round must be >= 1")
        if not 2 <= self.K <= self.train.batch_size:
            raise ContractViolation(f"need 2 <= K <= batch_size, got K={self.K}")


@dataclass
class RoundRecord:
    round: int
    theta: np.ndarray
    x: np.ndarray
    history: TrainHistory
    proposal_acceptance: Optional[float] = None
    events: list = field(default_factory=list)


@dataclass
class RoundState:
    """Everything carried from one round to the next."""

    task: SimTask
    cfg: AlgoConfig
    sim_rng: np.random.Generator
    train_rng: np.random.Generator
    sample_rng: np.random.Generator
    round_index: int = 0
    theta: np.ndarray = None
    x: np.ndarray = None
    model: object = None  # Critic, or the likelihood flow for snl
    chain: Optional[SliceChain] = None
    pending: Optional[np.ndarray] = None  # posterior draws not yet used as proposals
    proposal: Optional[Callable] = None  # (count, rng) -> theta; replaces the prior in round 1
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)

    @classmethod
    def initial(cls, task: SimTask, cfg: AlgoConfig, seed: int) -> "RoundState":
        sim, tr, sa = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        empty_t = np.empty((0, task.theta_dim))
        empty_x = np.empty((0, task.x_dim))
        return cls(task, cfg, sim, tr, sa, theta=empty_t, x=empty_x)

    @property
    def dataset_size(self) -> int:
        return self.theta.shape[0]


def mcmc_log_target(state: RoundState):
    """Unnormalised log posterior at x0 for the chain-based algorithms."""
    task, model, algo = state.task, state.model, state.cfg.algorithm
    prior, x0 = task.prior, task.x0
    if algo == "sre":
        def f(theta):
            lp = float(prior.log_prob(theta))
            if lp == -math.inf:
                return lp
            return float(model.logit(theta, x0)[0]) + lp
    elif algo == "snl":
        def f(theta):
            lp = float(prior.log_prob(theta))
            if lp == -math.inf:
                return lp
            return float(maf_log_prob(model, x0, theta)[0]) + lp
    else:  # snpec-mcmc, and the snpec fallback: q(theta | x0) restricted to the prior support
        flow = model.model

        def f(theta):
            if not prior.contains(theta):
                return -math.inf
            return float(maf_log_prob(flow, theta, x0)[0])
    return f


def _chain_samples(state: RoundState, n: int) -> np.ndarray:
    # the chain's target is swapped by run_round after each fit
    if state.chain is None:
        target = mcmc_log_target(state)
        # start where the current target is highest among the simulated parameters
        cand = state.theta[: min(500, state.dataset_size)]
        vals = np.array([target(t) for t in cand])
        start = cand[int(np.argmax(vals))]
        state.chain = SliceChain(start, target, state.sample_rng, widths=state.cfg.slice_width)
    burn = state.cfg.burn_in if state.chain.needs_burn_in else 0
    return slice_sample(state.chain, n, burn_in=burn, thin=state.cfg.thin)


def draw_posterior(state: RoundState, n: int):
    """n draws from the current posterior estimate; returns (samples, rejection acceptance or None)."""
    cfg, task = state.cfg, state.task
    if state.model is None:
        if state.proposal is not None:
            return state.proposal(n, state.sample_rng), None
        return task.prior.sample(state.sample_rng, n), None
    if cfg.algorithm == "snpec":
        flow = state.model.model
        try:
            samples, rate = rejection_sample(
                lambda c, r: maf_sample(flow, task.x0, c, r), task.prior, n, cfg.max_proposals, state.sample_rng
            )
        except LeakageFailure as exc:
            samples, rate = None, exc.rate_bound
        if samples is not None and rate >= cfg.acceptance_floor and samples.shape[0] == n:
            return samples, rate
        msg = f"round {state.round_index}: rejection acceptance {rate:.3g} below floor, using slice sampling"
        log.warning(msg)
        state.events.append(msg)
        return _chain_samples(state, n), rate
    return _chain_samples(state, n), None


def posterior_samples(state: RoundState, n: int):
    """Draws from the current posterior; they are also reused as next round's proposals."""
    samples, rate = draw_posterior(state, n)
    state.pending = samples
    return samples, rate


def _fit(state: RoundState, rng) -> TrainHistory:
    cfg, task = state.cfg, state.task
    th, x = state.theta, state.x
    algo = cfg.algorithm
    first = state.model is None
    if first:
        if algo == "sre":
            state.model = make_sre_critic(th, x, rng, hidden=cfg.hidden)
        elif algo == "snl":
            state.model = make_flow(x, th, rng, n_layers=cfg.flow_layers, hidden=cfg.hidden)
        else:
            state.model = make_snpec_critic(th, x, task.prior, rng, n_layers=cfg.flow_layers, hidden=cfg.hidden)
    if algo == "sre":
        loss = contrastive_loss_fn(state.model, cfg.K)
        fitted, hist = train(state.model, th, x, loss, cfg.train, rng)
    elif algo == "snl":
        fitted, hist = train(state.model, th, x, likelihood_ml_loss_fn(state.model), cfg.train, rng)
    else:
        critic = state.model
        # maximum likelihood is only valid while the parameters are prior draws
        if state.round_index == 1 and state.proposal is None:
            flow, hist = train(critic.model, th, x, posterior_ml_loss_fn(critic.model), cfg.train, rng)
            fitted = dataclasses.replace(critic, model=flow)
        else:
            fitted, hist = train(critic, th, x, contrastive_loss_fn(critic, cfg.K), cfg.train, rng)
    state.model = fitted
    return hist


def run_round(state: RoundState) -> RoundState:
    """One round: propose, simulate, aggregate, retrain, refresh the posterior."""
    cfg, task = state.cfg, state.task
    n = cfg.sims_per_round
    n_events = len(state.events)
    rate = None
    if state.pending is not None and state.pending.shape[0] >= n:
        theta = state.pending[:n]
    else:
        theta, rate = draw_posterior(state, n)
    state.pending = None
    x = task.simulate(theta, state.sim_rng)
    if not np.all(np.isfinite(x)):
        raise NumericFailure(f"simulator returned non-finite output in round {state.round_index + 1}")
    state.round_index += 1
    state.theta = np.concatenate([state.theta, theta])
    state.x = np.concatenate([state.x, x])
    hist = _fit(state, state.train_rng)
    if state.chain is not None:
        state.chain.set_target(mcmc_log_target(state))
    state.records.append(RoundRecord(state.round_index, theta, x, hist, rate, state.events[n_events:]))
    return state


def run_rounds(task: SimTask, cfg: AlgoConfig, rounds: int, seed: int) -> RoundState:
    state = RoundState.initial(task, cfg, seed)
    for _ in range(rounds):
        run_round(state)
    return state


def posterior_log_ratio(state: RoundState, theta) -> np.ndarray:
    """Learned log p(theta | x0) / p(theta), up to a constant, at each row of ``theta``."""
    theta = np.atleast_2d(theta)
    x0 = state.task.x0
    if state.cfg.algorithm == "snl":
        return maf_log_prob(state.model, x0, theta)
    return state.model.logit(theta, x0)
