"""Conditional density estimators (MADE / MAF), the residual classifier, and the trainer.

All networks are written against an ops backend (see :mod:`clfi.diffcore`), so
the same code runs on a gradient tape during training and on bare numpy arrays
during sampling and MCMC.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .diffcore import AdamState, ContractViolation, NumericFailure, Tape, adam_step, np_ops

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class Standardizer:
    """Fixed affine input normalisation ``(v - shift) / scale``."""

    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, data: np.ndarray, min_scale: float = 1e-8) -> "Standardizer":
        data = np.asarray(data, dtype=np.float64)
        return cls(data.mean(axis=0), np.maximum(data.std(axis=0), min_scale))

    def __call__(self, v):
        return (np.asarray(v, dtype=np.float64) - self.shift) / self.scale

    def inverse(self, v):
        return np.asarray(v) * self.scale + self.shift

    @property
    def log_abs_det(self) -> float:
        return float(np.sum(np.log(self.scale)))


def _as_batch(v, dim: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        v = v[None, :]
    if v.ndim != 2 or v.shape[1] != dim:
        raise ContractViolation(f"{what} must have trailing dimension {dim}, got shape {v.shape}")
    return v


# ---------------------------------------------------------------------------
# MADE / MAF


def made_degrees(dim: int, hidden: int, reverse: bool):
    """Input and hidden degrees for one MADE; output degrees equal input degrees."""
    if reverse:
        in_deg = np.arange(dim, 0, -1)
    else:
        in_deg = np.arange(1, dim + 1)
    if dim > 1:
        hid_deg = 1 + (np.arange(hidden) % (dim - 1))
    else:
        hid_deg = np.zeros(hidden, dtype=int)
    return in_deg, hid_deg


def made_masks(dim: int, hidden: int, reverse: bool):
    in_deg, hid_deg = made_degrees(dim, hidden, reverse)
    m_in = (hid_deg[None, :] >= in_deg[:, None]).astype(np.float64)
    m_hid = (hid_deg[None, :] >= hid_deg[:, None]).astype(np.float64)
    m_out = (in_deg[None, :] > hid_deg[:, None]).astype(np.float64)
    return m_in, m_hid, m_out


@dataclass(frozen=True)
class MafModel:
    """Stack of conditional MADEs over a standard normal base.

    ``params`` maps names like ``"l0.w_in"`` to arrays. Orderings alternate
    between natural and reversed from one layer to the next.
    """

    theta_dim: int
    context_dim: int
    params: dict
    n_layers: int = 5
    hidden: int = 50
    clamp: float = 10.0
    theta_norm: Optional[Standardizer] = None
    context_norm: Optional[Standardizer] = None

    def __post_init__(self):
        if self.theta_norm is None:
            object.__setattr__(self, "theta_norm", Standardizer.identity(self.theta_dim))
        if self.context_norm is None:
            object.__setattr__(self, "context_norm", Standardizer.identity(self.context_dim))

    def masks(self, layer: int):
        return _cached_masks(self.theta_dim, self.hidden, layer % 2 == 1)

    def order(self, layer: int) -> np.ndarray:
        in_deg, _ = made_degrees(self.theta_dim, self.hidden, layer % 2 == 1)
        return np.argsort(in_deg)

    def with_params(self, params) -> "MafModel":
        return dataclasses.replace(self, params=params)

    def log_prob(self, theta, x) -> np.ndarray:
        return maf_log_prob(self, theta, x)

    def sample(self, x, count: int, rng) -> np.ndarray:
        return maf_sample(self, x, count, rng)


_MASK_CACHE: dict = {}


def _cached_masks(dim, hidden, reverse):
    key = (dim, hidden, reverse)
    if key not in _MASK_CACHE:
        _MASK_CACHE[key] = made_masks(dim, hidden, reverse)
    return _MASK_CACHE[key]


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_maf(theta_dim: int, context_dim: int, rng, n_layers: int = 5, hidden: int = 50,
             identity: bool = True, head_scale: float = 0.0) -> MafModel:
    """Fresh MAF. With ``identity`` the output heads are zero, so q(theta|x) = N(0, I).

    ``head_scale > 0`` draws small random heads instead (useful for tests).
    """
    if theta_dim < 1 or context_dim < 0:
        raise ContractViolation("theta_dim must be >= 1 and context_dim >= 0")
    p = {}
    for l in range(n_layers):
        p[f"l{l}.w_in"] = _glorot(rng, theta_dim, hidden)
        p[f"l{l}.w_ctx"] = _glorot(rng, max(context_dim, 1), hidden)[:context_dim]
        p[f"l{l}.b_in"] = np.zeros(hidden)
        p[f"l{l}.w_hid"] = _glorot(rng, hidden, hidden)
        p[f"l{l}.b_hid"] = np.zeros(hidden)
        for head in ("mu", "alpha"):
            if identity and head_scale == 0.0:
                p[f"l{l}.w_{head}"] = np.zeros((hidden, theta_dim))
                p[f"l{l}.b_{head}"] = np.zeros(theta_dim)
            else:
                p[f"l{l}.w_{head}"] = head_scale * rng.standard_normal((hidden, theta_dim))
                p[f"l{l}.b_{head}"] = head_scale * rng.standard_normal(theta_dim)
    return MafModel(theta_dim, context_dim, p, n_layers=n_layers, hidden=hidden)


def made_forward(ops, p, model: MafModel, layer: int, z, ctx):
    """Shift and clamped log-scale for one MADE, given current variables and context."""
    m_in, m_hid, m_out = model.masks(layer)
    pre = ops.masked_affine(z, p[f"l{layer}.w_in"], m_in, p[f"l{layer}.b_in"])
    if model.context_dim > 0:
        pre = ops.add(pre, ops.affine(ctx, p[f"l{layer}.w_ctx"]))
    h = ops.relu(pre)
    h = ops.relu(ops.masked_affine(h, p[f"l{layer}.w_hid"], m_hid, p[f"l{layer}.b_hid"]))
    mu = ops.masked_affine(h, p[f"l{layer}.w_mu"], m_out, p[f"l{layer}.b_mu"])
    alpha = ops.clamp_soft(ops.masked_affine(h, p[f"l{layer}.w_alpha"], m_out, p[f"l{layer}.b_alpha"]), model.clamp)
    return mu, alpha


def maf_log_prob_ops(ops, p, model: MafModel, theta_s, ctx_s):
    """log q over already-standardised inputs, excluding the standardiser's Jacobian."""
    z = theta_s
    logdet = None
    for layer in range(model.n_layers):
        mu, alpha = made_forward(ops, p, model, layer, z, ctx_s)
        z = ops.mul(ops.add(z, ops.mul(mu, -1.0)), ops.exp(ops.mul(alpha, -1.0)))
        term = ops.sum(alpha, axis=1)
        logdet = term if logdet is None else ops.add(logdet, term)
    base = ops.mul(ops.sum(ops.square(z), axis=1), -0.5)
    return ops.add(ops.add(base, -0.5 * model.theta_dim * LOG_2PI), ops.mul(logdet, -1.0))


def prepare_inputs(model: MafModel, theta, x):
    theta = _as_batch(theta, model.theta_dim, "theta")
    if model.context_dim > 0:
        x = _as_batch(x, model.context_dim, "x")
        if x.shape[0] == 1 and theta.shape[0] > 1:
            x = np.repeat(x, theta.shape[0], axis=0)
        elif theta.shape[0] == 1 and x.shape[0] > 1:
            theta = np.repeat(theta, x.shape[0], axis=0)
        if x.shape[0] != theta.shape[0]:
            raise ContractViolation(f"batch sizes differ: theta {theta.shape[0]}, x {x.shape[0]}")
        ctx = model.context_norm(x)
    else:
        ctx = np.zeros((theta.shape[0], 0))
    return model.theta_norm(theta), ctx


def maf_log_prob(model: MafModel, theta, x, chunk: int = 200_000) -> np.ndarray:
    """log q(theta | x) for a batch (or a single vector, returning a length-1 array)."""
    th, ctx = prepare_inputs(model, theta, x)
    out = np.empty(th.shape[0])
    for s in range(0, th.shape[0], chunk):
        out[s:s + chunk] = maf_log_prob_ops(np_ops, model.params, model, th[s:s + chunk], ctx[s:s + chunk])
    return out - model.theta_norm.log_abs_det


def maf_forward_from_noise(model: MafModel, u, x):
    """Map base noise u to theta. Returns (theta, log|det d theta / d u|)."""
    u = _as_batch(u, model.theta_dim, "u")
    n = u.shape[0]
    if model.context_dim > 0:
        xb = _as_batch(x, model.context_dim, "x")
        if xb.shape[0] == 1:
            xb = np.repeat(xb, n, axis=0)
        ctx = model.context_norm(xb)
    else:
        ctx = np.zeros((n, 0))
    p = model.params
    z = u
    logdet = np.zeros(n)
    for layer in reversed(range(model.n_layers)):
        prev = np.zeros_like(z)
        order = model.order(layer)
        for i in order:
            mu, alpha = made_forward(np_ops, p, model, layer, prev, ctx)
            prev[:, i] = z[:, i] * np.exp(alpha[:, i]) + mu[:, i]
        logdet += alpha.sum(axis=1)
        z = prev
    theta = model.theta_norm.inverse(z)
    return theta, logdet + model.theta_norm.log_abs_det


def maf_sample(model: MafModel, x, count: int, rng) -> np.ndarray:
    """Draw ``count`` i.i.d. samples from q(. | x); x is a single observation."""
    if count < 1:
        raise ContractViolation("count must be >= 1")
    u = rng.standard_normal((count, model.theta_dim))
    theta, _ = maf_forward_from_noise(model, u, x)
    return theta


# ---------------------------------------------------------------------------
# residual classifier


@dataclass(frozen=True)
class ResidualClassifier:
    theta_dim: int
    x_dim: int
    params: dict
    hidden: int = 50
    n_blocks: int = 2
    theta_norm: Optional[Standardizer] = None
    x_norm: Optional[Standardizer] = None

    def __post_init__(self):
        if self.theta_norm is None:
            object.__setattr__(self, "theta_norm", Standardizer.identity(self.theta_dim))
        if self.x_norm is None:
            object.__setattr__(self, "x_norm", Standardizer.identity(self.x_dim))

    def with_params(self, params) -> "ResidualClassifier":
        return dataclasses.replace(self, params=params)

    def logit(self, theta, x) -> np.ndarray:
        return classifier_logit(self, theta, x)


def init_classifier(theta_dim: int, x_dim: int, rng, hidden: int = 50, n_blocks: int = 2,
                    zero_head: bool = True) -> ResidualClassifier:
    p = {
        "w_in": _glorot(rng, theta_dim + x_dim, hidden),
        "b_in": np.zeros(hidden),
    }
    for b in range(n_blocks):
        p[f"r{b}.w1"] = _glorot(rng, hidden, hidden)
        p[f"r{b}.b1"] = np.zeros(hidden)
        # residual branches start near zero so each block starts near identity
        p[f"r{b}.w2"] = rng.uniform(-1e-3, 1e-3, size=(hidden, hidden))
        p[f"r{b}.b2"] = np.zeros(hidden)
    p["w_out"] = np.zeros((hidden, 1)) if zero_head else _glorot(rng, hidden, 1)
    p["b_out"] = np.zeros(1)
    return ResidualClassifier(theta_dim, x_dim, p, hidden=hidden, n_blocks=n_blocks)


def classifier_logit_ops(ops, p, model: ResidualClassifier, inputs):
    h = ops.affine(inputs, p["w_in"], p["b_in"])
    for b in range(model.n_blocks):
        t = ops.affine(ops.relu(h), p[f"r{b}.w1"], p[f"r{b}.b1"])
        t = ops.affine(ops.relu(t), p[f"r{b}.w2"], p[f"r{b}.b2"])
        h = ops.add(h, t)
    return ops.sum(ops.affine(ops.relu(h), p["w_out"], p["b_out"]), axis=1)


def classifier_inputs(model: ResidualClassifier, theta, x) -> np.ndarray:
    theta = _as_batch(theta, model.theta_dim, "theta")
    x = _as_batch(x, model.x_dim, "x")
    if x.shape[0] == 1 and theta.shape[0] > 1:
        x = np.repeat(x, theta.shape[0], axis=0)
    elif theta.shape[0] == 1 and x.shape[0] > 1:
        theta = np.repeat(theta, x.shape[0], axis=0)
    if x.shape[0] != theta.shape[0]:
        raise ContractViolation(f"batch sizes differ: theta {theta.shape[0]}, x {x.shape[0]}")
    return np.concatenate([model.theta_norm(theta), model.x_norm(x)], axis=1)


def classifier_logit(model: ResidualClassifier, theta, x) -> np.ndarray:
    return classifier_logit_ops(np_ops, model.params, model, classifier_inputs(model, theta, x))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_size: int = 100
    learning_rate: float = 5e-4
    validation_fraction: float = 0.10
    patience_epochs: int = 20
    max_epochs: int = 1000

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ContractViolation("validation_fraction must lie in (0, 1)")
        if self.patience_epochs < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ContractViolation("batch_size, patience_epochs and max_epochs must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    initial_val_loss: float = math.inf
    best_epoch: int = 0  # 0 means the initial parameters were kept

    @property
    def epochs(self) -> int:
        return len(self.val_loss)


# loss_fn(ops, params, theta_batch, x_batch, rng) -> scalar (Node on a tape, float on np_ops)
LossFn = Callable


def _batches(idx, size):
    return [idx[s:s + size] for s in range(0, len(idx), size)]


def _mean_loss(loss_fn, params, theta, x, batches, rng):
    total, count = 0.0, 0
    for b in batches:
        if len(b) < 2:
            continue
        total += float(loss_fn(np_ops, params, theta[b], x[b], rng)) * len(b)
        count += len(b)
    return total / max(count, 1)


def train(model, theta, x, loss_fn: LossFn, cfg: TrainConfig, rng):
    """Fit ``model.params`` with Adam and validation-based early stopping.

    The data are split once into train and validation parts. Training stops
    once ``patience_epochs`` consecutive epochs fail to beat the best
    validation loss. The best parameters seen, including the initial ones,
    are returned together with a :class:`TrainHistory`.
    """
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n = theta.shape[0]
    if n < 10:
        raise ContractViolation(f"need at least 10 training pairs, got {n}")
    if x.shape[0] != n:
        raise ContractViolation("theta and x have different lengths")
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.validation_fraction * n)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    val_batches = _batches(val_idx, cfg.batch_size)
    val_seed = int(rng.integers(2**63))

    def validate(params):
        return _mean_loss(loss_fn, params, theta, x, val_batches, np.random.default_rng(val_seed))

    params = dict(model.params)
    hist = TrainHistory()
    best_params, best = params, validate(params)
    hist.initial_val_loss = best
    if not math.isfinite(best):
        raise NumericFailure("initial validation loss is not finite")
    state = AdamState(learning_rate=cfg.learning_rate)
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        running, seen = 0.0, 0
        for b in _batches(rng.permutation(train_idx), cfg.batch_size):
            if len(b) < 2:
                continue
            tape = Tape()
            leaves = {k: tape.param(v) for k, v in params.items()}
            out = loss_fn(tape, leaves, theta[b], x[b], rng)
            try:
                tape.backward(out)
            except NumericFailure as exc:
                raise NumericFailure(f"epoch {epoch}: {exc}") from exc
            params, state = adam_step(params, {k: tape.grad(v) for k, v in leaves.items()}, state)
            running += float(out.value) * len(b)
            seen += len(b)
        val = validate(params)
        if not math.isfinite(val):
            raise NumericFailure(f"epoch {epoch}: validation loss is not finite")
        hist.train_loss.append(running / max(seen, 1))
        hist.val_loss.append(val)
        if val < best:
            best, best_params, hist.best_epoch = val, params, epoch
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience_epochs:
                break
    log.debug("trained %d epochs, best epoch %d, val %.4f", hist.epochs, hist.best_epoch, best)
    return model.with_params(best_params), hist
