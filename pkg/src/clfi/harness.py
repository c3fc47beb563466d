"""Experiment orchestration: configuration, metrics, persistence.

An experiment runs R rounds of one algorithm on one task and leaves behind,
in its output directory::

    config.txt                 the resolved configuration
    metrics.csv                one row per round
    samples_round01.txt ...    posterior samples, one parameter vector per line
    checkpoint_round01.lfic    the fitted model after each round

Everything except the optional ``wall_seconds`` column is a pure function of
the configuration, so two runs with the same config and seed produce
byte-identical files.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .contrastive import ALGORITHMS, AlgoConfig, Critic, RoundState, posterior_samples, run_round
from .densnets import MafModel, ResidualClassifier, Standardizer, TrainConfig, maf_sample
from .diffcore import ContractViolation
from .sampling import KdeModel, kde_log_prob, support_fraction
from .simulators import TASKS, make_task

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is corrupt, truncated, or from an unknown format version."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    task: str = "conjugate"
    algorithm: str = "snpec"
    K: int = 100
    rounds: int = 2
    sims_per_round: int = 1000
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/out"
    posterior_sample_count: int = 1000
    task_seed: int = 0
    burn_in: int = 200
    thin: int = 10
    slice_width: float = 1.0
    acceptance_floor: float = 1e-5
    max_proposals: int = 10**7
    # fresh flow draws used to measure the in-support fraction each round (snpec only); 0 reuses
    # the acceptance rate of the rejection sampler itself
    acceptance_proposals: int = 100_000
    hidden: int = 50
    flow_layers: int = 5
    record_timing: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {sorted(TASKS)}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {list(ALGORITHMS)}")
        for name in ("rounds", "sims_per_round", "posterior_sample_count", "thin", "hidden", "flow_layers",
                     "max_proposals"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.burn_in < 0 or self.acceptance_proposals < 0:
            raise ConfigError("burn_in and acceptance_proposals must be >= 0")
        if not 2 <= self.K <= self.train.batch_size:
            raise ConfigError(f"need 2 <= K <= batch_size, got K={self.K}, batch_size={self.train.batch_size}")
        if self.posterior_sample_count < 2:
            raise ConfigError("posterior_sample_count must be >= 2 for the density metric")

    def algo_config(self) -> AlgoConfig:
        return AlgoConfig(
            algorithm=self.algorithm, K=self.K, sims_per_round=self.sims_per_round, train=self.train,
            burn_in=self.burn_in, thin=self.thin, slice_width=self.slice_width,
            acceptance_floor=self.acceptance_floor, max_proposals=self.max_proposals,
            hidden=self.hidden, flow_layers=self.flow_layers,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
        tr = {k: changes.pop(k) for k in list(changes) if k in train_keys}
        if tr:
            changes["train"] = dataclasses.replace(self.train, **tr)
        return dataclasses.replace(self, **changes)

    # flat key = value text form --------------------------------------------

    def to_text(self, skip=()) -> str:
        lines = []
        for key, value in _flat_items(self):
            if key not in skip:
                lines.append(f"{key} = {_format_value(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        parser.optionxform = str
        try:
            parser.read_string("[experiment]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
        if parser.sections() != ["experiment"]:
            raise ConfigError("config must be a flat list of key = value lines (no sections)")
        types = dict(_flat_types())
        values = {}
        for key, raw in parser.items("experiment"):
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}; allowed: {sorted(types)}")
            values[key] = _parse_value(key, raw, types[key])
        for key, val in overrides.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = val
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
        tr = {k: values.pop(k) for k in list(values) if k in train_keys}
        try:
            return cls(train=TrainConfig(**tr), **values)
        except ContractViolation as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text, **overrides)


def _flat_types():
    for f in dataclasses.fields(ExperimentConfig):
        if f.name == "train":
            for g in dataclasses.fields(TrainConfig):
                yield g.name, g.type
        else:
            yield f.name, f.type


def _flat_items(cfg):
    for f in dataclasses.fields(ExperimentConfig):
        if f.name == "train":
            for g in dataclasses.fields(TrainConfig):
                yield g.name, getattr(cfg.train, g.name)
        else:
            yield f.name, getattr(cfg, f.name)


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key, raw, typ):
    raw = raw.strip()
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {typ})") from None


# ---------------------------------------------------------------------------
# metrics


METRIC_COLUMNS = ("round", "cumulative_sims", "neg_log_prob_true", "median_distance", "acceptance_rate",
                  "train_epochs", "wall_seconds")


@dataclass
class RoundMetrics:
    round: int
    cumulative_sims: int
    neg_log_prob_true: float
    median_distance: float
    acceptance_rate: Optional[float]
    train_epochs: int
    wall_seconds: Optional[float] = None

    def csv_row(self) -> str:
        vals = [str(self.round), str(self.cumulative_sims), repr(float(self.neg_log_prob_true)),
                repr(float(self.median_distance)),
                "" if self.acceptance_rate is None else repr(float(self.acceptance_rate)),
                str(self.train_epochs),
                "" if self.wall_seconds is None else f"{self.wall_seconds:.3f}"]
        return ",".join(vals)


def metric_neg_log_prob_true(posterior_samples, theta_star) -> float:
    """-log KDE density of the posterior samples at the true parameters."""
    return -kde_log_prob(KdeModel.fit(posterior_samples), np.asarray(theta_star, dtype=np.float64))


def metric_median_distance(observations, x0) -> float:
    obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    x0 = np.asarray(x0, dtype=np.float64)
    if obs.shape[0] < 1 or obs.shape[1] != x0.size:
        raise ContractViolation(f"observations of shape {obs.shape} do not match x0 of size {x0.size}")
    return float(np.median(np.linalg.norm(obs - x0, axis=1)))


def read_metrics(path) -> list[dict]:
    rows = Path(path).read_text().strip().splitlines()
    head = rows[0].split(",")
    out = []
    for line in rows[1:]:
        rec = {}
        for k, v in zip(head, line.split(",")):
            rec[k] = None if v == "" else (int(v) if k in ("round", "cumulative_sims", "train_epochs") else float(v))
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"LFIC"
FORMAT_VERSION = 1
_KIND_CODES = {"maf": 0, "classifier": 1, "snpec": 2, "sre": 3}


def _model_sections(model):
    if isinstance(model, Critic):
        kind = model.kind
        net = model.model
    elif isinstance(model, MafModel):
        kind, net = "maf", model
    elif isinstance(model, ResidualClassifier):
        kind, net = "classifier", model
    else:
        raise ContractViolation(f"cannot checkpoint a {type(model).__name__}")
    secs = [("kind", np.array([_KIND_CODES[kind]], dtype=np.float64))]
    if isinstance(net, MafModel):
        secs.append(("arch", np.array([net.theta_dim, net.context_dim, net.n_layers, net.hidden, net.clamp],
                                      dtype=np.float64)))
        norms = (("norm.a", net.theta_norm), ("norm.b", net.context_norm))
    else:
        secs.append(("arch", np.array([net.theta_dim, net.x_dim, net.hidden, net.n_blocks], dtype=np.float64)))
        norms = (("norm.a", net.theta_norm), ("norm.b", net.x_norm))
    for name, nrm in norms:
        secs.append((name + ".shift", np.asarray(nrm.shift, dtype=np.float64)))
        secs.append((name + ".scale", np.asarray(nrm.scale, dtype=np.float64)))
    for k, v in net.params.items():
        secs.append(("param." + k, np.asarray(v, dtype=np.float64)))
    return secs


def checkpoint_bytes(model) -> bytes:
    buf = io.BytesIO()
    secs = _model_sections(model)
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(secs)))
    for name, arr in secs:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def checkpoint_save(model, path) -> None:
    """Write ``model`` (a Critic, MafModel or ResidualClassifier) to ``path``."""
    data = checkpoint_bytes(model)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint: needed {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_parse(data: bytes) -> dict:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic: not an LFIC checkpoint")
    version, count = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    secs = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("section name is not valid utf-8") from None
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape)) if ndim else 1
        secs[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - r.pos} trailing bytes after the last section")
    return secs


def checkpoint_load(path, prior=None):
    """Inverse of :func:`checkpoint_save`. An snpec critic needs its ``prior`` back."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read {path}: {exc.strerror}") from None
    secs = checkpoint_parse(data)
    try:
        code = int(secs["kind"][0])
        arch = secs["arch"]
        kind = {v: k for k, v in _KIND_CODES.items()}[code]
        norm_a = Standardizer(secs["norm.a.shift"], secs["norm.a.scale"])
        norm_b = Standardizer(secs["norm.b.shift"], secs["norm.b.scale"])
    except KeyError as exc:
        raise CheckpointFormatError(f"missing or invalid section {exc}") from None
    params = {k[len("param."):]: v for k, v in secs.items() if k.startswith("param.")}
    if kind in ("maf", "snpec"):
        net = MafModel(int(arch[0]), int(arch[1]), params, n_layers=int(arch[2]), hidden=int(arch[3]),
                       clamp=float(arch[4]), theta_norm=norm_a, context_norm=norm_b)
    else:
        net = ResidualClassifier(int(arch[0]), int(arch[1]), params, hidden=int(arch[2]), n_blocks=int(arch[3]),
                                 theta_norm=norm_a, x_norm=norm_b)
    if kind == "snpec":
        if prior is None:
            raise ContractViolation("loading an snpec critic requires the task prior")
        return Critic("snpec", net, prior)
    if kind == "sre":
        return Critic("sre", net)
    return net


# ---------------------------------------------------------------------------
# experiments


def _write_samples(path, samples):
    with open(path, "w") as fh:
        for row in np.atleast_2d(samples):
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_samples(path) -> np.ndarray:
    return np.loadtxt(path, ndmin=2)


def run_experiment(cfg: ExperimentConfig, state_hook=None) -> list[RoundMetrics]:
    """Run all rounds, writing metrics, samples and checkpoints under ``cfg.output_dir``."""
    task = make_task(cfg.task, cfg.task_seed)
    state = RoundState.initial(task, cfg.algo_config(), cfg.seed)
    metric_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    # the location is not part of the experiment, so it stays out of the artefacts
    (out / "config.txt").write_text(cfg.to_text(skip=("output_dir",)))
    metrics_path = out / "metrics.csv"
    results = []
    with open(metrics_path, "w") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for r in range(1, cfg.rounds + 1):
            t0 = time.perf_counter()
            n_events = len(state.events)
            run_round(state)
            samples, rate = posterior_samples(state, cfg.posterior_sample_count)
            acceptance = None
            if cfg.algorithm == "snpec":
                acceptance = rate
                if cfg.acceptance_proposals > 0:
                    flow = state.model.model
                    acceptance = support_fraction(lambda c, g: maf_sample(flow, task.x0, c, g), task.prior,
                                                  cfg.acceptance_proposals, metric_rng)
            rec = state.records[-1]
            m = RoundMetrics(
                round=r,
                cumulative_sims=state.dataset_size,
                neg_log_prob_true=metric_neg_log_prob_true(samples, task.theta_star),
                median_distance=metric_median_distance(rec.x, task.x0),
                acceptance_rate=acceptance,
                train_epochs=rec.history.epochs,
                wall_seconds=time.perf_counter() - t0 if cfg.record_timing else None,
            )
            _write_samples(out / f"samples_round{r:02d}.txt", samples)
            checkpoint_save(state.model, out / f"checkpoint_round{r:02d}.lfic")
            fh.write(m.csv_row() + "\n")
            fh.flush()
            for ev in state.events[n_events:]:
                log.warning("%s", ev)
            log.info("round %d: -log p(theta*) %.3f, median distance %.3f, epochs %d", r,
                     m.neg_log_prob_true, m.median_distance, m.train_epochs)
            results.append(m)
            if state_hook is not None:
                state_hook(state)
    return results
