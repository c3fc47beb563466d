"""Acceptance suites.

Each criterion is a function returning a :class:`CriterionResult`. Suites:

* ``oracle``: 1, 2, 3, 4, 10 (analytic checks, a few minutes)
* ``fast``: oracle plus 5, 6, 8 (small training runs on the conjugate and box tasks)
* ``full``: everything, including the multi-seed trend runs 7 and 9 (hours on one core)
"""
from __future__ import annotations

import dataclasses
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate, stats

from .contrastive import (
    AlgoConfig,
    Critic,
    RoundState,
    contrastive_loss_fn,
    contrastive_loss_ops,
    logit_table_loss,
    make_snpec_critic,
    minibatch_loss,
    run_round,
    run_rounds,
)
from .densnets import (
    TrainConfig,
    init_classifier,
    init_maf,
    made_forward,
    maf_log_prob,
    maf_sample,
    train,
)
from .diffcore import Tape, grad_rel_error, np_ops, numeric_grad, value_and_grad
from .harness import (
    CheckpointFormatError,
    ExperimentConfig,
    checkpoint_load,
    checkpoint_save,
    read_metrics,
    run_experiment,
)
from .sampling import SliceChain, slice_sample
from .simulators import GaussianPrior, conjugate_posterior, conjugate_posterior_log_prob, make_task


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.number:2d} {self.title}: {self.detail} ({self.seconds:.0f}s)"


def _timed(number, title):
    def wrap(fn):
        def run(**kw) -> CriterionResult:
            t0 = time.perf_counter()
            passed, detail = fn(**kw)
            return CriterionResult(number, title, bool(passed), detail, time.perf_counter() - t0)
        run.number = number
        run.title = title
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return wrap


# ---------------------------------------------------------------------------
# 1. gradients


def _primitive_cases(rng):
    a = rng.standard_normal((4, 3))
    w = rng.standard_normal((3, 5))
    b = rng.standard_normal(5)
    c = rng.standard_normal((4, 3))
    mask = (rng.random((3, 5)) > 0.4).astype(float)
    return {
        "affine": ({"a": a, "w": w, "b": b}, lambda o, p: o.affine(p["a"], p["w"], p["b"])),
        "masked_affine": ({"a": a, "w": w, "b": b}, lambda o, p: o.masked_affine(p["a"], p["w"], mask, p["b"])),
        "tanh": ({"a": a}, lambda o, p: o.tanh(p["a"])),
        "relu": ({"a": a + 0.1 * np.sign(a)}, lambda o, p: o.relu(p["a"])),
        "exp": ({"a": a}, lambda o, p: o.exp(p["a"])),
        "log": ({"a": np.abs(a) + 0.5}, lambda o, p: o.log(p["a"])),
        "sum": ({"a": a}, lambda o, p: o.sum(p["a"], axis=1)),
        "logsumexp": ({"a": a}, lambda o, p: o.logsumexp(p["a"], axis=1)),
        "concat": ({"a": a, "c": c[:, :2]}, lambda o, p: o.concat([p["a"], p["c"]], axis=1)),
        "add": ({"a": a, "c": c}, lambda o, p: o.add(p["a"], p["c"])),
        "mul": ({"a": a, "c": c}, lambda o, p: o.mul(p["a"], p["c"])),
        "reshape": ({"a": a}, lambda o, p: o.reshape(p["a"], (2, 6))),
    }


def _small_critics(seed):
    rng = np.random.default_rng(seed)
    m = init_classifier(2, 2, rng, hidden=16, zero_head=False)
    sre = Critic("sre", m.with_params({k: v + 0.3 * rng.standard_normal(v.shape) for k, v in m.params.items()}))
    snpec = Critic("snpec", init_maf(2, 2, rng, n_layers=2, hidden=10, head_scale=0.3),
                   GaussianPrior(np.zeros(2), np.ones(2)))
    return sre, snpec


@_timed(1, "gradient correctness")
def criterion_gradients():
    worst_prim = 0.0
    for point in range(10):
        rng = np.random.default_rng(point)
        for name, (params, fn) in _primitive_cases(rng).items():
            out = fn(np_ops, params)
            w = rng.standard_normal(np.shape(out))

            def f(o, p, fn=fn, w=w):
                return o.sum(o.mul(fn(o, p), w))

            _, g = value_and_grad(f, params)
            err = grad_rel_error(g, numeric_grad(lambda p, f=f: float(f(np_ops, p)), params))
            worst_prim = max(worst_prim, err)
    worst_loss = 0.0
    for point in range(10):
        rng = np.random.default_rng(100 + point)
        th = rng.standard_normal((4, 2))
        x = th + rng.standard_normal((4, 2))
        for crit in _small_critics(point):
            def f(o, p, crit=crit):
                return contrastive_loss_ops(o, p, crit, th, x, 4, np.random.default_rng(0))

            _, g = value_and_grad(f, crit.params)
            err = grad_rel_error(g, numeric_grad(lambda p, f=f: float(f(np_ops, p)), crit.params))
            worst_loss = max(worst_loss, err)
    ok = worst_prim < 1e-5 and worst_loss < 1e-4
    return ok, f"max rel. error primitives {worst_prim:.2e} (< 1e-5), losses {worst_loss:.2e} (< 1e-4)"


# ---------------------------------------------------------------------------
# 2. flows


def _jacobian_violations(model, points=10):
    bad = 0
    for point in range(points):
        rng = np.random.default_rng(point)
        z0 = rng.standard_normal((1, model.theta_dim))
        c = rng.standard_normal((1, model.context_dim))
        for layer in range(model.n_layers):
            deg = np.empty(model.theta_dim)
            deg[model.order(layer)] = np.arange(1, model.theta_dim + 1)
            for head in (0, 1):
                for i in range(model.theta_dim):
                    t = Tape()
                    z = t.param(z0)
                    out = made_forward(t, model.params, model, layer, z, c)[head]
                    sel = np.zeros((1, model.theta_dim))
                    sel[0, i] = 1.0
                    t.backward(t.sum(t.mul(out, sel)))
                    bad += int(np.count_nonzero(t.grad(z)[0][deg >= deg[i]]))
    return bad


def _quadrature_mass_2d(model, x, seed):
    s = maf_sample(model, x, 20000, np.random.default_rng(seed))
    ga, gb = (np.linspace(c - 10 * w, c + 10 * w, 401) for c, w in zip(s.mean(axis=0), s.std(axis=0)))
    aa, bb = np.meshgrid(ga, gb, indexing="ij")
    dens = np.exp(maf_log_prob(model, np.stack([aa.ravel(), bb.ravel()], axis=1), x)).reshape(aa.shape)
    return integrate.trapezoid(integrate.trapezoid(dens, gb, axis=1), ga)


@_timed(2, "flow validity")
def criterion_flows():
    zeros = sum(_jacobian_violations(init_maf(d, c, np.random.default_rng(d), head_scale=0.5, n_layers=2))
                for d, c in ((2, 0), (3, 2), (5, 8)))
    grid = np.arange(-10, 10 + 1e-9, 0.01)
    masses = []
    for seed in range(3):
        m = init_maf(1, 2, np.random.default_rng(seed), head_scale=0.3)
        xc = np.random.default_rng(seed).standard_normal(2)
        masses.append(integrate.trapezoid(np.exp(maf_log_prob(m, grid[:, None], xc)), grid))
    for seed in range(2):
        masses.append(_quadrature_mass_2d(init_maf(2, 1, np.random.default_rng(seed), head_scale=0.3),
                                          np.array([0.7]), seed))
    ks = []
    for seed in range(2):
        m = init_maf(1, 1, np.random.default_rng(10 + seed), head_scale=0.4)
        x = np.array([0.5])
        g = np.arange(-12, 12, 0.001)
        cdf = integrate.cumulative_trapezoid(np.exp(maf_log_prob(m, g[:, None], x)), g, initial=0.0)
        cdf /= cdf[-1]
        s = maf_sample(m, x, 10000, np.random.default_rng(seed))[:, 0]
        ks.append(stats.kstest(s, lambda v: np.interp(v, g, cdf)).statistic)
    worst_mass = max(abs(v - 1) for v in masses)
    ok = zeros == 0 and worst_mass < 0.01 and max(ks) < 0.02
    return ok, f"nonzero masked Jacobian entries {zeros}; max |mass - 1| {worst_mass:.4f}; max KS {max(ks):.4f}"


# ---------------------------------------------------------------------------
# 3. loss identities


@_timed(3, "loss identities")
def criterion_losses():
    rng = np.random.default_rng(0)
    th = rng.standard_normal((100, 2))
    x = th + rng.standard_normal((100, 2))
    const = Critic("sre", init_classifier(2, 2, rng))
    const_err = max(abs(minibatch_loss(const, th, x, K, np.random.default_rng(K)) - math.log(K)) for K in (2, 50, 100))
    bound_ok = True
    shift_err = 0.0
    for seed in range(20):
        sre, snpec = _small_critics(seed)
        r = np.random.default_rng(seed)
        B = int(r.integers(2, 20))
        K = int(r.integers(2, B + 1))
        tb, xb = th[:B], x[:B]
        for crit in (sre, snpec):
            bound_ok &= -minibatch_loss(crit, tb, xb, K, np.random.default_rng(seed)) <= math.log(K) + 1e-9
        shifted = _Shifted(sre, lambda xx: 3.0 * np.cos(2 * xx[:, 0]) - xx[:, 1])
        a = minibatch_loss(sre, tb, xb, K, np.random.default_rng(seed))
        b = float(contrastive_loss_ops(np_ops, sre.params, shifted, tb, xb, K, np.random.default_rng(seed)))
        shift_err = max(shift_err, abs(a - b))
    table = rng.normal(0, 3, (200, 2))
    bce = np.mean(np.log1p(np.exp(table[:, 1] - table[:, 0])))
    k2_err = abs(float(logit_table_loss(np_ops, table)) - bce)
    ok = const_err < 1e-9 and bound_ok and shift_err < 1e-10 and k2_err < 1e-12
    return ok, (f"|loss - ln K| {const_err:.1e}; bound {'holds' if bound_ok else 'VIOLATED'}; "
                f"shift {shift_err:.1e}; K=2 vs binary {k2_err:.1e}")


@dataclass(frozen=True)
class _Shifted:
    base: Critic
    shift: Callable

    @property
    def params(self):
        return self.base.params

    def logits_ops(self, ops, params, theta, x):
        return ops.add(self.base.logits_ops(ops, params, theta, x), self.shift(np.atleast_2d(x)))


# ---------------------------------------------------------------------------
# 4. slice sampler


@_timed(4, "sampler correctness")
def criterion_sampler():
    s1 = slice_sample(SliceChain(np.zeros(1), lambda t: -0.5 * float(t @ t), np.random.default_rng(0)), 20000,
                      burn_in=200, thin=10)
    var2 = np.array([1.0, 100.0])
    s2 = slice_sample(SliceChain(np.zeros(2), lambda t: -0.5 * float(np.sum(t * t / var2)), np.random.default_rng(1)),
                      20000, burn_in=200, thin=10)
    m1, v1 = float(s1.mean()), float(s1.var())
    v2 = s2.var(axis=0) / var2
    ok = abs(m1) < 0.05 and abs(v1 - 1) < 0.05 and np.all(np.abs(s2.mean(axis=0) / np.sqrt(var2)) < 0.05) \
        and np.all(np.abs(v2 - 1) < 0.10)
    return ok, f"N(0,1): mean {m1:+.3f}, var {v1:.3f}; diag(1,100): var ratios {v2[0]:.3f}, {v2[1]:.3f}"


# ---------------------------------------------------------------------------
# 5. conjugate oracle recovery


def _grid_log_ratio_std(log_ratio, x0):
    mean, var = conjugate_posterior(x0)
    g = np.linspace(-3, 3, 10) * math.sqrt(var[0])
    grid = np.array([[mean[0] + a, mean[1] + b] for a in g for b in g])
    analytic = conjugate_posterior_log_prob(grid, x0) - GaussianPrior(np.zeros(2), np.ones(2)).log_prob(grid)
    return float(np.std(log_ratio(grid) - analytic))


def snpec_conjugate_moments(seed, rounds=2, sims=1000, K=100):
    task = make_task("conjugate")
    state = run_rounds(task, AlgoConfig("snpec", K=K, sims_per_round=sims), rounds, seed)
    s = maf_sample(state.model.model, task.x0, 20000, np.random.default_rng(seed + 1000))
    return s.mean(axis=0), s.std(axis=0)


SRE_CHECK = dict(rounds=2, sims=1000)


def sre_conjugate_grid_std(seed, rounds=SRE_CHECK["rounds"], sims=SRE_CHECK["sims"]):
    task = make_task("conjugate")
    state = run_rounds(task, AlgoConfig("sre", K=100, sims_per_round=sims), rounds, seed)
    return _grid_log_ratio_std(lambda g: state.model.logit(g, task.x0), task.x0)


def snl_conjugate_mean(seed, rounds=2, sims=1000):
    task = make_task("conjugate")
    state = run_rounds(task, AlgoConfig("snl", sims_per_round=sims), rounds, seed)
    g = np.linspace(-4, 4, 161)
    aa, bb = np.meshgrid(g, g, indexing="ij")
    grid = np.stack([aa.ravel(), bb.ravel()], axis=1)
    logp = maf_log_prob(state.model, task.x0, grid) + task.prior.log_prob(grid)
    w = np.exp(logp - logp.max())
    return (w[:, None] * grid).sum(axis=0) / w.sum()


@_timed(5, "conjugate posterior recovery")
def criterion_conjugate(seeds=5):
    task = make_task("conjugate")
    target = conjugate_posterior(task.x0)[0]
    sd = math.sqrt(0.5)
    good = 0
    for seed in range(seeds):
        mean, std = snpec_conjugate_moments(seed)
        good += bool(np.all(np.abs(mean - target) < 0.1) and np.all(np.abs(std / sd - 1) < 0.2))
    sre_std = sre_conjugate_grid_std(0)
    snl_err = float(np.max(np.abs(snl_conjugate_mean(0) - target)))
    ok = good >= math.ceil(0.8 * seeds) and sre_std < 0.2 and snl_err < 0.1
    return ok, (f"SNPE-C {good}/{seeds} seeds in tolerance; SRE grid std {sre_std:.3f} (< 0.2); "
                f"SNL mean error {snl_err:.3f} (< 0.1)")


# ---------------------------------------------------------------------------
# 6. proposal invariance


def snpec_narrow_proposal_mean(seed, sims=1000, scale=0.1):
    task = make_task("conjugate")
    centre = conjugate_posterior(task.x0)[0]
    state = RoundState.initial(task, AlgoConfig("snpec", K=100, sims_per_round=sims), seed)
    state.proposal = lambda n, rng: centre + math.sqrt(scale) * rng.standard_normal((n, 2))
    run_round(state)
    s = maf_sample(state.model.model, task.x0, 20000, np.random.default_rng(seed + 1000))
    return s.mean(axis=0)


@_timed(6, "proposal invariance")
def criterion_proposal_invariance(seeds=5):
    task = make_task("conjugate")
    target = conjugate_posterior(task.x0)[0]
    errs = [float(np.max(np.abs(snpec_narrow_proposal_mean(seed) - target))) for seed in range(seeds)]
    good = sum(e < 0.1 for e in errs)
    return good >= math.ceil(0.8 * seeds), f"{good}/{seeds} seeds within 0.1 (errors {', '.join(f'{e:.3f}' for e in errs)})"


# ---------------------------------------------------------------------------
# 7. trend on the nonlinear Gaussian task


def trend_runs(algorithm, seeds, rounds=5, sims=1000, root=None, task="nonlinear-gaussian"):
    """First and last metrics rows for each seed."""
    out = []
    with tempfile.TemporaryDirectory() as tmp:
        base = Path(root) if root else Path(tmp)
        for seed in seeds:
            cfg = ExperimentConfig(task=task, algorithm=algorithm, K=100, rounds=rounds, sims_per_round=sims,
                                   seed=seed, output_dir=str(base / f"{algorithm}_seed{seed}"),
                                   acceptance_proposals=0)
            rows = [dataclasses.asdict(m) for m in run_experiment(cfg)]
            out.append((rows[0], rows[-1]))
    return out


@_timed(7, "nonlinear Gaussian trend")
def criterion_trend(seeds=10, rounds=5, root=None):
    parts, ok = [], True
    need = math.ceil(0.8 * seeds)
    for algo in ("sre", "snpec"):
        runs = trend_runs(algo, range(seeds), rounds=rounds, root=root)
        nlp = sum(last["neg_log_prob_true"] < first["neg_log_prob_true"] for first, last in runs)
        md = sum(last["median_distance"] <= first["median_distance"] for first, last in runs)
        ok &= nlp >= need and md >= need
        parts.append(f"{algo}: -log p(theta*) improved {nlp}/{seeds}, median distance {md}/{seeds}")
    return ok, "; ".join(parts)


# ---------------------------------------------------------------------------
# 8. acceptance-rate instrumentation


@_timed(8, "acceptance-rate instrumentation")
def criterion_acceptance(proposals=100_000):
    rates = {}
    with tempfile.TemporaryDirectory() as tmp:
        for task, rounds in (("nonlinear-gaussian", 2), ("mg1", 2), ("conjugate", 1)):
            cfg = ExperimentConfig(task=task, algorithm="snpec", rounds=rounds, sims_per_round=1000, seed=0,
                                   output_dir=str(Path(tmp) / task), acceptance_proposals=proposals)
            run_experiment(cfg)
            rates[task] = [row["acceptance_rate"] for row in read_metrics(Path(cfg.output_dir) / "metrics.csv")]
    box_ok = all(r is not None and 0.0 <= r <= 1.0 for t in ("nonlinear-gaussian", "mg1") for r in rates[t])
    ok = box_ok and all(r == 1.0 for r in rates["conjugate"])
    fmt = "; ".join(f"{t}: {', '.join('none' if r is None else f'{r:.4f}' for r in v)}" for t, v in rates.items())
    return ok, f"rates per round from {proposals} proposals: {fmt}"


# ---------------------------------------------------------------------------
# 9. effect of K


def conjugate_final_nlp(K, seed, rounds=2, sims=1000):
    with tempfile.TemporaryDirectory() as tmp:
        cfg = ExperimentConfig(task="conjugate", algorithm="snpec", K=K, rounds=rounds, sims_per_round=sims,
                               seed=seed, output_dir=tmp, acceptance_proposals=0)
        return run_experiment(cfg)[-1].neg_log_prob_true


@_timed(9, "K-effect sanity")
def criterion_k_effect(seeds=10):
    big = float(np.mean([conjugate_final_nlp(100, s) for s in range(seeds)]))
    small = float(np.mean([conjugate_final_nlp(2, s) for s in range(seeds)]))
    return big <= small + 0.1, f"mean round-2 -log p(theta*): K=100 {big:.3f}, K=2 {small:.3f} (need K=100 <= K=2 + 0.1)"


# ---------------------------------------------------------------------------
# 10. reproducibility


def _tree_bytes(root: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.is_file()}


@_timed(10, "reproducibility")
def criterion_reproducibility():
    problems = []
    with tempfile.TemporaryDirectory() as tmp:
        for algo in ("snpec", "sre"):
            trees = []
            for rep in range(2):
                cfg = ExperimentConfig(task="conjugate", algorithm=algo, K=20, rounds=2, sims_per_round=200,
                                       seed=7, output_dir=str(Path(tmp) / f"{algo}{rep}"), burn_in=20, thin=2,
                                       posterior_sample_count=200, acceptance_proposals=1000,
                                       train=TrainConfig(batch_size=50, max_epochs=5))
                run_experiment(cfg)
                trees.append(_tree_bytes(Path(cfg.output_dir)))
            if trees[0] != trees[1]:
                problems.append(f"{algo} artefacts differ")
        task = make_task("conjugate")
        ck = Path(tmp) / "snpec0" / "checkpoint_round02.lfic"
        model = checkpoint_load(ck, prior=task.prior)
        checkpoint_save(model, Path(tmp) / "again.lfic")
        if (Path(tmp) / "again.lfic").read_bytes() != ck.read_bytes():
            problems.append("checkpoint re-save differs")
        pts = np.random.default_rng(0).standard_normal((100, 2))
        reloaded = checkpoint_load(Path(tmp) / "again.lfic", prior=task.prior)
        if not np.array_equal(model.logit(pts, task.x0), reloaded.logit(pts, task.x0)):
            problems.append("reloaded model evaluates differently")
        data = ck.read_bytes()
        for name, bad in (("magic", b"XXXX" + data[4:]), ("truncation", data[:-5])):
            (Path(tmp) / "bad.lfic").write_bytes(bad)
            try:
                checkpoint_load(Path(tmp) / "bad.lfic", prior=task.prior)
                problems.append(f"corrupt {name} not detected")
            except CheckpointFormatError:
                pass
    return not problems, "; ".join(problems) if problems else "artefacts byte-identical; checkpoints bit-exact"


# ---------------------------------------------------------------------------

CRITERIA = {
    1: criterion_gradients,
    2: criterion_flows,
    3: criterion_losses,
    4: criterion_sampler,
    5: criterion_conjugate,
    6: criterion_proposal_invariance,
    7: criterion_trend,
    8: criterion_acceptance,
    9: criterion_k_effect,
    10: criterion_reproducibility,
}

SUITES = {
    "oracle": (1, 2, 3, 4, 10),
    "fast": (1, 2, 3, 4, 5, 6, 8, 10),
    "full": tuple(range(1, 11)),
}


def run_suite(name: str, report=print) -> list[CriterionResult]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    results = []
    for number in SUITES[name]:
        res = CRITERIA[number]()
        report(res.line())
        results.append(res)
    return results
