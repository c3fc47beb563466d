import math
import struct

import numpy as np
import pytest

from clfi.cli import main, parse_seeds
from clfi.contrastive import Critic
from clfi.densnets import init_classifier, init_maf, maf_log_prob
from clfi.diffcore import ContractViolation
from clfi.harness import (
    METRIC_COLUMNS,
    CheckpointFormatError,
    ConfigError,
    ExperimentConfig,
    checkpoint_load,
    checkpoint_save,
    metric_median_distance,
    metric_neg_log_prob_true,
    read_metrics,
    read_samples,
    run_experiment,
)
from clfi.simulators import GaussianPrior

CHI8_MEDIAN = 2.7100039663627418  # median of the chi distribution with 8 dof, by quadrature

SMALL = """
# tiny run for tests
task = conjugate
algorithm = snpec
K = 20
rounds = 2
sims_per_round = 200
batch_size = 50
max_epochs = 4
posterior_sample_count = 200
acceptance_proposals = 2000
burn_in = 20
thin = 2
"""


# --- config


def test_config_text_round_trip():
    cfg = ExperimentConfig.from_text(SMALL)
    assert cfg.K == 20 and cfg.train.batch_size == 50 and cfg.train.max_epochs == 4
    again = ExperimentConfig.from_text(cfg.to_text())
    assert again == cfg


def test_config_defaults_match_protocol():
    cfg = ExperimentConfig()
    assert (cfg.train.batch_size, cfg.train.learning_rate, cfg.train.validation_fraction,
            cfg.train.patience_epochs) == (100, 5e-4, 0.10, 20)
    assert cfg.posterior_sample_count == 1000 and cfg.burn_in == 200 and cfg.thin == 10


@pytest.mark.parametrize("text,match", [
    ("task = conjugate\nfoo = 1\n", "unknown config key"),
    ("K = two\n", "bad value"),
    ("K = 1\n", "K"),
    ("K = 200\n", "K"),
    ("algorithm = snpe-a\n", "unknown algorithm"),
    ("task = sir\n", "unknown task"),
    ("rounds = 0\n", "rounds"),
    ("validation_fraction = 1.5\n", "validation_fraction"),
    ("[section]\nK = 3\n", "flat"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_text(text)


def test_config_scientific_ints():
    assert ExperimentConfig.from_text("max_proposals = 1e7\n").max_proposals == 10**7


# --- metrics


def test_neg_log_prob_ordering_and_permutation():
    rng = np.random.default_rng(0)
    star = np.array([1.0, -1.0])
    near = star + 0.01 * rng.standard_normal((500, 2))
    far = star + 5.0 + 0.01 * rng.standard_normal((500, 2))
    assert metric_neg_log_prob_true(near, star) < metric_neg_log_prob_true(far, star)
    perm = near[rng.permutation(500)]
    assert metric_neg_log_prob_true(perm, star) == pytest.approx(metric_neg_log_prob_true(near, star), abs=1e-12)


def test_neg_log_prob_conjugate_reference():
    mean = np.array([0.4, -0.3])
    s = mean + math.sqrt(0.5) * np.random.default_rng(1).standard_normal((100_000, 2))
    # -log N(mean; mean, I/2) = log(2 pi 0.5) = log(pi)
    assert abs(metric_neg_log_prob_true(s, mean) - math.log(math.pi)) < 0.05


def test_neg_log_prob_degenerate():
    with pytest.raises(ContractViolation):
        metric_neg_log_prob_true(np.ones((10, 2)), np.zeros(2))


def test_median_distance_examples():
    x0 = np.arange(8.0)
    assert metric_median_distance(np.tile(x0, (5, 1)), x0) == 0.0
    one = x0 + np.r_[3.0, 4.0, np.zeros(6)]
    assert metric_median_distance(one[None], x0) == pytest.approx(5.0, abs=1e-12)
    obs = np.random.default_rng(2).standard_normal((10_000, 8))
    assert abs(metric_median_distance(obs, np.zeros(8)) / CHI8_MEDIAN - 1) < 0.01
    with pytest.raises(ContractViolation):
        metric_median_distance(np.zeros((3, 7)), x0)


# --- checkpoints


def _models():
    rng = np.random.default_rng(0)
    maf = init_maf(3, 2, rng, head_scale=0.3)
    clf = init_classifier(2, 4, rng, zero_head=False)
    prior = GaussianPrior(np.zeros(3), np.ones(3))
    return {"maf": maf, "classifier": clf, "snpec": Critic("snpec", maf, prior), "sre": Critic("sre", clf)}, prior


@pytest.mark.parametrize("name", ["maf", "classifier", "snpec", "sre"])
def test_checkpoint_round_trip_is_bit_exact(name, tmp_path):
    models, prior = _models()
    m = models[name]
    path = tmp_path / "m.lfic"
    checkpoint_save(m, path)
    back = checkpoint_load(path, prior=prior)
    assert type(back) is type(m)
    for k, v in m.params.items():
        assert back.params[k].dtype == np.float64 and np.array_equal(back.params[k], v)


def test_checkpoint_log_prob_identical(tmp_path):
    models, _ = _models()
    maf = models["maf"]
    checkpoint_save(maf, tmp_path / "m.lfic")
    back = checkpoint_load(tmp_path / "m.lfic")
    rng = np.random.default_rng(3)
    th, x = rng.standard_normal((100, 3)), rng.standard_normal((100, 2))
    assert np.array_equal(maf_log_prob(maf, th, x), maf_log_prob(back, th, x))


def test_checkpoint_corruption_detected(tmp_path):
    models, _ = _models()
    path = tmp_path / "m.lfic"
    checkpoint_save(models["maf"], path)
    data = path.read_bytes()
    cases = {
        "magic": b"LFIX" + data[4:],
        "version": data[:4] + struct.pack("<I", 99) + data[8:],
        "truncated": data[: len(data) // 2],
        "trailing": data + b"\x00",
        "empty": b"",
    }
    for name, bad in cases.items():
        (tmp_path / f"{name}.lfic").write_bytes(bad)
        with pytest.raises(CheckpointFormatError):
            checkpoint_load(tmp_path / f"{name}.lfic")
    with pytest.raises(CheckpointFormatError):
        checkpoint_load(tmp_path / "missing.lfic")


def test_snpec_checkpoint_needs_prior(tmp_path):
    models, _ = _models()
    checkpoint_save(models["snpec"], tmp_path / "c.lfic")
    with pytest.raises(ContractViolation):
        checkpoint_load(tmp_path / "c.lfic")


# --- experiments


def _small(tmp_path, name="run", **kw):
    return ExperimentConfig.from_text(SMALL, output_dir=str(tmp_path / name), **kw)


def test_single_round_writes_one_row(tmp_path):
    cfg = _small(tmp_path, rounds=1)
    rows = run_experiment(cfg)
    lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert len(lines) == 2 and len(rows) == 1
    rec = read_metrics(tmp_path / "run" / "metrics.csv")[0]
    assert rec["round"] == 1 and rec["cumulative_sims"] == 200
    # the conjugate prior has unbounded support, so nothing is ever rejected
    assert rec["acceptance_rate"] == 1.0
    assert rec["wall_seconds"] is None
    assert read_samples(tmp_path / "run" / "samples_round01.txt").shape == (200, 2)
    assert (tmp_path / "run" / "checkpoint_round01.lfic").exists()


@pytest.mark.parametrize("algorithm", ["snpec", "sre"])
def test_runs_are_byte_reproducible(tmp_path, algorithm):
    outs = []
    for rep in range(2):
        cfg = _small(tmp_path, f"{algorithm}{rep}", algorithm=algorithm)
        run_experiment(cfg)
        d = tmp_path / f"{algorithm}{rep}"
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outs[0].keys() == outs[1].keys()
    assert outs[0] == outs[1]
    rows = read_metrics(tmp_path / f"{algorithm}0" / "metrics.csv")
    assert [r["cumulative_sims"] for r in rows] == [200, 400]
    assert all(r["median_distance"] >= 0 for r in rows)
    if algorithm == "sre":
        assert all(r["acceptance_rate"] is None for r in rows)


def test_samples_file_full_precision(tmp_path):
    cfg = _small(tmp_path, rounds=1)
    captured = {}
    run_experiment(cfg, state_hook=lambda st: captured.setdefault("pending", st.pending.copy()))
    assert np.array_equal(read_samples(tmp_path / "run" / "samples_round01.txt"), captured["pending"])


def test_timing_is_opt_in(tmp_path):
    cfg = _small(tmp_path, rounds=1, record_timing=True)
    run_experiment(cfg)
    assert read_metrics(tmp_path / "run" / "metrics.csv")[0]["wall_seconds"] > 0


# --- CLI


def test_parse_seeds():
    assert parse_seeds("0..3") == [0, 1, 2, 3]
    assert parse_seeds("2,5") == [2, 5]
    assert parse_seeds("7") == [7]


def test_cli_run_and_sweep(tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(SMALL.replace("rounds = 2", "rounds = 1"))
    assert main(["run", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "one")]) == 0
    assert len(read_metrics(tmp_path / "one" / "metrics.csv")) == 1
    assert main(["sweep", "--config", str(cfg), "--seeds", "0..1", "--out", str(tmp_path / "sw")]) == 0
    for s in (0, 1):
        assert (tmp_path / "sw" / f"seed_{s}" / "metrics.csv").exists()
    assert "seed 1" in capsys.readouterr().out


def test_cli_errors_are_categorised(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("task = conjugate\nbogus = 3\n")
    assert main(["run", "--config", str(bad), "--seed", "0", "--out", str(tmp_path / "x")]) == 2
    assert capsys.readouterr().err.startswith("error[config]: unknown config key")
    assert main(["run", "--config", str(tmp_path / "nope.cfg"), "--seed", "0", "--out", str(tmp_path / "x")]) == 2
    assert main(["sweep", "--config", str(bad), "--seeds", "5..1", "--out", str(tmp_path / "y")]) == 64
    assert "error[usage]" in capsys.readouterr().err
    assert main(["validate", "--criteria", "42"]) == 64
