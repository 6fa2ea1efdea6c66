"""Python smoke tests for the scalelab extension module."""

import math

import numpy as np
import pytest

import scalelab as sl


def test_version():
    assert sl.__version__


def test_compute_accounting():
    assert sl.chinchilla_tokens(512, 6, 32101) == 706_201_600
    counts = sl.param_count(512, 6)
    assert counts["backbone_approx"] == 18_874_368
    assert counts["backbone_exact"] == 18_887_168
    assert sl.flops_estimate(10, 20) == 1200.0


def test_width_ladder_and_presets():
    ladder = sl.width_ladder("s51")
    assert ladder[0] == (128, 512)
    assert (3072, 12288) in ladder
    assert set(sl.rule_presets()) >= {"blue-const-lr", "red-inv-width", "mup-const-wd"}
    point = sl.materialize_preset("blue-const-lr", 3072)
    assert point["tokens"] == 26_214_400_000
    assert point["flops"] == pytest.approx(1.069e20, rel=1e-3)


def test_power_law_fit_and_crossover():
    truth = (5.0, -0.4, 2.0)
    f = [10.0**i for i in range(5)]
    loss = [truth[0] * x ** truth[1] + truth[2] for x in f]
    rep = sl.fit_power_law(f, loss)
    law = rep["law"]
    assert law["a"] == pytest.approx(5.0, rel=1e-6)
    assert law["b"] == pytest.approx(-0.4, rel=1e-6)
    assert law["c"] == pytest.approx(2.0, rel=1e-6)
    assert sl.predict_power_law(10, -0.3, 1.5, 1.0) == pytest.approx(11.5)

    cross = sl.crossover_fitted(2.0, -0.5, 0.0, 1.0, -0.25, 0.0, 0.1, 1e6)
    assert cross["found"]
    assert cross["f_star"] == pytest.approx(16.0, rel=1e-6)


def test_detect_instability():
    steps = list(range(0, 10001, 100))
    losses = [3.0 + 2.0 * math.exp(-s / 4000.0) for s in steps]
    for i, s in enumerate(steps):
        if 5000 <= s <= 6000:
            losses[i] += 1.0
    spikes = sl.detect_instability(steps, losses, window=200, threshold=0.15)
    assert len(spikes) == 1
    assert spikes[0]["start_step"] <= 5100
    assert spikes[0]["end_step"] >= 5900
    assert spikes[0]["peak_excess"] == pytest.approx(1.0, abs=0.15)


def test_synthetic_entropy_and_shards(tmp_path):
    tokens, entropy = sl.gen_synthetic(vocab=16, order=0, concentration=0.0, seed=1, n_tokens=4096)
    assert entropy == pytest.approx(math.log(16.0))
    assert tokens.dtype == np.int32
    assert tokens.shape == (4096,)
    assert tokens.max() < 16

    base = str(tmp_path / "shard")
    sl.write_shard(base, tokens, 16)
    back, meta = sl.load_shard(base)
    assert meta["n_tokens"] == 4096
    np.testing.assert_array_equal(back, tokens)


def test_model_mup_oracle():
    cfg = {
        "d_model": 32,
        "n_layers": 2,
        "d_head": 8,
        "vocab_size": 256,
        "seq_len": 8,
        "parametrization": "mup",
    }
    model = sl.Model(cfg, seed=3)
    rng = np.random.default_rng(0)
    inputs = rng.integers(0, 256, size=(2, 8), dtype=np.int32)
    targets = rng.integers(0, 256, size=(2, 8), dtype=np.int32)
    assert model.loss(inputs, targets) == pytest.approx(math.log(256.0), abs=1e-4)
    full = model.loss_full(inputs, targets)
    assert len(full["layer_activation_rms"]) == 2
    assert model.n_params > 0


def test_train_run_smoke(tmp_path):
    tokens, _ = sl.gen_synthetic(vocab=16, order=0, concentration=0.0, seed=5, n_tokens=8000)
    base = str(tmp_path / "shard")
    sl.write_shard(base, tokens, 16)
    cfg = {
        "model": {"d_model": 16, "n_layers": 1, "d_head": 8, "vocab_size": 16, "seq_len": 16},
        "schedule": {"peak_lr": 0.02, "warmup_steps": 2},
        "data": {"shard": base, "eval_fraction": 0.2},
        "batch": 4,
        "steps": 10,
        "eval_every": 5,
        "eval_batches": 1,
        "seed": 0,
    }
    record = sl.train_run(cfg, out_root=str(tmp_path / "out"))
    assert record["status"] == "completed"
    assert record["steps_completed"] == 10
    ledger = sl.read_ledger(str(tmp_path / "out" / "ledger.jsonl"))
    assert len(ledger) == 1
    assert ledger[0]["digest"] == record["digest"]
    assert sl.config_digest(cfg) == record["digest"]


def test_strict_config_errors():
    with pytest.raises(ValueError):
        sl.train_run({"definitely_not_a_key": 1}, out_root="/tmp/unused")
