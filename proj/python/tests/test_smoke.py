import json

import numpy as np
import pytest

import tstok

TOKENIZER = {"codebook_size": 16, "code_dim": 4, "compression": 4, "num_residual_layers": 1,
             "residual_hidden": 4, "block_hidden": 8, "iterations": 15, "batch_size": 8, "seed": 3}
FORECASTER = {"model_dim": 8, "hidden_dim": 16, "num_heads": 2, "num_layers": 1, "lookback": 32,
              "horizon": 16, "stats_hidden": 8, "mlp_hidden": 16, "iterations": 5, "batch_size": 4}


def rows(n=12, t=32, seed=0):
    rng = np.random.default_rng(seed)
    grid = np.arange(t)
    return np.stack([np.sin(2 * np.pi * grid / rng.uniform(8, 32) + rng.uniform(0, 6)) for _ in range(n)])


def test_synthetic_is_deterministic():
    spec = {"kind": "spiked", "sensors": 2, "steps": 1000, "examples": 2, "seed": 5}
    a, la = tstok.generate_synthetic(spec)
    b, lb = tstok.generate_synthetic(spec)
    assert a.shape == (2, 2, 1000) and la.shape == (2, 1000)
    np.testing.assert_array_equal(a, b)
    assert la.sum(axis=1).tolist() == [20, 20]
    assert tstok.generate_synthetic({"kind": "multi-sine", "steps": 64})[1] is None


def test_quantize_ties_lowest_index():
    codewords = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 5.0]])
    q, idx = tstok.quantize(codewords, np.array([[0.0, 0.0], [-0.9, 0.1]]))
    assert idx == [0, 1]
    np.testing.assert_array_equal(q[0], codewords[0])


def test_tokenizer_train_encode_roundtrip(tmp_path):
    tok = tstok.Tokenizer(TOKENIZER)
    hist = tok.train(rows())
    assert hist.shape == (15, 5) and np.all(np.isfinite(hist))
    codes = tok.encode(rows(3))
    assert codes.shape == (3, 8) and codes.min() >= 0 and codes.max() < 16
    assert tok.reconstruct(rows(3)).shape == (3, 32)
    path = tmp_path / "tok.json"
    tok.save(str(path))
    back = tstok.Tokenizer.load(str(path))
    np.testing.assert_array_equal(back.codebook, tok.codebook)
    np.testing.assert_array_equal(back.encode(rows(3)), codes)
    assert json.loads(path.read_text())["format_version"] == 1


def test_impute_keeps_observed_and_detect_flags():
    tok = tstok.Tokenizer(TOKENIZER)
    tok.train(rows(), mask_ratios=[0.25])
    x = rows(2)
    observed = np.ones_like(x, dtype=np.uint8)
    observed[:, 5:9] = 0
    filled = tok.impute(x, observed)
    np.testing.assert_array_equal(filled[observed == 1], x[observed == 1])
    scores, flags = tok.detect(rows(3, 64), ratio=0.05)
    assert len(scores) == 64 and flags.sum() == 3


def test_forecaster_predict_and_reload(tmp_path):
    tok = tstok.Tokenizer(TOKENIZER)
    tok.train(rows())
    fc = tstok.Forecaster(FORECASTER, tok)
    loss = fc.train(rows(8, 48))
    assert len(loss) == 5 and all(np.isfinite(loss))
    x = rows(3, 32, seed=1)
    y = fc.predict(x)
    assert y.shape == (3, 16)
    np.testing.assert_array_equal(fc.predict(x), y)
    fc.save(str(tmp_path / "fc.json"))
    np.testing.assert_array_equal(tstok.Forecaster.load(str(tmp_path / "fc.json")).predict(x), y)


def test_metrics():
    pred = np.array([0, 1, 0, 0, 0, 0], dtype=np.uint8)
    truth = np.array([1, 1, 1, 0, 1, 1], dtype=np.uint8)
    assert tstok.point_adjust(pred, truth).tolist() == [1, 1, 1, 0, 0, 0]
    p, r, f1 = tstok.precision_recall_f1(pred, truth, adjusted=True)
    assert (p, r) == (1.0, 0.6)
    assert tstok.permutation_test([0.0, 0.0, 0.0], [1.0, 2.0, 3.0]) == pytest.approx(1 / 8)
    rows_ = [("a", "s", "mse", 1.0, True), ("b", "s", "mse", 1.0, True)]
    assert tstok.avg_wins(rows_, True) == {"a": 1.0, "b": 1.0}
    assert tstok.avg_wins(rows_, False) == {"a": 0.0, "b": 0.0}


def test_run_experiment_refuses_overwrite(tmp_path):
    config = {"task": "impute", "data": {"synthetic": {"sensors": 2, "steps": 256, "examples": 2}},
              "tokenizer": TOKENIZER, "window_length": 32, "stride": 8, "seeds": [0],
              "output_dir": str(tmp_path / "run")}
    merged = tstok.run_experiment(config)
    assert merged["task"] == "impute" and merged["cells"]
    with pytest.raises(tstok.OutputExists):
        tstok.run_experiment(config)
    assert "AvgWins" in tstok.compare(str(tmp_path / "run"), str(tmp_path / "run"), str(tmp_path / "cmp"))
