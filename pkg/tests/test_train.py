import math

import numpy as np
import pytest
import torch

from ssmecg.augment import AugmentConfig
from ssmecg.checkpoint import Checkpoint, CheckpointError
from ssmecg.network import NetworkConfig
from ssmecg.train import (AdamMoments, FinetuneConfig, PretrainConfig, TrainingError, adamw_step,
                          bce_multilabel_loss, cross_validate, finetune, pretext_batch, pretrain,
                          subsample_training)

TINY = NetworkConfig(d_model=8, d_state=4, n_blocks=1, dropout=0.0, embedding_dim=16, window_len=100)


def sources(n, length=150, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(length) / 100
    return [np.sin(2 * np.pi * rng.uniform(0.8, 2) * t).astype(np.float32)
            + 0.1 * rng.standard_normal(length).astype(np.float32) for _ in range(n)]


class TestLoss:
    def test_reference_values(self):
        zero = bce_multilabel_loss(torch.zeros(3, 9), torch.randint(0, 2, (3, 9)).float())
        assert zero.item() == pytest.approx(math.log(2))
        t = torch.tensor([[1.0, 0.0]])
        assert bce_multilabel_loss(torch.tensor([[1.0, -1.0]]), t).item() == pytest.approx(0.313262, abs=1e-6)
        assert bce_multilabel_loss(torch.tensor([[40.0, -40.0]]), t).item() < 1e-12

    def test_matches_torch_and_rejects_nonfinite(self):
        x, t = torch.randn(5, 9), torch.randint(0, 2, (5, 9)).float()
        ref = torch.nn.functional.binary_cross_entropy_with_logits(x, t)
        assert bce_multilabel_loss(x, t).item() == pytest.approx(ref.item(), abs=1e-6)
        with pytest.raises(TrainingError):
            bce_multilabel_loss(torch.tensor([[float("nan")]]), torch.zeros(1, 1))


def test_adamw_matches_torch_reference():
    torch.manual_seed(0)
    w = torch.randn(4, 3, dtype=torch.float64)
    b = torch.randn(3, dtype=torch.float64)
    ref_w, ref_b = w.clone().requires_grad_(), b.clone().requires_grad_()
    opt = torch.optim.AdamW([{"params": [ref_w], "weight_decay": 0.01},
                             {"params": [ref_b], "weight_decay": 0.0}], lr=1e-2)
    params = {"w": w.clone(), "b": b.clone()}
    moments = AdamMoments.zeros_like(params)
    for step in range(25):
        g = {"w": torch.randn(4, 3, dtype=torch.float64), "b": torch.randn(3, dtype=torch.float64)}
        ref_w.grad, ref_b.grad = g["w"].clone(), g["b"].clone()
        opt.step()
        params, moments = adamw_step(params, g, moments, 1e-2, 0.01, no_decay=frozenset({"b"}))
    torch.testing.assert_close(params["w"], ref_w.detach(), rtol=0, atol=1e-12)
    torch.testing.assert_close(params["b"], ref_b.detach(), rtol=0, atol=1e-12)
    assert moments.step == 25


def test_adamw_numpy_and_nonfinite():
    p = {"x": np.array([1.0])}
    new, m = adamw_step(p, {"x": np.array([0.5])}, AdamMoments.zeros_like(p), lr=0.1, weight_decay=0.0)
    # first bias-corrected step moves by lr * sign(g)
    assert new["x"][0] == pytest.approx(0.9, abs=1e-6)
    assert p["x"][0] == 1.0
    with pytest.raises(TrainingError):
        adamw_step(p, {"x": np.array([np.inf])}, m, lr=0.1)


def test_pretext_batch_shapes_and_determinism():
    src = sources(4)
    X1, Y1 = pretext_batch(src, [0, 3], 100, AugmentConfig(), seed=1, epoch=2)
    X2, Y2 = pretext_batch(src, [0, 3], 100, AugmentConfig(), seed=1, epoch=2)
    assert X1.shape == (2, 100) and Y1.shape == (2, 9)
    np.testing.assert_array_equal(X1, X2)
    np.testing.assert_array_equal(Y1, Y2)
    X3, _ = pretext_batch(src, [0, 3], 100, AugmentConfig(), seed=1, epoch=3)
    assert not np.array_equal(X1, X3)
    with pytest.raises(TrainingError):
        pretext_batch([np.zeros(50)], [0], 100, AugmentConfig(), 0, 0)


def test_pretrain_smoke_and_determinism():
    cfg = PretrainConfig(epochs=1, batch_size=4, seed=5)
    a = pretrain(sources(10), cfg, TINY)
    b = pretrain(sources(10), cfg, TINY)
    assert a.checkpoint.meta["epoch"] == 1
    assert len(a.history) == 1 and np.isfinite(a.history[0]["loss"])
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    assert any(k.startswith("opt.m.") for k in a.checkpoint.arrays)
    with pytest.raises(TrainingError):
        pretrain([], cfg, TINY)


def separable(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    t = np.arange(100) / 100
    X = np.stack([np.sin(2 * np.pi * (1 if c == 0 else 6) * t) for c in y])
    return (X + 0.05 * rng.standard_normal(X.shape)).astype(np.float32), y


def test_projector_freezes_backbone():
    X, y = separable()
    ck = pretrain(sources(8), PretrainConfig(epochs=1, batch_size=4), TINY).checkpoint
    split = (np.arange(0, 40), np.arange(40, 50), np.arange(50, 60))
    res = finetune(X, y, split, FinetuneConfig(mode="projector", max_epochs=3, batch_size=8), init=ck)
    for name, arr in res.checkpoint.section("network").items():
        if name.startswith(("encoder", "blocks")):
            np.testing.assert_array_equal(arr, ck.arrays[f"network.{name}"])
    assert not np.array_equal(res.checkpoint.arrays["network.decoder.weight"],
                              ck.arrays["network.decoder.weight"])


def test_full_model_separable_task():
    X, y = separable(80)
    split = (np.arange(0, 50), np.arange(50, 64), np.arange(64, 80))
    cfg = FinetuneConfig(mode="full_model", max_epochs=40, patience=10, batch_size=16)
    res = finetune(X, y, split, cfg, TINY)
    assert res.metrics["accuracy"] == 1.0
    assert res.outputs.shape == (16, 2)
    assert 1 <= res.best_epoch <= res.epochs_run
    assert res.checkpoint.meta["epoch"] == res.best_epoch


def test_regression_and_early_stop_restores_best():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 100)).astype(np.float32)
    y = rng.standard_normal(40).astype(np.float32)  # pure noise: validation loss soon rises
    cfg = FinetuneConfig(kind="regression", n_outputs=1, max_epochs=60, patience=3, batch_size=8)
    res = finetune(X, y, (np.arange(30), np.arange(30, 35), np.arange(35, 40)), cfg, TINY)
    val = [r["loss"] for r in res.history if r["split"] == "validation"]
    assert res.epochs_run < 60
    assert res.epochs_run - res.best_epoch == 3
    assert val[res.best_epoch - 1] == min(val)
    assert "ccc" in res.metrics


def test_finetune_errors():
    X, y = separable(20)
    with pytest.raises(TrainingError, match="no examples"):
        finetune(X, y, (np.arange(0, 20, 2), [], [1]), FinetuneConfig(), TINY)
    with pytest.raises(ValueError):
        FinetuneConfig(learning_rate=0.01)
    with pytest.raises(ValueError):
        FinetuneConfig(mode="linear")


def test_subsample_training():
    labels = np.array([0] * 90 + [1] * 10)
    idx = np.arange(100)
    sub = subsample_training(idx, labels, 0.05, seed=1)
    assert (labels[sub] == 0).sum() == 4 and (labels[sub] == 1).sum() == 1
    np.testing.assert_array_equal(sub, subsample_training(idx, labels, 0.05, seed=1))
    np.testing.assert_array_equal(subsample_training(idx, labels, 1.0), idx)
    assert len(subsample_training(idx, labels.astype(float), 0.1, kind="regression")) == 10
    with pytest.raises(ValueError):
        subsample_training(idx, labels, 0.0)


def test_cross_validate_report():
    X, y = separable(60)
    folds = [(np.arange(0, 40), np.arange(40, 50), np.arange(50, 60)),
             (np.arange(20, 60), np.arange(10, 20), np.arange(0, 10))]
    cfg = FinetuneConfig(mode="projector", max_epochs=5, batch_size=16)
    results, report = cross_validate(X, y, folds, cfg, TINY)
    assert len(results) == 2 and len(report.per_fold) == 2
    assert set(report.aggregate) == {"accuracy", "f1_macro"}


class TestCheckpoint:
    def test_roundtrip_is_byte_identical(self, tmp_path):
        ck = Checkpoint({"a.w": np.arange(6.0).reshape(2, 3), "s": np.array(3.5)},
                        {"epoch": 2, "cfg": {"x": [1, 2]}})
        ck.save(tmp_path / "c.ckpt")
        back = Checkpoint.load(tmp_path / "c.ckpt")
        np.testing.assert_array_equal(back.arrays["a.w"], ck.arrays["a.w"])
        assert back.meta == ck.meta and back.section("a") == {"w": back.arrays["a.w"]}
        back.save(tmp_path / "d.ckpt")
        assert (tmp_path / "c.ckpt").read_bytes() == (tmp_path / "d.ckpt").read_bytes()

    def test_rejects_foreign_files(self):
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(b"not a checkpoint at all")
        data = bytearray(Checkpoint().to_bytes())
        data[8] = 9
        with pytest.raises(CheckpointError, match="version"):
            Checkpoint.from_bytes(bytes(data))
