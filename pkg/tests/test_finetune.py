import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitsmall import tensor as T
from vitsmall.checkpoint import Checkpoint, load_checkpoint
from vitsmall.data import synthetic_dataset
from vitsmall.distill import DistillConfig, pretrain
from vitsmall.finetune import (FinetuneConfig, build_model, cutmix, finetune, label_smooth, load_backbone,
                               make_batch, mixup, model_from_checkpoint, one_hot, random_erase)
from vitsmall.metrics import read_metrics
from vitsmall.rng import stream
from vitsmall.tensor import DimensionError, ParameterError
from vitsmall.views import ViewConfig
from vitsmall.vit import ViTConfig, init_weights


def vit16(dtype="float64"):
    return ViTConfig(image_size=(16, 16), patch_size=4, depth=1, dim=16, heads=2, dtype=dtype)


@pytest.fixture(scope="module")
def pretrained():
    data = synthetic_dataset(0, 4, 3, 16)
    cfg = DistillConfig(epochs=1, batch_size=6, warmup_epochs=0, out_dim=16, hidden_dim=16, bottleneck_dim=8)
    return data, pretrain(data, vit16(), cfg, ViewConfig.for_image_size(16), seed=1)


# ---------------------------------------------------------------- targets

def test_label_smoothing_examples():
    y = one_hot([2, 0], 10, np.float64)
    assert np.array_equal(label_smooth(y, 0.0), y)
    s = label_smooth(y, 0.1)
    np.testing.assert_allclose(s[0, 2], 0.91)
    np.testing.assert_allclose(s[0, [0, 1, 3]], 0.01)
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-15)
    with pytest.raises(ParameterError):
        label_smooth(y, 1.0)


def test_smoothed_optimum_loss_not_below_one_hot_optimum():
    y = one_hot([1], 3, np.float64)
    results = []
    for target in (y, label_smooth(y, 0.1)):
        z = T.parameter(np.zeros((1, 3)))
        for _ in range(2000):
            loss = T.cross_entropy(z, target)
            T.backward(loss)
            z.data -= 1.0 * z.grad
            z.grad = None
        results.append(loss.item())
    hard, smooth = results
    t = label_smooth(y, 0.1)[0]
    assert smooth >= hard
    assert abs(smooth - float(-(t * np.log(t)).sum())) < 1e-6


def test_mixup_examples():
    rng = np.random.default_rng(0)
    a, b = np.full((4, 4, 3), 0.2), np.full((4, 4, 3), 0.8)
    ya, yb = one_hot([0], 3, np.float64), one_hot([2], 3, np.float64)
    x, y = mixup(a, ya, b, yb, 0.8, rng, lam=1.0)
    assert np.array_equal(x, a) and np.array_equal(y, ya)
    x, y = mixup(a, ya, b, yb, 0.8, rng, lam=0.5)
    np.testing.assert_allclose(x, 0.5)
    np.testing.assert_allclose(y, [[0.5, 0, 0.5]])


def test_cutmix_examples_and_pixel_count():
    rng = np.random.default_rng(0)
    a, b = np.zeros((2, 8, 8, 3)), np.ones((2, 8, 8, 3))
    ya, yb = one_hot([0, 1], 3, np.float64), one_hot([2, 2], 3, np.float64)
    x, y, lam = cutmix(a, ya, b, yb, 1.0, rng, box=(0, 0, 0, 0))
    assert lam == 1.0 and np.array_equal(x, a) and np.array_equal(y, ya)
    x, y, lam = cutmix(a, ya, b, yb, 1.0, rng, box=(0, 8, 0, 8))
    assert lam == 0.0 and np.array_equal(x, b) and np.array_equal(y, yb)
    for s in range(50):
        x, y, lam = cutmix(a, ya, b, yb, 1.0, np.random.default_rng(s))
        replaced = int(x[0, ..., 0].sum())
        assert lam == 1 - replaced / 64
        np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)


def test_random_erase_examples():
    x = np.random.default_rng(0).standard_normal((16, 16, 3))
    assert random_erase(x, 0.0, np.random.default_rng(0)) is x
    applied = 0
    for s in range(200):
        out, box = random_erase(x, 0.5, np.random.default_rng(s), return_box=True)
        again = random_erase(x, 0.5, np.random.default_rng(s))
        assert np.array_equal(out, again)
        if box is None:
            assert np.array_equal(out, x)
            continue
        applied += 1
        top, left, eh, ew = box
        assert 0.02 <= eh * ew / 256 <= 0.33
        mask = np.ones((16, 16), bool)
        mask[top:top + eh, left:left + ew] = False
        assert np.array_equal(out[mask], x[mask])
    assert 60 < applied < 140


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5))
def test_composed_soft_targets_sum_to_one(seed, eps):
    rng = np.random.default_rng(seed)
    imgs = rng.random((6, 8, 8, 3))
    labels = rng.integers(0, 5, 6)
    cfg = FinetuneConfig(label_smoothing=eps, mix_prob=1.0, switch_prob=float(rng.random()), pad_crop=2)
    _, y = make_batch(imgs, labels, 5, cfg, rng, np.zeros(3), np.ones(3), np.float64)
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)
    assert (y >= 0).all()


def test_plain_config_reduces_to_plain_cross_entropy():
    rng = np.random.default_rng(0)
    imgs = rng.random((5, 16, 16, 3))
    labels = np.array([0, 2, 1, 1, 0])
    x, y = make_batch(imgs, labels, 3, FinetuneConfig.plain(), rng, np.full(3, 0.5), np.full(3, 0.25), np.float64)
    np.testing.assert_allclose(x, (imgs - 0.5) / 0.25)
    assert np.array_equal(y, one_hot(labels, 3, np.float64))
    model = build_model(vit16(), 3, FinetuneConfig.plain(init_source="xavier"), seed=0)
    logits, _ = model.forward(x)
    loss = T.cross_entropy(logits, y).item()
    lg = logits.data
    direct = np.mean([-(lg[i, labels[i]] - np.log(np.exp(lg[i]).sum())) for i in range(5)])
    assert abs(loss - direct) <= 1e-6


# ---------------------------------------------------------------- transfer

def test_zero_epoch_transfer_is_bit_exact():
    data = synthetic_dataset(0, 2, 2, 16)
    cfg = DistillConfig(epochs=0, warmup_epochs=0, out_dim=16, hidden_dim=16, bottleneck_dim=8)
    ckpt = pretrain(data, vit16(), cfg, ViewConfig.for_image_size(16), seed=9)
    init = init_weights(vit16(), "truncated-normal", stream(9, "init"))
    backbone = load_backbone(ckpt, vit16())
    for k, v in init.items():
        assert np.array_equal(backbone.params[k].data, v)


def test_transfer_fidelity_and_teacher_student_differ(pretrained):
    _, ckpt = pretrained
    t = load_backbone(ckpt, vit16(), "teacher")
    s = load_backbone(ckpt, vit16(), "student")
    for k, p in t.params.items():
        src = ckpt.tensors[f"teacher.{k}"].ravel()
        v = p.data.ravel()
        if np.any(src):
            cos = float(v @ src / (np.linalg.norm(v) * np.linalg.norm(src)))
            assert abs(cos - 1.0) <= 1e-12
        assert np.array_equal(p.data, ckpt.tensors[f"teacher.{k}"])
    assert any(not np.array_equal(t.params[k].data, s.params[k].data) for k in t.params)
    default = build_model(vit16(), 3, FinetuneConfig(), seed=0, ckpt=ckpt)
    assert all(np.array_equal(default.backbone.params[k].data, t.params[k].data) for k in t.params)


def test_transfer_shape_mismatch_names_tensor(pretrained):
    _, ckpt = pretrained
    bad = Checkpoint(dict(ckpt.tensors), ckpt.metadata)
    bad.tensors["teacher.pos_embed"] = np.zeros((3, 16))
    with pytest.raises(DimensionError, match="teacher.pos_embed"):
        load_backbone(bad, vit16())
    with pytest.raises(ParameterError):
        build_model(vit16(), 3, FinetuneConfig(), seed=0, ckpt=None)


def test_head_is_fresh_linear_classifier(pretrained):
    _, ckpt = pretrained
    model = build_model(vit16(), 7, FinetuneConfig(), seed=0, ckpt=ckpt)
    w = model.head.params["classifier.weight"].data
    assert w.shape == (16, 7) and np.abs(w).max() <= 0.04
    assert np.all(model.head.params["classifier.bias"].data == 0)
    assert not any(k.startswith("head.") or "fc3" in k for k in model.params)


# ---------------------------------------------------------------- training loop

def test_zero_epochs_is_chance_level():
    data = synthetic_dataset(0, 40, 10, 16)
    accs = []
    for seed in range(3):
        _, hist = finetune(data, vit16("float32"), FinetuneConfig(epochs=0, init_source="truncated-normal"), seed)
        assert len(hist) == 1
        accs.append(hist[0]["test_top1"])
    assert abs(np.mean(accs) - 0.1) < 0.1


def test_finetune_outputs_and_determinism(tmp_path, pretrained):
    data, ckpt = pretrained
    cfg = FinetuneConfig(epochs=2, batch_size=4)
    m1, h1 = finetune(data, vit16(), cfg, seed=3, ckpt=ckpt, out_dir=tmp_path)
    m2, h2 = finetune(data, vit16(), cfg, seed=3, ckpt=ckpt)
    assert [r["test_top1"] for r in h1] == [r["test_top1"] for r in h2]
    assert all(np.array_equal(m1.params[k].data, m2.params[k].data) for k in m1.params)
    rows = read_metrics(tmp_path / "finetune_metrics.csv")
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert {"epoch", "train_loss", "test_top1", "lr"} <= set(rows[0])
    final = load_checkpoint(tmp_path / "finetune_final.svtc")
    assert (tmp_path / "finetune_best.svtc").exists()
    m3 = model_from_checkpoint(final, vit16())
    x = np.random.default_rng(0).standard_normal((3, 16, 16, 3))
    np.testing.assert_array_equal(m3.logits(x), m1.logits(x))


def test_finetune_does_not_mutate_inputs(pretrained):
    data, ckpt = pretrained
    before = {k: v.copy() for k, v in ckpt.tensors.items()}
    cfg = FinetuneConfig(epochs=1, batch_size=4, dropout=0.1)
    vit = vit16()
    finetune(data, vit, cfg, seed=0, ckpt=ckpt)
    assert vit.dropout == 0.0
    assert all(np.array_equal(before[k], ckpt.tensors[k]) for k in before)


def test_memorization_small_fixture():
    data = synthetic_dataset(3, 8, 4, 16, noise=0.3)
    cfg = FinetuneConfig.plain(epochs=60, batch_size=8, lr=3e-3, weight_decay=0.0,
                               init_source="truncated-normal", eval_every=0)
    _, hist = finetune(data, vit16("float32"), cfg, seed=0)
    assert hist[-1]["train_top1"] == 1.0


def test_config_validation():
    with pytest.raises(ParameterError):
        FinetuneConfig(init_source="imagenet")
    with pytest.raises(ParameterError):
        FinetuneConfig(mixup_alpha=0.0)
    with pytest.raises(ParameterError):
        FinetuneConfig(random_erase_p=1.5)
