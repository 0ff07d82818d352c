import math

import numpy as np
import pytest

import hybridlm as hlm


def test_softmax_sums_to_one():
    x = np.random.default_rng(0).normal(size=(4, 9)).astype(np.float32)
    s = hlm.softmax(x)
    assert s.shape == (4, 9)
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    assert np.allclose(hlm.softmax(np.zeros((1, 2), np.float32)), 0.5)


def test_kl_loss_values():
    z = np.random.default_rng(1).normal(size=(3, 8)).astype(np.float32)
    assert hlm.kl_loss(z, z) == 0.0
    zh = np.zeros((1, 2), np.float32)
    zt = np.array([[math.log(3.0), 0.0]], np.float32)
    assert abs(hlm.kl_loss(zh, zt) - 0.14384) < 1e-4
    with pytest.raises(ValueError):
        hlm.kl_loss(zh, np.zeros((1, 3), np.float32))


def test_mil_slices_tile_by_group():
    rng = np.random.default_rng(2)
    d, heads, kv, dh = 32, 8, 2, 4
    wq = rng.normal(size=(d, heads * dh)).astype(np.float32)
    wk = rng.normal(size=(d, kv * dh)).astype(np.float32)
    wv = rng.normal(size=(d, kv * dh)).astype(np.float32)
    wo = rng.normal(size=(heads * dh, d)).astype(np.float32)
    out = hlm.mil_init_slices(wq, wk, wv, wo, n_heads=heads, n_kv_heads=kv)
    assert out["repetition"] == 4
    assert np.array_equal(out["in_c"], wq)
    assert np.array_equal(out["out_proj"], wo)
    for h in range(heads):
        g = h % kv
        assert np.array_equal(out["in_b"][:, h * dh:(h + 1) * dh], wk[:, g * dh:(g + 1) * dh])
        assert np.array_equal(out["in_x"][:, h * dh:(h + 1) * dh], wv[:, g * dh:(g + 1) * dh])


def test_scan_matches_steps():
    assert hlm.scan_step_max_diff(seed=3, t=40) < 1e-5


def test_model_forward_and_hybridize(tmp_path):
    cfg = dict(n_layers=2, d_model=32, n_heads=4, n_kv_heads=2, d_head=8,
               vocab_size=24, d_mlp=48, max_seq=64)
    model = hlm.Model.init_random(cfg, seed=5)
    logits = model.forward([1, 2, 3])
    assert logits.shape == (3, 24)
    assert model.layout_name == "H1-0/2"

    hybrid = model.replace_layers([0])
    assert hybrid.layout_name == "H1-1/2"
    assert hybrid.mamba_count == 1

    path = str(tmp_path / "m.ckpt")
    hybrid.save(path)
    back = hlm.Model.load(path)
    assert np.array_equal(back.forward([1, 2, 3]), hybrid.forward([1, 2, 3]))

    toks = back.decode_greedy([1], 5)
    assert len(toks) == 6


def test_task_generation_and_distill():
    task = dict(kind="copy", vocab_size=24, seq_len=12, seed=3)
    tokens, masks = hlm.generate_task(task, split="train", count=2)
    assert len(tokens) == 2 and len(masks) == 2
    k = (12 - 2) // 2
    t0 = tokens[0]
    assert t0[0] == 0 and t0[1 + k] == 1
    assert np.array_equal(t0[1:1 + k], t0[2 + k:2 + 2 * k])

    teacher = hlm.Model.init_random(dict(n_layers=2, d_model=32, n_heads=4, n_kv_heads=2,
                                         d_head=8, vocab_size=24, d_mlp=48, max_seq=64), seed=6)
    student = teacher.replace_layers([1])
    log = student.distill_from(teacher, task, steps=5, batch=2, lr=1e-3, seed=1)
    assert log["tokens"] == 5 * 2 * 12
    assert log["eval_final"] <= log["eval_initial"] * 1.5  # smoke: no blow-ups
    assert 0.0 <= teacher.accuracy(task, count=8) <= 1.0
