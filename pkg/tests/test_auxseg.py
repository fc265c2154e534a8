import math

import numpy as np
import pytest

from amc3d import tensor as T
from amc3d.auxseg import (SegDecoderConfig, assemble_token_volume, default_decoder_config,
                          dice_per_class, init_decoder, one_hot, seg_loss, token_volume_slice,
                          total_loss)
from amc3d.backbone import BackboneConfig, init_random_backbone, prepare_slices
from amc3d.errors import ContractError
from amc3d.fusion import classify_volume, forward_batch
from amc3d.plugin import new_plugin
from amc3d.volume import Volume


@pytest.fixture
def f64():
    with T.precision("f64"):
        yield


def test_token_volume_shape_and_roundtrip():
    rng = np.random.default_rng(0)
    toks = [rng.standard_normal((16, 32)).astype(np.float32) for _ in range(8)]
    F = assemble_token_volume(toks, (4, 4))
    assert F.shape == (32, 4, 4, 8)
    for s in range(8):
        assert np.array_equal(token_volume_slice(F, s), toks[s])


def test_token_volume_row_major_grid():
    toks = np.arange(6 * 2, dtype=float).reshape(1, 6, 2)
    F = assemble_token_volume(toks, (2, 3))
    assert F.data[1, 1, 2, 0] == toks[0, 5, 1]
    assert F.data[0, 0, 1, 0] == toks[0, 1, 0]


def test_token_volume_slice_permutation_covariance():
    rng = np.random.default_rng(1)
    toks = rng.standard_normal((5, 4, 3))
    perm = rng.permutation(5)
    assert np.array_equal(assemble_token_volume(toks[perm], (2, 2)).data,
                          assemble_token_volume(toks, (2, 2)).data[..., perm])


def test_token_volume_errors():
    with pytest.raises(ContractError):
        assemble_token_volume([np.zeros((4, 3)), np.zeros((5, 3))], (2, 2))
    with pytest.raises(ContractError):
        assemble_token_volume(np.zeros((2, 5, 3)), (2, 2))


def test_default_decoder_config_covers_patch():
    cfg = default_decoder_config(BackboneConfig())
    assert cfg.upsample == ((2, 2, 1),) * 3 and cfg.channels == (16, 8, 4)
    assert cfg.total_upsample() == (8, 8, 1)
    cfg16 = default_decoder_config(BackboneConfig(patch_size=16))
    assert np.prod([u[0] for u in cfg16.upsample]) == 16


def test_decoder_output_shape_and_geometry_check():
    cfg = SegDecoderConfig(in_channels=6, channels=(4, 2), upsample=((2, 2, 1), (2, 2, 1)))
    dec = init_decoder(cfg, 0)
    F = T.Tensor(np.random.default_rng(0).standard_normal((6, 2, 3, 4)))
    assert dec(F, (8, 12, 4)).shape == (2, 8, 12, 4)
    with pytest.raises(ContractError):
        dec(F, (8, 8, 4))
    with pytest.raises(ContractError):
        dec(T.Tensor(np.zeros((5, 2, 3, 4))), (8, 12, 4))


def test_zero_tokens_zero_final_conv_gives_bias():
    cfg = SegDecoderConfig(in_channels=4, channels=(3,), upsample=((2, 2, 2),))
    dec = init_decoder(cfg, 0, zero_final=True)
    dec.params["head.bias"].data = np.array([0.25, -1.0], dtype=np.float32)
    out = dec(T.Tensor(np.zeros((4, 2, 2, 2), np.float32)), (4, 4, 4)).data
    assert np.array_equal(out[0], np.full((4, 4, 4), 0.25, np.float32))
    assert np.array_equal(out[1], np.full((4, 4, 4), -1.0, np.float32))


def test_decoder_gradient_wrt_patch_tokens(f64):
    cfg = SegDecoderConfig(in_channels=4, channels=(3, 2), upsample=((2, 2, 1), (2, 1, 1)))
    dec = init_decoder(cfg, 1)
    rng = np.random.default_rng(2)
    mask = rng.integers(0, 2, (8, 4, 3))

    def f(toks):
        F = assemble_token_volume(T.reshape(toks, (3, 4, 4)), (2, 2))
        return seg_loss(dec(F, (8, 4, 3)), mask, 2)

    rep = T.finite_difference_check(f, rng.standard_normal(48), tolerance=1e-4)
    assert rep.passed, rep.max_rel_error


# ---------------------------------------------------------------- losses

def test_perfect_prediction_loss_near_zero(f64):
    mask = np.random.default_rng(0).integers(0, 3, (4, 4, 2))
    logits = 40.0 * (one_hot(mask, 3) - 0.5)
    assert float(seg_loss(logits, mask, 3, eps=1e-12).data) < 1e-9


def test_half_overlap_dice_is_half():
    target = np.zeros((4, 4, 2), dtype=int)
    target[:2] = 1                       # 16 foreground voxels
    pred = np.zeros_like(target)
    pred[1:3] = 1                        # 16 voxels, half overlapping
    d = dice_per_class(one_hot(pred, 2, np.float64), one_hot(target, 2, np.float64), eps=1e-12)
    inter = np.logical_and(pred == 1, target == 1).sum()
    assert inter == 8
    assert abs(d[1] - 0.5) < 1e-9
    assert abs(1 - d[1] - 0.5) < 1e-9


def test_half_region_subset_dice_by_counting():
    target = np.zeros((4, 4, 2), dtype=int)
    target[:2] = 1
    pred = np.zeros_like(target)
    pred[:1] = 1
    d = dice_per_class(one_hot(pred, 2, np.float64), one_hot(target, 2, np.float64), eps=1e-12)
    assert abs(d[1] - 2 * 8 / (8 + 16)) < 1e-9


def test_uniform_prediction_cross_entropy_ln2(f64):
    mask = np.random.default_rng(3).integers(0, 2, (3, 3, 3))
    loss = float(seg_loss(np.zeros((2, 3, 3, 3)), mask, 2).data)
    p = np.full((2, 3, 3, 3), 0.5)
    dice = dice_per_class(p, one_hot(mask, 2, np.float64), 1e-5).mean()
    assert abs(loss - (1 - dice) - math.log(2)) < 1e-12


def test_seg_loss_bounds_and_errors():
    rng = np.random.default_rng(4)
    for _ in range(10):
        logits = rng.standard_normal((3, 4, 4, 2)) * 3
        mask = rng.integers(0, 3, (4, 4, 2))
        probs = np.exp(logits) / np.exp(logits).sum(0)
        d = dice_per_class(probs, one_hot(mask, 3, np.float64))
        assert ((d >= 0) & (d <= 1)).all()
        assert float(seg_loss(logits, mask, 3).data) >= 0
    with pytest.raises(ContractError):
        seg_loss(np.zeros((2, 2, 2, 2)), np.full((2, 2, 2), 2), 2)
    with pytest.raises(ContractError):
        seg_loss(np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 3)), 2)


def test_total_loss_examples():
    cls = T.Tensor(1.0)
    assert total_loss(cls, [T.Tensor(0.2), T.Tensor(0.4)], 0.0) is cls
    assert total_loss(cls, [], 1.0) is cls
    np.testing.assert_allclose(total_loss(cls, [T.Tensor(0.2), T.Tensor(0.4)], 1.0).data, 1.3, rtol=1e-6)
    with pytest.raises(ContractError):
        total_loss(cls, [], -1.0)


# ---------------------------------------------------------------- coupling with the pipeline

SMALL = BackboneConfig(image_size=(16, 16), patch_size=4, embed_dim=16, depth=2, num_heads=2)


def _batch(rng, n=2, S=3):
    return [[prepare_slices(Volume(rng.random((16, 16, S)).astype(np.float32)))] for _ in range(n)]


def test_decoder_does_not_touch_classification_path():
    w = init_random_backbone(SMALL, 0)
    with_dec = new_plugin(w, seed=2, decoder=True)
    without = new_plugin(w, seed=2)
    vol = Volume(np.random.default_rng(0).random((16, 16, 3)).astype(np.float32))
    a = classify_volume([vol], with_dec, w).logits.data
    b = classify_volume([vol], without, w).logits.data
    assert np.array_equal(a, b)


def test_unmasked_volumes_give_no_decoder_gradient():
    w = init_random_backbone(SMALL, 0)
    p = new_plugin(w, seed=0, decoder=True)
    rng = np.random.default_rng(1)
    batch = _batch(rng)
    mask = rng.integers(0, 2, (16, 16, 3))
    res = forward_batch(batch, p, w, return_seg=[0])
    loss_a = seg_loss(res.seg_logits[0], mask, 2)
    ga = T.backward(loss_a, wrt=p.decoder.parameters())
    # replacing the unmasked volume changes nothing for the decoder
    batch2 = [batch[0], _batch(rng, 1)[0]]
    res2 = forward_batch(batch2, p, w, return_seg=[0])
    gb = T.backward(seg_loss(res2.seg_logits[0], mask, 2), wrt=p.decoder.parameters())
    for x, y in zip(ga, gb):
        np.testing.assert_allclose(x, y, rtol=1e-5, atol=1e-7)


def test_seg_loss_alone_reaches_lora():
    w = init_random_backbone(SMALL, 0)
    p = new_plugin(w, seed=0, decoder=True)
    rng = np.random.default_rng(2)
    res = forward_batch(_batch(rng, 1), p, w, return_seg=True)
    loss = seg_loss(res.seg_logits[0], rng.integers(0, 2, (16, 16, 3)), 2)
    grads = T.backward(loss, wrt=p.param_groups()["lora"])
    assert any(np.abs(g).max() > 0 for g in grads)
    head_grads = T.backward(loss, wrt=p.head.parameters())
    assert all(not g.any() for g in head_grads)
