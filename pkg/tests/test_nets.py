import numpy as np
import pytest
from helpers import assert_close_rel, central_fd, rank_auc

from ssdd import numkern as nk
from ssdd.nets import (DDNet, FeaturePair, SegNetToy, ddnet_forward,
                       load_checkpoint, make_ddnet, mask_to_onehot,
                       save_checkpoint, seg_forward)


def small_ddnet(width=4, mask_ch=3, low_ch=2, high_ch=3, seed=0):
    return DDNet(np.random.default_rng(seed), mask_ch, low_ch, high_ch, width=width)


def random_feats(rng, low_ch=2, high_ch=3, size=8):
    return FeaturePair(rng.normal(size=(low_ch, size, size)),
                       rng.normal(size=(high_ch, size, size)))


# ---------------------------------------------------------------------------
# DD-Net basics

def test_ddnet_output_in_open_unit_interval():
    rng = np.random.default_rng(1)
    net = small_ddnet()
    d = ddnet_forward(net, random_feats(rng), nk.one_hot(
        rng.integers(0, 3, size=(8, 8)).astype(np.uint8), 3))
    assert d.shape == (8, 8)
    assert np.all(d > 0) and np.all(d < 1)


def test_ddnet_forward_is_pure():
    rng = np.random.default_rng(2)
    net = small_ddnet()
    feats = random_feats(rng)
    oh = nk.one_hot(rng.integers(0, 3, size=(8, 8)).astype(np.uint8), 3)
    assert np.array_equal(ddnet_forward(net, feats, oh),
                          ddnet_forward(net, feats, oh))


def test_ddnet_rejects_channel_mismatch():
    rng = np.random.default_rng(3)
    net = small_ddnet(mask_ch=3)
    bad = nk.one_hot(rng.integers(0, 5, size=(8, 8)).astype(np.uint8), 5)
    with pytest.raises(ValueError):
        ddnet_forward(net, random_feats(rng), bad)


def test_ddnet_rejects_resolution_mismatch():
    rng = np.random.default_rng(4)
    net = small_ddnet()
    oh = nk.one_hot(np.zeros((6, 6), dtype=np.uint8), 3)
    with pytest.raises(ValueError):
        ddnet_forward(net, random_feats(rng, size=8), oh)


# ---------------------------------------------------------------------------
# gradient checks (end to end)

def test_ddnet_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    net = small_ddnet(width=3)
    feats = random_feats(rng)
    m = (rng.random((8, 8)) > 0.5).astype(float)
    oh = nk.one_hot(rng.integers(0, 3, size=(8, 8)).astype(np.uint8), 3)

    def loss():
        d, _ = net.forward(feats, oh)
        return nk.bce(m, d)[0]

    d, cache = net.forward(feats, oh)
    _, grad_d = nk.bce(m, d)
    grads = net.backward(cache, grad_d)
    params = net.parameters()
    assert len(grads) == len(params)
    for p, g in zip(params, grads):
        assert_close_rel(g, central_fd(loss, p), 1e-3)


def test_segnet_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    net = SegNetToy(rng, class_count=2, widths=(2, 2, 2, 2))
    img = rng.uniform(0, 255, size=(8, 8, 3))
    m = rng.integers(0, 3, size=(4, 4)).astype(np.uint8)

    def loss():
        pm, ps, _, _ = net.forward(img)
        return nk.cross_entropy_seg(pm, m)[0] + 0.7 * nk.cross_entropy_seg(ps, m)[0]

    pm, ps, _, cache = net.forward(img)
    _, g_main = nk.cross_entropy_seg(pm, m)
    _, g_sub = nk.cross_entropy_seg(ps, m)
    enc_g, main_g, sub_g = net.backward(cache, g_main, 0.7 * g_sub)
    analytic = enc_g + main_g + sub_g
    params = net.parameters()
    assert len(analytic) == len(params)
    for p, g in zip(params, analytic):
        assert_close_rel(g, central_fd(loss, p), 1e-3)


def test_dd_only_update_leaves_encoder_untouched():
    rng = np.random.default_rng(7)
    seg = SegNetToy(rng, class_count=2, widths=(4, 4, 4, 4))
    dd = make_ddnet(rng, seg, width=4)
    img = rng.uniform(0, 255, size=(16, 16, 3))
    _, _, feats, _ = seg.forward(img)
    enc_before = [p.copy() for p in seg.enc_parameters()]

    mask = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
    m = (rng.random((8, 8)) > 0.5).astype(float)
    d, cache = dd.forward(feats, mask_to_onehot(mask, 2))
    _, grad_d = nk.bce(m, d)
    grads = dd.backward(cache, grad_d)
    nk.sgd_step(dd.parameters(), grads, nk.Schedule(0.1, 10), step=0)

    for before, after in zip(enc_before, seg.enc_parameters()):
        assert np.array_equal(before, after)
    assert any(not np.array_equal(b, a) for b, a in
               zip([np.zeros_like(p) for p in dd.parameters()], dd.parameters()))


# ---------------------------------------------------------------------------
# SegNetToy basics

def test_seg_forward_shapes_and_normalization():
    rng = np.random.default_rng(8)
    net = SegNetToy(rng, class_count=4)
    img = rng.uniform(0, 255, size=(16, 16, 3))
    p_main, p_sub, feats = seg_forward(net, img)
    assert p_main.shape == (5, 8, 8) and p_sub.shape == (5, 8, 8)
    assert np.max(np.abs(p_main.sum(axis=0) - 1.0)) < 1e-9
    assert np.max(np.abs(p_sub.sum(axis=0) - 1.0)) < 1e-9
    assert np.all(p_main > 0) and np.all(p_main < 1)
    assert feats.e_low.shape == (net.low_ch, 8, 8)
    assert feats.e_high.shape == (net.high_ch, 8, 8)


def test_seg_forward_deterministic_for_fixed_seed():
    img = np.random.default_rng(10).uniform(0, 255, size=(8, 8, 3))
    a = seg_forward(SegNetToy(np.random.default_rng(9), 2), img)
    b = seg_forward(SegNetToy(np.random.default_rng(9), 2), img)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_seg_forward_rejects_bad_dimensions():
    net = SegNetToy(np.random.default_rng(11), 2)
    with pytest.raises(ValueError):
        seg_forward(net, np.zeros((10, 8, 3)))


def test_main_and_sub_heads_have_disjoint_parameters():
    net = SegNetToy(np.random.default_rng(12), 3)
    for pm in net.main_parameters():
        for ps in net.sub_parameters():
            assert pm is not ps


# ---------------------------------------------------------------------------
# boundary-rule training: the net must learn where masks change

def boundary_pixels(mask):
    """Pixels with a 4-neighbor of another label."""
    b = np.zeros_like(mask, dtype=bool)
    b[:-1] |= mask[:-1] != mask[1:]
    b[1:] |= mask[1:] != mask[:-1]
    b[:, :-1] |= mask[:, :-1] != mask[:, 1:]
    b[:, 1:] |= mask[:, 1:] != mask[:, :-1]
    return b


def random_rect_mask(rng, size=16):
    m = np.zeros((size, size), dtype=np.uint8)
    y0, x0 = rng.integers(1, size - 6, size=2)
    hh, ww = rng.integers(4, 6, size=2)
    m[y0:y0 + hh, x0:x0 + ww] = 1
    return m


def test_ddnet_learns_boundary_difference_rule():
    rng = np.random.default_rng(13)
    seg = SegNetToy(rng, class_count=1, widths=(4, 4, 4, 4))
    dd = make_ddnet(rng, seg, width=8)

    samples = []
    for _ in range(40):
        img = rng.uniform(0, 255, size=(32, 32, 3))
        _, _, feats, _ = seg.forward(img)
        mask = random_rect_mask(rng)
        target = (~boundary_pixels(mask)).astype(float)
        samples.append((feats, mask_to_onehot(mask, 1), target))

    steps = 6 * len(samples)
    sched = nk.Schedule(base_lr=0.2, total_steps=steps)
    step = 0
    for _ in range(6):
        for feats, oh, target in samples:
            d, cache = dd.forward(feats, oh)
            _, grad_d = nk.bce(target, d)
            nk.sgd_step(dd.parameters(), dd.backward(cache, grad_d), sched, step)
            step += 1

    scores, labels = [], []
    for _ in range(10):
        img = rng.uniform(0, 255, size=(32, 32, 3))
        _, _, feats, _ = seg.forward(img)
        mask = random_rect_mask(rng)
        d = ddnet_forward(dd, feats, mask_to_onehot(mask, 1))
        scores.append(d.ravel())
        labels.append((~boundary_pixels(mask)).ravel())
    auc = rank_auc(np.concatenate(scores), np.concatenate(labels))
    assert auc > 0.9, f"held-out agreement AUC {auc:.3f} <= 0.9"


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    seg = SegNetToy(rng, class_count=2, widths=(2, 3, 4, 5), dtype=np.float32)
    dd = DDNet(rng, 3, 2, 5, width=4, dtype=np.float32)
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, {"enc": seg.enc_parameters(),
                           "head_main": seg.main_parameters(),
                           "dd0": dd.parameters()})
    loaded = load_checkpoint(path)
    assert list(loaded) == ["enc", "head_main", "dd0"]
    for got, want in zip(loaded["dd0"], dd.parameters()):
        assert np.array_equal(got, want.astype(np.float32))

    fresh = DDNet(np.random.default_rng(99), 3, 2, 5, width=4, dtype=np.float32)
    fresh.set_parameters(loaded["dd0"])
    for a, b in zip(fresh.parameters(), dd.parameters()):
        assert np.array_equal(a, b)


def test_checkpoint_truncated_file_is_an_error(tmp_path):
    rng = np.random.default_rng(15)
    dd = DDNet(rng, 3, 2, 3, width=2)
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, {"dd": dd.parameters()})
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:len(raw) // 2])
    with pytest.raises(OSError):
        load_checkpoint(path)


def test_checkpoint_bad_magic_is_an_error(tmp_path):
    path = str(tmp_path / "bogus.ckpt")
    open(path, "wb").write(b"NOTACKPT")
    with pytest.raises(OSError):
        load_checkpoint(path)


def test_set_parameters_validates_shapes():
    dd = DDNet(np.random.default_rng(16), 3, 2, 3, width=2)
    wrong = [np.zeros((1, 1)) for _ in dd.parameters()]
    with pytest.raises(ValueError):
        dd.set_parameters(wrong)
