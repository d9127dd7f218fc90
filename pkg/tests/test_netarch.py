import numpy as np
import pytest

from deskdet import autodiff as ad
from deskdet.boxgeom import Box, Detection
from deskdet.netarch import (INPUT_MEAN, Detector, ModelConfig, Proposal, RFEBlock, flatten_cls, gt_levels,
                             image_to_feature, rfe_block, sample_fsm_proposals)

from helpers import bilinear_oracle, conv2d_loops, iou_oracle, jitter_biases, param_gradcheck, random_boxes

TOY = dict(levels=((2, 4), (3, 8)), stage_channels=(8, 8), fpn_channels=8, head_depth=1, fsm_channels=8)


def toy(**kw):
    return ModelConfig(**{**TOY, **kw})


# -- config ---------------------------------------------------------------------

def test_config_rejects_bad_strides_and_channels():
    with pytest.raises(ValueError):
        ModelConfig(levels=((2, 8), (3, 4), (4, 16)))
    with pytest.raises(ValueError):
        ModelConfig(fpn_channels=10, rfe_enabled=True)
    ModelConfig(fpn_channels=10, rfe_enabled=False)


# -- pyramid ------------------------------------------------------------------------

def test_feature_extents():
    m = Detector(ModelConfig(), seed=0)
    feats = m.build_fpn(np.zeros((1, 3, 64, 64), np.float32))
    assert [f.shape[2:] for f in feats.pyramid] == [(16, 16), (8, 8), (4, 4)]
    assert [f.shape[2:] for f in feats.lateral] == [(16, 16), (8, 8), (4, 4)]


def test_indivisible_extent_rejected():
    with pytest.raises(ValueError, match="divisible"):
        Detector(ModelConfig()).build_fpn(np.zeros((1, 3, 60, 64)))


def test_mean_input_gives_zero_features():
    # inputs are centred before the backbone, so a constant image at the mean is the zero signal
    m = Detector(ModelConfig(), seed=3)
    feats = m.build_fpn(np.full((1, 3, 32, 32), INPUT_MEAN))
    for f in feats.lateral + feats.pyramid:
        assert not np.any(f.data)


def test_top_down_matches_manual_replay():
    m = Detector(toy(), seed=1)
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(1, 3, 16, 16))
    with ad.precision(np.float64):
        for p in m.parameters():
            p.data = p.data.astype(np.float64)
        feats = m.build_fpn(img)

    def conv(layer, x, relu):
        y = conv2d_loops(x, layer.weight.data, layer.bias.data, layer.stride, layer.padding)
        return np.maximum(y, 0) if relu else y

    x = img - INPUT_MEAN
    for layer in m.stem:
        x = conv(layer, x, True)
    c = []
    for stage in m.stages:
        for layer in stage:
            x = conv(layer, x, True)
        c.append(x)
    lat = [conv(layer, ci, False) for layer, ci in zip(m.lateral, c)]
    up = np.repeat(np.repeat(lat[1], 2, axis=2), 2, axis=3)
    p2 = conv(m.smooth[0], lat[0] + up, False)
    p3 = conv(m.smooth[1], lat[1], False)
    np.testing.assert_allclose(feats.pyramid[0].data, p2, atol=1e-10)
    np.testing.assert_allclose(feats.pyramid[1].data, p3, atol=1e-10)


# -- RFE ----------------------------------------------------------------------------

def test_rfe_zero_in_zero_out():
    blk = RFEBlock("r", 8)
    out = rfe_block(ad.Tensor(np.zeros((8, 5, 7))), blk)
    assert out.shape == (8, 5, 7) and not np.any(out.data)


@pytest.mark.parametrize("c", [8, 16])
@pytest.mark.parametrize("hw", [(1, 1), (3, 9), (6, 4)])
def test_rfe_shape_preserving(c, hw):
    x = np.random.default_rng(c).normal(size=(c, *hw))
    assert rfe_block(ad.Tensor(x), RFEBlock("r", c)).shape == (c, *hw)


def test_rfe_rejects_indivisible_channels():
    with pytest.raises(ValueError):
        RFEBlock("r", 6)
    with pytest.raises(ValueError):
        rfe_block(ad.Tensor(np.zeros((4, 3, 3))), RFEBlock("r", 8))


def test_rfe_every_branch_kernel_live_and_correct():
    rng = np.random.default_rng(5)
    with ad.precision(np.float64):
        blk = RFEBlock("r", 8, seed=2)
        jitter_biases([p for _, p in blk.parameters()], rng)
        x = ad.Tensor(rng.normal(size=(1, 8, 6, 6)))
        r = ad.Tensor(rng.normal(size=(1, 8, 6, 6)))
        loss = lambda: ad.tsum(ad.mul(blk(x), r))  # noqa: E731
        loss().backward()
        for rect in blk.rect:
            assert np.any(rect.weight.grad != 0), rect.weight.name
        assert param_gradcheck([p for _, p in blk.parameters()], loss, rng) < 1e-3


# -- heads ----------------------------------------------------------------------------

@pytest.mark.parametrize("rfe", [True, False])
def test_head_shapes(rfe):
    cfg = ModelConfig(rfe_enabled=rfe)
    m = Detector(cfg)
    res = m.forward(np.zeros((1, 3, 32, 32)), stc_levels=(2, 3), str_levels=(3, 4))
    by = {h.level: h for h in res.heads}
    assert by[2].cls2.shape == (1, 2, 8, 8)
    assert by[2].reg2.shape == (1, 8, 8, 8)
    assert by[2].cls1.shape == (1, 2, 8, 8) and by[2].reg1 is None
    assert by[3].cls1 is not None and by[3].reg1 is not None
    assert by[4].cls1 is None and by[4].reg1.shape == (1, 8, 2, 2)


def test_anchor_count_equals_logit_count():
    m = Detector(ModelConfig())
    res = m.forward(np.zeros((2, 3, 64, 32)))
    for h, a in zip(res.heads, res.anchors):
        assert flatten_cls(h.cls2).shape[1] == len(a)


def test_step_classification_shares_parameters():
    m = Detector(ModelConfig())
    res = m.forward(np.random.default_rng(0).uniform(size=(1, 3, 32, 32)), stc_levels=(2,))
    head = res.heads[0]
    ad.tsum(head.cls1).backward()
    pred = m.cls_subnet.pred["pred"]
    assert pred.weight.grad is not None and np.any(pred.weight.grad)
    # the step-2 map at the same level came from the very same tensors
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len(set(names))
    assert [n for n in names if n.startswith("cls.")] == [n for n, _ in m.cls_subnet.parameters()]


def test_initialisation_independent_of_optional_modules():
    a = dict(Detector(ModelConfig(fsm_enabled=True), seed=7).named_parameters())
    b = dict(Detector(ModelConfig(fsm_enabled=False), seed=7).named_parameters())
    assert set(a) - set(b) and all(n.startswith("fsm.") for n in set(a) - set(b))
    for n in b:
        np.testing.assert_array_equal(a[n].data, b[n].data)


def test_seeds_change_weights():
    a = Detector(ModelConfig(), seed=0).state_dict()
    b = Detector(ModelConfig(), seed=1).state_dict()
    assert any(not np.array_equal(a[n], b[n]) for n in a if n.endswith("weight"))


def test_toy_model_global_gradient():
    rng = np.random.default_rng(11)
    with ad.precision(np.float64):
        m = Detector(toy(step1_grad_scale=1.0), seed=4)
        jitter_biases(m.parameters(), rng)
        img = rng.uniform(size=(1, 3, 16, 16))
        props = [Proposal((1.0, 2.0, 9.0, 12.0), 2, 1), Proposal((3.0, 0.0, 15.0, 15.0), 3, 0)]
        weights = None

        def loss():
            nonlocal weights
            res = m.forward(img, stc_levels=(2, 3), str_levels=(2, 3))
            terms = [t for h in res.heads for t in (h.cls1, h.reg1, h.cls2, h.reg2)]
            terms.append(m.fsm_forward(res.features, props))
            if weights is None:
                weights = [rng.normal(size=t.shape) for t in terms]
            total = ad.tsum(ad.mul(terms[0], ad.Tensor(weights[0])))
            for t, w in zip(terms[1:], weights[1:]):
                total = ad.add(total, ad.tsum(ad.mul(t, ad.Tensor(w))))
            return total

        assert param_gradcheck(m.parameters(), loss, rng, samples=3) < 1e-3


def test_step1_gradient_scaled_into_shared_features():
    rng = np.random.default_rng(12)
    img = rng.uniform(size=(1, 3, 16, 16))
    grads = {}
    for scale in (1.0, 0.25):
        with ad.precision(np.float64):
            m = Detector(toy(step1_grad_scale=scale), seed=4)
            res = m.forward(img, str_levels=(2, 3))
            w = [np.random.default_rng(0).normal(size=h.reg1.shape) for h in res.heads]
            total = ad.tsum(ad.mul(res.heads[0].reg1, ad.Tensor(w[0])))
            total = ad.add(total, ad.tsum(ad.mul(res.heads[1].reg1, ad.Tensor(w[1]))))
            total.backward()
            grads[scale] = {n: p.grad for n, p in m.named_parameters() if p.grad is not None}
    full, part = grads[1.0], grads[0.25]
    for n in full:
        if n.startswith("box1."):
            np.testing.assert_allclose(part[n], full[n], rtol=1e-12)
        else:
            np.testing.assert_allclose(part[n], 0.25 * full[n], rtol=1e-10, atol=1e-14)
    with pytest.raises(ValueError):
        toy(step1_grad_scale=1.5)


# -- checkpoints --------------------------------------------------------------------

def test_topology_mismatch_rejected(tmp_path):
    Detector(ModelConfig(rfe_enabled=True)).save(tmp_path / "a.ckpt")
    with pytest.raises(ValueError, match="topology mismatch"):
        Detector.from_checkpoint(tmp_path / "a.ckpt", ModelConfig(rfe_enabled=False))
    Detector(ModelConfig(fpn_channels=32)).save(tmp_path / "b.ckpt")
    with pytest.raises(ValueError, match="topology mismatch"):
        Detector.from_checkpoint(tmp_path / "b.ckpt", ModelConfig())


def test_fsm_weights_optional_when_loading(tmp_path):
    src = Detector(ModelConfig(fsm_enabled=True), seed=3)
    src.save(tmp_path / "m.ckpt")
    m = Detector.from_checkpoint(tmp_path / "m.ckpt", ModelConfig(fsm_enabled=False))
    for n, t in m.named_parameters():
        np.testing.assert_array_equal(t.data, src.state_dict()[n])


# -- FSM ------------------------------------------------------------------------------

def test_roi_align_constant_map():
    f = ad.Tensor(np.full((1, 3, 6, 6), 2.5))
    out = ad.roi_align(f, np.array([[0.3, 0.7, 4.1, 5.2]]), np.array([0]), 5)
    assert out.shape == (1, 3, 5, 5)
    np.testing.assert_allclose(out.data, 2.5, atol=1e-6)


def test_roi_align_full_extent_vs_bilinear():
    rng = np.random.default_rng(2)
    c, h, w = 3, 7, 9
    feat = rng.normal(size=(1, c, h, w))
    box_img = np.array([[0.0, 0.0, w * 4.0, h * 4.0]])  # full map at stride 4
    rois = image_to_feature(box_img, 4)
    with ad.precision(np.float64):
        out = ad.roi_align(ad.Tensor(feat), rois, np.array([0]), 5).data[0]
    x1, y1, x2, y2 = rois[0]
    for i in range(5):
        for j in range(5):
            y = y1 + (i + 0.5) * (y2 - y1) / 5
            x = x1 + (j + 0.5) * (x2 - x1) / 5
            np.testing.assert_allclose(out[:, i, j], bilinear_oracle(feat[0], x, y), atol=1e-5)


def test_fsm_one_logit_per_proposal_in_order():
    m = Detector(ModelConfig(fsm_channels=8), seed=0)
    feats = m.build_fpn(np.random.default_rng(0).uniform(size=(2, 3, 32, 32)))
    props = [Proposal((1, 1, 9, 9), 4, 1, 1), Proposal((0, 0, 30, 30), 2, 0, 0), Proposal((4, 4, 8, 12), 3, 1, 1)]
    out = m.fsm_forward(feats, props)
    assert out.shape == (3,)
    for k, p in enumerate(props):
        np.testing.assert_allclose(m.fsm_forward(feats, [p]).data, out.data[k:k + 1], rtol=1e-5, atol=1e-6)


def test_fsm_rejects_degenerate_and_disabled():
    m = Detector(ModelConfig(fsm_channels=8))
    feats = m.build_fpn(np.zeros((1, 3, 32, 32)))
    with pytest.raises(ValueError, match="zero-area"):
        m.fsm_forward(feats, [Proposal((3, 3, 3, 9), 2, 1)])
    with pytest.raises(RuntimeError):
        Detector(ModelConfig(fsm_enabled=False)).fsm_forward(feats, [Proposal((0, 0, 4, 4), 2, 1)])


def test_fsm_proposals_without_detections():
    gts = np.array([[0, 0, 10, 10], [20, 20, 40, 40], [50, 5, 60, 30]], float)
    props = sample_fsm_proposals([], gts, np.array([2, 3, 2]))
    assert len(props) == 3
    assert all(p.label == 1 for p in props)
    assert [p.level for p in props] == [2, 3, 2]


def test_fsm_proposal_cap():
    # 600 disjoint unit boxes far from the single gt survive NMS as negatives
    xs, ys = np.meshgrid(np.arange(30) * 2.0, np.arange(20) * 2.0)
    boxes = np.stack([xs.ravel(), ys.ravel(), xs.ravel() + 1, ys.ravel() + 1], 1) + 200
    dets = [Detection(Box(*b), 0.5, level=2) for b in boxes]
    props = sample_fsm_proposals(dets, np.array([[0, 0, 10, 10.0]]), np.array([2]))
    assert len(props) == 512
    assert props[0].label == 1 and props[0].box == (0, 0, 10, 10)


def test_fsm_labels_match_bruteforce():
    rng = np.random.default_rng(9)
    for _ in range(100):
        gts = random_boxes(rng, int(rng.integers(0, 4)), hi=60, min_side=8, max_side=30)
        boxes = random_boxes(rng, int(rng.integers(0, 25)), hi=60, min_side=4, max_side=30)
        dets = [Detection(Box(*b), float(s), level=3) for b, s in zip(boxes, rng.uniform(size=len(boxes)))]
        props = sample_fsm_proposals(dets, gts, np.full(len(gts), 2))
        for g in gts:
            assert any(p.box == tuple(g) for p in props)
        for p in props:
            best = max((iou_oracle(p.box, g) for g in gts), default=0.0)
            assert not 0.4 <= best < 0.7
            assert p.label == int(best >= 0.7)


def test_gt_levels_pick_best_anchor_level():
    m = Detector(ModelConfig())
    anchors = m.anchors(64, 64)
    lv = gt_levels(np.array([[0, 0, 9, 11], [0, 0, 40, 50.0]]), anchors)
    assert list(lv) == [2, 4]
