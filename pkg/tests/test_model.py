from __future__ import annotations

import numpy as np
import pytest
import torch

from mapfm.backbone import BackboneConfig, FeatureNeck, ImageBackbone
from mapfm.bev_encoder import BEVEncoder, BEVEncoderConfig, pillar_geometry
from mapfm.blocks import zero_residual_init_
from mapfm.core import BEVGridSpec, MapClass
from mapfm.decoder import (
    DecoderConfig,
    MapDecoder,
    denormalize_points,
    normalize_points,
    predictions_to_map,
)
from mapfm.heads import SegHead, arss_forward, aux_seg_forward, hard_masks
from mapfm.model import MapModel
from mapfm.scenes import make_camera_rig

torch.set_default_dtype(torch.float64)


@pytest.fixture(scope="module")
def rig():
    return make_camera_rig(num_cameras=2)


@pytest.fixture(scope="module")
def grid():
    return BEVGridSpec(30, 15, (-30.0, 30.0), (-15.0, 15.0), 2.0)


def small_backbone(**kw) -> BackboneConfig:
    base = dict(patch_size=8, embed_dim=16, num_blocks=2, num_heads=2)
    base.update(kw)
    return BackboneConfig(**base)


# ---------------------------------------------------------------------------
# backbone


def test_backbone_output_shape(rig):
    torch.manual_seed(0)
    cfg = BackboneConfig(patch_size=8, embed_dim=32, num_blocks=4, num_heads=4)
    trunk = ImageBackbone(cfg, (64, 128)).double()
    neck = FeatureNeck(cfg).double()
    out = neck(trunk(torch.rand(2, 3, 64, 128, dtype=torch.float64)))
    assert out.shape == (2, 32, 8, 16)


def test_backbone_concat_channels():
    cfg = BackboneConfig(
        patch_size=8, embed_dim=32, num_blocks=3, num_heads=4,
        aggregation="concat", tap_blocks=(1, 2, 3),
    )
    trunk = ImageBackbone(cfg, (32, 32)).double()
    taps = trunk(torch.rand(1, 3, 32, 32, dtype=torch.float64))
    assert len(taps) == 3
    assert torch.cat(taps, dim=1).shape[1] == 96
    neck = FeatureNeck(cfg).double()
    assert neck(taps).shape == (1, 32, 4, 4)


def test_backbone_multi_layer_cnn():
    cfg = small_backbone(aggregation="multi_layer_cnn", tap_blocks=(1, 2))
    trunk = ImageBackbone(cfg, (32, 32)).double()
    neck = FeatureNeck(cfg).double()
    out = neck(trunk(torch.rand(1, 3, 32, 32, dtype=torch.float64)))
    assert out.shape == (1, 16, 4, 4)


def test_backbone_zero_path():
    torch.manual_seed(0)
    cfg = small_backbone()
    trunk = ImageBackbone(cfg, (32, 32)).double()
    with torch.no_grad():
        trunk.pos_embed.zero_()
        for name, p in trunk.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    taps = trunk(torch.zeros(1, 3, 32, 32, dtype=torch.float64))
    # final norm of a zero vector with unit weight/zero bias is zero
    assert torch.allclose(taps[-1], torch.zeros_like(taps[-1]), atol=1e-12)


def test_backbone_indivisible_image():
    with pytest.raises(ValueError, match="divisible"):
        ImageBackbone(small_backbone(), (30, 33))


def test_backbone_config_validation():
    with pytest.raises(ValueError, match="aggregation"):
        BackboneConfig(aggregation="mean")
    with pytest.raises(ValueError, match="tap_blocks"):
        BackboneConfig(num_blocks=2, tap_blocks=(3,), aggregation="concat")
    with pytest.raises(ValueError, match="final block"):
        BackboneConfig(num_blocks=4, tap_blocks=(2,), aggregation="last_layer")
    assert BackboneConfig(num_blocks=4, aggregation="concat").tap_blocks == (2, 3, 4)


def test_freeze_policy_name_sets():
    cfg = small_backbone(freeze_policy="frozen", num_blocks=4)
    trunk = ImageBackbone(cfg, (32, 32))
    assert trunk.trainable_parameter_names() == set()

    cfg = small_backbone(freeze_policy="finetune_last", num_blocks=4)
    trunk = ImageBackbone(cfg, (32, 32))
    names = trunk.trainable_parameter_names()
    assert names
    assert all(n.startswith("block_4") or n.startswith("final_norm") for n in names)

    cfg = small_backbone(freeze_policy="full", num_blocks=4)
    trunk = ImageBackbone(cfg, (32, 32))
    assert trunk.trainable_parameter_names() == {n for n, _ in trunk.named_parameters()}


# ---------------------------------------------------------------------------
# bev encoder


def test_bilinear_weights_sum_to_one(grid, rig):
    geom = pillar_geometry(grid, rig[0], (-1.0, 0.0, 1.0), (8, 16))
    valid = geom["valid"]
    assert valid.any()
    sums = geom["weights"].sum(axis=-1)
    np.testing.assert_allclose(sums[valid], 1.0, atol=1e-12)


def test_bev_output_shape(grid, rig):
    torch.manual_seed(1)
    cfg = BEVEncoderConfig(bev_channels=16, num_refine_layers=1, num_heads=2)
    enc = BEVEncoder(cfg, grid, rig, feat_channels=16, feat_shape=(8, 16)).double()
    out = enc(torch.rand(2, 16, 8, 16, dtype=torch.float64))
    assert out.shape == (16, grid.rows, grid.cols)
    assert torch.isfinite(out).all()


def test_bev_unseen_cell_gets_bare_query(grid, rig):
    torch.manual_seed(2)
    cfg = BEVEncoderConfig(bev_channels=16, num_refine_layers=2, num_heads=2)
    enc = BEVEncoder(cfg, grid, rig, feat_channels=16, feat_shape=(8, 16)).double()
    zero_residual_init_(enc)  # refine layers become identity passthrough
    out = enc(torch.rand(2, 16, 8, 16, dtype=torch.float64))
    _, hit = enc.sample_pillars(torch.rand(2, 16, 8, 16, dtype=torch.float64))
    hit = hit.reshape(grid.rows, grid.cols)
    assert (~hit).any(), "test grid must contain cells no camera sees"
    queries = enc.query_embed.detach().transpose(0, 1).reshape(-1, grid.rows, grid.cols)
    np.testing.assert_allclose(
        out.detach()[:, ~hit].numpy(), queries[:, ~hit].numpy(), atol=1e-12
    )


def test_bev_duplicate_camera_equals_single(grid, rig):
    torch.manual_seed(3)
    twin = (rig[0], rig[0])
    cfg = BEVEncoderConfig(bev_channels=16, num_refine_layers=0, num_heads=2)
    enc2 = BEVEncoder(cfg, grid, twin, feat_channels=16, feat_shape=(8, 16)).double()
    enc1 = BEVEncoder(cfg, grid, (rig[0],), feat_channels=16, feat_shape=(8, 16)).double()
    feats = torch.rand(1, 16, 8, 16, dtype=torch.float64)
    mean2, hit2 = enc2.sample_pillars(torch.cat([feats, feats]))
    mean1, hit1 = enc1.sample_pillars(feats)
    assert torch.equal(hit1, hit2)
    np.testing.assert_allclose(mean1.numpy(), mean2.numpy(), atol=1e-12)


def test_bev_camera_permutation_invariant(grid, rig):
    torch.manual_seed(4)
    cfg = BEVEncoderConfig(bev_channels=16, num_refine_layers=1, num_heads=2)
    enc_a = BEVEncoder(cfg, grid, rig, feat_channels=16, feat_shape=(8, 16)).double()
    enc_b = BEVEncoder(cfg, grid, (rig[1], rig[0]), feat_channels=16, feat_shape=(8, 16)).double()
    enc_b.load_state_dict(enc_a.state_dict())
    feats = torch.rand(2, 16, 8, 16, dtype=torch.float64)
    out_a = enc_a(feats)
    out_b = enc_b(feats.flip(0))
    np.testing.assert_allclose(out_a.detach().numpy(), out_b.detach().numpy(), atol=1e-12)


def test_bev_feature_gradient_fd(grid, rig):
    torch.manual_seed(5)
    cfg = BEVEncoderConfig(bev_channels=8, num_refine_layers=1, num_heads=2)
    enc = BEVEncoder(cfg, grid, rig, feat_channels=8, feat_shape=(4, 8)).double()
    feats = torch.rand(2, 8, 4, 8, dtype=torch.float64, requires_grad=True)
    enc(feats).sum().backward()
    assert feats.grad is not None
    # check a handful of entries against central differences
    idx = [(0, 0, 2, 3), (1, 5, 1, 7), (0, 7, 3, 0)]
    h = 1e-6
    for pos in idx:
        with torch.no_grad():
            fp = feats.detach().clone()
            fp[pos] += h
            fm = feats.detach().clone()
            fm[pos] -= h
            fd = (enc(fp).sum() - enc(fm).sum()) / (2 * h)
        an = feats.grad[pos]
        rel = abs(float(an - fd)) / max(abs(float(an)), abs(float(fd)), 1e-6)
        assert rel < 1e-4


def test_pillar_heights_validation():
    with pytest.raises(ValueError, match="pillar"):
        BEVEncoderConfig(pillar_heights=())


# ---------------------------------------------------------------------------
# heads


def test_head_shapes_and_roles(grid):
    torch.manual_seed(6)
    bev = torch.rand(16, grid.rows, grid.cols, dtype=torch.float64)
    arss = SegHead(16, "arss").double()
    lines = SegHead(16, "bev_lines").double()
    pv = SegHead(16, "pv_lanes").double()
    assert arss_forward(bev, arss).shape == (2, grid.rows, grid.cols)
    assert aux_seg_forward(bev, "bev_lines", lines).shape == (3, grid.rows, grid.cols)
    feat = torch.rand(2, 16, 8, 16, dtype=torch.float64)
    out = aux_seg_forward(feat, "pv_lanes", pv, image_size=(64, 128))
    assert out.shape == (2, 1, 64, 128)
    with pytest.raises(ValueError, match="role"):
        arss_forward(bev, lines)
    with pytest.raises(ValueError):
        aux_seg_forward(bev, "arss", arss)


def test_head_zero_params_zero_logits(grid):
    bev = torch.rand(16, grid.rows, grid.cols, dtype=torch.float64)
    head = SegHead(16, "arss").double()
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    logits = head(bev)
    assert torch.equal(logits, torch.zeros_like(logits))
    probs = torch.sigmoid(logits)
    assert torch.allclose(probs, torch.full_like(probs, 0.5))
    assert hard_masks(logits).min() == 1  # p = 0.5 meets the >= 0.5 rule


def test_bilinear_upsample_constant():
    head = SegHead(4, "pv_lanes").double()
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
        head.conv2.bias.fill_(0.7)
    feat = torch.rand(1, 4, 8, 16, dtype=torch.float64)
    out = aux_seg_forward(feat, "pv_lanes", head, image_size=(64, 128))
    np.testing.assert_allclose(out.detach().numpy(), 0.7, atol=1e-12)


# ---------------------------------------------------------------------------
# decoder


def test_decoder_shapes(grid):
    torch.manual_seed(7)
    cfg = DecoderConfig(num_instances=6, points_per_element=4, num_layers=2, num_heads=2, channels=16)
    dec = MapDecoder(cfg, grid.rows * grid.cols).double()
    bev = torch.rand(16, grid.rows, grid.cols, dtype=torch.float64)
    out = dec(bev)
    assert out.num_layers == 2
    for logits, pts in zip(out.class_logits, out.points):
        assert logits.shape == (6, 3)
        assert pts.shape == (6, 4, 2)
        assert (pts > 0).all() and (pts < 1).all()
        assert torch.isfinite(logits).all()


def test_decoder_identity_gather(grid):
    torch.manual_seed(8)
    cfg = DecoderConfig(num_instances=5, points_per_element=3, num_layers=2, num_heads=2, channels=16)
    dec = MapDecoder(cfg, grid.rows * grid.cols).double()
    with torch.no_grad():
        dec.point_pos_embed.zero_()
    zero_residual_init_(dec.layers)
    bev = torch.rand(16, grid.rows, grid.cols, dtype=torch.float64)
    x = dec.instance_embed.unsqueeze(1) + dec.point_pos_embed.unsqueeze(0)
    memory = dec.memory_norm(bev.reshape(16, -1).transpose(0, 1))
    q = x.reshape(-1, 16)
    for layer in dec.layers:
        q = layer(q, memory, q, dec.bev_pos_embed)
    gathered = q.reshape(5, 3, 16).mean(dim=1)
    np.testing.assert_allclose(
        gathered.detach().numpy(), dec.instance_embed.detach().numpy(), atol=1e-12
    )


def test_decoder_instance_equivariance(grid):
    torch.manual_seed(9)
    cfg = DecoderConfig(num_instances=5, points_per_element=3, num_layers=2, num_heads=2, channels=16)
    dec = MapDecoder(cfg, grid.rows * grid.cols).double()
    bev = torch.rand(16, grid.rows, grid.cols, dtype=torch.float64)
    out1 = dec(bev)
    perm = torch.tensor([3, 0, 4, 1, 2])
    with torch.no_grad():
        dec.instance_embed.copy_(dec.instance_embed[perm])
    out2 = dec(bev)
    np.testing.assert_allclose(
        out2.final_points.detach().numpy(),
        out1.final_points.detach().numpy()[perm.numpy()],
        atol=1e-9,
    )
    np.testing.assert_allclose(
        out2.final_logits.detach().numpy(),
        out1.final_logits.detach().numpy()[perm.numpy()],
        atol=1e-9,
    )


def test_normalize_round_trip(grid, rng):
    pts = np.column_stack(
        [rng.uniform(-30, 30, size=50), rng.uniform(-15, 15, size=50)]
    )
    back = denormalize_points(normalize_points(pts, grid), grid)
    np.testing.assert_allclose(back, pts, atol=1e-12)
    np.testing.assert_allclose(
        denormalize_points(np.array([[0.5, 0.5]]), grid), [[0.0, 0.0]], atol=1e-12
    )


def test_predictions_to_map_threshold(grid):
    torch.manual_seed(10)
    cfg = DecoderConfig(num_instances=4, points_per_element=3, num_layers=1, num_heads=2, channels=16)
    dec = MapDecoder(cfg, grid.rows * grid.cols).double()
    out = dec(torch.rand(16, grid.rows, grid.cols, dtype=torch.float64))
    # doctor the logits: instance 0 confident divider, rest strongly negative
    logits = torch.full((4, 3), -20.0, dtype=torch.float64)
    logits[0, 0] = 20.0
    out.class_logits[-1] = logits
    sm = predictions_to_map(out, grid, 0.5)
    assert len(sm.elements) == 1
    elem, score = sm.elements[0]
    assert elem.class_label is MapClass.DIVIDER
    assert score == pytest.approx(1.0, abs=1e-6)

    sm_all = predictions_to_map(out, grid, 0.0)
    assert len(sm_all.elements) == 4
    scores = [s for _, s in sm_all.elements]
    assert scores == sorted(scores, reverse=True)
    # thresholding is monotone
    for t in (0.2, 0.6, 0.9):
        assert len(predictions_to_map(out, grid, t).elements) <= len(sm_all.elements)


def test_map_model_end_to_end(grid, rig):
    torch.manual_seed(11)
    model = MapModel(
        grid,
        rig,
        BackboneConfig(patch_size=8, embed_dim=16, num_blocks=1, num_heads=2),
        BEVEncoderConfig(bev_channels=16, num_refine_layers=1, num_heads=2),
        DecoderConfig(num_instances=8, points_per_element=4, num_layers=1, num_heads=2, channels=16),
    )
    images = torch.rand(2, 3, 64, 128, dtype=torch.float64)
    out = model(images)
    assert out.arss_logits.shape == (2, grid.rows, grid.cols)
    assert out.bev_line_logits.shape == (3, grid.rows, grid.cols)
    assert out.pv_logits.shape == (2, 1, 64, 128)
    assert out.decoder.final_points.shape == (8, 4, 2)
    assert out.bev_feature.shape == (16, grid.rows, grid.cols)


def test_trainable_parameters_respect_policy(grid, rig):
    torch.manual_seed(12)
    model = MapModel(
        grid,
        rig,
        BackboneConfig(patch_size=8, embed_dim=16, num_blocks=2, num_heads=2, freeze_policy="frozen"),
        BEVEncoderConfig(bev_channels=16, num_refine_layers=0, num_heads=2),
        DecoderConfig(num_instances=4, points_per_element=3, num_layers=1, num_heads=2, channels=16),
    )
    names = {n for n, _ in model.trainable_parameters()}
    assert all(not n.startswith("backbone.") for n in names)
    assert any(n.startswith("decoder.") for n in names)
    assert any(n.startswith("bev_encoder.") for n in names)
    total = {n for n, _ in model.named_parameters()}
    backbone = {n for n in total if n.startswith("backbone.")}
    assert names == total - backbone
