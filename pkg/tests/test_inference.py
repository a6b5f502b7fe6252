import numpy as np
import pytest
import torch

from locseg.inference import (
    PipelineOutput,
    gt_localised_segment,
    localise,
    pair_runs,
    prepare_input,
    segment_whole,
    sliding_window_segment,
    two_stage_segment,
)
from locseg.unet3d import UNetConfig, init_params
from locseg.volume_ops import (
    BBox3,
    bounding_box,
    expand_bbox,
    resize_volume,
    scale_bbox,
)


class ThresholdNet(torch.nn.Module):
    """Foreground wherever the (unstandardised) input exceeds ``level``."""

    def __init__(self, level=0.5, patch_size=(8, 8, 8), depth=0):
        super().__init__()
        self.config = UNetConfig(base_channels=8, depth=depth, patch_size=patch_size, zscore=False)
        self.dummy = torch.nn.Parameter(torch.zeros(1))
        self.level = level
        self.calls = []

    def forward(self, x):
        self.calls.append(tuple(x.shape[2:]))
        fg = (x[:, :1] > self.level).to(x.dtype) * 20 - 10
        return torch.cat([-fg, fg], dim=1)


class ZeroNet(ThresholdNet):
    def forward(self, x):
        self.calls.append(tuple(x.shape[2:]))
        return torch.zeros((x.shape[0], 2) + tuple(x.shape[2:]), dtype=x.dtype)


def _sphere(shape, centre, r):
    g = np.ogrid[tuple(slice(0, s) for s in shape)]
    return (sum((a - c) ** 2 for a, c in zip(g, centre)) <= r * r).astype(np.uint8)


def test_sliding_window_single_patch_equals_forward():
    net = init_params(UNetConfig(base_channels=8, depth=2, patch_size=(8, 16, 16)), 0)
    vol = np.random.default_rng(0).standard_normal((8, 16, 16)).astype(np.float32)
    x = prepare_input(vol, net.config)
    with torch.no_grad():
        direct = net(torch.from_numpy(x[None]))[0].argmax(0).numpy()
    np.testing.assert_array_equal(sliding_window_segment(net, vol, (8, 16, 16)), direct)


def test_sliding_window_shape_and_every_voxel_once():
    net = ThresholdNet()
    vol = np.random.default_rng(1).random((13, 20, 9)).astype(np.float32)
    out = sliding_window_segment(net, vol, (8, 8, 8))
    assert out.shape == vol.shape
    np.testing.assert_array_equal(out, (vol > 0.5).astype(np.uint8))
    # tiles: depth 2 (0, 5), height 3 (0, 8, 12), width 2 (0, 1)
    assert len(net.calls) == 2 * 3 * 2


def test_sliding_window_large_volume_shape():
    net = ZeroNet(patch_size=(64, 256, 256))
    vol = np.zeros((128, 512, 512), dtype=np.float32)
    out = sliding_window_segment(net, vol, (64, 256, 256))
    assert out.shape == (128, 512, 512) and not out.any()
    assert len(net.calls) == 8


def test_sliding_window_small_volume_padded():
    net = ThresholdNet()
    vol = np.ones((3, 5, 7), dtype=np.float32)
    out = sliding_window_segment(net, vol, (8, 8, 8))
    assert out.shape == (3, 5, 7) and out.all()
    assert net.calls == [(8, 8, 8)]


def test_segment_whole_pads_to_divisor():
    net = ThresholdNet(depth=2)
    vol = np.ones((5, 6, 7), dtype=np.float32)
    out = segment_whole(net, vol)
    assert out.shape == vol.shape and out.all()
    assert net.calls == [(8, 8, 8)]


def _case(shape=(30, 40, 40), centre=(15, 20, 22), r=4):
    lab = _sphere(shape, centre, r)
    return lab.astype(np.float32), lab


def test_gt_localised_oracle_net_gives_perfect_dice():
    from locseg.evaluation_stats import dice

    vol, lab = _case()
    out = gt_localised_segment(ThresholdNet(patch_size=(32, 32, 32)), vol, lab, margin=3)
    assert dice(out.mask, lab) == 1.0
    assert out.crop_bbox == expand_bbox(bounding_box(lab), 3)
    assert not out.used_fallback


def test_gt_localised_edge_organ_zero_filled():
    vol, lab = _case(centre=(2, 20, 20), r=3)
    out = gt_localised_segment(ThresholdNet(patch_size=(40, 40, 40)), vol, lab, margin=15)
    assert out.mask.shape == vol.shape
    assert out.crop_bbox[0][0] < 0


def test_gt_localised_output_inside_crop():
    vol, lab = _case()
    noisy = vol + (np.random.default_rng(0).random(vol.shape) > 0.9)
    out = gt_localised_segment(ThresholdNet(patch_size=(32, 32, 32)), noisy, lab, margin=2)
    inside = np.zeros_like(out.mask)
    inside[tuple(slice(max(lo, 0), hi) for lo, hi in out.crop_bbox)] = 1
    assert not (out.mask & (1 - inside)).any()


def test_gt_localised_empty_label():
    with pytest.raises(ValueError):
        gt_localised_segment(ThresholdNet(), np.zeros((4, 4, 4)), np.zeros((4, 4, 4)))


def test_two_stage_matches_gt_region_with_oracle_localiser():
    vol, lab = _case()
    loc, organ = ThresholdNet(patch_size=(16, 32, 32)), ThresholdNet(patch_size=(32, 32, 32))
    two = two_stage_segment(loc, organ, vol, margin=3)
    gt = gt_localised_segment(organ, vol, lab, margin=3)
    assert not two.used_fallback
    small = resize_volume(lab, (1 / 3, 0.5, 0.5), "label")
    expected = expand_bbox(scale_bbox(bounding_box(small), small.shape, lab.shape), 3)
    assert two.crop_bbox == expected
    # agreement up to one low-resolution voxel per side
    for (a, b), (c, d), step in zip(two.crop_bbox, gt.crop_bbox, (3, 2, 2)):
        assert abs(a - c) <= step and abs(b - d) <= step
    np.testing.assert_array_equal(two.mask, gt.mask)


def test_two_stage_keeps_largest_region_only():
    vol, lab = _case(shape=(30, 60, 60), centre=(15, 15, 15), r=5)
    vol = vol + _sphere(vol.shape, (15, 48, 48), 2)
    loc = ThresholdNet(patch_size=(16, 32, 32))
    out = two_stage_segment(loc, ThresholdNet(patch_size=(32, 32, 32)), vol, margin=2)
    assert out.mask[15, 15, 15] == 1 and out.mask[15, 48, 48] == 0


def test_two_stage_fallback_on_empty_localisation():
    vol, _ = _case()
    organ = ThresholdNet(patch_size=(16, 16, 16))
    out = two_stage_segment(ZeroNet(patch_size=(16, 16, 16)), organ, vol, margin=3)
    assert out.used_fallback and out.crop_bbox is None
    assert out.mask.shape == vol.shape
    np.testing.assert_array_equal(out.mask, (vol > 0.5).astype(np.uint8))


def test_localise_none_when_empty():
    assert localise(ZeroNet(), np.zeros((9, 8, 8))) is None


def test_pair_runs():
    assert pair_runs(list("abc"), [1, 2, 3]) == [("a", 1), ("b", 2), ("c", 3)]
    assert pair_runs(["L"], ["O"]) == [("L", "O")]
    with pytest.raises(ValueError):
        pair_runs(list(range(10)), list(range(9)))


def test_pipeline_determinism():
    net = init_params(UNetConfig(base_channels=8, depth=2, patch_size=(8, 16, 16)), 0)
    vol = np.random.default_rng(3).standard_normal((12, 20, 20)).astype(np.float32)
    a = sliding_window_segment(net, vol, (8, 16, 16))
    b = sliding_window_segment(net, vol, (8, 16, 16))
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0, 1}
