import numpy as np
import pytest
import torch

from lia.core import ShapeError, finite_diff_check
from lia.warp import bilinear_warp, identity_grid, masked_warp, pixel_shift
from oracles import warp_bruteforce


def random_case(seed, c=3, h=9, w=11, flow_scale=0.4):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((c, h, w)).astype(np.float32)
    flow = (rng.uniform(-1, 1, (2, h, w)) * flow_scale).astype(np.float32)
    return feats, flow


def test_identity_grid_spans_minus_one_to_one():
    g = identity_grid(5, 7)
    assert g.shape == (2, 5, 7)
    assert g[0, 0, 0] == -1 and g[0, 0, -1] == 1
    assert g[1, 0, 0] == -1 and g[1, -1, 0] == 1


def test_zero_flow_is_exact_identity():
    feats = torch.randn(4, 16, 16)
    assert torch.equal(bilinear_warp(feats, torch.zeros(2, 16, 16)), feats)


def test_one_pixel_shift_with_border_clamp():
    h, w = 8, 10
    feats = torch.randn(2, h, w)
    flow = torch.zeros(2, h, w)
    flow[0] = pixel_shift(1.0, w)
    out = bilinear_warp(feats, flow).numpy()
    src = feats.numpy()
    for i in range(h):
        for j in range(w):
            expected = src[:, i, min(j + 1, w - 1)]
            np.testing.assert_allclose(out[:, i, j], expected, atol=1e-6)


def test_half_pixel_shift_is_neighbour_mean():
    h, w = 6, 12
    feats = torch.randn(3, h, w)
    flow = torch.zeros(2, h, w)
    flow[0] = pixel_shift(0.5, w)
    out = bilinear_warp(feats, flow).numpy()
    src = feats.numpy()
    for j in range(w - 1):
        np.testing.assert_allclose(out[:, :, j], 0.5 * (src[:, :, j] + src[:, :, j + 1]), atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_matches_bruteforce_oracle(seed):
    feats, flow = random_case(seed, flow_scale=1.3)
    got = bilinear_warp(torch.from_numpy(feats), torch.from_numpy(flow)).numpy()
    assert np.abs(got - warp_bruteforce(feats, flow)).max() <= 1e-6 * max(1, np.abs(feats).max())


def test_batched_flow_and_features():
    feats, flow = random_case(3)
    f2, fl2 = random_case(4)
    out = bilinear_warp(torch.from_numpy(np.stack([feats, f2])), torch.from_numpy(np.stack([flow, fl2])))
    assert torch.equal(out[0], bilinear_warp(torch.from_numpy(feats), torch.from_numpy(flow)))
    assert torch.equal(out[1], bilinear_warp(torch.from_numpy(f2), torch.from_numpy(fl2)))


def test_extent_mismatch_rejected():
    with pytest.raises(ShapeError, match="extent"):
        bilinear_warp(torch.zeros(1, 8, 8), torch.zeros(2, 8, 7))


def test_linear_in_features():
    x, flow = random_case(5)
    y, _ = random_case(6)
    x, y, flow = map(torch.from_numpy, (x, y, flow))
    a, b = 0.7, -1.9
    lhs = bilinear_warp(a * x + b * y, flow)
    rhs = a * bilinear_warp(x, flow) + b * bilinear_warp(y, flow)
    assert (lhs - rhs).abs().max() <= 1e-6 * float(rhs.abs().max())


def _probe_flow(rng, h, w):
    """Flow whose sample points stay >= 1e-2 px away from integer grid crossings."""
    frac = rng.uniform(0.05, 0.95, (2, h, w))
    whole = rng.integers(-2, 3, (2, h, w))
    px = whole + frac
    return np.stack([px[0] * 2 / (w - 1), px[1] * 2 / (h - 1)])


@pytest.mark.parametrize("seed", range(10))
def test_gradient_wrt_flow_and_features(seed):
    rng = np.random.default_rng(seed)
    h, w = 6, 7
    feats = torch.from_numpy(rng.standard_normal((2, h, w)))
    # sample points kept inside the image so border clamping never engages
    flow = _probe_flow(rng, h, w)
    cols = np.arange(w)[None, :] + flow[0] * (w - 1) / 2
    rows = np.arange(h)[:, None] + flow[1] * (h - 1) / 2
    flow[0][(cols < 0.05) | (cols > w - 1.05)] = 0.31 * 2 / (w - 1)
    flow[1][(rows < 0.05) | (rows > h - 1.05)] = 0.27 * 2 / (h - 1)
    weights = torch.from_numpy(rng.standard_normal((2, h, w)))
    op = lambda f, fl: bilinear_warp(f, fl) * weights.to(f.dtype)
    # step 1e-3 in normalized units is < 1e-2 px, so probes never cross a grid line
    assert finite_diff_check(op, [feats, torch.from_numpy(flow)], step=1e-3) <= 1e-3


def test_round_trip_on_smooth_image():
    h = w = 32
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = torch.from_numpy(np.stack([np.sin(3 * xx) * np.cos(2 * yy), xx * yy]).astype(np.float32))
    flow = torch.zeros(2, h, w)
    flow[0] = pixel_shift(0.6, w)
    flow[1] = pixel_shift(-0.4, h)
    back = bilinear_warp(bilinear_warp(img, flow), -flow)
    interior = (slice(None), slice(3, -3), slice(3, -3))
    assert (back[interior] - img[interior]).abs().mean() <= 1e-2


def test_masked_warp_cases():
    feats, flow = random_case(7)
    feats, flow = torch.from_numpy(feats), torch.from_numpy(flow)
    h, w = feats.shape[1:]
    assert torch.equal(masked_warp(feats, flow, torch.ones(1, h, w)), bilinear_warp(feats, flow))
    assert torch.equal(masked_warp(feats, flow, torch.zeros(1, h, w)), torch.zeros_like(feats))


@pytest.mark.parametrize("seed", range(5))
def test_masked_warp_two_stage_oracle(seed):
    feats, flow = random_case(seed + 20)
    mask = np.random.default_rng(seed).uniform(0, 1, (1,) + feats.shape[1:]).astype(np.float32)
    got = masked_warp(*(torch.from_numpy(a) for a in (feats, flow, mask))).numpy()
    ref = warp_bruteforce(feats, flow) * mask.astype(np.float64)
    assert np.abs(got - ref).max() <= 1e-6 * max(1, np.abs(feats).max())


def test_masked_warp_rejects_out_of_range_mask():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        masked_warp(torch.zeros(1, 4, 4), torch.zeros(2, 4, 4), torch.full((1, 4, 4), 1.5))
