"""Bilinear warp tests: identities, illegal-sample convention, gradients."""

import numpy as np
import pytest

from gazeredirect.gradcheck import check_gradients, max_relative_error, numeric_gradient
from gazeredirect.tensor import Tensor
from gazeredirect.warp import bilinear_warp_backward, bilinear_warp_forward, warp


def shift_oracle(image, dr, dc):
    """Brute-force integer pixel shift; out-of-range positions become 0."""
    b, c, h, w = image.shape
    out = np.zeros_like(image)
    for i in range(h):
        for j in range(w):
            si, sj = i + dr, j + dc
            if 0 <= si < h and 0 <= sj < w:
                out[:, :, i, j] = image[:, :, si, sj]
    return out


def test_zero_flow_identity():
    rng = np.random.default_rng(0)
    for shape in [(1, 1, 5, 5), (2, 3, 8, 6)]:
        img = rng.standard_normal(shape).astype(np.float32)
        flow = np.zeros((shape[0], 2) + shape[2:], dtype=np.float32)
        out = bilinear_warp_forward(img, flow)
        assert np.abs(out - img).max() <= 1e-6


def test_half_pixel_row_interpolation():
    # row [1, 2, 3] shifted by +0.5 columns: [1.5, 2.5, 0] with the last
    # sample at 2.5 > W-1 illegal
    img = np.array([[[[1.0, 2.0, 3.0]]]])
    flow = np.zeros((1, 2, 1, 3))
    flow[0, 1] = 0.5
    out = bilinear_warp_forward(img, flow)
    np.testing.assert_allclose(out[0, 0, 0], [1.5, 2.5, 0.0])


def test_integer_shift_matches_oracle_bitwise():
    rng = np.random.default_rng(1)
    img = rng.standard_normal((2, 2, 7, 6)).astype(np.float32)
    flow = np.zeros((2, 2, 7, 6), dtype=np.float32)
    flow[:, 0] = 1.0  # +1 row displacement
    out = bilinear_warp_forward(img, flow)
    expected = shift_oracle(img, 1, 0)
    assert (out == expected).all()
    assert (out[:, :, -1, :] == 0).all()  # boundary row zeroed


def test_shape_mismatch_errors():
    img = np.zeros((1, 1, 4, 4))
    with pytest.raises(ValueError, match="spatial|batch"):
        bilinear_warp_forward(img, np.zeros((1, 2, 4, 5)))
    with pytest.raises(ValueError, match="2 channels"):
        bilinear_warp_forward(img, np.zeros((1, 3, 4, 4)))


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(2)
    img = rng.standard_normal((1, 1, 4, 4))
    flow = rng.uniform(-0.4, 0.4, (1, 2, 4, 4))
    gi, gf = bilinear_warp_backward(img, flow, np.zeros_like(img))
    assert (gi == 0).all() and (gf == 0).all()


def test_constant_image_gives_zero_flow_gradient():
    img = np.full((1, 1, 5, 5), 3.25)
    flow = np.random.default_rng(3).uniform(0.1, 0.4, (1, 2, 5, 5))
    _, gf = bilinear_warp_backward(img, flow, np.ones_like(img))
    np.testing.assert_allclose(gf, 0.0, atol=1e-12)


def test_gradients_match_finite_differences():
    # flow offset 0.3 keeps samples off the integer-lattice kink
    for seed in range(5):
        rng = np.random.default_rng(seed)
        img = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True, dtype=np.float64)
        flow = Tensor(
            rng.uniform(-1.0, 1.0, (1, 2, 6, 6)) + 0.3, requires_grad=True, dtype=np.float64
        )
        errors = check_gradients(
            lambda t: (warp(t["img"], t["flow"]) ** 2).sum(), {"img": img, "flow": flow}
        )
        assert max(errors.values()) < 1e-3, (seed, errors)


def test_illegal_positions_block_gradient():
    img = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True, dtype=np.float64)
    flow_vals = np.zeros((1, 2, 3, 3))
    flow_vals[0, 0, 0, 0] = -5.0  # first pixel samples far outside
    flow = Tensor(flow_vals, requires_grad=True, dtype=np.float64)
    out = warp(img, flow)
    assert out.data[0, 0, 0, 0] == 0.0
    out.sum().backward()
    assert flow.grad[0, 0, 0, 0] == 0.0
    assert flow.grad[0, 1, 0, 0] == 0.0


def test_locality_of_pixel_influence():
    # perturbing one input pixel only changes outputs whose 4-neighbor
    # footprint includes it
    rng = np.random.default_rng(9)
    img = rng.standard_normal((1, 1, 6, 6))
    flow = np.full((1, 2, 6, 6), 0.4)
    base = bilinear_warp_forward(img, flow)
    bumped = img.copy()
    bumped[0, 0, 2, 3] += 1.0
    delta = np.abs(bilinear_warp_forward(bumped, flow) - base)[0, 0]
    changed = np.argwhere(delta > 0)
    for i, j in changed:
        r, c = i + 0.4, j + 0.4
        assert int(np.floor(r)) in (1, 2) or int(np.floor(r)) + 1 == 2
        assert int(np.floor(c)) in (2, 3) or int(np.floor(c)) + 1 == 3


def test_standalone_backward_agrees_with_numeric():
    rng = np.random.default_rng(4)
    img = rng.standard_normal((1, 1, 5, 5))
    flow = rng.uniform(-0.9, 0.9, (1, 2, 5, 5)) + 0.3
    upstream = rng.standard_normal((1, 1, 5, 5))
    gi, gf = bilinear_warp_backward(img, flow, upstream)

    tensors = {
        "img": Tensor(img, requires_grad=True, dtype=np.float64),
        "flow": Tensor(flow, requires_grad=True, dtype=np.float64),
    }
    func = lambda t: (warp(t["img"], t["flow"]) * upstream).sum()
    ni = numeric_gradient(func, tensors, "img")
    nf = numeric_gradient(func, tensors, "flow")
    assert max_relative_error(gi, ni) < 1e-3
    assert max_relative_error(gf, nf) < 1e-3
