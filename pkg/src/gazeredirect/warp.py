"""Differentiable bilinear warping of images by dense flow fields.

A flow field is a batch x 2 x H x W tensor of pixel-unit displacements:
channel 0 is added to the row index, channel 1 to the column index.  The
output at (i, j) bilinearly samples the input at (i + flow0, j + flow1).

Sample points falling outside the closed box [0, H-1] x [0, W-1] are
illegal: the output pixel is 0 and no gradient flows through it.  There is
no edge clamping.  At exact integer coordinates the interpolation has a
derivative kink; the backward pass takes the right-hand subgradient
(left-hand at the top boundary row/column).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def _check_shapes(image, flow):
    if image.ndim != 4 or flow.ndim != 4:
        raise ValueError(f"expected 4-d image and flow, got {image.shape} and {flow.shape}")
    if flow.shape[1] != 2:
        raise ValueError(f"flow must have 2 channels, got shape {flow.shape}")
    if image.shape[0] != flow.shape[0] or image.shape[2:] != flow.shape[2:]:
        raise ValueError(
            f"image {image.shape} and flow {flow.shape} disagree on batch or spatial extents"
        )


def _sample_geometry(image, flow):
    """Integer corners, weights and validity mask for every sample point."""
    batch, _, h, w = image.shape
    grid_r = np.arange(h, dtype=image.dtype).reshape(1, h, 1)
    grid_c = np.arange(w, dtype=image.dtype).reshape(1, 1, w)
    rows = grid_r + flow[:, 0]
    cols = grid_c + flow[:, 1]
    valid = (rows >= 0) & (rows <= h - 1) & (cols >= 0) & (cols <= w - 1)

    safe_r = np.where(valid, rows, 0.0)
    safe_c = np.where(valid, cols, 0.0)
    r0 = np.minimum(np.floor(safe_r).astype(np.int64), max(h - 2, 0))
    c0 = np.minimum(np.floor(safe_c).astype(np.int64), max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = safe_r - r0
    fc = safe_c - c0
    bidx = np.arange(batch).reshape(batch, 1, 1)
    return bidx, (r0, r1, c0, c1), (fr, fc), valid


def bilinear_warp_forward(image, flow):
    """Pure forward warp on numpy arrays; returns the warped image."""
    _check_shapes(image, flow)
    bidx, (r0, r1, c0, c1), (fr, fc), valid = _sample_geometry(image, flow)
    imt = image.transpose(0, 2, 3, 1)  # gather per (b, i, j) across channels
    v00 = imt[bidx, r0, c0]
    v01 = imt[bidx, r0, c1]
    v10 = imt[bidx, r1, c0]
    v11 = imt[bidx, r1, c1]
    fr = fr[..., None]
    fc = fc[..., None]
    out = (
        v00 * (1 - fr) * (1 - fc)
        + v01 * (1 - fr) * fc
        + v10 * fr * (1 - fc)
        + v11 * fr * fc
    )
    out *= valid[..., None]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def bilinear_warp_backward(image, flow, upstream):
    """Analytic gradients of the warp w.r.t. image and flow.

    grad_image distributes the upstream gradient by the four bilinear
    weights; grad_flow uses the piecewise-linear derivative of the
    interpolation w.r.t. the sample coordinates.  Illegal positions
    contribute zero to both.
    """
    _check_shapes(image, flow)
    if upstream.shape != image.shape:
        raise ValueError(
            f"upstream gradient {upstream.shape} must match image {image.shape}"
        )
    bidx, (r0, r1, c0, c1), (fr, fc), valid = _sample_geometry(image, flow)
    up = upstream.transpose(0, 2, 3, 1) * valid[..., None]
    frx = fr[..., None]
    fcx = fc[..., None]

    grad_imt = np.zeros_like(image.transpose(0, 2, 3, 1))
    np.add.at(grad_imt, (bidx, r0, c0), up * (1 - frx) * (1 - fcx))
    np.add.at(grad_imt, (bidx, r0, c1), up * (1 - frx) * fcx)
    np.add.at(grad_imt, (bidx, r1, c0), up * frx * (1 - fcx))
    np.add.at(grad_imt, (bidx, r1, c1), up * frx * fcx)
    grad_image = np.ascontiguousarray(grad_imt.transpose(0, 3, 1, 2))

    imt = image.transpose(0, 2, 3, 1)
    v00 = imt[bidx, r0, c0]
    v01 = imt[bidx, r0, c1]
    v10 = imt[bidx, r1, c0]
    v11 = imt[bidx, r1, c1]
    d_row = (v10 - v00) * (1 - fcx) + (v11 - v01) * fcx
    d_col = (v01 - v00) * (1 - frx) + (v11 - v10) * frx
    grad_flow = np.stack(
        [(up * d_row).sum(axis=-1), (up * d_col).sum(axis=-1)], axis=1
    )
    return grad_image, grad_flow


def warp(image, flow):
    """Graph-recorded bilinear warp of a Tensor image by a Tensor flow field."""
    out = bilinear_warp_forward(image.data, flow.data)

    def backward(g):
        grad_image, grad_flow = bilinear_warp_backward(image.data, flow.data, g)
        if image.requires_grad:
            image._accumulate(grad_image)
        if flow.requires_grad:
            flow._accumulate(grad_flow)

    return Tensor._make(out, (image, flow), backward, "bilinear_warp")
