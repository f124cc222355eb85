"""The trainable networks: coarse encoder-decoder, residual generator,
and the two-headed discriminator.

Image tensors are batch x channel x H x W in [-1, 1].  The condition
tensor (numeric angle difference plus two gazemaps) is injected at every
decoder resolution; the head pose enters the encoder and the generator as
an extra constant plane normalized by 30 degrees.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .gazemap import CONDITION_CHANNELS, condition_at_scale
from .tensor import Tensor, concat, conv2d, resample_nearest
from .warp import warp

LEAKY_SLOPE = 0.2


@dataclass
class ModelConfig:
    image_size: int = 32
    image_channels: int = 1
    cond_channels: int = CONDITION_CHANNELS
    enc_channels: tuple = (32, 64, 128, 128)
    gen_channels: int = 32
    gen_blocks: int = 5
    disc_channels: tuple = (32, 64, 128, 128)
    extractor_channels: tuple = (8, 16, 16, 32, 32)
    flow_scale_frac: float = 0.25
    head_scale: float = 30.0
    angle_scale: float = 30.0
    weight_seed: int = 0

    def __post_init__(self):
        self.enc_channels = tuple(self.enc_channels)
        self.disc_channels = tuple(self.disc_channels)
        self.extractor_channels = tuple(self.extractor_channels)

    @property
    def flow_scale(self):
        return self.flow_scale_frac * self.image_size


class Conv2dLayer:
    """Convolution with bias; weights drawn fan-in-scaled uniform."""

    def __init__(self, cin, cout, k, stride, padding, rng, dtype=np.float32):
        bound = 1.0 / np.sqrt(cin * k * k)
        self.weight = Tensor(
            rng.uniform(-bound, bound, (cout, cin, k, k)), requires_grad=True, dtype=dtype
        )
        self.bias = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        out = conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        return out + self.bias.reshape(1, -1, 1, 1)


class DenseLayer:
    def __init__(self, cin, cout, rng, dtype=np.float32):
        bound = 1.0 / np.sqrt(cin)
        self.weight = Tensor(
            rng.uniform(-bound, bound, (cin, cout)), requires_grad=True, dtype=dtype
        )
        self.bias = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)

    def __call__(self, x):
        return x @ self.weight + self.bias.reshape(1, -1)


class _Model:
    """Parameter bookkeeping shared by the three networks."""

    def __init__(self):
        self._layers = OrderedDict()

    def _register(self, name, layer):
        self._layers[name] = layer
        return layer

    def parameters(self):
        params = OrderedDict()
        for name, layer in self._layers.items():
            params[f"{name}.weight"] = layer.weight
            params[f"{name}.bias"] = layer.bias
        return params

    def set_requires_grad(self, flag):
        for p in self.parameters().values():
            p.requires_grad = bool(flag)

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def load_state(self, tensors, prefix):
        """Copy values from a name->array mapping produced by parameters()."""
        for name, param in self.parameters().items():
            key = prefix + name
            if key not in tensors:
                raise KeyError(f"checkpoint is missing tensor {key}")
            src = tensors[key]
            if src.shape != param.shape:
                raise ValueError(
                    f"checkpoint tensor {key} has shape {src.shape}, expected {param.shape}"
                )
            param.data = src.astype(param.data.dtype, copy=True)


def _cond_tensor(cond, batch, h, w):
    """Condition as a (batch, C, h, w) constant Tensor at the requested scale."""
    arr = np.asarray(cond, dtype=np.float32)
    if arr.ndim == 3:
        arr = np.broadcast_to(arr[None], (batch,) + arr.shape)
    scaled = condition_at_scale(np.ascontiguousarray(arr), h, w)
    return Tensor(scaled)


def head_plane(head_yaws, size, scale=30.0, dtype=np.float32):
    """Head pose as a constant-plane channel, one plane per batch element."""
    vals = np.asarray(head_yaws, dtype=np.float64).reshape(-1) / scale
    planes = np.broadcast_to(vals[:, None, None, None], (vals.size, 1, size, size))
    return Tensor(planes.astype(dtype))


class CoarseModel(_Model):
    """Encoder-decoder predicting a flow field (or, in the flow-free
    ablation, decoding the output image directly)."""

    def __init__(self, cfg: ModelConfig, direct_output=False, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.direct_output = direct_output
        rng = np.random.default_rng([cfg.weight_seed, 1])

        sizes = [cfg.image_size]
        cin = cfg.image_channels + 1  # image plus head-pose plane
        for i, cout in enumerate(cfg.enc_channels):
            self._register(f"enc{i}", Conv2dLayer(cin, cout, 4, 2, 1, rng, dtype))
            sizes.append((sizes[-1] + 2 - 4) // 2 + 1)
            cin = cout
        self._sizes = sizes  # resolution ladder, full size first

        dec_out = list(reversed(cfg.enc_channels[:-1])) + [cfg.enc_channels[0]]
        cin = cfg.enc_channels[-1]
        for i, cout in enumerate(dec_out):
            self._register(
                f"dec{i}", Conv2dLayer(cin + cfg.cond_channels, cout, 3, 1, 1, rng, dtype)
            )
            cin = cout
        out_channels = cfg.image_channels if direct_output else 2
        self._register(
            "out", Conv2dLayer(cin + cfg.cond_channels, out_channels, 3, 1, 1, rng, dtype)
        )

    def forward(self, image, head_yaws, cond):
        """Image batch + head poses + condition -> flow field (or direct image)."""
        if image.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise ValueError(
                f"expected {self.cfg.image_size}x{self.cfg.image_size} input, got {image.shape}"
            )
        cond = np.asarray(cond)
        if cond.shape[-2:] != image.shape[-2:]:
            raise ValueError(
                f"condition spatial extents {cond.shape[-2:]} do not match image {image.shape[-2:]}"
            )
        batch = image.shape[0]
        h = concat([image, head_plane(head_yaws, self.cfg.image_size, self.cfg.head_scale)], axis=1)
        for i in range(len(self.cfg.enc_channels)):
            h = self._layers[f"enc{i}"](h).leaky_relu(LEAKY_SLOPE)
        ladder = list(reversed(self._sizes[:-1]))
        for i in range(len(ladder) - 1):
            size = ladder[i]
            h = resample_nearest(h, size, size)
            h = concat([h, _cond_tensor(cond, batch, size, size)], axis=1)
            h = self._layers[f"dec{i}"](h).leaky_relu(LEAKY_SLOPE)
        size = ladder[-1]
        h = resample_nearest(h, size, size)
        h = concat([h, _cond_tensor(cond, batch, size, size)], axis=1)
        out = self._layers["out"](h).tanh()
        if self.direct_output:
            return out
        return out * self.cfg.flow_scale


class RefineGenerator(_Model):
    """Full-resolution conv stack producing the residual correction."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng([cfg.weight_seed, 2])
        cin = 2 * cfg.image_channels + 1 + cfg.cond_channels
        width = cfg.gen_channels
        for i in range(cfg.gen_blocks - 1):
            self._register(f"block{i}", Conv2dLayer(cin, width, 3, 1, 1, rng, dtype))
            cin = width
        self._register("out", Conv2dLayer(cin, cfg.image_channels, 3, 1, 1, rng, dtype))

    def forward(self, warped, source, head_yaws, cond):
        for t in (warped, source):
            if t.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
                raise ValueError(f"expected {self.cfg.image_size}-sized inputs, got {t.shape}")
        if warped.shape != source.shape:
            raise ValueError(f"input shapes differ: {warped.shape} vs {source.shape}")
        batch, _, hh, ww = warped.shape
        h = concat(
            [
                warped,
                source,
                head_plane(head_yaws, self.cfg.image_size, self.cfg.head_scale),
                _cond_tensor(cond, batch, hh, ww),
            ],
            axis=1,
        )
        for i in range(self.cfg.gen_blocks - 1):
            h = self._layers[f"block{i}"](h).leaky_relu(LEAKY_SLOPE)
        return self._layers["out"](h).tanh()


class MultiTaskDiscriminator(_Model):
    """Shared conv trunk with an adversarial head and a gaze-regression head.

    The heads are two layers each; everything below is shared.
    """

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng([cfg.weight_seed, 3])
        cin = cfg.image_channels
        size = cfg.image_size
        for i, cout in enumerate(cfg.disc_channels):
            self._register(f"trunk{i}", Conv2dLayer(cin, cout, 4, 2, 1, rng, dtype))
            size = (size + 2 - 4) // 2 + 1
            cin = cout
        self._feat_size = size
        flat = cin * size * size
        self._register("adv_conv", Conv2dLayer(cin, cin, 3, 1, 1, rng, dtype))
        self._register("adv_fc", DenseLayer(flat, 1, rng, dtype))
        self._register("gaze_conv", Conv2dLayer(cin, cin, 3, 1, 1, rng, dtype))
        self._register("gaze_fc", DenseLayer(flat, 2, rng, dtype))

    def forward(self, x):
        if x.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise ValueError(
                f"discriminator expects {self.cfg.image_size}x{self.cfg.image_size} "
                f"images, got {x.shape}"
            )
        h = x
        for i in range(len(self.cfg.disc_channels)):
            h = self._layers[f"trunk{i}"](h).leaky_relu(LEAKY_SLOPE)
        batch = x.shape[0]
        adv = self._layers["adv_conv"](h).leaky_relu(LEAKY_SLOPE).reshape(batch, -1)
        adv_logit = self._layers["adv_fc"](adv)
        gaze = self._layers["gaze_conv"](h).leaky_relu(LEAKY_SLOPE).reshape(batch, -1)
        gaze_pred = self._layers["gaze_fc"](gaze)
        return adv_logit, gaze_pred


def coarse_redirect(model: CoarseModel, image, head_yaws, cond):
    """Run the coarse branch: returns (flow, warped image).

    In direct-output mode (flow-free ablation) the flow is None and the
    second element is the decoded image itself.
    """
    out = model.forward(image, head_yaws, cond)
    if model.direct_output:
        return None, out
    return out, warp(image, out)


def refine(gen: RefineGenerator, warped, source, head_yaws, cond):
    """Run the refinement branch: returns (residual, warped + residual)."""
    residual = gen.forward(warped, source, head_yaws, cond)
    return residual, residual + warped


def discriminate(disc: MultiTaskDiscriminator, x):
    """One scalar realness logit and one 2-vector gaze estimate per sample."""
    return disc.forward(x)
