"""Objective terms for both training stages.

One L2 convention everywhere: the per-batch mean of the per-sample
Euclidean norm of the flattened difference.  The adversarial objective is
realized in its numerically stable log-sigmoid form; the generator side
uses the non-saturating variant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, conv2d


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights on the objective terms.

    gaze_reg scales the discriminator's regression term; recon,
    perceptual and gaze_gen scale the generator's reconstruction,
    perceptual and gaze terms.
    """

    gaze_reg: float = 5.0
    recon: float = 0.1
    perceptual: float = 100.0
    gaze_gen: float = 10.0

    def __post_init__(self):
        for name in ("gaze_reg", "recon", "perceptual", "gaze_gen"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def _batch_l2(diff):
    """Mean over the batch of the Euclidean norm of each flattened sample."""
    flat = diff.reshape(diff.shape[0], -1)
    return (flat * flat).sum(axis=1).sqrt().mean()


def recon_loss(pred, target):
    """Mean per-sample L2 distance between two image batches."""
    if pred.shape != target.shape:
        raise ValueError(f"recon_loss shapes differ: {pred.shape} vs {target.shape}")
    return _batch_l2(pred - target)


def vector_l2_loss(pred, target):
    """Mean per-sample L2 distance for 2-vector predictions (gaze regression)."""
    if pred.shape != target.shape:
        raise ValueError(f"vector loss shapes differ: {pred.shape} vs {target.shape}")
    return _batch_l2(pred - target)


def gaze_regression_loss(disc, images, target_vecs):
    """Regression distance between the discriminator's gaze head and targets.

    ``target_vecs`` must already be on the normalized angle scale.
    """
    _, gaze_pred = disc.forward(images)
    target = target_vecs if isinstance(target_vecs, Tensor) else Tensor(target_vecs)
    return vector_l2_loss(gaze_pred, target)


class FeatureExtractor:
    """Frozen convolutional stack used by the perceptual loss and featdist.

    Weights are seeded random and immutable; the structure of the loss is
    what matters at desk scale, not pretrained statistics.  Each block is
    a stride-2 conv followed by a leaky rectifier; all block activations
    are tapped.
    """

    def __init__(self, image_channels=1, channels=(8, 16, 16, 32, 32), seed=0,
                 dtype=np.float32):
        self.channels = tuple(channels)
        self.image_channels = image_channels
        self.seed = seed
        rng = np.random.default_rng([seed, 0xFEA7])
        self.weights = []
        cin = image_channels
        for cout in self.channels:
            fan_in = cin * 9
            bound = np.sqrt(6.0 / fan_in)  # keeps activation scale roughly flat
            w = Tensor(rng.uniform(-bound, bound, (cout, cin, 3, 3)), dtype=dtype)
            b = Tensor(np.zeros(cout), dtype=dtype)
            self.weights.append((w, b))
            cin = cout

    def forward(self, x):
        """Return the list of per-block activations, shallowest first."""
        feats = []
        h = x
        for w, b in self.weights:
            h = (conv2d(h, w, stride=2, padding=1) + b.reshape(1, -1, 1, 1)).leaky_relu(0.2)
            feats.append(h)
        return feats


def gram_matrix(features):
    """Channel-by-channel inner products of a feature map, normalized by h*w*c."""
    b, c, h, w = features.shape
    flat = features.reshape(b, c, h * w)
    return (flat @ flat.swapaxes(1, 2)) * (1.0 / (h * w * c))


def perceptual_loss(extractor, pred, target):
    """Content distance at the deepest tap plus Gram-matrix distances.

    The content term is the batch-mean feature L2 at the last block,
    normalized by that block's h*w*c; each remaining tap contributes the
    batch-mean L2 between normalized Gram matrices.
    """
    if pred.shape != target.shape:
        raise ValueError(f"perceptual_loss shapes differ: {pred.shape} vs {target.shape}")
    pred_feats = extractor.forward(pred)
    target_feats = extractor.forward(target)

    deep_p, deep_t = pred_feats[-1], target_feats[-1]
    _, c, h, w = deep_p.shape
    total = _batch_l2(deep_p - deep_t) * (1.0 / (h * w * c))
    for fp, ft in zip(pred_feats[:-1], target_feats[:-1]):
        total = total + _batch_l2(gram_matrix(fp) - gram_matrix(ft))
    return total


def adversarial_d_loss(real_logits, fake_logits):
    """Discriminator objective: push real logits up, fake logits down."""
    return (-real_logits).softplus().mean() + fake_logits.softplus().mean()


def adversarial_g_loss(fake_logits):
    """Non-saturating generator objective: push fake logits up."""
    return (-fake_logits).softplus().mean()


def adversarial_losses(disc, real, fake):
    """Both adversarial terms, as minimized quantities, from one pass each."""
    real_logits, _ = disc.forward(real)
    fake_logits, _ = disc.forward(fake)
    return adversarial_d_loss(real_logits, fake_logits), adversarial_g_loss(fake_logits)


def total_d(gaze_term, adv_term, weights: LossWeights):
    """Discriminator objective: gaze regression plus the adversarial term."""
    return weights.gaze_reg * gaze_term + adv_term


def total_g(recon_term, perceptual_term, gaze_term, adv_term, weights: LossWeights):
    """Generator objective; applied to the generator only, never upstream."""
    return (
        weights.recon * recon_term
        + weights.perceptual * perceptual_term
        + weights.gaze_gen * gaze_term
        + adv_term
    )
