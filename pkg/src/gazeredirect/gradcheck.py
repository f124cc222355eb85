"""Central finite-difference verification of analytic gradients.

All checks run in float64: single precision makes step-size noise
comparable to the 1e-3 relative-error budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

DEFAULT_EPS = 1e-4
DEFAULT_RTOL = 1e-3


def numeric_gradient(func, tensors, wrt, eps=DEFAULT_EPS):
    """Central-difference gradient of scalar ``func(tensors)`` w.r.t. one input.

    ``tensors`` maps names to float64 Tensors; ``wrt`` names the one being
    perturbed.  The function is re-evaluated 2x per element.
    """
    target = tensors[wrt]
    if target.data.dtype != np.float64:
        raise ValueError("numeric_gradient requires float64 inputs")
    base = target.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = func(tensors).item()
        flat[i] = orig - eps
        lo = func(tensors).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_relative_error(analytic, numeric):
    """max |a - n| normalized by the largest magnitude in either gradient."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    denom = max(scale, 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def check_gradients(func, tensors, eps=DEFAULT_EPS):
    """Compare analytic vs finite-difference gradients for every grad input.

    Returns a dict name -> max relative error.  ``func`` must build a fresh
    graph from ``tensors`` and return a scalar Tensor.
    """
    for t in tensors.values():
        t.zero_grad()
    loss = func(tensors)
    loss.backward()
    errors = {}
    for name, t in tensors.items():
        if not t.requires_grad:
            continue
        analytic = t.grad.copy()
        numeric = numeric_gradient(func, tensors, name, eps=eps)
        errors[name] = max_relative_error(analytic, numeric)
    return errors


@dataclass
class CheckResult:
    op: str
    seed: int
    max_error: float
    passed: bool


def _random(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _suite_cases(seed):
    """One gradcheck case per differentiable op, built from a seeded rng."""
    from . import losses as losses_mod
    from . import warp as warp_mod
    from .tensor import concat, conv2d, resample_nearest

    rng = np.random.default_rng([seed, 0xC0FFEE])
    cases = {}

    x = _random(rng, 2, 3, 5, 5)
    k = _random(rng, 4, 3, 3, 3)
    proj = rng.standard_normal((2, 4, 3, 3))
    cases["conv2d"] = (
        lambda t: (conv2d(t["x"], t["k"], stride=2, padding=1) * proj).sum(),
        {"x": x, "k": k},
    )

    a = _random(rng, 3, 4)
    b = _random(rng, 4, 2)
    pm = rng.standard_normal((3, 2))
    cases["dense_matmul"] = (lambda t: ((t["a"] @ t["b"]) * pm).sum(), {"a": a, "b": b})

    p1 = _random(rng, 1, 2, 4, 4)
    p2 = _random(rng, 1, 3, 4, 4)
    pc = rng.standard_normal((1, 5, 4, 4))
    cases["concat"] = (
        lambda t: (concat([t["p1"], t["p2"]], axis=1) * pc).sum(),
        {"p1": p1, "p2": p2},
    )

    r = _random(rng, 1, 2, 6, 6)
    pr = rng.standard_normal((1, 2, 4, 4))
    cases["resample_nearest"] = (
        lambda t: (resample_nearest(t["r"], 4, 4) * pr).sum(),
        {"r": r},
    )

    # offset keeps samples away from the kink at zero
    lx = Tensor(rng.standard_normal((3, 7)) + 0.35, requires_grad=True, dtype=np.float64)
    cases["leaky_relu"] = (lambda t: (t["lx"].leaky_relu(0.2) ** 2).sum(), {"lx": lx})

    tx = _random(rng, 3, 7)
    cases["tanh"] = (lambda t: (t["tx"].tanh() * 0.7).sum(), {"tx": tx})

    sx = _random(rng, 3, 7)
    cases["softplus"] = (lambda t: t["sx"].softplus().sum(), {"sx": sx})

    img = _random(rng, 1, 2, 6, 6)
    flow_vals = rng.uniform(-1.0, 1.0, (1, 2, 6, 6)) + 0.3
    flow = Tensor(flow_vals, requires_grad=True, dtype=np.float64)
    cases["bilinear_warp"] = (
        lambda t: (warp_mod.warp(t["img"], t["flow"]) ** 2).sum(),
        {"img": img, "flow": flow},
    )

    pred = _random(rng, 2, 1, 6, 6)
    tgt = Tensor(rng.standard_normal((2, 1, 6, 6)), dtype=np.float64)
    cases["recon_loss"] = (
        lambda t: losses_mod.recon_loss(t["pred"], t["tgt"]),
        {"pred": pred, "tgt": tgt},
    )

    extractor = losses_mod.FeatureExtractor(
        image_channels=1, channels=(3, 4, 4, 5, 5), seed=seed, dtype=np.float64
    )
    ppred = _random(rng, 1, 1, 8, 8)
    ptgt = Tensor(rng.standard_normal((1, 1, 8, 8)), dtype=np.float64)
    cases["perceptual_loss"] = (
        lambda t: losses_mod.perceptual_loss(extractor, t["pred"], t["tgt"]),
        {"pred": ppred, "tgt": ptgt},
    )

    gp = _random(rng, 4, 2)
    gt = Tensor(rng.standard_normal((4, 2)), dtype=np.float64)
    cases["gaze_regression_loss"] = (
        lambda t: losses_mod.vector_l2_loss(t["gp"], t["gt"]),
        {"gp": gp, "gt": gt},
    )

    logits = _random(rng, 5, 1)
    cases["adversarial_logits"] = (
        lambda t: (-t["lg"]).softplus().mean(),
        {"lg": logits},
    )

    # generator-side adversarial loss w.r.t. fake pixels, through a tiny D
    from .networks import ModelConfig, MultiTaskDiscriminator

    disc = MultiTaskDiscriminator(
        ModelConfig(
            image_size=8,
            enc_channels=(4, 4),
            disc_channels=(4, 6),
            weight_seed=seed,
        ),
        dtype=np.float64,
    )
    fake = Tensor(
        rng.uniform(-0.9, 0.9, (2, 1, 8, 8)), requires_grad=True, dtype=np.float64
    )

    def adv_through_disc(t):
        fake_logit, _ = disc.forward(t["fake"])
        return losses_mod.adversarial_g_loss(fake_logit)

    cases["adversarial_through_disc"] = (adv_through_disc, {"fake": fake})

    # three-layer stack: conv -> leaky -> conv -> tanh -> dense readout
    sx0 = _random(rng, 1, 2, 6, 6)
    sk1 = _random(rng, 3, 2, 3, 3)
    sk2 = _random(rng, 2, 3, 3, 3)
    sw = _random(rng, 2 * 2 * 2, 1)

    def stack(t):
        h1 = conv2d(t["x0"], t["k1"], stride=1, padding=0).leaky_relu(0.2)
        h2 = conv2d(h1, t["k2"], stride=1, padding=0).tanh()
        return (h2.reshape(1, -1) @ t["w"]).sum()

    cases["three_layer_stack"] = (stack, {"x0": sx0, "k1": sk1, "k2": sk2, "w": sw})

    return cases


def run_suite(seeds=range(20), rtol=DEFAULT_RTOL):
    """Run every op's finite-difference check across the given seeds."""
    results = []
    for seed in seeds:
        for name, (func, tensors) in _suite_cases(int(seed)).items():
            errors = check_gradients(func, tensors)
            worst = max(errors.values())
            results.append(CheckResult(name, int(seed), worst, worst <= rtol))
    return results
