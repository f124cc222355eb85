"""Two-stage optimization: the coarse branch trains alone on the
reconstruction loss, then the discriminator and generator train
adversarially with the coarse branch frozen.

Batch sampling is stateless: the indices for iteration t are a pure
function of (seed, stage, t), so a run resumed from a checkpoint replays
the exact batch stream of an uninterrupted run.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Checkpoint, RedirectionPair, save_checkpoint
from .gazemap import build_condition, normalize_angle_pair
from .losses import (
    FeatureExtractor,
    LossWeights,
    adversarial_d_loss,
    adversarial_g_loss,
    perceptual_loss,
    recon_loss,
    total_d,
    total_g,
    vector_l2_loss,
)
from .networks import CoarseModel, ModelConfig, MultiTaskDiscriminator, RefineGenerator, coarse_redirect
from .tensor import Tensor

STAGE_COARSE = 1
STAGE_FINE = 2


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient goes non-finite; no silent re-init."""


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr_coarse: float = 1e-4
    lr_gan: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    coarse_iters: int = 3000
    fine_iters: int = 3000
    decay_start_iter: int = 2000
    weight_gaze_reg: float = 5.0
    weight_recon: float = 0.1
    weight_perceptual: float = 100.0
    weight_gaze_gen: float = 10.0
    seed: int = 0
    checkpoint_every: int = 0
    no_perceptual: bool = False
    no_residual: bool = False
    no_flow: bool = False
    no_gazemap: bool = False

    def __post_init__(self):
        for name in ("lr_coarse", "lr_gan"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.decay_start_iter <= self.fine_iters:
            raise ValueError("decay_start_iter must lie within [0, fine_iters]")

    def loss_weights(self):
        return LossWeights(
            gaze_reg=self.weight_gaze_reg,
            recon=self.weight_recon,
            perceptual=0.0 if self.no_perceptual else self.weight_perceptual,
            gaze_gen=self.weight_gaze_gen,
        )


def resolve_model_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> ModelConfig:
    """Apply ablation flags that change network shapes."""
    cond_channels = 2 if train_cfg.no_gazemap else 6
    if model_cfg.cond_channels != cond_channels:
        return replace(model_cfg, cond_channels=cond_channels)
    return model_cfg


class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter mapping."""

    def __init__(self, params, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = OrderedDict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingDiverged(
                    f"non-finite gradient for parameter {name} at optimizer step {t}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_tensors(self, prefix):
        out = OrderedDict()
        for name in self.params:
            out[f"{prefix}m.{name}"] = self.m[name]
            out[f"{prefix}v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors, prefix, step_count):
        for name in self.params:
            self.m[name] = tensors[f"{prefix}m.{name}"].astype(
                self.m[name].dtype, copy=True
            )
            self.v[name] = tensors[f"{prefix}v.{name}"].astype(
                self.v[name].dtype, copy=True
            )
        self.step_count = int(step_count)


def lr_schedule(iteration, cfg: TrainConfig):
    """GAN learning rate: constant, then linearly decayed to 0 at the end."""
    if not 0 <= iteration <= cfg.fine_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.fine_iters}]")
    if iteration < cfg.decay_start_iter:
        return cfg.lr_gan
    span = cfg.fine_iters - cfg.decay_start_iter
    if span == 0:
        return 0.0 if iteration >= cfg.fine_iters else cfg.lr_gan
    return cfg.lr_gan * (cfg.fine_iters - iteration) / span


def batch_stream_indices(seed, stage, iteration, dataset_size, batch_size):
    """Deterministic with-replacement batch for one iteration."""
    rng = np.random.default_rng([seed, stage, iteration])
    return rng.integers(0, dataset_size, size=batch_size)


def assemble_batch(pairs, indices, model_cfg: ModelConfig, include_gazemaps=True):
    """Stack a list of redirection pairs into training arrays."""
    chosen = [pairs[i] for i in indices]
    size = model_cfg.image_size
    for p in chosen:
        if p.source.image.shape != (size, size):
            raise ValueError(
                f"pair image is {p.source.image.shape}, config expects {size}x{size}"
            )
    src = np.stack([p.source.image for p in chosen])[:, None]
    tgt = np.stack([p.target.image for p in chosen])[:, None]
    heads = np.array([p.source.head.yaw for p in chosen])
    cond = np.stack(
        [
            build_condition(
                p.source.gaze,
                p.target.gaze,
                size,
                size,
                angle_scale=model_cfg.angle_scale,
                include_gazemaps=include_gazemaps,
            )
            for p in chosen
        ]
    )
    tgt_vec = np.stack(
        [normalize_angle_pair(p.target.gaze, model_cfg.angle_scale) for p in chosen]
    ).astype(np.float32)
    return {
        "source": Tensor(src),
        "target": Tensor(tgt),
        "heads": heads,
        "cond": cond,
        "target_vec": Tensor(tgt_vec),
    }


def _coarse_checkpoint(model, model_cfg, train_cfg, optim, iteration):
    tensors = OrderedDict()
    for name, p in model.parameters().items():
        tensors[f"coarse.{name}"] = p.data
    tensors.update(optim.state_tensors("optim_c."))
    return Checkpoint(
        config={"model": asdict(model_cfg), "train": asdict(train_cfg), "stage": "coarse"},
        iteration=iteration,
        seeds={"train": train_cfg.seed},
        scalars={"optim_c.step": optim.step_count},
        tensors=tensors,
    )


def train_coarse(pairs, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 run_dir=None, resume: Checkpoint | None = None):
    """Stage 1: fit the encoder-decoder with the reconstruction loss.

    Returns (model, trace) where trace is one dict of named losses per
    iteration.  With ``run_dir`` set, periodic and final checkpoints are
    written there; on divergence the last periodic checkpoint survives.
    """
    if not pairs:
        raise ValueError("training requires a non-empty pair dataset")
    model_cfg = resolve_model_config(model_cfg, train_cfg)
    model = CoarseModel(model_cfg, direct_output=train_cfg.no_flow)
    optim = Adam(model.parameters(), train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    start = 0
    if resume is not None:
        model.load_state(resume.tensors, "coarse.")
        optim.load_state(resume.tensors, "optim_c.", resume.scalars["optim_c.step"])
        start = resume.iteration
    include_gazemaps = not train_cfg.no_gazemap
    trace = []
    run_dir = Path(run_dir) if run_dir is not None else None

    for it in range(start, train_cfg.coarse_iters):
        idx = batch_stream_indices(
            train_cfg.seed, STAGE_COARSE, it, len(pairs), train_cfg.batch_size
        )
        batch = assemble_batch(pairs, idx, model_cfg, include_gazemaps)
        try:
            _, warped = coarse_redirect(model, batch["source"], batch["heads"], batch["cond"])
            loss = recon_loss(warped, batch["target"])
            optim.zero_grad()
            loss.backward()
            optim.step(train_cfg.lr_coarse)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"coarse stage diverged at iteration {it}: {exc}") from exc
        trace.append({"iteration": it, "loss_recon": loss.item()})
        if run_dir and train_cfg.checkpoint_every and (it + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(
                run_dir / f"coarse_{it + 1:06d}.ckpt",
                _coarse_checkpoint(model, model_cfg, train_cfg, optim, it + 1),
            )
    if run_dir:
        save_checkpoint(
            run_dir / "coarse.ckpt",
            _coarse_checkpoint(model, model_cfg, train_cfg, optim, train_cfg.coarse_iters),
        )
    return model, trace


def fine_step_losses(coarse, gen, disc, extractor, batch, train_cfg: TrainConfig):
    """Build the stage-2 losses for one batch.

    The coarse output is detached before it feeds the generator and the
    composition, so stage-2 gradients never reach the coarse parameters
    even when those still require grad (used by the isolation probe).
    Returns the loss tensors plus the intermediate images.
    """
    weights = train_cfg.loss_weights()
    _, warped = coarse_redirect(coarse, batch["source"], batch["heads"], batch["cond"])
    warped = warped.detach()
    source = batch["source"]
    target = batch["target"]

    residual = gen.forward(warped, source, batch["heads"], batch["cond"])
    if train_cfg.no_residual:
        refined = residual  # generator output is the final image directly
        residual_out = None
    else:
        refined = residual + warped
        residual_out = residual

    real_logit, real_gaze = disc.forward(target)
    fake_logit_d, _ = disc.forward(refined.detach())
    loss_d_gaze = vector_l2_loss(real_gaze, batch["target_vec"])
    loss_d_adv = adversarial_d_loss(real_logit, fake_logit_d)
    loss_d = total_d(loss_d_gaze, loss_d_adv, weights)

    fake_logit_g, fake_gaze = disc.forward(refined)
    loss_g_recon = recon_loss(refined, target)
    if train_cfg.no_perceptual:
        loss_g_per = Tensor(0.0)
    else:
        loss_g_per = perceptual_loss(extractor, refined, target)
    loss_g_gaze = vector_l2_loss(fake_gaze, batch["target_vec"])
    loss_g_adv = adversarial_g_loss(fake_logit_g)
    loss_g = total_g(loss_g_recon, loss_g_per, loss_g_gaze, loss_g_adv, weights)

    return {
        "warped": warped,
        "residual": residual_out,
        "refined": refined,
        "loss_d": loss_d,
        "loss_d_gaze": loss_d_gaze,
        "loss_d_adv": loss_d_adv,
        "loss_g": loss_g,
        "loss_g_recon": loss_g_recon,
        "loss_g_per": loss_g_per,
        "loss_g_gaze": loss_g_gaze,
        "loss_g_adv": loss_g_adv,
    }


def _fine_checkpoint(coarse, gen, disc, model_cfg, train_cfg, optim_g, optim_d, iteration):
    tensors = OrderedDict()
    for prefix, model in (("coarse.", coarse), ("gen.", gen), ("disc.", disc)):
        for name, p in model.parameters().items():
            tensors[prefix + name] = p.data
    tensors.update(optim_g.state_tensors("optim_g."))
    tensors.update(optim_d.state_tensors("optim_d."))
    return Checkpoint(
        config={"model": asdict(model_cfg), "train": asdict(train_cfg), "stage": "fine"},
        iteration=iteration,
        seeds={"train": train_cfg.seed},
        scalars={"optim_g.step": optim_g.step_count, "optim_d.step": optim_d.step_count},
        tensors=tensors,
    )


def train_fine(pairs, coarse: CoarseModel, model_cfg: ModelConfig, train_cfg: TrainConfig,
               extractor: FeatureExtractor | None = None, run_dir=None,
               resume: Checkpoint | None = None):
    """Stage 2: alternate one discriminator and one generator step per batch.

    The coarse model is frozen on entry and is bit-identical at exit.
    With residual learning on, the composition identity
    refined == residual + warped is asserted every 100 iterations.
    """
    if not pairs:
        raise ValueError("training requires a non-empty pair dataset")
    model_cfg = resolve_model_config(model_cfg, train_cfg)
    coarse.set_requires_grad(False)
    gen = RefineGenerator(model_cfg)
    disc = MultiTaskDiscriminator(model_cfg)
    if extractor is None:
        extractor = FeatureExtractor(
            image_channels=model_cfg.image_channels,
            channels=model_cfg.extractor_channels,
            seed=model_cfg.weight_seed,
        )
    optim_g = Adam(gen.parameters(), train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    optim_d = Adam(disc.parameters(), train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    start = 0
    if resume is not None:
        gen.load_state(resume.tensors, "gen.")
        disc.load_state(resume.tensors, "disc.")
        optim_g.load_state(resume.tensors, "optim_g.", resume.scalars["optim_g.step"])
        optim_d.load_state(resume.tensors, "optim_d.", resume.scalars["optim_d.step"])
        start = resume.iteration
    include_gazemaps = not train_cfg.no_gazemap
    trace = []
    run_dir = Path(run_dir) if run_dir is not None else None

    for it in range(start, train_cfg.fine_iters):
        lr = lr_schedule(it, train_cfg)
        idx = batch_stream_indices(
            train_cfg.seed, STAGE_FINE, it, len(pairs), train_cfg.batch_size
        )
        batch = assemble_batch(pairs, idx, model_cfg, include_gazemaps)
        try:
            step = fine_step_losses(coarse, gen, disc, extractor, batch, train_cfg)
            optim_d.zero_grad()
            optim_g.zero_grad()
            step["loss_d"].backward()
            optim_d.step(lr)
            # fresh gradients for the generator objective; the backward also
            # writes into D's buffers, which the next D step zeroes out
            optim_d.zero_grad()
            optim_g.zero_grad()
            step["loss_g"].backward()
            optim_g.step(lr)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"fine stage diverged at iteration {it}: {exc}") from exc
        if step["residual"] is not None and it % 100 == 0:
            composed = step["residual"].data + step["warped"].data
            if not np.array_equal(step["refined"].data, composed):
                raise AssertionError(f"residual composition broken at iteration {it}")
        trace.append(
            {
                "iteration": it,
                "lr": lr,
                "loss_d": step["loss_d"].item(),
                "loss_d_gaze": step["loss_d_gaze"].item(),
                "loss_d_adv": step["loss_d_adv"].item(),
                "loss_g": step["loss_g"].item(),
                "loss_g_recon": step["loss_g_recon"].item(),
                "loss_g_per": step["loss_g_per"].item(),
                "loss_g_gaze": step["loss_g_gaze"].item(),
                "loss_g_adv": step["loss_g_adv"].item(),
            }
        )
        if run_dir and train_cfg.checkpoint_every and (it + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(
                run_dir / f"fine_{it + 1:06d}.ckpt",
                _fine_checkpoint(coarse, gen, disc, model_cfg, train_cfg, optim_g, optim_d, it + 1),
            )
    if run_dir:
        save_checkpoint(
            run_dir / "fine.ckpt",
            _fine_checkpoint(coarse, gen, disc, model_cfg, train_cfg, optim_g, optim_d, train_cfg.fine_iters),
        )
    return gen, disc, trace


def write_trace_csv(path, trace):
    """Emit a loss trace in long form: iter,loss_name,value."""
    import csv

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "loss_name", "value"])
        for row in trace:
            it = row["iteration"]
            for key, value in row.items():
                if key != "iteration":
                    writer.writerow([it, key, repr(float(value))])


def models_from_checkpoint(ckpt: Checkpoint):
    """Rebuild (coarse, gen, disc, model_cfg, train_cfg) from a checkpoint.

    ``gen`` and ``disc`` are None for coarse-stage checkpoints.
    """
    model_cfg = ModelConfig(**ckpt.config["model"])
    train_cfg = TrainConfig(**ckpt.config["train"])
    coarse = CoarseModel(model_cfg, direct_output=train_cfg.no_flow)
    coarse.load_state(ckpt.tensors, "coarse.")
    gen = disc = None
    if ckpt.config.get("stage") == "fine":
        gen = RefineGenerator(model_cfg)
        gen.load_state(ckpt.tensors, "gen.")
        disc = MultiTaskDiscriminator(model_cfg)
        disc.load_state(ckpt.tensors, "disc.")
    return coarse, gen, disc, model_cfg, train_cfg
