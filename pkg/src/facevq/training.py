"""Two-stage training orchestration and end-to-end enhancement inference.

Stage I trains the HQ encoder/decoder, both codebooks and the critic heads
by reconstruction. Stage II freezes the decoder and codebooks, initializes
an LQ encoder from the HQ one, and trains it together with the two code
lookup transformers on degraded/clean pairs. Degradations follow the
incremental curriculum: a noise-free warm phase, then the full range.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, Decoder3D, Encoder3D
from .checkpoint import (
    load_checkpoint,
    load_module_arrays,
    module_arrays,
    save_checkpoint,
    verify_ratios,
)
from .config import RunConfig
from .critic import HeadEnsemble, adversarial_losses, build_extractor, frames_of
from .dataio import VideoTensor, batch_to_video, video_to_batch
from .degrade import DegradationRanges, degrade_video, sample_params
from .errors import ConfigError, DataError, ShapeError, TrainingStepError
from .lookup import (
    LookupTransformer,
    assemble_quantized,
    cross_entropy_codes,
    flatten_grid,
    predict_codes,
    stage2_code_loss,
)
from .quantize import (
    Codebook,
    code_loss,
    counting_prior_kl,
    first_argmax,
    marginal_prior_kl,
    nn_quantize,
    split_latents,
    straight_through,
    utilization,
)

PERCEPTUAL_FALLBACK_SEED = 0xFACE


@dataclass
class TrainState:
    stage: int
    seed: int
    iteration: int = 0
    phase: str = "noise_free"


def incremental_phase(iteration: int, switch_iteration: int) -> str:
    """Curriculum phase: noise-free before the switch point, full after."""
    return "noise_free" if iteration < switch_iteration else "full"


def perceptual_distance(extractor: nn.Module, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Unit-weight sum of per-scale feature MSEs between two videos."""
    fa = extractor(frames_of(a))
    fb = extractor(frames_of(b))
    return sum(nn.functional.mse_loss(x, y) for x, y in zip(fa, fb))


def clips_to_windows(
    clips: list[VideoTensor], clip_frames: int, resolution: int
) -> list[VideoTensor]:
    """Cut clips into fixed-length training windows; longer clips are chunked."""
    windows = []
    for i, clip in enumerate(clips):
        t, h, w, _ = clip.frames.shape
        if (h, w) != (resolution, resolution):
            raise DataError(
                f"clip {i} is {h}x{w}, training resolution is {resolution}x{resolution}"
            )
        if t < clip_frames:
            raise DataError(f"clip {i} has {t} frames, needs at least {clip_frames}")
        for start in range(0, t - clip_frames + 1, clip_frames):
            windows.append(
                VideoTensor(clip.frames[start : start + clip_frames], clip.frame_rate)
            )
    return windows


def _stack_clips(clips: list[VideoTensor]) -> torch.Tensor:
    return torch.from_numpy(np.concatenate([video_to_batch(c) for c in clips], axis=0))


def _require_finite(terms: dict[str, float]) -> None:
    if not all(np.isfinite(v) for v in terms.values()):
        raise TrainingStepError(f"non-finite loss terms: {json.dumps(terms, sort_keys=True)}")


def _f(value: torch.Tensor) -> float:
    return float(value.detach())


class Stage1Trainer:
    """Owns all Stage-I mutable state; one step = one generator update and,
    once the adversarial term is active, one discriminator-head update."""

    def __init__(self, cfg: RunConfig, device: str = "cpu"):
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.device = device
        bb = cfg.backbone
        self.encoder = Encoder3D(bb, role="hq_encoder").to(device)
        self.decoder = Decoder3D(bb).to(device)
        self.spatial = Codebook(cfg.codebooks.spatial, bb.latent_dim, "spatial").to(device)
        self.temporal = Codebook(cfg.codebooks.temporal, bb.latent_dim, "temporal").to(device)
        self.extractor = build_extractor(cfg.clients.critic_extractor).to(device)
        self.heads = HeadEnsemble(self.extractor.feature_channels).to(device)
        self.perceptual = None
        if cfg.losses.perceptual_enabled:
            self.perceptual = build_extractor(
                cfg.clients.perceptual_extractor, fallback_seed=PERCEPTUAL_FALLBACK_SEED
            ).to(device)
        generator_params = itertools.chain(
            self.encoder.parameters(),
            self.decoder.parameters(),
            self.spatial.parameters(),
            self.temporal.parameters(),
        )
        self.opt_g = torch.optim.Adam(
            generator_params, lr=cfg.stage1.lr_generator, betas=(0.9, 0.99)
        )
        self.opt_d = torch.optim.Adam(
            self.heads.parameters(), lr=cfg.stage1.lr_discriminator, betas=(0.9, 0.99)
        )
        self.state = TrainState(stage=1, seed=cfg.seed)

    @property
    def window(self) -> int:
        return self.cfg.quantize.window

    def _regularizer(self, latents: torch.Tensor, codebook: Codebook):
        kind = self.cfg.quantize.regularizer
        if kind == "mpr":
            return marginal_prior_kl(latents, codebook)
        if kind == "pdr":
            return counting_prior_kl(latents, codebook)
        raise ConfigError(f"no regularizer report for kind {kind!r}")

    def step(self, batch: torch.Tensor) -> dict:
        """One optimization step on a (B, 3, T, H, W) batch in [0, 1]."""
        cfg, losses = self.cfg, self.cfg.losses
        z = self.encoder(batch).permute(0, 2, 3, 4, 1)
        z_s, z_t = split_latents(z, self.window)
        i_s, q_s = nn_quantize(z_s, self.spatial)
        i_t, q_t = nn_quantize(z_t, self.temporal)
        z_q = q_s + q_t
        x_hat = self.decoder(straight_through(z, z_q).permute(0, 4, 1, 2, 3))

        l1 = (batch - x_hat).abs().mean()
        l_code = code_loss(z, z_q, losses.beta)
        zero = torch.zeros((), device=batch.device)
        l_per = (
            perceptual_distance(self.perceptual, batch, x_hat) if self.perceptual else zero
        )
        kl_enabled = losses.kl_enabled and cfg.quantize.regularizer != "none"
        kl_s = self._regularizer(z_s, self.spatial).kl_value if kl_enabled else zero
        kl_t = self._regularizer(z_t, self.temporal).kl_value if kl_enabled else zero

        adv_active = losses.adv_enabled and self.state.iteration >= cfg.stage1.adv_warmup
        if adv_active:
            gen_loss, disc_loss = adversarial_losses(batch, x_hat, self.extractor, self.heads)
        else:
            gen_loss, disc_loss = zero, zero

        total = (
            l1
            + l_per
            + l_code
            + losses.lambda_kl * (kl_s + kl_t)
            + losses.lambda_adv * gen_loss
        )
        terms = {
            "l1": _f(l1),
            "perceptual": _f(l_per),
            "code": _f(l_code),
            "kl_spatial": _f(kl_s),
            "kl_temporal": _f(kl_t),
            "adv_generator": _f(gen_loss),
            "adv_discriminator": _f(disc_loss),
            "total": _f(total),
        }
        _require_finite(terms)

        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        if adv_active:
            self.opt_d.zero_grad(set_to_none=True)
            disc_loss.backward()
            self.opt_d.step()

        terms["utilization_spatial"] = utilization(i_s, self.spatial.size)
        terms["utilization_temporal"] = utilization(i_t, self.temporal.size)
        self.state.iteration += 1
        terms["iteration"] = self.state.iteration
        return terms

    def reconstruct(self, video: VideoTensor) -> VideoTensor:
        """Inference-path reconstruction through the quantized bottleneck."""
        x = torch.from_numpy(video_to_batch(video)).to(self.device)
        with torch.no_grad():
            z = self.encoder(x).permute(0, 2, 3, 4, 1)
            z_s, z_t = split_latents(z, self.window)
            _, q_s = nn_quantize(z_s, self.spatial)
            _, q_t = nn_quantize(z_t, self.temporal)
            x_hat = self.decoder((q_s + q_t).permute(0, 4, 1, 2, 3))
        return batch_to_video(x_hat.clamp(0.0, 1.0).cpu().numpy(), video.frame_rate)

    def index_grids(self, video: VideoTensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Retrieved index grids for a clip under the current codebooks."""
        x = torch.from_numpy(video_to_batch(video)).to(self.device)
        with torch.no_grad():
            z = self.encoder(x).permute(0, 2, 3, 4, 1)
            z_s, z_t = split_latents(z, self.window)
            i_s, _ = nn_quantize(z_s, self.spatial)
            i_t, _ = nn_quantize(z_t, self.temporal)
        return i_s[0], i_t[0]

    def save_checkpoint(self, path: str | Path) -> Path:
        bb = self.cfg.backbone
        arrays = {}
        arrays.update(module_arrays(self.encoder, "encoder.hq"))
        arrays.update(module_arrays(self.decoder, "decoder"))
        arrays["codebook.spatial"] = self.spatial.weight.detach().cpu().numpy()
        arrays["codebook.temporal"] = self.temporal.weight.detach().cpu().numpy()
        arrays.update(module_arrays(self.heads, "critic.heads"))
        manifest = {
            "stage": 1,
            "iteration": self.state.iteration,
            "ratios": [bb.spatial_ratio, bb.temporal_ratio],
            "latent_dim": bb.latent_dim,
            "backbone": bb.to_dict(),
            "codebook_sizes": [self.spatial.size, self.temporal.size],
            "window": self.window,
            "seed": self.cfg.seed,
        }
        return save_checkpoint(path, arrays, manifest)


def run_stage1(
    cfg: RunConfig,
    clips: list[VideoTensor],
    iterations: int | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    device: str = "cpu",
) -> tuple[Stage1Trainer, list[dict]]:
    """Train Stage I on in-memory clips; returns the trainer and the
    per-iteration loss reports."""
    trainer = Stage1Trainer(cfg, device=device)
    windows = clips_to_windows(clips, cfg.stage1.clip_frames, cfg.stage1.resolution)
    data = _stack_clips(windows).to(device)
    iterations = cfg.stage1.iterations if iterations is None else iterations
    rng = np.random.default_rng(cfg.seed + 1)
    history: list[dict] = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for _ in range(iterations):
            idx = rng.choice(len(windows), size=min(cfg.stage1.batch_size, len(windows)), replace=False)
            report = trainer.step(data[np.sort(idx)])
            history.append(report)
            if log_file and trainer.state.iteration % cfg.stage1.log_every == 0:
                log_file.write(json.dumps(report, sort_keys=True) + "\n")
            if checkpoint_path and trainer.state.iteration % cfg.stage1.checkpoint_every == 0:
                trainer.save_checkpoint(checkpoint_path)
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        trainer.save_checkpoint(checkpoint_path)
    return trainer, history


class Stage2Trainer:
    """Trains the LQ encoder and both lookup transformers against the frozen
    Stage-I prior (decoder, codebooks, HQ teacher encoder)."""

    def __init__(self, cfg: RunConfig, stage1_checkpoint: str | Path, device: str = "cpu"):
        torch.manual_seed(cfg.seed + 2)
        self.cfg = cfg
        self.device = device
        arrays, manifest = load_checkpoint(stage1_checkpoint)
        if manifest.get("stage") != 1:
            raise ConfigError(f"{stage1_checkpoint} is not a Stage-I checkpoint")
        verify_ratios(manifest, cfg.backbone.spatial_ratio, cfg.backbone.temporal_ratio)
        bb = BackboneConfig.from_dict(manifest["backbone"])
        self.backbone_config = bb
        self.window = int(manifest["window"])

        self.teacher = Encoder3D(bb, role="hq_encoder").to(device)
        load_module_arrays(self.teacher, arrays, "encoder.hq")
        self.decoder = Decoder3D(bb).to(device)
        load_module_arrays(self.decoder, arrays, "decoder")
        n_s, n_t = manifest["codebook_sizes"]
        self.spatial = Codebook(n_s, bb.latent_dim, "spatial").to(device)
        self.temporal = Codebook(n_t, bb.latent_dim, "temporal").to(device)
        with torch.no_grad():
            self.spatial.weight.copy_(torch.from_numpy(np.array(arrays["codebook.spatial"])))
            self.temporal.weight.copy_(torch.from_numpy(np.array(arrays["codebook.temporal"])))
        for frozen in (self.teacher, self.decoder, self.spatial, self.temporal):
            frozen.eval()
            for p in frozen.parameters():
                p.requires_grad_(False)

        self.encoder_lq = Encoder3D(bb, role="lq_encoder").to(device)
        self.encoder_lq.load_state_dict(self.teacher.state_dict())

        s2 = cfg.stage2
        if s2.resolution % bb.spatial_ratio or s2.clip_frames % bb.temporal_ratio:
            raise ConfigError(
                f"stage-2 resolution {s2.resolution}/frames {s2.clip_frames} not divisible "
                f"by ratios {bb.spatial_ratio}/{bb.temporal_ratio}"
            )
        self.grid_size = (
            s2.clip_frames // bb.temporal_ratio,
            s2.resolution // bb.spatial_ratio,
            s2.resolution // bb.spatial_ratio,
        )
        self.lookup_spatial = LookupTransformer(
            "spatial", self.grid_size, n_s, bb.latent_dim,
            layers=s2.transformer_layers, heads=s2.transformer_heads,
        ).to(device)
        self.lookup_temporal = LookupTransformer(
            "temporal", self.grid_size, n_t, bb.latent_dim,
            layers=s2.transformer_layers, heads=s2.transformer_heads,
        ).to(device)
        self.optimizer = torch.optim.Adam(
            itertools.chain(
                self.encoder_lq.parameters(),
                self.lookup_spatial.parameters(),
                self.lookup_temporal.parameters(),
            ),
            lr=s2.lr,
            betas=(0.9, 0.99),
        )
        self.switch_iteration = int(round(s2.noise_free_fraction * s2.iterations))
        self.degrade_rng = np.random.default_rng(cfg.seed + 3)
        self.ranges = DegradationRanges(
            sigma=cfg.degrade.sigma, scale=cfg.degrade.scale,
            noise=cfg.degrade.noise, crf=cfg.degrade.crf,
        )
        self.stage1_manifest = manifest
        self.state = TrainState(stage=2, seed=cfg.seed)

    def degrade_clip(self, clip: VideoTensor, phase: str) -> VideoTensor:
        if self.cfg.stage2.degradation == "identity":
            return clip
        params = sample_params(self.degrade_rng, self.ranges, noise_free=phase == "noise_free")
        degraded, _ = degrade_video(clip, params, codec_mode=self.cfg.degrade.codec)
        return degraded

    def teacher_targets(self, hq: torch.Tensor):
        """Ground-truth index grids and fused quantized latents from the
        frozen HQ path."""
        with torch.no_grad():
            z_h = self.teacher(hq).permute(0, 2, 3, 4, 1)
            z_s, z_t = split_latents(z_h, self.window)
            i_s, q_s = nn_quantize(z_s, self.spatial)
            i_t, q_t = nn_quantize(z_t, self.temporal)
        return i_s, i_t, q_s + q_t

    def step(self, clips: list[VideoTensor]) -> dict:
        cfg = self.cfg
        phase = incremental_phase(self.state.iteration, self.switch_iteration)
        self.state.phase = phase
        lq = [self.degrade_clip(c, phase) for c in clips]
        x_hq = _stack_clips(clips).to(self.device)
        x_lq = _stack_clips(lq).to(self.device)

        i_s, i_t, z_q = self.teacher_targets(x_hq)
        z_l = self.encoder_lq(x_lq).permute(0, 2, 3, 4, 1)
        z_ls, z_lt = split_latents(z_l, self.window)
        logits_s = self.lookup_spatial(flatten_grid(z_ls))
        logits_t = self.lookup_temporal(flatten_grid(z_lt))
        ce_s = cross_entropy_codes(logits_s, i_s)
        ce_t = cross_entropy_codes(logits_t, i_t)
        l_code = stage2_code_loss(z_l, z_q)
        total = l_code + cfg.losses.lambda_ce * (ce_s + ce_t)

        terms = {
            "code": _f(l_code),
            "ce_spatial": _f(ce_s),
            "ce_temporal": _f(ce_t),
            "total": _f(total),
        }
        _require_finite(terms)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()

        with torch.no_grad():
            acc_s = (first_argmax(logits_s) == i_s.reshape(i_s.shape[0], -1)).float().mean()
            acc_t = (first_argmax(logits_t) == i_t.reshape(i_t.shape[0], -1)).float().mean()
        terms["accuracy_spatial"] = float(acc_s)
        terms["accuracy_temporal"] = float(acc_t)
        terms["phase"] = phase
        self.state.iteration += 1
        terms["iteration"] = self.state.iteration
        return terms

    def save_checkpoint(self, path: str | Path) -> Path:
        bb = self.backbone_config
        arrays = {}
        arrays.update(module_arrays(self.encoder_lq, "encoder.lq"))
        arrays.update(module_arrays(self.lookup_spatial, "lookup.spatial"))
        arrays.update(module_arrays(self.lookup_temporal, "lookup.temporal"))
        manifest = {
            "stage": 2,
            "iteration": self.state.iteration,
            "phase": self.state.phase,
            "ratios": [bb.spatial_ratio, bb.temporal_ratio],
            "latent_dim": bb.latent_dim,
            "backbone": bb.to_dict(),
            "codebook_sizes": [self.spatial.size, self.temporal.size],
            "window": self.window,
            "flatten_order": "thw",
            "grid_size": list(self.grid_size),
            "train_resolution": self.cfg.stage2.resolution,
            "train_frames": self.cfg.stage2.clip_frames,
            "transformer": {
                "layers": self.cfg.stage2.transformer_layers,
                "heads": self.cfg.stage2.transformer_heads,
            },
            "seed": self.cfg.seed,
        }
        return save_checkpoint(path, arrays, manifest)


def run_stage2(
    cfg: RunConfig,
    clips: list[VideoTensor],
    stage1_checkpoint: str | Path,
    iterations: int | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    device: str = "cpu",
) -> tuple[Stage2Trainer, list[dict]]:
    trainer = Stage2Trainer(cfg, stage1_checkpoint, device=device)
    windows = clips_to_windows(clips, cfg.stage2.clip_frames, cfg.stage2.resolution)
    iterations = cfg.stage2.iterations if iterations is None else iterations
    rng = np.random.default_rng(cfg.seed + 4)
    history: list[dict] = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for _ in range(iterations):
            idx = rng.choice(
                len(windows), size=min(cfg.stage2.batch_size, len(windows)), replace=False
            )
            report = trainer.step([windows[i] for i in np.sort(idx)])
            history.append(report)
            if log_file and trainer.state.iteration % cfg.stage2.log_every == 0:
                log_file.write(json.dumps(report, sort_keys=True) + "\n")
            if checkpoint_path and trainer.state.iteration % cfg.stage2.checkpoint_every == 0:
                trainer.save_checkpoint(checkpoint_path)
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        trainer.save_checkpoint(checkpoint_path)
    return trainer, history


@dataclass
class Stage1Bundle:
    backbone: BackboneConfig
    window: int
    decoder: Decoder3D
    spatial: Codebook
    temporal: Codebook
    manifest: dict


@dataclass
class Stage2Bundle:
    encoder_lq: Encoder3D
    lookup_spatial: LookupTransformer
    lookup_temporal: LookupTransformer
    grid_size: tuple[int, int, int]
    train_resolution: int
    train_frames: int
    manifest: dict


def load_stage1_bundle(path: str | Path, device: str = "cpu") -> Stage1Bundle:
    arrays, manifest = load_checkpoint(path)
    if manifest.get("stage") != 1:
        raise ConfigError(f"{path} is not a Stage-I checkpoint")
    bb = BackboneConfig.from_dict(manifest["backbone"])
    decoder = Decoder3D(bb).to(device)
    load_module_arrays(decoder, arrays, "decoder")
    n_s, n_t = manifest["codebook_sizes"]
    spatial = Codebook(n_s, bb.latent_dim, "spatial").to(device)
    temporal = Codebook(n_t, bb.latent_dim, "temporal").to(device)
    with torch.no_grad():
        spatial.weight.copy_(torch.from_numpy(np.array(arrays["codebook.spatial"])))
        temporal.weight.copy_(torch.from_numpy(np.array(arrays["codebook.temporal"])))
    for module in (decoder, spatial, temporal):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
    return Stage1Bundle(bb, int(manifest["window"]), decoder, spatial, temporal, manifest)


def load_stage2_bundle(
    path: str | Path, stage1: Stage1Bundle, device: str = "cpu"
) -> Stage2Bundle:
    arrays, manifest = load_checkpoint(path)
    if manifest.get("stage") != 2:
        raise ConfigError(f"{path} is not a Stage-II checkpoint")
    verify_ratios(manifest, stage1.backbone.spatial_ratio, stage1.backbone.temporal_ratio)
    if manifest["codebook_sizes"] != [stage1.spatial.size, stage1.temporal.size]:
        raise ConfigError("stage-2 checkpoint codebook sizes do not match stage-1 checkpoint")
    bb = BackboneConfig.from_dict(manifest["backbone"])
    encoder_lq = Encoder3D(bb, role="lq_encoder").to(device)
    load_module_arrays(encoder_lq, arrays, "encoder.lq")
    grid = tuple(manifest["grid_size"])
    tf = manifest["transformer"]
    lookup_s = LookupTransformer(
        "spatial", grid, stage1.spatial.size, bb.latent_dim,
        layers=tf["layers"], heads=tf["heads"],
    ).to(device)
    load_module_arrays(lookup_s, arrays, "lookup.spatial")
    lookup_t = LookupTransformer(
        "temporal", grid, stage1.temporal.size, bb.latent_dim,
        layers=tf["layers"], heads=tf["heads"],
    ).to(device)
    load_module_arrays(lookup_t, arrays, "lookup.temporal")
    for module in (encoder_lq, lookup_s, lookup_t):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
    return Stage2Bundle(
        encoder_lq,
        lookup_s,
        lookup_t,
        grid,
        int(manifest["train_resolution"]),
        int(manifest["train_frames"]),
        manifest,
    )


def enhance(lq: VideoTensor, stage1: Stage1Bundle, stage2: Stage2Bundle) -> VideoTensor:
    """Full inference path: LQ encoder, code prediction, frozen decoder.

    The input must match the Stage-II training resolution (learned position
    embeddings) and its frame count must be a multiple of the training
    window; longer videos are processed window by window.
    """
    t, h, w, _ = lq.frames.shape
    res = stage2.train_resolution
    if (h, w) != (res, res):
        raise ShapeError(
            f"input is {h}x{w} but the lookup transformers were trained at {res}x{res} "
            f"(learned position embeddings fix the resolution)"
        )
    win = stage2.train_frames
    if t % win != 0:
        raise ShapeError(f"axis T: {t} frames not divisible by the {win}-frame window")

    out = []
    for start in range(0, t, win):
        chunk = VideoTensor(lq.frames[start : start + win], lq.frame_rate)
        x = torch.from_numpy(video_to_batch(chunk))
        with torch.no_grad():
            z_l = stage2.encoder_lq(x).permute(0, 2, 3, 4, 1)
            z_ls, z_lt = split_latents(z_l, stage1.window)
            _, i_s = predict_codes(z_ls, stage2.lookup_spatial)
            _, i_t = predict_codes(z_lt, stage2.lookup_temporal)
            z_q = assemble_quantized(i_s[0], i_t[0], stage1.spatial, stage1.temporal)
            y = stage1.decoder(z_q.permute(3, 0, 1, 2)[None])
        out.append(y.clamp(0.0, 1.0)[0].permute(1, 2, 3, 0).cpu().numpy())
    return VideoTensor(np.concatenate(out, axis=0), lq.frame_rate)
