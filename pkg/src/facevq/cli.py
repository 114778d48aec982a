"""Command-line surface tying the modules into reproducible runs.

Every command takes a run-config file (plus a small override set) and
writes its artifacts under an output root together with a run manifest
sufficient to re-execute it: config hash, seeds and checkpoint hashes.
Exit codes: 0 success, 2 config error, 3 data error, 4 external-tool error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import cv2
import numpy as np

from . import __version__
from .checkpoint import file_sha256
from .config import RunConfig, config_hash, load_config
from .curate import StubOcrClient, curate_video, load_face_sidecar
from .dataio import (
    DEGRADATION_SIDECAR,
    VideoTensor,
    list_dataset,
    load_video_dir,
    quantize_frames,
    save_video_dir,
)
from .degrade import (
    DegradationRanges,
    FlickerSpec,
    brightness_flicker,
    degrade_video,
    pixel_flicker,
    sample_params,
)
from .errors import ConfigError, DataError, ExternalToolError, FaceVQError
from .metrics import codebook_report, evaluate_pair, temporal_profile
from .training import (
    enhance as run_enhance,
    load_stage1_bundle,
    load_stage2_bundle,
    run_stage1,
    run_stage2,
)


def _load_clips(root: str | Path) -> tuple[list[str], list[VideoTensor]]:
    dirs = list_dataset(root)
    return [d.name for d in dirs], [load_video_dir(d) for d in dirs]


def _write_run_manifest(out_dir: Path, command: str, cfg: RunConfig | None, **extra) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "package_version": __version__}
    if cfg is not None:
        manifest["config_hash"] = config_hash(cfg)
        manifest["seed"] = cfg.seed
    manifest.update(extra)
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _apply_overrides(cfg: RunConfig, seed: int | None, out: str | None) -> RunConfig:
    import dataclasses

    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if out is not None:
        updates["output_root"] = out
    return dataclasses.replace(cfg, **updates) if updates else cfg


@click.group()
@click.version_option(__version__)
def cli() -> None:
    """Blind face-video enhancement toolchain."""


config_option = click.option(
    "--config", "config_path", required=True, type=click.Path(), help="Run-config YAML file."
)
dry_run_option = click.option(
    "--dry-run", is_flag=True, help="Validate config and data, then exit without compute."
)
seed_option = click.option("--seed", type=int, default=None, help="Override the config seed.")
iters_option = click.option("--iters", type=int, default=None, help="Override iteration count.")
out_option = click.option("--out", type=click.Path(), default=None, help="Override output root.")


@cli.command("train-stage1")
@config_option
@seed_option
@iters_option
@out_option
@dry_run_option
def train_stage1(config_path, seed, iters, out, dry_run) -> None:
    """Train the HQ codec, codebooks and critic heads by reconstruction."""
    cfg = _apply_overrides(load_config(config_path), seed, out)
    names, clips = _load_clips(cfg.dataset_root)
    out_dir = Path(cfg.output_root) / "stage1"
    if dry_run:
        click.echo(f"config ok ({config_hash(cfg)[:12]}), {len(clips)} videos, dry run")
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "stage1.ckpt"
    trainer, history = run_stage1(
        cfg, clips, iterations=iters,
        log_path=out_dir / "train_log.jsonl", checkpoint_path=ckpt,
    )
    i_s, i_t = [], []
    for clip in clips:
        s, t = trainer.index_grids(_first_window(clip, cfg.stage1.clip_frames))
        i_s.append(s.numpy())
        i_t.append(t.numpy())
    report = codebook_report(
        np.concatenate([a.reshape(-1) for a in i_s]),
        np.concatenate([a.reshape(-1) for a in i_t]),
        cfg.codebooks.spatial,
        cfg.codebooks.temporal,
    )
    (out_dir / "codebook_report.json").write_text(json.dumps(report.to_dict(), indent=2))
    _write_run_manifest(
        out_dir, "train-stage1", cfg,
        iterations=trainer.state.iteration,
        checkpoint=str(ckpt), checkpoint_sha256=file_sha256(ckpt),
        final_loss={k: v for k, v in history[-1].items()},
        videos=names,
    )
    click.echo(f"stage-1 checkpoint written to {ckpt}")


def _first_window(clip: VideoTensor, frames: int) -> VideoTensor:
    if clip.frames.shape[0] < frames:
        raise DataError(f"clip has {clip.frames.shape[0]} frames, need {frames}")
    return VideoTensor(clip.frames[:frames], clip.frame_rate)


@cli.command("train-stage2")
@config_option
@seed_option
@iters_option
@out_option
@dry_run_option
def train_stage2(config_path, seed, iters, out, dry_run) -> None:
    """Train the LQ encoder and lookup transformers against the frozen prior."""
    cfg = _apply_overrides(load_config(config_path), seed, out)
    if not cfg.stage2.stage1_checkpoint:
        raise ConfigError("stage2.stage1_checkpoint must be set for train-stage2")
    if not Path(cfg.stage2.stage1_checkpoint).exists():
        raise ConfigError(f"stage-1 checkpoint not found: {cfg.stage2.stage1_checkpoint}")
    names, clips = _load_clips(cfg.dataset_root)
    out_dir = Path(cfg.output_root) / "stage2"
    if dry_run:
        click.echo(f"config ok ({config_hash(cfg)[:12]}), {len(clips)} videos, dry run")
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "stage2.ckpt"
    trainer, history = run_stage2(
        cfg, clips, cfg.stage2.stage1_checkpoint, iterations=iters,
        log_path=out_dir / "train_log.jsonl", checkpoint_path=ckpt,
    )
    _write_run_manifest(
        out_dir, "train-stage2", cfg,
        iterations=trainer.state.iteration,
        stage1_checkpoint_sha256=file_sha256(cfg.stage2.stage1_checkpoint),
        checkpoint=str(ckpt), checkpoint_sha256=file_sha256(ckpt),
        final_loss={k: v for k, v in history[-1].items()},
        videos=names,
    )
    click.echo(f"stage-2 checkpoint written to {ckpt}")


@cli.command("enhance")
@click.option("--input", "input_path", required=True, type=click.Path(), help="LQ video directory.")
@click.option("--stage1", "stage1_path", required=True, type=click.Path())
@click.option("--stage2", "stage2_path", required=True, type=click.Path())
@click.option("--output", "output_path", required=True, type=click.Path())
@click.option("--deflicker", is_flag=True, help="De-flickering preset (same path, recorded).")
@dry_run_option
def enhance_cmd(input_path, stage1_path, stage2_path, output_path, deflicker, dry_run) -> None:
    """Restore an LQ clip through the two-stage pipeline."""
    for p in (stage1_path, stage2_path):
        if not Path(p).exists():
            raise ConfigError(f"checkpoint not found: {p}")
    video = load_video_dir(input_path)
    if dry_run:
        click.echo(f"input ok: {video.frames.shape}, dry run")
        return
    stage1 = load_stage1_bundle(stage1_path)
    stage2 = load_stage2_bundle(stage2_path, stage1)
    restored = run_enhance(video, stage1, stage2)
    out_dir = Path(output_path)
    save_video_dir(restored, out_dir, provenance=f"enhance of {input_path}")
    _write_run_manifest(
        out_dir, "enhance", None,
        input=str(input_path), deflicker=deflicker,
        stage1_sha256=file_sha256(stage1_path), stage2_sha256=file_sha256(stage2_path),
    )
    click.echo(f"restored clip written to {out_dir}")


@cli.command("degrade")
@config_option
@click.option("--input", "input_root", type=click.Path(), default=None,
              help="Dataset root (defaults to the config dataset_root).")
@click.option("--output", "output_root", type=click.Path(), required=True)
@click.option("--flicker", type=click.Choice(["none", "brightness", "pixel"]), default="none")
@click.option("--p", "flicker_p", type=float, default=0.3, help="Per-frame flicker probability.")
@seed_option
@click.option("--workers", type=int, default=1, help="Parallel clip workers.")
@dry_run_option
def degrade_cmd(config_path, input_root, output_root, flicker, flicker_p, seed, workers, dry_run) -> None:
    """Synthesize LQ clips (blur, downsample, noise, codec) plus flicker."""
    cfg = _apply_overrides(load_config(config_path), seed, None)
    root = input_root or cfg.dataset_root
    dirs = list_dataset(root)
    if dry_run:
        click.echo(f"config ok ({config_hash(cfg)[:12]}), {len(dirs)} videos, dry run")
        return
    ranges = DegradationRanges(
        sigma=cfg.degrade.sigma, scale=cfg.degrade.scale,
        noise=cfg.degrade.noise, crf=cfg.degrade.crf,
    )
    rng = np.random.default_rng(cfg.seed)
    out_root = Path(output_root)

    def process(args):
        video_dir, params, flicker_seed = args
        video = load_video_dir(video_dir)
        degraded, sidecar = degrade_video(video, params, codec_mode=cfg.degrade.codec)
        if flicker != "none":
            spec = FlickerSpec(kind=flicker, p=flicker_p, seed=flicker_seed)
            apply = brightness_flicker if flicker == "brightness" else pixel_flicker
            degraded = apply(degraded, spec)
            sidecar["flicker"] = {"kind": flicker, "p": flicker_p, "seed": flicker_seed}
        out_dir = out_root / video_dir.name
        save_video_dir(degraded, out_dir, provenance=f"degraded from {video_dir}",
                       extra_meta={"degradation_sidecar": DEGRADATION_SIDECAR})
        (out_dir / DEGRADATION_SIDECAR).write_text(json.dumps(sidecar, indent=2))
        return video_dir.name

    jobs = [
        (d, sample_params(rng, ranges), int(rng.integers(0, 2**31 - 1))) for d in dirs
    ]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            names = list(pool.map(process, jobs))
    else:
        names = [process(j) for j in jobs]
    _write_run_manifest(out_root, "degrade", cfg, videos=names,
                        flicker=flicker, flicker_p=flicker_p)
    click.echo(f"degraded {len(names)} videos into {out_root}")


@cli.command("curate")
@config_option
@click.option("--input", "input_root", type=click.Path(), default=None)
@click.option("--output", "output_root", type=click.Path(), required=True)
@click.option("--min-motion", type=float, default=None,
              help="Reject clips whose motion intensity falls below this value.")
@dry_run_option
def curate_cmd(config_path, input_root, output_root, min_motion, dry_run) -> None:
    """Run the face-proportion / orientation / text curation pipeline."""
    cfg = load_config(config_path)
    root = input_root or cfg.dataset_root
    dirs = list_dataset(root)
    if dry_run:
        click.echo(f"config ok ({config_hash(cfg)[:12]}), {len(dirs)} videos, dry run")
        return
    out_root = Path(output_root)
    out_root.mkdir(parents=True, exist_ok=True)
    threshold = cfg.curate.min_motion if min_motion is None else min_motion
    reports, survivors = [], []
    counts = {"input": len(dirs), "after_a": 0, "after_b": 0, "after_c": 0, "survivors": 0}
    for video_dir in dirs:
        video = load_video_dir(video_dir)
        boxes, landmarks = load_face_sidecar(video_dir, video.frames.shape[0])
        report, cropped = curate_video(
            video, video_dir.name, boxes, landmarks,
            ocr_client=StubOcrClient(),
            side_fraction_limit=cfg.curate.side_fraction_limit,
            min_motion=threshold,
        )
        counts["after_a"] += report.passed_a
        counts["after_b"] += report.passed_b
        counts["after_c"] += report.passed_c
        if cropped is not None:
            counts["survivors"] += 1
            survivors.append(video_dir.name)
        reports.append(report.to_dict())
        (out_root / f"{video_dir.name}.curation.json").write_text(
            json.dumps(report.to_dict(), indent=2)
        )
    (out_root / "manifest.txt").write_text("\n".join(survivors) + ("\n" if survivors else ""))
    _write_run_manifest(out_root, "curate", cfg, counts=counts)
    click.echo(
        "curation counts: "
        + " -> ".join(str(counts[k]) for k in ("input", "after_a", "after_b", "after_c"))
    )


@cli.command("evaluate")
@click.option("--result", "result_root", required=True, type=click.Path())
@click.option("--reference", "reference_root", required=True, type=click.Path())
@click.option("--output", "output_root", required=True, type=click.Path())
@dry_run_option
def evaluate_cmd(result_root, reference_root, output_root, dry_run) -> None:
    """Per-clip PSNR/SSIM reports plus corpus aggregates for paired datasets."""
    result_dirs = list_dataset(result_root)
    reference_dirs = {d.name: d for d in list_dataset(reference_root)}
    missing = [d.name for d in result_dirs if d.name not in reference_dirs]
    if missing:
        raise DataError(f"reference missing for: {', '.join(missing)}")
    if dry_run:
        click.echo(f"{len(result_dirs)} pairs, dry run")
        return
    out_root = Path(output_root)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = {}
    for d in result_dirs:
        report = evaluate_pair(load_video_dir(d), load_video_dir(reference_dirs[d.name]))
        rows[d.name] = report.to_dict()
    aggregate = {
        key: float(np.mean([r[key] for r in rows.values()]))
        for key in ("psnr", "ssim")
    }
    payload = {"per_clip": rows, "aggregate": aggregate}
    (out_root / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    _write_run_manifest(out_root, "evaluate", None,
                        result=str(result_root), reference=str(reference_root))
    click.echo(json.dumps(aggregate))


@cli.command("profile")
@click.option("--input", "input_path", required=True, type=click.Path())
@click.option("--column", type=int, required=True)
@click.option("--output", "output_path", required=True, type=click.Path())
@dry_run_option
def profile_cmd(input_path, column, output_path, dry_run) -> None:
    """Write the temporal profile of one pixel column as a lossless image."""
    video = load_video_dir(input_path)
    if dry_run:
        click.echo(f"input ok: {video.frames.shape}, dry run")
        return
    profile = temporal_profile(video, column)
    out = Path(output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    ok = cv2.imwrite(str(out), cv2.cvtColor(quantize_frames(profile), cv2.COLOR_RGB2BGR))
    if not ok:
        raise DataError(f"failed to write profile image {out}")
    click.echo(f"profile written to {out}")


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as exc:
        exc.show()
        return 2
    except click.Abort:
        return 2
    except FaceVQError as exc:
        click.echo(f"error: {exc}", err=True)
        return getattr(exc, "exit_code", 1)


if __name__ == "__main__":
    sys.exit(main())
