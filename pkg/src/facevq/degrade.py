"""Low-quality input synthesis: blur, downsample, noise, codec, upsample.

The chain runs in that order with one parameter record per clip, so every
frame of a clip sees the same blur kernel, scale and noise level. The codec
stage round-trips through an external encoder when one is available; a
deterministic blockwise-DCT quantization proxy stands in otherwise (and is
the mode bit-exact tests rely on). Flicker injection is separate: per-frame
brightness jumps and a texture-perturbation proxy for per-frame detail
inconsistency.
"""

from __future__ import annotations

import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.fft import dctn, idctn

from .dataio import VideoTensor
from .errors import ConfigError, ExternalToolError

FFMPEG_ENV_VAR = "FACEVQ_FFMPEG"
_BLOCK = 8


@dataclass(frozen=True)
class DegradationRanges:
    sigma: tuple[float, float] = (2.0, 5.0)
    scale: tuple[float, float] = (2.0, 4.0)
    noise: tuple[float, float] = (0.0, 5.0)
    crf: tuple[int, int] = (18, 32)

    def __post_init__(self) -> None:
        for name in ("sigma", "scale", "noise", "crf"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"inverted {name} range: [{lo}, {hi}]")


@dataclass(frozen=True)
class DegradationParams:
    """Per-video degradation record; reused for every frame of the clip."""

    sigma: float
    scale: float
    noise: float  # gaussian std on the 0-255 pixel scale
    crf: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "scale": self.scale,
            "noise": self.noise,
            "crf": self.crf,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class FlickerSpec:
    kind: str = "brightness"  # brightness | pixel
    p: float = 0.3
    gain_range: tuple[float, float] = (0.5, 1.5)
    bias_range: tuple[float, float] = (-0.1, 0.1)
    warp_px: float = 1.5
    noise_std: float = 0.015
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("brightness", "pixel"):
            raise ConfigError(f"flicker kind must be brightness or pixel, got {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"flicker probability must be in [0, 1], got {self.p}")


def sample_params(
    rng: np.random.Generator,
    ranges: DegradationRanges = DegradationRanges(),
    noise_free: bool = False,
) -> DegradationParams:
    """One uniform draw per field, fixed for the whole clip."""
    return DegradationParams(
        sigma=float(rng.uniform(*ranges.sigma)),
        scale=float(rng.uniform(*ranges.scale)),
        noise=0.0 if noise_free else float(rng.uniform(*ranges.noise)),
        crf=int(rng.integers(ranges.crf[0], ranges.crf[1] + 1)),
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def gaussian_blur_clip(frames: np.ndarray, sigma: float) -> np.ndarray:
    """Per-frame gaussian blur, kernel size 2*ceil(3*sigma)+1."""
    if sigma <= 0:
        return frames.copy()
    k = 2 * int(np.ceil(3.0 * sigma)) + 1
    return np.stack([cv2.GaussianBlur(f, (k, k), sigmaX=sigma, sigmaY=sigma) for f in frames])


def _even(x: float) -> int:
    return max(2, int(round(x / 2.0)) * 2)


def resample_clip(frames: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bicubic resize of every frame to (height, width)."""
    return np.stack(
        [cv2.resize(f, (width, height), interpolation=cv2.INTER_CUBIC) for f in frames]
    )


def add_gaussian_noise(frames: np.ndarray, std_255: float, seed: int) -> np.ndarray:
    """Additive gaussian noise with std given on the 0-255 scale, clamped."""
    if std_255 <= 0:
        return np.clip(frames, 0.0, 1.0)
    rng = np.random.default_rng(seed)
    noisy = frames + rng.normal(0.0, std_255 / 255.0, size=frames.shape).astype(np.float32)
    return np.clip(noisy, 0.0, 1.0)


def ffmpeg_binary() -> str:
    return os.environ.get(FFMPEG_ENV_VAR, "ffmpeg")


def external_codec_available() -> bool:
    return shutil.which(ffmpeg_binary()) is not None


def proxy_codec_roundtrip(frames: np.ndarray, crf: int) -> np.ndarray:
    """Deterministic stand-in for a codec round trip.

    Each frame channel is split into 8x8 blocks, DCT-transformed, and its
    coefficients quantized with a step that doubles every +6 CRF (the DC
    coefficient keeps a 4x finer step, mirroring how codecs preserve block
    means). Not bit-exact with any real codec; callers record proxy mode in
    the degradation sidecar.
    """
    qstep = 0.02 * 2.0 ** ((crf - 18) / 6.0)
    steps = np.full((_BLOCK, _BLOCK), qstep)
    steps[0, 0] = qstep / 4.0

    t, h, w, c = frames.shape
    ph, pw = (-h) % _BLOCK, (-w) % _BLOCK
    padded = np.pad(frames, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")
    hh, ww = padded.shape[1], padded.shape[2]
    blocks = (
        padded.transpose(0, 3, 1, 2)
        .reshape(t, c, hh // _BLOCK, _BLOCK, ww // _BLOCK, _BLOCK)
        .transpose(0, 1, 2, 4, 3, 5)
    )
    coefs = dctn(blocks, axes=(-2, -1), norm="ortho")
    coefs = np.round(coefs / steps) * steps
    restored = idctn(coefs, axes=(-2, -1), norm="ortho")
    out = (
        restored.transpose(0, 1, 2, 4, 3, 5)
        .reshape(t, c, hh, ww)
        .transpose(0, 2, 3, 1)[:, :h, :w, :]
    )
    return np.clip(out.astype(np.float32), 0.0, 1.0)


def external_codec_roundtrip(frames: np.ndarray, crf: int, frame_rate: float) -> np.ndarray:
    """Round trip through the external encoder at the given constant rate
    factor; surfaces the tool's stderr on failure."""
    binary = ffmpeg_binary()
    if shutil.which(binary) is None:
        raise ExternalToolError(
            f"external codec binary {binary!r} not found (set {FFMPEG_ENV_VAR})"
        )
    with tempfile.TemporaryDirectory(prefix="facevq_codec_") as tmp:
        tmp_path = Path(tmp)
        src = tmp_path / "src"
        dst = tmp_path / "dst"
        src.mkdir()
        dst.mkdir()
        for i, f in enumerate((np.clip(frames, 0, 1) * 255.0).round().astype(np.uint8)):
            cv2.imwrite(str(src / f"{i:06d}.png"), cv2.cvtColor(f, cv2.COLOR_RGB2BGR))
        clip = tmp_path / "clip.mp4"
        encode = [
            binary, "-y", "-loglevel", "error",
            "-framerate", f"{frame_rate}", "-i", str(src / "%06d.png"),
            "-c:v", "libx264", "-crf", str(crf), "-pix_fmt", "yuv420p", str(clip),
        ]
        decode = [
            binary, "-y", "-loglevel", "error",
            "-i", str(clip), str(dst / "%06d.png"),
        ]
        for cmd in (encode, decode):
            proc = subprocess.run(cmd, capture_output=True, text=True)
            if proc.returncode != 0:
                raise ExternalToolError(
                    f"codec command failed ({' '.join(cmd[:2])}...): {proc.stderr.strip()}"
                )
        out = []
        for i in range(frames.shape[0]):
            img = cv2.imread(str(dst / f"{i + 1:06d}.png"), cv2.IMREAD_COLOR)
            if img is None:
                raise ExternalToolError(f"codec round trip lost frame {i}")
            out.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB))
        return np.stack(out).astype(np.float32) / 255.0


def codec_roundtrip(
    frames: np.ndarray, crf: int, frame_rate: float, mode: str = "auto"
) -> tuple[np.ndarray, str]:
    """Apply the codec stage; returns (frames, mode actually used)."""
    if mode not in ("auto", "proxy", "external"):
        raise ConfigError(f"codec mode must be auto, proxy or external, got {mode!r}")
    if mode == "external" or (mode == "auto" and external_codec_available()):
        return external_codec_roundtrip(frames, crf, frame_rate), "external"
    return proxy_codec_roundtrip(frames, crf), "proxy"


def degrade_video(
    hq: VideoTensor, params: DegradationParams, codec_mode: str = "auto"
) -> tuple[VideoTensor, dict]:
    """Blur, downsample, add noise, codec round trip, upsample back.

    Returns the degraded clip plus a sidecar record of the parameters and
    the codec mode used (``bit_exact`` is False in external mode).
    """
    t, h, w, _ = hq.frames.shape
    blurred = gaussian_blur_clip(hq.frames, params.sigma)
    th, tw = _even(h / params.scale), _even(w / params.scale)
    small = resample_clip(blurred, th, tw)
    noisy = add_gaussian_noise(small, params.noise, params.seed)
    coded, mode_used = codec_roundtrip(noisy, params.crf, hq.frame_rate, codec_mode)
    restored = np.clip(resample_clip(coded, h, w), 0.0, 1.0)
    sidecar = dict(params.to_dict(), codec_mode=mode_used, bit_exact=mode_used == "proxy")
    return VideoTensor(restored, hq.frame_rate), sidecar


def brightness_flicker(video: VideoTensor, spec: FlickerSpec) -> VideoTensor:
    """Per-frame affine brightness jumps on independently selected frames."""
    rng = np.random.default_rng(spec.seed)
    out = video.frames.copy()
    for i in range(out.shape[0]):
        if rng.random() < spec.p:
            gain = rng.uniform(*spec.gain_range)
            bias = rng.uniform(*spec.bias_range)
            out[i] = np.clip(gain * out[i] + bias, 0.0, 1.0)
    return VideoTensor(out, video.frame_rate)


def pixel_flicker(video: VideoTensor, spec: FlickerSpec) -> VideoTensor:
    """Texture-perturbation proxy for per-frame detail inconsistency.

    Selected frames are warped by a smooth random displacement field and
    sprinkled with high-frequency noise; global structure stays intact.
    This deliberately replaces generative re-rendering, and callers should
    treat the output as a proxy rather than a photoreal re-render.
    """
    rng = np.random.default_rng(spec.seed)
    t, h, w, _ = video.frames.shape
    out = video.frames.copy()
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float32)
    low_h, low_w = max(2, h // 8), max(2, w // 8)
    for i in range(t):
        if rng.random() >= spec.p:
            continue
        field_small = rng.uniform(-1.0, 1.0, size=(low_h, low_w, 2)).astype(np.float32)
        disp = cv2.resize(field_small, (w, h), interpolation=cv2.INTER_CUBIC) * spec.warp_px
        map_x = np.clip(gx + disp[..., 0], 0, w - 1)
        map_y = np.clip(gy + disp[..., 1], 0, h - 1)
        warped = cv2.remap(out[i], map_x, map_y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
        noise = rng.normal(0.0, spec.noise_std, size=warped.shape).astype(np.float32)
        out[i] = np.clip(warped + noise, 0.0, 1.0)
    return VideoTensor(out, video.frame_rate)
