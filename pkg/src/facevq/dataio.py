"""Video containers, the canonical on-disk dataset layout, and clip synthesis.

A dataset root holds one subdirectory per video. Each video directory
contains zero-padded lossless PNG frames (``000000.png``, ``000001.png``,
...) plus a ``meta.json`` manifest recording resolution, frame count,
frame rate and provenance. Degradation sidecars live next to the frames.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import DataError

FRAME_PATTERN = re.compile(r"^(\d{6})\.png$")
META_NAME = "meta.json"
DEGRADATION_SIDECAR = "degradation.json"


@dataclass
class VideoTensor:
    """A clip as a ``(T, H, W, 3)`` float32 array with values in [0, 1].

    ``frame_rate`` is metadata only; no operation depends on it.
    """

    frames: np.ndarray
    frame_rate: float = 24.0

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise DataError(
                f"video frames must have shape (T, H, W, 3), got {self.frames.shape}"
            )
        if self.frames.shape[0] < 1:
            raise DataError("video must contain at least one frame")
        if not np.isfinite(self.frames).all():
            raise DataError("video frames contain non-finite values")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape

    def clamped(self) -> "VideoTensor":
        """Copy with values clamped into [0, 1]."""
        return VideoTensor(np.clip(self.frames, 0.0, 1.0), self.frame_rate)


def video_to_batch(video: VideoTensor) -> "np.ndarray":
    """Reshape frames into the (1, 3, T, H, W) layout used by the models."""
    return np.ascontiguousarray(video.frames.transpose(3, 0, 1, 2)[None])


def batch_to_video(batch: np.ndarray, frame_rate: float = 24.0) -> VideoTensor:
    """Inverse of :func:`video_to_batch` for a single-clip batch."""
    if batch.ndim != 5 or batch.shape[0] != 1 or batch.shape[1] != 3:
        raise DataError(f"expected a (1, 3, T, H, W) batch, got {batch.shape}")
    frames = np.ascontiguousarray(batch[0].transpose(1, 2, 3, 0))
    return VideoTensor(np.clip(frames, 0.0, 1.0), frame_rate)


def quantize_frames(frames: np.ndarray) -> np.ndarray:
    """Round [0,1] floats to the 8-bit grid used by PNG storage."""
    return np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)


def save_video_dir(
    video: VideoTensor,
    path: str | Path,
    provenance: str = "unspecified",
    extra_meta: dict | None = None,
) -> Path:
    """Write a clip to ``path`` in the canonical layout.

    Frames are stored as 8-bit PNGs; saving therefore quantizes float
    values to the 1/255 grid (documented: metrics are computed on floats
    before any file round trip).
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    frames8 = quantize_frames(video.frames)
    for i, frame in enumerate(frames8):
        ok = cv2.imwrite(str(path / f"{i:06d}.png"), cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
        if not ok:
            raise DataError(f"failed to write frame {i} under {path}")
    t, h, w, _ = video.frames.shape
    meta = {
        "resolution": [int(h), int(w)],
        "frame_count": int(t),
        "frame_rate": float(video.frame_rate),
        "provenance": provenance,
    }
    if extra_meta:
        meta.update(extra_meta)
    (path / META_NAME).write_text(json.dumps(meta, indent=2))
    return path


def load_video_dir(path: str | Path) -> VideoTensor:
    """Read a clip from the canonical layout, checking numbering and shape."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"video directory not found: {path}")
    numbered = {}
    for p in path.iterdir():
        m = FRAME_PATTERN.match(p.name)
        if m:
            numbered[int(m.group(1))] = p
    if not numbered:
        raise DataError(f"no frames matching 000000.png .. under {path}")
    count = len(numbered)
    if sorted(numbered) != list(range(count)):
        raise DataError(f"frame numbering not contiguous from 0 in {path}")
    frames = []
    shape = None
    for i in range(count):
        img = cv2.imread(str(numbered[i]), cv2.IMREAD_COLOR)
        if img is None:
            raise DataError(f"unreadable frame {numbered[i]}")
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DataError(
                f"frame {i} resolution {img.shape[:2]} differs from {shape[:2]} in {path}"
            )
        frames.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB))
    stack = np.stack(frames).astype(np.float32) / 255.0
    frame_rate = 24.0
    meta_path = path / META_NAME
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        frame_rate = float(meta.get("frame_rate", frame_rate))
        if meta.get("frame_count") not in (None, count):
            raise DataError(f"manifest frame_count {meta['frame_count']} != {count} in {path}")
    return VideoTensor(stack, frame_rate)


def load_video_meta(path: str | Path) -> dict:
    meta_path = Path(path) / META_NAME
    if not meta_path.exists():
        raise DataError(f"missing {META_NAME} in {path}")
    return json.loads(meta_path.read_text())


def list_dataset(root: str | Path) -> list[Path]:
    """Sorted list of video directories under a dataset root."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    videos = sorted(p for p in root.iterdir() if p.is_dir())
    if not videos:
        raise DataError(f"dataset root {root} contains no video directories")
    return videos


@dataclass
class ClipSpec:
    """Parameters for one synthetic test clip."""

    seed: int
    frames: int = 8
    size: int = 64
    motion: float = 2.0
    static: bool = False


def make_synthetic_clip(spec: ClipSpec) -> VideoTensor:
    """Render a deterministic toy clip: smooth background plus moving blobs.

    Content is spatially smooth with a couple of colored Gaussian blobs
    translating at ``motion`` pixels per frame, which gives the codecs and
    codebooks something textured yet compressible to work with.
    """
    rng = np.random.default_rng(spec.seed)
    size, t = spec.size, spec.frames

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    base = np.stack(
        [
            0.35 + 0.25 * np.sin(2 * np.pi * (ax * xx + ay * yy + ph))
            for ax, ay, ph in rng.uniform(0.3, 1.6, size=(3, 3))
        ],
        axis=-1,
    )

    n_blobs = int(rng.integers(2, 4))
    centers = rng.uniform(0.2 * size, 0.8 * size, size=(n_blobs, 2))
    vels = rng.uniform(-1.0, 1.0, size=(n_blobs, 2))
    norms = np.maximum(np.linalg.norm(vels, axis=1, keepdims=True), 1e-6)
    vels = vels / norms * (0.0 if spec.static else spec.motion)
    radii = rng.uniform(0.08 * size, 0.2 * size, size=n_blobs)
    colors = rng.uniform(0.2, 1.0, size=(n_blobs, 3))

    out = np.empty((t, size, size, 3), dtype=np.float32)
    gy, gx = np.mgrid[0:size, 0:size].astype(np.float32)
    for k in range(t):
        frame = base.copy()
        for b in range(n_blobs):
            cy, cx = centers[b] + k * vels[b]
            blob = np.exp(-(((gy - cy) ** 2 + (gx - cx) ** 2) / (2 * radii[b] ** 2)))
            frame += blob[..., None] * (colors[b] - frame) * 0.8
        out[k] = frame
    return VideoTensor(np.clip(out, 0.0, 1.0))


def synthetic_corpus(
    n_clips: int,
    seed: int = 0,
    frames: int = 8,
    size: int = 64,
    static_fraction: float = 0.0,
) -> list[VideoTensor]:
    """A reproducible list of synthetic clips for toy runs and tests."""
    n_static = int(round(n_clips * static_fraction))
    clips = []
    for i in range(n_clips):
        clips.append(
            make_synthetic_clip(
                ClipSpec(seed=seed * 100003 + i, frames=frames, size=size, static=i < n_static)
            )
        )
    return clips
