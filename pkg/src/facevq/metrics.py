"""Built-in quality and consistency metrics plus pluggable metric clients.

PSNR and SSIM are computed on [0, 1] floats before any 8-bit file round
trip. Metrics that need large pretrained networks (LPIPS, FVD, identity
scores, keypoint distances, flow statistics) are not reimplemented here;
they enter reports only through configured external clients that share one
interface: submit clips, receive a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.ndimage import gaussian_filter

from .dataio import VideoTensor
from .errors import DataError

PSNR_CAP_DB = 100.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 11-tap window at sigma 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)


class EmbeddingClient(Protocol):
    """Maps a single (H, W, 3) frame to a 1-D embedding vector."""

    def embed(self, frame: np.ndarray) -> np.ndarray: ...


class ExternalMetricClient(Protocol):
    """Scalar metric backed by an external model: submit clips, get a number."""

    name: str

    def score(self, result: VideoTensor, reference: VideoTensor | None) -> float: ...


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    utilization_spatial: float | None = None
    utilization_temporal: float | None = None
    face_cons: float | None = None
    external: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"psnr": self.psnr, "ssim": self.ssim}
        for key in ("utilization_spatial", "utilization_temporal", "face_cons"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        out.update(self.external)
        return out


def _check_same_shape(a: VideoTensor, b: VideoTensor) -> None:
    if a.frames.shape != b.frames.shape:
        raise DataError(f"shape mismatch: {a.frames.shape} vs {b.frames.shape}")


def psnr(a: VideoTensor, b: VideoTensor) -> float:
    """Peak signal-to-noise ratio in dB over all pixels, capped at 100."""
    _check_same_shape(a, b)
    mse = float(np.mean((a.frames.astype(np.float64) - b.frames.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _luma(frames: np.ndarray) -> np.ndarray:
    return frames.astype(np.float64) @ LUMA_WEIGHTS


def _ssim_frame(x: np.ndarray, y: np.ndarray) -> float:
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    blur = lambda u: gaussian_filter(u, SSIM_SIGMA, truncate=SSIM_TRUNCATE)
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    ssim_map = ((2 * mx * my + c1) * (2 * sxy + c2)) / (
        (mx * mx + my * my + c1) * (sxx + syy + c2)
    )
    pad = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)  # border pixels see padding; drop them
    if ssim_map.shape[0] <= 2 * pad or ssim_map.shape[1] <= 2 * pad:
        raise DataError(f"frames too small for the {2 * pad + 1}-tap SSIM window")
    return float(ssim_map[pad:-pad, pad:-pad].mean())


def ssim(a: VideoTensor, b: VideoTensor) -> float:
    """Mean per-frame luminance SSIM (gaussian 11-tap window, k1/k2 defaults)."""
    _check_same_shape(a, b)
    la, lb = _luma(a.frames), _luma(b.frames)
    return float(np.mean([_ssim_frame(la[t], lb[t]) for t in range(la.shape[0])]))


def face_cons(video: VideoTensor, embed_client: EmbeddingClient | None) -> float | None:
    """Mean cosine similarity between the first frame's embedding and each
    later frame's. Returns None when no embedder is configured."""
    if embed_client is None:
        return None
    t = video.frames.shape[0]
    if t < 2:
        return 1.0
    ref = np.asarray(embed_client.embed(video.frames[0]), dtype=np.float64)
    sims = []
    for k in range(1, t):
        emb = np.asarray(embed_client.embed(video.frames[k]), dtype=np.float64)
        denom = np.linalg.norm(ref) * np.linalg.norm(emb)
        sims.append(float(ref @ emb / denom) if denom > 0 else 0.0)
    return float(np.mean(sims))


def temporal_profile(video: VideoTensor, column: int) -> np.ndarray:
    """Stack one pixel column from every frame along time: (H, T, 3) image.

    Output pixel (y, t) equals input pixel (t, y, column); the extraction is
    a pure permutation of the input pixels.
    """
    t, h, w, _ = video.frames.shape
    if not 0 <= column < w:
        raise DataError(f"column {column} out of range for width {w}")
    return np.ascontiguousarray(video.frames[:, :, column, :].transpose(1, 0, 2))


@dataclass
class CodebookReport:
    utilization_spatial: float
    utilization_temporal: float
    histogram_spatial: np.ndarray
    histogram_temporal: np.ndarray

    def to_dict(self) -> dict:
        return {
            "utilization_spatial": self.utilization_spatial,
            "utilization_temporal": self.utilization_temporal,
            "histogram_spatial": self.histogram_spatial.tolist(),
            "histogram_temporal": self.histogram_temporal.tolist(),
        }


def _histogram(indices, size: int) -> np.ndarray:
    flat = np.asarray(indices).reshape(-1).astype(np.int64)
    if flat.size and (flat.min() < 0 or flat.max() >= size):
        raise DataError(f"indices outside [0, {size})")
    return np.bincount(flat, minlength=size)


def codebook_report(i_s, i_t, n_s: int, n_t: int) -> CodebookReport:
    """Utilization fractions and index-frequency histograms per codebook.

    Index grids may be single clips or concatenations accumulated over a
    corpus; utilization counts items retrieved at least once.
    """
    hist_s = _histogram(i_s, n_s)
    hist_t = _histogram(i_t, n_t)
    return CodebookReport(
        utilization_spatial=float((hist_s > 0).sum()) / n_s,
        utilization_temporal=float((hist_t > 0).sum()) / n_t,
        histogram_spatial=hist_s,
        histogram_temporal=hist_t,
    )


def evaluate_pair(
    result: VideoTensor,
    reference: VideoTensor,
    embed_client: EmbeddingClient | None = None,
    external_clients: tuple[ExternalMetricClient, ...] = (),
) -> MetricReport:
    """Full per-clip report against a reference clip."""
    report = MetricReport(psnr=psnr(result, reference), ssim=ssim(result, reference))
    report.face_cons = face_cons(result, embed_client)
    for client in external_clients:
        report.external[client.name] = float(client.score(result, reference))
    return report
