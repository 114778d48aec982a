"""Training-data curation: face-proportion cropping, side-face filtering,
motion-intensity scoring, and a text-presence filter hook.

Face detection, landmarking and OCR are external models and are not
implemented here. They enter through pluggable providers; the recorded-
fixture provider reads their outputs from JSON sidecars so the curation
logic itself stays testable offline. The built-in OCR client is a stub that
reports no text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import cv2
import numpy as np

from .dataio import VideoTensor
from .errors import DataError

SIDE_RATIO_LOW = 0.4
SIDE_RATIO_HIGH = 2.5
MOTION_BINARIZE_THRESHOLD = 10.0 / 255.0
CROP_MARGIN = 0.2
FACES_SIDECAR = "faces.json"

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class FaceBox:
    """Axis-aligned face rectangle in pixel coordinates."""

    x: float
    y: float
    w: float
    h: float

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)


@dataclass(frozen=True)
class FaceGeometry:
    """Eye outer corners and nose tip for one frame, in pixel coordinates."""

    left_eye: tuple[float, float]   # (x1, y1)
    right_eye: tuple[float, float]  # (x2, y2)
    nose: tuple[float, float]       # (x0, y0)


@dataclass(frozen=True)
class TextRegion:
    bbox: tuple[float, float, float, float]
    confidence: float


class OcrClient(Protocol):
    def detect(self, frame: np.ndarray) -> list[TextRegion]: ...


class StubOcrClient:
    """Built-in client: always reports no text (OCR itself is out of scope)."""

    def detect(self, frame: np.ndarray) -> list[TextRegion]:
        return []


def side_ratio(g: FaceGeometry) -> tuple[float | None, str]:
    """Face-orientation rule from eye/nose horizontal geometry.

    Pre-screen: if the left-eye corner lies right of the nose tip or the
    right-eye corner lies left of it, the face is a side face outright.
    Otherwise alpha = |x1-x0| / |x2-x0| and the face is a side face iff
    alpha < 0.4 or alpha > 2.5. Alpha is reported even for pre-screened
    cases, or None when x2 == x0 makes it undefined.
    """
    x1, x2, x0 = g.left_eye[0], g.right_eye[0], g.nose[0]
    alpha = abs(x1 - x0) / abs(x2 - x0) if x2 != x0 else None
    if x1 > x0 or x2 < x0:
        return alpha, "side"
    if alpha is None:
        return None, "side"
    verdict = "side" if alpha < SIDE_RATIO_LOW or alpha > SIDE_RATIO_HIGH else "frontal"
    return alpha, verdict


def face_crop(
    video: VideoTensor,
    boxes: Sequence[FaceBox | None],
    margin: float = CROP_MARGIN,
    target_size: int | None = None,
) -> VideoTensor:
    """Crop the whole clip with one square window and resize.

    The window is anchored on the frame whose face-area / frame-area ratio
    is maximal, expanded by ``margin`` of the box size, clamped to the frame
    bounds, and applied identically to every frame.
    """
    t, h, w, _ = video.frames.shape
    if len(boxes) != t:
        raise DataError(f"{len(boxes)} boxes for {t} frames")
    best, best_ratio = None, -1.0
    for box in boxes:
        if box is None:
            continue
        ratio = box.area / float(h * w)
        if ratio > best_ratio:
            best, best_ratio = box, ratio
    if best is None:
        raise DataError("no face box detected in any frame")

    side = min(max(best.w, best.h) * (1.0 + margin), float(min(h, w)))
    side_i = max(2, int(round(side)))
    cy, cx = best.y + best.h / 2.0, best.x + best.w / 2.0
    y0 = int(round(np.clip(cy - side_i / 2.0, 0, h - side_i)))
    x0 = int(round(np.clip(cx - side_i / 2.0, 0, w - side_i)))
    crop = video.frames[:, y0 : y0 + side_i, x0 : x0 + side_i, :]
    if target_size and target_size != side_i:
        crop = np.stack(
            [
                cv2.resize(f, (target_size, target_size), interpolation=cv2.INTER_CUBIC)
                for f in crop
            ]
        )
    return VideoTensor(np.clip(crop, 0.0, 1.0), video.frame_rate)


def motion_intensity(
    video: VideoTensor, binarize_threshold: float = MOTION_BINARIZE_THRESHOLD
) -> float:
    """Fraction of pixels whose grayscale value jumps between adjacent frames.

    Adjacent grayscale differences are binarized at the threshold and the
    nonzero counts are summed over all frame pairs, normalized by
    (T-1)*H*W. A single-frame clip scores 0.
    """
    t, h, w, _ = video.frames.shape
    if t < 2:
        return 0.0
    gray = video.frames @ LUMA_WEIGHTS
    flips = np.abs(np.diff(gray, axis=0)) > binarize_threshold
    return float(flips.sum()) / float((t - 1) * h * w)


def text_filter(
    video: VideoTensor,
    ocr_client: OcrClient,
    confidence: float = 0.5,
    frame_stride: int = 8,
) -> str:
    """'reject' iff any sampled frame contains a text region above the
    confidence threshold, 'unverified' if the client fails."""
    try:
        for i in range(0, video.frames.shape[0], max(1, frame_stride)):
            for region in ocr_client.detect(video.frames[i]):
                if region.confidence > confidence:
                    return "reject"
    except Exception:
        return "unverified"
    return "accept"


@dataclass
class CurationReport:
    video_id: str
    face_proportion: float | None = None
    orientation_alpha: float | None = None
    orientation_verdict: str | None = None
    motion: float | None = None
    text_verdict: str | None = None
    passed_a: bool = False
    passed_b: bool = False
    passed_c: bool = False
    rejected_reason: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def load_face_sidecar(video_dir: str | Path, frame_count: int):
    """Recorded-fixture provider: boxes and landmarks from ``faces.json``.

    Returns (boxes, landmarks) lists with None at frames without a record.
    Missing sidecar yields all-None lists.
    """
    path = Path(video_dir) / FACES_SIDECAR
    boxes: list[FaceBox | None] = [None] * frame_count
    marks: list[FaceGeometry | None] = [None] * frame_count
    if not path.exists():
        return boxes, marks
    data = json.loads(path.read_text())
    for i, rec in enumerate(data.get("boxes", [])[:frame_count]):
        if rec is not None:
            boxes[i] = FaceBox(*[float(v) for v in rec])
    for i, rec in enumerate(data.get("landmarks", [])[:frame_count]):
        if rec is not None:
            marks[i] = FaceGeometry(
                left_eye=tuple(rec["left_eye"]),
                right_eye=tuple(rec["right_eye"]),
                nose=tuple(rec["nose"]),
            )
    return boxes, marks


def curate_video(
    video: VideoTensor,
    video_id: str,
    boxes: Sequence[FaceBox | None],
    landmarks: Sequence[FaceGeometry | None],
    ocr_client: OcrClient | None = None,
    side_fraction_limit: float = 0.5,
    min_motion: float = 0.0,
) -> tuple[CurationReport, VideoTensor | None]:
    """Run the A (crop), B (orientation), C (text) pipeline on one clip.

    Returns the report plus the cropped clip when it survives all stages,
    else None. The stages are strictly sequential, so survivor counts are
    monotone across A, B, C.
    """
    report = CurationReport(video_id=video_id)
    report.motion = motion_intensity(video)

    t, h, w, _ = video.frames.shape
    detected = [b for b in boxes if b is not None]
    if not detected:
        report.rejected_reason = "no face detected"
        return report, None
    report.face_proportion = max(b.area for b in detected) / float(h * w)
    cropped = face_crop(video, boxes)
    report.passed_a = True

    verdicts: list[str] = []
    alphas: list[float] = []
    for g in landmarks:
        if g is None:
            continue
        alpha, verdict = side_ratio(g)
        verdicts.append(verdict)
        if alpha is not None:
            alphas.append(alpha)
    report.orientation_alpha = float(np.median(alphas)) if alphas else None
    if verdicts:
        side_fraction = verdicts.count("side") / len(verdicts)
        report.orientation_verdict = "side" if side_fraction > side_fraction_limit else "frontal"
    else:
        report.orientation_verdict = "frontal"  # no landmarks recorded: cannot pre-screen
    if report.orientation_verdict == "side":
        report.rejected_reason = "side-face dominated"
        return report, None
    report.passed_b = True

    report.text_verdict = text_filter(video, ocr_client or StubOcrClient())
    if report.text_verdict == "reject":
        report.rejected_reason = "text detected"
        return report, None
    report.passed_c = True

    if report.motion < min_motion:
        report.rejected_reason = "motion below threshold"
        return report, None
    return report, cropped
