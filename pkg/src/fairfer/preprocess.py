"""Face preprocessing pipeline and training-time augmentation.

Pipeline order: detect and crop the face, rotate so the eyes lie on one row,
convert to grayscale, stretch contrast to [0, 1], resize to 224x224.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Tuple

import cv2
import numpy as np

IMAGE_SIZE = 224
LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "mouth_left", "mouth_right")
LEFT_EYE, RIGHT_EYE, NOSE, MOUTH_LEFT, MOUTH_RIGHT = range(5)

# Landmark layout of an aligned 224x224 face, (x, y) in pixels.
CANONICAL_LANDMARKS = np.array(
    [[80.0, 96.0], [144.0, 96.0], [112.0, 132.0], [86.0, 164.0], [138.0, 164.0]]
)
PIPELINE_STEPS = ("crop", "align", "grayscale", "contrast_stretch", "resize")
PIPELINE_VERSION = "1"


class PreprocessError(ValueError):
    pass


class NoFaceDetected(PreprocessError):
    pass


class DetectorFailure(PreprocessError):
    pass


class DegenerateBox(PreprocessError):
    pass


@dataclass
class FaceImage:
    pixels: np.ndarray
    landmarks: Optional[np.ndarray] = None
    provenance: Tuple[str, ...] = ()

    @property
    def shape(self):
        return self.pixels.shape


class WholeImageFaceDetector:
    """Treats the whole frame as the face."""

    def __call__(self, image):
        h, w = image.shape[:2]
        return (0, 0, w, h)


class TemplateLandmarkDetector:
    """Returns the canonical landmark layout scaled to the input size."""

    def __init__(self, template=CANONICAL_LANDMARKS, template_size=IMAGE_SIZE):
        self.template = np.asarray(template, dtype=np.float64)
        self.template_size = template_size

    def __call__(self, image):
        h, w = image.shape[:2]
        scale = np.array([w / self.template_size, h / self.template_size])
        return self.template * scale


@dataclass
class DetectorAdapters:
    face_detector: Callable = field(default_factory=WholeImageFaceDetector)
    landmark_detector: Callable = field(default_factory=TemplateLandmarkDetector)


def to_float(image) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    if img.dtype == np.uint16:
        return img.astype(np.float32) / 65535.0
    return img.astype(np.float32)


def crop_to_box(image: np.ndarray, box) -> Tuple[np.ndarray, np.ndarray]:
    """Crop to (x0, y0, x1, y1), clipped to the frame. Returns the crop and its offset."""
    h, w = image.shape[:2]
    x0, y0, x1, y1 = (int(round(v)) for v in box)
    x0, x1 = max(0, x0), min(w, x1)
    y0, y1 = max(0, y0), min(h, y1)
    if x1 <= x0 or y1 <= y0:
        raise DegenerateBox(f"face box {box} has no area inside a {w}x{h} frame")
    return image[y0:y1, x0:x1], np.array([x0, y0], dtype=np.float64)


def eye_alignment_matrix(left_eye, right_eye) -> np.ndarray:
    """2x3 affine matrix rotating about the eye midpoint so both eyes share a row."""
    (lx, ly), (rx, ry) = left_eye, right_eye
    theta = math.atan2(ry - ly, rx - lx)
    c, s = math.cos(theta), math.sin(theta)
    cx, cy = (lx + rx) / 2.0, (ly + ry) / 2.0
    # rotation by -theta in image coordinates
    rot = np.array([[c, s], [-s, c]])
    offset = np.array([cx, cy]) - rot @ np.array([cx, cy])
    return np.hstack([rot, offset[:, None]])


def apply_affine(points: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts @ matrix[:, :2].T + matrix[:, 2]


def align_eyes(image: np.ndarray, landmarks: np.ndarray):
    left, right = landmarks[LEFT_EYE], landmarks[RIGHT_EYE]
    if np.allclose(left, right):
        raise PreprocessError("eye landmarks coincide; cannot align")
    matrix = eye_alignment_matrix(left, right)
    if np.allclose(matrix, np.eye(2, 3)):
        return image, np.asarray(landmarks, dtype=np.float64), 0.0
    h, w = image.shape[:2]
    rotated = cv2.warpAffine(image, matrix, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    angle = math.degrees(math.atan2(right[1] - left[1], right[0] - left[0]))
    return rotated, apply_affine(landmarks, matrix), angle


def to_grayscale(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image
    if image.shape[2] == 1:
        return image[..., 0]
    rgb = image[..., :3]
    return (rgb @ np.array([0.299, 0.587, 0.114], dtype=rgb.dtype)).astype(np.float32)


def contrast_stretch(pixels: np.ndarray, low_pct: float = 0.0, high_pct: float = 100.0) -> np.ndarray:
    """Map the [low_pct, high_pct] percentile range onto [0, 1]; constant images pass through."""
    x = np.asarray(pixels, dtype=np.float32)
    lo, hi = np.percentile(x, [low_pct, high_pct]) if (low_pct, high_pct) != (0.0, 100.0) else (x.min(), x.max())
    if hi <= lo:
        return np.clip(x, 0.0, 1.0)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)


def resize(pixels: np.ndarray, landmarks, size: int = IMAGE_SIZE):
    h, w = pixels.shape[:2]
    if (h, w) == (size, size):
        return pixels, landmarks
    interp = cv2.INTER_AREA if h > size or w > size else cv2.INTER_LINEAR
    out = cv2.resize(pixels, (size, size), interpolation=interp)
    if landmarks is not None:
        landmarks = landmarks * np.array([size / w, size / h])
    return out, landmarks


def preprocess(
    image,
    adapters: Optional[DetectorAdapters] = None,
    low_pct: float = 0.0,
    high_pct: float = 100.0,
    size: int = IMAGE_SIZE,
) -> FaceImage:
    adapters = adapters or DetectorAdapters()
    img = to_float(image)
    if img.size == 0:
        raise PreprocessError("empty image")

    try:
        box = adapters.face_detector(img)
    except Exception as exc:
        raise DetectorFailure(f"face detector failed: {exc}") from exc
    if box is None:
        raise NoFaceDetected("no face detected")
    face, _ = crop_to_box(img, box)

    try:
        landmarks = np.asarray(adapters.landmark_detector(face), dtype=np.float64)
    except Exception as exc:
        raise DetectorFailure(f"landmark detector failed: {exc}") from exc
    if landmarks.ndim != 2 or landmarks.shape[0] < 2 or landmarks.shape[1] != 2:
        raise DetectorFailure(f"landmark detector returned shape {landmarks.shape}, need eye centers")
    face, landmarks, _ = align_eyes(face, landmarks)

    gray = to_grayscale(face)
    gray = contrast_stretch(gray, low_pct, high_pct)
    gray, landmarks = resize(gray, landmarks, size)
    return FaceImage(np.ascontiguousarray(gray, dtype=np.float32), landmarks, PIPELINE_STEPS)


def pipeline_hash(**params) -> str:
    key = repr((PIPELINE_VERSION, PIPELINE_STEPS, sorted(params.items())))
    return hashlib.sha256(key.encode()).hexdigest()[:12]


def cache_path(cache_dir, sample_id: str, version: str) -> Path:
    safe = hashlib.sha1(sample_id.encode()).hexdigest()
    return Path(cache_dir) / version / f"{safe}.npz"


def load_cached(cache_dir, sample_id, version) -> Optional[FaceImage]:
    path = cache_path(cache_dir, sample_id, version)
    if not path.exists():
        return None
    with np.load(path) as data:
        lm = data["landmarks"] if data["landmarks"].size else None
        return FaceImage(data["pixels"], lm, tuple(str(s) for s in data["provenance"]))


def store_cached(cache_dir, sample_id, version, face: FaceImage) -> None:
    path = cache_path(cache_dir, sample_id, version)
    path.parent.mkdir(parents=True, exist_ok=True)
    lm = face.landmarks if face.landmarks is not None else np.zeros((0, 2))
    np.savez(path, pixels=face.pixels, landmarks=lm, provenance=np.array(face.provenance))


# --- augmentation -----------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    flip_p: float = 0.5
    rotation_deg: float = 15.0
    translate_frac: float = 0.1
    zoom: Tuple[float, float] = (0.9, 1.1)
    brightness: float = 0.1
    contrast: Tuple[float, float] = (0.8, 1.2)

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(flip_p=0.0, rotation_deg=0.0, translate_frac=0.0, zoom=(1.0, 1.0),
                   brightness=0.0, contrast=(1.0, 1.0))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for key in ("zoom", "contrast"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    angle: float
    shift: Tuple[float, float]
    zoom: float
    brightness: float
    contrast: float


def sample_params(policy: AugmentPolicy, rng: np.random.Generator, shape) -> AugmentParams:
    h, w = shape[:2]
    # always draw the same number of variates so one disabled transform does not shift the others
    u = rng.random(7)
    lerp = lambda lo, hi, t: lo + (hi - lo) * t  # noqa: E731
    return AugmentParams(
        flip=bool(u[0] < policy.flip_p),
        angle=lerp(-policy.rotation_deg, policy.rotation_deg, u[1]),
        shift=(lerp(-1, 1, u[2]) * policy.translate_frac * w, lerp(-1, 1, u[3]) * policy.translate_frac * h),
        zoom=lerp(policy.zoom[0], policy.zoom[1], u[4]),
        brightness=lerp(-policy.brightness, policy.brightness, u[5]),
        contrast=lerp(policy.contrast[0], policy.contrast[1], u[6]),
    )


def hflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, ::-1].copy()


def apply_params(pixels: np.ndarray, p: AugmentParams) -> np.ndarray:
    x = pixels
    if p.flip:
        x = hflip(x)
    if p.angle != 0.0 or p.zoom != 1.0 or p.shift != (0.0, 0.0):
        h, w = x.shape[:2]
        m = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), p.angle, p.zoom)
        m[:, 2] += p.shift
        x = cv2.warpAffine(x, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)
    if p.contrast != 1.0:
        mean = x.mean()
        x = (x - mean) * p.contrast + mean
    if p.brightness != 0.0:
        x = x + p.brightness
    return np.clip(x, 0.0, 1.0).astype(np.float32, copy=False)


def augment(image: FaceImage, rng_seed, policy: AugmentPolicy = AugmentPolicy()) -> FaceImage:
    """Randomly flip, rotate, shift, zoom and adjust brightness/contrast; deterministic per seed."""
    rng = np.random.default_rng(rng_seed)
    params = sample_params(policy, rng, image.pixels.shape)
    pixels = apply_params(image.pixels, params)
    return replace(image, pixels=pixels, landmarks=None, provenance=image.provenance + ("augment",))
