"""Procedural face-like images with controllable age bias.

Every image is a 224x224 grayscale composite rendered in canonical face
coordinates and then placed with a small random scale/shift:

    base face + expression patch + age wrinkles + optional confounder blend + noise

Expression patches are localized oriented stripe patterns, one location and
orientation per class. Wrinkle amplitude grows with age. A confusion
injection ``(group, true, confounder, strength)`` replaces the true patch
with ``(1 - strength) * own + strength * confounder`` for that group, which
makes those faces look like the confounder class.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple

import cv2
import numpy as np

from .labels import AGE_GROUPS, EXPRESSIONS
from .manifest import DatasetManifest, SampleRecord, write_manifest
from .preprocess import CANONICAL_LANDMARKS, IMAGE_SIZE

AGE_RANGES = {"children": (6.0, 17.0), "adults": (18.0, 59.0), "elderly": (60.0, 90.0)}

# (center x, center y, orientation in degrees, period in pixels) in canonical coordinates.
# Patches off the midline get a mirrored twin so horizontal flips never turn
# one class's pattern into another's.
SIGNATURES = {
    "neutral": (112.0, 56.0, 0.0, 9.0),
    "happiness": (84.0, 178.0, 90.0, 8.0),
    "sadness": (62.0, 146.0, 45.0, 10.0),
    "surprise": (112.0, 198.0, 90.0, 11.0),
    "fear": (74.0, 66.0, 90.0, 12.0),
    "anger": (112.0, 106.0, 0.0, 7.0),
    "disgust": (94.0, 146.0, 0.0, 6.0),
}
SIGNATURE_SIGMA = 11.0
WRINKLE_SITES = ((42.0, 98.0), (182.0, 98.0), (78.0, 118.0), (146.0, 118.0))


def _sites(cx, cy, angle, period):
    sites = [(cx, cy, angle, period)]
    if cx != IMAGE_SIZE / 2:
        sites.append((IMAGE_SIZE - cx, cy, 180.0 - angle, period))
    return sites


def signature_region(expression: str, size: int = IMAGE_SIZE, radius_sigmas: float = 2.0) -> np.ndarray:
    """Boolean mask of an expression's patch (or patch pair) in canonical coordinates."""
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=bool)
    for cx, cy, _, _ in _sites(*SIGNATURES[expression]):
        mask |= (xx - cx) ** 2 + (yy - cy) ** 2 <= (radius_sigmas * SIGNATURE_SIGMA) ** 2
    return mask


@dataclass(frozen=True)
class Confusion:
    group: str
    true: str
    confounder: str
    strength: float


@dataclass
class SynthSpec:
    counts: Mapping[Tuple[str, str], int]
    test_counts: Mapping[Tuple[str, str], int] = field(default_factory=dict)
    confusions: Sequence[Confusion] = ()
    signature_amplitude: float = 0.22
    amplitude_jitter: float = 0.3
    wrinkle_amplitude: float = 0.2
    noise_sigma: float = 0.08
    scale_jitter: float = 0.05
    shift_jitter: float = 4.0
    seed: int = 0
    size: int = IMAGE_SIZE
    name: str = "synth"

    def validate(self):
        for table in (self.counts, self.test_counts):
            for (s, a), n in table.items():
                if s not in EXPRESSIONS or a not in AGE_GROUPS:
                    raise ValueError(f"unknown cell {(s, a)}")
                if n < 0:
                    raise ValueError(f"negative count for {(s, a)}")
        exprs = {s for (s, _), n in self.counts.items() if n > 0}
        groups = {a for (_, a), n in self.counts.items() if n > 0}
        if len(exprs) < 2 or len(groups) < 2:
            raise ValueError("need at least two expressions and two age groups with samples")
        for c in self.confusions:
            if not 0.0 <= c.strength <= 1.0:
                raise ValueError(f"blend strength {c.strength} outside [0, 1]")
            if c.group not in AGE_GROUPS or c.true not in EXPRESSIONS or c.confounder not in EXPRESSIONS:
                raise ValueError(f"invalid confusion {c}")

    def to_dict(self):
        d = asdict(self)
        d["counts"] = [[s, a, n] for (s, a), n in self.counts.items()]
        d["test_counts"] = [[s, a, n] for (s, a), n in self.test_counts.items()]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["counts"] = {(s, a): n for s, a, n in d["counts"]}
        d["test_counts"] = {(s, a): n for s, a, n in d.get("test_counts", [])}
        d["confusions"] = tuple(Confusion(**c) for c in d.get("confusions", ()))
        return cls(**d)


def uniform_counts(per_group: Mapping[str, int], skip: Sequence[Tuple[str, str]] = ()):
    return {(s, a): n for a, n in per_group.items() for s in EXPRESSIONS if (s, a) not in skip}


def bias_benchmark(seed: int = 0, blend: float = 0.6, ratio: int = 10, **overrides) -> SynthSpec:
    """Elderly under-represented ``ratio``:1 against adults, elderly neutral confounded
    toward sadness and anger, and an elderly test set without "surprise"."""
    adults = 150
    spec = SynthSpec(
        counts=uniform_counts({"children": 60, "adults": adults, "elderly": adults // ratio}),
        test_counts=uniform_counts({"children": 30, "adults": 30, "elderly": 30}, skip=[("surprise", "elderly")]),
        confusions=(
            Confusion("elderly", "neutral", "sadness", blend),
            Confusion("elderly", "neutral", "anger", blend),
        ),
        # calibrated so the baseline shows an elderly-adult gap of about 0.10
        noise_sigma=0.10,
        seed=seed,
        name=f"bias-benchmark-s{seed}",
    )
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


class ImageStore:
    """Images and landmarks keyed by sample_id, held in memory and optionally mirrored to disk."""

    def __init__(self, images=None, landmarks=None, root=None):
        self.images: Dict[str, np.ndarray] = dict(images or {})
        self.landmarks: Dict[str, np.ndarray] = dict(landmarks or {})
        self.root = None if root is None else Path(root)

    def __getitem__(self, sample_id):
        return self.images[sample_id]

    def __len__(self):
        return len(self.images)

    def save(self, root, refs: Mapping[str, str]) -> Path:
        root = Path(root)
        for sid, img in self.images.items():
            path = root / refs[sid]
            path.parent.mkdir(parents=True, exist_ok=True)
            cv2.imwrite(str(path), img)
        with open(root / "landmarks.json", "w") as fh:
            json.dump({k: v.tolist() for k, v in sorted(self.landmarks.items())}, fh)
        self.root = root
        return root


def load_landmarks(root) -> Dict[str, np.ndarray]:
    path = Path(root) / "landmarks.json"
    if not path.exists():
        return {}
    with open(path) as fh:
        return {k: np.asarray(v, dtype=np.float64) for k, v in json.load(fh).items()}


def _patch(xx, yy, cx, cy, angle_deg, period, sigma=SIGNATURE_SIGMA):
    theta = np.deg2rad(angle_deg)
    envelope = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
    return envelope * np.cos(2 * np.pi * ((xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)) / period)


def _signature(xx, yy, expression):
    return sum(_patch(xx, yy, *site) for site in _sites(*SIGNATURES[expression]))


def _blob(xx, yy, cx, cy, sx, sy):
    return np.exp(-((xx - cx) ** 2 / (2 * sx ** 2) + (yy - cy) ** 2 / (2 * sy ** 2)))


def render_face(
    expression: str,
    age: float,
    rng: np.random.Generator,
    spec: SynthSpec,
    confounder: Optional[str] = None,
    strength: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Render one face; returns (uint8 image, landmarks in image pixels)."""
    size = spec.size
    k = size / IMAGE_SIZE
    scale = 1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter)
    shift = rng.uniform(-spec.shift_jitter, spec.shift_jitter, size=2) * k
    amp = spec.signature_amplitude * (1.0 - spec.amplitude_jitter * rng.random())
    face_level = 0.55 + rng.uniform(-0.05, 0.05)

    c = size / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # canonical coordinates of every output pixel
    xx = ((xx - c - shift[0]) / scale + c) / k
    yy = ((yy - c - shift[1]) / scale + c) / k

    face = 1.0 / (1.0 + np.exp(((((xx - 112) / 72) ** 2 + ((yy - 124) / 94) ** 2) - 1.0) * 12.0))
    img = 0.2 + (face_level - 0.2) * face
    (lx, ly), (rx, ry), (nx, ny), (mlx, mly), (mrx, mry) = CANONICAL_LANDMARKS
    img -= 0.3 * (_blob(xx, yy, lx, ly, 9, 5) + _blob(xx, yy, rx, ry, 9, 5))
    img -= 0.12 * _blob(xx, yy, nx, ny, 5, 9)
    img -= 0.25 * _blob(xx, yy, (mlx + mrx) / 2, (mly + mry) / 2, (mrx - mlx) / 2, 3)

    own = _signature(xx, yy, expression)
    if confounder is not None and strength > 0:
        own = (1.0 - strength) * own + strength * _signature(xx, yy, confounder)
    img += amp * own

    wrinkle = spec.wrinkle_amplitude * min(1.0, max(0.0, age / 90.0)) ** 2
    if wrinkle > 0:
        for wx, wy in WRINKLE_SITES:
            img += wrinkle * _patch(xx, yy, wx, wy, 90.0, 4.0, sigma=9.0)

    img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    out = np.clip(np.round(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8)
    landmarks = (CANONICAL_LANDMARKS * k - c) * scale + c + shift
    return out, landmarks


def _confusions_for(spec: SynthSpec, group: str, expression: str):
    return [c for c in spec.confusions if c.group == group and c.true == expression]


def generate(spec: SynthSpec, out_dir=None) -> Tuple[DatasetManifest, ImageStore]:
    """Render the training pool (``counts``) and test set (``test_counts``).

    Each sample draws from its own generator seeded by (seed, index), so the
    output does not depend on rendering order. When ``out_dir`` is given, the
    images, landmark sidecar, manifest, per-group test manifests and the spec
    itself are written there.
    """
    spec.validate()
    records, store = [], ImageStore()
    index = 0
    for split, table in (("train", spec.counts), ("test", spec.test_counts)):
        for a in AGE_GROUPS:
            lo, hi = AGE_RANGES[a]
            for s in EXPRESSIONS:
                for i in range(table.get((s, a), 0)):
                    rng = np.random.default_rng([spec.seed, index])
                    index += 1
                    age = float(rng.uniform(lo, hi))
                    confusions = _confusions_for(spec, a, s)
                    conf = confusions[rng.integers(len(confusions))] if confusions else None
                    img, lm = render_face(
                        s, age, rng, spec,
                        confounder=conf.confounder if conf else None,
                        strength=conf.strength if conf else 0.0,
                    )
                    sid = f"{split}-{a}-{s}-{i:04d}"
                    records.append(SampleRecord(sid, f"images/{sid}.png", s, age, "ground_truth", None, split))
                    store.images[sid] = img
                    store.landmarks[sid] = lm
    manifest = DatasetManifest(records, name=spec.name)
    if out_dir is not None:
        write_synth(spec, manifest, store, out_dir)
    return manifest, store


def write_synth(spec: SynthSpec, manifest: DatasetManifest, store: ImageStore, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store.save(out, {r.sample_id: r.image_ref for r in manifest})
    write_manifest(manifest.select(lambda r: r.split != "test"), out / "train.tsv")
    for a in AGE_GROUPS:
        part = manifest.select(lambda r, a=a: r.split == "test" and r.age_group == a)
        if len(part):
            write_manifest(part, out / f"test_{a}.tsv")
    with open(out / "synth_spec.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
    return out
