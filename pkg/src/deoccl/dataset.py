"""Per-user session ingestion, landmark-guided HMD masks, splits and batching."""

from __future__ import annotations

import logging
import math
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Literal, Protocol, Sequence

import numpy as np
import torch

from .imaging import (
    BinaryMask,
    ImageError,
    ImageTensor,
    ShapeError,
    apply_occlusion,
    load_image,
    load_mask,
    resize_crop,
    save_image,
    save_mask,
)

log = logging.getLogger(__name__)

MANIFEST_HEADER = "deoccl-manifest v1"
MANIFEST_NAME = "manifest.txt"


class DatasetError(Exception):
    pass


class NoFaceError(DatasetError):
    pass


class ProviderUnavailable(DatasetError):
    pass


class DegenerateEyeRegion(DatasetError):
    pass


# ---------------------------------------------------------------- landmarks


@dataclass(frozen=True)
class LandmarkSet:
    points: tuple[tuple[float, float], ...]
    schema_id: str
    eye_indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple((float(x), float(y)) for x, y in self.points))
        object.__setattr__(self, "eye_indices", tuple(int(i) for i in self.eye_indices))
        if not self.eye_indices:
            raise ValueError("eye_indices must be non-empty")
        n = len(self.points)
        if any(i < 0 or i >= n for i in self.eye_indices):
            raise ValueError("eye index out of range")

    def check_bounds(self, height: int, width: int) -> None:
        for x, y in self.points:
            if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
                raise ValueError(f"landmark ({x}, {y}) outside {width}x{height} image")

    @property
    def eye_points(self) -> list[tuple[float, float]]:
        return [self.points[i] for i in self.eye_indices]


class LandmarkProvider(Protocol):
    schema_id: str
    eye_indices: tuple[int, ...]

    def __call__(self, img: ImageTensor) -> Sequence[tuple[float, float]] | None:
        """Return landmark points, or None when no face is found."""


class SyntheticLandmarkProvider:
    """Places landmarks at fixed fractions of the frame.

    Two six-point eye contours followed by a nose tip and two mouth corners.
    Useful for tests and for corpora whose faces are already aligned.
    """

    schema_id = "synthetic-fractional-v1"
    eye_indices = tuple(range(12))

    FRACTIONS = (
        # left eye
        (0.25, 0.40), (0.30, 0.35), (0.40, 0.35), (0.45, 0.40), (0.40, 0.45), (0.30, 0.45),
        # right eye
        (0.55, 0.40), (0.60, 0.35), (0.70, 0.35), (0.75, 0.40), (0.70, 0.45), (0.60, 0.45),
        # nose tip, mouth corners
        (0.50, 0.58), (0.40, 0.72), (0.60, 0.72),
    )

    def __call__(self, img: ImageTensor):
        w, h = img.width - 1, img.height - 1
        return [(fx * w, fy * h) for fx, fy in self.FRACTIONS]


_PROVIDERS: dict[str, Callable[[], LandmarkProvider]] = {
    "synthetic": SyntheticLandmarkProvider,
}


def register_provider(name: str, factory: Callable[[], LandmarkProvider]) -> None:
    _PROVIDERS[name] = factory


def get_provider(name: str) -> LandmarkProvider:
    try:
        return _PROVIDERS[name]()
    except KeyError:
        raise ProviderUnavailable(
            f"landmark provider {name!r} not registered (have: {sorted(_PROVIDERS)})"
        ) from None


class LandmarkDetector:
    """Wraps a provider with a per-frame cache and a skipped-frame counter."""

    def __init__(self, provider: LandmarkProvider):
        self.provider = provider
        self.skipped = 0
        self.calls = 0
        self._cache: dict[str, LandmarkSet | None] = {}
        self._lock = threading.Lock()

    def __call__(self, img: ImageTensor, frame_id: str | None = None) -> LandmarkSet:
        return detect_landmarks(img, self, frame_id)


def detect_landmarks(
    img: ImageTensor, detector: LandmarkDetector, frame_id: str | None = None
) -> LandmarkSet:
    """Landmarks for ``img``, served from the detector's cache when possible.

    Raises NoFaceError (and bumps ``detector.skipped``) when the provider
    finds no face.
    """
    with detector._lock:
        if frame_id is not None and frame_id in detector._cache:
            cached = detector._cache[frame_id]
            if cached is None:
                raise NoFaceError(f"no face in frame {frame_id}")
            return cached
        detector.calls += 1
        points = detector.provider(img)
        if points is None:
            detector.skipped += 1
            if frame_id is not None:
                detector._cache[frame_id] = None
            log.info("no face found in frame %s (skipped so far: %d)", frame_id, detector.skipped)
            raise NoFaceError(f"no face in frame {frame_id}")
        result = LandmarkSet(points, detector.provider.schema_id, detector.provider.eye_indices)
        result.check_bounds(img.height, img.width)
        if frame_id is not None:
            detector._cache[frame_id] = result
        return result


# ---------------------------------------------------------------- masks


@dataclass(frozen=True)
class MaskSpec:
    horizontal_margin: float = 0.15
    vertical_margin: float = 0.60
    shape: Literal["rectangle", "rounded-rectangle"] = "rectangle"

    def __post_init__(self):
        for m in (self.horizontal_margin, self.vertical_margin):
            if not 0.0 <= m <= 1.5:
                raise ValueError(f"mask margin {m} outside [0, 1.5]")
        if self.shape not in ("rectangle", "rounded-rectangle"):
            raise ValueError(f"unknown mask shape {self.shape!r}")


def hmd_box(landmarks: LandmarkSet, spec: MaskSpec, size: int) -> tuple[int, int, int, int]:
    """Inclusive pixel box (x0, y0, x1, y1) covered by the HMD mask.

    Pixel p covers [p, p+1); every pixel whose cell touches the expanded
    continuous eye box is included.
    """
    xs = [p[0] for p in landmarks.eye_points]
    ys = [p[1] for p in landmarks.eye_points]
    w, h = max(xs) - min(xs), max(ys) - min(ys)
    if w <= 0 or h <= 0:
        raise DegenerateEyeRegion(f"eye region has zero area ({w} x {h})")
    x0 = min(xs) - spec.horizontal_margin * w
    x1 = max(xs) + spec.horizontal_margin * w
    y0 = min(ys) - spec.vertical_margin * h
    y1 = max(ys) + spec.vertical_margin * h
    clip = lambda v: min(max(v, 0), size - 1)  # noqa: E731
    return clip(math.floor(x0)), clip(math.floor(y0)), clip(math.floor(x1)), clip(math.floor(y1))


def synthesize_hmd_mask(landmarks: LandmarkSet, spec: MaskSpec, size: int) -> BinaryMask:
    landmarks.check_bounds(size, size)
    x0, y0, x1, y1 = hmd_box(landmarks, spec, size)
    mask = np.zeros((size, size), dtype=np.float32)
    mask[y0 : y1 + 1, x0 : x1 + 1] = 1.0
    if spec.shape == "rounded-rectangle":
        xs = [p[0] for p in landmarks.eye_points]
        ys = [p[1] for p in landmarks.eye_points]
        # radius bounded by the post-clipping margins so the eye box is never cut
        margins = (min(xs) - x0, x1 + 1 - max(xs), min(ys) - y0, y1 + 1 - max(ys))
        r = min(*margins, 0.25 * min(x1 - x0 + 1, y1 - y0 + 1))
        if r >= 1:
            yy, xx = np.mgrid[0:size, 0:size] + 0.5  # pixel centres
            for sx in (-1, 1):
                for sy in (-1, 1):
                    cx = x0 + r if sx < 0 else x1 + 1 - r
                    cy = y0 + r if sy < 0 else y1 + 1 - r
                    outside = (sx * (xx - cx) > 0) & (sy * (yy - cy) > 0)
                    outside &= (xx - cx) ** 2 + (yy - cy) ** 2 > r * r
                    mask[outside] = 0.0
    out = BinaryMask(mask[None])
    if out.area in (0, size * size):
        raise DegenerateEyeRegion("mask must contain both occluded and visible pixels")
    return out


# ---------------------------------------------------------------- samples


@dataclass(frozen=True)
class Sample:
    occluded: ImageTensor
    mask: BinaryMask
    ground_truth: ImageTensor
    frame_id: str = ""
    session_id: str = ""

    def __post_init__(self):
        shapes = {
            (self.occluded.height, self.occluded.width),
            (self.mask.height, self.mask.width),
            (self.ground_truth.height, self.ground_truth.width),
        }
        if len(shapes) != 1:
            raise ShapeError(f"sample components disagree in size: {shapes}")
        visible = self.mask.data[0] == 0.0
        if not np.array_equal(self.occluded.data[:, visible], self.ground_truth.data[:, visible]):
            raise ValueError("occluded image differs from ground truth outside the mask")


def make_sample(
    gt: ImageTensor, mask: BinaryMask, fill: float = -1.0, frame_id: str = "", session_id: str = ""
) -> Sample:
    return Sample(apply_occlusion(gt, mask, fill), mask, gt, frame_id, session_id)


# ---------------------------------------------------------------- sessions


@dataclass(frozen=True)
class SessionManifest:
    session_id: str
    subject_id: str
    appearance_tag: str
    frames: tuple[str, ...]
    root: Path | None = field(default=None, compare=False)

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def frame_path(self, i: int) -> Path:
        return self.root / self.frames[i]

    def mask_path(self, i: int) -> Path:
        return self.root / "masks" / Path(self.frames[i]).name

    def frame_id(self, i: int) -> str:
        return f"{self.subject_id}/{self.session_id}/{Path(self.frames[i]).stem}"

    def to_text(self) -> str:
        lines = [
            MANIFEST_HEADER,
            f"subject_id={self.subject_id}",
            f"session_id={self.session_id}",
            f"appearance_tag={self.appearance_tag}",
            f"frame_count={self.frame_count}",
            *self.frames,
        ]
        return "\n".join(lines) + "\n"

    def write(self) -> Path:
        path = self.root / MANIFEST_NAME
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    def validate(self) -> None:
        missing = [f for f in self.frames if not (self.root / f).is_file()]
        if missing:
            raise DatasetError(f"{len(missing)} listed frames missing, e.g. {missing[0]}")


def read_manifest(path: str | Path) -> SessionManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise DatasetError(f"{path}: missing '{MANIFEST_HEADER}' header")
    meta, frames = {}, []
    for line in lines[1:]:
        if not line:
            continue
        if "=" in line and not frames:
            key, value = line.split("=", 1)
            meta[key] = value
        else:
            frames.append(line)
    try:
        count = int(meta["frame_count"])
        manifest = SessionManifest(
            meta["session_id"], meta["subject_id"], meta["appearance_tag"], tuple(frames), path.parent
        )
    except KeyError as exc:
        raise DatasetError(f"{path}: missing key {exc}") from None
    if count != manifest.frame_count:
        raise DatasetError(f"{path}: frame_count={count} but {manifest.frame_count} paths listed")
    return manifest


def ingest_session(
    frames_dir: str | Path,
    subject_id: str,
    appearance_tag: str,
    target_size: int,
    data_root: str | Path,
    session_id: str | None = None,
    face_box: tuple[int, int, int, int] | None = None,
) -> SessionManifest:
    """Crop/scale every PNG in ``frames_dir`` into the normalized layout
    ``<data_root>/<subject>/<session>/frames/%06d.png`` and write the manifest."""
    frames_dir = Path(frames_dir)
    if not frames_dir.is_dir():
        raise DatasetError(f"frames directory {frames_dir} does not exist")
    sources = sorted(p for p in frames_dir.iterdir() if p.suffix.lower() == ".png")
    if not sources:
        raise DatasetError(f"no frames in {frames_dir}")
    session_id = session_id or frames_dir.name
    session_root = Path(data_root) / subject_id / session_id
    names = []
    for i, src in enumerate(sources):
        try:
            img = load_image(src, "signed").to_rgb()
        except ImageError as exc:
            raise DatasetError(f"undecodable frame {src.name}: {exc}") from exc
        name = f"frames/{i:06d}.png"
        save_image(resize_crop(img, target_size, face_box), session_root / name)
        names.append(name)
    manifest = SessionManifest(session_id, subject_id, appearance_tag, tuple(names), session_root)
    manifest.write()
    return manifest


@dataclass
class MaskPassResult:
    manifest: SessionManifest
    written: int
    skipped: list[str]


def synthesize_session_masks(
    manifest: SessionManifest, detector: LandmarkDetector, spec: MaskSpec
) -> MaskPassResult:
    """Detect landmarks on every frame and write ``masks/<name>.png``.

    Frames without a usable face are deleted and dropped from the manifest,
    which is rewritten.
    """
    keep, skipped = [], []
    for i, name in enumerate(manifest.frames):
        img = load_image(manifest.frame_path(i), "signed")
        fid = manifest.frame_id(i)
        try:
            mask = synthesize_hmd_mask(detector(img, fid), spec, img.height)
        except (NoFaceError, DegenerateEyeRegion) as exc:
            log.info("skipping %s: %s", fid, exc)
            skipped.append(fid)
            manifest.frame_path(i).unlink()
            continue
        save_mask(mask, manifest.mask_path(i))
        keep.append(name)
    if not keep:
        raise DatasetError(f"no usable frames in session {manifest.session_id}")
    kept = SessionManifest(manifest.session_id, manifest.subject_id, manifest.appearance_tag, tuple(keep), manifest.root)
    kept.write()
    return MaskPassResult(kept, len(keep), skipped)


def discover_sessions(data_root: str | Path) -> list[SessionManifest]:
    root = Path(data_root)
    return [read_manifest(p) for p in sorted(root.glob(f"*/*/{MANIFEST_NAME}"))]


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class DatasetSplit:
    train_sessions: tuple[SessionManifest, ...]
    test_sessions: tuple[SessionManifest, ...]

    def __post_init__(self):
        train_ids = {(s.subject_id, s.session_id) for s in self.train_sessions}
        test_ids = {(s.subject_id, s.session_id) for s in self.test_sessions}
        if train_ids & test_ids:
            raise ValueError(f"sessions in both train and test: {sorted(train_ids & test_ids)}")
        train_tags = defaultdict(set)
        for s in self.train_sessions:
            train_tags[s.subject_id].add(s.appearance_tag)
        for s in self.test_sessions:
            if s.subject_id not in train_tags:
                raise ValueError(f"test subject {s.subject_id} has no training sessions")
            if s.appearance_tag in train_tags[s.subject_id]:
                raise ValueError(
                    f"test session {s.session_id} reuses training appearance {s.appearance_tag}"
                )

    def sessions(self, role: str) -> tuple[SessionManifest, ...]:
        if role == "train":
            return self.train_sessions
        if role == "test":
            return self.test_sessions
        raise ValueError(f"role must be 'train' or 'test', got {role!r}")


def split_sessions(
    manifests: Sequence[SessionManifest],
    holdout: Sequence[str] | dict[str, Sequence[str]] | None = None,
) -> DatasetSplit:
    """Appearance-holdout split: sessions whose appearance tag is held out for
    their subject go to test, the rest to train.

    ``holdout`` is a tag list applied to every subject, a per-subject mapping,
    or None to hold out each subject's lexicographically last tag.
    """
    by_subject: dict[str, list[SessionManifest]] = defaultdict(list)
    for m in manifests:
        by_subject[m.subject_id].append(m)
    train, test = [], []
    for subject in sorted(by_subject):
        sessions = by_subject[subject]
        tags = sorted({s.appearance_tag for s in sessions})
        if len(tags) < 2:
            raise DatasetError(
                f"subject {subject} has a single appearance {tags}; cannot hold out an unseen one"
            )
        if holdout is None:
            held = {tags[-1]}
        elif isinstance(holdout, dict):
            held = set(holdout.get(subject, ()))
        else:
            held = set(holdout)
        sub_train = [s for s in sessions if s.appearance_tag not in held]
        if not sub_train:
            raise DatasetError(f"holding out {sorted(held)} leaves subject {subject} without training data")
        train.extend(sub_train)
        test.extend(s for s in sessions if s.appearance_tag in held)
    return DatasetSplit(tuple(train), tuple(test))


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    occluded: torch.Tensor
    mask: torch.Tensor
    ground_truth: torch.Tensor
    frame_ids: list[str]

    def __len__(self) -> int:
        return len(self.frame_ids)


def collate(samples: Sequence[Sample]) -> Batch:
    return Batch(
        torch.stack([s.occluded.torch() for s in samples]),
        torch.stack([s.mask.torch() for s in samples]),
        torch.stack([s.ground_truth.torch() for s in samples]),
        [s.frame_id for s in samples],
    )


class SampleSource:
    """Indexed collection of Samples; either in memory or backed by sessions."""

    def __init__(self, samples: Sequence[Sample]):
        self._samples = list(samples)

    def __len__(self) -> int:
        return len(self._samples)

    def __getitem__(self, i: int) -> Sample:
        return self._samples[i]

    @property
    def frame_ids(self) -> list[str]:
        return [self[i].frame_id for i in range(len(self))]

    @classmethod
    def from_images(cls, images: Sequence[ImageTensor], prefix: str = "corpus") -> "SampleSource":
        """Unoccluded images with an empty mask (step-1 autoencoding corpora)."""
        samples = []
        for i, img in enumerate(images):
            img = img.to("signed").to_rgb()
            empty = BinaryMask(np.zeros((1, img.height, img.width), np.float32))
            samples.append(Sample(img, empty, img, f"{prefix}/{i:06d}", prefix))
        return cls(samples)


class SessionSource(SampleSource):
    """Samples read lazily from prepared sessions (frames + masks on disk)."""

    def __init__(self, sessions: Sequence[SessionManifest], fill: float = -1.0, cache: bool = True):
        self._index = [(s, i) for s in sessions for i in range(s.frame_count)]
        self.fill = fill
        self._cache: dict[int, Sample] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self._index)

    def __getitem__(self, i: int) -> Sample:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        session, j = self._index[i]
        gt = load_image(session.frame_path(j), "signed").to_rgb()
        mask_path = session.mask_path(j)
        if mask_path.is_file():
            mask = load_mask(mask_path)
        else:
            mask = BinaryMask(np.zeros((1, gt.height, gt.width), np.float32))
        sample = make_sample(gt, mask, self.fill, session.frame_id(j), session.session_id)
        if self._cache is not None:
            self._cache[i] = sample
        return sample

    @property
    def frame_ids(self) -> list[str]:
        return [s.frame_id(j) for s, j in self._index]


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def iter_batches(
    source: SampleSource,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
    start_batch: int = 0,
) -> Iterator[Batch]:
    """One epoch over ``source``; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(source) == 0:
        raise DatasetError("cannot iterate an empty sample source")
    order = epoch_order(len(source), seed, epoch, shuffle)
    for b in range(start_batch, math.ceil(len(order) / batch_size)):
        idx = order[b * batch_size : (b + 1) * batch_size]
        yield collate([source[int(i)] for i in idx])


def batch_iter(
    split: DatasetSplit,
    role: str,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    fill: float = -1.0,
) -> Iterator[Batch]:
    """Train batches follow a seed+epoch permutation; test batches keep manifest order."""
    sessions = split.sessions(role)
    source = SessionSource(sessions, fill=fill, cache=False)
    if len(source) == 0:
        raise DatasetError(f"split role {role!r} has no frames")
    return iter_batches(source, batch_size, seed, epoch, shuffle=(role == "train"))


def num_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
