"""Feature files, manifests, clip-level targets and synthetic datasets.

Feature file layout (little-endian)::

    b"C3DF" | u32 version (=1) | u32 T | u32 D | T*D float32, row-major

Manifests are JSON lines, one video per line::

    {"video_id": ..., "feature_path": ..., "fps": ..., "num_clips": ...,
     "subset": "train", "annotations": [{"label": 3, "segment": [1.5, 9.0]}]}

A relative ``feature_path`` is resolved against the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .postprocess import FRAMES_PER_CLIP, Segment
from .training import LabeledSequence

FEATURE_MAGIC = b"C3DF"
FEATURE_VERSION = 1
SUBSETS = ("train", "validation", "testing")
_HEADER = struct.Struct("<4sIII")


class FeatureFormatError(ValueError):
    pass


class BadMagicError(FeatureFormatError):
    pass


class TruncatedFileError(FeatureFormatError):
    pass


class DimensionMismatchError(FeatureFormatError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class FeatureSequence:
    video_id: str
    clips: np.ndarray  # (T, D) float32

    def __len__(self) -> int:
        return self.clips.shape[0]

    @property
    def dim(self) -> int:
        return self.clips.shape[1]


def write_features(seq, path) -> None:
    clips = seq.clips if isinstance(seq, FeatureSequence) else np.asarray(seq)
    if clips.ndim != 2:
        raise DimensionMismatchError(f"expected (T, D) features, got shape {clips.shape}")
    t, d = clips.shape
    Path(path).write_bytes(
        _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, t, d) + clips.astype("<f4").tobytes()
    )


def read_features(path, video_id: str | None = None, expected_dim: int | None = None) -> FeatureSequence:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header is {len(raw)} bytes, need {_HEADER.size}")
    _, version, t, d = _HEADER.unpack_from(raw)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    n_floats = (len(raw) - _HEADER.size) // 4
    if n_floats < t * d or (len(raw) - _HEADER.size) % 4:
        raise TruncatedFileError(f"{path}: header says T={t}, D={d} but body holds {n_floats} floats")
    if n_floats > t * d:
        raise DimensionMismatchError(f"{path}: header says T={t}, D={d} but body holds {n_floats} floats")
    if expected_dim is not None and d != expected_dim:
        raise DimensionMismatchError(f"{path}: feature dim {d}, expected {expected_dim}")
    clips = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, d).astype(np.float32)
    return FeatureSequence(video_id or path.stem, clips)


@dataclass
class VideoRecord:
    video_id: str
    feature_path: str
    fps: float
    num_clips: int
    subset: str
    annotations: list[Segment] = field(default_factory=list)

    @property
    def clip_duration_s(self) -> float:
        return FRAMES_PER_CLIP / self.fps

    @property
    def duration_s(self) -> float:
        return self.num_clips * self.clip_duration_s

    def validate(self, num_classes: int | None = None) -> None:
        if not self.fps > 0:
            raise ManifestError(f"{self.video_id}: fps must be positive")
        if self.num_clips < 1:
            raise ManifestError(f"{self.video_id}: num_clips must be positive")
        if self.subset not in SUBSETS:
            raise ManifestError(f"{self.video_id}: unknown subset {self.subset!r}")
        limit = self.duration_s + self.clip_duration_s
        for seg in self.annotations:
            if seg.start_s < 0 or seg.end_s > limit:
                raise ManifestError(
                    f"{self.video_id}: annotation [{seg.start_s}, {seg.end_s}] outside [0, {limit}]"
                )
            if num_classes is not None and seg.label > num_classes:
                raise ManifestError(f"{self.video_id}: label {seg.label} > K={num_classes}")

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "feature_path": self.feature_path,
            "fps": self.fps,
            "num_clips": self.num_clips,
            "subset": self.subset,
            "annotations": [{"label": a.label, "segment": [a.start_s, a.end_s]} for a in self.annotations],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "VideoRecord":
        rec = cls(
            str(obj["video_id"]),
            str(obj["feature_path"]),
            float(obj["fps"]),
            int(obj["num_clips"]),
            str(obj["subset"]),
            [Segment.from_json(a) for a in obj.get("annotations", [])],
        )
        rec.validate()
        return rec


def read_manifest(path) -> list[VideoRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(VideoRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_manifest(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def split(records, subset: str) -> list[VideoRecord]:
    if subset not in SUBSETS:
        raise ValueError(f"unknown subset {subset!r}; expected one of {SUBSETS}")
    return [r for r in records if r.subset == subset]


def read_labels(path) -> list[str]:
    """Class names; list index 0 is class 1."""
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def write_labels(names, path) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names))


def clip_targets(record: VideoRecord, num_classes: int | None = None) -> np.ndarray:
    """Per-clip class indices; 0 unless an annotation covers > half the clip."""
    dur = record.clip_duration_s
    targets = np.zeros(record.num_clips, dtype=np.int64)
    for seg in record.annotations:
        if seg.label < 1 or (num_classes is not None and seg.label > num_classes):
            raise ValueError(f"{record.video_id}: label {seg.label} out of range")
    for i in range(record.num_clips):
        lo, hi = i * dur, (i + 1) * dur
        best, best_overlap = 0, dur / 2
        for seg in record.annotations:
            overlap = min(hi, seg.end_s) - max(lo, seg.start_s)
            # strict > keeps the earlier annotation on ties
            if overlap > best_overlap:
                best, best_overlap = seg.label, overlap
        targets[i] = best
    return targets


def resolve(record: VideoRecord, base_dir) -> Path:
    p = Path(record.feature_path)
    return p if p.is_absolute() else Path(base_dir) / p


def load_labeled(records, base_dir, num_classes: int | None = None, expected_dim: int | None = None):
    out = []
    for rec in records:
        feats = read_features(resolve(rec, base_dir), rec.video_id, expected_dim)
        if len(feats) != rec.num_clips:
            raise DimensionMismatchError(
                f"{rec.video_id}: manifest says {rec.num_clips} clips, file has {len(feats)}"
            )
        out.append(LabeledSequence(rec.video_id, feats.clips, clip_targets(rec, num_classes)))
    return out


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    feature_dim: int = 32
    videos_per_subset: dict = field(default_factory=lambda: {"train": 200, "validation": 50})
    clip_count_range: tuple[int, int] = (20, 60)
    segments_per_video_range: tuple[int, int] = (1, 2)
    class_separation: float = 1.0
    noise_sigma: float = 0.25
    seed: int = 0
    fps: float = 30.0
    min_segment_clips: int = 10
    min_gap_clips: int = 9

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("synthetic data needs K >= 2")
        if not self.class_separation > 0:
            raise ValueError("class_separation must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        lo, hi = self.clip_count_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad clip_count_range {self.clip_count_range}")
        lo, hi = self.segments_per_video_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad segments_per_video_range {self.segments_per_video_range}")
        for subset in self.videos_per_subset:
            if subset not in SUBSETS:
                raise ValueError(f"unknown subset {subset!r}")


@dataclass
class SyntheticDataset:
    records: list[VideoRecord]
    manifest_path: Path
    labels_path: Path
    centroids: np.ndarray  # (K+1, D), row 0 = background
    segments: dict  # video_id -> [(first_clip, stop_clip)]


def _pack_segments(rng, num_clips, num_segments, min_len, min_gap):
    slack = num_clips - num_segments * min_len - (num_segments - 1) * min_gap
    if slack < 0:
        raise ValueError(
            f"cannot pack {num_segments} segments of >= {min_len} clips "
            f"with gaps of {min_gap} into {num_clips} clips"
        )
    # slack shared between n segment extensions and n + 1 gaps
    extra = rng.multinomial(slack, np.full(2 * num_segments + 1, 1.0 / (2 * num_segments + 1)))
    spans = []
    pos = extra[0]
    for s in range(num_segments):
        length = min_len + extra[1 + s]
        spans.append((int(pos), int(pos + length)))
        pos += length + min_gap + extra[1 + num_segments + s]
    return spans


def generate_synthetic(spec: SyntheticSpec, out_dir) -> SyntheticDataset:
    """Gaussian clip features around per-class centroids, written to ``out_dir``.

    Each video carries one activity class in one or more clip-aligned,
    non-overlapping segments; other clips are background.
    """
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    dirs = rng.standard_normal((spec.num_classes + 1, spec.feature_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centroids = (dirs * spec.class_separation).astype(np.float32)

    records, segments = [], {}
    for subset in SUBSETS:
        for n in range(spec.videos_per_subset.get(subset, 0)):
            vid = f"{subset}_{n:05d}"
            num_clips = int(rng.integers(spec.clip_count_range[0], spec.clip_count_range[1] + 1))
            num_segs = int(rng.integers(spec.segments_per_video_range[0], spec.segments_per_video_range[1] + 1))
            # short videos get fewer segments, but never below the requested minimum
            fits = (num_clips + spec.min_gap_clips) // (spec.min_segment_clips + spec.min_gap_clips)
            num_segs = max(spec.segments_per_video_range[0], min(num_segs, fits))
            label = int(rng.integers(1, spec.num_classes + 1))
            spans = _pack_segments(rng, num_clips, num_segs, spec.min_segment_clips, spec.min_gap_clips)
            targets = np.zeros(num_clips, dtype=np.int64)
            for a, b in spans:
                targets[a:b] = label
            noise = rng.standard_normal((num_clips, spec.feature_dim)) * spec.noise_sigma
            feats = (centroids[targets] + noise).astype(np.float32)
            rel = f"features/{vid}.c3df"
            write_features(feats, out_dir / rel)
            dur = FRAMES_PER_CLIP / spec.fps
            anns = [Segment(label, a * dur, b * dur) for a, b in spans]
            records.append(VideoRecord(vid, rel, spec.fps, num_clips, subset, anns))
            segments[vid] = spans

    manifest = out_dir / "manifest.jsonl"
    labels = out_dir / "labels.txt"
    write_manifest(records, manifest)
    write_labels([f"class_{c:03d}" for c in range(1, spec.num_classes + 1)], labels)
    return SyntheticDataset(records, manifest, labels, centroids, segments)


def simulate_clip_probs(targets, num_classes: int, noise: float, rng,
                        confidence: float = 3.0, leak: float = 0.1) -> np.ndarray:
    """Noisy classifier output for known clip targets.

    The activity-vs-background logit is ``+confidence`` on activity clips and
    ``-confidence`` on background clips, plus N(0, noise) per clip.  Activity
    mass goes to the video's activity class except for a ``leak`` fraction
    spread evenly over the other classes.
    """
    targets = np.asarray(targets)
    active = targets[targets > 0]
    label = int(active[0]) if active.size else 1
    logit = np.where(targets > 0, confidence, -confidence) + rng.standard_normal(len(targets)) * noise
    activity = 1.0 / (1.0 + np.exp(-logit))
    probs = np.zeros((len(targets), num_classes + 1))
    probs[:, 0] = 1.0 - activity
    others = num_classes - 1
    if others:
        probs[:, 1:] = (activity * leak / others)[:, None]
        probs[:, label] = activity * (1.0 - leak)
    else:
        probs[:, label] = activity
    return probs
