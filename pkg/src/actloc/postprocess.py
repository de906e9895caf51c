"""Turn per-clip class probabilities into a video label and temporal segments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FRAMES_PER_CLIP = 16


@dataclass(frozen=True)
class Segment:
    label: int
    start_s: float
    end_s: float
    score: float = 1.0

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise ValueError(f"segment end {self.end_s} must exceed start {self.start_s}")
        if self.label < 1:
            raise ValueError(f"segment label must be an activity class (>= 1), got {self.label}")

    @property
    def interval(self) -> tuple[float, float]:
        return (self.start_s, self.end_s)

    def to_json(self) -> dict:
        return {"label": self.label, "score": self.score, "segment": [self.start_s, self.end_s]}

    @classmethod
    def from_json(cls, obj: dict) -> "Segment":
        start, end = obj["segment"]
        return cls(int(obj["label"]), float(start), float(end), float(obj.get("score", 1.0)))


@dataclass
class ClipProbSequence:
    probs: np.ndarray  # (T, K+1), column 0 = background
    clip_duration_s: float

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[0] < 1 or self.probs.shape[1] < 2:
            raise ValueError(f"expected (T>=1, K+1>=2) probabilities, got {self.probs.shape}")
        if not self.clip_duration_s > 0:
            raise ValueError(f"clip duration must be positive, got {self.clip_duration_s}")

    @classmethod
    def from_fps(cls, probs, fps: float) -> "ClipProbSequence":
        return cls(probs, FRAMES_PER_CLIP / fps)

    def __len__(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1] - 1


@dataclass(frozen=True)
class PostprocessConfig:
    k: int = 5
    gamma: float = 0.2

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"k must be non-negative, got {self.k}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")


def smooth(seq: ClipProbSequence, k: int) -> ClipProbSequence:
    """Centered moving average over 2k+1 clips, truncated at the ends.

    Each output row is the mean of the rows actually inside the window, so
    rows stay stochastic.
    """
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    if k == 0:
        return ClipProbSequence(seq.probs.copy(), seq.clip_duration_s)
    p = seq.probs
    t = len(p)
    out = np.empty_like(p)
    for i in range(t):
        out[i] = p[max(0, i - k):min(t, i + k + 1)].mean(axis=0)
    return ClipProbSequence(out, seq.clip_duration_s)


def classify_video(seq: ClipProbSequence):
    """Video label from clip-averaged probabilities, background excluded.

    Returns ``(label, class_scores)`` where ``class_scores[j]`` is the
    renormalised score of class ``j + 1``.  Ties go to the lowest class.
    """
    mean = seq.probs.mean(axis=0)[1:]
    label = int(np.argmax(mean)) + 1
    total = mean.sum()
    scores = mean / total if total > 0 else np.full_like(mean, 1.0 / len(mean))
    return label, scores


def activity_probability(seq: ClipProbSequence) -> np.ndarray:
    return np.clip(1.0 - seq.probs[:, 0], 0.0, 1.0)


def _runs(marks: np.ndarray):
    """(first, last) index pairs of maximal True runs."""
    padded = np.concatenate([[False], marks, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), stops.tolist()))


def localize(seq: ClipProbSequence, video_label: int, config: PostprocessConfig = PostprocessConfig()):
    if not 1 <= video_label <= seq.num_classes:
        raise ValueError(f"video label {video_label} outside [1, {seq.num_classes}]")
    activity = activity_probability(smooth(seq, config.k))
    segments = []
    for first, last in _runs(activity > config.gamma):
        segments.append(
            Segment(
                video_label,
                first * seq.clip_duration_s,
                (last + 1) * seq.clip_duration_s,
                float(activity[first:last + 1].mean()),
            )
        )
    return segments


@dataclass
class VideoPrediction:
    label: int
    class_scores: np.ndarray  # (K,)
    segments: list[Segment]

    def to_json(self) -> dict:
        ranked = sorted(
            ((j + 1, float(s)) for j, s in enumerate(self.class_scores)),
            key=lambda pair: (-pair[1], pair[0]),
        )
        return {
            "label": self.label,
            "classification": [{"label": c, "score": s} for c, s in ranked],
            "detection": [seg.to_json() for seg in self.segments],
        }


def predict_video(seq: ClipProbSequence, config: PostprocessConfig = PostprocessConfig()) -> VideoPrediction:
    label, scores = classify_video(seq)
    return VideoPrediction(label, scores, localize(seq, label, config))
