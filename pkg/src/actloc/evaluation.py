"""Classification mAP / Hit@3, temporal IoU and detection mAP.

AP is the non-interpolated mean of precision at each true positive,
divided by the number of positives.  Classes without any positive are
left out of the mean.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .postprocess import PostprocessConfig, Segment, classify_video, localize


def temporal_iou(a, b) -> float:
    (s1, e1), (s2, e2) = a, b
    if not (e1 > s1 and e2 > s2):
        raise ValueError(f"degenerate interval in IoU: {a}, {b}")
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    return inter / ((e1 - s1) + (e2 - s2) - inter)


def average_precision(hits, num_positives: int) -> float:
    """AP of a ranked list of booleans (True = relevant)."""
    if num_positives <= 0:
        raise ValueError("AP is undefined without positives")
    hits = np.asarray(hits, dtype=bool)
    if hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    ranks = np.arange(1, hits.size + 1)
    return float((tp[hits] / ranks[hits]).sum() / num_positives)


@dataclass
class ClassificationResult:
    video_id: str
    ranked: list[tuple[int, float]]  # (class, score), score descending
    ground_truth: int

    @classmethod
    def from_scores(cls, video_id: str, scores, ground_truth: int) -> "ClassificationResult":
        """``scores[j]`` is the score of class ``j + 1``."""
        ranked = sorted(((j + 1, float(s)) for j, s in enumerate(scores)),
                        key=lambda pair: (-pair[1], pair[0]))
        return cls(video_id, ranked, ground_truth)

    def score_of(self, label: int) -> float:
        for c, s in self.ranked:
            if c == label:
                return s
        return float("-inf")


def hit_at_3(results) -> float:
    if not results:
        return 0.0
    hits = sum(r.ground_truth in [c for c, _ in r.ranked[:3]] for r in results)
    return hits / len(results)


def classification_ap_per_class(results) -> dict[int, float]:
    results = sorted(results, key=lambda r: r.video_id)
    classes = sorted({c for r in results for c, _ in r.ranked} | {r.ground_truth for r in results})
    aps = {}
    for label in classes:
        positives = sum(r.ground_truth == label for r in results)
        if positives == 0:
            continue
        # stable sort keeps video-id order among equal scores
        ranked = sorted(results, key=lambda r: -r.score_of(label))
        aps[label] = average_precision([r.ground_truth == label for r in ranked], positives)
    return aps


def classification_map(results) -> float:
    aps = classification_ap_per_class(results)
    return float(np.mean(list(aps.values()))) if aps else 0.0


@dataclass
class DetectionResult:
    video_id: str
    predictions: list[Segment]
    ground_truth: list[Segment]


def _match_class(preds, gts, iou_threshold):
    """preds: [(score, video_id, Segment)], gts: {video_id: [Segment]}.

    Returns TP flags in score order.
    """
    order = sorted(preds, key=lambda p: (-p[0], p[1], p[2].start_s))
    used = {vid: [False] * len(segs) for vid, segs in gts.items()}
    hits = []
    for _, vid, seg in order:
        best, best_iou = None, iou_threshold
        for j, gt in enumerate(gts.get(vid, ())):
            if used[vid][j]:
                continue
            iou = temporal_iou(seg.interval, gt.interval)
            if iou > best_iou:
                best, best_iou = j, iou
        if best is not None:
            used[vid][best] = True
        hits.append(best is not None)
    return hits


def detection_ap_per_class(results, iou_threshold: float = 0.5) -> dict[int, float]:
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {iou_threshold}")
    preds = defaultdict(list)
    gts = defaultdict(lambda: defaultdict(list))
    for r in results:
        for seg in r.predictions:
            preds[seg.label].append((seg.score, r.video_id, seg))
        for seg in r.ground_truth:
            gts[seg.label][r.video_id].append(seg)
    aps = {}
    for label in sorted(gts):
        n_pos = sum(len(v) for v in gts[label].values())
        aps[label] = average_precision(_match_class(preds[label], gts[label], iou_threshold), n_pos)
    return aps


def detection_map(results, iou_threshold: float = 0.5) -> float:
    aps = detection_ap_per_class(results, iou_threshold)
    return float(np.mean(list(aps.values()))) if aps else 0.0


@dataclass
class GridResult:
    rows: list[tuple[int, float, float]]  # (k, gamma, mAP)

    @property
    def best(self) -> tuple[int, float, float]:
        # first maximum in row order
        return max(self.rows, key=lambda r: r[2])

    def table(self, k_values, gamma_values) -> np.ndarray:
        lookup = {}
        for k, g, m in self.rows:
            lookup.setdefault((k, g), m)
        return np.array([[lookup[(k, g)] for k in k_values] for g in gamma_values])


def grid_search(probs, ground_truth, k_values, gamma_values, iou_threshold: float = 0.5) -> GridResult:
    """Detection mAP for every (k, gamma) pair.

    ``probs`` maps video id to :class:`ClipProbSequence`; ``ground_truth``
    maps video id to its list of ground-truth segments.  The video label
    comes from the unsmoothed probabilities, as in normal prediction.
    """
    k_values, gamma_values = list(k_values), list(gamma_values)
    if not k_values or not gamma_values:
        raise ValueError("grid search needs at least one k and one gamma")
    vids = sorted(probs)
    labels = {vid: classify_video(probs[vid])[0] for vid in vids}
    rows = []
    for k in k_values:
        for gamma in gamma_values:
            cfg = PostprocessConfig(k, gamma)
            results = [
                DetectionResult(vid, localize(probs[vid], labels[vid], cfg), ground_truth.get(vid, []))
                for vid in vids
            ]
            rows.append((k, gamma, detection_map(results, iou_threshold)))
    return GridResult(rows)


def format_grid(grid: GridResult, k_values, gamma_values) -> str:
    k_values, gamma_values = list(k_values), list(gamma_values)
    table = grid.table(k_values, gamma_values)
    head = "gamma  " + "".join(f"{'k=' + str(k):>10}" for k in k_values)
    lines = [head]
    for g, row in zip(gamma_values, table):
        lines.append(f"{g:<7.3f}" + "".join(f"{v:>10.5f}" for v in row))
    return "\n".join(lines)

