"""LLP-style evaluation: segment- and event-level F-scores, AVE accuracy,
label fidelity and the modality non-alignment analysis."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, UsageError

METRIC_KEYS = ("A", "V", "AV", "Type", "Event")
MACRO = "macro"
MICRO = "micro"
SPAN_TAG = {"A": "A", "V": "V", "AV": "AV", "Event": "AV-union"}


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) > threshold).astype(np.uint8)


@dataclass(frozen=True, order=True)
class EventSpan:
    cls: int
    start: int
    end: int
    modality: str = "A"

    def __len__(self) -> int:
        return self.end - self.start + 1


def extract_events(labels, modality: str = "A") -> list[EventSpan]:
    """Maximal runs of positive segments per class, sorted by (class, start)."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DimensionError(f"expected a T x C matrix, got shape {labels.shape}")
    spans = []
    for c in range(labels.shape[1]):
        col = np.concatenate([[0], labels[:, c].astype(np.int8) != 0, [0]]).astype(np.int8)
        edges = np.diff(col)
        starts = np.flatnonzero(edges == 1)
        ends = np.flatnonzero(edges == -1) - 1
        spans += [EventSpan(c, int(s), int(e), modality) for s, e in zip(starts, ends)]
    return spans


def spans_to_matrix(spans, num_segments: int, num_classes: int) -> np.ndarray:
    out = np.zeros((num_segments, num_classes), dtype=np.uint8)
    for s in spans:
        out[s.start:s.end + 1, s.cls] = 1
    return out


def f_score(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def segment_counts(pred, gt) -> tuple[int, int, int]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return int((pred & gt).sum()), int((pred & ~gt).sum()), int((~pred & gt).sum())


def segment_f(pred, gt) -> float:
    return f_score(*segment_counts(pred, gt))


def span_iou(a: EventSpan, b: EventSpan) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    return inter / (len(a) + len(b) - inter)


def match_events(pred_spans, gt_spans, iou_min: float = 0.5) -> list[tuple[int, int]]:
    """Greedy one-to-one matching within each class by descending IoU.

    Returns (pred index, gt index) pairs whose IoU reaches ``iou_min``.
    Equal IoUs are resolved by the lower prediction index, then gt index.
    """
    candidates = []
    for i, p in enumerate(pred_spans):
        for j, g in enumerate(gt_spans):
            if p.cls != g.cls:
                continue
            iou = span_iou(p, g)
            if iou >= iou_min:
                candidates.append((-iou, i, j))
    candidates.sort()
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in candidates:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j))
    return pairs


def event_counts(pred_spans, gt_spans, iou_min: float = 0.5) -> tuple[int, int, int]:
    tp = len(match_events(pred_spans, gt_spans, iou_min))
    return tp, len(pred_spans) - tp, len(gt_spans) - tp


def event_f(pred_spans, gt_spans, iou_min: float = 0.5) -> float:
    return f_score(*event_counts(pred_spans, gt_spans, iou_min))


# -- corpus evaluation -----------------------------------------------------------------


def _views(pred_a, pred_v, gt_a, gt_v) -> dict:
    """Matrices compared for each metric: A, V, AV (AND of modalities), Event (OR)."""
    pa, pv = np.asarray(pred_a).astype(bool), np.asarray(pred_v).astype(bool)
    ga, gv = np.asarray(gt_a).astype(bool), np.asarray(gt_v).astype(bool)
    return {
        "A": (pa, ga),
        "V": (pv, gv),
        "AV": (pa & pv, ga & gv),
        "Event": (pa | pv, ga | gv),
    }


def video_counts(pred_a, pred_v, gt_a, gt_v, iou_min: float = 0.5) -> dict:
    """(tp, fp, fn) per level and metric for one video."""
    out = {"segment": {}, "event": {}}
    for key, (p, g) in _views(pred_a, pred_v, gt_a, gt_v).items():
        out["segment"][key] = segment_counts(p, g)
        out["event"][key] = event_counts(extract_events(p, SPAN_TAG[key]), extract_events(g, SPAN_TAG[key]), iou_min)
    return out


def _as_pair(item):
    if hasattr(item, "y_audio"):
        return item.y_audio, item.y_visual
    return item


@dataclass
class MetricsReport:
    segment: dict
    event: dict
    aggregation: str = MACRO
    num_videos: int = 0
    per_class: dict = field(default_factory=dict)
    ave_accuracy: float | None = None
    nonalignment: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> MetricsReport:
        return cls(**data)

    def to_text(self) -> str:
        lines = [f"aggregation: {self.aggregation}   videos: {self.num_videos}"]
        lines.append(f"{'level':<9}" + "".join(f"{k:>9}" for k in METRIC_KEYS))
        for level in ("segment", "event"):
            scores = getattr(self, level)
            if scores:
                lines.append(f"{level:<9}" + "".join(f"{scores[k]:>9.2f}" for k in METRIC_KEYS))
        if self.ave_accuracy is not None:
            lines.append(f"AVE accuracy: {100 * self.ave_accuracy:.2f}")
        if self.nonalignment:
            na = self.nonalignment
            lines.append(
                f"non-aligned: {na['nonaligned_events']}/{na['total_events']} segment events, "
                f"{na['success_count']} predicted correctly ({100 * na['success_rate']:.2f}%)"
            )
        return "\n".join(lines) + "\n"

    def per_class_csv(self, class_names=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["modality", "class", "f_score"])
        for modality, scores in self.per_class.items():
            for c, score in enumerate(scores):
                name = class_names[c] if class_names else str(c)
                writer.writerow([modality, name, f"{score:.6f}"])
        return buf.getvalue()


def evaluate_corpus(preds, gts, aggregation: str = MACRO, iou_min: float = 0.5, levels=("segment", "event")) -> MetricsReport:
    """Score binary predictions against dense ground truth.

    ``preds`` and ``gts`` are aligned sequences of DenseLabels or (audio, visual)
    matrix pairs.  ``macro`` averages per-video F-scores, ``micro`` pools counts.
    """
    if len(preds) != len(gts):
        raise UsageError(f"{len(preds)} predictions for {len(gts)} ground-truth videos")
    if aggregation not in (MACRO, MICRO):
        raise UsageError(f"unknown aggregation {aggregation!r}")
    per_video = {level: {k: [] for k in ("A", "V", "AV", "Event")} for level in levels}
    class_counts = None
    for pred, gt in zip(preds, gts):
        pa, pv = _as_pair(pred)
        ga, gv = _as_pair(gt)
        views = _views(pa, pv, ga, gv)
        for key, (p, g) in views.items():
            if "segment" in levels:
                per_video["segment"][key].append(segment_counts(p, g))
            if "event" in levels:
                per_video["event"][key].append(
                    event_counts(extract_events(p, SPAN_TAG[key]), extract_events(g, SPAN_TAG[key]), iou_min)
                )
        cc = np.stack(
            [
                [(p & g).sum(axis=0), (p & ~g).sum(axis=0), (~p & g).sum(axis=0)]
                for p, g in (views["A"], views["V"], views["AV"])
            ]
        )
        class_counts = cc if class_counts is None else class_counts + cc

    scores = {}
    for level in levels:
        level_scores = {}
        for key, counts in per_video[level].items():
            if not counts:
                level_scores[key] = 0.0
            elif aggregation == MACRO:
                level_scores[key] = 100.0 * float(np.mean([f_score(*c) for c in counts]))
            else:
                tp, fp, fn = np.sum(counts, axis=0)
                level_scores[key] = 100.0 * f_score(int(tp), int(fp), int(fn))
        level_scores["Type"] = (level_scores["A"] + level_scores["V"] + level_scores["AV"]) / 3.0
        scores[level] = {k: level_scores[k] for k in METRIC_KEYS}

    per_class = {}
    if class_counts is not None:
        for idx, modality in enumerate(("A", "V", "AV")):
            tp, fp, fn = class_counts[idx]
            per_class[modality] = [
                100.0 * f_score(int(a), int(b), int(c)) for a, b, c in zip(tp, fp, fn)
            ]
    return MetricsReport(
        segment=scores.get("segment", {}),
        event=scores.get("event", {}),
        aggregation=aggregation,
        num_videos=len(gts),
        per_class=per_class,
    )


def predictions_from_probs(probs, threshold: float = 0.5, video_gate=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Binarize per-video (probs_a, probs_v); optionally zero classes whose video probability is <= threshold."""
    out = []
    for i, (pa, pv) in enumerate(probs):
        ba, bv = binarize(pa, threshold), binarize(pv, threshold)
        if video_gate is not None:
            keep = binarize(video_gate[i], threshold)
            ba, bv = ba * keep, bv * keep
        out.append((ba, bv))
    return out


def label_fidelity(pseudo, gt, aggregation: str = MACRO) -> dict:
    """Segment-level A/V/AV F-scores of pseudo labels treated as predictions."""
    report = evaluate_corpus(pseudo, gt, aggregation=aggregation, levels=("segment",))
    return {k: report.segment[k] for k in ("A", "V", "AV")}


# -- AVE ---------------------------------------------------------------------------------


def ave_predict(probs_a, probs_v, threshold: float = 0.5) -> np.ndarray:
    """Per-segment class for (T, C+1) probabilities whose last column is background.

    A segment takes event class c when both modalities exceed ``threshold`` for c;
    several such classes are resolved by the largest min(p_a, p_v).  Otherwise the
    segment is background (index C).
    """
    pa = np.asarray(probs_a)[:, :-1]
    pv = np.asarray(probs_v)[:, :-1]
    background = pa.shape[1]
    joint = np.minimum(pa, pv)
    joint = np.where((pa > threshold) & (pv > threshold), joint, -1.0)
    best = joint.argmax(axis=1)
    return np.where(joint.max(axis=1) >= 0, best, background)


def ave_accuracy(pred, gt) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if pred.size == 0:
        raise UsageError("AVE accuracy of an empty sequence is undefined")
    return float((pred == gt).mean())


def ave_ground_truth(dense) -> np.ndarray:
    """AVE target per segment from (T, C) dense labels: the class seen and heard, else background C."""
    ga, gv = _as_pair(dense)
    both = np.asarray(ga).astype(bool) & np.asarray(gv).astype(bool)
    background = both.shape[1]
    return np.where(both.any(axis=1), both.argmax(axis=1), background)


# -- non-alignment ---------------------------------------------------------------------


def nonalignment_report(preds, gts) -> dict:
    """Count segment-level events and how many single-modality ones are predicted exactly.

    A segment-level event is a (video, segment, class) cell present in either
    modality.  It is non-aligned when present in exactly one modality, and a
    non-aligned event counts as a success when the prediction marks that class in
    the correct modality only.
    """
    if len(preds) != len(gts):
        raise UsageError(f"{len(preds)} predictions for {len(gts)} ground-truth videos")
    total = nonaligned = success = 0
    for pred, gt in zip(preds, gts):
        pa, pv = (np.asarray(x).astype(bool) for x in _as_pair(pred))
        ga, gv = (np.asarray(x).astype(bool) for x in _as_pair(gt))
        events = ga | gv
        single = ga ^ gv
        total += int(events.sum())
        nonaligned += int(single.sum())
        success += int((single & (pa == ga) & (pv == gv)).sum())
    return {
        "total_events": total,
        "nonaligned_events": nonaligned,
        "success_count": success,
        "success_rate": success / nonaligned if nonaligned else 0.0,
    }
