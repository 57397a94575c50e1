"""Corpus data model, on-disk layout and the synthetic corpus generator.

A corpus directory looks like::

    classes.txt          one class name per line; order defines the index
    manifest.csv         video_id,T,"EventA,EventB" for every video
    <split>.csv          same format, one per named split (optional)
    features/<id>.audio.avt, features/<id>.visual.avt
    dense_gt.txt         dense labels (optional)
    logits/              teacher logits (optional)
    bookkeeping.json     generator statistics (synthetic corpora only)

``bookkeeping.json`` holds ``num_videos``, ``total_events`` (segment-level
events, i.e. (video, segment, class) cells present in either modality),
``nonaligned_events`` (cells present in exactly one modality),
``nonaligned_fraction``, ``events_by_modality`` (event counts keyed by
``audio``/``visual``/``both``), ``class_event_counts`` (per class name) and
``splits`` (split name -> list of video ids).
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ParseError, UsageError, ValidationError
from .forge import DenseLabels, TeacherLogits, export_dense_labels, import_external_labels, save_teacher_logits
from .tensorio import load_tensor, save_tensor

log = logging.getLogger(__name__)

LLP_CLASSES = [
    "Speech", "Car", "Cheering", "Dog", "Cat", "Frying_(food)", "Basketball_bounce",
    "Fire_alarm", "Chainsaw", "Cello", "Banjo", "Singing", "Chicken_rooster",
    "Violin_fiddle", "Vacuum_cleaner", "Baby_laughter", "Accordion", "Lawn_mower",
    "Motorcycle", "Helicopter", "Acoustic_guitar", "Telephone_bell_ringing",
    "Baby_cry_infant_cry", "Blender", "Clapping",
]


@dataclass
class VideoSample:
    video_id: str
    feats_audio: np.ndarray
    feats_visual: np.ndarray
    weak: np.ndarray
    dense_gt: DenseLabels | None = None

    def __post_init__(self):
        self.feats_audio = np.asarray(self.feats_audio, dtype=np.float64)
        self.feats_visual = np.asarray(self.feats_visual, dtype=np.float64)
        self.weak = np.asarray(self.weak, dtype=np.uint8)
        if self.feats_audio.ndim != 2 or self.feats_visual.ndim != 2:
            raise ValidationError(f"{self.video_id}: features must be T x dim matrices")
        if len(self.feats_audio) != len(self.feats_visual) or len(self.feats_audio) < 1:
            raise ValidationError(
                f"{self.video_id}: audio has {len(self.feats_audio)} segments, "
                f"visual has {len(self.feats_visual)}"
            )
        if self.dense_gt is not None:
            if self.dense_gt.shape != (self.num_segments, len(self.weak)):
                raise ValidationError(
                    f"{self.video_id}: dense labels {self.dense_gt.shape} do not match "
                    f"T={self.num_segments}, C={len(self.weak)}"
                )
            if not np.array_equal(self.dense_gt.video_label(), self.weak):
                raise ValidationError(f"{self.video_id}: weak label disagrees with dense labels")

    @property
    def num_segments(self) -> int:
        return len(self.feats_audio)


# -- manifests -------------------------------------------------------------------------


@dataclass
class ManifestRow:
    video_id: str
    num_segments: int
    events: list[str]


def read_class_table(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]


def write_class_table(path, names) -> None:
    Path(path).write_text("".join(n + "\n" for n in names), encoding="utf-8")


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    rows, seen = [], set()
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, record in enumerate(csv.reader(fh, skipinitialspace=True), start=1):
            if not record or (lineno == 1 and record[0] == "video_id"):
                continue
            if len(record) < 2:
                raise ParseError(f"expected video_id,T,events; got {record}", path, lineno)
            vid = record[0].strip()
            try:
                t = int(record[1])
            except ValueError as exc:
                raise ParseError(f"bad segment count {record[1]!r}", path, lineno) from exc
            # an unquoted event list spills into extra columns
            events = [e.strip() for part in record[2:] for e in part.split(",") if e.strip()]
            if vid in seen:
                raise ParseError(f"duplicate video id {vid}", path, lineno)
            seen.add(vid)
            rows.append(ManifestRow(vid, t, events))
    return rows


def write_manifest(path, rows: list[ManifestRow]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(["video_id", "T", "events"])
    for r in rows:
        writer.writerow([r.video_id, r.num_segments, ",".join(r.events)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def weak_from_events(events: list[str], class_names: list[str], where: str = "") -> np.ndarray:
    index = {n: i for i, n in enumerate(class_names)}
    y = np.zeros(len(class_names), dtype=np.uint8)
    for name in events:
        if name not in index:
            raise ParseError(f"unknown event name {name!r}{where}")
        y[index[name]] = 1
    return y


def load_corpus(manifest_path, feature_dir, labels=None, class_table=None) -> list[VideoSample]:
    """Read the videos listed in a manifest.

    ``labels`` optionally names a dense-label file with ground truth for every
    listed video.  ``class_table`` defaults to ``classes.txt`` beside the manifest.
    """
    manifest_path = Path(manifest_path)
    feature_dir = Path(feature_dir)
    class_table = Path(class_table) if class_table else manifest_path.parent / "classes.txt"
    class_names = read_class_table(class_table)
    rows = read_manifest(manifest_path)
    if not rows:
        log.warning("manifest %s lists no videos", manifest_path)
        return []
    dense = import_external_labels(labels) if labels else {}
    corpus = []
    for lineno, row in enumerate(rows, start=2):
        weak = weak_from_events(row.events, class_names, f" in {manifest_path} row {row.video_id}")
        fa = load_tensor(feature_dir / f"{row.video_id}.audio.avt")
        fv = load_tensor(feature_dir / f"{row.video_id}.visual.avt")
        if len(fa) != row.num_segments or len(fv) != row.num_segments:
            raise ValidationError(
                f"{row.video_id}: manifest says T={row.num_segments}, tensors have "
                f"{len(fa)} audio and {len(fv)} visual segments"
            )
        gt = None
        if labels:
            if row.video_id not in dense:
                raise ValidationError(f"{labels}: no labels for video {row.video_id}")
            gt = dense[row.video_id]
        corpus.append(VideoSample(row.video_id, fa, fv, weak, gt))
    return corpus


def corpus_paths(corpus_dir, split: str | None = None) -> dict:
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / (f"{split}.csv" if split else "manifest.csv")
    gt = corpus_dir / "dense_gt.txt"
    return {
        "manifest": manifest,
        "features": corpus_dir / "features",
        "labels": gt if gt.exists() else None,
        "classes": corpus_dir / "classes.txt",
        "logits": corpus_dir / "logits",
    }


def load_corpus_dir(corpus_dir, split: str | None = None, with_gt: bool = True) -> list[VideoSample]:
    paths = corpus_paths(corpus_dir, split)
    if not paths["manifest"].exists():
        raise UsageError(f"no manifest at {paths['manifest']}")
    return load_corpus(
        paths["manifest"], paths["features"], paths["labels"] if with_gt else None, paths["classes"]
    )


# -- splitting ----------------------------------------------------------------------------


def _split_sizes(n: int, fractions) -> list[int]:
    raw = [f * n for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    remainder = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:remainder]:
        sizes[i] += 1
    return sizes


def split_corpus(corpus, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded (train, val, test) partition, stratified by each video's first event class."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    sizes = _split_sizes(len(corpus), fractions)
    for f, size, name in zip(fractions, sizes, ("train", "val", "test")):
        if f > 0 and size == 0:
            raise UsageError(f"fraction {f} leaves the {name} split empty for {len(corpus)} videos")
    rng = np.random.default_rng(seed)
    groups: dict[int, list[int]] = {}
    for i, sample in enumerate(corpus):
        positives = np.flatnonzero(sample.weak)
        groups.setdefault(int(positives[0]) if positives.size else -1, []).append(i)
    ordered = []
    for key in sorted(groups):
        members = groups[key]
        ordered += [members[k] for k in rng.permutation(len(members))]
    # spread each split evenly along the stratified order
    assigned = [0, 0, 0]
    parts: list[list[int]] = [[], [], []]
    for idx in ordered:
        s = min(
            (k for k in range(3) if assigned[k] < sizes[k]),
            key=lambda k: ((assigned[k] + 1) / sizes[k], k),
        )
        assigned[s] += 1
        parts[s].append(idx)
    return tuple([corpus[i] for i in sorted(part)] for part in parts)


# -- synthetic generation -------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Parameters of a synthetic corpus with planted dense ground truth.

    ``modality_mix`` is the probability of an event being audio-only,
    visual-only or in both modalities.  Teacher logits are drawn from
    N(teacher_pos_mean, teacher_noise) on ground-truth cells of the teacher's
    modality and N(teacher_neg_mean, teacher_noise) elsewhere.  For every
    ``confusable_pairs`` entry (c1, c2) the ``confusable_modality`` teacher also
    scores c2 as positive wherever c1 is present, and vice versa.  With
    ``ave_style`` each video holds exactly one event whose audio and visual spans
    differ by up to ``ave_jitter`` segments at each end.
    """

    num_videos: int = 200
    num_segments: int = 10
    num_classes: int = 25
    events_per_video: tuple[int, int] = (1, 3)
    modality_mix: tuple[float, float, float] = (0.25, 0.25, 0.5)
    span_length: tuple[int, int] = (2, 10)
    audio_dim: int = 32
    visual_dim: int = 32
    prototype_scale: float = 1.0
    noise_scale: float = 0.5
    teacher_pos_mean: float = 1.0
    teacher_neg_mean: float = -1.0
    teacher_noise: float = 0.965
    confusable_pairs: list[tuple[int, int]] = field(default_factory=list)
    confusable_modality: str = "audio"
    ave_style: bool = False
    ave_jitter: int = 2
    splits: dict[str, int] = field(default_factory=dict)
    class_names: list[str] | None = None
    seed: int = 0

    def __post_init__(self):
        self.events_per_video = tuple(self.events_per_video)
        self.modality_mix = tuple(float(x) for x in self.modality_mix)
        self.span_length = tuple(self.span_length)
        self.confusable_pairs = [tuple(p) for p in self.confusable_pairs]
        self.splits = dict(self.splits)
        if self.num_videos < 0 or self.num_segments < 1 or self.num_classes < 1:
            raise ConfigurationError("num_videos >= 0, num_segments >= 1 and num_classes >= 1 required")
        if len(self.modality_mix) != 3 or any(p < 0 for p in self.modality_mix) or abs(sum(self.modality_mix) - 1) > 1e-9:
            raise ConfigurationError(f"modality_mix must be 3 probabilities summing to 1, got {self.modality_mix}")
        lo, hi = self.events_per_video
        if not 1 <= lo <= hi <= self.num_classes:
            raise ConfigurationError(f"events_per_video {self.events_per_video} invalid for {self.num_classes} classes")
        lo, hi = self.span_length
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"span_length {self.span_length} invalid")
        for name in ("prototype_scale", "noise_scale", "teacher_pos_mean", "teacher_neg_mean", "teacher_noise"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigurationError(f"{name} must be finite")
        if self.noise_scale < 0 or self.teacher_noise < 0:
            raise ConfigurationError("noise scales must be non-negative")
        if self.confusable_modality not in ("audio", "visual"):
            raise ConfigurationError(f"confusable_modality must be audio or visual, got {self.confusable_modality!r}")
        for a, b in self.confusable_pairs:
            if not (0 <= a < self.num_classes and 0 <= b < self.num_classes) or a == b:
                raise ConfigurationError(f"bad confusable pair {(a, b)}")
        if sum(self.splits.values()) > self.num_videos:
            raise ConfigurationError("split sizes exceed num_videos")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ConfigurationError("class_names length must equal num_classes")

    def resolved_class_names(self) -> list[str]:
        if self.class_names is not None:
            return list(self.class_names)
        if self.num_classes == len(LLP_CLASSES):
            return list(LLP_CLASSES)
        return [f"class{c:02d}" for c in range(self.num_classes)]

    def to_dict(self) -> dict:
        data = asdict(self)
        data["events_per_video"] = list(self.events_per_video)
        data["modality_mix"] = list(self.modality_mix)
        data["span_length"] = list(self.span_length)
        data["confusable_pairs"] = [list(p) for p in self.confusable_pairs]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> SyntheticSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown synthetic spec keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> SyntheticSpec:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{exc.msg} (column {exc.colno})", path, exc.lineno) from exc
        if not isinstance(data, dict):
            raise ParseError("synthetic spec must be a JSON object", path, 1)
        return cls.from_dict(data)


@dataclass
class SyntheticCorpus:
    """In-memory result of generation: samples, teacher logits and bookkeeping."""

    spec: SyntheticSpec
    class_names: list[str]
    samples: list[VideoSample]
    teachers: list[TeacherLogits]
    bookkeeping: dict

    def split(self, name: str) -> list[int]:
        ids = set(self.bookkeeping["splits"].get(name, []))
        return [i for i, s in enumerate(self.samples) if s.video_id in ids]


def _draw_span(rng, t: int, lengths: tuple[int, int]) -> tuple[int, int]:
    length = int(rng.integers(lengths[0], min(lengths[1], t) + 1)) if lengths[0] <= t else t
    start = int(rng.integers(0, t - length + 1))
    return start, start + length - 1


def synthesize(spec: SyntheticSpec) -> SyntheticCorpus:
    """Generate a corpus in memory; deterministic for a given spec."""
    rng = np.random.default_rng(spec.seed)
    names = spec.resolved_class_names()
    c, t = spec.num_classes, spec.num_segments

    def prototypes(dim):
        p = rng.normal(size=(c, dim))
        return spec.prototype_scale * p / np.linalg.norm(p, axis=1, keepdims=True)

    proto_a = prototypes(spec.audio_dim)
    proto_v = prototypes(spec.visual_dim)

    samples, teachers = [], []
    total = nonaligned = 0
    by_modality = {"audio": 0, "visual": 0, "both": 0}
    per_class = np.zeros(c, dtype=int)
    width = max(4, len(str(max(spec.num_videos - 1, 0))))
    for k in range(spec.num_videos):
        vid = f"syn{k:0{width}d}"
        ya = np.zeros((t, c), dtype=np.uint8)
        yv = np.zeros((t, c), dtype=np.uint8)
        if spec.ave_style:
            n_events = 1
        else:
            n_events = int(rng.integers(spec.events_per_video[0], spec.events_per_video[1] + 1))
        classes = rng.choice(c, size=n_events, replace=False)
        for cls in classes:
            cls = int(cls)
            per_class[cls] += 1
            s, e = _draw_span(rng, t, spec.span_length)
            if spec.ave_style:
                kind = "both"
                j = spec.ave_jitter
                vs = int(np.clip(s + rng.integers(-j, j + 1), 0, t - 1))
                ve = int(np.clip(e + rng.integers(-j, j + 1), vs, t - 1))
                ya[s:e + 1, cls] = 1
                yv[vs:ve + 1, cls] = 1
                inter = max(0, min(e, ve) - max(s, vs) + 1)
                union_len = (e - s + 1) + (ve - vs + 1) - inter
                total += union_len
                nonaligned += union_len - inter
            else:
                kind = ("audio", "visual", "both")[int(rng.choice(3, p=spec.modality_mix))]
                length = e - s + 1
                total += length
                if kind != "both":
                    nonaligned += length
                if kind in ("audio", "both"):
                    ya[s:e + 1, cls] = 1
                if kind in ("visual", "both"):
                    yv[s:e + 1, cls] = 1
            by_modality[kind] += 1

        fa = ya @ proto_a + rng.normal(scale=spec.noise_scale / np.sqrt(spec.audio_dim), size=(t, spec.audio_dim))
        fv = yv @ proto_v + rng.normal(scale=spec.noise_scale / np.sqrt(spec.visual_dim), size=(t, spec.visual_dim))

        pos_a, pos_v = ya.astype(bool), yv.astype(bool)
        confused = pos_a.copy() if spec.confusable_modality == "audio" else pos_v.copy()
        for a, b in spec.confusable_pairs:
            confused[:, b] |= (pos_a if spec.confusable_modality == "audio" else pos_v)[:, a]
            confused[:, a] |= (pos_a if spec.confusable_modality == "audio" else pos_v)[:, b]
        if spec.confusable_modality == "audio":
            pos_a = confused
        else:
            pos_v = confused

        def teacher(pos):
            noise = rng.normal(scale=spec.teacher_noise, size=(t, c))
            return np.where(pos, spec.teacher_pos_mean, spec.teacher_neg_mean) + noise

        z_visual = teacher(pos_v)
        z_audio = teacher(pos_a)
        dense = DenseLabels(ya, yv)
        samples.append(VideoSample(vid, fa, fv, dense.video_label(), dense))
        teachers.append(TeacherLogits(vid, z_visual, z_audio))

    splits, start = {}, 0
    for name, size in spec.splits.items():
        splits[name] = [s.video_id for s in samples[start:start + size]]
        start += size
    bookkeeping = {
        "num_videos": spec.num_videos,
        "total_events": int(total),
        "nonaligned_events": int(nonaligned),
        "nonaligned_fraction": nonaligned / total if total else 0.0,
        "events_by_modality": by_modality,
        "class_event_counts": {n: int(v) for n, v in zip(names, per_class)},
        "splits": splits,
    }
    return SyntheticCorpus(spec, names, samples, teachers, bookkeeping)


def round_to_disk_precision(corpus: SyntheticCorpus) -> SyntheticCorpus:
    """Cast features and logits through float32 so in-memory values equal reloaded ones."""
    for s in corpus.samples:
        s.feats_audio = s.feats_audio.astype(np.float32).astype(np.float64)
        s.feats_visual = s.feats_visual.astype(np.float32).astype(np.float64)
    for tl in corpus.teachers:
        tl.z_visual = tl.z_visual.astype(np.float32).astype(np.float64)
        tl.z_audio = tl.z_audio.astype(np.float32).astype(np.float64)
    return corpus


def write_corpus(out_dir, corpus: SyntheticCorpus) -> Path:
    out_dir = Path(out_dir)
    try:
        (out_dir / "features").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise type(exc)(f"cannot create corpus directory {out_dir}: {exc}") from exc
    names = corpus.class_names
    (out_dir / "spec.json").write_text(json.dumps(corpus.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    write_class_table(out_dir / "classes.txt", names)
    rows = [
        ManifestRow(s.video_id, s.num_segments, [names[c] for c in np.flatnonzero(s.weak)])
        for s in corpus.samples
    ]
    write_manifest(out_dir / "manifest.csv", rows)
    row_by_id = {r.video_id: r for r in rows}
    for split, ids in corpus.bookkeeping["splits"].items():
        write_manifest(out_dir / f"{split}.csv", [row_by_id[v] for v in ids])
    for s in corpus.samples:
        save_tensor(out_dir / "features" / f"{s.video_id}.audio.avt", s.feats_audio)
        save_tensor(out_dir / "features" / f"{s.video_id}.visual.avt", s.feats_visual)
    export_dense_labels(out_dir / "dense_gt.txt", {s.video_id: s.dense_gt for s in corpus.samples})
    save_teacher_logits(out_dir / "logits", corpus.teachers)
    (out_dir / "bookkeeping.json").write_text(
        json.dumps(corpus.bookkeeping, indent=2, sort_keys=True) + "\n"
    )
    return out_dir


def generate_synthetic(spec: SyntheticSpec, out_dir) -> SyntheticCorpus:
    """Generate a corpus and write it to ``out_dir``; returns the float32-rounded corpus."""
    corpus = round_to_disk_precision(synthesize(spec))
    write_corpus(out_dir, corpus)
    return corpus


def load_bookkeeping(corpus_dir) -> dict:
    return json.loads((Path(corpus_dir) / "bookkeeping.json").read_text())
