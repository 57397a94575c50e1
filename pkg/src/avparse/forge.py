"""Dense pseudo-label elaboration from external teacher logits.

A visual teacher and an audio teacher each score every segment against every
class.  Thresholding those scores per class and intersecting the result with
the video-level label yields per-modality, per-segment training targets.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, ParseError, UsageError, ValidationError
from .tensorio import load_tensor, save_tensor

AWARE = "aware"
AGNOSTIC = "agnostic"


@dataclass
class TeacherLogits:
    video_id: str
    z_visual: np.ndarray
    z_audio: np.ndarray

    def __post_init__(self):
        self.z_visual = np.asarray(self.z_visual, dtype=np.float64)
        self.z_audio = np.asarray(self.z_audio, dtype=np.float64)
        if self.z_visual.ndim != 2 or self.z_visual.shape != self.z_audio.shape:
            raise ValidationError(
                f"{self.video_id}: teacher logits must both be T x C, got "
                f"{self.z_visual.shape} and {self.z_audio.shape}"
            )
        if not (np.all(np.isfinite(self.z_visual)) and np.all(np.isfinite(self.z_audio))):
            raise ValidationError(f"{self.video_id}: teacher logits contain non-finite values")

    @property
    def num_segments(self) -> int:
        return self.z_visual.shape[0]


@dataclass
class Thresholds:
    theta_visual: np.ndarray
    theta_audio: np.ndarray
    class_names: list[str] | None = None

    def __post_init__(self):
        self.theta_visual = np.asarray(self.theta_visual, dtype=np.float64)
        self.theta_audio = np.asarray(self.theta_audio, dtype=np.float64)
        if self.theta_visual.shape != self.theta_audio.shape or self.theta_visual.ndim != 1:
            raise ValidationError("visual and audio thresholds must be vectors of equal length")
        if not (np.all(np.isfinite(self.theta_visual)) and np.all(np.isfinite(self.theta_audio))):
            raise ValidationError("thresholds must be finite")

    @property
    def num_classes(self) -> int:
        return len(self.theta_visual)

    @classmethod
    def uniform(cls, num_classes: int, visual: float, audio: float) -> Thresholds:
        return cls(np.full(num_classes, visual), np.full(num_classes, audio))

    def save(self, path) -> None:
        names = self.class_names or [f"class{c}" for c in range(self.num_classes)]
        lines = ["class\ttheta_visual\ttheta_audio"]
        lines += [
            f"{n}\t{tv!r}\t{ta!r}"
            for n, tv, ta in zip(names, self.theta_visual.tolist(), self.theta_audio.tolist())
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Thresholds:
        """Read a thresholds TSV or a full prompt table."""
        text = Path(path).read_text(encoding="utf-8")
        header = text.splitlines()[0].split("\t") if text else []
        if "visual_caption" in header:
            return PromptTable.parse(text, path).thresholds()
        if header != ["class", "theta_visual", "theta_audio"]:
            raise ParseError("expected header 'class\\ttheta_visual\\ttheta_audio'", path, 1)
        names, tv, ta = [], [], []
        for lineno, line in enumerate(text.splitlines()[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"expected 3 columns, got {len(parts)}", path, lineno)
            try:
                tv.append(float(parts[1]))
                ta.append(float(parts[2]))
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from exc
            names.append(parts[0])
        return cls(np.array(tv), np.array(ta), names)


@dataclass
class DenseLabels:
    """Binary T x C segment labels for each modality."""

    y_audio: np.ndarray
    y_visual: np.ndarray

    def __post_init__(self):
        self.y_audio = np.asarray(self.y_audio)
        self.y_visual = np.asarray(self.y_visual)
        if self.y_audio.shape != self.y_visual.shape or self.y_audio.ndim != 2:
            raise ValidationError(
                f"dense labels must be two T x C matrices of equal shape, got "
                f"{self.y_audio.shape} and {self.y_visual.shape}"
            )
        for m in (self.y_audio, self.y_visual):
            if not np.all((m == 0) | (m == 1)):
                raise ValidationError("dense labels must be binary")
        self.y_audio = self.y_audio.astype(np.uint8)
        self.y_visual = self.y_visual.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.y_audio.shape

    def video_label(self) -> np.ndarray:
        """Classes present in either modality at any segment."""
        return (self.y_audio | self.y_visual).max(axis=0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseLabels):
            return NotImplemented
        return np.array_equal(self.y_audio, other.y_audio) and np.array_equal(
            self.y_visual, other.y_visual
        )


def _check_weak(weak, num_classes: int) -> np.ndarray:
    weak = np.asarray(weak)
    if weak.shape != (num_classes,):
        raise DimensionError(f"weak label has shape {weak.shape}, expected ({num_classes},)")
    if not np.all((weak == 0) | (weak == 1)):
        raise ValidationError("weak label must be binary")
    return weak.astype(bool)


# -- core operations ------------------------------------------------------------------


def teacher_logits_from_embeddings(frame_embs, class_embs) -> np.ndarray:
    """Raw inner products between segment embeddings (T x e) and class embeddings (C x e)."""
    frame_embs = np.asarray(frame_embs, dtype=np.float64)
    class_embs = np.asarray(class_embs, dtype=np.float64)
    if frame_embs.ndim != 2 or class_embs.ndim != 2 or frame_embs.shape[1] != class_embs.shape[1]:
        raise DimensionError(
            f"embedding dims disagree: frames {frame_embs.shape}, classes {class_embs.shape}"
        )
    return frame_embs @ class_embs.T


def elaborate(
    logits: TeacherLogits,
    thresholds: Thresholds,
    weak,
    video_filter: bool = True,
    modality_mode: str = AWARE,
) -> DenseLabels:
    """Turn teacher logits into dense per-modality labels.

    A cell is positive when the teacher logit strictly exceeds the class
    threshold and, with ``video_filter``, the class is in the weak label.
    In ``agnostic`` mode both modalities receive the OR of the two teachers.
    """
    if logits.z_visual.shape != logits.z_audio.shape:
        raise ValidationError("visual and audio teacher logits have different shapes")
    num_classes = logits.z_visual.shape[1]
    if thresholds.num_classes != num_classes:
        raise DimensionError(
            f"{thresholds.num_classes} thresholds for {num_classes} logit columns"
        )
    weak = _check_weak(weak, num_classes)
    visual = logits.z_visual > thresholds.theta_visual
    audio = logits.z_audio > thresholds.theta_audio
    if modality_mode == AGNOSTIC:
        visual = audio = visual | audio
    elif modality_mode != AWARE:
        raise ConfigurationError(f"unknown modality mode {modality_mode!r}")
    if video_filter:
        visual = visual & weak
        audio = audio & weak
    return DenseLabels(y_audio=audio, y_visual=visual)


def broadcast_labels(weak, num_segments: int) -> DenseLabels:
    """Naive dense labels: every weak event in every segment of both modalities."""
    row = np.asarray(weak, dtype=np.uint8)
    full = np.tile(row, (num_segments, 1))
    return DenseLabels(full, full.copy())


def smooth_labels(weak, epsilon: float) -> np.ndarray:
    """Symmetric binary label smoothing: 1 -> 1 - eps, 0 -> eps."""
    if not 0 <= epsilon < 0.5:
        raise ConfigurationError(f"smoothing epsilon must be in [0, 0.5), got {epsilon}")
    y = np.asarray(weak, dtype=np.float64)
    return y * (1.0 - epsilon) + (1.0 - y) * epsilon


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def kd_targets(logits: TeacherLogits) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment class distributions (visual, audio) from teacher logits."""
    return _softmax_rows(logits.z_visual), _softmax_rows(logits.z_audio)


def extend_background(dense: DenseLabels) -> DenseLabels:
    """Append a background column that is 1 exactly on all-zero rows."""

    def extend(m):
        bg = (m.sum(axis=1) == 0).astype(np.uint8)[:, None]
        return np.concatenate([m, bg], axis=1)

    return DenseLabels(extend(dense.y_audio), extend(dense.y_visual))


# -- threshold calibration -----------------------------------------------------------


@dataclass
class ThresholdGrid:
    """Search grid.  ``lo``/``hi`` default to the per-class observed logit range."""

    lo: float | None = None
    hi: float | None = None
    step: float | None = None
    num: int = 64

    def __post_init__(self):
        if self.step is not None and self.step <= 0:
            raise ConfigurationError(f"grid step must be positive, got {self.step}")
        if self.num < 1:
            raise ConfigurationError(f"grid needs at least one point, got {self.num}")
        if self.lo is not None and self.hi is not None and self.lo > self.hi:
            raise ConfigurationError(f"grid lo {self.lo} exceeds hi {self.hi}")

    def values(self, observed_lo: float, observed_hi: float) -> np.ndarray:
        lo = observed_lo if self.lo is None else self.lo
        hi = observed_hi if self.hi is None else self.hi
        if hi <= lo:
            return np.array([hi])
        if self.step is not None:
            n = int(np.floor((hi - lo) / self.step + 1e-9))
            grid = lo + self.step * np.arange(n + 1)
            if grid[-1] < hi:
                grid = np.append(grid, hi)
            return grid
        return np.linspace(lo, hi, self.num)


@dataclass
class CalibrationResult:
    thresholds: Thresholds
    f_visual: np.ndarray
    f_audio: np.ndarray
    flagged: list[tuple[str, int]] = field(default_factory=list)

    def table_rows(self, class_names=None) -> list[dict]:
        names = class_names or [f"class{c}" for c in range(len(self.f_visual))]
        flagged = set(self.flagged)
        return [
            {
                "class": names[c],
                "theta_visual": float(self.thresholds.theta_visual[c]),
                "f_visual": float(self.f_visual[c]),
                "theta_audio": float(self.thresholds.theta_audio[c]),
                "f_audio": float(self.f_audio[c]),
                "absent": sorted(m for m, k in flagged if k == c),
            }
            for c in range(len(self.f_visual))
        ]


def class_f_scores(scores: np.ndarray, gt: np.ndarray, allowed: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """F-score of ``(scores > theta) & allowed`` against ``gt`` for each theta in ``grid``.

    ``scores``, ``gt`` and ``allowed`` are flat arrays over all (video, segment) cells
    of one class.
    """
    gt = gt.astype(bool)
    pred = (scores[None, :] > grid[:, None]) & allowed[None, :]
    tp = (pred & gt).sum(axis=1)
    fp = (pred & ~gt).sum(axis=1)
    fn = (~pred & gt).sum(axis=1)
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 1.0)


def calibrate_thresholds(
    logits: list[TeacherLogits],
    dense_gt: list[DenseLabels],
    weak: list,
    grid: ThresholdGrid | None = None,
    video_filter: bool = True,
) -> CalibrationResult:
    """Choose per-class, per-modality thresholds maximising segment-level F on a labelled corpus.

    Ties go to the larger threshold.  A class with no ground-truth positives in a
    modality gets the top of its grid and is listed in ``flagged``.
    """
    if not logits:
        raise UsageError("threshold calibration needs a non-empty corpus")
    if not (len(logits) == len(dense_gt) == len(weak)):
        raise UsageError("logits, ground truth and weak labels must align")
    grid = grid or ThresholdGrid()
    num_classes = logits[0].z_visual.shape[1]
    for lg, gt in zip(logits, dense_gt):
        if lg.z_visual.shape != gt.shape:
            raise DimensionError(f"{lg.video_id}: logits {lg.z_visual.shape} vs labels {gt.shape}")

    allowed = np.concatenate(
        [
            np.tile(_check_weak(w, num_classes) if video_filter else np.ones(num_classes, bool), (lg.num_segments, 1))
            for lg, w in zip(logits, weak)
        ]
    )
    theta = {}
    best_f = {}
    flagged = []
    for modality, attr_z, attr_y in (("visual", "z_visual", "y_visual"), ("audio", "z_audio", "y_audio")):
        z = np.concatenate([getattr(lg, attr_z) for lg in logits])
        y = np.concatenate([getattr(gt, attr_y) for gt in dense_gt])
        theta[modality] = np.empty(num_classes)
        best_f[modality] = np.empty(num_classes)
        for c in range(num_classes):
            values = grid.values(float(z[:, c].min()), float(z[:, c].max()))
            if not y[:, c].any():
                flagged.append((modality, c))
                theta[modality][c] = values[-1]
                best_f[modality][c] = class_f_scores(z[:, c], y[:, c], allowed[:, c], values[-1:])[0]
                continue
            f = class_f_scores(z[:, c], y[:, c], allowed[:, c], values)
            k = np.flatnonzero(f == f.max())[-1]
            theta[modality][c] = values[k]
            best_f[modality][c] = f[k]
    return CalibrationResult(
        thresholds=Thresholds(theta["visual"], theta["audio"]),
        f_visual=best_f["visual"],
        f_audio=best_f["audio"],
        flagged=flagged,
    )


# -- prompt table ------------------------------------------------------------------------

PROMPT_HEADER = ["class", "visual_caption", "audio_caption", "theta_visual", "theta_audio"]


@dataclass
class PromptRow:
    name: str
    visual_caption: str
    audio_caption: str
    theta_visual: float
    theta_audio: float


@dataclass
class PromptTable:
    rows: list[PromptRow]

    @property
    def class_names(self) -> list[str]:
        return [r.name for r in self.rows]

    def thresholds(self) -> Thresholds:
        return Thresholds(
            np.array([r.theta_visual for r in self.rows]),
            np.array([r.theta_audio for r in self.rows]),
            self.class_names,
        )

    def check_classes(self, class_names: list[str]) -> None:
        if len(class_names) != len(self.rows):
            raise ValidationError(
                f"prompt table has {len(self.rows)} classes but the corpus has {len(class_names)}"
            )

    @classmethod
    def parse(cls, text: str, path=None) -> PromptTable:
        lines = text.splitlines()
        if not lines or lines[0].split("\t") != PROMPT_HEADER:
            raise ParseError("expected header " + "\\t".join(PROMPT_HEADER), path, 1)
        rows = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ParseError(f"expected 5 tab-separated columns, got {len(parts)}", path, lineno)
            name, vcap, acap = parts[:3]
            if not vcap.strip() or not acap.strip():
                raise ParseError("captions must be non-empty", path, lineno)
            try:
                tv, ta = float(parts[3]), float(parts[4])
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from exc
            rows.append(PromptRow(name, vcap, acap, tv, ta))
        return cls(rows)

    @classmethod
    def load(cls, path) -> PromptTable:
        return cls.parse(Path(path).read_text(encoding="utf-8"), path)

    def dumps(self) -> str:
        out = ["\t".join(PROMPT_HEADER)]
        for r in self.rows:
            out.append(
                f"{r.name}\t{r.visual_caption}\t{r.audio_caption}\t{r.theta_visual:g}\t{r.theta_audio:g}"
            )
        return "\n".join(out) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def default_prompt_table() -> PromptTable:
    """The 25-class LLP captions and thresholds shipped with the package."""
    text = resources.files("avparse").joinpath("data/llp_prompts.tsv").read_text(encoding="utf-8")
    return PromptTable.parse(text, "llp_prompts.tsv")


# -- teacher logit files -------------------------------------------------------------------


def save_teacher_logits(out_dir, teachers: list[TeacherLogits]) -> None:
    """Write ``manifest.tsv`` (video_id, T) plus visual/audio tensor blobs per video."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for t in teachers:
        save_tensor(out_dir / f"{t.video_id}.visual.avt", t.z_visual)
        save_tensor(out_dir / f"{t.video_id}.audio.avt", t.z_audio)
        lines.append(f"{t.video_id}\t{t.num_segments}")
    (out_dir / "manifest.tsv").write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_teacher_logits(logits_dir) -> dict[str, TeacherLogits]:
    logits_dir = Path(logits_dir)
    manifest = logits_dir / "manifest.tsv"
    try:
        text = manifest.read_text(encoding="utf-8")
    except OSError as exc:
        raise type(exc)(f"cannot read teacher manifest {manifest}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError("expected 'video_id<TAB>T'", manifest, lineno)
        vid, t_str = parts
        try:
            t = int(t_str)
        except ValueError as exc:
            raise ParseError(f"bad segment count {t_str!r}", manifest, lineno) from exc
        zv = load_tensor(logits_dir / f"{vid}.visual.avt")
        za = load_tensor(logits_dir / f"{vid}.audio.avt")
        if zv.ndim != 2 or zv.shape[0] != t or za.shape != zv.shape:
            raise ValidationError(
                f"{vid}: manifest says T={t} but tensors have shapes {zv.shape}, {za.shape}"
            )
        out[vid] = TeacherLogits(vid, zv, za)
    return out


# -- dense label files ---------------------------------------------------------------------


def dumps_dense_labels(labels: dict[str, DenseLabels]) -> str:
    buf = io.StringIO()
    for vid, dense in labels.items():
        buf.write(f"{vid}\n")
        for tag, mat in (("A", dense.y_audio), ("V", dense.y_visual)):
            for row in mat:
                buf.write(f"{tag}: " + " ".join(str(int(v)) for v in row) + "\n")
    return buf.getvalue()


def export_dense_labels(path, labels: dict[str, DenseLabels]) -> None:
    Path(path).write_text(dumps_dense_labels(labels), encoding="utf-8")


def parse_dense_labels(text: str, path=None) -> dict[str, DenseLabels]:
    out: dict[str, DenseLabels] = {}
    current = None
    rows: dict[str, list] = {}
    num_classes = None

    def finish(lineno):
        if current is None:
            return
        if not rows["A"] or len(rows["A"]) != len(rows["V"]):
            raise ParseError(
                f"video {current}: {len(rows['A'])} audio rows vs {len(rows['V'])} visual rows",
                path,
                lineno,
            )
        out[current] = DenseLabels(np.array(rows["A"]), np.array(rows["V"]))

    lines = text.splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if line.startswith(("A:", "V:")):
            if current is None:
                raise ParseError("label row before any video id", path, lineno)
            tag = line[0]
            if tag == "A" and rows["V"]:
                raise ParseError("audio row after visual rows", path, lineno)
            tokens = line[2:].split()
            try:
                values = [int(tok) for tok in tokens]
            except ValueError as exc:
                raise ParseError(f"non-integer token in {tokens}", path, lineno) from exc
            if any(v not in (0, 1) for v in values):
                raise ParseError(f"label values must be 0 or 1, got {values}", path, lineno)
            if num_classes is None:
                num_classes = len(values)
            if len(values) != num_classes or not values:
                raise ParseError(
                    f"expected {num_classes} class tokens, got {len(values)}", path, lineno
                )
            rows[tag].append(values)
        else:
            finish(lineno)
            current = line.strip()
            if current in out:
                raise ParseError(f"duplicate video id {current}", path, lineno)
            rows = {"A": [], "V": []}
    finish(len(lines))
    return out


def import_external_labels(path, corpus=None) -> dict[str, DenseLabels]:
    """Load dense labels from a file, e.g. externally denoised pseudo labels.

    With ``corpus`` given, each video's T and C are checked against it.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise type(exc)(f"cannot read label file {path}: {exc}") from exc
    labels = parse_dense_labels(text, path)
    if corpus is not None:
        for sample in corpus:
            if sample.video_id not in labels:
                raise ValidationError(f"{path}: no labels for video {sample.video_id}")
            expected = (len(sample.feats_audio), len(sample.weak))
            got = labels[sample.video_id].shape
            if got != expected:
                raise ValidationError(
                    f"{path}: video {sample.video_id} labels are {got}, expected {expected}"
                )
    return labels
