"""Losses and the epoch-based training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError, ParseError, TrainingError, UsageError
from .forge import DenseLabels, TeacherLogits, extend_background, kd_targets, smooth_labels
from .han import (
    PRESETS,
    ForwardOutput,
    ModelConfig,
    ModelParams,
    forward_batch,
    group_by_length,
    init_model,
    predict_fields,
    predict_probs,
    save_checkpoint,
)
from .metrics import MetricsReport, ave_accuracy, ave_ground_truth, ave_predict, evaluate_corpus, predictions_from_probs
from .optim import LrSchedule, OptimizerState, adamw_step, clip_global_norm, lr_at
from .tensor import Tensor

log = logging.getLogger(__name__)

SUM = "sum"
MEAN = "mean"
TERM_KINDS = ("guided", "kd", "valor_global", "valor")
AVE_MODES = ("ave-weak", "ave-valor")


# -- per-modality terms ---------------------------------------------------------------


def _reduce_t(per_segment_mean: Tensor, num_segments: int, reduction: str) -> Tensor:
    """``per_segment_mean`` averages over every (batch, t, class) cell."""
    if reduction == SUM:
        return per_segment_mean * float(num_segments)
    if reduction == MEAN:
        return per_segment_mean
    raise ConfigurationError(f"temporal reduction must be sum or mean, got {reduction!r}")


def video_term(out: ForwardOutput, weak) -> Tensor:
    return tn.bce(out.video_prob, np.asarray(weak, dtype=np.float64))


def guided_term(modality_prob: Tensor, target) -> Tensor:
    """BCE between a modality-level video prediction and a (smoothed) weak target."""
    return tn.bce(modality_prob, np.asarray(target, dtype=np.float64))


def valor_term(probs: Tensor, dense, reduction: str = MEAN) -> Tensor:
    """Per-segment BCE against dense labels, reduced over time, averaged over the batch.

    The BCE of one segment averages over classes, so with sum reduction a
    video contributes the sum over t of its per-segment BCE.
    """
    dense = np.asarray(dense, dtype=np.float64)
    return _reduce_t(tn.bce(probs, dense), probs.shape[-2], reduction)


def kd_term(logits: Tensor, q_teacher, reduction: str = MEAN) -> Tensor:
    """KL(teacher || softmax(logits)) per segment, reduced over time, averaged over the batch."""
    q = np.asarray(q_teacher, dtype=np.float64)
    if q.shape != logits.shape:
        raise UsageError(f"teacher targets {q.shape} do not match logits {logits.shape}")
    tn._check_distribution(q, "teacher")
    total = tn.kl_div_log(q, tn.log_softmax(logits, axis=-1))
    num_t = logits.shape[-2]
    videos = int(np.prod(logits.shape[:-2])) if logits.ndim > 2 else 1
    if reduction == SUM:
        return total / float(videos)
    if reduction == MEAN:
        return total / float(videos * num_t)
    raise ConfigurationError(f"temporal reduction must be sum or mean, got {reduction!r}")


# -- full losses ----------------------------------------------------------------------


def loss_base(out: ForwardOutput, weak, epsilon: float = 0.1) -> Tensor:
    y_tilde = smooth_labels(weak, epsilon)
    return video_term(out, weak) + guided_term(out.modality_prob_a, y_tilde) + guided_term(out.modality_prob_v, y_tilde)


def loss_kd(out: ForwardOutput, weak, q_audio, q_visual, reduction: str = MEAN) -> Tensor:
    return video_term(out, weak) + kd_term(out.logits_a, q_audio, reduction) + kd_term(out.logits_v, q_visual, reduction)


def loss_valor(out: ForwardOutput, dense_audio, dense_visual, weak, reduction: str = MEAN) -> Tensor:
    return (
        video_term(out, weak)
        + valor_term(out.probs_a, dense_audio, reduction)
        + valor_term(out.probs_v, dense_visual, reduction)
    )


@dataclass(frozen=True)
class LossSpec:
    """Which term trains each modality; ``L_video`` is always included."""

    audio: str
    visual: str

    def __post_init__(self):
        for kind in (self.audio, self.visual):
            if kind not in TERM_KINDS:
                raise ConfigurationError(f"unknown loss term {kind!r}; expected one of {TERM_KINDS}")

    @property
    def needs_dense(self) -> bool:
        return any(k in ("valor", "valor_global") for k in (self.audio, self.visual))

    @property
    def needs_teacher(self) -> bool:
        return "kd" in (self.audio, self.visual)


def parse_loss_mode(mode: str) -> LossSpec | str:
    """``base``, ``kd``, ``valor``, ``mixed:<audio>,<visual>`` or an AVE mode."""
    if mode in AVE_MODES:
        return mode
    simple = {"base": ("guided", "guided"), "kd": ("kd", "kd"), "valor": ("valor", "valor")}
    if mode in simple:
        return LossSpec(*simple[mode])
    if mode.startswith("mixed:"):
        parts = [p.strip() for p in mode[len("mixed:"):].split(",")]
        if len(parts) == 2:
            return LossSpec(parts[0], parts[1])
    raise ConfigurationError(
        f"unknown loss mode {mode!r}; use base, kd, valor, mixed:<audio>,<visual> or {', '.join(AVE_MODES)}"
    )


@dataclass
class BatchTargets:
    weak: np.ndarray
    dense_audio: np.ndarray | None = None
    dense_visual: np.ndarray | None = None
    q_audio: np.ndarray | None = None
    q_visual: np.ndarray | None = None


def modality_term(kind: str, modality: str, out: ForwardOutput, targets: BatchTargets, epsilon: float, reduction: str) -> Tensor:
    a = modality == "a"
    if kind == "guided":
        return guided_term(out.modality_prob_a if a else out.modality_prob_v, smooth_labels(targets.weak, epsilon))
    if kind == "kd":
        q = targets.q_audio if a else targets.q_visual
        return kd_term(out.logits_a if a else out.logits_v, q, reduction)
    dense = targets.dense_audio if a else targets.dense_visual
    if kind == "valor_global":
        return guided_term(out.modality_prob_a if a else out.modality_prob_v, dense.max(axis=-2))
    return valor_term(out.probs_a if a else out.probs_v, dense, reduction)


def loss_mixed(out: ForwardOutput, spec: LossSpec, targets: BatchTargets, epsilon: float = 0.1, reduction: str = MEAN) -> dict[str, Tensor]:
    """Components ``video``, ``audio``, ``visual`` and their sum ``total``."""
    parts = {
        "video": video_term(out, targets.weak),
        "audio": modality_term(spec.audio, "a", out, targets, epsilon, reduction),
        "visual": modality_term(spec.visual, "v", out, targets, epsilon, reduction),
    }
    parts["total"] = parts["video"] + parts["audio"] + parts["visual"]
    return parts


def ave_weak_target(weak) -> np.ndarray:
    """C-class weak label extended with a zero background entry."""
    weak = np.asarray(weak, dtype=np.float64)
    return np.concatenate([weak, np.zeros(weak.shape[:-1] + (1,))], axis=-1)


def loss_ave(out: ForwardOutput, mode: str, weak=None, dense_audio=None, dense_visual=None) -> Tensor:
    """AVE losses on (..., T, C+1) logits.

    ``weak``: z = mean over t and modality of the logits, BCE(sigmoid(z), y).
    ``valor``: sum over t of the per-segment BCE in each modality against
    background-extended dense labels.
    """
    if mode == "weak":
        if weak is None:
            raise UsageError("weak-mode AVE loss needs video-level labels")
        y = np.asarray(weak, dtype=np.float64)
        if y.shape != out.video_prob.shape:
            raise UsageError(f"AVE weak labels {y.shape} must include background: expected {out.video_prob.shape}")
        z = (out.logits_a + out.logits_v).mean(axis=-2) * 0.5
        return tn.bce(tn.sigmoid(z), y)
    if mode == "valor":
        if dense_audio is None or dense_visual is None:
            raise UsageError("valor-mode AVE loss needs dense labels for both modalities")
        da = np.asarray(dense_audio, dtype=np.float64)
        dv = np.asarray(dense_visual, dtype=np.float64)
        if da.shape != out.probs_a.shape or dv.shape != out.probs_v.shape:
            raise UsageError(f"AVE dense labels must be background-extended to {out.probs_a.shape}")
        return valor_term(out.probs_a, da, SUM) + valor_term(out.probs_v, dv, SUM)
    raise UsageError(f"AVE loss mode must be weak or valor, got {mode!r}")


# -- configuration --------------------------------------------------------------------


@dataclass
class TrainConfig:
    loss_mode: str = "base"
    epochs: int = 60
    batch_size: int = 64
    peak_lr: float = 1e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 10
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-3
    grad_clip: float = 1.0
    seed: int = 0
    smoothing: float = 0.1
    temporal_reduction: str = MEAN
    model_preset: str = "standard"
    hidden_dim: int = 0
    num_layers: int = 0
    ffn_dim: int = 0
    heads: int = 0
    pre_norm: bool = False
    select_best: bool = True
    video_gate: bool = False
    threshold: float = 0.5
    checkpoint_every: int = 0

    def __post_init__(self):
        parse_loss_mode(self.loss_mode)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.temporal_reduction not in (SUM, MEAN):
            raise ConfigurationError(f"temporal_reduction must be sum or mean, got {self.temporal_reduction!r}")
        if self.model_preset not in PRESETS:
            raise ConfigurationError(f"unknown model preset {self.model_preset!r}")
        if self.grad_clip <= 0:
            raise ConfigurationError("grad_clip must be positive")
        if not 0 <= self.smoothing < 0.5:
            raise ConfigurationError("smoothing must be in [0, 0.5)")
        if self.epochs:
            self.schedule()

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.peak_lr, self.min_lr, self.warmup_epochs, self.epochs)

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps, weight_decay=self.weight_decay)

    @property
    def is_ave(self) -> bool:
        return self.loss_mode in AVE_MODES

    def model_config(self, audio_dim: int, visual_dim: int, num_classes: int) -> ModelConfig:
        overrides = {"audio_feat_dim": audio_dim, "visual_feat_dim": visual_dim, "num_classes": num_classes}
        overrides["ave_mode"] = self.is_ave
        overrides["pre_norm"] = self.pre_norm
        for name in ("hidden_dim", "num_layers", "ffn_dim", "heads"):
            if getattr(self, name):
                overrides[name] = getattr(self, name)
        return PRESETS[self.model_preset](**overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def parse(cls, text: str, path=None, base: TrainConfig | None = None) -> TrainConfig:
        """Read ``key = value`` lines on top of ``base`` (defaults when omitted)."""
        values = asdict(base) if base is not None else {}
        types = {f.name: f.type for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"expected key = value, got {raw.strip()!r}", path, lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ParseError(f"unknown training option {key!r}", path, lineno)
            try:
                values[key] = _coerce(value, types[key])
            except ValueError as exc:
                raise ParseError(f"bad value for {key}: {value!r}", path, lineno) from exc
        return cls(**values)

    @classmethod
    def load(cls, path, base: TrainConfig | None = None) -> TrainConfig:
        path = Path(path)
        return cls.parse(path.read_text(encoding="utf-8"), path, base)


def _coerce(value: str, type_name: str):
    if type_name == "bool":
        lowered = value.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(value)
    if type_name == "int":
        return int(value)
    if type_name == "float":
        return float(value)
    return value


def standard_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"model_preset": "standard", "peak_lr": 1e-4, "min_lr": 1e-6, **overrides})


def variant_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"model_preset": "variant", "peak_lr": 3e-4, "min_lr": 3e-6, **overrides})


def ave_train_config(**overrides) -> TrainConfig:
    base = {
        "loss_mode": "ave-valor",
        "model_preset": "standard",
        "peak_lr": 3e-4,
        "min_lr": 3e-6,
        "batch_size": 16,
        "epochs": 120,
    }
    return TrainConfig(**{**base, **overrides})


TRAIN_PRESETS = {"standard": standard_train_config, "variant": variant_train_config, "ave": ave_train_config}


# -- reports --------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    losses: dict[str, float]
    validation: float | None = None


@dataclass
class TrainReport:
    seed: int
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    selection_metric: str = ""
    best_epoch: int | None = None
    validation: dict | None = None
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        data = asdict(self)
        if not include_timing:
            data.pop("wall_time")
        return data

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"


# -- training loop --------------------------------------------------------------------


def _stack_targets(corpus, idx, spec, dense, teachers, ave: bool) -> BatchTargets:
    weak = np.stack([corpus[i].weak for i in idx]).astype(np.float64)
    targets = BatchTargets(weak=ave_weak_target(weak) if ave else weak)
    if dense is not None:
        labels = [dense[corpus[i].video_id] for i in idx]
        if ave:
            labels = [extend_background(d) for d in labels]
        targets.dense_audio = np.stack([d.y_audio for d in labels]).astype(np.float64)
        targets.dense_visual = np.stack([d.y_visual for d in labels]).astype(np.float64)
    if teachers is not None:
        qs = [kd_targets(teachers[corpus[i].video_id]) for i in idx]
        targets.q_visual = np.stack([q[0] for q in qs])
        targets.q_audio = np.stack([q[1] for q in qs])
    return targets


def batch_loss(params: ModelParams, corpus, idx, config: TrainConfig, dense=None, teachers=None) -> dict[str, Tensor]:
    mode = parse_loss_mode(config.loss_mode)
    xa = np.stack([corpus[i].feats_audio for i in idx])
    xv = np.stack([corpus[i].feats_visual for i in idx])
    out = forward_batch(params, xa, xv)
    targets = _stack_targets(corpus, idx, mode, dense, teachers, config.is_ave)
    if mode == "ave-weak":
        return {"total": loss_ave(out, "weak", weak=targets.weak)}
    if mode == "ave-valor":
        return {"total": loss_ave(out, "valor", dense_audio=targets.dense_audio, dense_visual=targets.dense_visual)}
    return loss_mixed(out, mode, targets, config.smoothing, config.temporal_reduction)


def validate(params: ModelParams, corpus, config: TrainConfig) -> tuple[float, dict]:
    """Selection score and full report on a corpus with dense ground truth."""
    if config.is_ave:
        acc = ave_model_accuracy(params, corpus, config.threshold)
        return 100.0 * acc, {"ave_accuracy": 100.0 * acc}
    report = evaluate_model(params, corpus, config.threshold, config.video_gate)
    return report.segment["Type"], report.to_dict()


def model_predictions(params: ModelParams, corpus, threshold: float = 0.5, video_gate: bool = False):
    """Binary (audio, visual) T x C predictions per video.

    Segments are binarized at ``threshold`` alone. With ``video_gate`` a class
    is also required to clear ``threshold`` at the video level.
    """
    if params.config.ave_mode:
        raise UsageError("AVVP predictions need a model without the background class")
    outs = predict_fields(params, corpus, ("probs_a", "probs_v", "video_prob"))
    gate = [o[2] for o in outs] if video_gate else None
    return predictions_from_probs([(o[0], o[1]) for o in outs], threshold, gate)


def evaluate_model(params: ModelParams, corpus, threshold: float = 0.5, video_gate: bool = False, **kwargs) -> MetricsReport:
    preds = model_predictions(params, corpus, threshold, video_gate)
    return evaluate_corpus(preds, [s.dense_gt for s in corpus], **kwargs)


def ave_model_predictions(params: ModelParams, corpus, threshold: float = 0.5) -> list[np.ndarray]:
    if not params.config.ave_mode:
        raise UsageError("AVE predictions need a model built with the background class")
    return [ave_predict(pa, pv, threshold) for pa, pv in predict_probs(params, corpus)]


def ave_model_accuracy(params: ModelParams, corpus, threshold: float = 0.5) -> float:
    preds = np.concatenate(ave_model_predictions(params, corpus, threshold))
    gts = np.concatenate([ave_ground_truth(s.dense_gt) for s in corpus])
    return ave_accuracy(preds, gts)


def _check_inputs(corpus, config: TrainConfig, dense, teachers) -> None:
    if not corpus:
        raise UsageError("cannot train on an empty corpus")
    mode = parse_loss_mode(config.loss_mode)
    needs_dense = mode == "ave-valor" or (isinstance(mode, LossSpec) and mode.needs_dense)
    needs_teacher = isinstance(mode, LossSpec) and mode.needs_teacher
    if needs_dense:
        if dense is None:
            raise UsageError(f"loss mode {config.loss_mode} needs elaborated dense labels")
        missing = [s.video_id for s in corpus if s.video_id not in dense]
        if missing:
            raise UsageError(f"no dense labels for {len(missing)} videos, e.g. {missing[0]}")
    if needs_teacher:
        if teachers is None:
            raise UsageError(f"loss mode {config.loss_mode} needs teacher logits")
        missing = [s.video_id for s in corpus if s.video_id not in teachers]
        if missing:
            raise UsageError(f"no teacher logits for {len(missing)} videos, e.g. {missing[0]}")


def train(
    corpus,
    config: TrainConfig,
    dense: dict[str, DenseLabels] | None = None,
    teachers: dict[str, TeacherLogits] | None = None,
    val_corpus=None,
    params: ModelParams | None = None,
    checkpoint_dir=None,
) -> tuple[ModelParams, TrainReport]:
    """Train a model; returns the selected parameters and a report.

    Epoch 0 of the warmup has learning rate 0, so it only records losses.
    With a validation corpus the parameters of the epoch with the best
    selection score (segment Type@AV, or AVE accuracy) are returned.
    """
    _check_inputs(corpus, config, dense, teachers)
    if params is None:
        sample = corpus[0]
        model_cfg = config.model_config(
            sample.feats_audio.shape[1], sample.feats_visual.shape[1], len(sample.weak)
        )
        params = init_model(model_cfg, config.seed)
    start = time.perf_counter()
    report = TrainReport(seed=config.seed, config=config.to_dict())
    report.selection_metric = "ave_accuracy" if config.is_ave else "segment Type@AV"
    rng = np.random.default_rng(config.seed)
    state = config.optimizer_state()
    plist = params.parameters()
    best_score, best_data = -np.inf, None
    schedule = config.schedule() if config.epochs else None
    for epoch in range(config.epochs):
        lr = lr_at(schedule, epoch)
        order = rng.permutation(len(corpus))
        sums: dict[str, float] = {}
        batches = group_by_length(corpus, config.batch_size, order=order)
        for step, idx in enumerate(batches):
            params.zero_grad()
            parts = batch_loss(params, corpus, idx, config, dense, teachers)
            values = {k: v.item() for k, v in parts.items()}
            if not all(np.isfinite(v) for v in values.values()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}: {values}")
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            if lr > 0:
                parts["total"].backward()
                grads = [p.grad for p in plist]
                clip_global_norm(grads, config.grad_clip)
                adamw_step(plist, grads, state, lr)
        record = EpochRecord(epoch, lr, {k: v / len(batches) for k, v in sums.items()})
        if val_corpus:
            score, _ = validate(params, val_corpus, config)
            record.validation = score
            if score > best_score:
                best_score, best_data = score, {k: t.data.copy() for k, t in params.tensors.items()}
                report.best_epoch = epoch
        report.epochs.append(record)
        log.info("epoch %d lr %.3g loss %.5f val %s", epoch, lr, record.losses["total"], record.validation)
        if checkpoint_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(params, Path(checkpoint_dir) / f"epoch{epoch + 1:03d}")
    if val_corpus and config.select_best and best_data is not None:
        for k, t in params.tensors.items():
            t.data[...] = best_data[k]
    else:
        report.best_epoch = config.epochs - 1 if config.epochs else None
    if val_corpus:
        _, report.validation = validate(params, val_corpus, config)
    report.wall_time = time.perf_counter() - start
    return params, report
