"""Hybrid Attention Network with multi-modal multiple-instance pooling.

Shapes: features are (B, T, feat_dim) inside the batched path; ``forward``
wraps a single video and strips the batch axis again.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError, DimensionError, ParseError, ValidationError
from .tensor import Tensor
from .tensorio import load_tensor, save_tensor

MODALITIES = ("a", "v")

# LLP feature sizes: VGGish audio, ResNet-152 + R(2+1)D visual.
LLP_AUDIO_DIM = 128
LLP_VISUAL_DIM = 2048 + 512


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 512
    num_layers: int = 1
    num_classes: int = 25
    heads: int = 4
    audio_feat_dim: int = LLP_AUDIO_DIM
    visual_feat_dim: int = LLP_VISUAL_DIM
    ave_mode: bool = False
    ffn_dim: int | None = None
    pre_norm: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("hidden_dim", "num_layers", "num_classes", "heads", "audio_feat_dim", "visual_feat_dim"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.heads:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} is not divisible by heads {self.heads}"
            )
        if self.ffn_dim is not None and self.ffn_dim <= 0:
            raise ConfigurationError(f"ffn_dim must be positive, got {self.ffn_dim}")
        if self.dropout != 0.0:
            raise ConfigurationError("dropout is not supported; leave it at 0")

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 2 * self.hidden_dim

    @property
    def num_outputs(self) -> int:
        return self.num_classes + 1 if self.ave_mode else self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> ModelConfig:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, path, exc.lineno) from exc
        return cls.from_dict(data)


def standard_preset(**overrides) -> ModelConfig:
    """One 512-wide HAN layer."""
    return ModelConfig(**{"hidden_dim": 512, "num_layers": 1, **overrides})


def variant_preset(**overrides) -> ModelConfig:
    """Four 256-wide HAN layers; the wider FFN keeps the parameter budget of the standard preset."""
    return ModelConfig(**{"hidden_dim": 256, "num_layers": 4, "ffn_dim": 704, **overrides})


PRESETS = {"standard": standard_preset, "variant": variant_preset}


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def clone(self) -> ModelParams:
        return ModelParams(
            self.config, {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()}
        )

    def layer(self, index: int) -> dict:
        """Parameters of HAN layer ``index`` as {"a": {...}, "v": {...}}."""
        out = {}
        for m in MODALITIES:
            prefix = f"layer{index}.{m}."
            out[m] = {k[len(prefix):]: t for k, t in self.tensors.items() if k.startswith(prefix)}
        return out


def init_bound(fan_in: int) -> float:
    return 1.0 / np.sqrt(fan_in)


def _parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int | None]]:
    """(name, shape, fan_in) for every parameter; fan_in None marks LayerNorm gain/bias."""
    d, f, c = config.hidden_dim, config.ffn_width, config.num_outputs
    spec = [
        ("in_a.w", (config.audio_feat_dim, d), config.audio_feat_dim),
        ("in_a.b", (d,), config.audio_feat_dim),
        ("in_v.w", (config.visual_feat_dim, d), config.visual_feat_dim),
        ("in_v.b", (d,), config.visual_feat_dim),
    ]
    for i in range(config.num_layers):
        for m in MODALITIES:
            p = f"layer{i}.{m}."
            for att in ("self", "cross"):
                for w in ("wq", "wk", "wv", "wo"):
                    spec.append((f"{p}{att}.{w}", (d, d), d))
                spec.append((f"{p}{att}.bo", (d,), d))
            for ln in ("ln1", "ln2"):
                spec.append((f"{p}{ln}.gain", (d,), None))
                spec.append((f"{p}{ln}.bias", (d,), None))
            spec += [
                (f"{p}ffn.w1", (d, f), d),
                (f"{p}ffn.b1", (f,), d),
                (f"{p}ffn.w2", (f, d), f),
                (f"{p}ffn.b2", (d,), f),
            ]
    for head in ("cls", "mmil_a", "mmil_v", "mmil_av"):
        spec.append((f"{head}.w", (d, c), d))
        spec.append((f"{head}.b", (c,), d))
    return spec


def count_parameters(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _parameter_shapes(config))


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform fan-in initialisation: every linear weight and bias ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in in _parameter_shapes(config):
        if fan_in is None:
            values = np.ones(shape) if name.endswith("gain") else np.zeros(shape)
        else:
            bound = init_bound(fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(values, requires_grad=True, name=name)
    return ModelParams(config, tensors)


# -- forward pass --------------------------------------------------------------


def _attention_params(layer: dict, which: str) -> dict:
    return {w: layer[f"{which}.{w}"] for w in ("wq", "wk", "wv", "wo", "bo")}


def _ffn(x: Tensor, p: dict) -> Tensor:
    h = tn.relu(tn.linear(x, p["ffn.w1"], p["ffn.b1"]))
    return tn.linear(h, p["ffn.w2"], p["ffn.b2"])


def _ln(x: Tensor, p: dict, which: str) -> Tensor:
    return tn.layer_norm(x, p[f"{which}.gain"], p[f"{which}.bias"])


def han_layer(f_a: Tensor, f_v: Tensor, layer_params: dict, heads: int, pre_norm: bool = False):
    """One HAN layer: self- plus cross-attention with residual, LayerNorm, FFN.

    ``layer_params`` is {"a": {...}, "v": {...}} as returned by ``ModelParams.layer``.
    Returns the updated (audio, visual) hidden states.
    """
    f_a, f_v = tn.as_tensor(f_a), tn.as_tensor(f_v)
    if f_a.shape[-2] == 0:
        raise ValidationError("han_layer needs at least one segment")
    if f_a.shape != f_v.shape:
        raise DimensionError(f"audio and visual hidden states differ: {f_a.shape} vs {f_v.shape}")
    inputs = {"a": f_a, "v": f_v}
    other = {"a": "v", "v": "a"}
    if pre_norm:
        normed = {m: _ln(inputs[m], layer_params[m], "ln1") for m in MODALITIES}
    else:
        normed = inputs
    outputs = {}
    for m in MODALITIES:
        p = layer_params[m]
        q = normed[m]
        kv = normed[other[m]]
        mixed = (
            inputs[m]
            + tn.multi_head_attention(q, q, q, heads, _attention_params(p, "self"))
            + tn.multi_head_attention(q, kv, kv, heads, _attention_params(p, "cross"))
        )
        if pre_norm:
            outputs[m] = mixed + _ffn(_ln(mixed, p, "ln2"), p)
        else:
            h = _ln(mixed, p, "ln1")
            outputs[m] = _ln(h + _ffn(h, p), p, "ln2")
    return outputs["a"], outputs["v"]


@dataclass
class ForwardOutput:
    """Model outputs; every field carries an optional leading batch axis."""

    logits_a: Tensor
    logits_v: Tensor
    probs_a: Tensor
    probs_v: Tensor
    alpha_a: Tensor
    alpha_v: Tensor
    beta: Tensor
    modality_prob_a: Tensor
    modality_prob_v: Tensor
    video_prob: Tensor

    def select(self, index) -> ForwardOutput:
        """Slice every field along the batch axis."""
        return ForwardOutput(**{f.name: getattr(self, f.name)[index] for f in fields(self)})


def encode(params: ModelParams, feats_a, feats_v) -> tuple[Tensor, Tensor]:
    cfg = params.config
    feats_a, feats_v = tn.as_tensor(feats_a), tn.as_tensor(feats_v)
    if feats_a.shape[-1] != cfg.audio_feat_dim:
        raise DimensionError(
            f"audio feature dim: expected {cfg.audio_feat_dim}, got {feats_a.shape[-1]}"
        )
    if feats_v.shape[-1] != cfg.visual_feat_dim:
        raise DimensionError(
            f"visual feature dim: expected {cfg.visual_feat_dim}, got {feats_v.shape[-1]}"
        )
    if feats_a.shape[:-1] != feats_v.shape[:-1]:
        raise DimensionError(
            f"audio/visual segment counts differ: {feats_a.shape[:-1]} vs {feats_v.shape[:-1]}"
        )
    if feats_a.shape[-2] < 1:
        raise ValidationError("a video needs at least one segment")
    h_a = tn.linear(feats_a, params["in_a.w"], params["in_a.b"])
    h_v = tn.linear(feats_v, params["in_v.w"], params["in_v.b"])
    for i in range(cfg.num_layers):
        h_a, h_v = han_layer(h_a, h_v, params.layer(i), cfg.heads, cfg.pre_norm)
    return h_a, h_v


def pool(params: ModelParams, h_a: Tensor, h_v: Tensor) -> ForwardOutput:
    """Classifier heads and MMIL pooling over hidden states (..., T, d)."""
    logits_a = tn.linear(h_a, params["cls.w"], params["cls.b"])
    logits_v = tn.linear(h_v, params["cls.w"], params["cls.b"])
    probs_a = tn.sigmoid(logits_a)
    probs_v = tn.sigmoid(logits_v)
    t_axis = -2
    alpha_a = tn.softmax(tn.linear(h_a, params["mmil_a.w"], params["mmil_a.b"]), axis=t_axis)
    alpha_v = tn.softmax(tn.linear(h_v, params["mmil_v.w"], params["mmil_v.b"]), axis=t_axis)
    m_scores = tn.stack(
        [
            tn.linear(h_a, params["mmil_av.w"], params["mmil_av.b"]),
            tn.linear(h_v, params["mmil_av.w"], params["mmil_av.b"]),
        ],
        axis=-3,
    )
    beta = tn.softmax(m_scores, axis=-3)
    weighted_a = alpha_a * probs_a
    weighted_v = alpha_v * probs_v
    modality_prob_a = weighted_a.sum(axis=t_axis)
    modality_prob_v = weighted_v.sum(axis=t_axis)
    beta_a = beta[(..., 0, slice(None), slice(None))]
    beta_v = beta[(..., 1, slice(None), slice(None))]
    video_prob = (beta_a * weighted_a + beta_v * weighted_v).sum(axis=t_axis)
    return ForwardOutput(
        logits_a=logits_a,
        logits_v=logits_v,
        probs_a=probs_a,
        probs_v=probs_v,
        alpha_a=alpha_a,
        alpha_v=alpha_v,
        beta=beta,
        modality_prob_a=modality_prob_a,
        modality_prob_v=modality_prob_v,
        video_prob=video_prob,
    )


def forward_batch(params: ModelParams, feats_a, feats_v) -> ForwardOutput:
    """Forward pass on (B, T, feat_dim) arrays sharing one segment count."""
    h_a, h_v = encode(params, feats_a, feats_v)
    return pool(params, h_a, h_v)


def forward(params: ModelParams, sample) -> ForwardOutput:
    """Forward pass for one video (anything with ``feats_audio``/``feats_visual``)."""
    xa = np.asarray(sample.feats_audio, dtype=np.float64)[None]
    xv = np.asarray(sample.feats_visual, dtype=np.float64)[None]
    return forward_batch(params, xa, xv).select(0)


def predict_fields(params: ModelParams, corpus, names, batch_size: int = 256) -> list[tuple[np.ndarray, ...]]:
    """Per-video tuples of the named ForwardOutput fields, evaluated without recording a graph."""
    frozen = ModelParams(params.config, {k: Tensor(t.data) for k, t in params.tensors.items()})
    results: list = [None] * len(corpus)
    for idx_group in group_by_length(corpus, batch_size):
        xa = np.stack([corpus[i].feats_audio for i in idx_group])
        xv = np.stack([corpus[i].feats_visual for i in idx_group])
        out = forward_batch(frozen, xa, xv)
        arrays = [getattr(out, n).data for n in names]
        for j, i in enumerate(idx_group):
            results[i] = tuple(a[j] for a in arrays)
    return results


def predict_probs(params: ModelParams, corpus, batch_size: int = 256) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-video (probs_a, probs_v) arrays."""
    return predict_fields(params, corpus, ("probs_a", "probs_v"), batch_size)


def predict_logits(params: ModelParams, corpus, batch_size: int = 256) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-video (logits_a, logits_v) arrays."""
    return predict_fields(params, corpus, ("logits_a", "logits_v"), batch_size)


def group_by_length(corpus, batch_size: int, order=None) -> list[list[int]]:
    """Chunk indices into batches whose videos share a segment count."""
    order = range(len(corpus)) if order is None else order
    by_t: dict[int, list[int]] = {}
    for i in order:
        by_t.setdefault(len(corpus[i].feats_audio), []).append(i)
    groups = []
    for t in sorted(by_t):
        idx = by_t[t]
        groups += [idx[k:k + batch_size] for k in range(0, len(idx), batch_size)]
    return groups


# -- teacher export and checkpoints ---------------------------------------------------


def export_model_logits(params: ModelParams, corpus, out_dir) -> list:
    """Write the model's dense logits as teacher-logit files (visual <- z^v, audio <- z^a)."""
    from .forge import TeacherLogits, save_teacher_logits

    logits = predict_logits(params, corpus)
    teachers = [
        TeacherLogits(sample.video_id, z_visual=zv, z_audio=za)
        for sample, (za, zv) in zip(corpus, logits)
    ]
    save_teacher_logits(out_dir, teachers)
    return teachers


def save_checkpoint(params: ModelParams, out_dir, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    blob_dir = out_dir / "params"
    blob_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in params.tensors.items():
        fname = f"{name}.avt"
        save_tensor(blob_dir / fname, t.data)
        entries.append({"name": name, "file": f"params/{fname}", "shape": list(t.shape)})
    manifest = {"config": params.config.to_dict(), "params": entries}
    if extra:
        manifest["extra"] = extra
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(ckpt_dir) -> ModelParams:
    ckpt_dir = Path(ckpt_dir)
    path = ckpt_dir / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise type(exc)(f"cannot read checkpoint manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno) from exc
    config = ModelConfig.from_dict(manifest["config"])
    expected = {name: shape for name, shape, _ in _parameter_shapes(config)}
    tensors = {}
    for entry in manifest["params"]:
        name = entry["name"]
        values = load_tensor(ckpt_dir / entry["file"])
        if name not in expected or tuple(values.shape) != expected[name]:
            raise ValidationError(f"checkpoint parameter {name} has unexpected shape {values.shape}")
        tensors[name] = Tensor(values, requires_grad=True, name=name)
    missing = set(expected) - set(tensors)
    if missing:
        raise ValidationError(f"checkpoint is missing parameters: {sorted(missing)}")
    ordered = {name: tensors[name] for name in expected}
    return ModelParams(config, ordered)
