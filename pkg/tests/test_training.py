from __future__ import annotations

import math

import numpy as np
import numpy.testing as npt
import pytest

from avparse.corpus import SyntheticSpec, synthesize
from avparse.errors import ConfigurationError, ParseError, TrainingError, UsageError
from avparse.forge import extend_background, kd_targets, smooth_labels
from avparse.han import ModelConfig, forward_batch, init_model
from avparse.training import (
    MEAN,
    SUM,
    TRAIN_PRESETS,
    BatchTargets,
    LossSpec,
    TrainConfig,
    ave_weak_target,
    batch_loss,
    evaluate_model,
    kd_term,
    loss_ave,
    loss_base,
    loss_kd,
    loss_mixed,
    loss_valor,
    model_predictions,
    parse_loss_mode,
    train,
    valor_term,
)
from gradcheck import REL_TOL, params_grad_error

LN2 = math.log(2.0)


def tiny_corpus(ave=False, **kw):
    spec = dict(num_videos=6, num_segments=3, num_classes=3, audio_dim=3, visual_dim=4, span_length=(1, 3), seed=5)
    spec.update(kw)
    syn = synthesize(SyntheticSpec(ave_style=ave, **spec))
    dense = {s.video_id: s.dense_gt for s in syn.samples}
    teachers = {t.video_id: t for t in syn.teachers}
    return syn.samples, dense, teachers


def tiny_model(ave=False, seed=0, **kw):
    cfg = dict(hidden_dim=4, num_layers=1, num_classes=3, heads=2, audio_feat_dim=3, visual_feat_dim=4, ave_mode=ave)
    cfg.update(kw)
    return init_model(ModelConfig(**cfg), seed)


def flat_output(params, corpus, idx):
    """Forward pass with a zero classifier and uniform temporal attention.

    Every segment and modality probability is then exactly 0.5, and because both
    temporal weightings are 1/T the video-level probability is 0.5 as well.
    """
    for name in ("cls.w", "cls.b", "mmil_a.w", "mmil_a.b", "mmil_v.w", "mmil_v.b"):
        params[name].data[...] = 0.0
    xa = np.stack([corpus[i].feats_audio for i in idx])
    xv = np.stack([corpus[i].feats_visual for i in idx])
    return forward_batch(params, xa, xv)


def scalar_bce(p, y):
    p, y = np.ravel(p), np.ravel(y)
    return sum(-(yy * math.log(pp) + (1 - yy) * math.log(1 - pp)) for pp, yy in zip(p, y)) / len(p)


# -- closed forms ---------------------------------------------------------------------------


def test_uninformative_model_closed_forms():
    corpus, dense, teachers = tiny_corpus()
    idx = [0, 1, 2]
    out = flat_output(tiny_model(), corpus, idx)
    weak = np.stack([corpus[i].weak for i in idx])
    da = np.stack([dense[corpus[i].video_id].y_audio for i in idx])
    dv = np.stack([dense[corpus[i].video_id].y_visual for i in idx])
    t = da.shape[1]
    assert loss_base(out, weak).item() == pytest.approx(3 * LN2, rel=1e-12)
    assert loss_valor(out, da, dv, weak).item() == pytest.approx(3 * LN2, rel=1e-12)
    assert loss_valor(out, da, dv, weak, SUM).item() == pytest.approx(LN2 + 2 * t * LN2, rel=1e-12)
    uniform = np.full(da.shape, 1 / 3)
    assert loss_kd(out, weak, uniform, uniform).item() == pytest.approx(LN2, rel=1e-12)
    one_hot = np.zeros(da.shape)
    one_hot[..., 0] = 1.0
    assert loss_kd(out, weak, one_hot, one_hot).item() == pytest.approx(LN2 + 2 * math.log(3), rel=1e-12)
    assert loss_kd(out, weak, one_hot, one_hot, SUM).item() == pytest.approx(LN2 + 2 * t * math.log(3), rel=1e-12)


def test_uninformative_ave_closed_forms():
    corpus, dense, _ = tiny_corpus(ave=True)
    out = flat_output(tiny_model(ave=True), corpus, [0, 1])
    weak = ave_weak_target(np.stack([corpus[i].weak for i in (0, 1)]))
    assert weak.shape == (2, 4) and np.all(weak[:, -1] == 0)
    assert loss_ave(out, "weak", weak=weak).item() == pytest.approx(LN2, rel=1e-12)
    ext = [extend_background(dense[corpus[i].video_id]) for i in (0, 1)]
    da = np.stack([e.y_audio for e in ext])
    dv = np.stack([e.y_visual for e in ext])
    assert loss_ave(out, "valor", dense_audio=da, dense_visual=dv).item() == pytest.approx(2 * 3 * LN2, rel=1e-12)


def forward_parts(params, corpus, idx):
    xa = np.stack([corpus[i].feats_audio for i in idx])
    xv = np.stack([corpus[i].feats_visual for i in idx])
    return forward_batch(params, xa, xv)


def test_losses_match_scalar_oracle():
    corpus, dense, teachers = tiny_corpus()
    idx = [0, 1, 2, 3]
    out = forward_parts(tiny_model(seed=3), corpus, idx)
    weak = np.stack([corpus[i].weak for i in idx]).astype(float)
    da = np.stack([dense[corpus[i].video_id].y_audio for i in idx]).astype(float)
    dv = np.stack([dense[corpus[i].video_id].y_visual for i in idx]).astype(float)
    qs = [kd_targets(teachers[corpus[i].video_id]) for i in idx]
    qv, qa = np.stack([q[0] for q in qs]), np.stack([q[1] for q in qs])
    p, pa, pv = out.video_prob.data, out.modality_prob_a.data, out.modality_prob_v.data
    y_s = smooth_labels(weak, 0.1)

    base = scalar_bce(p, weak) + scalar_bce(pa, y_s) + scalar_bce(pv, y_s)
    assert loss_base(out, weak).item() == pytest.approx(base, rel=1e-10)

    def seg_mean(probs, labels, reduce_sum):
        per_video = []
        for b in range(len(idx)):
            per_t = [scalar_bce(probs[b, t], labels[b, t]) for t in range(probs.shape[1])]
            per_video.append(sum(per_t) if reduce_sum else sum(per_t) / len(per_t))
        return sum(per_video) / len(per_video)

    for reduction in (MEAN, SUM):
        want = scalar_bce(p, weak) + seg_mean(out.probs_a.data, da, reduction == SUM) + seg_mean(out.probs_v.data, dv, reduction == SUM)
        assert loss_valor(out, da, dv, weak, reduction).item() == pytest.approx(want, rel=1e-10)

    def kl(q, logits, reduce_sum):
        per_video = []
        for b in range(len(idx)):
            per_t = []
            for t in range(logits.shape[1]):
                row = logits[b, t]
                lse = max(row) + math.log(sum(math.exp(v - max(row)) for v in row))
                per_t.append(sum(qq * (math.log(qq) - (z - lse)) for qq, z in zip(q[b, t], row) if qq > 0))
            per_video.append(sum(per_t) if reduce_sum else sum(per_t) / len(per_t))
        return sum(per_video) / len(per_video)

    for reduction in (MEAN, SUM):
        want = scalar_bce(p, weak) + kl(qa, out.logits_a.data, reduction == SUM) + kl(qv, out.logits_v.data, reduction == SUM)
        assert loss_kd(out, weak, qa, qv, reduction).item() == pytest.approx(want, rel=1e-10)

    targets = BatchTargets(weak, da, dv, qa, qv)
    mixed = loss_mixed(out, LossSpec("valor_global", "kd"), targets)
    want_audio = scalar_bce(pa, da.max(axis=1))
    assert mixed["audio"].item() == pytest.approx(want_audio, rel=1e-10)
    assert mixed["visual"].item() == pytest.approx(kl(qv, out.logits_v.data, False), rel=1e-10)
    assert mixed["total"].item() == pytest.approx(mixed["video"].item() + want_audio + mixed["visual"].item())


def test_named_modes_equal_their_mixed_spelling():
    corpus, dense, teachers = tiny_corpus()
    params = tiny_model(seed=1)
    idx = [0, 1, 2]
    for named, mixed in (("base", "mixed:guided,guided"), ("kd", "mixed:kd,kd"), ("valor", "mixed:valor,valor")):
        a = batch_loss(params, corpus, idx, TrainConfig(loss_mode=named, epochs=0), dense, teachers)["total"].item()
        b = batch_loss(params, corpus, idx, TrainConfig(loss_mode=mixed, epochs=0), dense, teachers)["total"].item()
        assert a == b


def test_loss_argument_errors():
    corpus, _, _ = tiny_corpus(ave=True)
    out = forward_parts(tiny_model(ave=True), corpus, [0])
    with pytest.raises(UsageError):
        loss_ave(out, "weak")
    with pytest.raises(UsageError):
        loss_ave(out, "weak", weak=np.zeros((1, 3)))
    with pytest.raises(UsageError):
        loss_ave(out, "valor", dense_audio=np.zeros((1, 3, 4)))
    with pytest.raises(UsageError):
        loss_ave(out, "dense")
    with pytest.raises(UsageError):
        kd_term(out.logits_a, np.full((1, 3, 3), 1 / 3))
    with pytest.raises(ConfigurationError):
        valor_term(out.probs_a, np.zeros((1, 3, 4)), "median")


def test_parse_loss_mode():
    assert parse_loss_mode("base") == LossSpec("guided", "guided")
    assert parse_loss_mode("mixed:valor_global, kd") == LossSpec("valor_global", "kd")
    assert parse_loss_mode("ave-weak") == "ave-weak"
    assert parse_loss_mode("mixed:kd,valor").needs_dense and parse_loss_mode("mixed:kd,valor").needs_teacher
    for bad in ("mixed:kd", "mixed:kd,guess", "focal"):
        with pytest.raises(ConfigurationError):
            parse_loss_mode(bad)


# -- gradients ------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "mode", ["base", "kd", "valor", "mixed:valor_global,kd", "mixed:guided,valor", "ave-weak", "ave-valor"]
)
def test_full_model_gradients(mode):
    ave = mode.startswith("ave")
    corpus, dense, teachers = tiny_corpus(ave=ave)
    params = tiny_model(ave=ave, seed=2)
    config = TrainConfig(loss_mode=mode, epochs=0, temporal_reduction=SUM if mode == "valor" else MEAN)
    err = params_grad_error(lambda p: batch_loss(p, corpus, [0, 1], config, dense, teachers)["total"], params)
    assert err < REL_TOL


def test_pre_norm_gradients():
    corpus, dense, teachers = tiny_corpus()
    params = tiny_model(seed=4, pre_norm=True, num_layers=2)
    config = TrainConfig(loss_mode="valor", epochs=0, pre_norm=True)
    err = params_grad_error(lambda p: batch_loss(p, corpus, [2, 3], config, dense, teachers)["total"], params)
    assert err < REL_TOL


# -- configuration ---------------------------------------------------------------------------


def test_config_parse_and_roundtrip(tmp_path):
    text = "# run\nloss_mode = valor\nepochs = 12  # short\nwarmup_epochs = 2\npre_norm = yes\npeak_lr = 3e-3\n"
    cfg = TrainConfig.parse(text)
    assert (cfg.loss_mode, cfg.epochs, cfg.pre_norm, cfg.peak_lr) == ("valor", 12, True, 3e-3)
    cfg.save(tmp_path / "c.txt")
    assert TrainConfig.load(tmp_path / "c.txt") == cfg
    layered = TrainConfig.parse("epochs = 20\n", base=cfg)
    assert layered.loss_mode == "valor" and layered.epochs == 20


@pytest.mark.parametrize("text, line", [("epochs = 3\nlr = 1\n", 2), ("epochs = three\n", 1), ("\n\nwarmup_epochs\n", 3)])
def test_config_parse_errors(text, line):
    with pytest.raises(ParseError) as info:
        TrainConfig.parse(text, "cfg.txt")
    assert info.value.location == line


def test_config_validation_and_presets():
    with pytest.raises(ConfigurationError):
        TrainConfig(loss_mode="hinge")
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=10, warmup_epochs=10)
    with pytest.raises(ConfigurationError):
        TrainConfig(smoothing=0.5)
    std, var, ave = (TRAIN_PRESETS[k]() for k in ("standard", "variant", "ave"))
    assert (std.peak_lr, std.min_lr, std.batch_size, std.epochs, std.warmup_epochs) == (1e-4, 1e-6, 64, 60, 10)
    assert (var.peak_lr, var.min_lr, var.model_preset) == (3e-4, 3e-6, "variant")
    assert (ave.loss_mode, ave.batch_size, ave.epochs, ave.peak_lr) == ("ave-valor", 16, 120, 3e-4)
    assert (std.beta1, std.beta2, std.weight_decay, std.grad_clip) == (0.5, 0.999, 1e-3, 1.0)
    cfg = TrainConfig(hidden_dim=32, num_layers=2).model_config(8, 8, 5)
    assert (cfg.hidden_dim, cfg.num_layers, cfg.num_classes) == (32, 2, 5)


# -- the loop ---------------------------------------------------------------------------------


def quick_config(**kw):
    base = dict(loss_mode="valor", epochs=4, warmup_epochs=1, batch_size=4, peak_lr=3e-3, min_lr=3e-5, hidden_dim=8, num_layers=1, heads=2)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs_and_warmup_epoch_leave_params():
    corpus, dense, _ = tiny_corpus(num_videos=8)
    start = tiny_model(seed=0, hidden_dim=8)
    params, report = train(corpus, quick_config(epochs=0), dense, params=start.clone())
    for name in start.names():
        npt.assert_array_equal(params[name].data, start[name].data)
    assert report.epochs == [] and report.best_epoch is None
    params, report = train(corpus, quick_config(epochs=2, warmup_epochs=1), dense, params=start.clone())
    assert report.epochs[0].lr == 0.0 and report.epochs[1].lr > 0


def test_training_is_deterministic():
    corpus, dense, _ = tiny_corpus(num_videos=10)
    runs = [train(corpus, quick_config(), dense, val_corpus=corpus) for _ in range(2)]
    assert runs[0][1].to_json() == runs[1][1].to_json()
    for name in runs[0][0].names():
        npt.assert_array_equal(runs[0][0][name].data, runs[1][0][name].data)
    other = train(corpus, quick_config(seed=1), dense)[1]
    assert other.to_json() != runs[0][1].to_json()
    assert "wall_time" not in runs[0][1].to_dict() and "wall_time" in runs[0][1].to_dict(include_timing=True)


def test_best_epoch_is_selected():
    corpus, dense, _ = tiny_corpus(num_videos=10)
    params, report = train(corpus, quick_config(epochs=5), dense, val_corpus=corpus)
    scores = [r.validation for r in report.epochs]
    assert report.best_epoch == int(np.argmax(scores))
    final = evaluate_model(params, corpus).segment["Type"]
    assert final == pytest.approx(max(scores))


def test_training_input_errors():
    corpus, dense, _ = tiny_corpus()
    with pytest.raises(UsageError):
        train([], quick_config())
    with pytest.raises(UsageError):
        train(corpus, quick_config())
    with pytest.raises(UsageError):
        train(corpus, quick_config(loss_mode="kd"))
    partial = {k: v for k, v in list(dense.items())[1:]}
    with pytest.raises(UsageError):
        train(corpus, quick_config(), partial)


def test_nonfinite_loss_raises_training_error():
    corpus, dense, _ = tiny_corpus()
    params = tiny_model(seed=0, hidden_dim=8)
    params["in_a.w"].data[0, 0] = np.nan
    with pytest.raises(TrainingError, match="epoch 0"):
        train(corpus, quick_config(), dense, params=params)


def test_loss_decreases_early():
    corpus, dense, _ = tiny_corpus(num_videos=40, num_classes=5, audio_dim=8, visual_dim=8, num_segments=6)
    config = quick_config(epochs=8, warmup_epochs=1, batch_size=8, hidden_dim=16)
    _, report = train(corpus, config, dense)
    losses = [r.losses["total"] for r in report.epochs[1:7]]
    assert all(b < a * 1.02 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_separable_corpus_is_learned():
    corpus, dense, _ = tiny_corpus(
        num_videos=80, num_classes=5, audio_dim=16, visual_dim=16, num_segments=6, noise_scale=0.0, span_length=(2, 6)
    )
    config = quick_config(epochs=30, warmup_epochs=2, batch_size=8, hidden_dim=16, peak_lr=5e-3, min_lr=5e-5)
    params, _ = train(corpus, config, dense)
    assert evaluate_model(params, corpus).segment["Type"] >= 95.0
    preds = model_predictions(params, corpus[:3], video_gate=False)
    assert preds[0][0].shape == corpus[0].dense_gt.shape
