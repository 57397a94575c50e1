from __future__ import annotations

import hashlib
import json
import logging

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avparse.corpus import (
    LLP_CLASSES,
    ManifestRow,
    SyntheticSpec,
    VideoSample,
    generate_synthetic,
    load_bookkeeping,
    load_corpus,
    load_corpus_dir,
    read_manifest,
    split_corpus,
    synthesize,
    write_class_table,
    write_manifest,
)
from avparse.errors import ConfigurationError, ParseError, UsageError, ValidationError
from avparse.forge import DenseLabels, load_teacher_logits
from avparse.metrics import nonalignment_report
from avparse.tensorio import save_tensor


def small_spec(**kw):
    base = dict(num_videos=30, num_segments=6, num_classes=5, audio_dim=8, visual_dim=8, span_length=(1, 4))
    base.update(kw)
    return SyntheticSpec(**base)


def tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


# -- samples and manifests ------------------------------------------------------------------


def test_video_sample_validation():
    with pytest.raises(ValidationError):
        VideoSample("v", np.zeros((3, 2)), np.zeros((4, 2)), np.zeros(2))
    with pytest.raises(ValidationError):
        VideoSample("v", np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(2))
    dense = DenseLabels(np.array([[1, 0]]), np.array([[0, 0]]))
    with pytest.raises(ValidationError):
        VideoSample("v", np.zeros((1, 2)), np.zeros((1, 2)), np.array([0, 1]), dense)
    assert VideoSample("v", np.zeros((1, 2)), np.zeros((1, 2)), np.array([1, 0]), dense).num_segments == 1


def test_llp_class_table():
    assert len(LLP_CLASSES) == 25 and len(set(LLP_CLASSES)) == 25
    assert {"Speech", "Dog", "Cat", "Helicopter"} <= set(LLP_CLASSES)


def test_manifest_unquoted_event_list(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("video_id,T,events\nvid1, 3, Dog,Speech\nvid2,2,\"Cat,Dog\"\nvid3,1,\n")
    rows = read_manifest(path)
    assert rows[0] == ManifestRow("vid1", 3, ["Dog", "Speech"])
    assert rows[1].events == ["Cat", "Dog"]
    assert rows[2].events == []


def test_manifest_roundtrip_and_errors(tmp_path):
    rows = [ManifestRow("a", 4, ["Dog", "Cat"]), ManifestRow("b", 2, [])]
    write_manifest(tmp_path / "m.csv", rows)
    assert read_manifest(tmp_path / "m.csv") == rows
    (tmp_path / "dup.csv").write_text("a,1,Dog\na,2,Dog\n")
    with pytest.raises(ParseError) as info:
        read_manifest(tmp_path / "dup.csv")
    assert info.value.location == 2
    (tmp_path / "bad.csv").write_text("a,x,Dog\n")
    with pytest.raises(ParseError):
        read_manifest(tmp_path / "bad.csv")


def write_tiny_corpus(root, rows, lengths=None):
    (root / "features").mkdir(parents=True)
    write_class_table(root / "classes.txt", ["Dog", "Cat", "Speech"])
    write_manifest(root / "manifest.csv", rows)
    for r in rows:
        t = (lengths or {}).get(r.video_id, r.num_segments)
        save_tensor(root / "features" / f"{r.video_id}.audio.avt", np.ones((t, 4)))
        save_tensor(root / "features" / f"{r.video_id}.visual.avt", np.ones((t, 4)))


def test_load_corpus_weak_labels(tmp_path):
    write_tiny_corpus(tmp_path, [ManifestRow("vid1", 3, ["Dog", "Speech"])])
    (sample,) = load_corpus(tmp_path / "manifest.csv", tmp_path / "features")
    npt.assert_array_equal(sample.weak, [1, 0, 1])
    assert sample.dense_gt is None and sample.num_segments == 3


def test_load_corpus_unknown_event(tmp_path):
    write_tiny_corpus(tmp_path, [ManifestRow("vid1", 3, ["Dragon"])])
    with pytest.raises(ParseError, match="Dragon"):
        load_corpus(tmp_path / "manifest.csv", tmp_path / "features")


def test_load_corpus_segment_count_mismatch(tmp_path):
    write_tiny_corpus(tmp_path, [ManifestRow("vid1", 3, ["Dog"])], lengths={"vid1": 4})
    with pytest.raises(ValidationError, match="T=3"):
        load_corpus(tmp_path / "manifest.csv", tmp_path / "features")


def test_empty_manifest_warns(tmp_path, caplog):
    write_tiny_corpus(tmp_path, [])
    with caplog.at_level(logging.WARNING):
        assert load_corpus(tmp_path / "manifest.csv", tmp_path / "features") == []
    assert "no videos" in caplog.text


def test_load_corpus_dir_requires_manifest(tmp_path):
    with pytest.raises(UsageError):
        load_corpus_dir(tmp_path)


# -- splitting ------------------------------------------------------------------------------------


def test_split_partition_and_determinism():
    corpus = synthesize(small_spec(num_videos=50)).samples
    train, val, test = split_corpus(corpus, seed=3)
    assert (len(train), len(val), len(test)) == (40, 5, 5)
    ids = [s.video_id for part in (train, val, test) for s in part]
    assert sorted(ids) == sorted(s.video_id for s in corpus)
    again = split_corpus(corpus, seed=3)
    assert [s.video_id for s in again[1]] == [s.video_id for s in val]
    other = split_corpus(corpus, seed=4)
    assert [s.video_id for s in other[0]] != [s.video_id for s in train]


@settings(max_examples=30)
@given(n=st.integers(10, 60), seed=st.integers(0, 100))
def test_split_sizes_sum(n, seed):
    corpus = synthesize(small_spec(num_videos=n, seed=seed)).samples
    parts = split_corpus(corpus, (0.6, 0.2, 0.2), seed=seed)
    assert sum(len(p) for p in parts) == n
    assert abs(len(parts[0]) - 0.6 * n) <= 1


def test_split_errors():
    corpus = synthesize(small_spec(num_videos=5)).samples
    with pytest.raises(UsageError):
        split_corpus(corpus, (0.5, 0.2, 0.2))
    with pytest.raises(UsageError):
        split_corpus(corpus, (0.9, 0.05, 0.05))


# -- synthetic generation ----------------------------------------------------------------------------


def test_spec_validation_and_roundtrip(tmp_path):
    spec = small_spec(confusable_pairs=[[0, 1]], splits={"train": 20, "val": 10})
    assert SyntheticSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    with pytest.raises(ConfigurationError):
        SyntheticSpec(modality_mix=(0.5, 0.5, 0.5))
    with pytest.raises(ConfigurationError):
        SyntheticSpec.from_dict({"num_videoz": 3})
    (tmp_path / "s.json").write_text("{not json")
    with pytest.raises(ParseError):
        SyntheticSpec.load(tmp_path / "s.json")


def test_generated_labels_are_consistent():
    corpus = synthesize(small_spec(num_videos=40, events_per_video=(1, 3)))
    for s in corpus.samples:
        npt.assert_array_equal(s.dense_gt.video_label(), s.weak)
        assert 1 <= s.weak.sum() <= 3
        assert s.feats_audio.shape == (6, 8)
    bk = corpus.bookkeeping
    assert sum(bk["events_by_modality"].values()) == sum(bk["class_event_counts"].values())


def test_bookkeeping_matches_nonalignment_count():
    corpus = synthesize(small_spec(num_videos=60))
    gts = [s.dense_gt for s in corpus.samples]
    report = nonalignment_report(gts, gts)
    bk = corpus.bookkeeping
    assert report["total_events"] == bk["total_events"]
    assert report["nonaligned_events"] == bk["nonaligned_events"]


def test_fully_aligned_mix_has_no_nonaligned_events():
    corpus = synthesize(small_spec(modality_mix=(0.0, 0.0, 1.0)))
    assert corpus.bookkeeping["nonaligned_events"] == 0
    for s in corpus.samples:
        npt.assert_array_equal(s.dense_gt.y_audio, s.dense_gt.y_visual)


def test_default_mix_is_about_half_nonaligned():
    corpus = synthesize(SyntheticSpec(num_videos=400, audio_dim=4, visual_dim=4))
    assert 0.4 < corpus.bookkeeping["nonaligned_fraction"] < 0.6


def test_zero_noise_features_are_separable():
    corpus = synthesize(small_spec(noise_scale=0.0, teacher_noise=0.0))
    for s, tl in zip(corpus.samples, corpus.teachers):
        assert np.all(np.abs(s.feats_audio[s.dense_gt.y_audio.sum(axis=1) == 0]) == 0)
        npt.assert_array_equal(tl.z_audio > 0, s.dense_gt.y_audio.astype(bool))
        npt.assert_array_equal(tl.z_visual > 0, s.dense_gt.y_visual.astype(bool))


def test_teacher_accuracy_near_target():
    corpus = synthesize(small_spec(num_videos=200, num_classes=10))
    hits = [
        np.mean((tl.z_audio > 0) == s.dense_gt.y_audio.astype(bool))
        for s, tl in zip(corpus.samples, corpus.teachers)
    ]
    assert 0.82 < np.mean(hits) < 0.88


def test_confusable_pair_fires_partner_teacher():
    corpus = synthesize(small_spec(num_videos=80, teacher_noise=0.0, confusable_pairs=[[0, 1]]))
    seen = False
    for s, tl in zip(corpus.samples, corpus.teachers):
        ya = s.dense_gt.y_audio
        active = (ya[:, 0] == 1) & (ya[:, 1] == 0)
        if active.any():
            seen = True
            assert np.all(tl.z_audio[active, 1] > 0)
        npt.assert_array_equal(tl.z_visual > 0, s.dense_gt.y_visual.astype(bool))
    assert seen


def test_ave_style_single_event_with_jitter():
    corpus = synthesize(small_spec(ave_style=True, ave_jitter=1, num_videos=50))
    for s in corpus.samples:
        assert s.weak.sum() == 1
        c = int(np.flatnonzero(s.weak)[0])
        assert s.dense_gt.y_audio[:, c].any() and s.dense_gt.y_visual[:, c].any()


def test_same_seed_same_bytes(tmp_path):
    spec = small_spec(splits={"train": 20, "val": 10})
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    spec.seed = 1
    generate_synthetic(spec, tmp_path / "c")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_written_corpus_reloads_exactly(tmp_path):
    spec = small_spec(splits={"train": 20, "val": 10})
    mem = generate_synthetic(spec, tmp_path)
    loaded = load_corpus_dir(tmp_path)
    assert [s.video_id for s in loaded] == [s.video_id for s in mem.samples]
    for a, b in zip(loaded, mem.samples):
        npt.assert_array_equal(a.feats_audio, b.feats_audio)
        npt.assert_array_equal(a.weak, b.weak)
        assert a.dense_gt == b.dense_gt
    val = load_corpus_dir(tmp_path, "val")
    assert [s.video_id for s in val] == [mem.samples[i].video_id for i in mem.split("val")]
    teachers = load_teacher_logits(tmp_path / "logits")
    npt.assert_array_equal(teachers[mem.teachers[0].video_id].z_audio, mem.teachers[0].z_audio)
    assert load_bookkeeping(tmp_path)["splits"]["train"] == mem.bookkeeping["splits"]["train"]
