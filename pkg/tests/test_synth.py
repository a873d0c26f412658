import json
from collections import Counter

import numpy as np
import pytest

from fairfer import synth
from fairfer.labels import EXPRESSIONS
from fairfer.manifest import ingest_manifest
from fairfer.preprocess import hflip

SMALL = {"children": 2, "adults": 3, "elderly": 1}


def small_spec(**kw):
    return synth.SynthSpec(counts=synth.uniform_counts(SMALL), test_counts={("fear", "adults"): 2}, **kw)


def test_counts_match_spec():
    spec = small_spec(seed=4)
    manifest, store = synth.generate(spec)
    train = Counter((r.expression, r.age_group) for r in manifest if r.split == "train")
    assert train == Counter({k: v for k, v in spec.counts.items() if v})
    assert sum(r.split == "test" for r in manifest) == 2
    assert len(store) == len(manifest)


def test_ages_fall_in_group_ranges():
    manifest, _ = synth.generate(small_spec(seed=1))
    for r in manifest:
        lo, hi = synth.AGE_RANGES[r.age_group]
        assert lo <= r.age_years <= hi
        assert r.age_source == "ground_truth"


def test_deterministic_images():
    a_manifest, a = synth.generate(small_spec(seed=7))
    b_manifest, b = synth.generate(small_spec(seed=7))
    assert a_manifest.records == b_manifest.records
    for sid in a.images:
        assert a[sid].tobytes() == b[sid].tobytes()
        np.testing.assert_array_equal(a.landmarks[sid], b.landmarks[sid])
    _, c = synth.generate(small_spec(seed=8))
    assert any(a[s].tobytes() != c[s].tobytes() for s in a.images)


def test_image_format():
    _, store = synth.generate(small_spec())
    img = next(iter(store.images.values()))
    assert img.shape == (224, 224) and img.dtype == np.uint8


def test_spec_validation():
    with pytest.raises(ValueError):
        synth.generate(synth.SynthSpec(counts={("fear", "adults"): 3, ("anger", "adults"): 3}))
    with pytest.raises(ValueError):
        synth.generate(small_spec(confusions=(synth.Confusion("elderly", "neutral", "sadness", 1.5),)))
    with pytest.raises(ValueError):
        synth.generate(synth.SynthSpec(counts={("fear", "adults"): -1, ("anger", "elderly"): 2}))


def test_spec_round_trip():
    spec = synth.bias_benchmark(seed=2)
    again = synth.SynthSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again.signature_amplitude == spec.signature_amplitude and again.seed == 2
    assert dict(again.counts) == dict(spec.counts) and tuple(again.confusions) == tuple(spec.confusions)


def test_bias_benchmark_layout():
    spec = synth.bias_benchmark(seed=0)
    assert spec.counts[("neutral", "adults")] == 10 * spec.counts[("neutral", "elderly")]
    assert ("surprise", "elderly") not in spec.test_counts
    assert {(c.group, c.true, c.confounder, c.strength) for c in spec.confusions} == {
        ("elderly", "neutral", "sadness", 0.6), ("elderly", "neutral", "anger", 0.6)}


def test_signatures_are_local_and_distinct():
    spec = synth.SynthSpec(counts=synth.uniform_counts(SMALL), noise_sigma=0.0, scale_jitter=0.0, shift_jitter=0.0,
                           amplitude_jitter=0.0)
    rng = np.random.default_rng(0)
    base = synth.render_face("neutral", 30, rng, spec)[0].astype(float)
    for e in EXPRESSIONS[1:]:
        img = synth.render_face(e, 30, np.random.default_rng(0), spec)[0].astype(float)
        diff = np.abs(img - base)
        inside = synth.signature_region(e, radius_sigmas=3.5) | synth.signature_region("neutral", radius_sigmas=3.5)
        # the difference to a neutral face lives in the two signature regions
        assert diff[~inside].max() <= 1
        assert diff[synth.signature_region(e)].max() > 20


def test_signatures_flip_invariant():
    # the face is symmetric about x = 112 while a pixel flip mirrors about 111.5,
    # so a flipped region matches the original shifted by one pixel
    for e in EXPRESSIONS:
        region = synth.signature_region(e)
        np.testing.assert_array_equal(hflip(region)[:, :-1], region[:, 1:])


def test_confounder_blend():
    spec = synth.SynthSpec(counts=synth.uniform_counts(SMALL), noise_sigma=0.0, scale_jitter=0.0, shift_jitter=0.0,
                           amplitude_jitter=0.0)

    def render(conf=None, strength=0.0):
        return synth.render_face("neutral", 70, np.random.default_rng(0), spec, conf, strength)[0].astype(float)

    clean, half, full = render(), render("sadness", 0.6), render("sadness", 1.0)
    sad_region = synth.signature_region("sadness") & ~synth.signature_region("neutral")
    assert np.abs(half - clean)[sad_region].max() > 10
    target = synth.render_face("sadness", 70, np.random.default_rng(0), spec)[0].astype(float)
    assert np.abs(full - target).max() <= 1


def test_wrinkles_grow_with_age():
    spec = synth.SynthSpec(counts=synth.uniform_counts(SMALL), noise_sigma=0.0, scale_jitter=0.0, shift_jitter=0.0)
    young = synth.render_face("fear", 8, np.random.default_rng(0), spec)[0].astype(float)
    mid = synth.render_face("fear", 40, np.random.default_rng(0), spec)[0].astype(float)
    old = synth.render_face("fear", 85, np.random.default_rng(0), spec)[0].astype(float)
    x, y = map(int, synth.WRINKLE_SITES[2])
    window = np.s_[y - 10:y + 10, x - 10:x + 10]
    change = [np.abs(im - young)[window].mean() for im in (mid, old)]
    assert 0 < change[0] < change[1]


def test_written_dataset(tmp_path):
    manifest, store = synth.generate(small_spec(seed=5), tmp_path)
    train = ingest_manifest(tmp_path / "train.tsv")
    assert len(train) == sum(r.split == "train" for r in manifest)
    assert (tmp_path / "test_adults.tsv").exists() and not (tmp_path / "test_elderly.tsv").exists()
    landmarks = synth.load_landmarks(tmp_path)
    assert set(landmarks) == set(store.images)
    spec = synth.SynthSpec.from_dict(json.loads((tmp_path / "synth_spec.json").read_text()))
    assert spec.seed == 5
    for r in list(train)[:3]:
        assert (tmp_path / r.image_ref).exists()


def _train_and_score(spec):
    from fairfer.manifest import assign_folds
    from fairfer.metrics import confusion_by_group
    from fairfer.preprocess import DetectorAdapters, preprocess
    from fairfer.trainer import FaceBank, TrainConfig, predict, train_cv

    manifest, store = synth.generate(spec)
    ids = [r.sample_id for r in manifest]
    pixels = np.stack([preprocess(store[i], DetectorAdapters(landmark_detector=lambda im, p=store.landmarks[i]: p)).pixels
                       for i in ids])
    manifest = assign_folds(manifest, k=5, seed=spec.seed)
    faces = FaceBank(ids, pixels)
    model = train_cv(manifest, faces, TrainConfig(seed=spec.seed, run_folds=[0], learning_rate=1e-3))[0].model
    test = manifest.select(lambda r: r.split == "test")
    logits, _ = predict(model, faces.take([r.sample_id for r in test]))
    report = confusion_by_group((r.expression, int(p), r.age_group) for r, p in zip(test, logits.argmax(1)))
    return {g: report.macro(g) for g in report.groups}


@pytest.mark.slow
def test_unconfounded_benchmark_is_learnable():
    scores = _train_and_score(synth.bias_benchmark(seed=0, blend=0.0))
    assert min(scores.values()) >= 0.95, scores


@pytest.mark.slow
def test_balanced_data_has_no_group_gap():
    gaps = []
    for seed in range(3):
        spec = synth.SynthSpec(counts=synth.uniform_counts({"children": 60, "adults": 60, "elderly": 60}),
                               test_counts=synth.uniform_counts({"children": 30, "adults": 30, "elderly": 30}),
                               seed=seed)
        scores = _train_and_score(spec)
        gaps.append(max(scores.values()) - min(scores.values()))
    assert np.mean(gaps) <= 0.05, gaps
