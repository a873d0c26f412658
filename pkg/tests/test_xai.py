import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from fairfer.modelkit import BackboneConfig, build_model
from fairfer.preprocess import CANONICAL_LANDMARKS
from fairfer.xai import (
    DegenerateLandmarks,
    aggregate_heatmaps,
    estimate_similarity,
    explain,
    mean_template,
    saliency,
    saliency_batch,
    standardize,
    template_id,
    to_common_space,
)


class LinearModel(nn.Module):
    def __init__(self, size=224, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.w = nn.Parameter(torch.randn(7, size * size, generator=g, dtype=torch.float64))

    def forward(self, x):
        return x.reshape(x.shape[0], -1) @ self.w.T


class ConstantModel(nn.Module):
    def __init__(self):
        super().__init__()
        self.b = nn.Parameter(torch.ones(7))

    def forward(self, x):
        return self.b.expand(x.shape[0], 7) + 0 * x.sum()


def test_linear_saliency_is_abs_weight():
    m = LinearModel()
    img = np.random.default_rng(0).random((224, 224))
    s = saliency(m, img, "fear")
    np.testing.assert_allclose(s.grid, m.w[4].abs().detach().numpy().reshape(224, 224), atol=1e-12)
    assert s.target == "fear" and s.grid.min() >= 0


def test_constant_model_zero_map():
    s = saliency(ConstantModel(), np.zeros((224, 224), dtype=np.float32), 0)
    assert not s.grid.any()


def test_batched_saliency_equals_single():
    m = build_model("baseline", BackboneConfig(depth=2, base_width=8)).double()
    pix = np.random.default_rng(1).random((3, 224, 224))
    grids, _ = saliency_batch(m, pix, [0, 3, 6])
    for i, t in enumerate([0, 3, 6]):
        np.testing.assert_allclose(grids[i], saliency(m, pix[i], t).grid, rtol=1e-10, atol=1e-14)


def test_multi_modal_needs_age():
    m = build_model("multi_modal", BackboneConfig(depth=2, base_width=8))
    img = np.zeros((224, 224), dtype=np.float32)
    with pytest.raises(ValueError):
        saliency(m, img, 0)
    assert saliency(m, img, 0, age_input=0.4).grid.shape == (224, 224)


def test_reference_cnn_finite_differences():
    m = build_model("multi_task", BackboneConfig(seed=5)).double().eval()
    rng = np.random.default_rng(2)
    img = rng.random((224, 224))
    grid = saliency(m, img, 2).grid
    eps = 1e-6
    for r, c in rng.integers(0, 224, size=(10, 2)):
        plus, minus = img.copy(), img.copy()
        plus[r, c] += eps
        minus[r, c] -= eps
        with torch.no_grad():
            lp = m(torch.tensor(plus)[None, None])[0][0, 2].item()
            lm = m(torch.tensor(minus)[None, None])[0][0, 2].item()
        fd = abs(lp - lm) / (2 * eps)
        assert abs(fd - grid[r, c]) <= 1e-3 * max(fd, grid[r, c]) + 1e-12


def test_identity_warp_fixed_point():
    grid = np.random.default_rng(0).random((224, 224))
    canon = to_common_space(grid, CANONICAL_LANDMARKS, CANONICAL_LANDMARKS)
    assert np.max(np.abs(canon.grid - grid)) <= 1e-6
    assert canon.mask.all()


def test_scaled_landmarks_halve_distances():
    template = np.asarray(CANONICAL_LANDMARKS, dtype=float)
    # image is the template scaled x2 about the origin; the warp must map it back
    landmarks = template * 2
    scale, rot, t = estimate_similarity(landmarks, template)
    assert scale == pytest.approx(0.5) and np.allclose(rot, np.eye(2)) and np.allclose(t, 0, atol=1e-9)
    grid = np.zeros((448, 448))
    x, y = landmarks[2]
    grid[int(y), int(x)] = 1.0
    canon = to_common_space(grid, landmarks, template)
    r, c = np.unravel_index(np.argmax(canon.grid), canon.grid.shape)
    assert abs(c - template[2, 0]) <= 1 and abs(r - template[2, 1]) <= 1


def test_rotation_recovered():
    template = np.asarray(CANONICAL_LANDMARKS, dtype=float)
    theta = 0.3
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    moved = (template - 112) @ rot.T * 0.8 + 112 + [5, -7]
    scale, r, t = estimate_similarity(moved, template)
    np.testing.assert_allclose(scale * moved @ r.T + t, template, atol=1e-9)


def test_out_of_frame_masked():
    template = np.asarray(CANONICAL_LANDMARKS, dtype=float)
    canon = to_common_space(np.ones((224, 224)), template + [60, 0], template)
    assert not canon.mask.all()
    assert not canon.grid[~canon.mask].any()


def test_degenerate_landmarks():
    pts = np.asarray(CANONICAL_LANDMARKS, dtype=float).copy()
    pts[1] = pts[0]
    with pytest.raises(DegenerateLandmarks):
        to_common_space(np.ones((224, 224)), pts)
    line = np.stack([np.arange(5.0), np.arange(5.0)], axis=1) * 10
    with pytest.raises(DegenerateLandmarks):
        to_common_space(np.ones((224, 224)), line)


def test_warp_preserves_mass_for_smooth_maps():
    template = np.asarray(CANONICAL_LANDMARKS, dtype=float)
    yy, xx = np.mgrid[:224, :224]
    blob = np.exp(-((xx - 112) ** 2 + (yy - 120) ** 2) / (2 * 20 ** 2))
    theta = 0.2
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    # rigid move only: a similarity with unit scale keeps area
    moved = (template - 112) @ rot.T + 112 + [3, 4]
    canon = to_common_space(blob, moved, template)
    assert abs(canon.grid.sum() / blob.sum() - 1) < 0.02


def test_aggregate_identical_grids():
    g = np.random.default_rng(0).random((16, 16)) * 5 + 2
    h = aggregate_heatmaps([g] * 4, "fear", "adults")
    np.testing.assert_allclose(h.grid, standardize(g), atol=1e-12)
    assert h.n_samples == 4 and h.n_skipped == 0


def test_aggregate_skips_constant():
    g = np.random.default_rng(1).random((8, 8))
    h = aggregate_heatmaps([g, np.zeros((8, 8))], "fear", "adults")
    assert h.n_samples == 1 and h.n_skipped == 1
    with pytest.raises(ValueError):
        aggregate_heatmaps([np.zeros((8, 8))], "fear", "adults")
    with pytest.raises(ValueError):
        aggregate_heatmaps([], "fear", "adults")


def test_disjoint_peaks_average_to_half():
    a, b = np.zeros((10, 10)), np.zeros((10, 10))
    a[2, 2], b[7, 7] = 1, 1
    h = aggregate_heatmaps([a, b], "anger", "elderly")
    assert h.raw_mean[2, 2] == 0.5 and h.raw_mean[7, 7] == 0.5
    assert h.grid.max() == 1.0


def test_folds_averaged_after_samples():
    a, b = np.zeros((4, 4)), np.zeros((4, 4))
    a[0, 0], b[3, 3] = 1, 1
    # fold 0 has three copies of a, fold 1 a single b: fold means weigh equally
    h = aggregate_heatmaps([a, a, a, b], "fear", "children", folds=[0, 0, 0, 1])
    assert h.raw_mean[0, 0] == 0.5 and h.raw_mean[3, 3] == 0.5 and h.n_folds == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 8), st.randoms(use_true_random=False))
def test_aggregation_permutation_invariant_and_bounded(seed, n, rnd):
    grids = list(np.random.default_rng(seed).random((n, 6, 6)))
    h = aggregate_heatmaps(grids, "fear", "adults")
    rnd.shuffle(grids)
    np.testing.assert_allclose(aggregate_heatmaps(grids, "fear", "adults").raw_mean, h.raw_mean, atol=1e-12)
    assert h.raw_mean.min() >= 0 and h.raw_mean.max() <= 1
    assert h.grid.min() >= 0 and h.grid.max() <= 1


def test_zscore_option():
    g = np.arange(16.0).reshape(4, 4)
    z = standardize(g, "zscore")
    assert abs(z.mean()) < 1e-12 and abs(z.std() - 1) < 1e-12
    with pytest.raises(ValueError):
        standardize(g, "rank")


def test_template_helpers():
    t = mean_template([np.asarray(CANONICAL_LANDMARKS) + 1, np.asarray(CANONICAL_LANDMARKS) - 1])
    np.testing.assert_allclose(t, CANONICAL_LANDMARKS)
    assert template_id(t) == template_id(np.asarray(CANONICAL_LANDMARKS, dtype=float))


def test_explain_end_to_end():
    from fairfer.manifest import SampleRecord

    models = [build_model("baseline", BackboneConfig(depth=2, base_width=8, seed=s)) for s in range(2)]
    rng = np.random.default_rng(0)
    pix = rng.random((4, 224, 224)).astype(np.float32)
    records = [SampleRecord(f"s{i}", "x", e, a) for i, (e, a) in enumerate([("fear", 30), ("fear", 70), ("anger", 70),
                                                                          ("fear", 35)])]
    lms = [np.asarray(CANONICAL_LANDMARKS, dtype=float)] * 4
    out = explain(models, pix, records, lms, np.asarray(CANONICAL_LANDMARKS, dtype=float), batch_size=3)
    assert set(out) == {("fear", "adults"), ("fear", "elderly"), ("anger", "elderly")}
    h = out[("fear", "adults")]
    assert h.n_samples == 4 and h.n_folds == 2 and h.grid.shape == (224, 224)
