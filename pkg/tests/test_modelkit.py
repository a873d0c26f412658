import math

import numpy as np
import pytest
import torch

from fairfer.modelkit import (
    AgeNormalizer,
    BackboneConfig,
    CheckpointError,
    LossSpec,
    build_model,
    canonical_variant,
    forward,
    load_checkpoint,
    make_reference_backbone,
    multitask_loss,
    save_checkpoint,
    weighted_cross_entropy,
)
from fairfer.weighting import weights_from_counts

SMALL = BackboneConfig(depth=2, base_width=8, seed=3)


def image(seed=0):
    return np.random.default_rng(seed).random((224, 224)).astype(np.float32)


def test_default_backbone_width_and_size():
    bb = make_reference_backbone()
    assert bb.out_dim == 64
    assert sum(p.numel() for p in bb.parameters()) <= 1_000_000
    out = bb(torch.zeros(2, 1, 224, 224))
    assert out.shape == (2, 64)


def test_backbone_deterministic():
    a, b = make_reference_backbone(SMALL), make_reference_backbone(SMALL)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_backbone_rejects_bad_config():
    with pytest.raises(ValueError):
        make_reference_backbone(BackboneConfig(depth=0))
    with pytest.raises(ValueError):
        make_reference_backbone(BackboneConfig(base_width=6, groups=4))


def test_variant_names():
    assert canonical_variant("multi-modal") == "multi_modal"
    with pytest.raises(ValueError):
        canonical_variant("ensemble")


def test_baseline_and_age_weighted_share_init():
    a, b = build_model("baseline", SMALL), build_model("age_weighted", SMALL)
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_multi_task_has_one_parallel_head():
    base, mt = build_model("baseline", SMALL), build_model("multi_task", SMALL)
    extra = set(mt.state_dict()) - set(base.state_dict())
    assert extra == {"age_head.weight", "age_head.bias"}
    assert mt.age_head.in_features == mt.backbone.out_dim


def test_multi_modal_shapes():
    m = build_model("multi_modal")
    assert m.fuse_dim == 16 and m.expression_head.in_features == 17


def test_forward_contracts():
    img = image()
    logits, age = forward(build_model("baseline", SMALL), img)
    assert logits.shape == (7,) and age is None
    logits, age = forward(build_model("multi_task", SMALL), img)
    assert logits.shape == (7,) and isinstance(age, float)
    logits, age = forward(build_model("multi_modal", SMALL), img, age_input=40)
    assert age is None


def test_forward_age_hygiene():
    with pytest.raises(ValueError):
        forward(build_model("multi_modal", SMALL), image())
    for kind in ("baseline", "age_weighted", "multi_task"):
        with pytest.raises(ValueError):
            forward(build_model(kind, SMALL), image(), age_input=30)


def test_zero_heads_give_bias():
    m = build_model("baseline", SMALL)
    with torch.no_grad():
        m.expression_head.weight.zero_()
        m.expression_head.bias.copy_(torch.arange(7.0))
    logits, _ = forward(m, image())
    np.testing.assert_array_equal(logits, np.arange(7.0))


def test_multi_modal_age_sensitivity():
    m = build_model("multi_modal", SMALL)
    img = image(4)
    a, _ = forward(m, img, age_input=20)
    b, _ = forward(m, img, age_input=20)
    c, _ = forward(m, img, age_input=75)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    # expected change is exactly the age column times the normalized age step
    col = m.expression_head.weight[:, -1].detach().numpy()
    np.testing.assert_allclose(c - a, col * 0.55, atol=1e-5)
    with torch.no_grad():
        m.expression_head.weight[:, -1] = 0
    a, _ = forward(m, img, age_input=20)
    c, _ = forward(m, img, age_input=75)
    np.testing.assert_array_equal(a, c)


def test_age_normalizer():
    n = AgeNormalizer()
    assert n(50.0) == 0.5 and n.inverse(0.5) == 50.0
    with pytest.raises(ValueError):
        AgeNormalizer(scale=0)


def test_cross_entropy_examples():
    assert weighted_cross_entropy(torch.zeros(7), 2, 1.0).item() == pytest.approx(math.log(7), abs=1e-6)
    assert weighted_cross_entropy(torch.zeros(7), 2, 0.5).item() == pytest.approx(0.9730, abs=1e-4)
    big = torch.zeros(7)
    big[4] = 60.0
    assert weighted_cross_entropy(big, 4, 1.0).item() < 1e-20


def test_cross_entropy_linearity():
    rng = np.random.default_rng(0)
    logits = torch.tensor(rng.normal(size=(16, 7)))
    target = torch.tensor(rng.integers(0, 7, 16))
    one = weighted_cross_entropy(logits, target, torch.ones(16, dtype=torch.float64))
    for w in (0.0, 0.25, 3.0, 1e-3):
        assert torch.equal(weighted_cross_entropy(logits, target, torch.full((16,), w, dtype=torch.float64)), w * one)


def test_cross_entropy_rejects_non_finite():
    bad = torch.zeros(7)
    bad[0] = float("nan")
    with pytest.raises(ValueError):
        weighted_cross_entropy(bad, 0, 1.0)


def test_multitask_examples():
    logits = torch.tensor([0.3, -1.0, 2.0, 0.0, 0.5, 0.1, -0.2])
    ce = weighted_cross_entropy(logits, 1, 0.7)
    assert multitask_loss(logits, 1, 0.7, 0.9, 0.2, 5.0, 0.0).item() == ce.item()
    assert multitask_loss(logits, 1, 0.7, 0.4, 0.4, 123.0, 1.0).item() == ce.item()
    assert multitask_loss(logits, 1, 0.7, 0.9, 0.4, 2.0, 1.0).item() == pytest.approx(ce.item() + 0.5, abs=1e-6)
    with pytest.raises(ValueError):
        multitask_loss(logits, 1, 0.7, 0.9, 0.4, 2.0, -0.1)


def _central_difference(f, x, eps=1e-6):
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = eps
        grad.flat[i] = (f(x + step) - f(x - step)) / (2 * eps)
    return grad


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=7) * 2
    target, w = int(rng.integers(7)), float(rng.uniform(0.1, 3))
    pred, true, d, lam = rng.normal(), rng.normal(), rng.uniform(0.1, 4), rng.uniform(0, 2)

    def total(zz, pp):
        return multitask_loss(torch.tensor(zz), target, w, torch.tensor(pp), true, d, lam).item()

    zt = torch.tensor(z, requires_grad=True)
    pt = torch.tensor(pred, requires_grad=True)
    multitask_loss(zt, target, w, pt, true, d, lam).backward()
    num_z = _central_difference(lambda v: total(v, pred), z)
    num_p = _central_difference(lambda v: total(z, v[0]), np.array([pred]))
    np.testing.assert_allclose(zt.grad.numpy(), num_z, rtol=1e-4, atol=1e-9)
    assert pt.grad.item() == pytest.approx(num_p[0], rel=1e-4)

    zt = torch.tensor(z, requires_grad=True)
    weighted_cross_entropy(zt, target, w).backward()
    num = _central_difference(lambda v: weighted_cross_entropy(torch.tensor(v), target, w).item(), z)
    np.testing.assert_allclose(zt.grad.numpy(), num, rtol=1e-4, atol=1e-9)


def test_checkpoint_round_trip(tmp_path):
    m = build_model("multi_modal", SMALL)
    table = weights_from_counts({("fear", "adults"): 4, ("anger", "elderly"): 2})
    path = save_checkpoint(tmp_path / "m.pt", m, SMALL, LossSpec(table, lam=None), extra={"fold": 2})
    again, blob = load_checkpoint(path)
    assert again.kind == "multi_modal" and not again.training
    assert blob["extra"] == {"fold": 2}
    assert blob["loss_spec"]["expression_weights"]["mode"] == table.mode
    a, _ = forward(m, image(), 30)
    b, _ = forward(again, image(), 30)
    np.testing.assert_array_equal(a, b)


def test_checkpoint_errors(tmp_path):
    bogus = tmp_path / "bogus.pt"
    bogus.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bogus)
    torch.save({"format": 99}, tmp_path / "future.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "future.pt")
