import numpy as np
import pytest
import torch

from dabench.models import (
    ModelSpec,
    as_batch,
    build_model,
    checkpoint_hash,
    forward,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    segmentation_loss,
)
from dabench.volume import Slice2D

from oracles import finite_difference_errors


def test_default_groups_have_equal_size():
    m = build_model(ModelSpec())
    assert parameter_count(m, "first") == parameter_count(m, "last") == 4848
    assert parameter_count(m, "all") == sum(p.numel() for p in m.parameters())
    assert m.group_units("first") == ["stem", "enc.0.unit1", "enc.0.unit2"]
    assert m.group_units("last") == ["dec.0.unit1", "dec.0.unit2", "head"]


def test_groups_are_disjoint_and_inside_all():
    m = build_model(ModelSpec(depth=3, base_filters=8))
    first = set(m.layer_groups["first"].parameter_ids)
    last = set(m.layer_groups["last"].parameter_ids)
    every = set(m.layer_groups["all"].parameter_ids)
    assert first and last and not first & last
    assert first | last <= every
    assert every == {n for n, _ in m.named_parameters()}


@pytest.mark.parametrize("spec, expected", [
    # stem 44, enc0 304, enc1 944, skip 20, up 132, dec0 304, head 44
    (ModelSpec(depth=2, base_filters=4), 1792),
    # enc0 188, enc1 880, up 132, dec0 440, head 5
    (ModelSpec(variant="vanilla_unet", depth=2, base_filters=4), 1645),
    # enc 664 + 3488 + 13888, up 520 + 2064, dec 1744 + 6944, head 9
    (ModelSpec(variant="vanilla_unet", depth=3, base_filters=8), 29321),
])
def test_hand_counted_parameter_totals(spec, expected):
    assert parameter_count(build_model(spec), "all") == expected


def test_vanilla_groups():
    m = build_model(ModelSpec(variant="vanilla_unet", depth=3, base_filters=8, group_size=2))
    # enc.0.conv1 (1->8) + enc.0.conv2 (8->8)
    assert parameter_count(m, "first") == 80 + 584
    # dec.0.conv2 (8->8) + head (8->1, 1x1)
    assert parameter_count(m, "last") == 584 + 9


def test_unknown_group_and_bad_spec():
    with pytest.raises(KeyError):
        parameter_count(build_model(ModelSpec(depth=2, base_filters=2)), "middle")
    with pytest.raises(ValueError):
        ModelSpec(variant="transformer")
    with pytest.raises(ValueError):
        ModelSpec(depth=1)


def test_seeded_construction_is_deterministic():
    spec = ModelSpec(depth=2, base_filters=4)
    a, b, c = build_model(spec, 3), build_model(spec, 3), build_model(spec, 4)
    for (na, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(pa, pb), na
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_kaiming_scale():
    m = build_model(ModelSpec(), seed=0)
    w = m.net.enc[3].unit2.conv.weight
    fan_in = w.shape[1] * 9
    assert float(w.detach().std()) == pytest.approx(np.sqrt(2.0 / fan_in), rel=0.05)


def test_zero_weights_give_zero_logits():
    m = build_model(ModelSpec(depth=3, base_filters=4))
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    out = forward(m, np.random.default_rng(0).random((2, 16, 16)))
    assert torch.count_nonzero(out) == 0


def test_forward_shapes_and_batch_independence():
    m = build_model(ModelSpec(depth=3, base_filters=4))
    x = np.random.default_rng(0).random((3, 24, 32)).astype(np.float32)
    x[2] = x[0]
    out = forward(m, x)
    assert out.shape == (3, 1, 24, 32)
    assert torch.equal(out[0], out[2])
    # eval mode: a single slice gives the same logits as inside a batch
    torch.testing.assert_close(forward(m, x[1:2])[0], out[1])
    with pytest.raises(ValueError):
        forward(m, np.zeros((1, 30, 32)))


@pytest.mark.slow
def test_default_model_full_size_batch():
    m = build_model(ModelSpec())
    out = forward(m, torch.zeros(32, 256, 256))
    assert out.shape == (32, 1, 256, 256)
    assert torch.isfinite(out).all()


def test_as_batch_accepts_slices():
    slices = [Slice2D(np.full((8, 8), i, np.float32)) for i in range(3)]
    x = as_batch(slices)
    assert x.shape == (3, 1, 8, 8)
    assert float(x[2].mean()) == 2.0


def test_loss_values():
    logits = torch.zeros(1, 1, 2, 2)
    target = torch.tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
    assert float(segmentation_loss(logits, target)) == pytest.approx(np.log(2.0))
    perfect = torch.where(target > 0, 50.0, -50.0)
    assert float(segmentation_loss(perfect, target, "soft_dice")) == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ValueError):
        segmentation_loss(logits, target, "hinge")


@pytest.mark.parametrize("variant", ["residual_unet", "vanilla_unet"])
def test_gradients_match_finite_differences(variant):
    torch.manual_seed(0)
    m = build_model(ModelSpec(variant=variant, depth=2, base_filters=2, group_size=1), seed=1).double()
    m.train()
    g = torch.Generator().manual_seed(2)
    x = torch.randn(2, 1, 16, 16, generator=g, dtype=torch.float64)
    y = (torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64) > 0.5).double()
    errors = finite_difference_errors(m, x, y, segmentation_loss)
    assert max(errors.values()) <= 1e-3, errors


def test_checkpoint_round_trip_and_stable_bytes(tmp_path):
    m = build_model(ModelSpec(depth=2, base_filters=4), seed=9)
    with torch.no_grad():
        m.net.stem.bn.running_mean.add_(0.25)
    p1 = save_checkpoint(m, tmp_path / "a.ckpt", extra={"note": "x"})
    p2 = save_checkpoint(m, tmp_path / "b.ckpt", extra={"note": "x"})
    assert checkpoint_hash(p1) == checkpoint_hash(p2)
    loaded, manifest = load_checkpoint(p1)
    assert manifest["extra"] == {"note": "x"}
    assert loaded.spec == m.spec
    for (k, v), (_, w) in zip(m.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(v, w), k
    x = np.random.default_rng(0).random((1, 16, 16))
    assert torch.equal(forward(m, x), forward(loaded, x))
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.ckpt")
