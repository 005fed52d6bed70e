import numpy as np
import pytest

from mtct.engine import Tape, Tensor, backward
import mtct.engine as en
from mtct.errors import ContractError, DimensionError
from mtct.model import (AttributeSchema, TrunkConfig, apply_freeze, build_3mtn,
                        build_mtn, clone_to_target, load_checkpoint,
                        save_checkpoint)

SCHEMA_432 = AttributeSchema((("a", 4), ("b", 3), ("c", 2)))
TINY_TRUNK = TrunkConfig(channels=(3, 3, 4, 4, 4), input_hw=8, pool_after=(1, 2))


def tiny_model(seed=0):
    return build_mtn(SCHEMA_432, TINY_TRUNK, branch_hidden=(6, 5), init_seed=seed)


def test_branch_output_widths_match_cardinalities():
    model = tiny_model()
    batch = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 8, 8)))
    _, logits = model.forward(batch)
    assert [lg.shape for lg in logits] == [(2, 4), (2, 3), (2, 2)]


def test_nine_attributes_totalling_178_values():
    cards = [20, 20, 20, 20, 20, 20, 20, 20, 18]
    assert sum(cards) == 178
    schema = AttributeSchema(tuple((f"attr{i}", c) for i, c in enumerate(cards)))
    model = build_mtn(schema, TINY_TRUNK, branch_hidden=(6, 5), init_seed=0)
    widths = [model.params[f"branch.attr{i}.fc3.w"].shape[1] for i in range(9)]
    assert sum(widths) == 178


def test_single_attribute_degenerates_to_plain_classifier():
    schema = AttributeSchema((("only", 5),))
    model = build_mtn(schema, TINY_TRUNK, branch_hidden=(6, 5), init_seed=1)
    batch = Tensor(np.random.default_rng(1).uniform(size=(3, 3, 8, 8)))
    _, logits = model.forward(batch)
    assert len(logits) == 1 and logits[0].shape == (3, 5)


def test_zero_attribute_schema_rejected():
    with pytest.raises(ContractError):
        AttributeSchema(())


def test_zero_parameters_give_uniform_softmax():
    model = tiny_model()
    for t in model.params.values():
        t.data[:] = 0.0
    batch = Tensor(np.random.default_rng(2).uniform(size=(2, 3, 8, 8)))
    _, logits = model.forward(batch)
    for lg, card in zip(logits, SCHEMA_432.cardinalities):
        p = en.softmax_rows(lg)
        assert np.allclose(p.data, 1.0 / card)


def test_forward_determinism():
    model = tiny_model()
    batch = Tensor(np.random.default_rng(3).uniform(size=(2, 3, 8, 8)))
    _, l1 = model.forward(batch)
    _, l2 = model.forward(batch)
    for a, b in zip(l1, l2):
        assert np.array_equal(a.data, b.data)


def test_shape_calculus_of_default_and_tiny_trunks():
    # tiny: 8 -> pool after blocks 1,2 -> 2; features 4*2*2
    assert TINY_TRUNK.feature_len == 4 * 2 * 2
    model = tiny_model()
    feats, logits = model.forward(
        Tensor(np.random.default_rng(4).uniform(size=(2, 3, 8, 8))))
    assert feats.shape == (2, TINY_TRUNK.feature_len)
    assert [lg.shape for lg in logits] == [(2, 4), (2, 3), (2, 2)]
    # default: 32 -> pools after blocks 1,2,4 -> 4; features c5*4*4
    default = TrunkConfig()
    assert default.feature_len == default.channels[4] * 4 * 4


def test_resolution_mismatch_raises():
    model = tiny_model()
    with pytest.raises(DimensionError):
        model.forward(Tensor(np.zeros((2, 3, 16, 16))))


def test_count_parameters_hand_arithmetic():
    model = tiny_model()
    # trunk per block: spatial (cout*cin*9 + cout) + two 1x1 (cout*cout + cout)
    expected = 0
    c_prev = 3
    for c in TINY_TRUNK.channels:
        expected += c * c_prev * 9 + c
        expected += 2 * (c * c + c)
        c_prev = c
    feat = TINY_TRUNK.feature_len
    for card in SCHEMA_432.cardinalities:
        expected += feat * 6 + 6
        expected += 6 * 5 + 5
        expected += 5 * card + card
    assert model.count_parameters() == expected


def test_parameter_partition_census():
    model = tiny_model()
    groups = {name: [] for name in
              [f"trunk.conv{b}" for b in range(1, 6)]
              + [f"branch.{n}" for n in SCHEMA_432.names]}
    for pname in model.params:
        owner = [g for g in groups if pname.startswith(g + ".")]
        assert len(owner) == 1, pname
        groups[owner[0]].append(pname)
    assert all(len(v) == 6 for k, v in groups.items() if k.startswith("trunk"))
    assert all(len(v) == 6 for k, v in groups.items() if k.startswith("branch"))


def test_clone_is_deep_and_equal():
    model = tiny_model(seed=5)
    twin = clone_to_target(model)
    for name in model.params:
        assert np.array_equal(model.params[name].data, twin.params[name].data)
    twin.params["trunk.conv1.spatial.w"].data += 1.0
    assert not np.array_equal(model.params["trunk.conv1.spatial.w"].data,
                              twin.params["trunk.conv1.spatial.w"].data)
    batch = Tensor(np.random.default_rng(6).uniform(size=(2, 3, 8, 8)))
    fresh = clone_to_target(model)
    _, a = model.forward(batch)
    _, b = fresh.forward(batch)
    for x, y in zip(a, b):
        assert np.array_equal(x.data, y.data)


def test_three_stream_freeze_plan():
    src = tiny_model(seed=7)
    tgt = clone_to_target(src)
    three = build_3mtn(src, tgt)
    expected_target = {n for n in tgt.params
                       if n.startswith("trunk.conv5.") or n.startswith("branch.")}
    assert {n for n in tgt.params if n not in tgt.frozen} == expected_target
    expected_source = {n for n in src.params if n.startswith("branch.")}
    assert {n for n in src.params if n not in src.frozen} == expected_source
    assert three.positive_slot is three.negative_slot  # shared parameter storage


def test_three_stream_slots_share_updates():
    src = tiny_model(seed=8)
    tgt = clone_to_target(src)
    three = build_3mtn(src, tgt)
    batch = Tensor(np.random.default_rng(8).uniform(size=(2, 3, 8, 8)))
    three.positive_slot.params["branch.a.fc3.w"].data += 0.5
    _, lp = three.positive_slot.forward(batch)
    _, ln = three.negative_slot.forward(batch)
    assert np.array_equal(lp[0].data, ln[0].data)


def test_three_stream_schema_mismatch():
    src = tiny_model()
    other = build_mtn(AttributeSchema((("x", 2),)), TINY_TRUNK, (6, 5), 0)
    with pytest.raises(ContractError):
        build_3mtn(src, other)


def test_apply_freeze_contracts():
    model = tiny_model()
    with pytest.raises(ContractError):
        apply_freeze(model, {"nonexistent.w": True})
    with pytest.raises(ContractError):
        apply_freeze(model, {"trunk.conv1.spatial.w": True})  # incomplete
    apply_freeze(model, {n: True for n in model.params})
    assert not model.trainable_names()
    apply_freeze(model, {n: False for n in model.params})
    assert set(model.trainable_names()) == set(model.params)


def test_frozen_tensors_do_not_record_gradients():
    model = tiny_model(seed=9)
    apply_freeze(model, {n: not n.startswith("branch.") for n in model.params})
    batch = Tensor(np.random.default_rng(9).uniform(size=(2, 3, 8, 8)))
    model.zero_grad()
    with Tape():
        _, logits = model.forward(batch)
        backward(en.mean(logits[0]))
    assert model.params["trunk.conv1.spatial.w"].grad is None
    assert model.params["branch.a.fc1.w"].grad is not None


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = tiny_model(seed=10)
    model.frozen = {"trunk.conv1.spatial.w"}
    model._sync_requires_grad()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, stage="stage1")
    loaded, stage = load_checkpoint(path)
    assert stage == "stage1"
    assert loaded.schema == model.schema and loaded.trunk == model.trunk
    assert loaded.frozen == model.frozen
    for name in model.params:
        assert np.array_equal(loaded.params[name].data, model.params[name].data)


def test_default_scale_parameter_count_order_of_magnitude():
    # the paper-scale architecture family reaches tens of millions of params;
    # a wider variant of the same family must land in that range
    big = TrunkConfig(channels=(96, 192, 384, 384, 384))
    schema = AttributeSchema(tuple((f"attr{i}", 20) for i in range(9)))
    model = build_mtn(schema, big, branch_hidden=(1024, 512), init_seed=0)
    assert 10_000_000 < model.count_parameters() < 200_000_000
