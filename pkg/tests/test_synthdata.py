import itertools

import numpy as np
import pytest
from scipy import stats

from toolbottleneck.knockout import KnockoutMask, marginal_conditional_oracle
from toolbottleneck.synthdata import (
    DiscreteTaskSpec,
    ImageTaskSpec,
    balanced_subsample,
    discrete_joint,
    discrete_toolbox,
    generate_discrete_task,
    generate_image_task,
    image_toolbox,
    label_from_instances,
    load_dataset,
    oracle_label_from_stack,
    render_constant_stacks,
    save_dataset,
)
from toolbottleneck.tbm import LabeledDataset
from toolbottleneck.toolbox import compute_tool_stack


@pytest.fixture(scope="module")
def count_task():
    spec = ImageTaskSpec(label_rule="count", n_train=48, n_val=32, seed=3)
    return spec, generate_image_task(spec)


@pytest.fixture(scope="module")
def planted_task():
    spec = ImageTaskSpec(label_rule="planted", count_range=(0, 4), n_train=48, n_val=32, shortcut_box_pad=4, seed=5)
    return spec, generate_image_task(spec)


# ---- discrete


def test_spec_validation():
    with pytest.raises(ValueError):
        DiscreteTaskSpec(n_tools=2, cardinalities=(2, 2, 2))
    with pytest.raises(ValueError):
        DiscreteTaskSpec(label_rule="table")
    with pytest.raises(ValueError):
        DiscreteTaskSpec(label_rule="xor", cardinalities=(3, 2, 2))
    with pytest.raises(ValueError):
        DiscreteTaskSpec(tool_marginals=((0.5, 0.6), (0.5, 0.5), (0.5, 0.5)))


def test_joint_rules():
    spec = DiscreteTaskSpec(label_rule="xor")
    joint = discrete_joint(spec)
    assert joint.p.sum() == pytest.approx(1.0)
    assert marginal_conditional_oracle(joint, KnockoutMask((0, 1, 1)), [1.0]) == pytest.approx({0: 0.5, 1: 0.5})
    assert marginal_conditional_oracle(joint, KnockoutMask((0, 0, 1)), [1.0, 1.0]) == pytest.approx({0: 1.0, 1: 0.0})
    copy = discrete_joint(DiscreteTaskSpec(label_rule="copy", tool_marginals=((0.3, 0.7), (0.5, 0.5), (0.5, 0.5))))
    assert marginal_conditional_oracle(copy, KnockoutMask((1, 1, 1)), []) == pytest.approx({0: 0.3, 1: 0.7})


def test_symbol_values_in_unit_interval():
    spec = DiscreteTaskSpec(n_tools=2, cardinalities=(3, 2), label_rule="copy")
    assert spec.symbol_values(np.array([[0, 0], [1, 1], [2, 0]])).tolist() == [[0, 0], [0.5, 1], [1, 0]]


def test_table_rule_uses_lexicographic_order():
    table = (0.1, 0.2, 0.3, 0.4)
    spec = DiscreteTaskSpec(n_tools=2, cardinalities=(2, 2), label_rule="table", label_table=table)
    assert [spec.p_label(z) for z in itertools.product(range(2), range(2))] == list(table)


def test_samples_follow_the_joint():
    spec = DiscreteTaskSpec(label_rule="table", label_table=(0.1, 0.9, 0.3, 0.7, 0.5, 0.2, 0.8, 0.4),
                            tool_marginals=((0.4, 0.6), (0.7, 0.3), (0.5, 0.5)), n_train=20_000, n_val=10)
    splits, joint = generate_discrete_task(spec)
    ds = splits["train"]
    rows = {(tuple(z), y): i for i, (z, y) in enumerate(zip(joint.z.tolist(), joint.y.tolist()))}
    counts = np.zeros(len(joint.p))
    for z, y in zip(ds.meta["values"].tolist(), ds.labels.tolist()):
        counts[rows[(tuple(z), y)]] += 1
    assert stats.chisquare(counts, joint.p * len(ds)).pvalue > 1e-3


def test_discrete_generation_is_deterministic_and_split_independent():
    a, _ = generate_discrete_task(DiscreteTaskSpec(n_train=64, n_val=32))
    b, _ = generate_discrete_task(DiscreteTaskSpec(n_train=128, n_val=32))
    np.testing.assert_array_equal(a["val"].labels, b["val"].labels)
    np.testing.assert_array_equal(a["train"].stacks, generate_discrete_task(DiscreteTaskSpec(n_train=64, n_val=32))[0]["train"].stacks)
    assert a["train"].stacks.shape == (64, 3, 4, 4)


def test_discrete_toolbox_matches_renderer():
    tb = discrete_toolbox(3, resolution=5)
    vals = np.array([0.0, 0.5, 1.0])
    stack = compute_tool_stack(None, {"values": vals}, tb)
    np.testing.assert_array_equal(stack, render_constant_stacks(vals[None], 5)[0])
    assert tb.tool_ids == ("z1", "z2", "z3")


# ---- image tasks


def test_image_labels_follow_rule(count_task):
    spec, splits = count_task
    for ds in splits.values():
        for insts, y in zip(ds.instances, ds.labels):
            assert y == int(len(insts) > spec.count_threshold)


def test_labels_recoverable_from_rasters(count_task, planted_task):
    for spec, splits in (count_task, planted_task):
        tb = image_toolbox(spec)
        ds = splits["val"]
        agree = [oracle_label_from_stack(spec, s, tb) == y for s, y in zip(ds.stacks, ds.labels)]
        assert np.mean(agree) >= 0.99


def test_edge_cases_of_rules():
    spec = ImageTaskSpec(label_rule="count")
    assert label_from_instances(spec, []) == 0
    planted = ImageTaskSpec(label_rule="planted")
    assert label_from_instances(planted, []) == 0


def test_stacks_match_toolbox(count_task):
    spec, splits = count_task
    tb = image_toolbox(spec)
    ds = splits["train"]
    assert ds.stacks.shape == (len(ds), tb.total_channels) + spec.out_size
    np.testing.assert_array_equal(ds.stacks[7], compute_tool_stack(None, {"instances": ds.instances[7]}, tb))
    assert ds.images.shape == (len(ds), 3) + spec.out_size
    assert 0 <= ds.images.min() and ds.images.max() <= 1


def test_image_generation_deterministic(count_task):
    spec, splits = count_task
    again = generate_image_task(spec)
    np.testing.assert_array_equal(again["val"].stacks, splits["val"].stacks)
    np.testing.assert_array_equal(again["val"].images, splits["val"].images)


def test_shortcut_padding_only_on_train_positives(planted_task):
    spec, splits = planted_task
    tight = ImageTaskSpec(**{**spec.to_json(), "shortcut_box_pad": 0})
    plain = generate_image_task(tight)
    np.testing.assert_array_equal(plain["val"].stacks, splits["val"].stacks)
    tr, tr0 = splits["train"], plain["train"]
    box = image_toolbox(spec).channel_slice(1)
    for i, y in enumerate(tr.labels):
        if y == 0 or not tr.instances[i]:
            np.testing.assert_array_equal(tr.stacks[i], tr0.stacks[i])
        else:
            assert tr.stacks[i, box].sum() > tr0.stacks[i, box].sum()


def test_image_spec_validation():
    with pytest.raises(ValueError):
        ImageTaskSpec(label_rule="area")
    with pytest.raises(ValueError):
        ImageTaskSpec(planted_type=6)
    with pytest.raises(ValueError):
        ImageTaskSpec(shortcut_box_pad=-1)
    with pytest.raises(ValueError):
        ImageTaskSpec(label_rule="planted", count_range=(0, 0))


# ---- subsampling and persistence


def tiny(labels):
    n = len(labels)
    return LabeledDataset([f"i{j}" for j in range(n)], np.zeros((n, 1, 2, 2)), labels)


def test_balanced_subsample():
    ds = tiny([0] * 10 + [1] * 4)
    sub = balanced_subsample(ds, 8, seed=0)
    assert len(sub) == 8 and sub.labels.sum() == 4
    # minority fully used when n = 2 * minority count
    assert sorted(i for i, y in zip(sub.image_ids, sub.labels) if y == 1) == ["i10", "i11", "i12", "i13"]
    assert balanced_subsample(ds, 8, 0).image_ids == sub.image_ids
    assert balanced_subsample(ds, 8, 1).image_ids != sub.image_ids
    for bad in (3, 0, 10):
        with pytest.raises(ValueError):
            balanced_subsample(ds, bad, 0)


def test_dataset_roundtrip(tmp_path, planted_task):
    spec, splits = planted_task
    ds = splits["val"].with_selections(np.eye(5, dtype=np.int8)[np.arange(len(splits["val"])) % 5])
    save_dataset(tmp_path / "val", ds, spec.to_json())
    back = load_dataset(tmp_path / "val")
    assert back.image_ids == ds.image_ids and back.split == "val"
    np.testing.assert_array_equal(back.stacks, ds.stacks)
    np.testing.assert_array_equal(back.selections, ds.selections)
    np.testing.assert_array_equal(back.images, ds.images)
    assert back.instances == ds.instances
