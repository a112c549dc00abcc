import json

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from toolbottleneck.analysis import (
    DataEfficiencyCurve,
    ImportanceReport,
    MetricSpec,
    data_efficiency_run,
    instance_dropout,
    intervention_sweep,
    knockout_verification,
    max_error_per_mask,
    mean_ci,
    pixel_trainer,
    plot_combinations,
    plot_curves,
    plot_importance,
    plot_sweep,
    selection_frequency,
    tbm_trainer,
    tool_importance,
    write_json,
)
from toolbottleneck.knockout import KnockoutMask, marginal_conditional_oracle
from toolbottleneck.selection import SelectionVector
from toolbottleneck.synthdata import (
    DiscreteTaskSpec,
    ImageTaskSpec,
    discrete_toolbox,
    generate_discrete_task,
    generate_image_task,
    image_toolbox,
)
from toolbottleneck.tbm import LabeledDataset, TrainConfig, evaluate
from toolbottleneck.toolbox import InstanceRecord


class ChannelReader(nn.Module):
    """Logit is an affine function of one channel's spatial mean."""

    def __init__(self, channel=0, scale=8.0, offset=0.5):
        super().__init__()
        self.channel, self.offset = channel, offset
        self.scale = nn.Parameter(torch.tensor(scale))

    def forward(self, x):
        return self.scale * (x[:, self.channel].mean(dim=(1, 2)) - self.offset)


@pytest.fixture(scope="module")
def copy_val():
    splits, _ = generate_discrete_task(DiscreteTaskSpec(label_rule="copy", n_train=8, n_val=200))
    return splits["val"]


@pytest.fixture(scope="module")
def count_val():
    spec = ImageTaskSpec(label_rule="count", n_train=2, n_val=40, seed=1)
    return spec, generate_image_task(spec)["val"]


# ---- importance


def test_importance_singles_out_the_read_tool(copy_val):
    report = tool_importance(ChannelReader(0), copy_val, discrete_toolbox(3))
    imp = report.importances()
    # knocking z1 out sends every prediction negative: accuracy falls to P(y=0)
    assert imp["z1"] == pytest.approx(1.0 - np.mean(copy_val.labels == 0))
    assert imp["z2"] == 0.0 and imp["z3"] == 0.0
    assert report.consistent()


def test_importance_auc_and_json(copy_val):
    report = tool_importance(ChannelReader(1), copy_val, discrete_toolbox(3), MetricSpec("auc"))
    assert report.importances()["z1"] == 0.0
    back = ImportanceReport.from_json(json.loads(json.dumps(report.to_json())))
    assert back.importances() == report.importances() and back.metric == "auc"


def test_importance_of_invariant_model_is_zero(copy_val):
    class Constant(nn.Module):
        def __init__(self):
            super().__init__()
            self.b = nn.Parameter(torch.tensor(0.3))

        def forward(self, x):
            return self.b.expand(len(x))

    imp = tool_importance(Constant(), copy_val, discrete_toolbox(3)).importances()
    assert set(imp.values()) == {0.0}


def test_metric_spec_validation():
    with pytest.raises(ValueError):
        MetricSpec("f1")


# ---- knockout verification


def test_knockout_verification_zero_error_for_exact_model():
    spec = DiscreteTaskSpec(label_rule="table", label_table=(0.1, 0.9, 0.3, 0.7, 0.5, 0.2, 0.8, 0.4),
                            n_train=1, n_val=1)
    _, joint = generate_discrete_task(spec)

    def exact(values):
        out = []
        for row in values:
            mask = KnockoutMask(tuple(int(v == -1) for v in row))
            out.append(marginal_conditional_oracle(joint, mask, row)[1])
        return np.array(out)

    rows = knockout_verification(exact, joint)
    # a mask keeping k of 3 binary tools has 2^k observable configurations: 3^3 in total
    assert len(rows) == 27
    assert max(r["abs_err"] for r in rows) < 1e-12
    per_mask = max_error_per_mask(rows)
    assert len(per_mask) == 8


def test_knockout_verification_detects_wrong_model():
    _, joint = generate_discrete_task(DiscreteTaskSpec(label_rule="copy", n_train=1, n_val=1))
    rows = knockout_verification(lambda v: np.full(len(v), 0.5), joint)
    errs = max_error_per_mask(rows)
    assert errs[(0, 1, 1)] == pytest.approx(0.5)
    assert errs[(1, 1, 1)] == pytest.approx(0.0)


# ---- interventions


def test_instance_dropout_extremes():
    insts = [InstanceRecord((0, 0, 1, 1), (0, 0), ()) for _ in range(10)]
    rng = np.random.default_rng(0)
    assert instance_dropout(insts, 0.0, rng) == insts
    assert instance_dropout(insts, 1.0, rng) == []
    with pytest.raises(ValueError):
        instance_dropout(insts, 1.5, rng)


def test_instance_dropout_rate():
    insts = [InstanceRecord((0, 0, 1, 1), (0, 0), ())] * 5000
    kept = len(instance_dropout(insts, 0.3, np.random.default_rng(1)))
    assert stats.binomtest(kept, 5000, 0.7).pvalue > 1e-4


def test_sweep_monotone_and_anchored(count_val):
    spec, val = count_val
    tb = image_toolbox(spec)
    model = ChannelReader(channel=0, scale=400.0, offset=0.03)
    grid = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    sweep = intervention_sweep(model, val, tb, grid, rng_seed=2)
    values = [sweep[p] for p in grid]
    assert values == sorted(values)
    assert values[0] < 1.0
    assert sweep[1.0] == 1.0
    base = evaluate(model, val, tb.channels_per_tool)["probs"]
    assert sweep[0.0] == float(np.mean(base < 0.5))
    assert intervention_sweep(model, val, tb, grid, rng_seed=2) == sweep


def test_sweep_needs_instances(copy_val):
    with pytest.raises(ValueError):
        intervention_sweep(ChannelReader(), copy_val, discrete_toolbox(3), [0.0])


# ---- selection statistics


def test_selection_frequency_example():
    sels = [SelectionVector((1, 0, 1)), SelectionVector((1, 1, 0)), SelectionVector((1, 0, 1))]
    st_ = selection_frequency(sels)
    np.testing.assert_allclose(st_.frequency, [1.0, 1 / 3, 2 / 3])
    assert st_.combinations[(1, 0, 1)] == 2 and st_.n == 3
    doc = st_.to_json(["a", "b", "c"])
    assert doc["combinations"][0] == {"bits": [1, 0, 1], "tools": ["a", "c"], "count": 2}
    with pytest.raises(ValueError):
        selection_frequency([])


@given(st.lists(st.lists(st.integers(0, 1), min_size=4, max_size=4), min_size=1, max_size=30))
def test_frequency_invariants(rows):
    st_ = selection_frequency(np.array(rows))
    assert sum(st_.combinations.values()) == len(rows)
    assert np.all((st_.frequency >= 0) & (st_.frequency <= 1))
    expect = np.zeros(4)
    for bits, c in st_.combinations.items():
        expect += np.array(bits) * c
    np.testing.assert_allclose(st_.frequency, expect / len(rows))


# ---- data efficiency


def test_mean_ci_matches_scipy():
    vals = [0.61, 0.7, 0.66, 0.58, 0.73]
    mean, half = mean_ci(vals)
    lo, hi = stats.t.interval(0.95, df=4, loc=np.mean(vals), scale=stats.sem(vals))
    assert mean == pytest.approx(np.mean(vals)) and half == pytest.approx((hi - lo) / 2)
    assert mean_ci([0.5]) == (0.5, None)


def balanced(n):
    labels = np.arange(n) % 2
    return LabeledDataset([f"i{j}" for j in range(n)], np.zeros((n, 1, 2, 2)), labels)


def test_data_efficiency_is_complete_and_reproducible():
    calls = []

    def fake(tr, va, seed):
        calls.append((len(tr), seed))
        return len(tr) / 100 + seed / 1000

    train, val = balanced(20), balanced(6)
    a = data_efficiency_run(train, val, [4, 8, 20], [0, 1, 2], {"fake": fake})
    b = data_efficiency_run(train, val, [4, 8, 20], [0, 1, 2], {"fake": fake})
    assert a["fake"].to_json() == b["fake"].to_json()
    assert sorted(set(calls)) == [(n, s) for n in (4, 8, 20) for s in (0, 1, 2)]
    assert a["fake"].means() == pytest.approx({4: 0.041, 8: 0.081, 20: 0.201})


def test_data_efficiency_reports_failure_coordinates():
    def boom(tr, va, seed):
        if len(tr) == 8 and seed == 1:
            raise ValueError("diverged")
        return 0.5

    with pytest.raises(RuntimeError, match="size 8, seed 1"):
        data_efficiency_run(balanced(20), balanced(6), [4, 8], [0, 1], {"boom": boom})
    with pytest.raises(ValueError):
        data_efficiency_run(balanced(20), balanced(6), [8, 4], [0], {"boom": boom})


def test_real_trainers_run_on_tiny_image_task():
    spec = ImageTaskSpec(label_rule="planted", count_range=(0, 3), n_train=16, n_val=16, out_size=(16, 16), seed=2)
    splits = generate_image_task(spec)
    tb = image_toolbox(spec)
    cfg = TrainConfig(batch_size=8, checkpoint_metric="accuracy")
    trainers = {
        "tbm": tbm_trainer(tb.channels_per_tool, (4, 4), cfg, steps=2, min_epochs=1),
        "pixel": pixel_trainer((4, 4), cfg, steps=2, min_epochs=1),
    }
    curves = data_efficiency_run(splits["train"], splits["val"], [4, 8], [0], trainers)
    for c in curves.values():
        assert [p["n"] for p in c.points] == [4, 8]
        assert all(0 <= p["mean"] <= 1 and p["ci95"] is None for p in c.points)


# ---- outputs


def test_plots_and_json(tmp_path, copy_val):
    report = tool_importance(ChannelReader(0), copy_val, discrete_toolbox(3))
    stats_ = selection_frequency(np.array([[1, 0, 1], [0, 1, 1]]))
    curve = DataEfficiencyCurve("tbm", [{"n": 4, "values": [0.5, 0.6], "mean": 0.55, "ci95": 0.6}])
    paths = [
        plot_importance(report, tmp_path / "imp.png", {"z1": 0.5, "z2": 0.5, "z3": 1.0}),
        plot_curves({"tbm": curve}, tmp_path / "curves.png"),
        plot_sweep({0.0: 0.2, 1.0: 1.0}, tmp_path / "sweep.png"),
        plot_combinations(stats_, ["z1", "z2", "z3"], tmp_path / "combos.png"),
    ]
    for p in paths:
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    out = write_json(tmp_path / "sub" / "x.json", {"a": np.float32(0.5), "b": np.arange(2)})
    assert json.loads(out.read_text()) == {"a": 0.5, "b": [0, 1]}
