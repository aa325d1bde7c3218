import numpy as np
import pytest
from hypothesis import given, settings, strategies as hs

from builders import fairbatch_data
from responsible_ml import dataset as ds
from responsible_ml import fairbatch as fb
from responsible_ml import metrics
from responsible_ml import model as mdl
from responsible_ml.plotdata import emit_plot_data


def _report(acc):
    # acc[(z, y)] -> cell accuracy; other fields are irrelevant to the update
    named = {("ab"[z], y): v for (z, y), v in acc.items()}
    return metrics.FairnessReport(1.0, 0.0, 0.5, ("a", "b"), {"a": 0.5, "b": 0.5}, named)


def test_init_rates_are_empirical():
    d = fairbatch_data(0)
    r = fb.init_rates(d)
    cells = {k: len(v) for k, v in d.cells().items()}
    assert r.lam1 == cells[(0, 0)] / (cells[(0, 0)] + cells[(1, 0)])
    assert r.lam2 == cells[(0, 1)] / (cells[(0, 1)] + cells[(1, 1)])
    assert r.label0_share == (cells[(0, 0)] + cells[(1, 0)]) / len(d)


def test_update_moves_towards_worse_group():
    r = fb.SamplingRates(0.5, 0.5, 0.5)
    cfg = fb.FairBatchConfig(alpha=0.01)
    worse0 = _report({(0, 0): 0.6, (1, 0): 0.8, (0, 1): 0.9, (1, 1): 0.7})
    out = fb.update_rates(r, worse0, cfg)
    assert out.lam1 == pytest.approx(0.51) and out.lam2 == pytest.approx(0.49)
    tie = _report({(0, 0): 0.8, (1, 0): 0.8, (0, 1): 0.7, (1, 1): 0.7})
    assert fb.update_rates(r, tie, cfg) == r


def test_update_clips():
    cfg = fb.FairBatchConfig(alpha=0.3, clip=(0.1, 0.9))
    out = fb.update_rates(fb.SamplingRates(0.8, 0.2, 0.5),
                          _report({(0, 0): 0.1, (1, 0): 0.9, (0, 1): 0.9, (1, 1): 0.1}), cfg)
    assert (out.lam1, out.lam2) == (0.9, 0.1)


@settings(max_examples=200, deadline=None)
@given(l1=hs.floats(0, 1), l2=hs.floats(0, 1), p0=hs.floats(0, 1), bs=hs.integers(4, 256))
def test_cell_counts_sum_to_batch(l1, l2, p0, bs):
    c = fb.cell_counts(fb.SamplingRates(l1, l2, p0), bs)
    assert sum(c.values()) == bs and min(c.values()) >= 0
    exact = {(0, 0): bs * p0 * l1, (1, 0): bs * p0 * (1 - l1),
             (0, 1): bs * (1 - p0) * l2, (1, 1): bs * (1 - p0) * (1 - l2)}
    assert all(abs(c[k] - exact[k]) < 1 + 1e-9 for k in c)


@settings(max_examples=30, deadline=None)
@given(seed=hs.integers(0, 1000), steps=hs.integers(1, 30), alpha=hs.floats(0, 0.2))
def test_rates_stay_in_clip_range(seed, steps, alpha):
    rng = np.random.default_rng(seed)
    cfg = fb.FairBatchConfig(alpha=alpha, clip=(0.2, 0.8))
    r = fb.SamplingRates(0.5, 0.5, 0.5)
    for _ in range(steps):
        acc = {(z, y): float(rng.uniform()) for z in (0, 1) for y in (0, 1)}
        r = fb.update_rates(r, _report(acc), cfg)
        assert 0.2 <= r.lam1 <= 0.8 and 0.2 <= r.lam2 <= 0.8


def test_stratified_batches_follow_quotas():
    d = fairbatch_data(1)
    s = fb.StratifiedSampler(d, 40, seed=3)
    want = fb.cell_counts(s.rates, 40)
    b = s.next_batch(0, 0)
    z, y = d.group_index[b], d.labels[b]
    got = {(i, j): int(((z == i) & (y == j)).sum()) for i in (0, 1) for j in (0, 1)}
    assert got == want
    assert np.array_equal(b, s.next_batch(0, 0))


def test_sampler_rejects_empty_cell_and_tiny_batch():
    d = fairbatch_data(0)
    no_b_neg = d.subset([i for i, e in enumerate(d.examples) if not (e.sensitive == "b" and e.label == 0)])
    with pytest.raises(ds.DataError):
        fb.init_rates(no_b_neg)
    with pytest.raises(ValueError):
        fb.StratifiedSampler(d, 3)


def test_trajectory_one_row_per_epoch_and_plot_data():
    d = fairbatch_data(2)
    s = fb.make_fairbatch_sampler(d, fb.FairBatchConfig(alpha=0.01), seed=2)
    mdl.train_sgd(d, mdl.TrainConfig(epochs=6, seed=2), s)
    assert [row[0] for row in s.trajectory] == list(range(6))
    first, second = s.trajectory[0], s.trajectory[1]
    assert abs(second[1] - first[1]) in (0.0, pytest.approx(0.01))
    csv_text = emit_plot_data(s, "lambda-path")
    assert csv_text.splitlines()[0] == "epoch,lambda1,lambda2,disparity"
    assert len(csv_text.splitlines()) == 7


def test_dp_target_moves_in_opposite_directions():
    r = fb.SamplingRates(0.5, 0.5, 0.5)
    rep = metrics.FairnessReport(0.5, 0.0, 0.5, ("a", "b"), {"a": 0.2, "b": 0.4}, {})
    out = fb.update_rates(r, rep, fb.FairBatchConfig(target="dp", alpha=0.05))
    assert out.lam1 == pytest.approx(0.45) and out.lam2 == pytest.approx(0.55)
