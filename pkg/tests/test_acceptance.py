"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""

from __future__ import annotations

import contextlib
import io
import itertools
import json
import time
from pathlib import Path

import numpy as np
from scipy import stats as sps

from builders import (TUNER_SLICES, TUNER_TRUTH, categorical_world, fairbatch_data, frtrain_world,
                      planted_losses, scramble_slice, tuner_world, verdict)
from responsible_ml import cli
from responsible_ml import dataset as ds
from responsible_ml import fairbatch as fb
from responsible_ml import frtrain as fr
from responsible_ml import metrics, mlclean
from responsible_ml import model as mdl
from responsible_ml import slicefinder as sf
from responsible_ml import slicetuner as st


def test_c1_threshold_classifier_example():
    t0 = time.perf_counter()
    clean, poisoned = ds.make_fig2_fixture(), ds.make_poisoned_fig2_fixture()
    acc_clf = mdl.fit_threshold_max_accuracy(clean, "X")
    fair_clf = mdl.fit_threshold_fair(clean, "X", 1.0)
    pois_clf = mdl.fit_threshold_fair(poisoned, "X", 1.0)

    def stat(clf, d):
        yhat = clf.predict(d)
        return metrics.accuracy(yhat, d), metrics.demographic_parity(yhat, d)

    got = [stat(acc_clf, clean), stat(fair_clf, clean), stat(pois_clf, clean)]
    want = [(1.0, 0.5), (0.8, 1.0), (0.6, 1.0)]
    elapsed = time.perf_counter() - t0
    ok = all(abs(g[0] - w[0]) == 0 and abs(g[1] - w[1]) == 0 for g, w in zip(got, want)) and elapsed < 1
    verdict("C1 threshold-classifier example", ok, f"(acc, DP) = {got}, {elapsed:.3f}s")


def test_c2_six_record_cleaning_example():
    t0 = time.perf_counter()
    cleaned, report = mlclean.mlclean_pipeline(ds.make_table1_fixture())
    elapsed = time.perf_counter() - t0
    dropped = [r["id"] for r in report.dropped]
    merged = {m["id"]: m["weight"] for m in report.merges}
    rates = {g: metrics.weighted_positive_rate(cleaned, g) for g in ("M", "F")}
    ok = (dropped == ["e6"] and merged == {"e2+e3": 2} and "e6" not in cleaned.uids
          and rates == {"M": 0.5, "F": 0.5} and elapsed < 1)
    verdict("C2 six-record cleaning example", ok,
            f"dropped {dropped}, merged {merged}, rates {rates}, {elapsed:.3f}s")


def _grid_min(p: st.AcquisitionProblem) -> float:
    B = int(p.budget)
    d1 = np.arange(B + 1, dtype=float)
    return min(p.objective([a, B - a]) for a in d1)


def test_c3_solver_oracle():
    t0 = time.perf_counter()
    p = st.AcquisitionProblem((100, 100), (st.LearningCurve(10, 0.5), st.LearningCurve(10, 0.3)),
                              (1, 1), 100, 1.0)
    alloc = st.optimize_allocation(p)
    oracle = _grid_min(p)
    rel = abs(alloc.objective - oracle) / oracle
    sym = st.AcquisitionProblem((100, 100), (st.LearningCurve(10, 0.5),) * 2, (1, 1), 100, 1.0)
    s = st.optimize_allocation(sym)
    sym_err = max(abs(s[0] - 50), abs(s[1] - 50))
    elapsed = time.perf_counter() - t0
    ok = rel <= 0.01 and sym_err <= 1e-4 and elapsed < 10
    verdict("C3 solver oracle", ok,
            f"objective {alloc.objective:.7f} vs grid {oracle:.7f} (rel {rel:.2e}); "
            f"symmetric split {tuple(round(v, 6) for v in s)}; {elapsed:.2f}s")


def test_c4_curve_fit_recovery():
    b, a = 2.0, 0.3
    n = np.geomspace(10, 2000, 20)
    clean = st.fit_learning_curve(list(zip(n, b * n ** -a)))
    exact = abs(clean.a - a) / a <= 1e-6 and abs(clean.b - b) / b <= 1e-6
    errs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        noisy = b * n ** -a * (1 + 0.05 * rng.standard_normal(len(n)))
        errs.append(abs(st.fit_learning_curve(list(zip(n, noisy))).a - a))
    med = float(np.median(errs))
    verdict("C4 curve-fit recovery", exact and med <= 0.1,
            f"noiseless (a, b) = ({clean.a:.9f}, {clean.b:.9f}); noisy median |a err| {med:.4f}")


def test_c5_slicetuner_beats_baselines():
    t0 = time.perf_counter()
    budget, lam = 400, 1.0
    wins, rows = 0, []
    for seed in range(10):
        d, pool = tuner_world(seed)
        ev = st.PowerLawEvaluator(TUNER_TRUTH, noise=0.05, seed=seed)
        trace = st.plan_acquisition(d, TUNER_SLICES, budget, lam, st.PlannerConfig(seed=seed),
                                    st.PoolProvider(pool, TUNER_SLICES, seed), ev)
        sizes = st.slice_sizes(d, TUNER_SLICES)
        gaps = []
        for base in (st.baseline_uniform, st.baseline_waterfilling):
            alloc = base(sizes, budget).amounts
            gaps.append(st.execute_allocation(d, TUNER_SLICES, alloc, budget,
                                              st.PoolProvider(pool, TUNER_SLICES, seed), ev).gap)
        win = trace.gap <= min(gaps)
        wins += win
        rows.append(f"{trace.gap:.3f}/{gaps[0]:.3f}/{gaps[1]:.3f}")
    elapsed = time.perf_counter() - t0
    verdict("C5 slice tuner vs baselines", wins >= 7 and elapsed <= 120,
            f"{wins}/10 seeds at or below both baselines (planner/uniform/waterfill gaps: "
            f"{', '.join(rows)}); {elapsed:.1f}s")


class _Recorder:
    def __init__(self, inner):
        self.inner, self.batches = inner, []
        self.steps_per_epoch, self.needs_feedback = inner.steps_per_epoch, inner.needs_feedback

    def next_batch(self, epoch, step, feedback=None):
        b = self.inner.next_batch(epoch, step, feedback)
        self.batches.append(b.copy())
        return b


def test_c6_fairbatch():
    t0 = time.perf_counter()
    cfg = mdl.TrainConfig(lr=0.1, epochs=100, batch_size=32)
    van_disp, fb_disp, drops = [], [], []
    for seed in range(10):
        train, test = fairbatch_data(seed), fairbatch_data(seed + 500)
        c = mdl.TrainConfig(**{**cfg.__dict__, "seed": seed})
        van = mdl.train_sgd(train, c)
        fair = mdl.train_sgd(train, c, fb.make_fairbatch_sampler(train, fb.FairBatchConfig(alpha=0.005),
                                                                 seed, c.batch_size))
        rv = metrics.fairness_report(mdl.classify(van, test), test)
        rf = metrics.fairness_report(mdl.classify(fair, test), test)
        van_disp.append(rv.eo_disparity)
        fb_disp.append(rf.eo_disparity)
        drops.append(rv.accuracy - rf.accuracy)
    ratio = float(np.median(fb_disp) / np.median(van_disp))
    drop = float(np.median(drops))

    d = fairbatch_data(0)
    small = mdl.TrainConfig(epochs=5, batch_size=32)
    rec_fb = _Recorder(fb.make_fairbatch_sampler(d, fb.FairBatchConfig(alpha=0.0), 0, 32))
    rec_st = _Recorder(fb.StratifiedSampler(d, 32, 0))
    mdl.train_sgd(d, small, rec_fb)
    mdl.train_sgd(d, small, rec_st)
    identical = (len(rec_fb.batches) == len(rec_st.batches)
                 and all(np.array_equal(x, y) for x, y in zip(rec_fb.batches, rec_st.batches)))
    elapsed = time.perf_counter() - t0
    ok = ratio <= 0.5 and drop <= 0.05 and identical and elapsed <= 120
    verdict("C6 fairbatch", ok,
            f"median EO disparity {np.median(fb_disp):.4f} vs vanilla {np.median(van_disp):.4f} "
            f"(ratio {ratio:.2f}); median accuracy drop {drop:.4f}; alpha=0 batches identical: "
            f"{identical}; {elapsed:.1f}s")


def test_c7_frtrain():
    t0 = time.perf_counter()
    train, val, test, mask = frtrain_world(0)
    off = fr.FRConfig(lam_fair=0.0, lam_robust=0.0, ramp=None, epochs=10, seed=3)
    clf, _ = fr.train_frtrain(train, val, off)
    ref = mdl.train_sgd(train, off.classifier_config())
    reduction = all(np.array_equal(clf.params[k], ref.params[k]) for k in ref.names)

    lower, undominated, rows = 0, 0, []
    for seed in range(10):
        train, val, test, mask = frtrain_world(seed)
        full = fr.FRConfig(lam_fair=2.0, seed=seed)
        clf, diag = fr.train_frtrain(train, val, full, flip_mask=mask)
        flipped = np.zeros(len(train), dtype=bool)
        flipped[mask] = True
        wf, wc = diag.weights[flipped].mean(), diag.weights[~flipped].mean()
        lower += wf < wc
        fair_only, _ = fr.train_frtrain(train, val, fr.FRConfig(lam_fair=2.0, lam_robust=0.0,
                                                                ramp=None, seed=seed))
        a_fr, dp_fr = fr.evaluate_tradeoff(clf, test)
        a_fo, dp_fo = fr.evaluate_tradeoff(fair_only, test)
        dominated = a_fo >= a_fr and dp_fo >= dp_fr and (a_fo > a_fr or dp_fo > dp_fr)
        undominated += not dominated
        rows.append(f"w {wf:.2f}<{wc:.2f} ({a_fr:.3f},{dp_fr:.2f}) vs ({a_fo:.3f},{dp_fo:.2f})")
    elapsed = time.perf_counter() - t0
    ok = reduction and lower >= 8 and undominated >= 7 and elapsed <= 180
    verdict("C7 fr-train", ok,
            f"(a) reduction bit-identical: {reduction}; (b) flipped weight lower in {lower}/10; "
            f"(c) not dominated in {undominated}/10 [{'; '.join(rows)}]; {elapsed:.1f}s")


def _oracle_slices(d: ds.Dataset, losses: np.ndarray, cfg: sf.SearchConfig):
    """Enumerate every conjunction, test with scipy, correct over all candidates."""
    feats = [(f, d.spec(f).slice_values()) for f in cfg.features]
    cands = []
    for choice in itertools.product(*[[None, *vals] for _, vals in feats]):
        lits = tuple((f, v) for (f, _), v in zip(feats, choice) if v is not None)
        if not lits or len(lits) > cfg.max_literals:
            continue
        m = np.ones(len(d), dtype=bool)
        for f, v in lits:
            m &= d.slice_column(f) == v
        if m.sum() < cfg.min_size:
            continue
        x, y = losses[m], losses[~m]
        p = sps.ttest_ind(x, y, equal_var=False).pvalue
        pooled = np.sqrt((((x - x.mean()) ** 2).sum() + ((y - y.mean()) ** 2).sum()) / (len(x) + len(y) - 2))
        es = (x.mean() - y.mean()) / pooled
        cands.append((lits, p, es, m.sum() * (x.mean() - losses.mean())))
    level = cfg.alpha / len(cands)
    keep = [c for c in cands if c[2] >= cfg.effect_threshold and c[1] <= level]
    keep.sort(key=lambda c: (-c[3], len(c[0]), str(ds.SlicePredicate(c[0]))))
    return keep[:cfg.k], len(cands)


def test_c8_slicefinder():
    t0 = time.perf_counter()
    feats = ("f0", "f1", "f2")
    d = categorical_world(0)
    plants = [ds.SlicePredicate.of(f0="a", f1="b"), ds.SlicePredicate.of(f2="c")]
    loss = planted_losses(d, plants, 0, bump=0.3)
    cfg = sf.SearchConfig(features=feats, k=100)
    res = sf.lattice_search_full(d, None, cfg, loss)
    want, n_cands = _oracle_slices(d, loss, cfg)
    oracle_eq = (res.n_tested == n_cands and len(res.slices) == len(want) and len(want) > 0
                 and all(c.predicate.literals == w[0] and abs(c.p_value - w[1]) <= 1e-9 * max(1, w[1])
                         and abs(c.impact - w[3]) <= 1e-9 for c, w in zip(res.slices, want)))

    target = ds.SlicePredicate.of(f0="a", f1="b")
    top1, disjoint, counts = 0, True, []
    for seed in range(10):
        dd = scramble_slice(categorical_world(seed), target, seed)
        m = mdl.train_sgd(dd, mdl.TrainConfig(epochs=30, seed=seed))
        cfg10 = sf.SearchConfig(features=feats)
        found = sf.lattice_search(dd, m, cfg10)
        top1 += bool(found) and found[0].predicate == target
        tree = sf.decision_tree_search(dd, m, cfg10)
        masks = [c.predicate.mask(dd) for c in tree]
        disjoint &= all(not (a & b).any() for a, b in itertools.combinations(masks, 2))

        do = categorical_world(seed)
        lo = planted_losses(do, [ds.SlicePredicate.of(f0="a"), ds.SlicePredicate.of(f1="b")], seed)
        tr = sf.decision_tree_search(do, None, cfg10, lo)
        masks = [c.predicate.mask(do) for c in tr]
        disjoint &= all(not (a & b).any() for a, b in itertools.combinations(masks, 2))
        counts.append((len(sf.lattice_search(do, None, cfg10, lo)), len(tr)))
    med_l = float(np.median([c[0] for c in counts]))
    med_t = float(np.median([c[1] for c in counts]))
    elapsed = time.perf_counter() - t0
    ok = oracle_eq and top1 >= 9 and disjoint and med_l >= med_t and elapsed < 30
    verdict("C8 slice finder", ok,
            f"oracle equal: {oracle_eq} ({len(want)} slices of {n_cands} candidates); planted top-1 "
            f"{top1}/10; tree disjoint: {disjoint}; median found lattice {med_l:g} vs tree {med_t:g}; "
            f"{elapsed:.1f}s")


def _fd_check(rng) -> float:
    dim = int(rng.integers(1, 6))
    hidden = int(rng.integers(1, 5)) if rng.random() < 0.5 else None
    m = mdl.init_model(dim, hidden, str(rng.choice(["tanh", "relu"])), rng)
    m = m.with_flat(rng.normal(0, 1, m.flat().shape))
    n = int(rng.integers(1, 9))
    X = rng.normal(0, 1.5, (n, dim))
    y = rng.integers(0, 2, n)
    w = rng.uniform(0.1, 2.0, n)
    g = mdl.gradient(m, X, y, w)
    analytic = np.concatenate([g[k].ravel() for k in m.names])
    theta = m.flat()
    num = np.empty_like(theta)
    h = 1e-6
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = h
        num[i] = (mdl.loss_sum(m.with_flat(theta + e), X, y, w)
                  - mdl.loss_sum(m.with_flat(theta - e), X, y, w)) / (2 * h)
    return float(np.linalg.norm(analytic - num) / max(np.linalg.norm(analytic), np.linalg.norm(num), 1e-8))


def _run_cli(argv) -> tuple[int, str]:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main([str(a) for a in argv])
    return code, buf.getvalue()


def _cli_session(root: Path) -> dict[str, bytes]:
    root.mkdir()
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({
        "gen": {"sizes": {"a": 300, "b": 200}, "label_rates": {"a": 0.6, "b": 0.3},
                "means": {"a:0": [-1, 0], "a:1": [1, 0], "b:0": [0, -1], "b:1": [0, 1]}},
        "train": {"epochs": 5},
        "frtrain": {"epochs": 6, "ramp": [1, 4]},
        "tune": {"truth": [[1.0, 0.3], [2.0, 0.4]], "min_slice_size": 20},
        "slicefinder": {"features": ["f0", "f1", "f2"]},
    }))
    cat = categorical_world(4, n=400)
    ds.write_csv(cat, root / "cat.csv")
    (root / "cat.json").write_text(json.dumps(ds.schema_to_config(cat, "id")))
    (root / "slices.json").write_text('[{"z": "a"}, {"z": "b"}]')
    g, p, o = root / "g", root / "p", root / "o"
    commands = [
        ["gen-data", "--seed", 1, "--config", cfg, "--out", g],
        ["gen-data", "--seed", 2, "--config", cfg, "--out", root / "v"],
        ["gen-data", "--seed", 3, "--config", cfg, "--out", root / "pool"],
        ["poison", "--data", g / "data.csv", "--schema", g / "schema.json", "--rate", 0.1,
         "--seed", 1, "--out", p],
        ["train", "--data", p / "poisoned.csv", "--schema", g / "schema.json", "--seed", 1,
         "--config", cfg, "--out", o / "van"],
        ["train", "--method", "fairbatch", "--data", g / "data.csv", "--schema", g / "schema.json",
         "--seed", 1, "--config", cfg, "--out", o / "fb"],
        ["train", "--method", "frtrain", "--data", p / "poisoned.csv", "--validation",
         root / "v" / "data.csv", "--schema", g / "schema.json", "--seed", 1, "--config", cfg,
         "--out", o / "fr"],
        ["tune", "--data", root / "v" / "data.csv", "--pool", root / "pool" / "data.csv", "--schema",
         g / "schema.json", "--slices", root / "slices.json", "--budget", 100, "--seed", 1,
         "--config", cfg, "--out", o / "tune"],
        ["train", "--data", root / "cat.csv", "--schema", root / "cat.json", "--seed", 2,
         "--config", cfg, "--out", o / "cat"],
        ["find-slices", "--data", root / "cat.csv", "--schema", root / "cat.json", "--model",
         o / "cat" / "model.json", "--strategy", "both", "--config", cfg, "--out", o / "fs"],
        ["demo-fig2", "--out", o / "fig2"],
        ["demo-table1", "--out", o / "t1"],
    ]
    out = {}
    for i, argv in enumerate(commands):
        code, stdout = _run_cli(argv)
        assert code == 0, argv
        out[f"stdout{i}"] = stdout.replace(str(root), "<root>").encode()
    for f in sorted(root.rglob("*")):
        if f.is_file():
            out[str(f.relative_to(root))] = f.read_bytes()
    return out


def test_c9_numerical_hygiene(tmp_path):
    rng = np.random.default_rng(2024)
    worst = max(_fd_check(rng) for _ in range(100))
    first, second = _cli_session(tmp_path / "a"), _cli_session(tmp_path / "b")
    same = first.keys() == second.keys() and all(first[k] == second[k] for k in first)
    verdict("C9 numerical hygiene", worst <= 1e-4 and same,
            f"worst gradient relative error {worst:.2e} over 100 draws; "
            f"{len(first)} CLI artifacts byte-identical across runs: {same}")
