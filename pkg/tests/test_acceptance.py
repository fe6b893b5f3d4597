"""Acceptance criteria 1-9. Each test prints one ``criterion N: PASS|FAIL`` line.

Criteria 4-9 share one benchmark: 5 seeds of the default 24-volume 32^3 config.
Per seed, the base learners and pseudo-labels are computed once and reused by an
only-training-data run and a transductive run (both PL supervision, NN-fit on).
"""

import itertools
import shutil
import statistics
import time
from dataclasses import replace

import numpy as np
import pytest

from oracles import dice_oracle, rand_pair_oracle, surface_metrics_oracle
from test_autodiff import FD_TOL, gradcheck, leaf
from stackseg import autodiff as ad
from stackseg.config import parse_config
from stackseg.ensemble import (
    MetaLearner, MetaSample, MetaSchedule, audit_nn_step, build_samples, read_log, random_fit, replay_draws,
    SupervisionSource, SETTING_SPLITS, segment,
)
from stackseg.learners import pseudolabel_set
from stackseg.metrics import adb, dice, hausdorff, overall_score, rand_fscore
from stackseg.nets import ArchSpec
from stackseg.pipeline import Run, read_eval_csv
from stackseg.volume import LabelVolume, ProbVolume

SEEDS = (0, 1, 2, 3, 4)
BUDGET_S = 30 * 60


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1-3: arithmetic and oracles

def test_criterion_1_score_formula(capsys):
    dvn = overall_score({1: (0.821, 0.964, 7.294), 2: (0.931, 0.938, 9.533)})
    b3d = overall_score({1: (0.809, 0.785, 4.121), 2: (0.937, 0.799, 6.285)})
    ok = abs(dvn + 0.161) <= 0.001 and abs(b3d - 0.13) <= 0.005
    report(capsys, 1, ok, f"DenseVoxNet row {dvn:.4f} (want -0.161), 3D base row {b3d:.4f} (want 0.13)")


def test_criterion_2_metric_oracles(capsys):
    rng = np.random.default_rng(2024)
    worst_sd, n_dice, n_rand, n_surf = 0.0, 0, 0, 0
    bad = []
    for k in range(100):
        dims = tuple(int(d) for d in rng.integers(2, 9, 3))
        c = int(rng.integers(2, 4))
        sp = tuple(rng.uniform(0.5, 2.0, 3))
        # coherent blobs with noise, so surfaces are neither empty nor trivial
        coarse = [rng.integers(0, c, tuple((d + 1) // 2 for d in dims)) for _ in range(2)]
        a, b = (np.where(rng.random(dims) < 0.2, rng.integers(0, c, dims),
                         np.kron(x, np.ones((2, 2, 2), int))[: dims[0], : dims[1], : dims[2]]) for x in coarse)
        la, lb = LabelVolume(a, c, sp), LabelVolume(b, c, sp)
        for cls in range(c):
            n_dice += 1
            if dice(la, lb, cls) != dice_oracle(a, b, cls):
                bad.append(("dice", k, cls))
            if (a == cls).any() and (b == cls).any():
                n_surf += 1
                ref_adb, ref_hd = surface_metrics_oracle(a, b, cls, sp)
                err = max(abs(adb(la, lb, cls) - ref_adb), abs(hausdorff(la, lb, cls) - ref_hd))
                worst_sd = max(worst_sd, err)
        for excl in (True, False):
            n_rand += 1
            if rand_fscore(a, b, excl) != rand_pair_oracle(a, b, excl):
                bad.append(("rand", k, excl))
    ok = not bad and worst_sd < 1e-9
    report(capsys, 2, ok, f"100 volumes: {n_dice} Dice, {n_rand} Rand exact; {n_surf} surface pairs, "
                          f"max |err| {worst_sd:.2e} mm; mismatches {bad[:3]}")


def _ops():
    def conv2d(rng, c_in, c_out, seed):
        stride, pad = (1, "same") if seed % 2 else (2, "valid")
        return (lambda x, w: ad.conv2d(x, w, stride, pad)), [leaf(rng, (c_in, 2, 6, 5)), leaf(rng, (c_out, c_in, 3, 3))]

    def relu(rng):
        x = leaf(rng, (3, 4))
        x.data[np.abs(x.data) < 1e-3] += 0.01
        return ad.relu, [x]

    def soft_ce(rng):
        p = rng.random((3, 5))
        p /= p.sum(axis=0)
        return (lambda u: ad.softmax_cross_entropy(u, p, reduction="sum")), [leaf(rng, (3, 5))]

    def hard_ce(rng):
        t = rng.integers(0, 3, (2, 4))
        return (lambda u: ad.softmax_cross_entropy(u, t)), [leaf(rng, (3, 2, 4), 2.0)]

    return {
        "conv2d (im2col route)": lambda rng, s: conv2d(rng, 2, 4, s),
        "conv2d (per-channel route)": lambda rng, s: conv2d(rng, 4, 2, s),
        "conv3d": lambda rng, s: (ad.conv3d, [leaf(rng, (2, 1, 4, 5, 3)), leaf(rng, (3, 2, 3, 3, 3))]),
        "relu": lambda rng, s: relu(rng),
        "concat": lambda rng, s: ((lambda u, v: ad.concat([u, v], axis=1)), [leaf(rng, (2, 3)), leaf(rng, (2, 5))]),
        "add": lambda rng, s: (ad.add, [leaf(rng, (3, 2)), leaf(rng, (3, 2))]),
        "channel_affine": lambda rng, s: (ad.channel_affine, [leaf(rng, (3, 2, 4)), leaf(rng, (3,)), leaf(rng, (3,))]),
        "scale+total": lambda rng, s: ((lambda t: ad.total(ad.scale(t, 0.3))), [leaf(rng, (4, 3))]),
        "cross-entropy (hard)": lambda rng, s: hard_ce(rng),
        "cross-entropy (soft, sum)": lambda rng, s: soft_ce(rng),
    }


def test_criterion_3_gradchecks(capsys):
    worst = {}
    for name, make in _ops().items():
        w = 0.0
        for seed in range(20):
            rng = np.random.default_rng([3, seed])
            fn, inputs = make(rng, seed)
            w = max(w, gradcheck(fn, inputs, rng))
        worst[name] = w
    top = max(worst, key=worst.get)
    ok = all(v < FD_TOL for v in worst.values())
    report(capsys, 3, ok, f"{len(worst)} ops x 20 seeds, worst rel err {worst[top]:.2e} ({top})")


# ---------------------------------------------------------------- 4: random-fit draws

def test_criterion_4_random_fit_draws(capsys, tmp_path):
    rng = np.random.default_rng(4)
    dims = (3, 3, 3)
    samples = []
    for i in range(3):
        mem = {}
        for lid in ("xy2d", "xz2d", "yz2d", "vol3d"):
            p = rng.random((3,) + dims) + 1e-3
            mem[lid] = ProbVolume(p / p.sum(axis=0))
        pls = pseudolabel_set(f"i{i}", mem)
        samples.append(MetaSample(f"i{i}", rng.standard_normal(dims), pls.summary,
                                  tuple(pls.hard(j).labels for j in range(4))))
    tiny = ArchSpec(stem_channels=3, stem_kernel=3, growth=2, block_convs=1, n_blocks=1)
    sched = MetaSchedule(random_iters=1000, nn_iters=0, batch=10, patch=3, seed=4)
    random_fit(MetaLearner(3, 3, tiny), samples, sched, log_path=tmp_path / "log.jsonl")
    log = read_log(tmp_path / "log.jsonl")
    counts = np.bincount([r["q"] for r in log], minlength=4).tolist()
    drawn, logged = replay_draws(log, samples, sched, "random")
    ok = len(log) == 10_000 and all(abs(n - 2500) <= 150 for n in counts) and drawn == logged
    report(capsys, 4, ok, f"{len(log)} draws, counts per learner {counts}, replay "
                          f"{'identical' if drawn == logged else 'DIFFERS'}")


# ---------------------------------------------------------------- 5-9: the benchmark

def bench_config(seed, setting, out):
    # default config: 24 volumes of 32^3, PL supervision, random-fit then NN-fit
    return parse_config(f"[meta]\nsetting = {setting}\nsnapshots = true\n", seed=seed, out=str(out))


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    runs, timing = {}, {"shared": 0.0, "only_training_data": 0.0, "transductive": 0.0}
    for seed in SEEDS:
        only = Run(bench_config(seed, "only_training_data", root / f"only{seed}"))
        t0 = time.perf_counter()
        only.run("predict")
        timing["shared"] += time.perf_counter() - t0
        trans_dir = root / f"trans{seed}"
        shutil.copytree(only.root, trans_dir)
        trans = Run(bench_config(seed, "transductive", trans_dir))
        for setting, r in (("only_training_data", only), ("transductive", trans)):
            t0 = time.perf_counter()
            ran = r.run()
            timing[setting] += time.perf_counter() - t0
            assert ran[0] == "train-meta", ran  # upstream artifacts were reused
            runs[setting, seed] = r
    return runs, timing


def fg_dice(res):
    return float(np.mean([d for c, (d, _, _) in res["classes"].items() if c > 0]))


def test_criterion_5_nn_fit_audit(capsys, bench):
    runs, _ = bench
    t0 = time.perf_counter()
    steps = mismatches = 0
    for r in runs.values():
        samples = _samples_of(r)
        mc = r.cfg.meta
        sched = MetaSchedule(mc.random_iters, mc.nn_iters, mc.batch, mc.base_lr, mc.nn_lr, patch=mc.patch,
                             seed=r.cfg.run.seed)
        log = [rec for rec in read_log(r.path("meta", "train_log.jsonl")) if rec["phase"] == "nn"]
        for step, recs in itertools.groupby(log, key=lambda rec: rec["step"]):
            recs = list(recs)
            snap = r.path("meta", "snapshots", f"nn_{step:06d}.ckpt")
            for logged, again, _ in audit_nn_step(snap, samples, recs, sched):
                mismatches += logged != again
            steps += 1
    took = time.perf_counter() - t0
    ok = steps == sum(r.cfg.meta.nn_iters for r in runs.values()) and mismatches == 0 and took < 300
    report(capsys, 5, ok, f"{steps} NN-fit steps over {len(runs)} runs, {mismatches} q-hat mismatches, {took:.0f} s")


def _samples_of(r):
    mc = r.cfg.meta
    images = r.images(SETTING_SPLITS[mc.setting])
    pls = r.pseudolabels(list(images))
    return build_samples(list(images.items()), pls, SupervisionSource(mc.supervision), r.ground_truth(),
                         r.splits(), soft=mc.soft_targets)


def test_criterion_6_ensemble_benefit(capsys, bench):
    runs, timing = bench
    rows, wins = [], 0
    for seed in SEEDS:
        r = runs["only_training_data", seed]
        meta = fg_dice(read_eval_csv(r.path("eval", "meta.csv")))
        avg = fg_dice(read_eval_csv(r.path("eval", "average.csv")))
        wins += meta >= avg
        rows.append(f"s{seed} {meta:.4f}/{avg:.4f}")
    spent = timing["shared"] + timing["only_training_data"]
    # the transductive runs are reported for reference only; the criterion is the only-training run
    trans_wins = sum(fg_dice(read_eval_csv(runs["transductive", s].path("eval", "meta.csv")))
                     >= fg_dice(read_eval_csv(runs["transductive", s].path("eval", "average.csv"))) for s in SEEDS)
    ok = wins >= 4 and spent <= BUDGET_S
    report(capsys, 6, ok, f"meta >= average Dice on {wins}/5 seeds [{', '.join(rows)}], {spent / 60:.1f} min "
                          f"(transductive runs: {trans_wins}/5)")


def test_criterion_7_nn_fit_contribution(capsys, bench):
    runs, _ = bench
    nn = [read_eval_csv(runs["only_training_data", s].path("eval", "meta.csv"))["score"] for s in SEEDS]
    rf = [read_eval_csv(runs["only_training_data", s].path("eval", "meta_rf.csv"))["score"] for s in SEEDS]
    ok = statistics.median(nn) >= statistics.median(rf)
    report(capsys, 7, ok, f"median score random+NN {statistics.median(nn):.4f} vs random only "
                          f"{statistics.median(rf):.4f}")


def test_criterion_8_transductive(capsys, bench):
    runs, timing = bench
    trans = [read_eval_csv(runs["transductive", s].path("eval", "meta.csv"))["score"] for s in SEEDS]
    only = [read_eval_csv(runs["only_training_data", s].path("eval", "meta.csv"))["score"] for s in SEEDS]
    test_reads = 0
    for s in SEEDS:
        r = runs["transductive", s]
        for stage in ("train-base", "train-meta"):
            rows = r.path("audit", f"{stage}.tsv").read_text().splitlines()[1:]
            test_reads += sum(row.split("\t")[1] != "train_labeled" for row in rows)
    spent = timing["shared"] + timing["transductive"]
    ok = statistics.median(trans) >= statistics.median(only) and test_reads == 0 and spent <= BUDGET_S
    report(capsys, 8, ok, f"median score transductive {statistics.median(trans):.4f} vs only-training "
                          f"{statistics.median(only):.4f}; test GT reads before evaluation: {test_reads}; "
                          f"{spent / 60:.1f} min")


def test_criterion_9_determinism(capsys, bench, tmp_path):
    runs, _ = bench
    r = runs["only_training_data", SEEDS[0]]
    again = Run(replace(r.cfg, run=replace(r.cfg.run, out=str(tmp_path / "again"))))
    again.run()
    names = sorted(p.name for p in r.path("eval").glob("*.csv"))
    same = [n for n in names if r.path("eval", n).read_bytes() == again.path("eval", n).read_bytes()]
    ok = names and same == names
    report(capsys, 9, ok, f"{len(same)}/{len(names)} metric CSVs byte-identical on rerun (seed {SEEDS[0]})")


# ---------------------------------------------------------------- further benchmark properties

def test_random_fit_loss_trend(bench):
    runs, _ = bench
    for r in runs.values():
        steps = {}
        for rec in read_log(r.path("meta", "train_log.jsonl")):
            if rec["phase"] == "random":
                steps[rec["step"]] = rec["loss"]
        trace = [steps[k] for k in sorted(steps)]
        assert len(trace) >= 400
        assert np.mean(trace[-200:]) <= np.mean(trace[:200])


def test_random_fit_respects_agreement(bench):
    # where every base learner agrees, the random-fit meta-learner should too
    runs, _ = bench
    for seed in SEEDS:
        r = runs["only_training_data", seed]
        h = MetaLearner.load(r.path("meta", "meta_rf.ckpt"))
        test = [rec[0] for rec in r.records() if rec[3] == "test"]
        pls = r.pseudolabels(test)
        agree = match = 0
        for item_id in test:
            hards = np.stack([pls[item_id].hard(j).labels for j in range(pls[item_id].m)])
            mask = np.all(hards == hards[0], axis=0)
            pred = segment(h, r.image(item_id), pls[item_id].summary).labels
            agree += int(mask.sum())
            match += int((pred[mask] == hards[0][mask]).sum())
        assert match >= 0.99 * agree, (seed, match / agree)
