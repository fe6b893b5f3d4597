"""End-to-end experiment runner with resumable, hash-checked stages.

Run directory layout::

    config.ini              resolved configuration
    data/                   generated VVOL volumes + manifest.txt
    base/<learner>.ckpt     base-learner checkpoints (+ .loss.txt traces)
    pseudo/<item>.<learner>.vvol
    meta/                   meta_rf.ckpt, meta.ckpt, train_log.jsonl
    audit/<stage>.tsv       ground-truth reads made by each stage
    eval/<method>.csv       per-item, per-class metrics on test items
    report.md, report.csv   per-method comparison
    stages/<stage>.done     stage markers holding the stage's config hash
    manifest.txt            sealed once the run is complete
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import shutil
from pathlib import Path

import numpy as np

from .config import PRESETS, ExperimentConfig, load_config
from .ensemble import (
    SETTING_SPLITS,
    GroundTruthStore,
    MetaLearner,
    MetaSchedule,
    SupervisionSource,
    average_ensemble,
    build_samples,
    nn_fit,
    random_fit,
    segment,
)
from .errors import ConfigError, EmptySurface, IncompleteRun, StageError
from .learners import LEARNER_IDS, BaseLearner, default_schedule, pseudolabel_set, predict, train_base
from .metrics import connected_components, dice, overall_score, rand_fscore, surface_distances
from .nets import ArchSpec
from .synthgen import SynthSpec, generate, read_manifest, split, write_dataset
from .volume import argmax_labels, normalize, read_vvol, write_vvol

STAGES = ("generate", "train-base", "predict", "train-meta", "evaluate", "report")
_STAGE_SECTIONS = {
    "generate": ("data",),
    "train-base": ("data", "learners"),
    "predict": ("data", "learners"),
    "train-meta": ("data", "learners", "meta"),
    "evaluate": ("data", "learners", "meta", "eval"),
    "report": ("data", "learners", "meta", "eval"),
}
MANIFEST_TAG = "# stackseg run manifest v1"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    def __init__(self, cfg: ExperimentConfig, out=None):
        self.cfg = cfg
        self.root = Path(out if out is not None else cfg.run.out)
        self._gt = None

    # -- paths
    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def learners(self):
        return tuple(lid for lid in LEARNER_IDS if lid in self.cfg.learners.enabled)

    def stage_hash(self, stage: str) -> str:
        text = self.cfg.section_text(*_STAGE_SECTIONS[stage]) + f"seed = {self.cfg.run.seed}\n"
        return hashlib.sha256(text.encode()).hexdigest()

    # -- data access
    def records(self):
        return read_manifest(self.path("data", "manifest.txt"))

    def splits(self) -> dict:
        return {r[0]: r[3] for r in self.records()}

    def image(self, item_id):
        rec = {r[0]: r for r in self.records()}[item_id]
        return normalize(read_vvol(self.path("data", rec[1])))

    def images(self, splits=None) -> dict:
        return {r[0]: normalize(read_vvol(self.path("data", r[1])))
                for r in self.records() if splits is None or r[3] in splits}

    def ground_truth(self) -> GroundTruthStore:
        if self._gt is None:
            recs = {r[0]: r for r in self.records()}
            c = self.cfg.data.num_classes
            self._gt = GroundTruthStore(None, {k: r[3] for k, r in recs.items()},
                                        loader=lambda i: read_vvol(self.path("data", recs[i][2]), c))
        return self._gt

    def pseudolabels(self, item_ids):
        out = {}
        c = self.cfg.data.num_classes
        for item_id in item_ids:
            named = {lid: read_vvol(self.path("pseudo", f"{item_id}.{lid}.vvol"), c) for lid in self.learners}
            out[item_id] = pseudolabel_set(item_id, named, self.cfg.meta.reduction)
        return out

    # -- stage bookkeeping
    def _outputs(self, stage):
        if stage == "generate":
            return [self.path("data", "manifest.txt")]
        if stage == "train-base":
            return [self.path("base", f"{lid}.ckpt") for lid in self.learners]
        if stage == "predict":
            if not self.path("data", "manifest.txt").exists():
                return [self.path("data", "manifest.txt")]
            return [self.path("pseudo", f"{r[0]}.{lid}.vvol") for r in self.records() for lid in self.learners]
        if stage == "train-meta":
            return [self.path("meta", "meta.ckpt")]
        if stage == "evaluate":
            return [self.path("eval", f"{m}.csv") for m in self.methods()]
        return [self.path("report.md"), self.path("report.csv")]

    def methods(self):
        out = list(self.learners) + ["average"]
        if self.cfg.meta.nn_iters > 0:
            out.append("meta_rf")
        return out + ["meta"]

    def is_done(self, stage) -> bool:
        marker = self.path("stages", f"{stage}.done")
        if not marker.exists() or marker.read_text().strip() != self.stage_hash(stage):
            return False
        return all(p.exists() for p in self._outputs(stage))

    def _mark(self, stage):
        self.path("stages").mkdir(parents=True, exist_ok=True)
        self.path("stages", f"{stage}.done").write_text(self.stage_hash(stage) + "\n")

    def _invalidate_from(self, stage):
        for s in STAGES[STAGES.index(stage):]:
            self.path("stages", f"{s}.done").unlink(missing_ok=True)
        self.path("manifest.txt").unlink(missing_ok=True)

    def _write_audit(self, stage, start):
        self.path("audit").mkdir(parents=True, exist_ok=True)
        rows = self.ground_truth().reads[start:]
        lines = ["item\tsplit\tcontext"] + ["\t".join(r) for r in rows]
        self.path("audit", f"{stage}.tsv").write_text("\n".join(lines) + "\n")

    # -- stages
    def _generate(self):
        d = self.cfg.data
        spec = SynthSpec(tuple(d.dims), d.num_classes, tuple(d.sphere_count), tuple(d.sphere_radius),
                         tuple(d.tube_count), tuple(d.tube_radius), d.tube_orientation, d.noise_sigma,
                         tuple(d.intensity_means), tuple(d.spacing), self.cfg.data_seed)
        ds = split(generate(spec, d.n_items), tuple(d.split), seed=self.cfg.data_seed)
        if self.path("data").exists():
            shutil.rmtree(self.path("data"))
        write_dataset(ds, self.path("data"))

    def _train_base(self):
        lc = self.cfg.learners
        gt = self.ground_truth()
        start = len(gt.reads)
        labeled = [r[0] for r in self.records() if r[3] == "train_labeled"]
        imgs = [self.image(i) for i in labeled]
        labs = [gt.read(i, "train-base") for i in labeled]
        self.path("base").mkdir(parents=True, exist_ok=True)
        for lid in self.learners:
            bl = BaseLearner(lid, self.cfg.data.num_classes, ArchSpec(init=lc.init), self.cfg.run.seed,
                             tile_patch=lc.tile_patch, tile_stride=lc.tile_stride)
            sched = default_schedule(lid, iterations=lc.iterations, base_lr=lc.base_lr,
                                     batch=lc.batch_3d if lid == "vol3d" else lc.batch_2d,
                                     patch=lc.patch, augment=lc.augment, seed=self.cfg.run.seed)
            train_base(bl, imgs, labs, sched)
            bl.save(self.path("base", f"{lid}.ckpt"))
            self.path("base", f"{lid}.loss.txt").write_text("".join(_fmt(x) + "\n" for x in bl.loss_trace))
        self._write_audit("train-base", start)

    def _predict(self):
        self.path("pseudo").mkdir(parents=True, exist_ok=True)
        learners = [BaseLearner.load(self.path("base", f"{lid}.ckpt")) for lid in self.learners]
        for item_id, vol in self.images().items():
            for bl in learners:
                write_vvol(self.path("pseudo", f"{item_id}.{bl.id}.vvol"), predict(bl, vol))

    def _train_meta(self):
        mc = self.cfg.meta
        gt = self.ground_truth()
        start = len(gt.reads)
        splits = self.splits()
        images = self.images(SETTING_SPLITS[mc.setting])
        pls = self.pseudolabels(list(images))
        samples = build_samples(list(images.items()), pls, SupervisionSource(mc.supervision), gt, splits,
                                soft=mc.soft_targets)
        c = self.cfg.data.num_classes
        channels = c if mc.reduction == "average" else c * len(self.learners)
        lc = self.cfg.learners
        h = MetaLearner(channels, c, ArchSpec(init=lc.init, block_convs=mc.block_convs), self.cfg.run.seed, mc.use_image, mc.aux_head,
                        mc.aux_weight, tile_patch=lc.tile_patch, tile_stride=lc.tile_stride)
        sched = MetaSchedule(mc.random_iters, mc.nn_iters, mc.batch, mc.base_lr, mc.nn_lr, patch=mc.patch,
                             seed=self.cfg.run.seed)
        meta = self.path("meta")
        if meta.exists():
            shutil.rmtree(meta)
        meta.mkdir(parents=True)
        log = meta / "train_log.jsonl"
        random_fit(h, samples, sched, log_path=log)
        h.save(meta / "meta_rf.ckpt")
        if mc.nn_iters > 0:
            nn_fit(h, samples, sched, log_path=log, snapshot_dir=(meta / "snapshots") if mc.snapshots else None)
        h.save(meta / "meta.ckpt")
        self._write_audit("train-meta", start)

    def _evaluate(self):
        gt = self.ground_truth()
        start = len(gt.reads)
        test = [r[0] for r in self.records() if r[3] == "test"]
        if not test:
            raise IncompleteRun("no test items to evaluate")
        pls = self.pseudolabels(test)
        nets = {"meta": MetaLearner.load(self.path("meta", "meta.ckpt"))}
        if "meta_rf" in self.methods():
            nets["meta_rf"] = MetaLearner.load(self.path("meta", "meta_rf.ckpt"))
        rows = {m: [] for m in self.methods()}
        for item_id in test:
            truth = gt.read(item_id, "evaluate")
            vol = self.image(item_id)
            preds = {lid: pls[item_id].hard(j) for j, lid in enumerate(pls[item_id].learner_ids)}
            preds["average"] = argmax_labels(average_ensemble(pls[item_id]))
            for name, h in nets.items():
                preds[name] = segment(h, vol, pls[item_id].summary)
            for m in self.methods():
                rows[m].append((item_id, score_item(preds[m], truth, self.cfg.eval.rand)))
        self.path("eval").mkdir(parents=True, exist_ok=True)
        for m, items in rows.items():
            self.path("eval", f"{m}.csv").write_text(metrics_csv(items, self.cfg.eval.rand))
        self._write_audit("evaluate", start)

    def _report(self):
        table = [(m, read_eval_csv(self.path("eval", f"{m}.csv"))) for m in self.methods()]
        md, csv_text = render_table(table, self.cfg.data.num_classes)
        self.path("report.md").write_text(md)
        self.path("report.csv").write_text(csv_text)

    _RUNNERS = {
        "generate": _generate, "train-base": _train_base, "predict": _predict,
        "train-meta": _train_meta, "evaluate": _evaluate, "report": _report,
    }

    # -- driving
    def prepare(self):
        self.root.mkdir(parents=True, exist_ok=True)
        self._check_seal()
        self.path("config.ini").write_text(self.cfg.to_text())

    def _check_seal(self):
        man = self.path("manifest.txt")
        if not man.exists():
            return
        fields = parse_manifest(man)
        if fields.get("config_hash") != self.cfg.hash("data", "learners", "meta", "eval") \
                or fields.get("seed") != str(self.cfg.run.seed):
            raise ConfigError(f"{self.root} is a sealed run for a different config; use a fresh --out")
        for rel, digest in fields["artifacts"].items():
            p = self.path(rel)
            if p.exists() and _sha256(p) != digest:
                raise ConfigError(f"sealed artifact {rel} was modified")

    def run_stage(self, stage: str, force: bool = False):
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
        self.prepare()
        for up in STAGES[:STAGES.index(stage)]:
            if not self.is_done(up):
                raise StageError(stage, IncompleteRun(f"upstream stage {up!r} has not completed"))
        if self.is_done(stage) and not force:
            if stage == "report":
                self.seal()
            return False
        self._invalidate_from(stage)
        try:
            self._RUNNERS[stage](self)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        self._mark(stage)
        if stage == "report":
            self.seal()
        return True

    def run(self, upto: str = "report"):
        if upto not in STAGES:
            raise ConfigError(f"unknown stage {upto!r}")
        ran = []
        for stage in STAGES[:STAGES.index(upto) + 1]:
            if self.run_stage(stage):
                ran.append(stage)
        return ran

    def seal(self):
        arts = []
        for sub in ("data", "base", "pseudo", "meta", "eval"):
            for p in sorted(self.path(sub).rglob("*")) if self.path(sub).exists() else []:
                if p.is_file() and "snapshots" not in p.parts:
                    arts.append(p)
        arts += [self.path("report.md"), self.path("report.csv")]
        lines = [MANIFEST_TAG,
                 f"config_hash = {self.cfg.hash('data', 'learners', 'meta', 'eval')}",
                 f"seed = {self.cfg.run.seed}",
                 f"preset = {self.cfg.meta.preset}"]
        lines += [f"stage.{s} = {self.stage_hash(s)}" for s in STAGES]
        lines += [f"artifact {p.relative_to(self.root).as_posix()} = {_sha256(p)}" for p in arts]
        body = "\n".join(lines) + "\n"
        self.path("manifest.txt").write_text(body + f"seal = {hashlib.sha256(body.encode()).hexdigest()}\n")


def parse_manifest(path) -> dict:
    text = Path(path).read_text()
    body, _, seal_line = text.rstrip("\n").rpartition("\n")
    body += "\n"
    if not seal_line.startswith("seal = ") or seal_line[7:] != hashlib.sha256(body.encode()).hexdigest():
        raise ConfigError(f"{path}: manifest seal does not match its content")
    out = {"artifacts": {}}
    for line in body.splitlines()[1:]:
        key, _, val = line.partition(" = ")
        if key.startswith("artifact "):
            out["artifacts"][key[9:]] = val
        else:
            out[key] = val
    return out


# --- metrics files ----------------------------------------------------------------


def score_item(pred, truth, with_rand: bool = False) -> dict:
    """Per-class (dice, adb, hd). A class missing from the prediction gets the volume
    diagonal as both distances, the largest value the grid allows."""
    diag = math.sqrt(sum(((n - 1) * s) ** 2 for n, s in zip(truth.dims, truth.spacing)))
    per = {}
    for cls in range(1, truth.num_classes):
        d = dice(pred, truth, cls)
        try:
            a, h = surface_distances(pred, truth, cls)
        except EmptySurface:
            a = h = diag
        per[cls] = (d, float(a), float(h))
    out = {"classes": per}
    if with_rand:
        out["rand"] = rand_fscore(connected_components(pred), connected_components(truth))
    return out


def item_score(per: dict) -> float:
    return overall_score(per)


def metrics_csv(items, with_rand: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["item", "class", "dice", "adb_mm", "hausdorff_mm", "score"]
    if with_rand:
        head += ["rand_merge", "rand_split", "rand_f"]
    w.writerow(head)
    for item_id, res in items:
        for cls, (d, a, h) in res["classes"].items():
            w.writerow([item_id, cls, _fmt(d), _fmt(a), _fmt(h), _fmt(0.5 * d - 0.25 * a - h / 30.0)]
                       + ([""] * 3 if with_rand else []))
        row = [item_id, "all", "", "", "", _fmt(item_score(res["classes"]))]
        if with_rand:
            row += [_fmt(x) for x in res["rand"]]
        w.writerow(row)
    classes = sorted(items[0][1]["classes"]) if items else []
    for cls in classes:
        vals = np.array([res["classes"][cls] for _, res in items])
        d, a, h = vals.mean(axis=0)
        w.writerow(["mean", cls, _fmt(d), _fmt(a), _fmt(h), _fmt(0.5 * d - 0.25 * a - h / 30.0)]
                   + ([""] * 3 if with_rand else []))
    row = ["mean", "all", "", "", "", _fmt(np.mean([item_score(r["classes"]) for _, r in items]))]
    if with_rand:
        row += [_fmt(x) for x in np.mean([r["rand"] for _, r in items], axis=0)]
    w.writerow(row)
    return buf.getvalue()


def read_eval_csv(path) -> dict:
    """Summary rows of a metrics CSV: ``{cls: (dice, adb, hd)}``, ``score``, per-item scores."""
    path = Path(path)
    if not path.exists():
        raise IncompleteRun(f"missing {path.name}: stage 'evaluate' has not completed")
    out = {"classes": {}, "items": {}, "item_classes": {}}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["item"] == "mean":
                if row["class"] == "all":
                    out["score"] = float(row["score"])
                    if row.get("rand_f"):
                        out["rand"] = tuple(float(row[k]) for k in ("rand_merge", "rand_split", "rand_f"))
                else:
                    out["classes"][int(row["class"])] = tuple(float(row[k]) for k in ("dice", "adb_mm", "hausdorff_mm"))
            elif row["class"] == "all":
                out["items"][row["item"]] = float(row["score"])
            else:
                out["item_classes"].setdefault(row["item"], {})[int(row["class"])] = float(row["dice"])
    if "score" not in out:
        raise IncompleteRun(f"{path.name} has no summary row: stage 'evaluate' did not finish")
    return out


ADB_NOTE = ("ADB is the mean of the two directed mean surface distances (mm); Hausdorff is symmetric (mm); "
            "an empty predicted class surface counts as the volume diagonal.")


def render_table(rows, num_classes: int, first: str = "method"):
    """``rows`` is ``[(label, read_eval_csv result)]``. Returns (markdown, csv) text."""
    classes = list(range(1, num_classes))
    head = [first] + [f"{k}_c{c}" for c in classes for k in ("dice", "adb_mm", "hausdorff_mm")] + ["score"]
    md = [ADB_NOTE, "", "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(head)
    for label, res in rows:
        vals = [x for c in classes for x in res["classes"][c]] + [res["score"]]
        md.append("| " + " | ".join([label] + [f"{v:.4f}" for v in vals]) + " |")
        w.writerow([label] + [_fmt(v) for v in vals])
    return "\n".join(md) + "\n", buf.getvalue()


def _preset_rank(label):
    return (0, list(PRESETS).index(label)) if label in PRESETS else (1, label)


def compare_runs(run_dirs, out_dir=None, method: str = "meta"):
    """One row per run directory (its ``method`` result), presets ordered S1..S9."""
    if not run_dirs:
        raise IncompleteRun("report needs at least one run directory")
    rows = []
    num_classes = None
    for d in run_dirs:
        d = Path(d)
        cfg_path = d / "config.ini"
        if not cfg_path.exists():
            raise IncompleteRun(f"{d}: no config.ini; stage 'generate' never ran")
        cfg = load_config(cfg_path)
        num_classes = cfg.data.num_classes
        label = cfg.meta.preset or d.name
        rows.append((label, read_eval_csv(d / "eval" / f"{method}.csv")))
    rows.sort(key=lambda r: _preset_rank(r[0]))
    md, csv_text = render_table(rows, num_classes, "run")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.md").write_text(md)
        (out / "comparison.csv").write_text(csv_text)
    return md, csv_text
