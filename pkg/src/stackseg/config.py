"""Experiment configuration: sectioned ``key = value`` files plus the ablation presets."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace

from .ensemble import SETTINGS, SUPERVISION_MODES
from .errors import ConfigError
from .learners import LEARNER_IDS

# Ablation rows: inputs, supervision of labeled items, transduction, NN-fit on/off.
PRESETS = {
    "S1": dict(use_image=False, supervision="GT", setting="only_training_data", nn_fit=False),
    "S2": dict(use_image=True, supervision="GT", setting="only_training_data", nn_fit=False),
    "S3": dict(use_image=True, supervision="GT", setting="transductive", nn_fit=False),
    "S4": dict(use_image=True, supervision="GT+PL", setting="transductive", nn_fit=False),
    "S5": dict(use_image=True, supervision="GT+PL", setting="transductive", nn_fit=True),
    "S6": dict(use_image=True, supervision="PL", setting="only_training_data", nn_fit=False),
    "S7": dict(use_image=True, supervision="PL", setting="only_training_data", nn_fit=True),
    "S8": dict(use_image=True, supervision="PL", setting="transductive", nn_fit=False),
    "S9": dict(use_image=True, supervision="PL", setting="transductive", nn_fit=True),
}


@dataclass(frozen=True)
class DataConfig:
    dims: tuple = (32, 32, 32)
    num_classes: int = 3
    n_items: int = 24
    split: tuple = (0.5, 0.0, 0.5)  # labeled, unlabeled, test
    sphere_count: tuple = (2, 4)
    sphere_radius: tuple = (3.0, 6.0)
    tube_count: tuple = (1, 3)
    tube_radius: tuple = (1.5, 2.5)
    tube_orientation: str = "mixed"
    noise_sigma: float = 0.5
    intensity_means: tuple = (0.0, 1.0, 2.0)
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int | None = None  # defaults to the run seed


@dataclass(frozen=True)
class LearnerConfig:
    enabled: tuple = LEARNER_IDS
    iterations: int = 600
    base_lr: float = 2e-3
    batch_2d: int = 4
    batch_3d: int = 2
    patch: int = 16
    augment: bool = True
    init: str = "he"
    tile_patch: int = 32
    tile_stride: int = 16


@dataclass(frozen=True)
class MetaConfig:
    preset: str = ""
    reduction: str = "average"
    supervision: str = "PL"
    setting: str = "only_training_data"
    use_image: bool = True
    aux_head: bool = False
    aux_weight: float = 0.3
    soft_targets: bool = False
    random_iters: int = 600
    nn_iters: int = 40
    batch: int = 2
    base_lr: float = 2e-3
    nn_lr: float = 1e-4
    patch: int = 16
    block_convs: int = 2  # convs per dense block of the meta network
    snapshots: bool = False  # save parameters before every NN-fit step


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"


@dataclass(frozen=True)
class EvalConfig:
    rand: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    learners: LearnerConfig = field(default_factory=LearnerConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    run: RunConfig = field(default_factory=RunConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def data_seed(self) -> int:
        return self.run.seed if self.data.seed is None else self.data.seed

    def validate(self) -> "ExperimentConfig":
        m = self.meta
        if m.preset and m.preset not in PRESETS:
            raise ConfigError(f"unknown preset {m.preset!r}; expected one of {', '.join(PRESETS)}")
        if m.supervision not in SUPERVISION_MODES:
            raise ConfigError(f"meta.supervision must be one of {SUPERVISION_MODES}")
        if m.setting not in SETTINGS:
            raise ConfigError(f"meta.setting must be one of {SETTINGS}")
        if m.reduction not in ("average", "concat"):
            raise ConfigError("meta.reduction must be average or concat")
        bad = [lid for lid in self.learners.enabled if lid not in LEARNER_IDS]
        if bad or not self.learners.enabled:
            raise ConfigError(f"learners.enabled must be a non-empty subset of {LEARNER_IDS}")
        if len(self.data.split) != 3 or abs(sum(self.data.split) - 1.0) > 1e-9:
            raise ConfigError("data.split needs three fractions summing to 1")
        if m.setting == "semi_supervised" and self.data.split[1] <= 0:
            raise ConfigError("semi_supervised needs a nonzero unlabeled fraction in data.split")
        if m.block_convs < 1:
            raise ConfigError("meta.block_convs must be >= 1")
        if min(m.random_iters, m.nn_iters, self.learners.iterations) < 0:
            raise ConfigError("iteration budgets must be >= 0")
        if m.random_iters == 0 and m.nn_iters > 0:
            raise ConfigError("NN-fit needs a random-fit warm start (meta.random_iters > 0)")
        return self

    def section_text(self, *names) -> str:
        """Canonical text of the named sections, used for stage hashes."""
        lines = []
        for name in names:
            lines.append(f"[{name}]")
            for k, v in sorted(asdict(getattr(self, name)).items()):
                lines.append(f"{k} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def hash(self, *names) -> str:
        names = names or ("data", "learners", "meta", "run", "eval")
        return hashlib.sha256(self.section_text(*names).encode()).hexdigest()

    def to_text(self) -> str:
        return self.section_text("data", "learners", "meta", "run", "eval")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, default, key):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(p) for p in parts)
        if default is None:
            return int(raw) if raw else None
        return type(default)(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _section(cls, items: dict, name: str):
    known = {f.name: f for f in fields(cls)}
    base = cls()
    values = {}
    for k, raw in items.items():
        if k not in known:
            raise ConfigError(f"unknown key {name}.{k}")
        values[k] = _parse(raw, getattr(base, k), f"{name}.{k}")
    return replace(base, **values)


def apply_preset(meta: MetaConfig, explicit: set) -> MetaConfig:
    """Fill preset values for every meta key the file did not set explicitly."""
    if not meta.preset:
        return meta
    if meta.preset not in PRESETS:
        raise ConfigError(f"unknown preset {meta.preset!r}")
    p = dict(PRESETS[meta.preset])
    nn_on = p.pop("nn_fit")
    if not nn_on and "nn_iters" not in explicit:
        p["nn_iters"] = 0
    updates = {k: v for k, v in p.items() if k not in explicit}
    return replace(meta, **updates)


SECTIONS = {"data": DataConfig, "learners": LearnerConfig, "meta": MetaConfig, "run": RunConfig, "eval": EvalConfig}


def parse_config(text: str, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    parts = {}
    for name, cls in SECTIONS.items():
        items = dict(cp.items(name)) if cp.has_section(name) else {}
        parts[name] = _section(cls, items, name)
        if name == "meta":
            parts[name] = apply_preset(parts[name], set(items) - {"preset"})
    run = parts["run"]
    if seed is not None:
        run = replace(run, seed=int(seed))
    if out is not None:
        run = replace(run, out=str(out))
    parts["run"] = run
    return ExperimentConfig(**parts).validate()


def load_config(path=None, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    if path is None:
        return parse_config("", seed, out)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, seed, out)


def preset_config(name: str, **overrides) -> ExperimentConfig:
    """Default config with a preset applied; ``overrides`` map ``section.key`` style dicts."""
    lines = ["[meta]", f"preset = {name}"]
    return parse_config("\n".join(lines) + "\n", **overrides)
