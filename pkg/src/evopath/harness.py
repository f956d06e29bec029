"""Experiment configuration, metric files and the multi-seed runner."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deps import PreconditionError, TransferConfig, deps_transfer, finish_training, linear_transfer
from .envs import make_family
from .envs.base import FAMILIES
from .expert import ReverseCurriculumConfig, reverse_curriculum_train
from .policy import load_policy, save_policy
from .rl import Ledger, RlConfig
from .seeding import Streams

log = logging.getLogger(__name__)

METHODS = ("deps", "linear")
CSV_HEADER = ("seed", "method", "env", "sim_epochs_total", "sim_epochs_jacobian", "sim_epochs_training",
              "sim_epochs_evaluation", "train_iters", "reached_target", "wall_time_s")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    env: str
    env_config: dict = field(default_factory=dict)
    methods: tuple = METHODS
    seeds: tuple = (1, 2, 3, 4, 5)
    out: str = "runs"
    target_success: float = 0.8
    iter_budget: int = 20000
    finish_eval_episodes: int = 50
    finish_eval_every: int = 5
    workers: int = 1
    expert: str | None = None  # pre-trained expert policy file; trained per seed when unset
    transfer: TransferConfig = field(default_factory=TransferConfig)
    curriculum: ReverseCurriculumConfig = field(default_factory=ReverseCurriculumConfig)

    def __post_init__(self):
        if self.env not in FAMILIES:
            raise ConfigError(f"unknown env {self.env!r}; known: {sorted(FAMILIES)}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if not self.methods or any(m not in METHODS for m in self.methods):
            raise ConfigError(f"methods must be a nonempty subset of {METHODS}, got {self.methods}")
        if not 0 < self.target_success <= 1:
            raise ConfigError("target_success must be in (0, 1]")
        if self.iter_budget < 1 or self.workers < 1:
            raise ConfigError("iter_budget and workers must be >= 1")
        if self.finish_eval_episodes < 1 or self.finish_eval_every < 1:
            raise ConfigError("finish_eval_episodes and finish_eval_every must be >= 1")

    def family(self):
        return make_family(self.env, **self.env_config)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# key -> (section, field); section None means ExperimentConfig itself
_SECTIONS = {"transfer": TransferConfig, "rl": RlConfig, "curriculum": ReverseCurriculumConfig}


def _known_keys():
    keys = {}
    for f in dataclasses.fields(ExperimentConfig):
        if f.name not in ("env_config", "transfer", "curriculum"):
            keys[f.name] = (None, f.name)
    for f in dataclasses.fields(TransferConfig):
        if f.name != "rl":
            keys[f.name] = ("transfer", f.name)
    for f in dataclasses.fields(RlConfig):
        keys[f.name] = ("rl", f.name)
    for f in dataclasses.fields(ReverseCurriculumConfig):
        keys["curriculum." + f.name] = ("curriculum", f.name)
    return keys


def _field_type(section, name):
    cls = ExperimentConfig if section is None else _SECTIONS[section]
    default = {f.name: f for f in dataclasses.fields(cls)}[name]
    if default.default is not dataclasses.MISSING:
        return type(default.default)
    if default.default_factory is not dataclasses.MISSING:
        return type(default.default_factory())
    return str


def _parse_scalar(text: str, kind):
    if kind is bool:
        low = text.lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true or false, got {text!r}")
        return low == "true"
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _parse_value(key, section, name, text):
    if section is None and name in ("seeds", "methods"):
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(int(t) for t in items) if name == "seeds" else tuple(items)
    if section is None and name == "expert":
        return text
    kind = _field_type(section, name)
    return _parse_scalar(text, kind)


def _env_value(text):
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def _check_section(path, cls, values, lines, prefix):
    """Range-check one section, blaming the first offending key by line."""
    try:
        cls(**values)
        return
    except ValueError as exc:
        whole = exc
    for name, value in sorted(values.items(), key=lambda kv: lines.get(prefix + kv[0], 0)):
        try:
            cls(**{name: value})
        except ValueError as exc:
            where = f"{path}:{lines[prefix + name]}" if prefix + name in lines else f"{path}"
            raise ConfigError(f"{where}: {prefix}{name} = {value!r}: {exc}") from None
    raise ConfigError(f"{path}: {whole}")


def parse_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a flat ``key = value`` file. ``#`` starts a comment.

    Family parameters use an ``env.`` prefix (``env.barrier_height = 0.8``),
    expert-curriculum parameters a ``curriculum.`` prefix. ``overrides``
    (already-parsed values) win over the file.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    known = _known_keys()
    top, sections, env_config = {}, {name: {} for name in _SECTIONS}, {}
    seen = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{path}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, text = (part.strip() for part in line.split("=", 1))
        if not text:
            raise ConfigError(f"{where}: missing value for {key!r}")
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        if key.startswith("env.") and len(key) > 4:
            env_config[key[4:]] = _env_value(text)
            continue
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        section, name = known[key]
        try:
            value = _parse_value(key, section, name, text)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
        (top if section is None else sections[section])[name] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            top[key] = value
    if "env" not in top:
        raise ConfigError(f"{path}: missing required key 'env'")
    for name, cls in _SECTIONS.items():
        _check_section(path, cls, sections[name], seen, "curriculum." if name == "curriculum" else "")
    _check_section(path, lambda **kw: ExperimentConfig(**{"env": top["env"], **kw}), top, seen, "")
    rl = RlConfig(**sections["rl"])
    transfer = TransferConfig(rl=rl, **sections["transfer"])
    curriculum = ReverseCurriculumConfig(**sections["curriculum"])
    cfg = ExperimentConfig(transfer=transfer, curriculum=curriculum, env_config=env_config, **top)
    try:
        cfg.family()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg


@dataclass
class MetricsRow:
    seed: int
    method: str
    env: str
    sim_epochs_total: int
    sim_epochs_jacobian: int
    sim_epochs_training: int
    sim_epochs_evaluation: int
    train_iters: int
    reached_target: bool
    wall_time_s: float

    def __post_init__(self):
        parts = self.sim_epochs_jacobian + self.sim_epochs_training + self.sim_epochs_evaluation
        if parts != self.sim_epochs_total:
            raise ValueError(f"sim_epochs_total {self.sim_epochs_total} != sum of parts {parts}")

    def cells(self):
        return [str(self.seed), self.method, self.env, str(self.sim_epochs_total),
                str(self.sim_epochs_jacobian), str(self.sim_epochs_training), str(self.sim_epochs_evaluation),
                str(self.train_iters), "true" if self.reached_target else "false", f"{self.wall_time_s:.3f}"]


def write_metrics_csv(rows, path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for row in rows:
                writer.writerow(row.cells())
    except OSError as exc:
        raise OSError(f"{path}: {exc}") from exc


def read_metrics_csv(path) -> list[MetricsRow]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for cells in reader:
            rec = dict(zip(CSV_HEADER, cells))
            rows.append(MetricsRow(
                seed=int(rec["seed"]), method=rec["method"], env=rec["env"],
                sim_epochs_total=int(rec["sim_epochs_total"]),
                sim_epochs_jacobian=int(rec["sim_epochs_jacobian"]),
                sim_epochs_training=int(rec["sim_epochs_training"]),
                sim_epochs_evaluation=int(rec["sim_epochs_evaluation"]),
                train_iters=int(rec["train_iters"]), reached_target=rec["reached_target"] == "true",
                wall_time_s=float(rec["wall_time_s"])))
    return rows


def _dump_json(doc, path):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def train_expert(family, seed: int, curriculum: ReverseCurriculumConfig, rl: RlConfig, workers: int = 1,
                 ledger: Ledger | None = None):
    """Demo from the scripted controller, then reverse-curriculum NPG at alpha = 0."""
    from .envs.reacher import make_demo_trajectory

    demo = make_demo_trajectory(family.cfg, Streams(seed)("expert.demo"))
    policy, _, history = reverse_curriculum_train(family, demo, None, curriculum, rl, seed, ledger,
                                                  workers=workers)
    return policy, history, demo


def _expert_for_seed(cfg: ExperimentConfig, family, seed, seed_dir: Path):
    if not family.trainable:
        return None, {}
    if cfg.expert is not None:
        return load_policy(cfg.expert, obs_dim=family.obs_dim, act_dim=family.act_dim), {"source": cfg.expert}
    led = Ledger()
    policy, history, _ = train_expert(family, seed, cfg.curriculum, cfg.transfer.rl, cfg.workers, led)
    save_policy(policy, seed_dir / "expert_policy.json")
    info = {"source": "reverse_curriculum", "success": history.success,
            "final_success_rate": history.final_success_rate, "train_iters": led.train_iters,
            "sim_epochs": led.sim_epochs}
    if not history.success:
        log.warning("seed %d: expert reached only demo index %d", seed, history.furthest_index)
    return policy, info


def run_seed(cfg: ExperimentConfig, seed: int, method: str, expert, out_dir: Path) -> tuple[MetricsRow, str]:
    """One transfer run plus finishing on the target robot. Returns the row and a status."""
    family = cfg.family()
    run_dir = out_dir / f"seed_{seed}" / method
    run_dir.mkdir(parents=True, exist_ok=True)
    ledger = Ledger()
    start = time.perf_counter()
    transfer = deps_transfer if method == "deps" else linear_transfer
    try:
        policy, value_fn, record = transfer(family, expert, cfg.transfer, seed, ledger, workers=cfg.workers,
                                            iter_budget=cfg.iter_budget)
    except PreconditionError as exc:
        log.error("seed %d %s: %s", seed, method, exc)
        _dump_json({"status": "precondition_failed", "error": str(exc)}, run_dir / "path_record.json")
        row = MetricsRow(seed, method, cfg.env, ledger.total_epochs, ledger.sim_epochs["jacobian"],
                         ledger.sim_epochs["training"], ledger.sim_epochs["evaluation"], ledger.train_iters,
                         False, time.perf_counter() - start)
        return row, "failed"
    reached = False
    if record.status == "completed":
        policy, reached, _ = finish_training(policy, value_fn, family, cfg.transfer, seed, ledger,
                                             cfg.target_success, cfg.finish_eval_episodes,
                                             cfg.finish_eval_every, cfg.iter_budget, cfg.workers, record)
    wall = time.perf_counter() - start
    doc = record.to_document()
    _dump_json(doc, run_dir / "path_record.json")
    if policy is not None:
        save_policy(policy, run_dir / "policy.json")
    totals = doc["totals"]
    epochs = totals["sim_epochs"]
    if totals["train_iters"] != ledger.train_iters or epochs != ledger.sim_epochs:
        raise RuntimeError("path record and ledger disagree")  # would be an accounting bug
    row = MetricsRow(seed, method, cfg.env, totals["sim_epochs_total"], epochs["jacobian"], epochs["training"],
                     epochs["evaluation"], totals["train_iters"], bool(reached), wall)
    return row, "ok" if reached else "timeout"


def _stats(values):
    values = [float(v) for v in values]
    return {"mean": statistics.fmean(values) if values else None,
            "std": statistics.stdev(values) if len(values) > 1 else None,
            "median": statistics.median(values) if values else None}


def summarize(rows) -> dict:
    """Per-method mean, sample std (n - 1) and median over seeds."""
    out = {}
    for method in sorted({r.method for r in rows}):
        mine = [r for r in rows if r.method == method]
        out[method] = {"seeds": [r.seed for r in mine],
                       "reached": sum(r.reached_target for r in mine),
                       "train_iters": _stats([r.train_iters for r in mine]),
                       "sim_epochs_total": _stats([r.sim_epochs_total for r in mine]),
                       "sim_epochs_jacobian": _stats([r.sim_epochs_jacobian for r in mine]),
                       "sim_epochs_training": _stats([r.sim_epochs_training for r in mine]),
                       "sim_epochs_evaluation": _stats([r.sim_epochs_evaluation for r in mine])}
    return out


@dataclass
class ExperimentResult:
    rows: list
    statuses: dict  # (seed, method) -> "ok" | "timeout" | "failed"
    summary: dict
    out_dir: Path

    @property
    def exit_code(self) -> int:
        values = set(self.statuses.values())
        if "failed" in values:
            return 1
        return 3 if "timeout" in values else 0


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(cfg.to_dict(), out_dir / "config.json")
    family = cfg.family()
    rows, statuses, experts = [], {}, {}
    for seed in cfg.seeds:
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        expert, info = _expert_for_seed(cfg, family, seed, seed_dir)
        experts[str(seed)] = info
        for method in cfg.methods:
            row, status = run_seed(cfg, seed, method, expert, out_dir)
            log.info("seed %d %s: %s, %d train iters, %d sim epochs", seed, method, status,
                     row.train_iters, row.sim_epochs_total)
            rows.append(row)
            statuses[(seed, method)] = status
    write_metrics_csv(rows, out_dir / "metrics.csv")
    summary = {"env": cfg.env, "methods": summarize(rows), "experts": experts,
               "status": {f"{s}/{m}": v for (s, m), v in statuses.items()}}
    _dump_json(summary, out_dir / "summary.json")
    return ExperimentResult(rows, statuses, summary, out_dir)


def ratio_check(rows, factor: float = 0.8) -> dict:
    """Compare DEPS with the linear baseline on train iterations per seed.

    A run that never reached the target counts as the iteration budget it used.
    """
    deps = {r.seed: r for r in rows if r.method == "deps"}
    lin = {r.seed: r for r in rows if r.method == "linear"}
    seeds = sorted(set(deps) & set(lin))
    if not seeds:
        return {"seeds": [], "ok": False}
    d_med = float(np.median([deps[s].train_iters for s in seeds]))
    l_med = float(np.median([lin[s].train_iters for s in seeds]))
    worse = sum((not lin[s].reached_target) or lin[s].train_iters > deps[s].train_iters for s in seeds)
    deps_ok = all(deps[s].reached_target for s in seeds)
    return {"seeds": seeds, "deps_median": d_med, "linear_median": l_med,
            "ratio": d_med / l_med if l_med else float("inf"), "linear_worse": worse,
            "deps_all_reached": deps_ok,
            "ok": deps_ok and d_med <= factor * l_med and worse >= (len(seeds) // 2 + 1)}
