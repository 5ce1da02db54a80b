"""Experiment configuration: JSON schema ``feexd-config-1`` with validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

CONFIG_VERSION = "feexd-config-1"
STRATEGIES = ("cafedistill", "local_only", "fedavg_ee", "fedper_ee", "joint_local_kd")
SCHEDULES = ("progressive", "full")
TEACHER_MODES = ("qp", "self")
SIMILARITY_SOURCES = ("params", "update")


class ConfigError(ValueError):
    def __init__(self, problems: list[tuple[str, str]]):
        self.fields = [name for name, _ in problems]
        super().__init__("invalid config: " + "; ".join(f"{n}: {msg}" for n, msg in problems))


@dataclass
class DataConfig:
    kind: str = "synthetic"
    num_classes: int = 10
    dim: int = 32
    per_class: int = 200
    class_sep: float = 3.0
    path: str | None = None
    min_per_client: int = 8


@dataclass
class ExperimentConfig:
    # desk-scale defaults; optimiser settings follow the ConvNet/CIFAR-10 setup
    n_clients: int = 20
    m_exits: int = 3
    alpha: float = 0.3
    sample_rate: float = 0.25
    rounds: int = 60
    local_epochs: int = 5
    batch: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = 0.99
    lambda_: float = 1.0
    mu: float = 0.6
    epsilon_grid: list[float] = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 10)])
    strategy: str = "cafedistill"
    hidden_dims: list[int] | None = None
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    w_renormalize: bool = True
    p_renormalize: bool = True
    eval_every: int = 10
    student_schedule: str = "progressive"
    teacher_weights: str = "qp"
    similarity_source: str = "params"
    version: str = CONFIG_VERSION

    def __post_init__(self):
        if self.hidden_dims is None and isinstance(self.m_exits, int) and self.m_exits > 0:
            self.hidden_dims = [64] * self.m_exits
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[tuple[str, str]]:
        out = []

        def need(cond, name, msg):
            if not cond:
                out.append((name, msg))

        need(self.version == CONFIG_VERSION, "version", f"expected {CONFIG_VERSION!r}")
        need(_is_int(self.n_clients) and self.n_clients >= 1, "n_clients", "must be an integer >= 1")
        need(_is_int(self.m_exits) and self.m_exits >= 2, "m_exits", "must be an integer >= 2")
        need(_is_num(self.alpha) and self.alpha > 0, "alpha", "must be > 0")
        need(_is_num(self.sample_rate) and 0 < self.sample_rate <= 1, "sample_rate", "must lie in (0, 1]")
        need(_is_int(self.rounds) and self.rounds >= 0, "rounds", "must be an integer >= 0")
        need(_is_int(self.local_epochs) and self.local_epochs >= 0, "local_epochs", "must be an integer >= 0")
        need(_is_int(self.batch) and self.batch >= 1, "batch", "must be an integer >= 1")
        need(_is_num(self.lr) and self.lr >= 0, "lr", "must be >= 0")
        need(_is_num(self.momentum) and 0 <= self.momentum < 1, "momentum", "must lie in [0, 1)")
        need(_is_num(self.weight_decay) and self.weight_decay >= 0, "weight_decay", "must be >= 0")
        need(_is_num(self.lr_decay) and 0 < self.lr_decay <= 1, "lr_decay", "must lie in (0, 1]")
        need(_is_num(self.lambda_) and self.lambda_ >= 0, "lambda", "must be >= 0")
        need(_is_num(self.mu) and self.mu > 0, "mu", "must be > 0")
        need(isinstance(self.epsilon_grid, list) and all(_is_num(e) and 0 <= e <= 1 for e in self.epsilon_grid),
             "epsilon_grid", "must be a list of thresholds in [0, 1]")
        need(self.strategy in STRATEGIES, "strategy", f"must be one of {', '.join(STRATEGIES)}")
        need(isinstance(self.hidden_dims, list) and all(_is_int(h) and h > 0 for h in self.hidden_dims)
             and len(self.hidden_dims) == self.m_exits,
             "hidden_dims", "must list one positive width per exit (length m_exits)")
        need(_is_int(self.seed), "seed", "must be an integer")
        need(isinstance(self.w_renormalize, bool), "w_renormalize", "must be a boolean")
        need(isinstance(self.p_renormalize, bool), "p_renormalize", "must be a boolean")
        need(_is_int(self.eval_every) and self.eval_every >= 1, "eval_every", "must be an integer >= 1")
        need(self.student_schedule in SCHEDULES, "student_schedule", f"must be one of {', '.join(SCHEDULES)}")
        need(self.teacher_weights in TEACHER_MODES, "teacher_weights", f"must be one of {', '.join(TEACHER_MODES)}")
        need(self.similarity_source in SIMILARITY_SOURCES, "similarity_source",
             f"must be one of {', '.join(SIMILARITY_SOURCES)}")
        d = self.data
        if not isinstance(d, DataConfig):
            out.append(("data", "must be an object"))
        else:
            need(d.kind in ("synthetic", "csv"), "data.kind", "must be 'synthetic' or 'csv'")
            if d.kind == "csv":
                need(isinstance(d.path, str) and d.path, "data.path", "csv data needs a path")
            need(_is_int(d.num_classes) and d.num_classes >= 2, "data.num_classes", "must be an integer >= 2")
            need(_is_int(d.dim) and d.dim >= 1, "data.dim", "must be an integer >= 1")
            need(_is_int(d.per_class) and d.per_class >= 1, "data.per_class", "must be an integer >= 1")
            need(_is_num(d.class_sep) and d.class_sep >= 0, "data.class_sep", "must be >= 0")
            need(_is_int(d.min_per_client) and d.min_per_client >= 2, "data.min_per_client",
                 "must be an integer >= 2")
        return out

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["lambda"] = obj.pop("lambda_")
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ConfigError([("<root>", "config must be a JSON object")])
        obj = dict(obj)
        known = {f.name for f in fields(cls)} - {"lambda_"} | {"lambda"}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError([(k, "unknown field") for k in unknown])
        if "lambda" in obj:
            obj["lambda_"] = obj.pop("lambda")
        if "data" in obj:
            data = obj["data"]
            if isinstance(data, DataConfig):
                data = asdict(data)
            if not isinstance(data, dict):
                raise ConfigError([("data", "must be an object")])
            bad = sorted(set(data) - {f.name for f in fields(DataConfig)})
            if bad:
                raise ConfigError([(f"data.{k}", "unknown field") for k in bad])
            obj["data"] = DataConfig(**data)
        return cls(**obj)

    def replace(self, **changes) -> "ExperimentConfig":
        obj = self.to_json()
        if "lambda_" in changes:
            changes["lambda"] = changes.pop("lambda_")
        obj.update(changes)
        return ExperimentConfig.from_json(obj)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        obj = json.load(fh)
    return ExperimentConfig.from_json(obj)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_json(), indent=2, sort_keys=True))
