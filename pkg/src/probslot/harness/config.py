"""Run configuration: a flat ``key = value`` file plus command-line overrides."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ContractError
from ..nets import TrainConfig
from ..serialize import config_digest

# keys that shape the dataset, the checkpoints, or only the reports
DATA_KEYS = ("scenes", "data_seed", "spec_seed", "radius", "variance", "jitter", "sampling")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    # dataset
    dataset: str = ""  # defaults to <out_dir>/dataset.bin
    scenes: int = 1000
    data_seed: int = 0
    spec_seed: int = 0
    radius: float = 5.0
    variance: float = 0.25
    jitter: float = 0.3
    sampling: str = "gaussian"
    export_csv: bool = False
    # sweep and reporting
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    tau: float = 0.05
    metrics: tuple[str, ...] = ("smcc", "r2", "ari", "ard", "aggregate")
    slot_mode: str = "mean"  # or "sample"
    infer_seed: int = 12345
    aggregate_mode: str = "dirac"  # or "gaussian"
    grid_n: int = 801
    workers: int = 1
    out_dir: str = "run"

    def __post_init__(self) -> None:
        self.seeds = tuple(int(s) for s in self.seeds)
        self.metrics = tuple(self.metrics)
        if len(set(self.seeds)) != len(self.seeds):
            raise ContractError(f"seeds must be distinct, got {self.seeds}")
        if not 0.0 <= self.tau < 1.0:
            raise ContractError(f"tau must be in [0, 1), got {self.tau}")
        if self.scenes < 1:
            raise ContractError("scenes must be >= 1")
        if self.slot_mode not in ("mean", "sample"):
            raise ContractError(f"unknown slot mode {self.slot_mode!r}")
        if self.aggregate_mode not in ("dirac", "gaussian"):
            raise ContractError(f"unknown aggregate mode {self.aggregate_mode!r}")
        if self.workers < 1:
            raise ContractError("workers must be >= 1")

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else self.out / "dataset.bin"

    def seed_dir(self, seed: int) -> Path:
        return self.out / f"seed{seed}"

    def checkpoint_path(self, seed: int) -> Path:
        return self.seed_dir(seed) / "checkpoint.json"

    def train_config(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train, seed=seed)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "train"}
        out["seeds"] = list(self.seeds)
        out["metrics"] = list(self.metrics)
        out["train"] = self.train.to_dict()
        return out

    def data_dict(self) -> dict:
        return {k: getattr(self, k) for k in DATA_KEYS}

    def digest(self, part: str = "all", seed: int | None = None) -> str:
        """Digest of the settings an artifact depends on."""
        if part == "data":
            return config_digest(self.data_dict())
        if part == "train":
            return config_digest({"data": self.data_dict(), "train": self.train_config(seed).to_dict()})
        settings = self.to_dict()
        # where files live and how many processes run does not change their content
        for key in ("out_dir", "dataset", "workers"):
            settings.pop(key)
        return config_digest(settings)


_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_RUN_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "train"}


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(p) for p in parts)
            return tuple(parts)
        return raw
    except ValueError as exc:
        raise ContractError(f"bad value for {name!r}: {raw!r}") from exc


def apply_overrides(cfg: RunConfig, values: dict[str, str]) -> RunConfig:
    """Return a new config with string-valued settings applied."""
    train_kw = {}
    run_kw = {}
    for key, raw in values.items():
        key = key.strip().replace("-", "_")
        if key in _TRAIN_FIELDS:
            train_kw[key] = _coerce(key, str(raw), getattr(cfg.train, key))
        elif key in _RUN_FIELDS:
            run_kw[key] = _coerce(key, str(raw), getattr(cfg, key))
        else:
            raise ContractError(f"unknown config key {key!r}")
    train = dataclasses.replace(cfg.train, **train_kw) if train_kw else cfg.train
    return dataclasses.replace(cfg, train=train, **run_kw)


def load_config(path) -> RunConfig:
    """Parse a flat ``key = value`` file (``#`` comments allowed)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ContractError(f"cannot read config {path}: {exc}") from exc
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ContractError(f"cannot parse config {path}: {exc}") from exc
    return apply_overrides(RunConfig(), dict(parser["run"]))


def dump_config(cfg: RunConfig) -> str:
    """Inverse of :func:`load_config`."""
    lines = []
    for key, value in cfg.to_dict().items():
        if key == "train":
            continue
        lines.append(f"{key} = {_fmt(value)}")
    for key, value in cfg.train.to_dict().items():
        lines.append(f"{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)
