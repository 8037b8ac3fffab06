"""Experiment configuration, loaded from TOML.

A config file looks like::

    out = "runs/snip-dop"          # output directory (not part of the hash)
    cache = "runs/cache"           # shared artifact cache (not part of the hash)

    [dataset]                      # synthetic shapes by default
    kind = "synthetic"
    n_train = 3000
    n_test = 500
    seed = 0

    [model]
    name = "small_cnn"

    [experiment]
    criterion = "snip"             # snip | grasp
    mode = "dop"                   # random-image | dop | stitch | all-one | random-segment | less-patch
    budget = 100                   # materials; defaults to 100 (snip) or 300 (grasp)
    sparsities = [0.6, 0.8, 0.9, 0.95]
    seeds = [0, 1, 2, 3, 4]
    sigma = "mixed"                # or a float in [0, 1)

    [train]                        # fine-tuning schedule
    epochs = 40
    lr = 0.1

    [reference]                    # dense classifier used for concept extraction
    epochs = 20
    min_accuracy = 0.9

    [extract]                      # concept extraction knobs
    top_n = 5

For IDX data use ``kind = "idx"`` with ``train_images``, ``train_labels``,
``test_images`` and ``test_labels`` paths.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli

from ..concepts.extract import ExtractConfig
from ..datasets import SyntheticSpec
from ..pruning import CRITERIA, TrainSchedule

MODES = ("random-image", "dop", "stitch", "all-one", "random-segment", "less-patch")
DEFAULT_BUDGET = {"snip": 100, "grasp": 300}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    milestones: tuple[int, ...] = (12, 17)
    min_accuracy: float = 0.9
    seed: int = 0

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             milestones=self.milestones)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    model: str = "small_cnn"
    criterion: str = "snip"
    mode: str = "dop"
    budget: int | None = None
    sparsities: tuple[float, ...] = (0.6, 0.8, 0.9, 0.95)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    sigma: float | str = "mixed"
    train: TrainSchedule = TrainSchedule()
    reference: ReferenceConfig = ReferenceConfig()
    extract: ExtractConfig = ExtractConfig()
    out: str = "runs/default"
    cache: str | None = None

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.sparsities or any(not 0.0 <= s < 1.0 for s in self.sparsities):
            raise ConfigError("sparsities must be a nonempty list of values in [0, 1)")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.sigma != "mixed" and not (isinstance(self.sigma, (int, float)) and 0 <= self.sigma < 1):
            raise ConfigError("sigma must be 'mixed' or a number in [0, 1)")
        if self.budget is not None and self.budget < 1:
            raise ConfigError("budget must be positive")
        kind = self.dataset.get("kind", "synthetic")
        if kind not in ("synthetic", "idx"):
            raise ConfigError(f"dataset kind must be 'synthetic' or 'idx', got {kind!r}")
        if kind == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if key not in self.dataset:
                    raise ConfigError(f"idx dataset needs {key!r}")

    @property
    def material_budget(self) -> int:
        return self.budget if self.budget is not None else DEFAULT_BUDGET[self.criterion]

    @property
    def cache_dir(self) -> Path:
        return Path(self.cache) if self.cache else Path(self.out) / "cache"

    def synthetic_spec(self) -> SyntheticSpec:
        opts = {k: v for k, v in self.dataset.items() if k != "kind"}
        known = {f.name for f in fields(SyntheticSpec)}
        unknown = set(opts) - known
        if unknown:
            raise ConfigError(f"unknown synthetic dataset keys: {sorted(unknown)}")
        for key in ("shapes", "clutter_size", "background"):
            if key in opts:
                opts[key] = tuple(opts[key])
        if "palette" in opts:
            opts["palette"] = tuple(tuple(c) for c in opts["palette"])
        return SyntheticSpec(**opts)

    def check_artifacts(self) -> None:
        """Raise if a referenced input file is missing."""
        if self.dataset.get("kind") == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if not Path(self.dataset[key]).is_file():
                    raise ConfigError(f"dataset file {self.dataset[key]} ({key}) does not exist")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["budget"] = self.material_budget
        return _jsonable(d)

    def digest(self) -> str:
        """Hash of everything that affects results; output locations are excluded."""
        d = self.to_dict()
        d.pop("out")
        d.pop("cache")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _section(cls, table: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys: {sorted(unknown)}")
    opts = {k: tuple(v) if isinstance(v, list) else v for k, v in table.items()}
    return cls(**opts)


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    raw = dict(raw)
    top = {"out", "cache", "dataset", "model", "experiment", "train", "reference", "extract"}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    dataset = dict(raw.get("dataset", {"kind": "synthetic"}))
    dataset.setdefault("kind", "synthetic")
    if base_dir is not None and dataset["kind"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key in dataset:
                dataset[key] = str((base_dir / dataset[key]).resolve())
    exp = dict(raw.get("experiment", {}))
    allowed = {"criterion", "mode", "budget", "sparsities", "seeds", "sigma"}
    if set(exp) - allowed:
        raise ConfigError(f"[experiment] has unknown keys: {sorted(set(exp) - allowed)}")
    for key in ("sparsities", "seeds"):
        if key in exp:
            exp[key] = tuple(exp[key])
    model = raw.get("model", {})
    kwargs = dict(
        dataset=dataset,
        model=model.get("name", "small_cnn") if isinstance(model, dict) else str(model),
        train=_section(TrainSchedule, raw.get("train", {}), "train"),
        reference=_section(ReferenceConfig, raw.get("reference", {}), "reference"),
        extract=_section(ExtractConfig, raw.get("extract", {}), "extract"),
        **exp,
    )
    if "out" in raw:
        kwargs["out"] = str(raw["out"])
    if "cache" in raw:
        kwargs["cache"] = str(raw["cache"])
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomli.load(fh)
    return config_from_dict(raw, base_dir=path.parent)
