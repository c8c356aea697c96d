"""Experiment configuration, content hashing, and run records."""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as tomllib

_ARCHS = ("mlp", "cnn")
_DATASETS = ("blobs", "moons", "idx")
_METHODS = ("caa", "pgd", "cw", "deepfool")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a sweep needs, hashable to a reproducibility key.

    Attack parameter grids live in `methods`: method name to a dict of
    parameter-name to value-list; the sweep takes the Cartesian product
    within each method.
    """

    dataset: str = "blobs"
    n_data: int = 400
    subset: int = 50                  # samples attacked per config point
    idx_images: str | None = None
    idx_labels: str | None = None
    arch: str = "mlp"
    hidden: tuple = (64, 64)
    train_sigma: float = 0.5
    epochs: int = 10
    sigmas: tuple = (0.5,)
    methods: dict = field(default_factory=dict)
    n_loop: int = 1000                # MC draws per in-attack certification
    loop_alpha: float = 0.2           # attacker-side confidence level
    alpha: float = 0.005              # defender-side certification level
    recheck_n: int | None = None      # None: 10x n_loop
    clean_n: int | None = None        # None: 10x n_loop
    seed: int = 0
    workers: int = 1
    output_dir: str = "run"

    def __post_init__(self):
        if self.dataset not in _DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.arch not in _ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise ValueError("idx dataset needs idx_images and idx_labels")
        if self.n_data < 2 or self.subset < 1:
            raise ValueError("n_data >= 2 and subset >= 1 required")
        if self.dataset != "idx" and self.subset > self.n_data:
            raise ValueError("subset size exceeds dataset size")
        if not self.sigmas or any(s <= 0 for s in self.sigmas):
            raise ValueError("sigma grid must be nonempty and positive")
        for meth, grid in self.methods.items():
            if meth not in _METHODS:
                raise ValueError(f"unknown attack method {meth!r}")
            if not isinstance(grid, dict):
                raise ValueError(f"{meth}: parameter grid must be a mapping")
            for key, values in grid.items():
                if not isinstance(values, (list, tuple)) or len(values) == 0:
                    raise ValueError(f"{meth}.{key}: grid must be a "
                                     "nonempty list")
        if self.epochs < 1 or self.n_loop < 2 or self.workers < 1:
            raise ValueError("epochs, n_loop, workers out of range")
        for name in ("loop_alpha", "alpha"):
            a = getattr(self, name)
            if not 0 < a < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        for name in ("recheck_n", "clean_n"):
            v = getattr(self, name)
            if v is not None and v < 2:
                raise ValueError(f"{name} must be at least 2")
        if self.train_sigma < 0:
            raise ValueError("train_sigma must be nonnegative")


def _jsonable(cfg):
    doc = asdict(cfg)
    doc["hidden"] = list(cfg.hidden)
    doc["sigmas"] = [float(s) for s in cfg.sigmas]
    return doc


def config_hash(cfg):
    """sha256 over the canonical JSON form; identical configs, identical
    hashes, regardless of dict insertion order. Storage location and
    worker count are excluded: neither changes the result rows."""
    doc = _jsonable(cfg)
    doc.pop("output_dir")
    doc.pop("workers")
    blob = json.dumps(doc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def from_toml(path):
    """ExperimentConfig from a flat TOML file with [methods.<name>] tables."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    if "hidden" in data:
        data["hidden"] = tuple(data["hidden"])
    if "sigmas" in data:
        data["sigmas"] = tuple(data["sigmas"])
    return ExperimentConfig(**data)


@dataclass
class RunRecord:
    """A sweep's persisted outcome: hashes, rows, and metric summaries."""

    config_hash: str
    model_hash: str
    rows: list
    metrics: dict
    started: str
    finished: str

    def to_json(self):
        return asdict(self)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))
