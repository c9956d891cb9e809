"""Experiment configuration (JSON, ``schema_version`` 1).

Example (the shipped toy experiment, abridged)::

    {
      "schema_version": 1,
      "name": "toy-wmh",
      "master_seed": 2019,
      "output_dir": "runs/toy",
      "phantom": {"grid_size": [64, 64, 64], "n_lesions": [2, 6]},
      "datasets": [
        {"name": "anatomy", "role": "anatomy", "labels": ["CSF", "GM", "WM"],
         "modalities": ["T1", "IR", "FLAIR"], "source": {"phantom": {"n_volumes": 12}}},
        {"name": "lesion", "role": "lesion", "labels": ["WMH"],
         "modalities": ["T1", "FLAIR"], "source": {"manifest": "data/wmh/dataset.json"}}
      ],
      "validation": {"source": {"phantom": {"n_volumes": 4}}},
      "test": {"source": {"phantom": {"n_volumes": 8}}},
      "model": {"base_channels": 16, "depth": 4},
      "train": {"iterations": 2000, "batch_size": 7, "patch_size": [16, 16, 16]},
      "systems": ["ace", "ce", "dice", "multi"],
      "eval": {"window": null, "stride": null}
    }

A ``source`` is either ``{"phantom": {"n_volumes": N}}`` (generated from the
``phantom`` block, with seeds derived from ``master_seed``) or
``{"manifest": path}`` pointing at a ``dataset.json``. Relative manifest
paths are resolved against the config file's directory. ``HETSEG_OUT``
overrides ``output_dir``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
import platform
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from ._accel import backend
from .errors import ConfigError, IoError, ValidationError
from .labelspace import LabelSpace, build_label_space, declare_datasets
from .manifest import LoadedDataset, load_dataset
from .phantoms import PhantomParams, generate_dataset
from .seeds import derive_seed
from .training import SYSTEM_LABELS, TrainConfig

SCHEMA_VERSION = 1
_TOP_KEYS = {
    "schema_version", "name", "master_seed", "output_dir", "phantom", "datasets",
    "validation", "test", "model", "train", "systems", "eval",
}


@dataclass(frozen=True)
class Source:
    kind: str  # "phantom" or "manifest"
    n_volumes: int = 0
    manifest: str | None = None


@dataclass(frozen=True)
class DatasetConfig:
    name: str
    role: str
    labels: tuple[str, ...]
    modalities: tuple[str, ...]
    source: Source


@dataclass
class ExperimentConfig:
    name: str
    master_seed: int
    datasets: list[DatasetConfig]
    test: Source
    validation: Source | None = None
    phantom: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    systems: list[str] = field(default_factory=lambda: ["ace", "ce", "dice", "multi"])
    eval_window: tuple[int, int, int] | None = None
    eval_stride: tuple[int, int, int] | None = None
    output_dir: str = "runs/experiment"
    raw: dict = field(default_factory=dict, repr=False)

    def label_space(self) -> LabelSpace:
        specs = declare_datasets(
            {"name": d.name, "role": d.role, "labels": d.labels, "modalities": d.modalities} for d in self.datasets
        )
        return build_label_space(specs)

    def output_root(self) -> str:
        return os.environ.get("HETSEG_OUT") or self.output_dir

    def canonical(self) -> dict:
        doc = copy.deepcopy(self.raw)
        doc.pop("output_dir", None)
        return doc

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def seeds(self) -> dict[str, int]:
        out = {f"data/{d.name}": derive_seed(self.master_seed, f"data/{d.name}") for d in self.datasets}
        if self.validation is not None:
            out["data/validation"] = derive_seed(self.master_seed, "data/validation")
        out["data/test"] = derive_seed(self.master_seed, "data/test")
        for s in self.systems:
            out[f"train/{s}"] = derive_seed(self.master_seed, f"train/{s}")
        return out


def _triple(v, what):
    if v is None:
        return None
    try:
        t = tuple(int(x) for x in np.broadcast_to(v, 3))
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be an int or a list of three ints, got {v!r}") from None
    if min(t) < 1:
        raise ConfigError(f"{what} must be positive, got {v!r}")
    return t


def _source(block, where, base_dir) -> Source:
    if not isinstance(block, dict) or "source" not in block:
        raise ConfigError(f"{where}: missing 'source'")
    src = block["source"]
    if not isinstance(src, dict) or len(src) != 1:
        raise ConfigError(f"{where}: source must be {{'phantom': ...}} or {{'manifest': path}}")
    if "phantom" in src:
        n = src["phantom"].get("n_volumes")
        if not isinstance(n, int) or n < 1:
            raise ConfigError(f"{where}: phantom n_volumes must be a positive integer")
        return Source("phantom", n_volumes=n)
    if "manifest" in src:
        path = src["manifest"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return Source("manifest", manifest=path)
    raise ConfigError(f"{where}: unknown source kind {sorted(src)}")


def parse_config(doc: dict, base_dir: str = ".") -> ExperimentConfig:
    """Validate a config document; label-space problems surface here,
    before any compute starts."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {doc.get('schema_version')!r}")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    for key in ("datasets", "test", "master_seed"):
        if key not in doc:
            raise ConfigError(f"missing required key {key!r}")

    datasets = []
    for i, d in enumerate(doc["datasets"]):
        try:
            datasets.append(
                DatasetConfig(
                    d["name"], d["role"], tuple(d["labels"]), tuple(d["modalities"]),
                    _source(d, f"datasets[{i}]", base_dir),
                )
            )
        except KeyError as exc:
            raise ConfigError(f"datasets[{i}]: missing {exc}") from None

    systems = list(doc.get("systems", ["ace", "ce", "dice", "multi"]))
    if not systems:
        raise ConfigError("systems must not be empty")
    bad = [s for s in systems if s not in SYSTEM_LABELS]
    if bad or len(set(systems)) != len(systems):
        raise ConfigError(f"systems must be distinct values from {sorted(SYSTEM_LABELS)}, got {systems}")

    model = dict(doc.get("model", {}))
    train = dict(doc.get("train", {}))
    known = {f.name for f in fields(TrainConfig)}
    for k in model:
        if k not in ("base_channels", "depth"):
            raise ConfigError(f"unknown model key {k!r}")
    for k in train:
        if k not in known or k in ("loss", "seed", "base_channels", "depth"):
            raise ConfigError(f"unknown or reserved train key {k!r}")
    ev = dict(doc.get("eval", {}))
    window = _triple(ev.get("window"), "eval.window")
    stride = _triple(ev.get("stride"), "eval.stride")
    train.setdefault("val_window", window)
    train.setdefault("val_stride", stride)
    try:
        tcfg = TrainConfig(**train, **model)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

    exp = ExperimentConfig(
        name=str(doc.get("name", "experiment")),
        master_seed=int(doc["master_seed"]),
        datasets=datasets,
        test=_source(doc["test"], "test", base_dir),
        validation=_source(doc["validation"], "validation", base_dir) if doc.get("validation") else None,
        phantom=dict(doc.get("phantom", {})),
        train=tcfg,
        systems=systems,
        eval_window=window,
        eval_stride=stride,
        output_dir=str(doc.get("output_dir", "runs/experiment")),
        raw=copy.deepcopy(doc),
    )
    space = exp.label_space()
    from .network import ModelConfig

    ModelConfig(len(space.shared_modalities), space.num_classes, tcfg.base_channels, tcfg.depth, tcfg.patch_size)
    if any(d.source.kind == "phantom" for d in datasets) or exp.test.kind == "phantom":
        phantom_params(exp)
    return exp


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc, os.path.dirname(os.path.abspath(path)))


def phantom_params(exp: ExperimentConfig, seed: int = 0, modalities=None) -> PhantomParams:
    """Phantom parameters whose tissue/lesion names follow the datasets."""
    tissue = [l for d in exp.datasets if d.role == "anatomy" for l in d.labels]
    lesion = [l for d in exp.datasets if d.role == "lesion" for l in d.labels]
    if not tissue or not lesion:
        raise ConfigError("phantom sources need one anatomy and one lesion dataset")
    block = dict(exp.phantom)
    for key in ("seed", "tissue_names", "lesion_names", "n_tissue_shells", "modalities"):
        if key in block:
            raise ConfigError(f"phantom.{key} is derived from the datasets; remove it")
    mods = modalities or all_modalities(exp)
    try:
        return PhantomParams(
            **block, seed=seed, tissue_names=tuple(tissue), lesion_names=tuple(lesion),
            n_tissue_shells=len(tissue), modalities=tuple(mods),
        )
    except TypeError as exc:
        raise ConfigError(f"phantom: {exc}") from None


def all_modalities(exp: ExperimentConfig) -> list[str]:
    seen = []
    for d in exp.datasets:
        for m in d.modalities:
            if m not in seen:
                seen.append(m)
    return seen


def _materialize(exp, src: Source, tag: str, annotation: str, modalities, data_dir) -> str:
    if src.kind == "manifest":
        return src.manifest
    params = phantom_params(exp, derive_seed(exp.master_seed, f"data/{tag}"), modalities)
    out = os.path.join(data_dir, tag)
    generate_dataset(params, src.n_volumes, annotation, out, name=tag)
    return os.path.join(out, "dataset.json")


def prepare_data(exp: ExperimentConfig, data_dir: str):
    """Generate phantom sources and load everything into the label space.

    Returns ``(space, train_sets, val_set, test_set)``.
    """
    space = exp.label_space()
    train_sets: list[LoadedDataset] = []
    for d in exp.datasets:
        ann = "anatomy_only" if d.role == "anatomy" else "lesion_only"
        path = _materialize(exp, d.source, d.name, ann, d.modalities, data_dir)
        train_sets.append(load_dataset(path, space, d.name))
    mods = all_modalities(exp)
    val_set = None
    if exp.validation is not None:
        val_set = load_dataset(_materialize(exp, exp.validation, "validation", "joint", mods, data_dir), space)
    test_set = load_dataset(_materialize(exp, exp.test, "test", "joint", mods, data_dir), space)
    return space, train_sets, val_set, test_set


RNG_NOTE = "numpy Philox4x64 (counter-based), seeds via sha256(master_seed/component)"


def versions() -> dict:
    import scipy
    import torch

    return {
        "hetseg": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def provenance(exp: ExperimentConfig) -> dict:
    return {
        "config_hash": exp.config_hash(),
        "config": exp.canonical(),
        "master_seed": exp.master_seed,
        "seeds": exp.seeds(),
        "versions": versions(),
        "kernel_backend": backend(),
        "rng": RNG_NOTE,
    }


def default_config() -> dict:
    """The desk-scale phantom experiment used by the acceptance suite."""
    return {
        "schema_version": SCHEMA_VERSION,
        "name": "toy-wmh",
        "master_seed": 2019,
        "output_dir": "runs/toy",
        "phantom": {"grid_size": [64, 64, 64]},
        "datasets": [
            {
                "name": "anatomy", "role": "anatomy", "labels": ["CSF", "GM", "WM"],
                "modalities": ["T1", "IR", "FLAIR"], "source": {"phantom": {"n_volumes": 12}},
            },
            {
                "name": "lesion", "role": "lesion", "labels": ["WMH"],
                "modalities": ["T1", "FLAIR"], "source": {"phantom": {"n_volumes": 12}},
            },
        ],
        "validation": {"source": {"phantom": {"n_volumes": 4}}},
        "test": {"source": {"phantom": {"n_volumes": 8}}},
        "model": {"base_channels": 16, "depth": 4},
        "train": {
            "iterations": 2000, "batch_size": 7, "patch_size": [16, 16, 16],
            "lr": 1e-3, "validation_every": 100, "early_stop_patience": 5,
        },
        "systems": ["ace", "ce", "dice", "multi"],
        "eval": {"window": [32, 32, 32], "stride": [16, 16, 16]},
    }
