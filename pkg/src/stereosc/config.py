"""Declarative experiment configuration (YAML, schema-versioned, strict keys)."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from stereosc.channel import ChannelConfig, ChannelKind, Coherence, QuantSpec
from stereosc.data import SceneSpec, StereoPair, load_kitti_stereo, synth_dataset
from stereosc.errors import ConfigError
from stereosc.model import CodecConfig
from stereosc.training import TrainConfig
from stereosc.utils import canonical_json, derive_seed, sha256_hex

SCHEMA_VERSION = 1
DATA_ROOT_ENV = "STEREOSC_DATA_ROOT"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"  # or "kitti"
    root: Optional[str] = None
    split: str = "training"
    limit: Optional[int] = None  # first N KITTI frames
    classes: tuple = ("Car",)
    count: int = 16  # synthetic frames
    seed: int = 0
    scene: SceneSpec = SceneSpec()
    fractions: tuple = (0.5, 0.0, 0.5)  # train / val / test

    def __post_init__(self):
        if self.kind not in ("synthetic", "kitti"):
            raise ConfigError(f"dataset.kind must be synthetic or kitti, got {self.kind!r}")
        if self.kind == "synthetic" and self.count < 1:
            raise ConfigError("dataset.count must be >= 1")
        if len(self.fractions) != 3 or min(self.fractions) < 0 or \
                not math.isclose(sum(self.fractions), 1.0, abs_tol=1e-9):
            raise ConfigError(f"dataset.fractions must be three non-negatives summing to 1, "
                              f"got {self.fractions}")


@dataclass(frozen=True)
class ChannelSweep:
    kinds: tuple = ("noiseless", "awgn", "rayleigh")
    snr_db: tuple = (6.0, 10.0, 14.0, 18.0)
    coherence: str = "per_symbol"

    def __post_init__(self):
        object.__setattr__(self, "snr_db", tuple(float(s) for s in self.snr_db))
        try:
            for k in self.kinds:
                ChannelKind(k)
            Coherence(self.coherence)
        except ValueError as exc:
            raise ConfigError(f"channels: {exc}") from None
        if not self.kinds:
            raise ConfigError("channels.kinds is empty")
        noisy = [k for k in self.kinds if k != "noiseless"]
        if noisy and not self.snr_db:
            raise ConfigError("channels.snr_db must be nonempty for noisy channels")
        if any(not math.isfinite(s) for s in self.snr_db):
            raise ConfigError("channels.snr_db must be finite")

    def configs(self, seed: int) -> list[ChannelConfig]:
        """Every (kind, SNR) point; noiseless appears once."""
        out = []
        for k in self.kinds:
            if k == "noiseless":
                out.append(ChannelConfig(ChannelKind.NOISELESS, seed=seed))
            else:
                out.extend(ChannelConfig(k, float(s), self.coherence, seed) for s in self.snr_db)
        return out


@dataclass(frozen=True)
class DetectionConfig:
    detector: str = "oracle"  # or "files"
    directory: Optional[str] = None
    confidence_floor: float = 0.3

    def __post_init__(self):
        if self.detector not in ("oracle", "files"):
            raise ConfigError(f"detection.detector must be oracle or files, got {self.detector!r}")
        if self.detector == "files" and not self.directory:
            raise ConfigError("detection.directory is required for the files detector")


@dataclass(frozen=True)
class EvaluationConfig:
    ssim_block: int = 8
    iou_threshold: float = 0.5
    ap_points: int = 40
    regimes: tuple = ("easy", "moderate", "hard")


@dataclass(frozen=True)
class TrainSection:
    epochs_per_phase: Optional[int] = None  # None: reference epoch counts
    flow_pretrain_steps: int = 1200
    options: TrainConfig = TrainConfig()


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out_dir: str = "runs/default"
    dataset: DatasetConfig = DatasetConfig()
    codec: CodecConfig = CodecConfig()
    train: TrainSection = TrainSection()
    channels: ChannelSweep = ChannelSweep()
    quant_bits: Optional[int] = None
    detection: DetectionConfig = DetectionConfig()
    evaluation: EvaluationConfig = EvaluationConfig()

    @property
    def quant(self) -> Optional[QuantSpec]:
        return None if self.quant_bits is None else QuantSpec(self.quant_bits)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def config_hash(self) -> str:
        """Hash of every semantically meaningful field (the output directory is not)."""
        d = self.to_dict()
        d.pop("out_dir")
        return sha256_hex(canonical_json(d))

    def with_overrides(self, *, seed: Optional[int] = None, out_dir: Optional[str] = None,
                       snr: Optional[list] = None, channels: Optional[list] = None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if out_dir is not None:
            cfg = replace(cfg, out_dir=str(out_dir))
        if snr is not None or channels is not None:
            sweep = cfg.channels
            cfg = replace(cfg, channels=ChannelSweep(
                tuple(channels) if channels is not None else sweep.kinds,
                tuple(float(s) for s in snr) if snr is not None else sweep.snr_db,
                sweep.coherence))
        return cfg


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(x) for x in obj]
    return obj


_NESTED = {
    (ExperimentConfig, "dataset"): DatasetConfig,
    (ExperimentConfig, "codec"): CodecConfig,
    (ExperimentConfig, "train"): TrainSection,
    (ExperimentConfig, "channels"): ChannelSweep,
    (ExperimentConfig, "detection"): DetectionConfig,
    (ExperimentConfig, "evaluation"): EvaluationConfig,
    (DatasetConfig, "scene"): SceneSpec,
    (TrainSection, "options"): TrainConfig,
}


def _build(cls, data: Any, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        path = f"{where}.{name}" if where else name
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, path)
        elif isinstance(value, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        elif isinstance(value, dict):
            raise ConfigError(f"{path}: unexpected mapping")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    return _build(ExperimentConfig, data, "")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


# -- dataset materialisation ------------------------------------------------


def data_root(cfg: ExperimentConfig) -> Optional[Path]:
    """Dataset root; the environment variable overrides the config value."""
    root = os.environ.get(DATA_ROOT_ENV) or cfg.dataset.root
    return Path(root) if root else None


def load_pairs(cfg: ExperimentConfig) -> list[StereoPair]:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        return synth_dataset(ds.seed, ds.count, ds.scene)
    root = data_root(cfg)
    if root is None or not root.is_dir():
        raise ConfigError(f"KITTI root not found: {root} (set dataset.root or {DATA_ROOT_ENV})")
    pairs = load_kitti_stereo(root, ds.split, classes=ds.classes)
    return pairs[:ds.limit] if ds.limit is not None else pairs


def split_ids(frame_ids: list[str], fractions, seed: int) -> dict[str, list[str]]:
    """Deterministic shuffled split; each part is returned sorted."""
    ids = sorted(frame_ids)
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    n_val = min(n_val, len(ids) - n_train)
    parts = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
             "test": order[n_train + n_val:]}
    return {k: sorted(ids[i] for i in v) for k, v in parts.items()}


def split_pairs(cfg: ExperimentConfig, pairs: list[StereoPair]) -> dict[str, list[StereoPair]]:
    by_id = {p.frame_id: p for p in pairs}
    ids = split_ids(list(by_id), cfg.dataset.fractions, cfg.dataset.seed)
    return {k: [by_id[i] for i in v] for k, v in ids.items()}
