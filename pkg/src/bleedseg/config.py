"""YAML run configuration: strict parsing and dataset assembly.

A config file has up to four sections — ``model``, ``train``, ``data`` and
``experiment`` — each optional and each falling back to defaults. Unknown keys
anywhere are an error, so typos fail loudly instead of silently training with
defaults.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import (
    DatasetSplit,
    ImageSample,
    generate_synthetic,
    load_annotation,
    load_image,
    load_mask,
    rasterize_polygons,
    split_by_patient,
)
from .experiment import ExperimentSpec
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "external"
    # synthetic source
    seed: int = 0
    train_patients: int = 5
    val_patients: int = 2
    images_per_patient: int = 40
    val_images_per_patient: int = 20
    side: int = 64
    # external source: a directory of images plus masks or polygon annotations
    images_dir: str | None = None
    masks_dir: str | None = None
    annotations_dir: str | None = None
    val_patient_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.source not in ("synthetic", "external"):
            raise ValueError(f"data source must be 'synthetic' or 'external', got {self.source!r}")
        if self.source == "synthetic":
            if self.train_patients < 1 or self.images_per_patient < 1:
                raise ValueError("synthetic data needs >= 1 train patient and >= 1 image each")
            if self.val_patients < 0 or self.val_images_per_patient < 0:
                raise ValueError("validation counts must be >= 0")
        else:
            if not self.images_dir:
                raise ValueError("external data needs images_dir")
            if bool(self.masks_dir) == bool(self.annotations_dir):
                raise ValueError("external data needs exactly one of masks_dir or annotations_dir")

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        if "val_patient_ids" in d:
            d["val_patient_ids"] = tuple(d["val_patient_ids"])
        return cls(**d)


@dataclass(frozen=True)
class AppConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "experiment": ExperimentSpec,
}


def parse_config(raw: dict | None, origin: str = "config") -> AppConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError(f"{origin}: top level must be a mapping")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"{origin}: unknown config keys: {sorted(unknown)}")
    parsed = {}
    for name, cls in _SECTIONS.items():
        if name not in raw:
            continue
        section = raw[name]
        if not isinstance(section, dict):
            raise ValueError(f"{origin}: {name}: must be a mapping")
        try:
            parsed[name] = cls.from_dict(section)
        except (ValueError, TypeError) as e:
            raise ValueError(f"{origin}: {name}: {e}") from e
    return AppConfig(**parsed)


def load_config(path: Path | str) -> AppConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise
    except yaml.YAMLError as e:
        raise ValueError(f"{path}: invalid YAML: {e}") from e
    return parse_config(raw, origin=str(path))


def build_synthetic_split(cfg: DataConfig) -> DatasetSplit:
    """Deterministic synthetic cohort: last ``val_patients`` patients held out,
    validation truncated to ``val_images_per_patient`` images each."""
    total = cfg.train_patients + cfg.val_patients
    samples = generate_synthetic(cfg.seed, n_patients=total,
                                 images_per_patient=cfg.images_per_patient,
                                 side=cfg.side)
    patients = sorted({s.patient_id for s in samples})
    val_ids = patients[cfg.train_patients:]
    split = split_by_patient(samples, val_ids)
    if cfg.val_images_per_patient < cfg.images_per_patient:
        kept, seen = [], {}
        for s in split.val:
            seen[s.patient_id] = seen.get(s.patient_id, 0) + 1
            if seen[s.patient_id] <= cfg.val_images_per_patient:
                kept.append(s)
        split = DatasetSplit(train=split.train, val=kept)
    return split


def _load_external_samples(cfg: DataConfig) -> list[ImageSample]:
    images_dir = Path(cfg.images_dir)
    if not images_dir.is_dir():
        raise ValueError(f"images_dir {images_dir} is not a directory")
    paths = sorted(images_dir.glob("*.png"))
    if not paths:
        raise ValueError(f"no .png images under {images_dir}")
    samples = []
    for p in paths:
        stem = p.stem
        pixels = load_image(p)
        if cfg.masks_dir:
            mask_path = Path(cfg.masks_dir) / f"{stem}.png"
            if not mask_path.is_file():
                raise ValueError(f"no mask for {stem} at {mask_path}")
            mask = load_mask(mask_path)
        else:
            ann_path = Path(cfg.annotations_dir) / f"{stem}.json"
            if not ann_path.is_file():
                raise ValueError(f"no annotation for {stem} at {ann_path}")
            ann = load_annotation(ann_path.read_text())
            mask = rasterize_polygons(ann)
        if mask.shape != pixels.shape[:2]:
            raise ValueError(f"{stem}: mask shape {mask.shape} does not match "
                             f"image {pixels.shape[:2]}")
        samples.append(ImageSample(id=stem, patient_id=stem.split("_")[0],
                                   pixels=pixels, mask=mask))
    return samples


def build_split(cfg: DataConfig) -> DatasetSplit:
    if cfg.source == "synthetic":
        return build_synthetic_split(cfg)
    return split_by_patient(_load_external_samples(cfg), list(cfg.val_patient_ids))
