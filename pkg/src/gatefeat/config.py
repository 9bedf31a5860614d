"""Declarative run configuration (YAML) with dotted-key overrides.

Validation is complete before anything touches disk: combos, LoRA files,
dataset directories and cross-references are all checked in
:func:`RunConfig.validate`.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .amalgamation import TrainConfig
from .errors import ResourceMissingError, ValidationError
from .feature_store import TechniqueCombo
from .techniques import CaptionerAdapter, LoraRegistry, make_captioner

TASKS = ("segmentation", "correspondence")
BACKENDS = ("tiny", "diffusers")
CORRESPONDENCE_SETTINGS = ("nn", "conv")


@dataclass
class ModelSpec:
    backend: str = "tiny"
    path: str | None = None
    controlnet_path: str | None = None
    cache_dir: str | None = None
    device: str = "cpu"
    tiny_seed: int = 0


@dataclass
class DatasetSpec:
    kind: str = "folder"
    dataset_id: str = "dataset"
    train: dict[str, Any] = field(default_factory=dict)
    test: dict[str, Any] | None = None
    classes: int | None = None
    limit: int | None = None


@dataclass
class ExtractionSpec:
    timestep: int = 50
    capture_attention: bool = False
    attention_resolution: tuple[int, int] = (32, 32)
    resize_short_side: int | None = 512
    conv_blocks: tuple[int, ...] | None = None


@dataclass
class AmalgamationSpec:
    n: int = 2
    gamma1: float = 0.1
    gamma2: float = 0.1
    arch: str = "mlp_on_pooled"
    hidden: int = 128


@dataclass
class DownstreamSpec:
    ensemble_size: int = 3
    hidden: tuple[int, int] = (128, 32)
    batch_size: int = 8
    ablation: list[list[str]] | None = None
    repeats: int = 1
    correspondence: str = "nn"
    pck_alpha: float = 0.1
    pck_bbox: bool = False
    extra_features: str | None = None  # directory of <image_id>.npy maps concatenated after amalgamation


@dataclass
class GateSpec:
    strength: float = 0.8
    steps: int = 30
    tau: float = 0.02
    reference: str | None = None  # combo id; None means all techniques off
    generator: str = "img2img"


@dataclass
class ShiftSpec:
    reference_timestep: int = 0
    anchor_timestep: int = 500
    stencil: str = "4"
    border: str = "edge"


@dataclass
class RunConfig:
    output_root: str
    combos: list[TechniqueCombo]
    seed: int = 0
    task: str = "segmentation"
    base_prompt: str = ""
    feature_root: str | None = None
    model: ModelSpec = field(default_factory=ModelSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    loras: list[dict[str, Any]] = field(default_factory=list)
    captioner: dict[str, Any] | None = None
    attention_combo: TechniqueCombo | None = None
    combo_seeds: dict[str, int] = field(default_factory=dict)
    extraction: ExtractionSpec = field(default_factory=ExtractionSpec)
    amalgamation: AmalgamationSpec = field(default_factory=AmalgamationSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    downstream: DownstreamSpec = field(default_factory=DownstreamSpec)
    gate: GateSpec = field(default_factory=GateSpec)
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    workers: int = 1
    source: str | None = None

    @property
    def out(self) -> Path:
        return Path(self.output_root)

    @property
    def features_dir(self) -> Path:
        return Path(self.feature_root) if self.feature_root else self.out / "features"

    def combo(self, combo_id: str) -> TechniqueCombo:
        for c in self.all_combos():
            if c.combo_id == combo_id:
                return c
        raise ValidationError(f"unknown combo {combo_id!r}")

    def all_combos(self) -> list[TechniqueCombo]:
        return self.combos + ([self.attention_combo] if self.attention_combo is not None else [])

    def seed_for(self, combo_id: str) -> int:
        return self.combo_seeds.get(combo_id, self.seed)

    def registry(self) -> LoraRegistry:
        base = Path(self.source).parent if self.source else Path(".")
        reg = LoraRegistry()
        for e in self.loras:
            p = Path(e["path"])
            reg.register(e["lora_id"], p if p.is_absolute() else base / p, float(e.get("strength", 1.0)))
        return reg

    def make_captioner(self) -> CaptionerAdapter | None:
        if not self.captioner:
            return None
        spec = dict(self.captioner)
        cache = spec.pop("cache", None)
        cap = make_captioner(spec.pop("backend"), **spec)
        if cache and Path(cache).exists():
            cap.load_cache(cache)
        return cap

    def resolve_path(self, p: str) -> Path:
        q = Path(p)
        if q.is_absolute() or not self.source:
            return q
        return Path(self.source).parent / q

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValidationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.model.backend not in BACKENDS:
            raise ValidationError(f"model.backend must be one of {BACKENDS}")
        if self.model.backend == "diffusers" and not self.model.path:
            raise ValidationError("model.path is required for the diffusers backend")
        if not self.combos:
            raise ValidationError("at least one combo is required")
        ids = [c.combo_id for c in self.all_combos()]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ValidationError(f"duplicate combo ids: {dupes}")
        for cid in self.combo_seeds:
            if cid not in ids:
                raise ValidationError(f"seed given for unknown combo {cid!r}")
        reg = self.registry()
        for c in self.all_combos():
            c.validate_for_timestep(self.extraction.timestep)
            if c.use_lora:
                reg.resolve(c.lora_id)
            if c.cfg_scale != 1.0 and c.denoise_from is None:
                raise ValidationError(f"combo {c.combo_id!r}: cfg_scale != 1 needs denoise_from")
            if c.prompt_source == "per_image_caption" and not self.captioner:
                raise ValidationError(f"combo {c.combo_id!r} uses captions but no captioner is configured")
        for sub in self.downstream.ablation or []:
            unknown = [c for c in sub if c not in [x.combo_id for x in self.combos]]
            if unknown or not sub:
                raise ValidationError(f"ablation subset {sub} references unknown combos {unknown}")
        if self.gate.reference is not None and self.gate.reference not in ids:
            raise ValidationError(f"gate.reference {self.gate.reference!r} is not a configured combo")
        if not 0.0 < self.gate.strength <= 1.0:
            raise ValidationError("gate.strength must be in (0, 1]")
        if self.gate.steps < 1:
            raise ValidationError("gate.steps must be >= 1")
        if not 0 <= self.shift.reference_timestep < self.shift.anchor_timestep:
            raise ValidationError("shift.reference_timestep must be below shift.anchor_timestep")
        if self.shift.stencil not in ("4", "8"):
            raise ValidationError("shift.stencil must be '4' or '8'")
        if self.downstream.correspondence not in CORRESPONDENCE_SETTINGS:
            raise ValidationError(f"downstream.correspondence must be one of {CORRESPONDENCE_SETTINGS}")
        if self.task == "segmentation" and not self.dataset.classes:
            raise ValidationError("dataset.classes is required for segmentation")
        if self.amalgamation.n < 1:
            raise ValidationError("amalgamation.n must be >= 1")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        if self.downstream.repeats < 1:
            raise ValidationError("downstream.repeats must be >= 1")
        if self.attention_combo is not None and self.attention_combo.prompt_source != "fixed_text":
            raise ValidationError("the attention combo must use a fixed prompt")
        if self.model.backend == "diffusers":
            p = Path(self.model.path)
            if p.suffix in (".safetensors", ".ckpt") and not self.resolve_path(self.model.path).exists():
                raise ResourceMissingError(f"checkpoint {self.model.path} not found")
        # dataset adapters check their own directories
        open_splits(self)


PATH_KEYS = ("images_dir", "masks_dir", "root", "path")


def open_splits(cfg: RunConfig) -> dict[str, Any]:
    """Dataset adapters for the configured splits, keyed ``train``/``test``."""
    from .downstream.datasets import open_pairs, open_segmentation

    opener = open_segmentation if cfg.task == "segmentation" else open_pairs
    out = {}
    for split, spec in (("train", cfg.dataset.train), ("test", cfg.dataset.test)):
        if not spec:
            continue
        kw = {k: (str(cfg.resolve_path(v)) if k in PATH_KEYS and v is not None else v) for k, v in spec.items()}
        out[split] = opener(cfg.dataset.kind, **kw)
    if "train" not in out:
        raise ValidationError("dataset.train is required")
    return out


def _set_dotted(doc: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    cur = doc
    for p in parts[:-1]:
        nxt = cur.get(p)
        if nxt is None:
            nxt = cur[p] = {}
        if not isinstance(nxt, dict):
            raise ValidationError(f"cannot override {key!r}: {p!r} is not a mapping")
        cur = nxt
    cur[parts[-1]] = value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    out = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} must look like key=value")
        k, v = item.split("=", 1)
        _set_dotted(out, k.strip(), yaml.safe_load(v))
    return out


def _build(cls, d: dict | None, name: str):
    d = dict(d or {})
    known = set(cls.__dataclass_fields__)
    extra = set(d) - known
    if extra:
        raise ValidationError(f"unknown keys in {name}: {sorted(extra)}")
    for k in ("attention_resolution", "hidden", "conv_blocks"):
        if k in d and isinstance(d[k], list):
            d[k] = tuple(d[k])
    try:
        return cls(**d)
    except TypeError as e:
        raise ValidationError(f"{name}: {e}") from e


def _combo(d: dict, seeds: dict[str, int]) -> TechniqueCombo:
    d = dict(d)
    seed = d.pop("seed", None)
    c = TechniqueCombo.from_dict(d)
    if seed is not None:
        seeds[c.combo_id] = int(seed)
    return c


def from_dict(doc: dict, source: str | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ValidationError("config must be a mapping")
    doc = dict(doc)
    known = set(RunConfig.__dataclass_fields__) - {"combo_seeds", "source"}
    extra = set(doc) - known
    if extra:
        raise ValidationError(f"unknown top-level config keys: {sorted(extra)}")
    if "output_root" not in doc:
        raise ValidationError("output_root is required")
    seeds: dict[str, int] = {}
    combos = [_combo(c, seeds) for c in doc.pop("combos", None) or []]
    att = doc.pop("attention_combo", None)
    att_combo = _combo(att, seeds) if att else None
    cfg = RunConfig(
        output_root=str(doc.pop("output_root")),
        combos=combos,
        attention_combo=att_combo,
        combo_seeds=seeds,
        model=_build(ModelSpec, doc.pop("model", None), "model"),
        dataset=_build(DatasetSpec, doc.pop("dataset", None), "dataset"),
        extraction=_build(ExtractionSpec, doc.pop("extraction", None), "extraction"),
        amalgamation=_build(AmalgamationSpec, doc.pop("amalgamation", None), "amalgamation"),
        train=_build(TrainConfig, doc.pop("train", None), "train"),
        downstream=_build(DownstreamSpec, doc.pop("downstream", None), "downstream"),
        gate=_build(GateSpec, doc.pop("gate", None), "gate"),
        shift=_build(ShiftSpec, doc.pop("shift", None), "shift"),
        source=source,
        **doc,
    )
    if source and not Path(cfg.output_root).is_absolute():
        cfg.output_root = str(Path(source).parent / cfg.output_root)
    if cfg.feature_root and source and not Path(cfg.feature_root).is_absolute():
        cfg.feature_root = str(Path(source).parent / cfg.feature_root)
    return cfg


def load_config(path: str | os.PathLike, overrides: list[str] | None = None) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config {p} not found")
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as e:
        raise ValidationError(f"{p}: {e}") from e
    return from_dict(apply_overrides(doc, overrides or []), source=str(p))
