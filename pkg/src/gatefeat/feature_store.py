"""Feature data model and on-disk persistence.

Layout::

    <root>/<dataset_id>/<image_id>/<combo_id>.safetensors
    <root>/<dataset_id>/manifest.json

Each feature file is a safetensors container: one named float32 tensor per
conv map (``conv/<name>``) plus an optional ``attention`` tensor. Provenance
lives in the container's string key-value header so the file stays readable
from any language with a safetensors reader.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from safetensors import SafetensorError
from safetensors.numpy import load as st_load
from safetensors.numpy import save as st_save

from .errors import CorruptFileError, SchemaMismatchError, ValidationError

SCHEMA_VERSION = 1
FEATURE_EXT = ".safetensors"
MANIFEST_NAME = "manifest.json"
DEFAULT_MAX_TIMESTEP = 999

PROMPT_SOURCES = ("fixed_text", "per_image_caption")
CONTROL_TYPES = ("canny",)


@dataclass(frozen=True)
class TechniqueCombo:
    """Which generation techniques are active for one feature group."""

    combo_id: str
    prompt_source: str = "fixed_text"
    prompt_text: str = ""
    use_controlnet: bool = False
    control_type: str = "canny"
    use_lora: bool = False
    lora_id: str | None = None
    cfg_scale: float = 1.0
    denoise_from: int | None = None
    denoise_steps: int = 5

    def __post_init__(self):
        if not self.combo_id:
            raise ValidationError("combo_id must be non-empty")
        if self.prompt_source not in PROMPT_SOURCES:
            raise ValidationError(f"unknown prompt_source {self.prompt_source!r}")
        if self.control_type not in CONTROL_TYPES:
            raise ValidationError(f"unknown control_type {self.control_type!r}")
        if self.use_lora and not self.lora_id:
            raise ValidationError(f"combo {self.combo_id!r}: use_lora requires lora_id")
        if not self.cfg_scale >= 1.0:
            raise ValidationError(f"combo {self.combo_id!r}: cfg_scale must be >= 1")
        if self.denoise_steps < 1:
            raise ValidationError("denoise_steps must be >= 1")

    @property
    def is_identity(self) -> bool:
        return (
            self.prompt_source == "fixed_text"
            and not self.use_controlnet
            and not self.use_lora
            and self.cfg_scale == 1.0
            and self.denoise_from is None
        )

    def validate_for_timestep(self, timestep: int) -> None:
        if self.denoise_from is not None and self.denoise_from <= timestep:
            raise ValidationError(
                f"combo {self.combo_id!r}: denoise_from={self.denoise_from} must exceed "
                f"extraction timestep {timestep}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "combo_id": self.combo_id,
            "prompt_source": self.prompt_source,
            "prompt_text": self.prompt_text,
            "use_controlnet": self.use_controlnet,
            "control_type": self.control_type,
            "use_lora": self.use_lora,
            "lora_id": self.lora_id,
            "cfg_scale": self.cfg_scale,
            "denoise_from": self.denoise_from,
            "denoise_steps": self.denoise_steps,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TechniqueCombo":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown combo fields: {sorted(extra)}")
        return cls(**d)


def all_off(combo_id: str = "base", prompt_text: str = "") -> TechniqueCombo:
    return TechniqueCombo(combo_id=combo_id, prompt_text=prompt_text)


@dataclass
class FeatureBundle:
    image_id: str
    combo_id: str
    timestep: int
    conv_features: list[tuple[str, np.ndarray]]
    attention_feature: np.ndarray | None = None
    attention_tokens: list[str] | None = None
    seed: int = 0
    model_fingerprint: str = ""
    max_timestep: int = DEFAULT_MAX_TIMESTEP
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.conv_features = [
            (str(name), np.ascontiguousarray(arr, dtype=np.float32)) for name, arr in self.conv_features
        ]
        if self.attention_feature is not None:
            self.attention_feature = np.ascontiguousarray(self.attention_feature, dtype=np.float32)
            if self.attention_tokens is not None:
                self.attention_tokens = list(self.attention_tokens)

    def validate(self) -> None:
        if not self.image_id or not self.combo_id:
            raise ValidationError("image_id and combo_id must be non-empty")
        for part in (self.image_id, self.combo_id):
            if "/" in part or "\\" in part or part in (".", ".."):
                raise ValidationError(f"identifier {part!r} is not a valid path component")
        if not 0 <= self.timestep <= self.max_timestep:
            raise ValidationError(f"timestep {self.timestep} outside [0, {self.max_timestep}]")
        names = [n for n, _ in self.conv_features]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate conv feature names: {names}")
        spatial = {arr.shape[1:] for _, arr in self.conv_features}
        if any(arr.ndim != 3 for _, arr in self.conv_features):
            raise ValidationError("conv features must be (channels, height, width)")
        if len(spatial) > 1:
            raise ValidationError(f"conv features disagree on spatial size: {sorted(spatial)}")
        if self.attention_feature is not None:
            if self.attention_feature.ndim != 3:
                raise ValidationError("attention feature must be (tokens, height, width)")
            if self.attention_tokens is None:
                raise ValidationError("attention feature requires attention_tokens")
            if len(self.attention_tokens) != self.attention_feature.shape[0]:
                raise ValidationError(
                    f"{len(self.attention_tokens)} tokens for attention feature with "
                    f"{self.attention_feature.shape[0]} maps"
                )

    def conv_concat(self, names: list[str] | None = None) -> np.ndarray:
        """Channel-concatenated conv maps, optionally restricted to ``names``."""
        feats = dict(self.conv_features)
        order = names if names is not None else [n for n, _ in self.conv_features]
        missing = [n for n in order if n not in feats]
        if missing:
            raise KeyError(f"bundle has no conv features {missing}")
        return np.concatenate([feats[n] for n in order], axis=0)

    def equals(self, other: "FeatureBundle") -> bool:
        """Exact equality, bit-level for array payloads."""
        if (
            self.image_id,
            self.combo_id,
            self.timestep,
            self.seed,
            self.model_fingerprint,
            self.max_timestep,
            self.attention_tokens,
            self.extra,
        ) != (
            other.image_id,
            other.combo_id,
            other.timestep,
            other.seed,
            other.model_fingerprint,
            other.max_timestep,
            other.attention_tokens,
            other.extra,
        ):
            return False
        if [n for n, _ in self.conv_features] != [n for n, _ in other.conv_features]:
            return False
        for (_, a), (_, b) in zip(self.conv_features, other.conv_features):
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        if (self.attention_feature is None) != (other.attention_feature is None):
            return False
        if self.attention_feature is not None:
            a, b = self.attention_feature, other.attention_feature
            return a.shape == b.shape and a.tobytes() == b.tobytes()
        return True


def bundle_path(root: str | os.PathLike, dataset_id: str, image_id: str, combo_id: str) -> Path:
    return Path(root) / dataset_id / image_id / f"{combo_id}{FEATURE_EXT}"


def _encode(bundle: FeatureBundle) -> bytes:
    tensors = {f"conv/{name}": arr for name, arr in bundle.conv_features}
    if bundle.attention_feature is not None:
        tensors["attention"] = bundle.attention_feature
    metadata = {
        "schema_version": str(SCHEMA_VERSION),
        "image_id": bundle.image_id,
        "combo_id": bundle.combo_id,
        "timestep": str(bundle.timestep),
        "max_timestep": str(bundle.max_timestep),
        "seed": str(bundle.seed),
        "model_fingerprint": bundle.model_fingerprint,
        "conv_names": json.dumps([n for n, _ in bundle.conv_features]),
        "attention_tokens": json.dumps(bundle.attention_tokens),
        "extra": json.dumps(bundle.extra, sort_keys=True),
    }
    return st_save(tensors, metadata=metadata)


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def save_bundle(
    bundle: FeatureBundle, root: str | os.PathLike, dataset_id: str = "default"
) -> Path:
    """Validate and atomically write ``bundle``; returns the file path."""
    bundle.validate()
    path = bundle_path(root, dataset_id, bundle.image_id, bundle.combo_id)
    _atomic_write(path, _encode(bundle))
    return path


def _read_header(raw: bytes) -> dict[str, Any]:
    if len(raw) < 8:
        raise CorruptFileError("file shorter than safetensors header")
    (n,) = struct.unpack("<Q", raw[:8])
    if n > len(raw) - 8:
        raise CorruptFileError("truncated safetensors header")
    try:
        header = json.loads(raw[8 : 8 + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unparseable header: {exc}") from exc
    return header


def load_bundle(path: str | os.PathLike) -> FeatureBundle:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    header = _read_header(raw)
    meta = header.get("__metadata__") or {}
    version = meta.get("schema_version")
    if version is None:
        raise CorruptFileError(f"{path}: missing schema_version")
    if version != str(SCHEMA_VERSION):
        raise SchemaMismatchError(f"{path}: schema_version {version}, expected {SCHEMA_VERSION}")
    try:
        tensors = st_load(raw)
    except (SafetensorError, ValueError) as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
    try:
        names = json.loads(meta["conv_names"])
        conv = [(n, tensors[f"conv/{n}"]) for n in names]
        tokens = json.loads(meta["attention_tokens"])
        bundle = FeatureBundle(
            image_id=meta["image_id"],
            combo_id=meta["combo_id"],
            timestep=int(meta["timestep"]),
            conv_features=conv,
            attention_feature=tensors.get("attention"),
            attention_tokens=tokens,
            seed=int(meta["seed"]),
            model_fingerprint=meta["model_fingerprint"],
            max_timestep=int(meta["max_timestep"]),
            extra=json.loads(meta["extra"]),
        )
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: inconsistent metadata ({exc})") from exc
    return bundle


@dataclass
class ManifestEntry:
    image_id: str
    image_path: str
    features: dict[str, str] = field(default_factory=dict)
    label_path: str | None = None


@dataclass
class Manifest:
    dataset_id: str
    entries: list[ManifestEntry] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def entry(self, image_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)

    def upsert(self, entry: ManifestEntry) -> None:
        for i, e in enumerate(self.entries):
            if e.image_id == entry.image_id:
                self.entries[i] = entry
                return
        self.entries.append(entry)

    def combo_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            for c in e.features:
                seen.setdefault(c, None)
        return list(seen)

    def validate(self, base: Path | None = None, check_files: bool = True) -> None:
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate image_ids in manifest: {dupes}")
        if not check_files:
            return
        for e in self.entries:
            paths = [e.image_path, *e.features.values()]
            if e.label_path:
                paths.append(e.label_path)
            for p in paths:
                full = Path(p) if base is None or Path(p).is_absolute() else base / p
                if not full.exists():
                    raise ValidationError(f"manifest entry {e.image_id!r}: missing file {full}")


def manifest_path(root: str | os.PathLike, dataset_id: str) -> Path:
    return Path(root) / dataset_id / MANIFEST_NAME


def save_manifest(manifest: Manifest, root: str | os.PathLike) -> Path:
    manifest.validate(check_files=False)
    doc = {
        "schema_version": manifest.schema_version,
        "dataset_id": manifest.dataset_id,
        "entries": [
            {
                "image_id": e.image_id,
                "image_path": e.image_path,
                "features": dict(e.features),
                "label_path": e.label_path,
            }
            for e in manifest.entries
        ],
    }
    path = manifest_path(root, manifest.dataset_id)
    _atomic_write(path, (json.dumps(doc, indent=2) + "\n").encode())
    return path


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> Manifest:
    """Load a manifest; relative feature paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatchError(
            f"{path}: schema_version {doc.get('schema_version')}, expected {SCHEMA_VERSION}"
        )
    manifest = Manifest(
        dataset_id=doc["dataset_id"],
        entries=[ManifestEntry(**e) for e in doc["entries"]],
        schema_version=doc["schema_version"],
    )
    manifest.validate(base=path.parent, check_files=check_files)
    return manifest


def resolve_feature_path(manifest_file: str | os.PathLike, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else Path(manifest_file).parent / p
