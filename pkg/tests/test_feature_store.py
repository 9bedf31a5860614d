import json
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatefeat import feature_store as fs
from gatefeat.errors import CorruptFileError, SchemaMismatchError, ValidationError
from gatefeat.feature_store import (
    FeatureBundle,
    Manifest,
    ManifestEntry,
    TechniqueCombo,
    load_bundle,
    load_manifest,
    save_bundle,
    save_manifest,
)


def make_bundle(rng, n=4, attention=True, image_id="img0", combo_id="base"):
    conv = [(f"up{i}", rng.normal(size=(3 + i, 8, 8))) for i in range(n)]
    att = rng.random((5, 8, 8)) if attention else None
    toks = [f"tok{i}" for i in range(5)] if attention else None
    return FeatureBundle(image_id, combo_id, 50, conv, att, toks, seed=7, model_fingerprint="fp")


def test_round_trip_four_maps(tmp_path, rng):
    b = make_bundle(rng)
    p = save_bundle(b, tmp_path, "ds")
    assert p == tmp_path / "ds" / "img0" / "base.safetensors"
    assert load_bundle(p).equals(b)


def test_optional_attention_none(tmp_path, rng):
    b = make_bundle(rng, attention=False)
    got = load_bundle(save_bundle(b, tmp_path))
    assert got.attention_feature is None and got.attention_tokens is None


def _payload(raw):
    (n,) = struct.unpack("<Q", raw[:8])
    return raw[8 + n :]


def test_second_save_overwrites(tmp_path, rng):
    a, b = make_bundle(rng), make_bundle(rng)
    p = save_bundle(a, tmp_path)
    first = _payload(p.read_bytes())
    save_bundle(b, tmp_path)
    # header key order is not stable across writes; the tensor payload is
    assert _payload(p.read_bytes()) == _payload(fs._encode(b)) != first
    assert load_bundle(p).equals(b)


def test_truncated_file_is_corrupt(tmp_path, rng):
    p = save_bundle(make_bundle(rng), tmp_path)
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptFileError):
        load_bundle(p)
    p.write_bytes(raw[:4])
    with pytest.raises(CorruptFileError):
        load_bundle(p)


def _rewrite_meta(p, **updates):
    raw = p.read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + n])
    header["__metadata__"].update(updates)
    new = json.dumps(header).encode()
    new += b" " * ((8 - len(new) % 8) % 8)
    p.write_bytes(struct.pack("<Q", len(new)) + new + raw[8 + n :])


def test_schema_bump_is_a_distinct_error(tmp_path, rng):
    p = save_bundle(make_bundle(rng), tmp_path)
    _rewrite_meta(p, schema_version=str(fs.SCHEMA_VERSION + 1))
    with pytest.raises(SchemaMismatchError):
        load_bundle(p)
    assert not issubclass(SchemaMismatchError, CorruptFileError)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_bundle(tmp_path / "nope.safetensors")


def test_invariants_rejected_before_write(tmp_path, rng):
    bad = FeatureBundle("i", "c", 50, [("a", rng.normal(size=(2, 8, 8))), ("b", rng.normal(size=(2, 4, 4)))])
    with pytest.raises(ValidationError):
        save_bundle(bad, tmp_path)
    assert not any(tmp_path.rglob("*"))
    with pytest.raises(ValidationError):
        save_bundle(FeatureBundle("i", "c", 5000, []), tmp_path)
    with pytest.raises(ValidationError):
        save_bundle(FeatureBundle("i", "c", 5, [], rng.random((3, 4, 4)), ["a"]), tmp_path)


def test_crash_between_write_and_rename_leaves_nothing(tmp_path, rng, monkeypatch):
    b = make_bundle(rng)

    def boom(src, dst):
        raise OSError("simulated crash")

    monkeypatch.setattr(fs.os, "replace", boom)
    with pytest.raises(OSError):
        save_bundle(b, tmp_path)
    leftovers = [p for p in tmp_path.rglob("*") if p.is_file()]
    assert leftovers == []


def test_crash_keeps_previous_version(tmp_path, rng, monkeypatch):
    a = make_bundle(rng)
    p = save_bundle(a, tmp_path)
    monkeypatch.setattr(fs.os, "replace", lambda s, d: (_ for _ in ()).throw(OSError("crash")))
    with pytest.raises(OSError):
        save_bundle(make_bundle(rng), tmp_path)
    assert load_bundle(p).equals(a)


def test_manifest_round_trip_and_checks(tmp_path, rng):
    p = save_bundle(make_bundle(rng), tmp_path, "ds")
    img = tmp_path / "img0.png"
    img.write_bytes(b"x")
    m = Manifest("ds", [ManifestEntry("img0", str(img), {"base": os.path.relpath(p, tmp_path / "ds")})])
    mp = save_manifest(m, tmp_path)
    got = load_manifest(mp)
    assert got.entries == m.entries and got.combo_ids() == ["base"]
    p.unlink()
    with pytest.raises(ValidationError):
        load_manifest(mp)
    dup = Manifest("ds", [ManifestEntry("a", "x"), ManifestEntry("a", "y")])
    with pytest.raises(ValidationError):
        save_manifest(dup, tmp_path)
    doc = json.loads(mp.read_text())
    doc["schema_version"] += 1
    mp.write_text(json.dumps(doc))
    with pytest.raises(SchemaMismatchError):
        load_manifest(mp, check_files=False)


def test_combo_invariants():
    with pytest.raises(ValidationError):
        TechniqueCombo("c", use_lora=True)
    with pytest.raises(ValidationError):
        TechniqueCombo("c", cfg_scale=0.5)
    with pytest.raises(ValidationError):
        TechniqueCombo("c", denoise_from=40).validate_for_timestep(50)
    c = TechniqueCombo("c", use_controlnet=True, denoise_from=60)
    assert TechniqueCombo.from_dict(c.to_dict()) == c
    assert fs.all_off().is_identity


arrays = st.integers(1, 4).flatmap(
    lambda c: st.lists(st.floats(-1e6, 1e6, width=32), min_size=c * 9, max_size=c * 9).map(
        lambda v, c=c: np.asarray(v, dtype=np.float32).reshape(c, 3, 3)
    )
)


@settings(max_examples=25, deadline=None)
@given(st.lists(arrays, min_size=1, max_size=3), st.integers(0, 999), st.integers(0, 2**31 - 1))
def test_round_trip_property(tmp_path_factory, maps, t, seed):
    root = tmp_path_factory.mktemp("rt")
    b = FeatureBundle("i", "c", t, [(f"m{i}", m) for i, m in enumerate(maps)], seed=seed)
    assert load_bundle(save_bundle(b, root)).equals(b)
