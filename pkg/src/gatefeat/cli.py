"""Command-line entry point.

Subcommands: extract, gate-eval, shift-score, train, eval, ablate, visualize.
Every table is printed as text and written as JSON lines next to any figure.

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure, 3 some
items failed (see the summary).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from . import __version__
from .amalgamation import AssignerEnsemble, TrainConfig, TrainResult
from .config import RunConfig, load_config, open_splits
from .downstream.correspondence import (
    ConvCorrespondenceHead,
    CorrespondencePair,
    KeypointSet,
    correspond_nn,
    pck,
    train_correspondence,
)
from .downstream.datasets import load_mask, load_rgb
from .downstream.metrics import miou
from .downstream.segmentation import (
    PixelClassifier,
    SegmenterConfig,
    TrainedSegmenter,
    predict_segmentation,
    run_ablation,
    train_segmenter,
)
from .errors import GateFeatError, ValidationError
from .extraction import ExtractionConfig, TinyBackend, dump_block_activations, extract, preprocess_geometry
from .extraction.backend import DiffusionBackend
from .feature_store import (
    FEATURE_EXT,
    Manifest,
    ManifestEntry,
    TechniqueCombo,
    all_off,
    bundle_path,
    load_bundle,
    load_manifest,
    manifest_path,
    resolve_feature_path,
    save_bundle,
    save_manifest,
)
from .gate_harness import Img2ImgPipeline, evaluate_technique
from .shift_metric import LAPLACIAN_4, LAPLACIAN_8, bundle_shift_score

log = logging.getLogger("gatefeat")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3


# ---------------------------------------------------------------- plumbing


def _tiny_backend(cfg: RunConfig) -> DiffusionBackend:
    return TinyBackend(seed=cfg.model.tiny_seed)


def _diffusers_backend(cfg: RunConfig) -> DiffusionBackend:
    from .extraction.diffusers_backend import DiffusersBackend

    path = cfg.model.path
    if Path(path).suffix or Path(cfg.resolve_path(path)).exists():
        path = str(cfg.resolve_path(path))
    cn = str(cfg.resolve_path(cfg.model.controlnet_path)) if cfg.model.controlnet_path else None
    return DiffusersBackend.from_pretrained(path, cn, cfg.model.cache_dir, cfg.model.device)


BACKENDS: dict[str, Callable[[RunConfig], DiffusionBackend]] = {
    "tiny": _tiny_backend,
    "diffusers": _diffusers_backend,
}

# Img2Img generators for gate-eval; extra entries may be registered by callers.
GENERATORS: dict[str, Callable[..., Any]] = {
    "img2img": lambda cfg, backend, registry, captioner: Img2ImgPipeline(
        backend, registry, captioner, cfg.extraction.resize_short_side
    ),
}


def make_backend(cfg: RunConfig) -> DiffusionBackend:
    return BACKENDS[cfg.model.backend](cfg)


def write_jsonl(path: Path, records: Iterable[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def format_table(rows: list[dict], columns: list[str]) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        if isinstance(v, (list, tuple)):
            return "+".join(map(str, v))
        return str(v)

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def emit_table(out_dir: Path, name: str, rows: list[dict], columns: list[str]) -> str:
    text = format_table(rows, columns)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.txt").write_text(text + "\n")
    write_jsonl(out_dir / f"{name}.jsonl", rows)
    print(text)
    return text


# ---------------------------------------------------------------- images


def _pair_image_id(path: Path) -> str:
    return f"{path.parent.name}_{path.stem}"


def split_images(cfg: RunConfig, adapters: dict, splits=("train", "test"), limit=None):
    """(split, image_id, image_path, label_path) for every image of the requested splits."""
    limit = limit if limit is not None else cfg.dataset.limit
    out = []
    for split in splits:
        if split not in adapters:
            continue
        items = []
        if cfg.task == "segmentation":
            for s in adapters[split]:
                items.append((split, s.image_id, s.image_path, s.mask_path))
        else:
            seen = {}
            for pair in adapters[split]:
                for p in (pair.src_path, pair.tgt_path):
                    seen.setdefault(_pair_image_id(p), p)
            items = [(split, i, p, None) for i, p in seen.items()]
        out += items[:limit] if limit is not None else items
    return out


def split_dataset_id(cfg: RunConfig, split: str) -> str:
    return f"{cfg.dataset.dataset_id}-{split}"


# ---------------------------------------------------------------- extract


def extraction_config(cfg: RunConfig, combo: TechniqueCombo, attention_only: bool = False) -> ExtractionConfig:
    ex = cfg.extraction
    has_att_combo = cfg.attention_combo is not None
    return ExtractionConfig(
        timestep=ex.timestep,
        combo=combo,
        capture_conv=not attention_only,
        capture_attention=attention_only or (ex.capture_attention and not has_att_combo),
        seed=cfg.seed_for(combo.combo_id),
        attention_resolution=tuple(ex.attention_resolution),
        base_prompt=cfg.base_prompt,
        conv_blocks=ex.conv_blocks,
        resize_short_side=ex.resize_short_side,
    )


_WORKER: dict[str, Any] = {}


def _init_worker(cfg: RunConfig):
    torch.set_num_threads(1)
    _WORKER["backend"] = make_backend(cfg)
    _WORKER["registry"] = cfg.registry()
    _WORKER["captioner"] = cfg.make_captioner()


def _extract_image(cfg: RunConfig, job, force: bool, backend=None, registry=None, captioner=None):
    split, image_id, image_path, _label = job
    backend = backend or _WORKER["backend"]
    registry = registry if registry is not None else _WORKER.get("registry")
    captioner = captioner if captioner is not None else _WORKER.get("captioner")
    dataset_id = split_dataset_id(cfg, split)
    done, new, errors = {}, 0, []
    image = None
    for combo in cfg.all_combos():
        path = bundle_path(cfg.features_dir, dataset_id, image_id, combo.combo_id)
        rel = f"{image_id}/{combo.combo_id}{FEATURE_EXT}"
        if path.exists() and not force:
            done[combo.combo_id] = rel
            continue
        try:
            if image is None:
                image = load_rgb(image_path)
            att_only = cfg.attention_combo is not None and combo.combo_id == cfg.attention_combo.combo_id
            bundle = extract(
                image, extraction_config(cfg, combo, att_only), backend, registry, captioner, image_id
            )
            save_bundle(bundle, cfg.features_dir, dataset_id)
            done[combo.combo_id] = rel
            new += 1
        except GateFeatError as e:
            errors.append(f"{image_id}/{combo.combo_id}: {e}")
        except Exception as e:  # noqa: BLE001 - one bad image must not stop the run
            errors.append(f"{image_id}/{combo.combo_id}: {type(e).__name__}: {e}")
    return job, done, new, errors


def cmd_extract(cfg: RunConfig, args) -> int:
    adapters = open_splits(cfg)
    jobs = split_images(cfg, adapters, limit=args.limit)
    results = []
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers, initializer=_init_worker, initargs=(cfg,)) as pool:
            futs = [pool.submit(_extract_image, cfg, j, args.force) for j in jobs]
            results = [f.result() for f in futs]
    else:
        backend = make_backend(cfg)
        registry, captioner = cfg.registry(), cfg.make_captioner()
        for j in jobs:
            results.append(_extract_image(cfg, j, args.force, backend, registry, captioner))
        if captioner is not None and cfg.captioner.get("cache"):
            captioner.save_cache(cfg.captioner["cache"])

    manifests: dict[str, Manifest] = {}
    failures, new_total, records = [], 0, []
    for (split, image_id, image_path, label), done, new, errors in results:
        ds = split_dataset_id(cfg, split)
        if ds not in manifests:
            mp = manifest_path(cfg.features_dir, ds)
            manifests[ds] = load_manifest(mp, check_files=False) if mp.exists() else Manifest(ds)
        manifests[ds].upsert(
            ManifestEntry(image_id, str(Path(image_path).resolve()), done, str(Path(label).resolve()) if label else None)
        )
        new_total += new
        failures += errors
        records.append({"split": split, "image_id": image_id, "new": new, "combos": sorted(done), "errors": errors})
        for e in errors:
            log.error("extraction failed: %s", e)
    for m in manifests.values():
        save_manifest(m, cfg.features_dir)
    write_jsonl(cfg.out / "extract" / "extract.jsonl", records)
    summary = {
        "images": len(jobs),
        "combos": len(cfg.all_combos()),
        "new_bundles": new_total,
        "failures": len(failures),
    }
    (cfg.out / "extract" / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"extracted {new_total} new bundles for {len(jobs)} images x {len(cfg.all_combos())} combos; "
          f"{len(failures)} failures")
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------- gate-eval


def _gate_reference(cfg: RunConfig) -> TechniqueCombo:
    return cfg.combo(cfg.gate.reference) if cfg.gate.reference else all_off("reference")


def _feature_scorer(cfg: RunConfig, backend, registry, captioner):
    from .extraction import extract as _extract

    cache: dict[int, tuple] = {}

    def refs(image):
        key = id(image)
        if key not in cache:
            base = ExtractionConfig(
                timestep=cfg.shift.reference_timestep, combo=all_off("reference"), seed=cfg.seed,
                base_prompt=cfg.base_prompt, resize_short_side=cfg.extraction.resize_short_side,
                conv_blocks=cfg.extraction.conv_blocks,
            )
            cache[key] = (
                _extract(image, base, backend, registry, captioner),
                _extract(image, replace(base, timestep=cfg.shift.anchor_timestep, combo=all_off("anchor")),
                         backend, registry, captioner),
            )
        return cache[key]

    def score(image, combo):
        ref, anchor = refs(image)
        b = _extract(image, replace(extraction_config(cfg, combo), capture_attention=False), backend, registry,
                     captioner)
        return bundle_shift_score(b, ref, anchor, stencil=_stencil(cfg))

    return score


def cmd_gate_eval(cfg: RunConfig, args) -> int:
    combos = [cfg.combo(c) for c in args.combo] if args.combo else [
        c for c in cfg.combos if c.combo_id != cfg.gate.reference
    ]
    if cfg.gate.generator not in GENERATORS:
        raise ValidationError(f"unknown gate generator {cfg.gate.generator!r}; have {sorted(GENERATORS)}")
    adapters = open_splits(cfg)
    images = split_images(cfg, adapters, ("train",), limit=args.limit)
    backend = make_backend(cfg)
    registry, captioner = cfg.registry(), cfg.make_captioner()
    gen = GENERATORS[cfg.gate.generator](cfg, backend, registry, captioner)
    scorer = _feature_scorer(cfg, backend, registry, captioner) if args.feature_score else None
    ref = _gate_reference(cfg)
    g = cfg.gate
    rows, failures = [], []
    for combo in combos:
        out = cfg.out / "gate" / combo.combo_id
        records = []
        for _split, image_id, image_path, _ in images:
            try:
                image = load_rgb(image_path)
                rep = evaluate_technique(
                    image, combo, gen, g.strength, g.steps, cfg.seed_for(combo.combo_id), g.tau,
                    cfg.base_prompt, ref, scorer, image_id,
                )
                rep.save(out / image_id)
                records.append(rep.to_record())
            except Exception as e:  # noqa: BLE001
                log.error("gate-eval failed on %s/%s: %s", combo.combo_id, image_id, e)
                failures.append(f"{combo.combo_id}/{image_id}: {e}")
        write_jsonl(out / "reports.jsonl", records)
        counts = {v: sum(r["verdict"] == v for r in records) for v in ("helps", "no_effect", "hurts")}
        mean_delta = (
            float(np.mean([r["pixel_similarity"]["candidate"] - r["pixel_similarity"]["reference"] for r in records]))
            if records else float("nan")
        )
        majority = max(counts, key=counts.get) if records else "n/a"
        rows.append({"combo_id": combo.combo_id, "images": len(records), **counts,
                     "mean_ssim_delta": mean_delta, "majority": majority})
    emit_table(cfg.out / "gate", "summary", rows,
               ["combo_id", "images", "helps", "no_effect", "hurts", "mean_ssim_delta", "majority"])
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------- shift-score


def _stencil(cfg: RunConfig):
    return LAPLACIAN_8 if cfg.shift.stencil == "8" else LAPLACIAN_4


def cmd_shift_score(cfg: RunConfig, args) -> int:
    from .plotting import save_pca_panels, save_score_bars

    combos = [cfg.combo(c) for c in args.combo] if args.combo else list(cfg.combos)
    adapters = open_splits(cfg)
    images = split_images(cfg, adapters, ("train",), limit=args.limit)
    backend = make_backend(cfg)
    registry, captioner = cfg.registry(), cfg.make_captioner()
    ref_combo, anchor_combo = all_off("reference"), all_off("anchor")
    base = ExtractionConfig(
        combo=ref_combo, seed=cfg.seed, base_prompt=cfg.base_prompt,
        resize_short_side=cfg.extraction.resize_short_side, conv_blocks=cfg.extraction.conv_blocks,
    )
    out = cfg.out / "shift"
    per_image, failures, figures = [], [], []
    scores: dict[str, list[float]] = {}
    for _split, image_id, image_path, _ in images:
        try:
            image = load_rgb(image_path)
            ref = extract(image, replace(base, timestep=cfg.shift.reference_timestep), backend, registry,
                          captioner, image_id)
            anchor = extract(image, replace(base, timestep=cfg.shift.anchor_timestep, combo=anchor_combo),
                             backend, registry, captioner, image_id)
            bundles = [("reference", ref), ("anchor", anchor)]
            for c in combos:
                ec = replace(extraction_config(cfg, c), capture_attention=False, capture_conv=True)
                bundles.append((c.combo_id, extract(image, ec, backend, registry, captioner, image_id)))
            for cid, b in bundles:
                rep = bundle_shift_score(b, ref, anchor, stencil=_stencil(cfg), border=cfg.shift.border)
                scores.setdefault(cid, []).append(rep.score)
                per_image.append({**rep.to_dict(), "combo_id": cid, "timestep": b.timestep})
            if not args.no_figures:
                entry = args.pca_entry or ref.conv_features[0][0]
                feats = [(cid, dict(b.conv_features)[entry]) for cid, b in bundles]
                p = save_pca_panels(feats, out / "pca" / f"{image_id}.png", joint=True)
                figures.append({"image_id": image_id, "entry": entry, "path": str(p),
                                "panels": [cid for cid, _ in feats]})
        except Exception as e:  # noqa: BLE001
            log.error("shift-score failed on %s: %s", image_id, e)
            failures.append(image_id)
    write_jsonl(out / "per_image.jsonl", per_image)
    rows = [{"combo_id": cid, "score": float(np.mean(v)), "std": float(np.std(v)), "images": len(v)}
            for cid, v in scores.items()]
    rows.sort(key=lambda r: (-r["score"], r["combo_id"]))
    emit_table(out, "scores", rows, ["combo_id", "score", "std", "images"])
    if rows and not args.no_figures:
        save_score_bars(rows, out / "scores.png")
        figures.append({"path": str(out / "scores.png"), "table": "scores.jsonl"})
    write_jsonl(out / "figures.jsonl", figures)
    if failures and not rows:
        return EXIT_RUNTIME
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------- features


def _load_split(cfg: RunConfig, split: str):
    """Stacked conv features (S, b, c, h, w), appended maps or None, labels or None, entries."""
    mp = manifest_path(cfg.features_dir, split_dataset_id(cfg, split))
    if not mp.exists():
        raise ValidationError(f"no features for split {split!r} at {mp}; run `extract` first")
    m = load_manifest(mp, check_files=True)
    combo_ids = [c.combo_id for c in cfg.combos]
    feats, att, labels, ids = {c: [] for c in combo_ids}, [], [], []
    for e in m.entries:
        missing = [c for c in combo_ids if c not in e.features]
        if missing:
            raise ValidationError(f"image {e.image_id} lacks features for combos {missing}")
        bundles = {c: load_bundle(resolve_feature_path(mp, e.features[c])) for c in combo_ids}
        for c in combo_ids:
            feats[c].append(bundles[c].conv_concat())
        a = None
        if cfg.attention_combo is not None:
            a = load_bundle(resolve_feature_path(mp, e.features[cfg.attention_combo.combo_id])).attention_feature
        elif cfg.extraction.capture_attention:
            a = bundles[combo_ids[0]].attention_feature
        if cfg.downstream.extra_features:
            extra = np.load(cfg.resolve_path(cfg.downstream.extra_features) / f"{e.image_id}.npy")
            a = extra if a is None else _cat_resized(a, extra)
        if a is not None:
            att.append(a)
        labels.append(load_mask(e.label_path) if e.label_path else None)
        ids.append(e.image_id)
    stacked = {c: np.stack(v) for c, v in feats.items()}
    appended = np.stack(att) if att else None
    return stacked, appended, labels, ids, m


def _cat_resized(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-2:] != b.shape[-2:]:
        t = torch.nn.functional.interpolate(torch.from_numpy(b[None]).float(), size=a.shape[-2:], mode="bilinear",
                                            align_corners=False)
        b = t[0].numpy()
    return np.concatenate([a, b], axis=0)


def _segmenter_config(cfg: RunConfig, seed: int | None = None) -> SegmenterConfig:
    a, d = cfg.amalgamation, cfg.downstream
    train = cfg.train if seed is None else replace(cfg.train, seed=seed)
    return SegmenterConfig(
        classes=cfg.dataset.classes, ensemble_size=d.ensemble_size, hidden=tuple(d.hidden), n_assigners=a.n,
        arch=a.arch, assigner_hidden=a.hidden, gamma1=a.gamma1, gamma2=a.gamma2, batch_size=d.batch_size,
        train=train,
    )


def _stack_labels(labels: list) -> np.ndarray:
    if any(lab is None for lab in labels):
        raise ValidationError("segmentation training needs a mask for every image")
    shapes = {lab.shape for lab in labels}
    if len(shapes) > 1:
        raise ValidationError(f"masks differ in size {sorted(shapes)}; resize the dataset first")
    return np.stack(labels)


def _labels_in_crop(cfg: RunConfig, labels: list) -> list[np.ndarray]:
    """Masks cropped the same way as their images were before extraction."""
    out = []
    for lab in labels:
        g = preprocess_geometry(lab.shape[0], lab.shape[1], cfg.extraction.resize_short_side)
        t = torch.from_numpy(np.asarray(lab, dtype=np.float32))[None, None]
        t = torch.nn.functional.interpolate(t, size=g.resized, mode="nearest")[0, 0]
        ch, cw = g.size
        out.append(t[g.top : g.top + ch, g.left : g.left + cw].numpy().astype(np.int64))
    return out


# ---------------------------------------------------------------- train / eval


def _save_segmenter(model: TrainedSegmenter, cfg: RunConfig, out: Path) -> None:
    model.ensemble.save(out / "assigners")
    save_file({k: v.contiguous() for k, v in model.classifier.state_dict().items()}, str(out / "classifier.safetensors"))
    meta = {
        "task": "segmentation",
        "input_dim": model.classifier.input_dim,
        "classes": model.classifier.classes,
        "ensemble_size": model.classifier.ensemble_size,
        "hidden": list(model.config.hidden),
        "combos": [c.combo_id for c in cfg.combos],
        "segmenter": {k: v for k, v in asdict(model.config).items() if k != "train"},
        "train": asdict(model.config.train),
    }
    (out / "model.json").write_text(json.dumps(meta, indent=2) + "\n")


def _load_segmenter(out: Path) -> TrainedSegmenter:
    meta = json.loads((out / "model.json").read_text())
    ens = AssignerEnsemble.load(out / "assigners")
    clf = PixelClassifier(meta["input_dim"], meta["classes"], meta["ensemble_size"], tuple(meta["hidden"]))
    clf.load_state_dict(load_file(str(out / "classifier.safetensors")))
    seg = dict(meta["segmenter"])
    seg["hidden"] = tuple(seg["hidden"])
    config = SegmenterConfig(**seg, train=TrainConfig(**meta["train"]))

    return TrainedSegmenter(ens, clf, config, TrainResult()).eval()


def _pair_tensors(cfg: RunConfig, adapters, split: str):
    stacked, _att, _labels, ids, _m = _load_split(cfg, split)
    index = {i: k for k, i in enumerate(ids)}
    combo_ids = [c.combo_id for c in cfg.combos]
    X = torch.from_numpy(np.stack([stacked[c] for c in combo_ids], axis=1)).float()  # (S, b, c, h, w)
    pairs = []
    for p in adapters[split]:
        si, ti = _pair_image_id(p.src_path), _pair_image_id(p.tgt_path)
        if si not in index or ti not in index:
            continue
        pairs.append((p, X[index[si]], X[index[ti]]))
    return pairs


def _to_processed(cfg: RunConfig, kps: KeypointSet) -> tuple[KeypointSet, Any]:
    h, w = kps.image_size
    g = preprocess_geometry(h, w, cfg.extraction.resize_short_side)
    ch, cw = g.size
    xy = np.clip(g.forward(kps.xy), 0, [cw - 1, ch - 1])
    return KeypointSet(list(kps.names), xy, (ch, cw)), g


def _correspondence_head(cfg: RunConfig, b: int, c: int, setting: str | None = None) -> ConvCorrespondenceHead:
    a = cfg.amalgamation
    setting = setting or cfg.downstream.correspondence
    torch.manual_seed(cfg.train.seed)
    ens = AssignerEnsemble(a.n if b > 1 else 1, b, c, a.arch, a.hidden, a.gamma1, a.gamma2)
    return ConvCorrespondenceHead(ens, conv=setting == "conv")


def cmd_train(cfg: RunConfig, args) -> int:
    from .plotting import save_weight_stats

    out = cfg.out / "train"
    out.mkdir(parents=True, exist_ok=True)
    if cfg.task == "segmentation":
        stacked, A, labels, _ids, _ = _load_split(cfg, "train")
        X = np.stack([stacked[c.combo_id] for c in cfg.combos], axis=1)
        Y = _stack_labels(_labels_in_crop(cfg, labels))
        model = train_segmenter(X, Y, _segmenter_config(cfg), attention=A)
        _save_segmenter(model, cfg, out)
        history = model.history
        history.write_jsonl(out / "weight_stats.jsonl")
        stats = history.stats_history
        final = {"task_loss": history.task_loss_history[-1], "loss": history.loss_history[-1]}
    else:
        adapters = open_splits(cfg)
        raw = _pair_tensors(cfg, adapters, "train")
        if not raw:
            raise ValidationError("no training pairs with extracted features")
        b, c = raw[0][1].shape[:2]
        head = _correspondence_head(cfg, b, c)
        pairs = []
        for p, fs, ft in raw:
            pairs.append(CorrespondencePair(fs, ft, _to_processed(cfg, p.src)[0], _to_processed(cfg, p.tgt)[0]))
        res = train_correspondence(head, pairs, cfg.train)
        head.ensemble.save(out / "assigners")
        save_file({k: v.contiguous() for k, v in head.state_dict().items()}, str(out / "head.safetensors"))
        (out / "model.json").write_text(json.dumps({
            "task": "correspondence", "b": int(b), "channels": int(c),
            "setting": cfg.downstream.correspondence, "combos": [x.combo_id for x in cfg.combos],
        }, indent=2) + "\n")
        stats = res.stats_history
        write_jsonl(out / "weight_stats.jsonl", [
            {"epoch": i, "loss": l, **(stats[i].to_dict() if i < len(stats) else {})}
            for i, l in enumerate(res.losses)
        ])
        final = {"loss": res.losses[-1] if res.losses else None}
    if stats:
        save_weight_stats(stats, out / "weight_stats.png")
    summary = {"final": final, "weight_stats": stats[-1].to_dict() if stats else None}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _eval_split(adapters) -> str:
    if "test" in adapters:
        return "test"
    log.warning("no test split configured; evaluating on the training split")
    return "train"


def cmd_eval(cfg: RunConfig, args) -> int:
    from .plotting import save_bars

    out = cfg.out / "eval"
    model_dir = cfg.out / "train"
    if not (model_dir / "model.json").exists():
        raise ValidationError(f"no trained model at {model_dir}; run `train` first")
    adapters = open_splits(cfg)
    split = _eval_split(adapters)
    if cfg.task == "segmentation":
        model = _load_segmenter(model_dir)
        stacked, A, labels, ids, _ = _load_split(cfg, split)
        X = np.stack([stacked[c.combo_id] for c in cfg.combos], axis=1)
        gts = _labels_in_crop(cfg, labels)
        preds = [
            predict_segmentation(model, X[i], None if A is None else A[i], out_size=gts[i].shape)
            for i in range(len(ids))
        ]
        sc = miou(preds, gts, cfg.dataset.classes)
        row = {"split": split, "images": len(ids), "miou": sc.miou, "aacc": sc.aacc, "macc": sc.macc}
        emit_table(out, "metrics", [row], ["split", "images", "miou", "aacc", "macc"])
        per_class = [{"class": k, "iou": v} for k, v in enumerate(sc.per_class_iou)]
        write_jsonl(out / "per_class.jsonl", per_class)
        if not args.no_figures:
            ok = [(str(r["class"]), r["iou"]) for r in per_class if not np.isnan(r["iou"])]
            if ok:
                save_bars([k for k, _ in ok], [v for _, v in ok], out / "per_class.png", "IoU")
    else:
        meta = json.loads((model_dir / "model.json").read_text())
        if meta.get("setting") != cfg.downstream.correspondence:
            log.warning("evaluating with the trained %r setting", meta.get("setting"))
        head = _correspondence_head(cfg, meta["b"], meta["channels"], meta.get("setting"))
        head.load_state_dict(load_file(str(model_dir / "head.safetensors")))
        head.eval()
        raw = _pair_tensors(cfg, adapters, split)
        records = []
        alpha = cfg.downstream.pck_alpha
        with torch.no_grad():
            for p, fs, ft in raw:
                o, _ = head(torch.stack([fs, ft]))
                src, _gs = _to_processed(cfg, p.src)
                tgt_proc, gt_ = _to_processed(cfg, p.tgt)
                common = [n for n in p.src.names if n in set(p.tgt.names)]
                if not common:
                    continue
                sp = src.by_name()
                pred = correspond_nn(o[0], o[1], np.stack([sp[n] for n in common]), src.image_size,
                                     tgt_proc.image_size)
                pred = gt_.inverse(pred)
                tp = p.tgt.by_name()
                gt = np.stack([tp[n] for n in common])
                records.append({
                    "pair_id": p.pair_id, "category": p.category, "keypoints": len(common),
                    "pck_img": pck(pred, gt, p.tgt.image_size, alpha=alpha),
                    "pck_bbox": pck(pred, gt, bbox=p.tgt.bbox, alpha=alpha) if p.tgt.bbox else None,
                })
        write_jsonl(out / "per_pair.jsonl", records)
        bbox_vals = [r["pck_bbox"] for r in records if r["pck_bbox"] is not None]
        row = {
            "split": split, "pairs": len(records),
            "pck_img": float(np.mean([r["pck_img"] for r in records])) if records else float("nan"),
            "pck_bbox": float(np.mean(bbox_vals)) if bbox_vals else float("nan"),
            "alpha": alpha,
        }
        emit_table(out, "metrics", [row], ["split", "pairs", "pck_img", "pck_bbox", "alpha"])
    (out / "metrics.json").write_text(json.dumps(row, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    from .plotting import save_ablation_bars

    if cfg.task != "segmentation":
        raise ValidationError("ablate supports the segmentation task")
    adapters = open_splits(cfg)
    split = _eval_split(adapters)
    ids = [c.combo_id for c in cfg.combos]
    subsets = [tuple(s) for s in cfg.downstream.ablation] if cfg.downstream.ablation else [
        tuple(ids[: k + 1]) for k in range(len(ids))
    ]
    tr, _, tr_labels, _, _ = _load_split(cfg, "train")
    te, _, te_labels, _, _ = _load_split(cfg, split)
    ytr = _stack_labels(_labels_in_crop(cfg, tr_labels))
    yte = _stack_labels(_labels_in_crop(cfg, te_labels))
    acc: dict[tuple, list] = {}
    for r in range(cfg.downstream.repeats):
        seg = _segmenter_config(cfg, seed=cfg.train.seed + r)
        for row in run_ablation(tr, ytr, te, yte, subsets, seg):
            acc.setdefault(row.combos, []).append(row)
    rows = []
    for sub in subsets:
        rs = acc[sub]
        rows.append({
            "combos": list(sub), "n_combos": len(sub), "repeats": len(rs),
            "miou": float(np.mean([x.miou for x in rs])), "miou_std": float(np.std([x.miou for x in rs])),
            "aacc": float(np.mean([x.aacc for x in rs])), "macc": float(np.mean([x.macc for x in rs])),
        })
    out = cfg.out / "ablate"
    emit_table(out, "ablation", rows, ["combos", "n_combos", "repeats", "miou", "miou_std", "aacc", "macc"])
    if not args.no_figures:
        save_ablation_bars(rows, out / "ablation.png")
    return EXIT_OK


# ---------------------------------------------------------------- visualize


def cmd_visualize(cfg: RunConfig, args) -> int:
    from .plotting import save_pca_panels

    adapters = open_splits(cfg)
    images = split_images(cfg, adapters, ("train",), limit=args.limit if args.limit is not None else 1)
    combos = [cfg.combo(c) for c in args.combo] if args.combo else list(cfg.combos)
    backend = make_backend(cfg)
    registry, captioner = cfg.registry(), cfg.make_captioner()
    out = cfg.out / "visualize"
    records, failures = [], 0
    for split, image_id, image_path, _ in images:
        image = load_rgb(image_path)
        ds = split_dataset_id(cfg, split)
        bundles = []
        for c in combos:
            p = bundle_path(cfg.features_dir, ds, image_id, c.combo_id)
            if p.exists():
                b = load_bundle(p)
            else:
                ec = replace(extraction_config(cfg, c), capture_attention=False, capture_conv=True)
                b = extract(image, ec, backend, registry, captioner, image_id)
            bundles.append(b)
        shown = preprocess_image_for(cfg, image)
        for entry in [n for n, _ in bundles[0].conv_features]:
            feats = [(b.combo_id, dict(b.conv_features)[entry]) for b in bundles]
            try:
                path = save_pca_panels(feats, out / f"{image_id}_{entry}_pca.png", joint=True, image=shown)
                records.append({"image_id": image_id, "kind": "pca", "entry": entry, "path": str(path),
                                "combos": [b.combo_id for b in bundles]})
            except GateFeatError as e:
                log.error("PCA failed for %s/%s: %s", image_id, entry, e)
                failures += 1
        # block-by-block activations of one forward pass under the first combo
        ec = replace(extraction_config(cfg, combos[0]), capture_attention=False, capture_conv=True)
        dump = dump_block_activations(image, ec, backend, registry, captioner, image_id)
        # maps too coarse or too flat to project are skipped and listed
        usable = [(n, a) for n, a in dump if a.shape[0] >= 3 and a.reshape(a.shape[0], -1).std(axis=1).max() > 0]
        skipped = [n for n, _ in dump if n not in {u for u, _ in usable}]
        path = save_pca_panels(usable, out / f"{image_id}_blocks.png", joint=False)
        records.append({"image_id": image_id, "kind": "blocks", "path": str(path), "panels": [n for n, _ in usable],
                        "skipped": skipped,
                        "combo_id": combos[0].combo_id, "timestep": ec.timestep})
    write_jsonl(out / "figures.jsonl", records)
    print(f"wrote {len(records)} figures to {out}")
    return EXIT_PARTIAL if failures else EXIT_OK


def preprocess_image_for(cfg: RunConfig, image: np.ndarray) -> np.ndarray:
    from .extraction import preprocess_image

    return preprocess_image(image, cfg.extraction.resize_short_side)


# ---------------------------------------------------------------- main


COMMANDS = {
    "extract": (cmd_extract, "extract feature bundles for every image x combo (resumable)"),
    "gate-eval": (cmd_gate_eval, "paired Img2Img technique evaluation"),
    "shift-score": (cmd_shift_score, "content-shift Score per combo against t=0 reference and anchor"),
    "train": (cmd_train, "train weight assigners and the task head"),
    "eval": (cmd_eval, "evaluate the trained head (mIoU/aAcc/mAcc or PCK)"),
    "ablate": (cmd_ablate, "train/evaluate on combo subsets"),
    "visualize": (cmd_visualize, "PCA renderings of features and block activations"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gatefeat", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_fn, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("config", help="YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value by dotted key, e.g. --set train.epochs=5 (repeatable)")
        p.add_argument("--output-root", help="override output_root")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--limit", type=int, help="process at most this many images per split")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "extract":
            p.add_argument("--force", action="store_true", help="re-extract bundles that already exist")
            p.add_argument("--workers", type=int, help="worker processes, one backend each")
        if name in ("gate-eval", "shift-score", "visualize"):
            p.add_argument("--combo", action="append", default=[], help="restrict to these combo ids (repeatable)")
        if name == "gate-eval":
            p.add_argument("--feature-score", action="store_true",
                           help="also record the feature-space shift Score of both generations' combos")
        if name == "shift-score":
            p.add_argument("--pca-entry", help="conv entry rendered in the PCA panels (default: first)")
        if name in ("shift-score", "eval", "ablate"):
            p.add_argument("--no-figures", action="store_true", help="skip PNG output")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.output_root:
        overrides.append(f"output_root={json.dumps(os.path.abspath(args.output_root))}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "workers", None):
        overrides.append(f"workers={args.workers}")
    for attr in ("combo",):
        if not hasattr(args, attr):
            setattr(args, attr, [])
    for attr in ("no_figures", "feature_score", "force"):
        if not hasattr(args, attr):
            setattr(args, attr, False)
    if not hasattr(args, "pca_entry"):
        args.pca_entry = None
    try:
        cfg = load_config(args.config, overrides)
        cfg.validate()
        for c in args.combo:
            cfg.combo(c)
    except (GateFeatError, ValueError) as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    fn = COMMANDS[args.command][0]
    try:
        return fn(cfg, args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
