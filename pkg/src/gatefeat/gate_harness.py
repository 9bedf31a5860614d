"""Technique evaluation by paired Img2Img generations.

A reference generation (technique off) and a candidate generation (technique
on) are produced from the same input, seed, step count and repaint strength.
The technique is judged helpful when the candidate stays measurably closer to
the input than the reference does.
"""

from __future__ import annotations

import contextlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
from PIL import Image
from skimage.metrics import structural_similarity

from .errors import ValidationError
from .extraction.backend import DiffusionBackend, image_to_tensor, tensor_to_image
from .extraction.extractor import _guided_eps, preprocess_image
from .feature_store import TechniqueCombo, all_off
from .shift_metric import BundleShiftReport, ShiftScoreReport
from .techniques import CaptionerAdapter, LoraRegistry, apply_combo, patch_lora

VERDICTS = ("helps", "no_effect", "hurts")
DEFAULT_STRENGTH = 0.8
DEFAULT_STEPS = 30
DEFAULT_TAU = 0.02
CFG_SCALES = (1.0, 7.5)


class Img2ImgGenerator(Protocol):
    def img2img(
        self, image: np.ndarray, prompt: str, combo: TechniqueCombo, strength: float, steps: int, seed: int
    ) -> np.ndarray: ...


def ddim_timesteps(steps: int, num_train_timesteps: int = 1000) -> list[int]:
    ratio = num_train_timesteps // steps
    return [int(t) for t in (np.arange(steps) * ratio)[::-1] + 1]


class Img2ImgPipeline:
    """Strength-scaled DDIM Img2Img on a :class:`DiffusionBackend`."""

    def __init__(
        self,
        backend: DiffusionBackend,
        registry: LoraRegistry | None = None,
        captioner: CaptionerAdapter | None = None,
        short_side: int | None = 512,
    ):
        self.backend = backend
        self.registry = registry
        self.captioner = captioner
        self.short_side = short_side

    def prepare(self, image: np.ndarray) -> np.ndarray:
        return preprocess_image(image, self.short_side, self.backend.latent_scale)

    @torch.no_grad()
    def img2img(self, image, prompt, combo, strength=DEFAULT_STRENGTH, steps=DEFAULT_STEPS, seed=0, image_id=None):
        if not 0.0 < strength <= 1.0:
            raise ValidationError(f"strength must be in (0, 1], got {strength}")
        if steps < 1:
            raise ValidationError("steps must be >= 1")
        be = self.backend
        img = self.prepare(image)
        cond = apply_combo(combo, img, prompt, self.registry, self.captioner, image_id)
        lora_ctx = (
            patch_lora(be, cond.lora.lora_id, self.registry) if cond.lora is not None else contextlib.nullcontext()
        )
        with lora_ctx:
            x0 = be.encode(image_to_tensor(img))
            ts = ddim_timesteps(steps, be.schedule.max_timestep + 1)
            init = min(int(steps * strength), steps)
            ts = ts[steps - init :]
            if not ts:
                return tensor_to_image(be.decode(x0))
            control = be.prepare_control(cond.control_image) if cond.control_image is not None else None
            embeds, _ = be.encode_prompt(cond.prompt)
            uncond = be.encode_prompt("")[0] if cond.cfg_scale != 1.0 else None
            x = be.schedule.add_noise(x0, ts[0], seed)
            for i, t in enumerate(ts):
                t_next = ts[i + 1] if i + 1 < len(ts) else 0
                eps = _guided_eps(be, x, t, embeds, uncond, control, cond.cfg_scale)
                x = be.schedule.ddim_step(x, eps, t, t_next)
            return tensor_to_image(be.decode(x))


def luminance(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    return 0.299 * a[..., 0] + 0.587 * a[..., 1] + 0.114 * a[..., 2]


def ssim_luminance(a: np.ndarray, b: np.ndarray) -> float:
    la, lb = luminance(a), luminance(b)
    if la.shape != lb.shape:
        raise ValidationError(f"image shapes differ: {la.shape} vs {lb.shape}")
    win = min(7, *la.shape)
    if win % 2 == 0:
        win -= 1
    return float(structural_similarity(la, lb, data_range=255.0, win_size=win))


def decide_verdict(candidate_sim: float, reference_sim: float, tau: float = DEFAULT_TAU) -> str:
    delta = candidate_sim - reference_sim
    if delta > tau:
        return "helps"
    if delta < -tau:
        return "hurts"
    return "no_effect"


@dataclass
class GateReport:
    technique: TechniqueCombo
    reference_combo: TechniqueCombo
    input_image: np.ndarray
    reference_image: np.ndarray
    candidate_image: np.ndarray
    strength: float
    steps: int
    seed: int
    prompt: str
    tau: float
    pixel_similarity: tuple[float, float]  # (candidate vs input, reference vs input)
    verdict: str
    feature_score: tuple[ShiftScoreReport | BundleShiftReport, ShiftScoreReport | BundleShiftReport] | None = None
    image_id: str = "image"
    measure: str = "ssim_luminance"
    meta: dict = field(default_factory=dict)

    def recompute_verdict(self) -> str:
        return decide_verdict(*self.pixel_similarity, self.tau)

    def swapped(self) -> "GateReport":
        """Candidate and reference exchanged; the verdict flips between helps and hurts."""
        cand, ref = self.pixel_similarity
        fs = None if self.feature_score is None else (self.feature_score[1], self.feature_score[0])
        out = replace(
            self,
            technique=self.reference_combo,
            reference_combo=self.technique,
            reference_image=self.candidate_image,
            candidate_image=self.reference_image,
            pixel_similarity=(ref, cand),
            feature_score=fs,
        )
        out.verdict = out.recompute_verdict()
        return out

    def to_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "technique": self.technique.to_dict(),
            "reference_combo": self.reference_combo.to_dict(),
            "strength": self.strength,
            "steps": self.steps,
            "seed": self.seed,
            "prompt": self.prompt,
            "tau": self.tau,
            "measure": self.measure,
            "pixel_similarity": {"candidate": self.pixel_similarity[0], "reference": self.pixel_similarity[1]},
            "feature_score": None
            if self.feature_score is None
            else {"candidate": self.feature_score[0].to_dict(), "reference": self.feature_score[1].to_dict()},
            "verdict": self.verdict,
            "meta": self.meta,
        }

    def save(self, directory: str | os.PathLike, grid: bool = True) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, img in (
            ("input", self.input_image),
            ("reference", self.reference_image),
            ("candidate", self.candidate_image),
        ):
            Image.fromarray(np.asarray(img, dtype=np.uint8)).save(d / f"{name}.png")
        (d / "report.json").write_text(json.dumps(self.to_record(), indent=2) + "\n")
        if grid:
            from .plotting import save_gate_grid

            save_gate_grid(self, d / "grid.png")
        return d

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "GateReport":
        d = Path(directory)
        rec = json.loads((d / "report.json").read_text())
        imgs = {n: np.asarray(Image.open(d / f"{n}.png").convert("RGB")) for n in ("input", "reference", "candidate")}
        fs = rec["feature_score"]
        return cls(
            technique=TechniqueCombo.from_dict(rec["technique"]),
            reference_combo=TechniqueCombo.from_dict(rec["reference_combo"]),
            input_image=imgs["input"],
            reference_image=imgs["reference"],
            candidate_image=imgs["candidate"],
            strength=rec["strength"],
            steps=rec["steps"],
            seed=rec["seed"],
            prompt=rec["prompt"],
            tau=rec["tau"],
            pixel_similarity=(rec["pixel_similarity"]["candidate"], rec["pixel_similarity"]["reference"]),
            verdict=rec["verdict"],
            feature_score=None
            if fs is None
            else (_score_from_dict(fs["candidate"]), _score_from_dict(fs["reference"])),
            image_id=rec["image_id"],
            measure=rec["measure"],
            meta=rec.get("meta", {}),
        )


def _score_from_dict(d: dict):
    if "entries" in d:
        return BundleShiftReport(
            d["combo_id"], d["image_id"], d["score"], {k: ShiftScoreReport(**v) for k, v in d["entries"].items()}
        )
    return ShiftScoreReport(**d)


FeatureScorer = Callable[[np.ndarray, TechniqueCombo], "ShiftScoreReport | BundleShiftReport"]


def _match_size(img: np.ndarray, like: np.ndarray) -> np.ndarray:
    if img.shape[:2] == like.shape[:2]:
        return img
    h, w = like.shape[:2]
    return np.asarray(Image.fromarray(np.asarray(img, dtype=np.uint8)).resize((w, h), Image.BICUBIC))


def evaluate_technique(
    image: np.ndarray,
    combo: TechniqueCombo,
    generator: Img2ImgGenerator,
    strength: float = DEFAULT_STRENGTH,
    steps: int = DEFAULT_STEPS,
    seed: int = 0,
    tau: float = DEFAULT_TAU,
    prompt: str = "",
    reference_combo: TechniqueCombo | None = None,
    feature_scorer: FeatureScorer | None = None,
    image_id: str = "image",
) -> GateReport:
    if not 0.0 < strength <= 1.0:
        raise ValidationError(f"strength must be in (0, 1], got {strength}")
    ref_combo = reference_combo if reference_combo is not None else all_off("reference")
    ref_img = generator.img2img(image, prompt, ref_combo, strength, steps, seed)
    cand_img = generator.img2img(image, prompt, combo, strength, steps, seed)
    inp = _match_size(np.asarray(image, dtype=np.uint8), cand_img)
    sims = (ssim_luminance(cand_img, inp), ssim_luminance(ref_img, inp))
    fscore = None
    if feature_scorer is not None:
        fscore = (feature_scorer(image, combo), feature_scorer(image, ref_combo))
    return GateReport(
        technique=combo,
        reference_combo=ref_combo,
        input_image=inp,
        reference_image=ref_img,
        candidate_image=cand_img,
        strength=strength,
        steps=steps,
        seed=seed,
        prompt=prompt,
        tau=tau,
        pixel_similarity=sims,
        verdict=decide_verdict(*sims, tau),
        feature_score=fscore,
        image_id=image_id,
    )


def cfg_candidates(prompt_text: str = "", scales=CFG_SCALES) -> list[TechniqueCombo]:
    """Combos probing classifier-free guidance at each non-trivial scale."""
    return [
        TechniqueCombo(combo_id=f"cfg{s:g}", prompt_text=prompt_text, cfg_scale=float(s)) for s in scales if s != 1.0
    ]
