import numpy as np
import pytest

from gatefeat.errors import ValidationError
from gatefeat.feature_store import TechniqueCombo, all_off
from gatefeat.gate_harness import (
    DEFAULT_STEPS,
    DEFAULT_STRENGTH,
    DEFAULT_TAU,
    GateReport,
    Img2ImgPipeline,
    cfg_candidates,
    ddim_timesteps,
    decide_verdict,
    evaluate_technique,
    ssim_luminance,
)
from gatefeat.shift_metric import ShiftScoreReport


class Oracle:
    """Reference run blurs the input; the active combo copies it or returns noise."""

    def __init__(self, mode):
        self.mode = mode

    def img2img(self, image, prompt, combo, strength, steps, seed):
        img = np.asarray(image, dtype=np.uint8)
        if combo.is_identity:
            return np.clip(img.astype(int) + np.random.default_rng(seed).integers(-20, 21, img.shape), 0, 255).astype(np.uint8)
        if self.mode == "copy":
            return img.copy()
        return np.random.default_rng(seed + 1).integers(0, 256, img.shape).astype(np.uint8)


CN = TechniqueCombo("cn", use_controlnet=True)


def test_defaults():
    assert (DEFAULT_STRENGTH, DEFAULT_STEPS, DEFAULT_TAU) == (0.8, 30, 0.02)
    assert ddim_timesteps(4) == [751, 501, 251, 1]
    assert [c.cfg_scale for c in cfg_candidates("p")] == [7.5]


def test_verdict_rule():
    assert decide_verdict(0.9, 0.8) == "helps"
    assert decide_verdict(0.8, 0.9) == "hurts"
    assert decide_verdict(0.81, 0.8) == "no_effect"
    # the margin itself is inside the no-effect band
    assert decide_verdict(0.75, 0.5, 0.25) == "no_effect"
    assert decide_verdict(0.5, 0.75, 0.25) == "no_effect"


def test_oracle_generators(image):
    assert evaluate_technique(image, CN, Oracle("copy")).verdict == "helps"
    assert evaluate_technique(image, CN, Oracle("noise")).verdict == "hurts"


def test_self_comparison(image, tiny):
    rep = evaluate_technique(image, all_off("x"), Oracle("copy"))
    assert rep.verdict == "no_effect" and rep.pixel_similarity[0] == rep.pixel_similarity[1]
    pipe = Img2ImgPipeline(tiny, short_side=None)
    rep = evaluate_technique(image, all_off("x"), pipe, steps=3)
    assert rep.verdict == "no_effect"
    np.testing.assert_array_equal(rep.reference_image, rep.candidate_image)


def test_swap_flips(image):
    rep = evaluate_technique(image, CN, Oracle("copy"))
    sw = rep.swapped()
    assert sw.verdict == "hurts" and sw.technique == rep.reference_combo
    assert sw.swapped().verdict == "helps"


def test_report_round_trip(image, tmp_path):
    scorer = lambda img, combo: ShiftScoreReport(1.0, 2.0, 0.5)  # noqa: E731
    rep = evaluate_technique(image, CN, Oracle("copy"), seed=3, prompt="p", feature_scorer=scorer, image_id="im")
    d = rep.save(tmp_path / "r")
    assert {p.name for p in d.iterdir()} == {"input.png", "reference.png", "candidate.png", "report.json", "grid.png"}
    back = GateReport.load(d)
    assert back.to_record() == rep.to_record()
    np.testing.assert_array_equal(back.candidate_image, rep.candidate_image)
    assert back.recompute_verdict() == rep.verdict


def test_img2img_contract(tiny, image):
    pipe = Img2ImgPipeline(tiny, short_side=None)
    a = pipe.img2img(image, "a box", CN, 0.8, 4, seed=1)
    assert a.shape == image.shape and a.dtype == np.uint8
    np.testing.assert_array_equal(a, pipe.img2img(image, "a box", CN, 0.8, 4, seed=1))
    near = pipe.img2img(image, "a box", all_off(), 0.05, 1, seed=1)
    far = pipe.img2img(image, "a box", all_off(), 0.8, 4, seed=1)
    assert ssim_luminance(near, image) > ssim_luminance(far, image)
    guided = pipe.img2img(image, "a box", TechniqueCombo("g", cfg_scale=7.5), 0.8, 4, seed=1)
    assert not np.array_equal(guided, far)
    with pytest.raises(ValidationError):
        pipe.img2img(image, "", CN, 0.0, 4)
    with pytest.raises(ValidationError):
        pipe.img2img(image, "", CN, 0.5, 0)
    with pytest.raises(ValidationError):
        evaluate_technique(image, CN, pipe, strength=1.5)


def test_ssim_small_images():
    a = np.random.default_rng(0).integers(0, 255, (5, 6, 3)).astype(np.uint8)
    assert ssim_luminance(a, a) == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        ssim_luminance(a, a[:4])
