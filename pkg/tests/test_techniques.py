import numpy as np
import pytest
import torch
from safetensors.torch import save_file
from torch import nn

from gatefeat.errors import CaptionerError, ResourceMissingError, ValidationError
from gatefeat.extraction import ExtractionConfig, extract
from gatefeat.feature_store import TechniqueCombo, all_off
from gatefeat.techniques import (
    LoraRegistry,
    apply_combo,
    apply_lora_layers,
    compute_canny,
    fixed_stub,
    make_captioner,
    patch_lora,
    read_lora_file,
)
from gatefeat.techniques.captioning import CaptionerAdapter
from gatefeat.techniques.lora import LoraLayer


def test_canny_constant_and_step():
    assert not compute_canny(np.full((16, 16, 3), 128, np.uint8)).any()
    img = np.zeros((8, 8, 3), np.uint8)
    img[:, 4:] = 255
    e = compute_canny(img)
    assert e.shape == (1, 8, 8) and set(np.unique(e)) <= {0, 1}
    cols = np.nonzero(e[0].any(axis=0))[0]
    assert len(cols) == 1 and cols[0] in (3, 4)
    assert e[0, :, cols[0]].all()
    np.testing.assert_array_equal(e, compute_canny(img))
    with pytest.raises(ValidationError):
        compute_canny(np.zeros((8, 8)))


def test_apply_combo_identity(image):
    r = apply_combo(all_off(), image, "a base prompt")
    assert r.as_tuple() == ("a base prompt", None, None, 1.0)


def test_apply_combo_controlnet(image):
    r = apply_combo(TechniqueCombo("cn", use_controlnet=True), image)
    np.testing.assert_array_equal(r.control_image, compute_canny(image))


def test_apply_combo_caption_cache(image):
    cap = CaptionerAdapter("stub", lambda i, im: pytest.fail("captioner should not run"), {"im": "cached text"})
    combo = TechniqueCombo("c", prompt_source="per_image_caption", prompt_text="fixed")
    r = apply_combo(combo, image, captioner=cap, image_id="im")
    assert r.prompt == "cached text" and r.attention_prompt == "fixed" and cap.calls == 0
    with pytest.raises(ResourceMissingError):
        apply_combo(combo, image, image_id="im")


def test_apply_combo_unknown_lora(image, tmp_path):
    with pytest.raises(ResourceMissingError):
        apply_combo(TechniqueCombo("l", use_lora=True, lora_id="nope"), image, registry=LoraRegistry())


def test_captioner_failures_surface(image, tmp_path):
    def broken(_i, _im):
        raise RuntimeError("model offline")

    with pytest.raises(CaptionerError):
        CaptionerAdapter("x", broken).caption("a", image)
    with pytest.raises(CaptionerError):
        CaptionerAdapter("x", lambda i, im: "  ").caption("a", image)
    stub = make_captioner("fixed_stub", captions={"a": "one"})
    assert stub.caption("a", image) == "one" and stub.caption("b", image) == "a photo"
    stub.save_cache(tmp_path / "c.json")
    other = fixed_stub()
    other.load_cache(tmp_path / "c.json")
    assert other.cache == {"a": "one", "b": "a photo"}
    with pytest.raises(ValidationError):
        CaptionerAdapter("else", broken).load_cache(tmp_path / "c.json")
    with pytest.raises(ValidationError):
        make_captioner("mystery")


def test_registry_checks(tmp_path):
    f = tmp_path / "a.safetensors"
    save_file({"x": torch.zeros(1)}, str(f))
    reg = LoraRegistry()
    reg.register("a", f, 0.5)
    with pytest.raises(ValidationError):
        reg.register("a", f)
    with pytest.raises(ResourceMissingError):
        reg.register("b", tmp_path / "missing.safetensors")
    with pytest.raises(ValidationError):
        reg.register("c", f, 1.5)
    with pytest.raises(ResourceMissingError):
        reg.resolve("zzz")


def one_layer():
    torch.manual_seed(0)
    return nn.Sequential(nn.Linear(5, 3))


def kohya_file(path, down, up, alpha=None, key="lora_unet_0"):
    t = {f"{key}.lora_down.weight": down, f"{key}.lora_up.weight": up}
    if alpha is not None:
        t[f"{key}.alpha"] = torch.tensor(float(alpha))
    save_file(t, str(path))
    return path


def test_strength_algebra_on_one_layer(tmp_path):
    m = one_layer()
    W0, b0 = m[0].weight.detach().clone(), m[0].bias.detach().clone()
    down, up = torch.randn(2, 5), torch.randn(3, 2)
    f = kohya_file(tmp_path / "l.safetensors", down, up, alpha=1.0)
    x = torch.randn(4, 5)
    outs = {}
    for s in (0.5, 1.0):
        reg = LoraRegistry()
        reg.register("l", f, s)
        with patch_lora(m, "l", reg):
            outs[s] = m(x).detach()
        expected = x.double() @ (W0.double() + s * (1.0 / 2) * (up.double() @ down.double())).T + b0.double()
        torch.testing.assert_close(outs[s].double(), expected, atol=1e-5, rtol=1e-5)
    assert not torch.equal(outs[0.5], outs[1.0])
    assert torch.equal(m[0].weight, W0)


def test_peft_and_locon_flavours(tmp_path):
    conv = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1))
    W0 = conv[0].weight.detach().clone()
    down, up = torch.randn(2, 3, 3, 3), torch.randn(4, 2, 1, 1)
    f = kohya_file(tmp_path / "c.safetensors", down, up)
    layers = read_lora_file(f)
    expected = (up.reshape(4, 2).double() @ down.reshape(2, -1).double()).reshape(4, 3, 3, 3)
    torch.testing.assert_close(layers["lora_unet_0"].delta(), expected)
    with apply_lora_layers({"lora_unet": conv}, layers, 1.0):
        torch.testing.assert_close(conv[0].weight.double(), W0.double() + expected, atol=1e-6, rtol=1e-6)
    assert torch.equal(conv[0].weight, W0)

    lin = one_layer()
    a, b = torch.randn(2, 5), torch.randn(3, 2)
    save_file({"unet.0.lora_A.weight": a, "unet.0.lora_B.weight": b}, str(tmp_path / "p.safetensors"))
    peft = read_lora_file(tmp_path / "p.safetensors")
    assert set(peft) == {"lora_unet_0"}
    torch.testing.assert_close(peft["lora_unet_0"].delta(), (b @ a).double())


def test_mismatches_rejected(tmp_path):
    m = one_layer()
    with pytest.raises(ValidationError):
        apply_lora_layers({"lora_unet": m}, {"lora_unet_0": LoraLayer(torch.randn(2, 5), torch.randn(3, 3))})
    with pytest.raises(ValidationError):
        apply_lora_layers({"lora_unet": m}, {"lora_unet_0": LoraLayer(torch.randn(2, 4), torch.randn(3, 2))})
    with pytest.raises(ValidationError):
        apply_lora_layers({"lora_unet": m}, {"lora_unet_9": LoraLayer(torch.randn(2, 5), torch.randn(3, 2))})
    save_file({"lora_unet_0.lora_down.weight": torch.randn(2, 5)}, str(tmp_path / "half.safetensors"))
    with pytest.raises(ValidationError):
        read_lora_file(tmp_path / "half.safetensors")


def _backend_lora(tiny, path, zero=False):
    names = [n for n, mod in tiny.unet.named_modules() if isinstance(mod, nn.Linear) and n.startswith("up_blocks")]
    mod = dict(tiny.unet.named_modules())[names[0]]
    out_f, in_f = mod.weight.shape
    g = torch.Generator().manual_seed(0)
    up = torch.zeros(out_f, 2) if zero else torch.randn(out_f, 2, generator=g)
    return kohya_file(path, torch.randn(2, in_f, generator=g), up, key="lora_unet_" + names[0].replace(".", "_"))


def test_backend_patch_reversible_and_zero_identity(tiny, image, tmp_path):
    reg = LoraRegistry()
    reg.register("rand", _backend_lora(tiny, tmp_path / "r.safetensors"))
    reg.register("zero", _backend_lora(tiny, tmp_path / "z.safetensors", zero=True))
    c = ExtractionConfig(resize_short_side=None)
    before = extract(image, c, tiny)
    patch = patch_lora(tiny, "rand", reg)
    during = extract(image, c, tiny)
    patch.unpatch()
    after = extract(image, c, tiny)
    assert before.equals(after) and not before.equals(during)
    with patch_lora(tiny, "zero", reg):
        assert extract(image, c, tiny).equals(before)
    combo = TechniqueCombo("l", use_lora=True, lora_id="rand")
    via = extract(image, ExtractionConfig(combo=combo, resize_short_side=None), tiny, registry=reg)
    assert any(np.array_equal(a, b) is False for (_, a), (_, b) in zip(via.conv_features, before.conv_features))
    assert "lora:rand" in via.model_fingerprint
    assert extract(image, c, tiny).equals(before)
