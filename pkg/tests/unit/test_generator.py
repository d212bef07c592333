import numpy as np
import pytest
import torch

from aliaug.config import GeneratorConfig, ModelConfig
from aliaug.generator import (
    AliAugGenerator,
    apply_input_dropout,
    draw_drop,
    fuse_features,
    input_keep_mask,
)
from aliaug.lora import ZeroConv
from aliaug.models import Pairing, Prompt
from tests.conftest import make_record


def test_fuse_at_init_returns_mask_features():
    f_mask, f_input = torch.randn(2, 4, 2, 2), torch.randn(2, 4, 2, 2)
    assert torch.equal(fuse_features(f_mask, f_input, ZeroConv(4, 4)), f_mask)


def test_fuse_with_zero_input():
    zc = ZeroConv(4, 4)
    with torch.no_grad():
        zc.conv.weight.copy_(torch.eye(4).view(4, 4, 1, 1))
    f_mask = torch.randn(1, 4, 2, 2)
    assert torch.equal(fuse_features(f_mask, torch.zeros_like(f_mask), zc), f_mask)


def test_fuse_matches_direct_computation():
    zc = ZeroConv(4, 4)
    with torch.no_grad():
        zc.conv.weight.normal_()
        zc.conv.bias.normal_()
    f_mask, f_input = torch.randn(1, 4, 2, 2), torch.randn(1, 4, 2, 2)
    weight = zc.conv.weight.view(4, 4)
    direct = f_mask + torch.einsum("oc,bchw->bohw", weight, f_input) + zc.conv.bias.view(1, 4, 1, 1)
    assert torch.allclose(fuse_features(f_mask, f_input, zc), direct, atol=1e-6)


def test_fuse_shape_mismatch():
    with pytest.raises(ValueError):
        fuse_features(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 4, 4), ZeroConv(4, 4))


def test_eval_mode_never_drops():
    record = make_record("r")
    for seed in range(50):
        assert not apply_input_dropout(record, 0.29, seed, "eval").dropped


def test_mask_only_always_drops():
    record = make_record("r", pairing=Pairing.MASK_ONLY)
    for mode in ("train", "eval"):
        effective = apply_input_dropout(record, 0.0, 0, mode)
        assert effective.dropped
        assert torch.count_nonzero(effective.image) == 0


def test_drop_rate_matches_probability():
    """Тест: 10 000 сидированных бросков дают долю сбросов 0.25 ± 0.02."""
    rate = np.mean([draw_drop(0.25, seed) for seed in range(10_000)])
    assert abs(rate - 0.25) <= 0.02


def test_input_keep_mask():
    mask_only = torch.tensor([False, True, False, False])
    keep = input_keep_mask(mask_only, 0.0, seed=0, mode="train")
    assert keep.tolist() == [True, False, True, True]
    assert input_keep_mask(mask_only, 0.29, seed=0, mode="eval").tolist() == [True, False, True, True]


def test_generator_base_is_seeded(tiny_model_config: ModelConfig):
    a, b = AliAugGenerator(tiny_model_config), AliAugGenerator(tiny_model_config)
    assert a.base_hash == b.base_hash
    other = AliAugGenerator(tiny_model_config.model_copy(update={"base_seed": 1}))
    assert other.base_hash != a.base_hash


def test_generator_trainable_parameters(tiny_generator: AliAugGenerator):
    audit = tiny_generator.parameter_audit()
    assert audit["lora"] > 0
    assert audit["trainable"] == audit["lora"] + audit["zero_conv"] + audit["embedder"]
    trainable_names = [n for n, p in tiny_generator.named_parameters() if p.requires_grad]
    assert all(
        "lora_" in n or n.startswith("skip_convs") or n.startswith("input_fuse") or n.startswith("embedder")
        for n in trainable_names
    )


def test_untrained_output_ignores_input(tiny_generator: AliAugGenerator):
    """Тест: на инициализации выход не зависит от входного изображения."""
    mask = torch.zeros(1, 1, 16, 16)
    mask[..., 4:8, 4:8] = 1.0
    ids = torch.tensor([0])
    with torch.no_grad():
        a = tiny_generator(torch.rand(1, 3, 16, 16) * 2 - 1, mask, ids)
        b = tiny_generator(torch.rand(1, 3, 16, 16) * 2 - 1, mask, ids)
    assert torch.equal(a, b)


def test_generate_mask_only_record(tiny_generator: AliAugGenerator):
    record = make_record("m", pairing=Pairing.MASK_ONLY, prompt_id=1, prompt_text="add hole")
    out = tiny_generator.generate(record, GeneratorConfig(mode="eval"))
    assert out.shape == (3, 16, 16)
    assert torch.isfinite(out).all()
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_generate_rejects_invalid_record(tiny_generator: AliAugGenerator):
    record = make_record("r").model_copy(update={"target_image": None})
    with pytest.raises(ValueError, match="paired requires target"):
        tiny_generator.generate(record)


def test_generate_unknown_prompt_strict(tiny_generator: AliAugGenerator):
    record = make_record("r", prompt_id=0, prompt_text="add dent")
    with pytest.raises(KeyError):
        tiny_generator.generate(record)


def test_prompt_ids_lenient(tiny_model_config: ModelConfig):
    generator = AliAugGenerator(tiny_model_config, strict_prompts=False)
    ids = generator.prompt_ids([Prompt(text="add dent", prompt_id=0)])
    assert ids.tolist() == [len(tiny_model_config.vocabulary)]


def test_trainable_state_round_trip(tiny_model_config: ModelConfig):
    source = AliAugGenerator(tiny_model_config)
    with torch.no_grad():
        source.input_fuse.conv.weight.fill_(0.5)
    target = AliAugGenerator(tiny_model_config)
    target.load_trainable_state(source.trainable_state())
    assert torch.equal(target.input_fuse.conv.weight, source.input_fuse.conv.weight)
    with pytest.raises(KeyError):
        target.load_trainable_state({})


def test_frozen_hash_detects_changes(tiny_model_config: ModelConfig):
    generator = AliAugGenerator(tiny_model_config)
    assert generator.frozen_hash() == generator.base_hash
    frozen = next(p for p in generator.parameters() if not p.requires_grad)
    with torch.no_grad():
        frozen.add_(1.0)
    assert generator.frozen_hash() != generator.base_hash


def test_generate_runs_backbone_once(tiny_generator: AliAugGenerator):
    """Тест: одна генерация - ровно один проход U-Net."""
    calls = []
    handle = tiny_generator.unet.register_forward_hook(lambda module, args, output: calls.append(1))
    try:
        tiny_generator.generate(make_record("r"), GeneratorConfig(mode="eval"))
        tiny_generator.generate(make_record("m", pairing=Pairing.MASK_ONLY), GeneratorConfig(mode="eval"))
    finally:
        handle.remove()
    assert len(calls) == 2


def test_zeroed_context_ignores_prompt(tiny_generator: AliAugGenerator):
    """Тест: при нулевом контексте кросс-внимания выход не зависит от prompt_id."""
    image = torch.rand(1, 3, 16, 16) * 2 - 1
    mask = torch.zeros(1, 1, 16, 16)
    mask[..., 4:12, 4:12] = 1.0
    with torch.no_grad():
        scratch = tiny_generator(image, mask, torch.tensor([0]))
        hole = tiny_generator(image, mask, torch.tensor([1]))
    assert not torch.equal(scratch, hole)

    handle = tiny_generator.embedder.register_forward_hook(lambda module, args, output: torch.zeros_like(output))
    try:
        with torch.no_grad():
            scratch = tiny_generator(image, mask, torch.tensor([0]))
            hole = tiny_generator(image, mask, torch.tensor([1]))
    finally:
        handle.remove()
    assert torch.equal(scratch, hole)
