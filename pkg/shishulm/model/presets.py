"""
Named model configurations.

The parents are plain 30 and 40 layer decoder stacks with tied embeddings and a 32000 token
vocabulary. Two ShishuLM layouts exist per size: ``shishulm-125`` / ``shishulm-600`` follow the
listed layer plan (10 decoders + 10 shared pairs, 13 decoders + 15 shared pairs), while the
``-d11`` / ``-d15`` variants are the plans whose unique parameter counts equal the published
totals of 83,921,472 and 408,506,112 (11 + 10 pairs and 15 + 15 pairs, one norm per pair). The
listed plans give 80,381,376 and 380,189,952.
"""

from typing import Callable, Dict, List

from .config import ModelConfig, make_shishu_schedule


class PresetError(Exception):
    """Error with a preset name"""


VOCAB_SIZE = 32000
MAX_SEQ_LEN = 2048


def _mobilellm_125m(**kwargs) -> ModelConfig:
    return ModelConfig(
        hidden_size=576,
        intermediate_size=1536,
        n_heads=9,
        n_kv_heads=3,
        vocab_size=VOCAB_SIZE,
        max_seq_len=MAX_SEQ_LEN,
        rms_norm_eps=1e-5,
        **kwargs,
    )


def _mobilellm_600m(**kwargs) -> ModelConfig:
    return ModelConfig(
        hidden_size=1152,
        intermediate_size=3072,
        n_heads=18,
        n_kv_heads=6,
        vocab_size=VOCAB_SIZE,
        max_seq_len=MAX_SEQ_LEN,
        rms_norm_eps=1e-5,
        **kwargs,
    )


def _shishu(parent: Callable[..., ModelConfig], n_decoder: int, n_pairs: int) -> ModelConfig:
    n_layers = n_decoder + 2 * n_pairs
    return parent(n_layers=n_layers, schedule=make_shishu_schedule(n_layers, n_decoder, 2))


PRESETS: Dict[str, Callable[[], ModelConfig]] = {
    "mobilellm-125m": lambda: _mobilellm_125m(n_layers=30),
    "mobilellm-600m": lambda: _mobilellm_600m(n_layers=40),
    "shishulm-125": lambda: _shishu(_mobilellm_125m, 10, 10),
    "shishulm-600": lambda: _shishu(_mobilellm_600m, 13, 15),
    "shishulm-125-d11": lambda: _shishu(_mobilellm_125m, 11, 10),
    "shishulm-600-d15": lambda: _shishu(_mobilellm_600m, 15, 15),
}


def preset_names() -> List[str]:
    """Get the preset names."""

    return list(PRESETS)


def get_preset(name: str) -> ModelConfig:
    """Get a fresh config for a preset name."""

    try:
        return PRESETS[name]()
    except KeyError:
        raise PresetError(f"unknown preset '{name}', expected one of {', '.join(PRESETS)}")
