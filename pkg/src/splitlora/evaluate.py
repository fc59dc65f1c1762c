"""Sampling from trained checkpoints and the probe-based disentanglement report."""

from __future__ import annotations

import numpy as np

from . import seeding
from .base_model import BaseModel, routed_prompt_words
from .checkpoint import Checkpoint
from .autodiff import Tensor
from .denoiser import STYLE_TRIGGER, SUBJECT_TRIGGER, KVProvider, ddim_sample
from .lora import MODES, ConfigMismatch, lora_kv_provider, merged_projection
from .synthworld import ModeMetrics, metrics_csv, style_alignment, subject_alignment

REPORT_MODES = ("content", "style", "combined")


def sample_noise(base: BaseModel, seed: int, n: int) -> np.ndarray:
    """Initial latents; sample ``i`` always comes from the same sub-stream."""
    shape = base.config.latent_shape
    return np.stack([seeding.rng(seed, seeding.SAMPLE_NOISE, i).standard_normal(shape) for i in range(n)])


def check_compatible(checkpoint: Checkpoint, base: BaseModel) -> None:
    if checkpoint.config_hash != base.config_hash:
        raise ConfigMismatch(
            f"checkpoint was trained against base {checkpoint.config_hash:016x}, loaded base is {base.config_hash:016x}"
        )


def mode_provider(
    checkpoint: Checkpoint | None,
    base: BaseModel,
    mode: str,
    subject_word: str | None = None,
    style_word: str | None = None,
    binary: bool = False,
) -> KVProvider:
    """K/V provider for one inference mode.

    With the default trigger words every block sees the training prompt. When
    concept words are given, each block sees the prompt it was pretrained on,
    so base-mode samples of ``a cross in ember style`` look like the
    pretraining data.
    """
    if mode not in MODES:
        raise ValueError(f"unknown inference mode {mode!r}; expected one of {MODES}")
    if mode != "base" and checkpoint is None:
        raise ValueError(f"mode {mode!r} needs a checkpoint")
    content = checkpoint.content if mode in ("content", "combined") else None
    style = checkpoint.style if mode in ("style", "combined") else None
    weights = base.weights
    if subject_word is None and style_word is None:
        return lora_kv_provider(weights, base.prompts().combined, content, style, binary)
    sw = subject_word or SUBJECT_TRIGGER
    tw = style_word or STYLE_TRIGGER
    cache = {}
    for block in weights.config.blocks:
        x = base.embed(routed_prompt_words(block, sw, tw))
        pair = []
        for kind, W0 in zip(("K", "V"), weights.kv_weights(block)):
            W = merged_projection(W0.data, content, style, f"{block}.{kind}", binary)
            pair.append(Tensor(x @ W))
        cache[block] = (pair[0], pair[1])
    return lambda block: cache[block]


def sample_mode(
    checkpoint: Checkpoint | None,
    base: BaseModel,
    mode: str,
    n_samples: int = 16,
    seed: int = 0,
    steps: int = 50,
    **prompt,
) -> np.ndarray:
    """``(n_samples, H, W, C)`` DDIM samples for one mode."""
    if checkpoint is not None:
        check_compatible(checkpoint, base)
    provider = mode_provider(checkpoint, base, mode, **prompt)
    noise = sample_noise(base, seed, n_samples)
    return ddim_sample(base.weights, provider, steps=steps, n_samples=n_samples, noise=noise)


def disentanglement_report(
    checkpoint: Checkpoint,
    base: BaseModel,
    subject: str,
    style: str,
    n_samples: int = 16,
    seed: int = 0,
    steps: int = 50,
    modes=REPORT_MODES,
) -> list[ModeMetrics]:
    """Mean subject and style probe scores per inference mode.

    ``subject`` and ``style`` name the factors of the training image; every
    mode is scored against both. Raises ``ConfigMismatch`` when the
    checkpoint was trained on a different base.
    """
    check_compatible(checkpoint, base)
    spec = base.spec
    subj, sty = spec.subject(subject), spec.style(style)
    rows = []
    for mode in modes:
        images = sample_mode(checkpoint, base, mode, n_samples, seed, steps)
        rows.append(ModeMetrics(
            mode,
            [subject_alignment(im, subj, spec) for im in images],
            [style_alignment(im, sty, spec) for im in images],
        ))
    return rows


def report_csv(rows: list[ModeMetrics]) -> str:
    return metrics_csv(rows)
