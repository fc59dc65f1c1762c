"""The frozen base model: a denoiser pretrained on the synthetic world.

LoRA fine-tuning needs a prior to adapt. Here the base is trained on every
``a <subject> in <style> style`` rendering, plus the two trigger tokens, which
carry no concept: ``<c>`` paints the whole canvas and ``<s>`` applies the plain
identity style. After pretraining, the training prompt ``a <c> in <s> style``
produces a flat swatch, and the adapters have to bind the triggers to the
image's subject and style.

Pretraining is deterministic. Results are cached on disk under the config hash
(``SPLITLORA_CACHE`` overrides the location).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .denoiser import (
    STYLE_TRIGGER,
    SUBJECT_TRIGGER,
    DenoiserConfig,
    DenoiserWeights,
    PromptTriple,
    TokenVocabulary,
    KVProvider,
    base_kv_provider,
    embed_prompt,
    predict_noise,
    prompt_words,
    schedule_for,
    stable_hash64,
)
from .synthworld import CANVAS, StyleFactor, SynthSpec, render

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainRecipe:
    weight_seed: int = 1
    vocab_seed: int = 7
    steps: int = 3000
    batch: int = 20
    lr: float = 3e-3
    lr_final: float = 1e-4
    routed: bool = True
    lower_dropout: float = 0.5

    def canonical(self) -> str:
        return ";".join(f"{k}={getattr(self, k)!r}" for k in sorted(self.__dataclass_fields__))


@dataclass
class BaseModel:
    config: DenoiserConfig
    spec: SynthSpec
    recipe: PretrainRecipe
    vocab: TokenVocabulary
    weights: DenoiserWeights

    @property
    def config_hash(self) -> int:
        return config_hash(self.config, self.spec, self.recipe)

    def prompts(self) -> PromptTriple:
        return PromptTriple.build(self.vocab)

    def embed(self, words) -> np.ndarray:
        return embed_prompt(self.vocab, self.vocab.ids(words))


# bumped whenever initialisation or pretraining code changes what a recipe produces
BASE_REVISION = 3


def config_hash(config: DenoiserConfig, spec: SynthSpec, recipe: PretrainRecipe) -> int:
    parts = [f"revision={BASE_REVISION}", config.canonical(), spec.canonical(), recipe.canonical()]
    return stable_hash64("|".join(parts))


def build_vocab(config: DenoiserConfig, spec: SynthSpec, seed: int) -> TokenVocabulary:
    words = [s.id for s in spec.subjects] + [s.id for s in spec.styles]
    return TokenVocabulary.build(words, config.d_txt, seed)


def pretraining_pairs(spec: SynthSpec):
    """``(subject word, style word, image)`` for every combination the base learns."""
    subjects = [(s.id, s) for s in spec.subjects] + [(SUBJECT_TRIGGER, CANVAS)]
    styles = [(s.id, s) for s in spec.styles] + [(STYLE_TRIGGER, StyleFactor.identity())]
    return [(sw, tw, render(s, t)) for sw, s in subjects for tw, t in styles]


def routed_prompt_words(block: str, subject_word: str, style_word: str) -> list[str]:
    """Prompt a block sees during routed pretraining.

    ``up0`` blocks get the subject with a neutral style, ``up1`` blocks the
    style with a neutral subject, every other block the full prompt. The
    result is a base whose upper blocks lean towards one factor each.
    """
    if block.startswith("up0"):
        return prompt_words(subject_word, STYLE_TRIGGER)
    if block.startswith("up1"):
        return prompt_words(SUBJECT_TRIGGER, style_word)
    return prompt_words(subject_word, style_word)


def _block_provider(weights: DenoiserWeights, prompts: dict) -> KVProvider:
    providers = {b: base_kv_provider(weights, x) for b, x in prompts.items()}
    return lambda block: providers[block](block)


def pretrain(config: DenoiserConfig, spec: SynthSpec, recipe: PretrainRecipe, progress: bool = False) -> DenoiserWeights:
    vocab = build_vocab(config, spec, recipe.vocab_seed)
    weights = DenoiserWeights.init(config, recipe.weight_seed)
    weights.set_trainable(True)
    pairs = pretraining_pairs(spec)

    def embed_all(block):
        words = (lambda sw, tw: routed_prompt_words(block, sw, tw)) if recipe.routed else prompt_words
        return np.stack([embed_prompt(vocab, vocab.ids(words(sw, tw))) for sw, tw, _ in pairs])

    prompts = {b: embed_all(b) for b in config.blocks}
    neutral = embed_prompt(vocab, vocab.ids(prompt_words()))
    images = np.stack([img for _, _, img in pairs])
    sched = schedule_for(config)
    rng = np.random.default_rng(recipe.weight_seed + 1)
    params = [weights[n] for n in weights.names()]
    opt = ad.adam_init(params)
    for step in range(recipe.steps):
        idx = rng.choice(len(pairs), size=recipe.batch, replace=recipe.batch > len(pairs))
        t = rng.integers(1, config.T + 1, size=recipe.batch)
        eps = rng.standard_normal(images[idx].shape)
        ab = sched.alpha_bars[t - 1][:, None, None, None]
        z = np.sqrt(ab) * images[idx] + np.sqrt(1 - ab) * eps
        batch_prompts = {b: x[idx] for b, x in prompts.items()}
        if recipe.routed and recipe.lower_dropout > 0:
            drop = rng.random(recipe.batch) < recipe.lower_dropout
            for b in batch_prompts:
                if not b.startswith("up"):
                    batch_prompts[b] = np.where(drop[:, None, None], neutral[None], batch_prompts[b])
        with ad.Tape() as tape:
            provider = _block_provider(weights, batch_prompts)
            pred = predict_noise(weights, provider, z, t)
            loss = ad.mse(pred, ad.Tensor(eps))
            grads = tape.backward(loss)
        frac = step / max(1, recipe.steps - 1)
        lr = recipe.lr_final + 0.5 * (recipe.lr - recipe.lr_final) * (1 + np.cos(np.pi * frac))
        opt = ad.adam_step(params, [grads.get(p) for p in params], opt, lr)
        if progress and step % 200 == 0:
            log.info("pretrain step %d loss %.4f", step, loss.item())
    weights.set_trainable(False)
    return weights


def _cache_dir() -> Path:
    root = os.environ.get("SPLITLORA_CACHE")
    return Path(root) if root else Path.home() / ".cache" / "splitlora"


_MEMO: dict[int, BaseModel] = {}


def load_base(
    config: DenoiserConfig | None = None,
    spec: SynthSpec | None = None,
    recipe: PretrainRecipe | None = None,
    cache: bool = True,
) -> BaseModel:
    """Return the pretrained base, from memory, disk cache, or a fresh run."""
    config = config or DenoiserConfig()
    spec = spec or SynthSpec.default()
    recipe = recipe or PretrainRecipe()
    key = config_hash(config, spec, recipe)
    if key in _MEMO:
        return _fresh_copy(_MEMO[key])
    vocab = build_vocab(config, spec, recipe.vocab_seed)
    path = _cache_dir() / f"base-{key:016x}.npz"
    weights = None
    if cache and path.exists():
        with np.load(path) as z:
            weights = DenoiserWeights.from_arrays(config, {k: z[k] for k in z.files})
    if weights is None:
        log.info("pretraining base model %016x", key)
        weights = pretrain(config, spec, recipe)
        if cache:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp.npz")
            np.savez(tmp, **weights.snapshot())
            os.replace(tmp, path)
    model = BaseModel(config, spec, recipe, vocab, weights)
    _MEMO[key] = model
    return _fresh_copy(model)


def _fresh_copy(model: BaseModel) -> BaseModel:
    weights = DenoiserWeights.from_arrays(model.config, model.weights.snapshot())
    return replace(model, weights=weights)
