"""A miniature text-conditioned epsilon-prediction network.

The latent "image" is an ``H x W x C`` grid flattened into ``H*W`` tokens.
Every token is lifted to ``d_model``, gets a learned positional row and the
timestep embedding, and then passes through a fixed layout of blocks. Each
block is cross-attention onto the prompt followed by a two-layer MLP, both in
pre-normalised residual form. There is no self-attention: pixels interact only
through the prompt.

Keys and values are not computed here. ``predict_noise`` asks a *kv provider*
for each block's ``(K, V)`` pair, which is how LoRA-adapted projections (and
the prompt-separated variant) are swapped in without touching this module.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BLOCK_LAYOUT = ("down0", "down1", "mid", "up0_0", "up0_1", "up1_0", "up1_1")

TEMPLATE_WORDS = ("a", "in", "style")
SUBJECT_TRIGGER = "<c>"
STYLE_TRIGGER = "<s>"

KVProvider = Callable[[str], "tuple[Tensor, Tensor]"]


@dataclass(frozen=True)
class DenoiserConfig:
    height: int = 8
    width: int = 8
    channels: int = 4
    d_model: int = 32
    d_txt: int = 16
    d_mlp: int = 64
    blocks: tuple[str, ...] = BLOCK_LAYOUT
    heads: int = 1
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by the number of heads")
        if self.heads != 1:
            raise ValueError("only single-head attention is implemented")
        if self.T < 2:
            raise ValueError("need at least two diffusion steps")
        if len(set(self.blocks)) != len(self.blocks):
            raise ValueError("block names must be unique")

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def canonical(self) -> str:
        d = asdict(self)
        d["blocks"] = ",".join(self.blocks)
        return ";".join(f"{k}={d[k]!r}" for k in sorted(d))


def stable_hash64(text: str) -> int:
    """First eight bytes of SHA-256 as an unsigned little-endian integer."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


# --------------------------------------------------------------------------- vocabulary


@dataclass
class TokenVocabulary:
    """Fixed word embeddings, never trained.

    Each word owns one coordinate axis (seeded random axis and sign), scaled
    to norm ``sqrt(d_txt)``. Orthogonal, axis-aligned rows keep the gradient
    of an adapter acting on one token, and Adam's per-coordinate update of it,
    inside that token's row, so a trained delta does not bleed onto other
    prompt words.
    """

    words: tuple[str, ...]
    embeddings: np.ndarray
    seed: int
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.embeddings = np.array(self.embeddings, dtype=np.float64)
        self.embeddings.setflags(write=False)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate vocabulary words")

    @classmethod
    def build(cls, concept_words: Sequence[str], d_txt: int, seed: int) -> "TokenVocabulary":
        words = TEMPLATE_WORDS + (SUBJECT_TRIGGER, STYLE_TRIGGER) + tuple(concept_words)
        if len(words) > d_txt:
            raise ValueError(f"{len(words)} words need d_txt >= {len(words)}, got {d_txt}")
        rng = np.random.default_rng(seed)
        axes = rng.permutation(d_txt)[: len(words)]
        signs = rng.choice([-1.0, 1.0], size=len(words))
        emb = np.zeros((len(words), d_txt))
        emb[np.arange(len(words)), axes] = signs * math.sqrt(d_txt)
        return cls(words, emb, seed)

    @property
    def d_txt(self) -> int:
        return self.embeddings.shape[1]

    def ids(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise KeyError(f"word {exc.args[0]!r} is not in the vocabulary") from None


def embed_prompt(vocab: TokenVocabulary, token_ids: Sequence[int]) -> np.ndarray:
    """Stack vocabulary rows for ``token_ids`` into an ``n_tokens x d_txt`` matrix."""
    ids = list(token_ids)
    for i in ids:
        if not 0 <= i < len(vocab.words):
            raise KeyError(f"token id {i} is not in the vocabulary")
    if not ids:
        return np.zeros((0, vocab.d_txt))
    return vocab.embeddings[ids].copy()


def prompt_words(subject_word: str = SUBJECT_TRIGGER, style_word: str = STYLE_TRIGGER) -> list[str]:
    """The fixed five-slot template ``a <subject> in <style> style``."""
    return ["a", subject_word, "in", style_word, "style"]


@dataclass(frozen=True)
class PromptTriple:
    """Combined prompt plus the two trigger-only prompts.

    ``subject`` and ``style`` live in the five-slot template with every
    non-trigger row zeroed, so all three share a token count.
    """

    combined: np.ndarray
    subject: np.ndarray
    style: np.ndarray

    @classmethod
    def build(cls, vocab: TokenVocabulary) -> "PromptTriple":
        words = prompt_words()
        x = embed_prompt(vocab, vocab.ids(words))
        x_c = np.zeros_like(x)
        x_s = np.zeros_like(x)
        c_slot, s_slot = words.index(SUBJECT_TRIGGER), words.index(STYLE_TRIGGER)
        x_c[c_slot] = x[c_slot]
        x_s[s_slot] = x[s_slot]
        return cls(x, x_c, x_s)

    @staticmethod
    def trigger_only(vocab: TokenVocabulary) -> tuple[np.ndarray, np.ndarray]:
        """Unpadded single-row embeddings of the two triggers."""
        return (
            embed_prompt(vocab, vocab.ids([SUBJECT_TRIGGER])),
            embed_prompt(vocab, vocab.ids([STYLE_TRIGGER])),
        )


# --------------------------------------------------------------------------- weights


def _sinusoid(T: int, d: int) -> np.ndarray:
    pos = np.arange(1, T + 1)[:, None]
    freq = np.exp(-math.log(1000.0) * np.arange(0, d, 2) / d)[None, :]
    tab = np.zeros((T, d))
    tab[:, 0::2] = np.sin(pos * freq)
    tab[:, 1::2] = np.cos(pos * freq)
    return tab


@dataclass
class DenoiserWeights:
    config: DenoiserConfig
    params: dict[str, Tensor]

    @classmethod
    def init(cls, config: DenoiserConfig, seed: int) -> "DenoiserWeights":
        rng = np.random.default_rng(seed)
        d, dt, dm, C = config.d_model, config.d_txt, config.d_mlp, config.channels

        def w(name, shape, std):
            return name, Tensor(rng.standard_normal(shape) * std, requires_grad=False, name=name)

        items = [
            w("in_proj", (C, d), 1.0 / math.sqrt(C)),
            w("pos_emb", (config.n_pixels, d), 0.5),
            ("time_emb", Tensor(_sinusoid(config.T, d), name="time_emb")),
        ]
        for b in config.blocks:
            items += [
                w(f"{b}.W_q", (d, d), 1.0 / math.sqrt(d)),
                w(f"{b}.W_k", (dt, d), 1.0 / math.sqrt(dt)),
                w(f"{b}.W_v", (dt, d), 1.0 / math.sqrt(dt)),
                w(f"{b}.W_out", (d, d), 0.2 / math.sqrt(d)),
                w(f"{b}.mlp_w1", (d, dm), 1.0 / math.sqrt(d)),
                (f"{b}.mlp_b1", Tensor(np.zeros(dm), name=f"{b}.mlp_b1")),
                w(f"{b}.mlp_w2", (dm, d), 0.2 / math.sqrt(dm)),
                (f"{b}.mlp_b2", Tensor(np.zeros(d), name=f"{b}.mlp_b2")),
            ]
        items.append(w("out_proj", (d, C), 1.0 / math.sqrt(d)))
        return cls(config, dict(items))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def to_bytes(self) -> bytes:
        return b"".join(k.encode() + self.params[k].data.tobytes() for k in sorted(self.params))

    def kv_weights(self, block: str) -> tuple[Tensor, Tensor]:
        return self.params[f"{block}.W_k"], self.params[f"{block}.W_v"]

    @classmethod
    def from_arrays(cls, config: DenoiserConfig, arrays: Mapping[str, np.ndarray]) -> "DenoiserWeights":
        return cls(config, {k: Tensor(np.array(v), name=k) for k, v in arrays.items()})


def lora_layer_ids(config: DenoiserConfig) -> list[str]:
    """The LoRA-enabled layers: key and value projections of every block."""
    return [f"{b}.{kind}" for b in config.blocks for kind in ("K", "V")]


def block_of(layer_id: str) -> str:
    return layer_id.rsplit(".", 1)[0]


def base_kv_provider(weights: DenoiserWeights, prompt) -> KVProvider:
    """K/V from the frozen projections alone; ``prompt`` is ``(n, d_txt)`` or batched."""
    x = prompt if isinstance(prompt, Tensor) else Tensor(prompt)

    def provider(block: str):
        W_k, W_v = weights.kv_weights(block)
        return ad.matmul(x, W_k), ad.matmul(x, W_v)

    return provider


# --------------------------------------------------------------------------- forward


def _row_broadcast(v: Tensor, like: Tensor) -> Tensor:
    lead = (1,) * (like.data.ndim - 1)
    return ad.expand(ad.reshape(v, lead + v.shape), like.shape)


def cross_attention(weights: DenoiserWeights, block: str, h: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """Residual cross-attention: ``h + softmax(Q K^T / sqrt(d)) V W_out``.

    Queries come from the RMS-normalised latent tokens.
    """
    if K.shape[-2] != V.shape[-2]:
        raise ad.ShapeError(f"K has {K.shape[-2]} tokens but V has {V.shape[-2]}")
    d = weights.config.d_model
    q = ad.matmul(ad.rms_norm(h), weights[f"{block}.W_q"])
    scores = ad.scale(ad.matmul(q, ad.transpose(K)), 1.0 / math.sqrt(d))
    att = ad.softmax_rows(scores)
    return ad.add(h, ad.matmul(ad.matmul(att, V), weights[f"{block}.W_out"]))


def mlp(weights: DenoiserWeights, block: str, h: Tensor) -> Tensor:
    u = ad.matmul(ad.rms_norm(h), weights[f"{block}.mlp_w1"])
    u = ad.silu(ad.add(u, _row_broadcast(weights[f"{block}.mlp_b1"], u)))
    u = ad.matmul(u, weights[f"{block}.mlp_w2"])
    return ad.add(h, ad.add(u, _row_broadcast(weights[f"{block}.mlp_b2"], u)))


def predict_noise(weights: DenoiserWeights, kv_provider: KVProvider, z_t, t_step) -> Tensor:
    """Predict the noise in ``z_t`` (shape ``(H, W, C)`` or ``(B, H, W, C)``).

    ``t_step`` is an int in ``[1, T]`` or, for batched input, one int per
    sample.
    """
    cfg = weights.config
    z = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    batched = z.data.ndim == 4
    if z.shape[-3:] != cfg.latent_shape:
        raise ad.ShapeError(f"latent shape {z.shape} does not match {cfg.latent_shape}")
    ts = np.atleast_1d(np.asarray(t_step, dtype=np.int64))
    if ts.min() < 1 or ts.max() > cfg.T:
        raise ValueError(f"t_step must lie in [1, {cfg.T}]")
    B = z.shape[0] if batched else 1
    if ts.size == 1:
        ts = np.repeat(ts, B)
    if ts.size != B:
        raise ad.ShapeError("need one timestep per batch element")

    tokens = ad.reshape(z, (B, cfg.n_pixels, cfg.channels))
    h = ad.matmul(tokens, weights["in_proj"])
    h = ad.add(h, ad.expand(ad.reshape(weights["pos_emb"], (1, cfg.n_pixels, cfg.d_model)), h.shape))
    temb = ad.reshape(ad.take_rows(weights["time_emb"], ts - 1), (B, 1, cfg.d_model))
    h = ad.add(h, ad.expand(temb, h.shape))
    for block in cfg.blocks:
        K, V = kv_provider(block)
        h = cross_attention(weights, block, h, K, V)
        h = mlp(weights, block, h)
    out = ad.matmul(h, weights["out_proj"])
    return ad.reshape(out, z.shape)


# --------------------------------------------------------------------------- diffusion


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar`` at 1-based step ``t``; ``t == 0`` is the clean signal."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def noise_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule; index ``i`` of each array holds step ``i + 1``."""
    if T < 2:
        raise ValueError("need at least two diffusion steps")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def schedule_for(config: DenoiserConfig) -> NoiseSchedule:
    return noise_schedule(config.T, config.beta_start, config.beta_end)


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    ab = np.asarray([schedule.alpha_bar(int(s)) for s in np.atleast_1d(t)])
    ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1)) if x0.ndim == 4 else ab.reshape(())
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Descending 1-based timesteps; evenly strided when ``steps`` divides ``T``."""
    steps = max(1, min(int(steps), T))
    if T % steps == 0:
        stride = T // steps
        return list(range(T, 0, -stride))
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def ddim_sample(
    weights: DenoiserWeights,
    kv_provider: KVProvider,
    steps: int = 50,
    seed: int = 0,
    n_samples: int | None = None,
    clip: float = 2.0,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM trajectory from seeded Gaussian noise.

    Returns ``(H, W, C)`` when ``n_samples`` is ``None``, otherwise
    ``(n_samples, H, W, C)``. The provider must yield K/V compatible with the
    batch (a shared unbatched prompt always is).
    """
    cfg = weights.config
    sched = schedule_for(cfg)
    shape = cfg.latent_shape if n_samples is None else (n_samples,) + cfg.latent_shape
    z = np.random.default_rng(seed).standard_normal(shape) if noise is None else np.array(noise, float)
    ts = ddim_timesteps(cfg.T, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        ab, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
        eps = predict_noise(weights, kv_provider, z, t).data
        x0 = (z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        if clip:
            x0 = np.clip(x0, -clip, clip)
            eps = (z - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
        z = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
    return z


# --------------------------------------------------------------------------- image export


def to_ppm(image: np.ndarray, lo: float = -2.0, hi: float = 2.0) -> bytes:
    """Binary P6 bytes; the first three channels are mapped affinely from [lo, hi]."""
    img = np.asarray(image, dtype=np.float64)
    rgb = img[..., :3] if img.shape[-1] >= 3 else np.repeat(img[..., :1], 3, axis=-1)
    px = np.clip(np.round((rgb - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    h, w = px.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()
