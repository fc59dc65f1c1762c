"""LoRA adapter algebra, column masks and the prompt-separated K/V forward.

Conventions: a base projection ``W0`` is ``d_in x d_out`` and acts on
row-stacked prompt embeddings as ``x @ W0`` (the row form of ``W0^T x``). An
adapter stores ``B`` (``d_in x r``) and ``A`` (``r x d_out``), so its delta
``B @ A`` has the base layer's shape. A column mask scales output feature
``j`` of an adapter's contribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import DenoiserWeights, KVProvider

CONTENT = "content"
STYLE = "style"
ROLES = (CONTENT, STYLE)

MODES = ("base", "content", "style", "combined")


@dataclass
class LoraAdapter:
    layer_id: str
    B: Tensor  # d_in x r
    A: Tensor  # r x d_out

    def __post_init__(self):
        d_in, r = self.B.shape
        r2, d_out = self.A.shape
        if r != r2:
            raise ad.ShapeError(f"{self.layer_id}: B is {self.B.shape} but A is {self.A.shape}")
        if r > min(d_in, d_out):
            raise ValueError(f"{self.layer_id}: rank {r} exceeds min({d_in}, {d_out})")

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    @property
    def d_in(self) -> int:
        return self.B.shape[0]

    @property
    def d_out(self) -> int:
        return self.A.shape[1]

    @classmethod
    def init(cls, layer_id: str, d_in: int, d_out: int, rank: int, rng: np.random.Generator) -> "LoraAdapter":
        """``B = 0`` and Gaussian ``A``, so the delta starts at exactly zero."""
        A = rng.standard_normal((rank, d_out)) / np.sqrt(rank)
        return cls(layer_id, Tensor(np.zeros((d_in, rank)), name=f"{layer_id}.B"), Tensor(A, name=f"{layer_id}.A"))

    def parameters(self) -> list[Tensor]:
        return [self.B, self.A]


@dataclass
class ColumnMask:
    """Per-output-column scale; entries outside ``support`` are held at zero."""

    values: Tensor  # (d_out,)
    support: np.ndarray  # sorted int indices

    def __post_init__(self):
        self.support = np.asarray(sorted(int(i) for i in np.asarray(self.support).ravel()), dtype=np.int64)
        off = np.ones(self.d_out, dtype=bool)
        off[self.support] = False
        if np.any(self.values.data[off] != 0.0):
            raise ValueError("mask values must be zero outside the support")

    @property
    def d_out(self) -> int:
        return self.values.shape[0]

    @classmethod
    def full(cls, d_out: int) -> "ColumnMask":
        return cls(Tensor(np.ones(d_out)), np.arange(d_out))

    @classmethod
    def empty(cls, d_out: int) -> "ColumnMask":
        return cls(Tensor(np.zeros(d_out)), np.zeros(0, dtype=np.int64))

    def indicator(self) -> np.ndarray:
        ind = np.zeros(self.d_out)
        ind[self.support] = 1.0
        return ind

    def effective(self) -> Tensor:
        """Mask values times the support indicator; off-support gradients vanish."""
        return ad.mul(self.values, Tensor(self.indicator()))

    def binary(self) -> np.ndarray:
        return self.indicator()

    def restrict(self, cols: Iterable[int], value: float = 1.0) -> None:
        """Replace the support with ``cols``, all set to ``value``."""
        support = np.asarray(sorted({int(c) for c in cols}), dtype=np.int64)
        data = np.zeros(self.d_out)
        data[support] = value
        self.values.data = data
        self.support = support

    def add_columns(self, cols: Iterable[int], value: float = 1.0) -> None:
        new = [int(c) for c in cols if int(c) not in set(self.support.tolist())]
        if not new:
            return
        data = self.values.data.copy()
        data[new] = value
        self.values.data = data
        self.support = np.asarray(sorted(set(self.support.tolist()) | set(new)), dtype=np.int64)


@dataclass
class LoraSet:
    role: str
    layers: dict[str, tuple[LoraAdapter, ColumnMask]] = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown LoRA role {self.role!r}")

    @classmethod
    def init(cls, role: str, weights: DenoiserWeights, rank: int, rng: np.random.Generator) -> "LoraSet":
        out = cls(role)
        for block in weights.config.blocks:
            for kind, W0 in zip(("K", "V"), weights.kv_weights(block)):
                lid = f"{block}.{kind}"
                d_in, d_out = W0.shape
                out.layers[lid] = (LoraAdapter.init(lid, d_in, d_out, rank, rng), ColumnMask.full(d_out))
        return out

    def adapter(self, layer_id: str) -> LoraAdapter:
        return self.layers[layer_id][0]

    def mask(self, layer_id: str) -> ColumnMask:
        return self.layers[layer_id][1]

    def layer_ids(self) -> list[str]:
        return list(self.layers)


# --------------------------------------------------------------------------- forward algebra


def lora_delta(adapter: LoraAdapter) -> Tensor:
    """``B @ A`` as a ``d_in x d_out`` tensor."""
    return ad.matmul(adapter.B, adapter.A)


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _col_scale(u: Tensor, m: Tensor) -> Tensor:
    if m.shape[-1] != u.shape[-1]:
        raise ad.ShapeError(f"mask has {m.shape[-1]} entries for {u.shape[-1]} output columns")
    lead = (1,) * (u.data.ndim - 1)
    return ad.mul(u, ad.expand(ad.reshape(m, lead + m.shape), u.shape))


def naive_kv(W0, dW_c, dW_s, x) -> Tensor:
    """``x @ (W0 + dW_c + dW_s)``: both adapters see every prompt token."""
    W0, dW_c, dW_s, x = map(_as_t, (W0, dW_c, dW_s, x))
    if not (W0.shape == dW_c.shape == dW_s.shape):
        raise ad.ShapeError(f"base {W0.shape} and deltas {dW_c.shape}, {dW_s.shape} differ")
    return ad.matmul(x, ad.add(ad.add(W0, dW_c), dW_s))


def separated_terms(W0, style, content, x, x_s, x_c) -> tuple[Tensor, Tensor, Tensor]:
    """The three K/V contributions: base on ``x``, masked deltas on their trigger prompts."""
    W0, x, x_s, x_c = map(_as_t, (W0, x, x_s, x_c))
    (dW_s, m_s), (dW_c, m_c) = style, content
    dW_s, m_s, dW_c, m_c = map(_as_t, (dW_s, m_s, dW_c, m_c))
    for name, p in (("x", x), ("x_s", x_s), ("x_c", x_c)):
        if p.shape[-1] != W0.shape[0]:
            raise ad.ShapeError(f"{name} has embedding dim {p.shape[-1]}, base layer expects {W0.shape[0]}")
    for name, m in (("m_s", m_s), ("m_c", m_c)):
        if m.shape != (W0.shape[1],):
            raise ad.ShapeError(f"{name} has length {m.shape[0] if m.shape else 0}, expected d_out={W0.shape[1]}")
    base = ad.matmul(x, W0)
    s_term = _col_scale(ad.matmul(x_s, dW_s), m_s)
    c_term = _col_scale(ad.matmul(x_c, dW_c), m_c)
    return base, s_term, c_term


def combine_terms(base: Tensor, s_term: Tensor, c_term: Tensor) -> Tensor:
    """Sum the terms, or append adapter rows after the base rows when token counts differ."""
    n = base.shape[-2]
    if s_term.shape[-2] == n and c_term.shape[-2] == n:
        return ad.add(ad.add(base, s_term), c_term)
    return ad.concat([base, s_term, c_term], axis=-2)


def separated_kv(W0, style, content, x, x_s, x_c) -> Tensor:
    """Prompt-separated K or V.

    ``style`` and ``content`` are ``(delta, mask)`` pairs. The base term runs
    on the combined prompt ``x``; each delta runs on its own trigger prompt
    and is column-scaled by its mask. Terms with matching token counts are
    summed; otherwise the adapter rows are appended after the base rows.
    """
    return combine_terms(*separated_terms(W0, style, content, x, x_s, x_c))


# --------------------------------------------------------------------------- inference-time merging


def masked_delta(adapter: LoraAdapter, mask: ColumnMask, binary: bool = False) -> np.ndarray:
    m = mask.binary() if binary else mask.values.data
    return (adapter.B.data @ adapter.A.data) * m[None, :]


def merged_projection(W0: np.ndarray, content: LoraSet | None, style: LoraSet | None, layer_id: str, binary: bool = False) -> np.ndarray:
    W = np.array(W0, dtype=np.float64)
    for s in (content, style):
        if s is not None:
            adapter, mask = s.layers[layer_id]
            W = W + masked_delta(adapter, mask, binary)
    return W


def lora_kv_provider(
    weights: DenoiserWeights,
    prompt,
    content: LoraSet | None,
    style: LoraSet | None,
    binary: bool = False,
) -> KVProvider:
    """Single-prompt provider with ``W0 + m_c*dW_c + m_s*dW_s`` baked per layer."""
    x = np.asarray(prompt.data if isinstance(prompt, Tensor) else prompt, dtype=np.float64)
    cache: dict[str, tuple[Tensor, Tensor]] = {}
    for block in weights.config.blocks:
        pair = []
        for kind, W0 in zip(("K", "V"), weights.kv_weights(block)):
            W = merged_projection(W0.data, content, style, f"{block}.{kind}", binary)
            pair.append(Tensor(x @ W))
        cache[block] = (pair[0], pair[1])
    return lambda block: cache[block]


def merge_for_inference(checkpoint, mode: str, weights: DenoiserWeights, prompt, binary: bool = False) -> KVProvider:
    """Provider for one inference mode of a checkpoint.

    ``base`` uses ``W0`` only; ``content`` and ``style`` add one masked
    delta; ``combined`` adds both. ``binary`` swaps trained mask values for
    their 0/1 support indicators.
    """
    if mode not in MODES:
        raise ValueError(f"unknown inference mode {mode!r}; expected one of {MODES}")
    content = checkpoint.content if mode in ("content", "combined") else None
    style = checkpoint.style if mode in ("style", "combined") else None
    return lora_kv_provider(weights, prompt, content, style, binary)


class ConfigMismatch(ValueError):
    """Two artefacts were produced against different base configurations."""


def cross_combine(content_ckpt, style_ckpt, weights: DenoiserWeights, prompt, binary: bool = False) -> KVProvider:
    """Combined-mode provider: content set of the first, style set of the second."""
    if content_ckpt.config_hash != style_ckpt.config_hash:
        raise ConfigMismatch(
            f"config hash {content_ckpt.config_hash:016x} != {style_ckpt.config_hash:016x}"
        )
    return lora_kv_provider(weights, prompt, content_ckpt.content, style_ckpt.style, binary)
