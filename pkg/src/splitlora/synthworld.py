"""Synthetic factorised images with ground-truth probes.

An image is ``outer(stencil, colour) + texture``: the subject decides *where*
paint goes, the style decides *what colour* it is (the first column of its
channel-mixing matrix) and adds a zero-mean periodic texture everywhere.

Textures sit on Nyquist frequencies and every stencil is built from
even-length runs, so stencils leak no energy into texture bins. That is what
keeps the style probe insensitive to the subject.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

H = W = 8
C = 4
CLAMP = 2.0


@dataclass(frozen=True)
class SubjectFactor:
    id: str
    stencil: np.ndarray  # (H, W) of {0, 1}


@dataclass(frozen=True)
class StyleFactor:
    id: str
    mix: np.ndarray  # (C, C)
    texture: np.ndarray  # (H, W, C), zero mean per channel

    @property
    def colour(self) -> np.ndarray:
        return self.mix[:, 0]

    @classmethod
    def identity(cls, channels: int = C, height: int = H, width: int = W) -> "StyleFactor":
        return cls("plain", np.eye(channels), np.zeros((height, width, channels)))


def _stencil(rows: Sequence[str]) -> np.ndarray:
    return np.array([[ch == "#" for ch in r] for r in rows], dtype=np.float64)


_STENCILS = {
    "cross": _stencil([
        "........",
        "...##...",
        "...##...",
        ".######.",
        ".######.",
        "...##...",
        "...##...",
        "........",
    ]),
    "square": _stencil([
        "........",
        "........",
        "..####..",
        "..####..",
        "..####..",
        "..####..",
        "........",
        "........",
    ]),
    "triangle": _stencil([
        "........",
        "...##...",
        "...##...",
        "..####..",
        "..####..",
        ".######.",
        ".######.",
        "........",
    ]),
    "ring": _stencil([
        "........",
        ".######.",
        ".#....#.",
        ".#....#.",
        ".#....#.",
        ".#....#.",
        ".######.",
        "........",
    ]),
}

CANVAS = SubjectFactor("canvas", np.ones((H, W)))

# (name, colour direction, Nyquist texture pattern)
_STYLE_TEMPLATES = (
    ("ember", (0.15, 1.0, 0.55, -0.45), (1, 0)),
    ("frost", (0.2, -0.5, 1.0, 0.5), (0, 1)),
    ("moss", (-0.25, 0.45, -0.35, 1.0), (1, 1)),
)


def _nyquist(fx: int, fy: int) -> np.ndarray:
    y, x = np.mgrid[0:H, 0:W]
    return np.cos(np.pi * (fx * x + fy * y))


def _make_style(name: str, colour, pattern, rng: np.random.Generator) -> StyleFactor:
    colour = np.asarray(colour, dtype=np.float64)
    while True:
        mix = np.eye(C) + 0.3 * rng.standard_normal((C, C))
        mix[:, 0] = colour
        if abs(np.linalg.det(mix)) > 0.1:
            break
    amp = rng.uniform(0.3, 0.5, C) * rng.choice([-1.0, 1.0], C)
    texture = _nyquist(*pattern)[:, :, None] * amp[None, None, :]
    return StyleFactor(name, mix, texture)


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    subjects: tuple[SubjectFactor, ...]
    styles: tuple[StyleFactor, ...]
    noise_floor: float = 0.0
    _refs: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def default(cls, seed: int = 0) -> "SynthSpec":
        rng = np.random.default_rng(seed)
        subjects = tuple(SubjectFactor(k, v) for k, v in _STENCILS.items())
        styles = tuple(_make_style(n, c, p, rng) for n, c, p in _STYLE_TEMPLATES)
        return cls(seed, subjects, styles)

    def subject(self, key) -> SubjectFactor:
        return self.subjects[key] if isinstance(key, int) else {s.id: s for s in self.subjects}[key]

    def style(self, key) -> StyleFactor:
        return self.styles[key] if isinstance(key, int) else {s.id: s for s in self.styles}[key]

    def canonical(self) -> str:
        parts = [f"seed={self.seed}", f"noise_floor={self.noise_floor!r}"]
        parts += [f"subject:{s.id}:{s.stencil.astype(int).tobytes().hex()}" for s in self.subjects]
        parts += [f"style:{s.id}:{s.mix.tobytes().hex()}:{s.texture.tobytes().hex()}" for s in self.styles]
        return ";".join(parts)

    def style_reference(self, style: StyleFactor) -> np.ndarray:
        key = style.id
        if key not in self._refs:
            sigs = [style_signature(render(s, style)) for s in self.subjects]
            self._refs[key] = np.mean(sigs, axis=0)
        return self._refs[key]


def render(subject: SubjectFactor, style: StyleFactor) -> np.ndarray:
    """``style.mix @ paint(subject) + texture``, clamped to [-2, 2]."""
    base = np.zeros(style.texture.shape)
    base[:, :, 0] = subject.stencil
    img = base @ style.mix.T + style.texture
    return np.clip(img, -CLAMP, CLAMP)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(a.ravel() @ b.ravel() / (na * nb), -1.0, 1.0))


def unmix(image: np.ndarray, styles: Sequence[StyleFactor]) -> tuple[np.ndarray, StyleFactor]:
    """Least-squares paint map under whichever candidate style fits best."""
    best = None
    for st in styles:
        y = image - st.texture
        col = st.colour
        u = y @ col / (col @ col)
        res = float(((y - u[..., None] * col) ** 2).sum())
        if best is None or res < best[0]:
            best = (res, u, st)
    return best[1], best[2]


def subject_alignment(image: np.ndarray, subject: SubjectFactor, spec: SynthSpec) -> float:
    """Cosine between the style-normalised paint map and the subject stencil."""
    candidates = (StyleFactor.identity(),) + tuple(spec.styles)
    u, _ = unmix(np.asarray(image, dtype=np.float64), candidates)
    return _cos(u, subject.stencil)


def style_signature(image: np.ndarray) -> np.ndarray:
    """Unit-normalised blocks: channel means, channel variances, Nyquist texture power."""
    img = np.asarray(image, dtype=np.float64)
    flat = img.reshape(-1, img.shape[-1])
    means = flat.mean(axis=0)
    var = flat.var(axis=0)
    bins = [_nyquist(1, 0), _nyquist(0, 1), _nyquist(1, 1)]
    tex = np.array([[abs((img[:, :, c] * b).mean()) for b in bins] for c in range(img.shape[-1])])

    def unit(v):
        n = np.linalg.norm(v)
        return v / n if n > 1e-12 else np.zeros_like(v)

    return np.concatenate([unit(means), 0.5 * unit(var), unit(tex.ravel())])


def style_alignment(image: np.ndarray, style: StyleFactor, spec: SynthSpec) -> float:
    """Cosine between the image signature and the style's mean signature over all stencils."""
    return _cos(style_signature(image), spec.style_reference(style))


def classify(image: np.ndarray, spec: SynthSpec) -> tuple[str, str]:
    """Argmax subject and argmax style under the two probes."""
    subj = max(spec.subjects, key=lambda s: subject_alignment(image, s, spec))
    sty = max(spec.styles, key=lambda s: style_alignment(image, s, spec))
    return subj.id, sty.id


METRIC_FIELDS = ("mode", "subject_score_mean", "subject_score_std", "style_score_mean", "style_score_std", "n_samples")


@dataclass
class ModeMetrics:
    mode: str
    subject_scores: list[float]
    style_scores: list[float]

    def row(self) -> dict:
        return {
            "mode": self.mode,
            "subject_score_mean": float(np.mean(self.subject_scores)),
            "subject_score_std": float(np.std(self.subject_scores)),
            "style_score_mean": float(np.mean(self.style_scores)),
            "style_score_std": float(np.std(self.style_scores)),
            "n_samples": len(self.subject_scores),
        }


def metrics_csv(rows: Sequence[ModeMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        d = r.row()
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in d.items()})
    return buf.getvalue()
