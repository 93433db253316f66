"""Synthetic 1-D "image" world with an analytically recoverable identity.

A signal on the uniform periodic grid u_j = j/d is a sum of cosine modes:
identity occupies modes 1..k_id, the per-cell content occupies modes
k_id+1..k_id+k_ct.  Style only ever touches the quadrature (sine) part of the
band, so cosine-coefficient extraction is blind to it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .numcore import RngStream, gaussian, uniform

K_ID = 4
K_ST = 2
K_CT = 4
TAU_C = 0.5
TAU_A = 0.5
MIN_D = 8

# main category -> [(subcategory, consistency dimensions)]
TAXONOMY: dict[str, list[tuple[str, tuple[str, ...]]]] = {
    "Design Style Generation": [
        ("Home Decoration", ("Style",)),
        ("IP Product", ("Style", "Identity")),
        ("Font Design", ("Style",)),
        ("Poster Design", ("Style", "Logic")),
        ("Creative Style", ("Style",)),
    ],
    "Story Generation": [
        ("Children Book", ("Logic", "Identity", "Style")),
        ("Hist. Narrative", ("Logic", "Identity")),
        ("Movie Shot", ("Logic", "Identity", "Style")),
        ("Comic Story", ("Logic", "Identity", "Style")),
        ("News Illustration", ("Logic", "Style")),
    ],
    "Progression Generation": [
        ("Evolution Illustration", ("Logic",)),
        ("Draw Progression", ("Logic", "Style")),
        ("Growth Progression", ("Logic",)),
        ("Arch. Building", ("Logic",)),
        ("Cooking Progression", ("Logic",)),
        ("Physical Law", ("Logic",)),
    ],
    "Instruction Generation": [
        ("Historical Panel", ("Logic", "Style")),
        ("Activity Arrange", ("Logic",)),
        ("Evolution Illustration", ("Logic",)),
        ("Education Illustration", ("Logic", "Style")),
        ("Travel Guide", ("Logic", "Style", "Identity")),
        ("Product Instruction", ("Logic", "Style")),
    ],
    "Character Generation": [
        ("Multi-view", ("Identity", "Style")),
        ("Multi-pose", ("Identity",)),
        ("Portrait Design", ("Identity", "Style")),
        ("Multi-Expression", ("Identity",)),
        ("Multi-Scenario", ("Identity", "Logic")),
    ],
    "Editing": [
        ("Inpainting and replacement", ("Identity",)),
        ("Element manipulation", ("Identity", "Style")),
        ("Background modification", ("Identity", "Style", "Logic")),
        ("Attribute and effect manipulation", ("Style",)),
        ("Image editing and manipulation", ("Identity", "Style", "Logic")),
    ],
}
CATEGORY_LABELS: tuple[str, ...] = tuple(
    f"{main}/{sub}" for main, subs in TAXONOMY.items() for sub, _ in subs
)


class PreconditionError(ValueError):
    """A signal or prompt does not satisfy an operation's precondition."""


def _vec(values, name: str) -> tuple[float, ...]:
    out = tuple(float(v) for v in values)
    for v in out:
        if not -1.0 <= v <= 1.0:
            raise ValueError(f"{name} component {v} outside [-1, 1]")
    return out


@dataclass(frozen=True)
class PromptSpec:
    identity: tuple[float, ...]
    style: tuple[float, ...]
    contents: tuple[tuple[float, ...], ...]
    category_label: str = "Character Generation/Multi-pose"

    def __post_init__(self):
        object.__setattr__(self, "identity", _vec(self.identity, "identity"))
        object.__setattr__(self, "style", _vec(self.style, "style"))
        contents = tuple(_vec(c, "content") for c in self.contents)
        if not contents:
            raise ValueError("a prompt needs at least one content vector")
        if len({len(c) for c in contents}) != 1:
            raise ValueError("content vectors must share one length")
        object.__setattr__(self, "contents", contents)

    @property
    def k_id(self) -> int:
        return len(self.identity)

    @property
    def k_ct(self) -> int:
        return len(self.contents[0])

    @property
    def n_contents(self) -> int:
        return len(self.contents)

    def to_json(self) -> dict:
        return {
            "identity": list(self.identity),
            "style": list(self.style),
            "contents": [list(c) for c in self.contents],
            "category_label": self.category_label,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PromptSpec":
        return cls(obj["identity"], obj["style"], obj["contents"], obj.get("category_label", ""))


def random_prompt(stream: RngStream, n_contents: int = 4, k_id: int = K_ID, k_st: int = K_ST,
                  k_ct: int = K_CT, amplitude: float = 0.8) -> PromptSpec:
    """Uniform prompt draw; ``amplitude`` < 1 leaves headroom for identity jitter."""
    identity = uniform(stream, k_id, -amplitude, amplitude)
    style = uniform(stream, k_st, -1.0, 1.0)
    contents = uniform(stream, (n_contents, k_ct), -amplitude, amplitude)
    label = CATEGORY_LABELS[int(uniform(stream, 1)[0] * len(CATEGORY_LABELS))]
    return PromptSpec(identity, style, contents, label)


def write_prompts(path, prompts: Sequence[PromptSpec]) -> None:
    with open(path, "w") as fh:
        for p in prompts:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def read_prompts(path) -> list[PromptSpec]:
    with open(path) as fh:
        return [PromptSpec.from_json(json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True, eq=False)
class Signal:
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if s.size < 1:
            raise ValueError("a signal needs at least one sample")
        if not np.all(np.isfinite(s)):
            raise ValueError("signal samples must be finite")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def d(self) -> int:
        return self.samples.size

    def __eq__(self, other):
        return isinstance(other, Signal) and np.array_equal(self.samples, other.samples)

    __hash__ = None


def grid(d: int) -> np.ndarray:
    return np.arange(d) / d


def cos_basis(modes: Sequence[int], d: int) -> np.ndarray:
    """(len(modes), d) matrix of cos(2 pi p u_j)."""
    return np.cos(2.0 * np.pi * np.outer(np.asarray(modes, dtype=np.float64), grid(d)))


def sin_basis(modes: Sequence[int], d: int) -> np.ndarray:
    return np.sin(2.0 * np.pi * np.outer(np.asarray(modes, dtype=np.float64), grid(d)))


def band_coefficients(samples: np.ndarray, modes: Sequence[int]) -> np.ndarray:
    """(2/d) sum_j x_j cos(2 pi p u_j) for each mode p, over the last axis."""
    samples = np.asarray(samples, dtype=np.float64)
    d = samples.shape[-1]
    return samples @ cos_basis(modes, d).T * (2.0 / d)


def identity_modes(k_id: int = K_ID) -> list[int]:
    return list(range(1, k_id + 1))


def content_modes(k_id: int = K_ID, k_ct: int = K_CT) -> list[int]:
    return list(range(k_id + 1, k_id + k_ct + 1))


def synthesize(identity, content, style, d: int) -> np.ndarray:
    """Noise-free samples for explicit identity/content/style vectors."""
    identity = np.asarray(identity, dtype=np.float64)
    content = np.asarray(content, dtype=np.float64)
    k_id, k_ct = identity.size, content.size
    if d < MIN_D:
        raise PreconditionError(f"resolution d={d} below minimum {MIN_D}")
    if d < 4 * (k_id + k_ct):
        raise PreconditionError(
            f"resolution d={d} cannot resolve mode {k_id + k_ct} (need d >= {4 * (k_id + k_ct)})"
        )
    modes = identity_modes(k_id) + content_modes(k_id, k_ct)
    coef = np.concatenate([identity, content])
    style = np.asarray(style, dtype=np.float64)
    gain = 1.0 + 0.25 * style[0] if style.size > 0 else 1.0
    phase = 0.25 * np.pi * style[1] if style.size > 1 else 0.0
    quadrature = gain * np.sin(phase)
    return coef @ cos_basis(modes, d) + quadrature * (coef @ sin_basis(modes, d))


def render(prompt: PromptSpec, content_index: int, noise_scale: float, stream: RngStream | None,
           d: int) -> Signal:
    if not 0 <= content_index < prompt.n_contents:
        raise PreconditionError(f"content index {content_index} out of range for {prompt.n_contents} contents")
    samples = synthesize(prompt.identity, prompt.contents[content_index], prompt.style, d)
    if noise_scale:
        if stream is None:
            raise ValueError("a noisy render needs an RngStream")
        samples = samples + noise_scale * gaussian(stream, d)
    return Signal(samples)


def extract_identity(x: Signal, k_id: int = K_ID) -> np.ndarray:
    if x.d < 4 * k_id:
        raise PreconditionError(f"resolution d={x.d} below 4*k_id={4 * k_id}")
    return band_coefficients(x.samples, identity_modes(k_id))


def extract_content(x: Signal, k_id: int = K_ID, k_ct: int = K_CT) -> np.ndarray:
    if x.d < 4 * (k_id + k_ct):
        raise PreconditionError(f"resolution d={x.d} below 4*(k_id+k_ct)={4 * (k_id + k_ct)}")
    return band_coefficients(x.samples, content_modes(k_id, k_ct))


def consistency_from_features(fa: np.ndarray, fb: np.ndarray, tau_c: float = TAU_C) -> np.ndarray:
    """Vectorised exp(-||fa - fb||^2 / tau_c) over leading axes."""
    diff = np.asarray(fa) - np.asarray(fb)
    return np.exp(-np.sum(diff * diff, axis=-1) / tau_c)


def true_consistency(a: Signal, b: Signal, tau_c: float = TAU_C, k_id: int = K_ID) -> float:
    return float(consistency_from_features(extract_identity(a, k_id), extract_identity(b, k_id), tau_c))


def alignment_reward(x: Signal, prompt: PromptSpec, content_index: int, tau_a: float = TAU_A) -> float:
    coef = extract_content(x, prompt.k_id, prompt.k_ct)
    diff = coef - np.asarray(prompt.contents[content_index])
    return float(np.exp(-np.dot(diff, diff) / tau_a))


PairScore = Callable[[Signal, Signal], float]


def consistency_reward_set(xs: Sequence[Signal], pair_score: PairScore | None = None) -> float:
    """Mean pairwise consistency over all unordered pairs of a signal set.

    ``pair_score`` defaults to the analytic oracle; a trained scorer can be
    plugged in instead.
    """
    if len(xs) < 2:
        raise PreconditionError(f"set consistency needs at least 2 signals, got {len(xs)}")
    score = pair_score or true_consistency
    vals = [score(a, b) for a, b in combinations(xs, 2)]
    return float(np.mean(vals))
