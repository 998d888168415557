"""Small dual encoders with linear projection heads and L2 normalization.

Vision: ``x -> tanh(x W1 + b1) W2 + b2 -> P_v -> unit norm``.
Text: mean-pooled token embeddings through the same kind of 2-layer
perceptron, then ``P_t`` and unit norm.  Both projections are bias-free and
map into a shared 512-d space.  The temperature is stored as its logarithm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from contrastlab.corpus import EMPTY_TOKEN, Corpus, Study
from contrastlab.sampler import Framing

PROJ_DIM = 512
INIT_TEMPERATURE = 0.07
TAU_MIN = 1e-3
TAU_MAX = 1.0

# rows with a smaller pre-normalization norm map to a fixed basis vector
ZERO_NORM = 1e-12

PARAM_NAMES = (
    "vision.w1", "vision.b1", "vision.w2", "vision.b2",
    "text.embed", "text.w1", "text.b1", "text.w2", "text.b2",
    "vision_proj", "text_proj", "log_temperature",
)


@dataclass(frozen=True)
class ModelDims:
    d_img: int
    vocab_size: int
    d_txt: int = 32
    hidden: int = 64
    embed_img: int = 64
    embed_txt: int = 64

    def __post_init__(self):
        for name in ("d_img", "vocab_size", "d_txt", "hidden", "embed_img", "embed_txt"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class EncoderParams:
    dims: ModelDims
    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def tau(self) -> float:
        return float(np.exp(self.arrays["log_temperature"]))

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def clamp_temperature(self, tau_min: float = TAU_MIN, tau_max: float = TAU_MAX) -> None:
        lt = self.arrays["log_temperature"]
        np.clip(lt, math.log(tau_min), math.log(tau_max), out=lt)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())


def _shapes(d: ModelDims) -> dict[str, tuple[int, ...]]:
    return {
        "vision.w1": (d.d_img, d.hidden),
        "vision.b1": (d.hidden,),
        "vision.w2": (d.hidden, d.embed_img),
        "vision.b2": (d.embed_img,),
        "text.embed": (d.vocab_size, d.d_txt),
        "text.w1": (d.d_txt, d.hidden),
        "text.b1": (d.hidden,),
        "text.w2": (d.hidden, d.embed_txt),
        "text.b2": (d.embed_txt,),
        "vision_proj": (d.embed_img, PROJ_DIM),
        "text_proj": (d.embed_txt, PROJ_DIM),
        "log_temperature": (),
    }


def _fan_in(name: str, d: ModelDims) -> int:
    return {
        "vision.w1": d.d_img, "vision.b1": d.d_img,
        "vision.w2": d.hidden, "vision.b2": d.hidden,
        # an embedding lookup is a one-hot row selection
        "text.embed": 1,
        "text.w1": d.d_txt, "text.b1": d.d_txt,
        "text.w2": d.hidden, "text.b2": d.hidden,
        "vision_proj": d.embed_img, "text_proj": d.embed_txt,
    }[name]


def init_params(dims: ModelDims, seed: int) -> EncoderParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, temperature 0.07."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1417]))
    arrays = {}
    for name, shape in _shapes(dims).items():
        if name == "log_temperature":
            arrays[name] = np.array(math.log(INIT_TEMPERATURE))
            continue
        bound = 1.0 / math.sqrt(_fan_in(name, dims))
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return EncoderParams(dims, arrays)


def zeros_like_params(params: EncoderParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.arrays.items()}


def check_compatible(params: EncoderParams, corpus: Corpus) -> None:
    cfg = corpus.config
    if params.dims.d_img != cfg.d_img:
        raise ValueError(f"model d_img={params.dims.d_img} does not match corpus d_img={cfg.d_img}")
    if params.dims.vocab_size < cfg.vocab_size:
        raise ValueError(f"model vocab_size={params.dims.vocab_size} smaller than corpus vocab {cfg.vocab_size}")


# ----------------------------------------------------------------- forward


@dataclass
class _TowerCache:
    x: np.ndarray
    h: np.ndarray
    e: np.ndarray
    z: np.ndarray
    norms: np.ndarray
    y: np.ndarray
    degenerate: np.ndarray
    pool: np.ndarray | None = None


def _normalize(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    degenerate = norms < ZERO_NORM
    safe = np.where(degenerate, 1.0, norms)
    y = z / safe[:, None]
    if degenerate.any():
        y[degenerate] = 0.0
        y[degenerate, 0] = 1.0
    return y, norms, degenerate


def _tower(params: EncoderParams, prefix: str, proj: str, x: np.ndarray) -> _TowerCache:
    h = np.tanh(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    e = h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]
    z = e @ params[proj]
    y, norms, degenerate = _normalize(z)
    return _TowerCache(x, h, e, z, norms, y, degenerate)


def _pooling_matrix(token_seqs: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    pool = np.empty((len(token_seqs), vocab_size))
    for i, toks in enumerate(token_seqs):
        toks = np.asarray(toks if len(toks) else (EMPTY_TOKEN,), dtype=np.int64)
        if toks.max() >= vocab_size or toks.min() < 0:
            raise ValueError(f"token id out of range for vocab_size={vocab_size}")
        pool[i] = np.bincount(toks, minlength=vocab_size) / toks.size
    return pool


def encode_images(params: EncoderParams, features: np.ndarray) -> tuple[np.ndarray, _TowerCache]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.dims.d_img:
        raise ValueError(f"expected image features of shape (N, {params.dims.d_img}), got {features.shape}")
    cache = _tower(params, "vision", "vision_proj", features)
    return cache.y, cache


def encode_texts(params: EncoderParams, token_seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, _TowerCache]:
    """Encode token sequences; an empty sequence is read as the reserved empty token."""
    pool = _pooling_matrix(token_seqs, params.dims.vocab_size)
    cache = _tower(params, "text", "text_proj", pool @ params["text.embed"])
    cache.pool = pool
    return cache.y, cache


def framing_text(study: Study, framing: Framing) -> tuple[int, ...]:
    return study.full_report if framing.is_full_report else study.sections[framing.section].text


@dataclass
class EmbeddingBatch:
    image_emb: np.ndarray
    text_emb: np.ndarray
    study_ids: tuple[int, ...]
    framing: Framing


@dataclass
class BatchCache:
    image: _TowerCache
    text: _TowerCache
    n: int = field(init=False)

    def __post_init__(self):
        self.n = self.image.y.shape[0]


def encode_batch(params: EncoderParams, studies: Sequence[Study], framing: Framing
                 ) -> tuple[EmbeddingBatch, BatchCache]:
    feats = np.stack([s.image_features for s in studies])
    img, img_cache = encode_images(params, feats)
    txt, txt_cache = encode_texts(params, [framing_text(s, framing) for s in studies])
    batch = EmbeddingBatch(img, txt, tuple(s.study_id for s in studies), framing)
    return batch, BatchCache(img_cache, txt_cache)


# ---------------------------------------------------------------- backward


def _normalize_backward(c: _TowerCache, dy: np.ndarray) -> np.ndarray:
    # d(z/|z|) = (I - y y^T) dz / |z|
    radial = np.sum(c.y * dy, axis=1, keepdims=True)
    dz = (dy - c.y * radial) / np.where(c.degenerate, 1.0, c.norms)[:, None]
    dz[c.degenerate] = 0.0
    return dz


def _tower_backward(params: EncoderParams, prefix: str, proj: str, c: _TowerCache, dy: np.ndarray,
                    grads: dict[str, np.ndarray]) -> np.ndarray:
    dz = _normalize_backward(c, dy)
    grads[proj] += c.e.T @ dz
    de = dz @ params[proj].T
    grads[f"{prefix}.w2"] += c.h.T @ de
    grads[f"{prefix}.b2"] += de.sum(axis=0)
    da = (de @ params[f"{prefix}.w2"].T) * (1.0 - c.h ** 2)
    grads[f"{prefix}.w1"] += c.x.T @ da
    grads[f"{prefix}.b1"] += da.sum(axis=0)
    return da @ params[f"{prefix}.w1"].T


def encode_backward(params: EncoderParams, cache: BatchCache, d_image_emb: np.ndarray,
                    d_text_emb: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients on the unit-norm embeddings."""
    expected = (cache.n, PROJ_DIM)
    if d_image_emb.shape != expected or d_text_emb.shape != expected:
        raise ValueError(
            f"upstream gradient shapes {d_image_emb.shape}/{d_text_emb.shape} do not match {expected}"
        )
    grads = zeros_like_params(params)
    _tower_backward(params, "vision", "vision_proj", cache.image, d_image_emb, grads)
    dx = _tower_backward(params, "text", "text_proj", cache.text, d_text_emb, grads)
    grads["text.embed"] += cache.text.pool.T @ dx
    return grads
