"""Modality encoders: ViT-style image encoder, transformer text encoder,
and a frozen random-Fourier location encoder.

Desk-scale defaults (32x32x3 images, patch 8, width 32, 2 layers) keep the
whole model cheap enough for finite-difference verification; the configs
accept larger shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.special import erf

from . import autodiff as ad
from .autodiff import Tensor
from .rng import rng_for

PAD_ID = 0
SOS_ID = 1
EOS_ID = 2
NUM_SPECIAL_TOKENS = 3
BYTE_VOCAB_SIZE = 256 + NUM_SPECIAL_TOKENS


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VitConfig:
    height: int = 32
    width: int = 32
    channels: int = 3
    patch: int = 8
    dim: int = 32
    layers: int = 2
    heads: int = 4
    ff_mult: int = 4

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(
                f"patch {self.patch} must divide image {self.height}x{self.width}"
            )
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int = BYTE_VOCAB_SIZE
    dim: int = 32
    layers: int = 2
    heads: int = 4
    max_len: int = 32
    ff_mult: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.vocab_size < NUM_SPECIAL_TOKENS:
            raise ValueError("vocab must at least hold the special tokens")


@dataclass(frozen=True)
class LocationConfig:
    dim: int = 32
    num_frequencies: int = 32
    frequency_scale: float = 64.0
    hidden: int = 64
    seed: int = 1869


# ---------------------------------------------------------------------------
# Byte-level tokenizer
# ---------------------------------------------------------------------------


def tokenize(text: str, max_len: int) -> list[int]:
    """[SOS] + byte ids + [EOS], truncating the bytes to fit max_len."""
    body = list(text.encode("utf-8"))[: max_len - 2]
    return [SOS_ID] + [b + NUM_SPECIAL_TOKENS for b in body] + [EOS_ID]


def pad_ids(ids: list[int], length: int) -> list[int]:
    if len(ids) > length:
        raise ValueError(f"sequence of length {len(ids)} exceeds {length}")
    return ids + [PAD_ID] * (length - len(ids))


# ---------------------------------------------------------------------------
# Transformer block (shared by image and text encoders)
# ---------------------------------------------------------------------------


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor

    @classmethod
    def create(cls, dim: int, ff_mult: int, rng: np.random.Generator) -> "BlockParams":
        def w(shape):
            return ad.parameter(rng.normal(0.0, 0.02, size=shape))

        hidden = dim * ff_mult
        return cls(
            ln1_gain=ad.parameter(np.ones(dim)),
            ln1_bias=ad.parameter(np.zeros(dim)),
            wq=w((dim, dim)),
            bq=ad.parameter(np.zeros(dim)),
            wk=w((dim, dim)),
            bk=ad.parameter(np.zeros(dim)),
            wv=w((dim, dim)),
            bv=ad.parameter(np.zeros(dim)),
            wo=w((dim, dim)),
            bo=ad.parameter(np.zeros(dim)),
            ln2_gain=ad.parameter(np.ones(dim)),
            ln2_bias=ad.parameter(np.zeros(dim)),
            w_ff1=w((dim, hidden)),
            b_ff1=ad.parameter(np.zeros(hidden)),
            w_ff2=w((hidden, dim)),
            b_ff2=ad.parameter(np.zeros(dim)),
        )

    def named(self, prefix: str):
        for name in (
            "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv",
            "wo", "bo", "ln2_gain", "ln2_bias", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
        ):
            yield f"{prefix}.{name}", getattr(self, name)


def block_forward(z: Tensor, p: BlockParams, heads: int) -> Tensor:
    """Pre-LN attention sublayer, then pre-LN feed-forward, both residual."""
    attended = ad.multi_head_attention(
        ad.layer_norm(z, p.ln1_gain, p.ln1_bias),
        p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo,
        num_heads=heads,
    )
    z = ad.add(z, attended)
    h = ad.layer_norm(z, p.ln2_gain, p.ln2_bias)
    h = ad.add(ad.matmul(h, p.w_ff1), p.b_ff1)
    h = ad.add(ad.matmul(ad.gelu(h), p.w_ff2), p.b_ff2)
    return ad.add(z, h)


# ---------------------------------------------------------------------------
# Image encoder
# ---------------------------------------------------------------------------


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """Split an (H, W, C) image into row-major flattened patches.

    Row k of the result is the row-major flattening of patch k, patches
    ordered row-major over the patch grid.
    """
    h, w = image.shape[0], image.shape[1]
    c = image.shape[2] if image.ndim == 3 else 1
    if h % patch or w % patch:
        raise ValueError(f"patch {patch} must divide image {h}x{w}")
    img = image.reshape(h, w, c)
    gh, gw = h // patch, w // patch
    blocks = img.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(gh * gw, patch * patch * c)


def unpatchify(patches: np.ndarray, height: int, width: int, channels: int, patch: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    gh, gw = height // patch, width // patch
    blocks = patches.reshape(gh, gw, patch, patch, channels).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(height, width, channels)


@dataclass
class ImageEncoderParams:
    patch_w: Tensor  # (P^2*C, d) linear patch projection, no bias
    cls_token: Tensor  # (1, d) learnable global token prepended to the patches
    pos: Tensor  # (N+1, d) positional table
    blocks: list[BlockParams]
    lnf_gain: Tensor
    lnf_bias: Tensor

    @classmethod
    def create(cls, cfg: VitConfig, rng: np.random.Generator) -> "ImageEncoderParams":
        return cls(
            patch_w=ad.parameter(rng.normal(0.0, 0.02, size=(cfg.patch_dim, cfg.dim))),
            cls_token=ad.parameter(rng.normal(0.0, 0.02, size=(1, cfg.dim))),
            pos=ad.parameter(rng.normal(0.0, 0.02, size=(cfg.num_patches + 1, cfg.dim))),
            blocks=[BlockParams.create(cfg.dim, cfg.ff_mult, rng) for _ in range(cfg.layers)],
            lnf_gain=ad.parameter(np.ones(cfg.dim)),
            lnf_bias=ad.parameter(np.zeros(cfg.dim)),
        )

    def named(self, prefix: str = "image"):
        yield f"{prefix}.patch_w", self.patch_w
        yield f"{prefix}.cls_token", self.cls_token
        yield f"{prefix}.pos", self.pos
        for i, b in enumerate(self.blocks):
            yield from b.named(f"{prefix}.block{i}")
        yield f"{prefix}.lnf_gain", self.lnf_gain
        yield f"{prefix}.lnf_bias", self.lnf_bias


def encode_image(
    image: np.ndarray, params: ImageEncoderParams, cfg: VitConfig
) -> tuple[Tensor, Tensor]:
    """Encode an (H, W, C) image into (global (d,), patch tokens (N, d)).

    The global output is the final-layer activation at position 0, i.e. the
    prepended learnable token.
    """
    image = np.asarray(image, dtype=np.float64)
    expected = (cfg.height, cfg.width, cfg.channels)
    if image.shape != expected:
        raise ValueError(f"image shape {image.shape} does not match config {expected}")
    patches = ad.constant(patchify(image, cfg.patch))
    projected = ad.matmul(patches, params.patch_w)
    z = ad.add(ad.concat_rows([params.cls_token, projected]), params.pos)
    for block in params.blocks:
        z = block_forward(z, block, cfg.heads)
    z = ad.layer_norm(z, params.lnf_gain, params.lnf_bias)
    return ad.take_row(z, 0), ad.slice_rows(z, 1, cfg.num_patches + 1)


# ---------------------------------------------------------------------------
# Text encoder
# ---------------------------------------------------------------------------


@dataclass
class TextEncoderParams:
    tok_embed: Tensor  # (V, d)
    pos: Tensor  # (max_len, d)
    blocks: list[BlockParams]
    lnf_gain: Tensor
    lnf_bias: Tensor

    @classmethod
    def create(cls, cfg: TextConfig, rng: np.random.Generator) -> "TextEncoderParams":
        return cls(
            tok_embed=ad.parameter(rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.dim))),
            pos=ad.parameter(rng.normal(0.0, 0.02, size=(cfg.max_len, cfg.dim))),
            blocks=[BlockParams.create(cfg.dim, cfg.ff_mult, rng) for _ in range(cfg.layers)],
            lnf_gain=ad.parameter(np.ones(cfg.dim)),
            lnf_bias=ad.parameter(np.zeros(cfg.dim)),
        )

    def named(self, prefix: str = "text"):
        yield f"{prefix}.tok_embed", self.tok_embed
        yield f"{prefix}.pos", self.pos
        for i, b in enumerate(self.blocks):
            yield from b.named(f"{prefix}.block{i}")
        yield f"{prefix}.lnf_gain", self.lnf_gain
        yield f"{prefix}.lnf_bias", self.lnf_bias


def _validate_ids(ids: list[int], cfg: TextConfig) -> int:
    """Check [SOS]...[EOS][PAD]* well-formedness; return the EOS index."""
    if len(ids) > cfg.max_len:
        raise ValueError(f"sequence length {len(ids)} exceeds max {cfg.max_len}")
    if not ids or ids[0] != SOS_ID:
        raise ValueError("sequence must begin with [SOS]")
    if ids.count(EOS_ID) != 1:
        raise ValueError("sequence must contain exactly one [EOS]")
    eos = ids.index(EOS_ID)
    if any(t != PAD_ID for t in ids[eos + 1:]):
        raise ValueError("only [PAD] may follow [EOS]")
    if any(t == PAD_ID for t in ids[:eos]):
        raise ValueError("[PAD] may not appear before [EOS]")
    if any(t < 0 or t >= cfg.vocab_size for t in ids):
        raise ValueError("token id out of vocabulary range")
    return eos


def encode_text(
    ids: list[int], params: TextEncoderParams, cfg: TextConfig
) -> tuple[Tensor, Tensor]:
    """Encode a token id sequence into (global (d,), tokens (l, d)).

    The global output is the final-layer activation at the [EOS] position.
    Trailing [PAD] ids are dropped before attention, which realizes pad
    masking exactly: pad positions influence nothing and are not returned.
    """
    ids = [int(t) for t in ids]
    eos = _validate_ids(ids, cfg)
    live = ids[: eos + 1]
    z = ad.add(
        ad.embedding_lookup(params.tok_embed, live),
        ad.slice_rows(params.pos, 0, len(live)),
    )
    for block in params.blocks:
        z = block_forward(z, block, cfg.heads)
    z = ad.layer_norm(z, params.lnf_gain, params.lnf_bias)
    return ad.take_row(z, eos), z


# ---------------------------------------------------------------------------
# Frozen location encoder
# ---------------------------------------------------------------------------


def _np_gelu(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


@dataclass
class LocationEncoderParams:
    """Random-Fourier coordinate features through a small frozen head.

    Stands in for an externally pretrained geolocation encoder: all
    parameters come from a fixed seed and never receive gradient.
    """

    freq: np.ndarray  # (2, F)
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    frozen: bool = True

    @classmethod
    def create(cls, cfg: LocationConfig) -> "LocationEncoderParams":
        rng = np.random.default_rng(cfg.seed)
        return cls(
            freq=rng.normal(0.0, cfg.frequency_scale, size=(2, cfg.num_frequencies)),
            w1=rng.normal(0.0, 0.5, size=(2 * cfg.num_frequencies, cfg.hidden)),
            b1=rng.normal(0.0, 0.1, size=cfg.hidden),
            w2=rng.normal(0.0, 0.5, size=(cfg.hidden, cfg.dim)),
            b2=rng.normal(0.0, 0.1, size=cfg.dim),
        )


def encode_location(lat: float, lon: float, params: LocationEncoderParams) -> Tensor:
    """Deterministic frozen embedding of (lat, lon) degrees; returns a
    constant tensor that never joins the tape."""
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"latitude {lat} out of range [-90, 90]")
    if not -180.0 <= lon <= 180.0:
        raise ValueError(f"longitude {lon} out of range [-180, 180]")
    x = np.array([lat / 90.0, lon / 180.0])
    angles = 2.0 * math.pi * (x @ params.freq)
    feats = np.concatenate([np.sin(angles), np.cos(angles)])
    h = _np_gelu(feats @ params.w1 + params.b1)
    return ad.constant(h @ params.w2 + params.b2)


# ---------------------------------------------------------------------------
# Image conforming (street-view panoramas -> encoder input shape)
# ---------------------------------------------------------------------------


def conform_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Center-crop to the target aspect ratio, then resize.

    Values are float64 in [0, 1]; resizing goes through Pillow bilinear.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[0], image.shape[1]
    if (h, w) == (height, width):
        return image
    target_ratio = width / height
    if w / h > target_ratio:
        new_w = int(round(h * target_ratio))
        off = (w - new_w) // 2
        image = image[:, off: off + new_w]
    elif w / h < target_ratio:
        new_h = int(round(w / target_ratio))
        off = (h - new_h) // 2
        image = image[off: off + new_h, :]
    arr = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    resized = Image.fromarray(arr).resize((width, height), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def assign_named_values(named_params, arrays: dict[str, np.ndarray]) -> None:
    """Overwrite each named parameter's values from an array dict."""
    for name, tensor in named_params:
        if name not in arrays:
            raise KeyError(f"checkpoint is missing parameter {name!r}")
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != tensor.values.shape:
            raise ValueError(
                f"parameter {name!r} shape {arr.shape} != expected {tensor.values.shape}"
            )
        tensor.values = arr.copy()
