"""Multi-granularity cross-modal alignment: masked aggregation of
street-view features, region fusion, and the global and token-level
contrastive objectives.

Fusion and aggregation sum via exactly-rounded column sums, so slot
permutation and masked padding leave results bit-identical, as the
contracts require.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FUSION_MODES = ("addition", "concat", "mlp")

_UNIT_TOL = 1e-9


# ---------------------------------------------------------------------------
# Aggregation (shared per-slot MLP + masked mean)
# ---------------------------------------------------------------------------


@dataclass
class AggregatorParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, hidden: int | None = None) -> "AggregatorParams":
        hidden = hidden or dim
        return cls(
            w1=ad.parameter(rng.normal(0.0, 0.02, size=(dim, hidden))),
            b1=ad.parameter(np.zeros(hidden)),
            w2=ad.parameter(rng.normal(0.0, 0.02, size=(hidden, dim))),
            b2=ad.parameter(np.zeros(dim)),
        )

    def named(self, prefix: str):
        for name in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)

    @property
    def dim(self) -> int:
        return self.w2.shape[1]


def _transform_slot(slot: Tensor, params: AggregatorParams) -> Tensor:
    row = ad.reshape(slot, (1, slot.shape[0]))
    h = ad.gelu(ad.add(ad.matmul(row, params.w1), params.b1))
    out = ad.add(ad.matmul(h, params.w2), params.b2)
    return ad.reshape(out, (params.dim,))


def aggregate(
    features: Tensor | Sequence[Tensor],
    mask: Sequence[bool],
    params: AggregatorParams,
) -> Tensor:
    """Shared feed-forward transform per slot, then masked mean.

    ``features`` is an (m, d) matrix or a list of m (d,) vectors; ``mask``
    marks the valid slots. Each slot is transformed independently (so equal
    slot contents give bit-equal transforms at any position) and the valid
    transforms are averaged with an exactly-rounded sum. All slots invalid
    yields the zero vector.
    """
    if isinstance(features, Tensor):
        if features.values.ndim != 2:
            raise ad.ShapeError(f"aggregate expects (m, d) features, got {features.shape}")
        slots = [ad.take_row(features, i) for i in range(features.shape[0])]
    else:
        slots = list(features)
    if len(mask) != len(slots):
        raise ad.ShapeError(f"mask length {len(mask)} != slot count {len(slots)}")
    valid = [s for s, keep in zip(slots, mask) if keep]
    if not valid:
        return ad.constant(np.zeros(params.dim))
    transformed = [_transform_slot(s, params) for s in valid]
    total = ad.sum_rows_exact(ad.stack_rows(transformed))
    return ad.scale(total, 1.0 / len(valid))


# ---------------------------------------------------------------------------
# Fusion of satellite, street-view, and location features
# ---------------------------------------------------------------------------


@dataclass
class FusionParams:
    mode: str
    w1: Tensor | None = None
    b1: Tensor | None = None
    w2: Tensor | None = None
    b2: Tensor | None = None

    @classmethod
    def create(
        cls,
        mode: str,
        dim: int,
        rng: np.random.Generator,
        hidden: int | None = None,
    ) -> "FusionParams":
        if mode not in FUSION_MODES:
            raise ValueError(f"fusion mode {mode!r} not one of {FUSION_MODES}")
        if mode == "addition":
            return cls(mode=mode)
        if mode == "concat":
            return cls(
                mode=mode,
                w1=ad.parameter(rng.normal(0.0, 0.02, size=(3 * dim, dim))),
                b1=ad.parameter(np.zeros(dim)),
            )
        hidden = hidden or dim
        return cls(
            mode=mode,
            w1=ad.parameter(rng.normal(0.0, 0.02, size=(3 * dim, hidden))),
            b1=ad.parameter(np.zeros(hidden)),
            w2=ad.parameter(rng.normal(0.0, 0.02, size=(hidden, dim))),
            b2=ad.parameter(np.zeros(dim)),
        )

    def named(self, prefix: str):
        for name in ("w1", "b1", "w2", "b2"):
            t = getattr(self, name)
            if t is not None:
                yield f"{prefix}.{name}", t


def fuse(z_sat: Tensor, aggr_sv: Tensor, aggr_loc: Tensor, params: FusionParams) -> Tensor:
    """Combine the three (d,) region features into one region embedding."""
    d = z_sat.shape[0]
    if aggr_sv.shape != (d,) or aggr_loc.shape != (d,):
        raise ad.ShapeError(
            f"fuse dimension mismatch: {z_sat.shape}, {aggr_sv.shape}, {aggr_loc.shape}"
        )
    if params.mode == "addition":
        return ad.sum_rows_exact(ad.stack_rows([z_sat, aggr_sv, aggr_loc]))
    cat = ad.reshape(ad.concat_vectors([z_sat, aggr_sv, aggr_loc]), (1, 3 * d))
    if params.mode == "concat":
        out = ad.add(ad.matmul(cat, params.w1), params.b1)
        return ad.reshape(out, (d,))
    h = ad.gelu(ad.add(ad.matmul(cat, params.w1), params.b1))
    out = ad.add(ad.matmul(h, params.w2), params.b2)
    return ad.reshape(out, (d,))


# ---------------------------------------------------------------------------
# Contrastive losses
# ---------------------------------------------------------------------------


def _check_unit_rows(x: Tensor, what: str) -> None:
    norms = np.linalg.norm(x.values, axis=1)
    if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
        raise ValueError(f"{what} rows must be unit-norm (max deviation "
                         f"{np.abs(norms - 1.0).max():.2e})")


def _scaled_by_temperature(s: Tensor, tau: float | Tensor) -> Tensor:
    if isinstance(tau, Tensor):
        if tau.values.size != 1 or float(tau.values.reshape(())) <= 0.0:
            raise ValueError("temperature must be a positive scalar")
        inv = ad.exp(ad.negate(ad.log(tau)))
        return ad.mul(s, inv)
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return ad.scale(s, 1.0 / tau)


def global_contrastive_loss(
    image_embeds: Tensor, text_embeds: Tensor, tau: float | Tensor
) -> Tensor:
    """Symmetric InfoNCE between fused region embeddings and text globals.

    Both inputs are (N, d) with unit-norm rows. The loss is the mean of the
    2N per-sample negative log-softmax terms (N image-to-text rows plus N
    text-to-image columns); under uniform similarity it equals log N.
    """
    if image_embeds.values.ndim != 2 or image_embeds.shape != text_embeds.shape:
        raise ad.ShapeError(
            f"contrastive batch shapes differ: {image_embeds.shape} vs {text_embeds.shape}"
        )
    n = image_embeds.shape[0]
    if n < 2:
        raise ValueError(f"contrastive loss needs at least 2 samples, got {n}")
    _check_unit_rows(image_embeds, "image embedding")
    _check_unit_rows(text_embeds, "text embedding")
    logits = _scaled_by_temperature(
        ad.matmul(image_embeds, ad.transpose(text_embeds)), tau
    )
    log_i2t = ad.log(ad.diagonal(ad.softmax_rows(logits)))
    log_t2i = ad.log(ad.diagonal(ad.softmax_rows(ad.transpose(logits))))
    return ad.negate(ad.mean_all(ad.concat_vectors([log_i2t, log_t2i])))


def token_similarity(v: Tensor, t: Tensor) -> tuple[Tensor, Tensor]:
    """Token-level maximum-similarity scores between two token matrices.

    Returns (visual-to-text, text-to-visual): the mean over rows of one
    side of the maximum dot product against the rows of the other side.
    For unit-norm tokens both values lie in [-1, 1]; with a single token on
    each side both reduce to the plain dot product.
    """
    if v.values.ndim != 2 or t.values.ndim != 2 or v.shape[1] != t.shape[1]:
        raise ad.ShapeError(f"token shapes incompatible: {v.shape} vs {t.shape}")
    if v.shape[0] < 1 or t.shape[0] < 1:
        raise ValueError("token sequences must be non-empty")
    _check_unit_rows(v, "visual token")
    _check_unit_rows(t, "text token")
    sims = ad.pairwise_dot_rows(v, t)  # (l1, l2)
    best_for_v, _ = ad.max_axis_with_indices(sims, axis=1)
    best_for_t, _ = ad.max_axis_with_indices(sims, axis=0)
    return ad.mean_all(best_for_v), ad.mean_all(best_for_t)


def local_contrastive_loss(
    view_tokens: Sequence[Tensor],
    text_tokens: Sequence[Tensor],
    tau: float | Tensor,
) -> Tensor:
    """InfoNCE over token-level similarity scores for B aligned pairs.

    Entry (i, j) of the score matrices is the token similarity between
    view i and text j (and its mirror); positives sit on the diagonal. The
    loss is the mean of the 2B per-sample terms, matching the global loss
    convention, so with singleton token sequences the two losses coincide.
    """
    b = len(view_tokens)
    if b != len(text_tokens):
        raise ad.ShapeError(f"pair count mismatch: {b} views vs {len(text_tokens)} texts")
    if b < 2:
        raise ValueError(f"local contrastive loss needs at least 2 pairs, got {b}")
    v2t = [[None] * b for _ in range(b)]
    t2v = [[None] * b for _ in range(b)]
    for i in range(b):
        for j in range(b):
            s_vt, s_tv = token_similarity(view_tokens[i], text_tokens[j])
            v2t[i][j] = s_vt   # SIM(view_i, text_j)
            t2v[j][i] = s_tv   # SIM(text_j, view_i)
    m_v2t = ad.stack_rows([ad.stack_scalars(row) for row in v2t])
    m_t2v = ad.stack_rows([ad.stack_scalars(row) for row in t2v])
    log_v = ad.log(ad.diagonal(ad.softmax_rows(_scaled_by_temperature(m_v2t, tau))))
    log_t = ad.log(ad.diagonal(ad.softmax_rows(_scaled_by_temperature(m_t2v, tau))))
    return ad.negate(ad.mean_all(ad.concat_vectors([log_v, log_t])))


def total_loss(l_cg: Tensor, l_cl: Tensor, alpha: float = 0.5, beta: float = 0.5) -> Tensor:
    """Weighted sum of the global and local objectives."""
    if alpha < 0.0 or beta < 0.0:
        raise ValueError(f"loss weights must be nonnegative, got {alpha}, {beta}")
    return ad.add(ad.scale(l_cg, alpha), ad.scale(l_cl, beta))
