"""Invariance and diversity metrics over encoded view sets.

Invariance is the mean normalized similarity between each view embedding and
its anchor embedding, maximal at 1 when every view equals its anchor.
Diversity is the mean exp-scaled pairwise similarity among a sample's views
(ordered pairs, both directions), with scale sigma. Both reduce dot products
of float64 embeddings; with unit-normalized inputs the invariance lies in
[-1, 1] and the diversity in [exp(-1/sigma), exp(1/sigma)].
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .augment import AugmentSpec, center_crop, make_views
from .core import ImageTensor, RngStream, rng_fork, worker_count
from .encoder import EncoderParams, forward


class AnchorEncoding(str, Enum):
    QUERY = "query"
    KEY = "key"


@dataclass(frozen=True)
class MetricConfig:
    """Knobs for the view-quality evaluation."""

    sigma: float = 1.0
    views: int = 2
    anchor_encoding: AnchorEncoding = AnchorEncoding.QUERY
    normalized: bool = True  # False evaluates raw pre-normalisation embeddings

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.views < 2:
            raise ValueError(f"diversity needs >= 2 views per anchor, got {self.views}")


@dataclass(frozen=True)
class MetricReport:
    """Aggregate metrics plus the per-anchor contributions they average."""

    l_inv: float
    l_div: float
    per_anchor_inv: np.ndarray
    per_anchor_div: np.ndarray
    count: int
    config: MetricConfig
    zero_views: int = 0  # views whose embedding collapsed to the zero vector


def invariance_per_anchor(anchors: np.ndarray, views: np.ndarray) -> np.ndarray:
    """Per-anchor mean of S(view, anchor) / S(anchor, anchor).

    anchors is (N, d), views is (N, V, d). Raises when any anchor has zero
    self-similarity (a zero embedding), naming the offending anchors.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    views = np.asarray(views, dtype=np.float64)
    if anchors.ndim != 2 or views.ndim != 3 or views.shape[0] != anchors.shape[0] or views.shape[2] != anchors.shape[1]:
        raise ValueError(f"shape mismatch: anchors {anchors.shape}, views {views.shape}")
    denom = np.einsum("nd,nd->n", anchors, anchors)
    dead = np.nonzero(denom == 0.0)[0]
    if dead.size:
        raise ValueError(f"anchors with zero self-similarity: {dead.tolist()}")
    sims = np.einsum("nvd,nd->nv", views, anchors)
    return (sims / denom[:, None]).mean(axis=1)


def invariance(anchors: np.ndarray, views: np.ndarray) -> float:
    return float(np.mean(invariance_per_anchor(anchors, views)))


def diversity_per_anchor(views: np.ndarray, sigma: float) -> np.ndarray:
    """Per-anchor mean of exp(S(view_v, view_w) / sigma) over ordered pairs v != w."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 3:
        raise ValueError(f"views must be (N, V, d), got {views.shape}")
    n, v, _ = views.shape
    if v < 2:
        raise ValueError(f"diversity needs >= 2 views, got V = {v}")
    gram = np.einsum("nvd,nwd->nvw", views, views)
    pair = np.exp(gram / sigma)
    off_diag = pair.sum(axis=(1, 2)) - np.trace(pair, axis1=1, axis2=2)
    return off_diag / (v * (v - 1))


def diversity(views: np.ndarray, sigma: float) -> float:
    return float(np.mean(diversity_per_anchor(views, sigma)))


def evaluate_views(
    images: Sequence[ImageTensor],
    encoder: EncoderParams,
    spec: AugmentSpec,
    cfg: MetricConfig,
    rng: RngStream,
    donors: Sequence[ImageTensor] | None = None,
) -> MetricReport:
    """Encode center-cropped anchors and their augmented views, then measure both metrics.

    The anchor embedding is the encoding of the raw (center-cropped, never
    augmented) image; views come from make_views with a per-anchor forked
    stream, so reports are reproducible and safe to fan out across workers.
    """
    if len(images) == 0:
        raise ValueError("need at least one anchor image")
    pool = list(donors) if donors is not None else list(images)

    def encode(batch: np.ndarray) -> np.ndarray:
        out, record = forward(encoder, batch)
        return out.rows if cfg.normalized else record.pre_norm

    def views_for(i: int) -> np.ndarray:
        vs = make_views(images[i], pool, cfg.views, spec, rng_fork(rng, i), anchor_index=i)
        return np.stack([v.flat() for v in vs.views])

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            view_inputs = list(ex.map(views_for, range(len(images))))
    else:
        view_inputs = [views_for(i) for i in range(len(images))]

    anchor_inputs = np.stack([center_crop(img).flat() for img in images])
    anchor_emb = encode(anchor_inputs)
    stacked = np.concatenate(view_inputs)
    view_emb = encode(stacked).reshape(len(images), cfg.views, -1)
    zero_views = int(np.sum(np.all(view_emb == 0.0, axis=2))) if cfg.normalized else 0

    per_inv = invariance_per_anchor(anchor_emb, view_emb)
    per_div = diversity_per_anchor(view_emb, cfg.sigma)
    return MetricReport(
        l_inv=float(np.mean(per_inv)),
        l_div=float(np.mean(per_div)),
        per_anchor_inv=per_inv,
        per_anchor_div=per_div,
        count=len(images),
        config=cfg,
        zero_views=zero_views,
    )
