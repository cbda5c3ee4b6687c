"""Pre-training loop, linear probe, and the ablation drivers.

One ExperimentConfig pins a run completely: dataset, augmentation policy,
optimizer settings, metric settings and the root seed. Every consumer of
randomness gets its own forked stream keyed by a stable label, so runs are
reproducible bit-for-bit and per-sample work can fan out to workers without
changing results.

The loop follows the momentum-contrast recipe: per batch, build V views per
sample (view 0 feeds the key encoder, the rest are queries), evaluate the
configured InfoNCE objective against the negative queues, step the query
encoder with momentum SGD, EMA-update the key encoder, then push the key
embeddings (with labels where known) into the queues.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import AugmentSpec, make_views
from .core import ImageTensor, RngStream, rng_fork, worker_count
from .data import Dataset, DatasetSpec, DataSource, labeled_mask, load_cifar10, synth_dataset
from .encoder import (
    EncoderParams,
    TrainConfig,
    TrainState,
    backward,
    forward,
    momentum_update,
    sgd_step,
)
from .losses import UNLABELED, LabelMask, NegativeQueue, loss_semi, queue_push
from .metrics import AnchorEncoding, MetricConfig, MetricReport, evaluate_views

# fork labels for the per-run stream tree
_FORK_SPLIT = 2
_FORK_INIT = 3
_FORK_QUEUE_D = 4
_FORK_QUEUE_U = 5
_FORK_TRAIN = 6
_FORK_PROBE = 7
_FORK_METRICS = 8


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a run; equal configs give identical outputs."""

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    hidden: tuple[int, ...] = (256, 128)
    embed_dim: int = 64
    seed: int = 42

    def label(self) -> str:
        """Compact config echo used as the `config` column of CSV reports."""
        return (
            f"{self.dataset.source.value}:{self.augment.kind.value}"
            f":f={self.dataset.label_fraction:g}:V={self.train.views}"
            f":N={self.train.batch_size}:seed={self.seed}"
        )


@dataclass
class RunReport:
    """Outcome of one pre-training run (plus probe/metrics when computed)."""

    config: ExperimentConfig
    epoch_losses: list[float]
    batch_losses: list[float]
    metrics: MetricReport | None = None
    top1: float | None = None
    top5: float | None = None
    wall_clock: float = 0.0

    def __post_init__(self):
        if self.top1 is not None and self.top5 is not None and self.top1 > self.top5 + 1e-12:
            raise ValueError(f"top1 {self.top1} exceeds top5 {self.top5}")


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset.source is DataSource.CIFAR10:
        return load_cifar10(cfg.dataset.path, limit=cfg.dataset.limit)
    return synth_dataset(cfg.dataset, cfg.seed)


def pretrain(cfg: ExperimentConfig, dataset: Dataset | None = None) -> tuple[TrainState, RunReport]:
    """Run the contrastive pre-training loop; returns the final state and report.

    A run with label fraction 0 never reads the label array. Aborts with the
    epoch/batch coordinates if the loss goes non-finite.
    """
    start = time.perf_counter()
    if dataset is None:
        dataset = build_dataset(cfg)
    root = RngStream(cfg.seed)
    n = len(dataset)
    f = cfg.dataset.label_fraction
    mask = labeled_mask(n, f, rng_fork(root, _FORK_SPLIT))

    sizes = [dataset.input_dim, *cfg.hidden, cfg.embed_dim]
    query = EncoderParams.init(sizes, rng_fork(root, _FORK_INIT))
    key = query.copy()
    velocity = EncoderParams.zeros_like(query)
    queue_d = NegativeQueue.random_init(cfg.train.queue_size, cfg.embed_dim, rng_fork(root, _FORK_QUEUE_D))
    queue_u = NegativeQueue.random_init(cfg.train.queue_size, cfg.embed_dim, rng_fork(root, _FORK_QUEUE_U))

    images = dataset.image_list()
    train_rng = rng_fork(root, _FORK_TRAIN)
    v_total = cfg.train.views
    epoch_losses: list[float] = []
    batch_losses: list[float] = []
    step = 0
    for epoch in range(cfg.train.epochs):
        lr = cfg.train.lr_at(epoch)
        epoch_rng = rng_fork(train_rng, epoch)
        order = epoch_rng.permutation(n)
        losses_this_epoch: list[float] = []
        for b, lo in enumerate(range(0, n, cfg.train.batch_size)):
            idx = order[lo : lo + cfg.train.batch_size]
            batch_rng = rng_fork(epoch_rng, b)
            view_batches = _views_for_batch(images, idx, v_total, cfg.augment, batch_rng)

            key_in = np.stack([vb[0] for vb in view_batches])
            query_in = np.concatenate([vb[1:] for vb in view_batches])
            k_emb, _ = forward(key, key_in)
            q_emb, q_rec = forward(query, query_in)

            samples = []
            for pos, sample_i in enumerate(idx):
                if f == 0.0:
                    m = LabelMask(labeled=False)
                elif mask[sample_i]:
                    m = LabelMask(labeled=True, label=int(dataset.labels[sample_i]))
                else:
                    m = LabelMask(labeled=False)
                k_pos = k_emb.vector(pos)
                for v in range(v_total - 1):
                    samples.append((q_emb.vector(pos * (v_total - 1) + v), k_pos, m))
            total, breakdowns = loss_semi(samples, queue_d, queue_u, cfg.train.tau)
            n_terms = len(samples)
            mean_loss = total / n_terms
            if not np.isfinite(mean_loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch} batch {b}")
            losses_this_epoch.append(mean_loss)
            batch_losses.append(mean_loss)

            upstream = np.stack([bd.grad_q.values for bd in breakdowns]) / n_terms
            grads = backward(q_rec, upstream)
            query, velocity = sgd_step(query, grads, velocity, cfg.train, lr=lr)
            key = momentum_update(key, query, cfg.train.key_momentum)

            if f == 0.0:
                queue_push(queue_u, k_emb.rows, np.full(len(idx), UNLABELED, dtype=np.int64))
            else:
                labeled_sel = mask[idx]
                if labeled_sel.any():
                    queue_push(queue_d, k_emb.rows[labeled_sel], dataset.labels[idx][labeled_sel])
                if (~labeled_sel).any():
                    queue_push(
                        queue_u,
                        k_emb.rows[~labeled_sel],
                        np.full(int((~labeled_sel).sum()), UNLABELED, dtype=np.int64),
                    )
            step += 1
        if losses_this_epoch:
            epoch_losses.append(float(np.mean(losses_this_epoch)))

    state = TrainState(query, key, velocity, step)
    report = RunReport(cfg, epoch_losses, batch_losses, wall_clock=time.perf_counter() - start)
    return state, report


def _views_for_batch(
    images: list[ImageTensor], idx: np.ndarray, n_views: int, spec: AugmentSpec, batch_rng: RngStream
) -> list[np.ndarray]:
    """Flattened views per sample, fanned out across workers in sample order."""

    def one(pos: int) -> np.ndarray:
        vs = make_views(images[idx[pos]], images, n_views, spec, rng_fork(batch_rng, pos), anchor_index=int(idx[pos]))
        return np.stack([v.flat() for v in vs.views])

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(one, range(len(idx))))
    return [one(pos) for pos in range(len(idx))]


def encode_dataset(params: EncoderParams, dataset: Dataset) -> np.ndarray:
    """Normalized embeddings of the raw (uncropped) images."""
    flats = dataset.images.reshape(len(dataset), -1).astype(np.float64)
    emb, _ = forward(params, flats)
    return emb.rows


def linear_probe(
    params: EncoderParams,
    dataset: Dataset,
    rng: RngStream,
    max_iters: int = 10_000,
    tol: float = 1e-6,
) -> tuple[float, float]:
    """Train an affine softmax classifier on frozen features; report top-1/top-5.

    Full-batch gradient descent on the multinomial logistic loss until the
    gradient norm drops below tol or the iteration cap is hit; evaluation on
    a held-out 20% split from a seeded shuffle.
    """
    emb = encode_dataset(params, dataset)
    n = len(dataset)
    classes = int(dataset.classes)
    perm = rng.permutation(n)
    split = int(0.8 * n)
    train_idx, test_idx = perm[:split], perm[split:]
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise ValueError(f"dataset too small to split: {n} samples")

    x = np.concatenate([emb, np.ones((n, 1))], axis=1)  # bias feature
    y = dataset.labels
    x_tr, y_tr = x[train_idx], y[train_idx]
    onehot = np.zeros((len(train_idx), classes))
    onehot[np.arange(len(train_idx)), y_tr] = 1.0

    w = np.zeros((classes, x.shape[1]))
    lr = 1.0
    for _ in range(max_iters):
        logits = x_tr @ w.T
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = (p - onehot).T @ x_tr / len(train_idx)
        if float(np.linalg.norm(grad)) < tol:
            break
        w -= lr * grad

    scores = x[test_idx] @ w.T
    y_te = y[test_idx]
    top1 = float(np.mean(np.argmax(scores, axis=1) == y_te))
    if classes < 5:
        warnings.warn(f"only {classes} classes: top-5 accuracy is trivially 100%")
        top5 = 1.0
    else:
        ranked = np.argsort(-scores, axis=1, kind="stable")[:, :5]
        top5 = float(np.mean(np.any(ranked == y_te[:, None], axis=1)))
    return top1, top5


def run_metrics(state: TrainState, dataset: Dataset, cfg: ExperimentConfig) -> MetricReport:
    """Evaluate the view-quality metrics on the configured encoder."""
    encoder = state.key if cfg.metric.anchor_encoding is AnchorEncoding.KEY else state.query
    images = dataset.image_list()
    return evaluate_views(
        images, encoder, cfg.augment, cfg.metric, rng_fork(RngStream(cfg.seed), _FORK_METRICS)
    )


def run_experiment(
    cfg: ExperimentConfig, do_probe: bool = True, do_metrics: bool = True
) -> tuple[TrainState, RunReport]:
    """pretrain -> metrics -> probe, reusing one dataset build."""
    dataset = build_dataset(cfg)
    state, report = pretrain(cfg, dataset=dataset)
    if do_metrics:
        report.metrics = run_metrics(state, dataset, cfg)
    if do_probe:
        top1, top5 = linear_probe(
            state.query, dataset, rng_fork(RngStream(cfg.seed), _FORK_PROBE)
        )
        report.top1, report.top5 = top1, top5
    return state, report


def ablate_views(cfg: ExperimentConfig, v_list: list[int] | None = None) -> list[tuple]:
    """One full pretrain+probe+metrics run per view count; rows for the CSV table."""
    v_list = v_list or [2, 3, 4]
    for v in v_list:
        if v < 2:
            raise ValueError(f"view counts must be >= 2, got {v}")
    rows = []
    for v in v_list:
        run_cfg = replace(cfg, train=replace(cfg.train, views=v), metric=replace(cfg.metric, views=v))
        _, report = run_experiment(run_cfg)
        rows.append(_table_row(f"V={v}", report))
    return rows


def ablate_batch(cfg: ExperimentConfig, n_list: list[int] | None = None) -> list[tuple]:
    """One full run per batch size; batch sizes beyond the dataset are rejected."""
    n_list = n_list or [32, 64, 128, 256, 512, 1024]
    dataset = build_dataset(cfg)
    for n in n_list:
        if n > len(dataset):
            raise ValueError(f"batch size {n} exceeds dataset size {len(dataset)}")
    rows = []
    for n in n_list:
        run_cfg = replace(cfg, train=replace(cfg.train, batch_size=n))
        _, report = run_experiment(run_cfg)
        rows.append(_table_row(f"N={n}", report))
    return rows


def _table_row(config_label: str, report: RunReport) -> tuple:
    assert report.metrics is not None and report.top1 is not None
    return (config_label, report.top1, report.top5, report.metrics.l_inv, report.metrics.l_div)
