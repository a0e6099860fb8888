"""Recognizer training: supervised contrastive loss with exact gradients,
m-per-class batch sampling, hard-negative mining and interspersing, AdamW,
and the two-stage training loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    DegenerateBatch,
    GlyphCatalog,
    LabeledCrop,
    MissingClass,
    NonFiniteGradient,
    ShapeError,
)
from .encoder import Architecture, DEFAULT_ARCHITECTURE, EncoderParams, backward, embed_crops, forward, init
from .synth import derive_seed


@dataclass(frozen=True)
class TrainerConfig:
    """Hyperparameters for recognizer training.

    The defaults are tuned for desk-scale from-scratch training; paper_preset
    switches to the large-batch low-rate recipe used with big pretrained
    backbones.
    """

    m: int = 4
    classes_per_batch: int = 32
    temperature: float = 0.1
    passes_per_epoch: int = 10
    epochs: int = 30
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hard_negative_k: int = 8
    hard_negative_fraction: float = 0.5
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("m must be >= 2 (the loss needs a positive per anchor)")
        if self.classes_per_batch < 1:
            raise ValueError("classes_per_batch must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.passes_per_epoch < 1 or self.epochs < 1:
            raise ValueError("passes_per_epoch and epochs must be >= 1")
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ValueError("learning_rate and eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not (0 <= self.hard_negative_fraction <= 1):
            raise ValueError("hard_negative_fraction must lie in [0, 1]")
        if not (0 <= self.val_fraction < 1):
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.hard_negative_k < 1:
            raise ValueError("hard_negative_k must be >= 1")

    @classmethod
    def paper_preset(cls, **overrides) -> "TrainerConfig":
        """Large-batch preset: m=4 x 256 classes, lr 2e-5, weight decay 5e-4."""
        base = cls(m=4, classes_per_batch=256, learning_rate=2e-5, weight_decay=5e-4)
        return replace(base, **overrides)

    @property
    def batch_size(self) -> int:
        return self.m * self.classes_per_batch


def supcon_loss(
    embeddings, class_ids: Sequence[int], temperature: float
) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss, multi-positive "outside" form.

    For each anchor i with positives P(i) (same class, excluding i) and
    candidates A(i) (everything excluding i):

        loss = sum_i (-1/|P(i)|) * sum_{p in P(i)}
               log( exp(z_i.z_p / t) / sum_{a in A(i)} exp(z_i.z_a / t) )

    Returns the summed loss and its exact gradient with respect to each
    embedding row (no tangent projection; the encoder's normalization
    Jacobian handles that). Log-sum-exp uses max subtraction.

    Raises DegenerateBatch for a singleton class, or for a single-class
    batch of more than two samples (no contrast is available; the
    two-sample same-class batch is the lone all-positive case with a
    defined value, exactly 0).
    """
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(class_ids, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] != labels.shape[0]:
        raise ShapeError(f"embeddings {z.shape} vs {labels.shape[0]} class ids")
    n = z.shape[0]
    if n < 2:
        raise DegenerateBatch("need at least two samples")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    _, counts = np.unique(labels, return_counts=True)
    if (counts == 1).any():
        raise DegenerateBatch("every class in the batch needs at least two members")
    if len(counts) < 2 and n > 2:
        raise DegenerateBatch("single-class batch offers no contrast")

    sims = (z @ z.T) / temperature
    off_diag = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off_diag
    pos_counts = pos.sum(axis=1).astype(np.float64)

    masked = np.where(off_diag, sims, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    shifted = np.exp(masked - row_max)  # diagonal becomes exp(-inf) = 0
    denom = shifted.sum(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(denom[:, 0])

    mean_pos_sim = (sims * pos).sum(axis=1) / pos_counts
    loss = float((lse - mean_pos_sim).sum())

    softmax = shifted / denom
    grad_sims = softmax - pos / pos_counts[:, None]  # dL/dS, zero on the diagonal
    grad = (grad_sims + grad_sims.T) @ z / temperature
    return loss, grad


@dataclass
class TrainingBatch:
    """An m-per-class batch: crops plus the class layout over them."""

    crops: list[LabeledCrop]
    layout: list[tuple[int, list[int]]]

    @property
    def class_ids(self) -> np.ndarray:
        ids = np.empty(len(self.crops), dtype=np.int64)
        for class_id, slots in self.layout:
            for idx in slots:
                ids[idx] = class_id
        return ids

    def validate(self, m: int) -> None:
        seen: set[int] = set()
        for class_id, slots in self.layout:
            if class_id in seen:
                raise DegenerateBatch(f"class {class_id} appears in two slots")
            seen.add(class_id)
            if len(slots) != m:
                raise DegenerateBatch(f"class {class_id} has {len(slots)} crops, not {m}")


class _ClassPool:
    """Without-replacement crop dealing for one class.

    Crops are dealt from a shuffled pile; the pile reshuffles and restarts
    only once exhausted, so a class with c < m variants deals each variant
    ceil(m/c) or floor(m/c) times per draw of m.
    """

    def __init__(self, indices: list[int], rng: np.random.Generator) -> None:
        self._indices = list(indices)
        self._rng = rng
        self._pile: list[int] = []

    def deal(self, count: int) -> list[int]:
        out = []
        for _ in range(count):
            if not self._pile:
                order = self._rng.permutation(len(self._indices))
                self._pile = [self._indices[i] for i in order]
            out.append(self._pile.pop())
        return out


def _crops_by_class(dataset: Sequence[LabeledCrop], catalog: GlyphCatalog) -> dict[int, list[int]]:
    by_class: dict[int, list[int]] = {cid: [] for cid in range(len(catalog))}
    for i, item in enumerate(dataset):
        if item.class_id not in by_class:
            raise MissingClass(f"crop {i} has class_id {item.class_id} outside the catalog")
        by_class[item.class_id].append(i)
    empty = [cid for cid, idxs in by_class.items() if not idxs]
    if empty:
        labels = ", ".join(repr(catalog.label(cid)) for cid in empty[:8])
        raise MissingClass(f"no crops for {len(empty)} classes (e.g. {labels})")
    return by_class


def sample_epoch(
    dataset: Sequence[LabeledCrop],
    catalog: GlyphCatalog,
    cfg: TrainerConfig,
    seed: int,
) -> list[TrainingBatch]:
    """One epoch of batches: `passes_per_epoch` shuffled passes over the
    catalog, each pass chunked into groups of `classes_per_batch` classes
    with m crops dealt per class without replacement across the epoch.
    """
    by_class = _crops_by_class(dataset, catalog)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    pools = {cid: _ClassPool(idxs, rng) for cid, idxs in sorted(by_class.items())}
    class_ids = np.arange(len(catalog))
    batches: list[TrainingBatch] = []
    for _ in range(cfg.passes_per_epoch):
        order = rng.permutation(class_ids)
        for start in range(0, len(order), cfg.classes_per_batch):
            group = order[start : start + cfg.classes_per_batch]
            crops: list[LabeledCrop] = []
            layout: list[tuple[int, list[int]]] = []
            for cid in group:
                dealt = pools[int(cid)].deal(cfg.m)
                slots = list(range(len(crops), len(crops) + cfg.m))
                crops.extend(dataset[i] for i in dealt)
                layout.append((int(cid), slots))
            batches.append(TrainingBatch(crops, layout))
    return batches


@dataclass
class NeighborMap:
    """Per-crop nearest-neighbor classes under a trained encoder, plus the
    per-class aggregation and crop pools needed to build hard-negative sets.
    """

    crop_class_ids: np.ndarray
    neighbor_classes: list[list[int]]
    class_neighbors: dict[int, list[int]]
    class_pools: dict[int, list[LabeledCrop]]

    def neighbors_of_class(self, class_id: int, k: int) -> list[int]:
        return self.class_neighbors.get(class_id, [])[:k]


def neighbor_map_from_embeddings(
    embeddings: np.ndarray,
    class_ids: Sequence[int],
    k: int,
    crops: Optional[Sequence[LabeledCrop]] = None,
) -> NeighborMap:
    """Exact k-nearest-neighbor classes by inner product, own class excluded.

    k clamps to the number of distinct other classes. For each crop the list
    holds the classes of its nearest other-class crops, nearest first, one
    entry per distinct class.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(class_ids, dtype=np.int64)
    n = z.shape[0]
    if n != labels.shape[0]:
        raise ShapeError("embeddings and class ids disagree")
    distinct = np.unique(labels)
    k_eff = min(k, len(distinct) - 1)
    per_crop: list[list[int]] = []
    sims = z @ z.T
    order = np.argsort(-sims, axis=1, kind="stable")
    for i in range(n):
        found: list[int] = []
        for j in order[i]:
            if j == i or labels[j] == labels[i]:
                continue
            cid = int(labels[j])
            if cid not in found:
                found.append(cid)
                if len(found) == k_eff:
                    break
        per_crop.append(found)

    # Class-level ranking: vote by how often (and how early) a neighbor class
    # shows up across the class's crops; ties break on class id.
    votes: dict[int, dict[int, float]] = {int(c): {} for c in distinct}
    for i, neigh in enumerate(per_crop):
        bucket = votes[int(labels[i])]
        for rank, cid in enumerate(neigh):
            bucket[cid] = bucket.get(cid, 0.0) + 1.0 / (1 + rank)
    class_neighbors = {
        cid: [c for c, _ in sorted(bucket.items(), key=lambda kv: (-kv[1], kv[0]))]
        for cid, bucket in votes.items()
    }
    pools: dict[int, list[LabeledCrop]] = {}
    if crops is not None:
        for item in crops:
            pools.setdefault(item.class_id, []).append(item)
    return NeighborMap(labels, per_crop, class_neighbors, pools)


def mine_hard_negatives(
    params: EncoderParams, dataset: Sequence[LabeledCrop], k: int
) -> NeighborMap:
    """Embed every training crop and record its nearest other-class labels."""
    embeddings = embed_crops(params, [c.image for c in dataset])
    labels = [c.class_id for c in dataset]
    return neighbor_map_from_embeddings(embeddings, labels, k, crops=dataset)


def intersperse_hard_sets(
    batches: Sequence[TrainingBatch],
    neighbors: NeighborMap,
    cfg: TrainerConfig,
    seed: int,
) -> list[TrainingBatch]:
    """Replace class slots in a fraction of batches with hard-negative sets.

    In each chosen batch a random anchor class from the batch is kept and its
    k nearest-neighbor classes take over a contiguous run of class slots
    (duplicates removed first), preserving batch size and the m-per-class
    rule. Crop variants for injected classes are drawn from the mined pools.
    """
    if not neighbors.class_pools:
        raise ValueError("NeighborMap lacks crop pools; mine with the dataset attached")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    n_hard = int(round(cfg.hard_negative_fraction * len(batches)))
    chosen = set(rng.choice(len(batches), size=n_hard, replace=False)) if n_hard else set()
    out: list[TrainingBatch] = []
    for bi, batch in enumerate(batches):
        if bi not in chosen:
            out.append(batch)
            continue
        slot_classes = [cid for cid, _ in batch.layout]
        anchor = int(slot_classes[rng.integers(len(slot_classes))])
        att = neighbors.neighbors_of_class(anchor, cfg.hard_negative_k)
        hard_set = [anchor] + att[: max(0, len(slot_classes) - 1)]
        hard_set = hard_set[: len(slot_classes)]
        survivors = [cid for cid in slot_classes if cid not in hard_set]
        keep = len(slot_classes) - len(hard_set)
        while len(survivors) > keep:
            survivors.pop(int(rng.integers(len(survivors))))
        insert_at = int(rng.integers(len(survivors) + 1))
        new_classes = survivors[:insert_at] + hard_set + survivors[insert_at:]

        by_old = {cid: slots for cid, slots in batch.layout}
        crops: list[LabeledCrop] = []
        layout: list[tuple[int, list[int]]] = []
        for cid in new_classes:
            slots = list(range(len(crops), len(crops) + cfg.m))
            if cid in by_old:
                crops.extend(batch.crops[i] for i in by_old[cid])
            else:
                pool = neighbors.class_pools.get(cid)
                if not pool:
                    raise MissingClass(f"no mined crops for class {cid}")
                picks: list[int] = []
                while len(picks) < cfg.m:
                    order = rng.permutation(len(pool))
                    picks.extend(int(i) for i in order[: cfg.m - len(picks)])
                crops.extend(pool[i] for i in picks)
            layout.append((cid, slots))
        out.append(TrainingBatch(crops, layout))
    return out


@dataclass
class AdamState:
    """First/second moments and step count for decoupled weight decay Adam."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: EncoderParams) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros(t.shape, dtype=np.float64) for k, t in params.tensors.items()},
            v={k: np.zeros(t.shape, dtype=np.float64) for k, t in params.tensors.items()},
        )


def adamw_step(
    params: EncoderParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainerConfig,
) -> tuple[EncoderParams, AdamState]:
    """One bias-corrected AdamW update; pure (inputs are left untouched)."""
    if set(grads) != set(params.tensors):
        raise ShapeError("gradient names do not match parameter names")
    for name, g in grads.items():
        if g.shape != params.tensors[name].shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} mismatch")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_tensors: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = cfg.beta1 * state.m[name] + (1 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p64 = params.tensors[name].astype(np.float64)
        p64 -= cfg.learning_rate * (update + cfg.weight_decay * p64)
        new_tensors[name] = p64.astype(np.float32)
        new_m[name] = m
        new_v[name] = v
    return EncoderParams(params.arch, new_tensors), AdamState(t, new_m, new_v)


@dataclass(frozen=True)
class EpochStats:
    stage: int
    epoch: int
    loss: float
    val_top1: float


def _split_train_val(
    dataset: Sequence[LabeledCrop], catalog: GlyphCatalog, fraction: float, seed: int
) -> tuple[list[LabeledCrop], list[LabeledCrop]]:
    by_class = _crops_by_class(dataset, catalog)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    train: list[int] = []
    val: list[int] = []
    for cid in sorted(by_class):
        idxs = by_class[cid]
        order = rng.permutation(len(idxs))
        n_val = min(len(idxs) - 1, int(round(fraction * len(idxs))))
        chosen = {idxs[i] for i in order[:n_val]}
        val.extend(sorted(chosen))
        train.extend(i for i in idxs if i not in chosen)
    return [dataset[i] for i in sorted(train)], [dataset[i] for i in sorted(val)]


def _val_top1(params: EncoderParams, train: Sequence[LabeledCrop], val: Sequence[LabeledCrop]) -> float:
    """1-NN retrieval accuracy of validation crops against one gallery crop
    per class (the first training crop of each class)."""
    if not val:
        return float("nan")
    gallery: dict[int, LabeledCrop] = {}
    for item in train:
        gallery.setdefault(item.class_id, item)
    gal_ids = sorted(gallery)
    gal_z = embed_crops(params, [gallery[c].image for c in gal_ids])
    val_z = embed_crops(params, [c.image for c in val])
    sims = val_z @ gal_z.T
    pred = np.asarray(gal_ids, dtype=np.int64)[sims.argmax(axis=1)]
    truth = np.asarray([c.class_id for c in val], dtype=np.int64)
    return float((pred == truth).mean())


def _run_stage(
    params: EncoderParams,
    train_crops: list[LabeledCrop],
    val_crops: list[LabeledCrop],
    catalog: GlyphCatalog,
    cfg: TrainerConfig,
    seed: int,
    stage: int,
    neighbors: Optional[NeighborMap],
) -> tuple[EncoderParams, list[EpochStats]]:
    state = AdamState.zeros(params)
    history: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        epoch_seed = derive_seed(seed, "epoch", stage, epoch)
        batches = sample_epoch(train_crops, catalog, cfg, epoch_seed)
        if neighbors is not None:
            batches = intersperse_hard_sets(
                batches, neighbors, cfg, derive_seed(seed, "hard", stage, epoch)
            )
        total, count = 0.0, 0
        for batch in batches:
            z, cache = forward(params, [c.image for c in batch.crops])
            loss, grad_z = supcon_loss(z, batch.class_ids, cfg.temperature)
            grads = backward(params, cache, grad_z)
            params, state = adamw_step(params, grads, state, cfg)
            total += loss
            count += len(batch.crops)
        avg = total / max(count, 1)
        history.append(EpochStats(stage, epoch, avg, _val_top1(params, train_crops, val_crops)))
    return params, history


def train(
    dataset: Sequence[LabeledCrop],
    catalog: GlyphCatalog,
    cfg: TrainerConfig,
    seed: Optional[int] = None,
    arch: Architecture = DEFAULT_ARCHITECTURE,
) -> tuple[EncoderParams, list[EpochStats]]:
    """Two-stage recipe: train, mine hard negatives with the stage-1 model,
    then retrain from scratch (same init seed) with hard sets interspersed.

    Returns the stage-2 parameters and the concatenated per-epoch history.
    """
    seed = cfg.seed if seed is None else seed
    train_crops, val_crops = _split_train_val(dataset, catalog, cfg.val_fraction, derive_seed(seed, "split"))
    params = init(seed, arch)
    params, history1 = _run_stage(params, train_crops, val_crops, catalog, cfg, seed, 1, None)
    neighbors = mine_hard_negatives(params, train_crops, cfg.hard_negative_k)
    params2 = init(seed, arch)
    params2, history2 = _run_stage(params2, train_crops, val_crops, catalog, cfg, seed, 2, neighbors)
    return params2, history1 + history2


def train_single_stage(
    dataset: Sequence[LabeledCrop],
    catalog: GlyphCatalog,
    cfg: TrainerConfig,
    seed: Optional[int] = None,
    arch: Architecture = DEFAULT_ARCHITECTURE,
) -> tuple[EncoderParams, list[EpochStats]]:
    """Training without hard negatives (the ablation variant)."""
    seed = cfg.seed if seed is None else seed
    train_crops, val_crops = _split_train_val(dataset, catalog, cfg.val_fraction, derive_seed(seed, "split"))
    params = init(seed, arch)
    return _run_stage(params, train_crops, val_crops, catalog, cfg, seed, 1, None)


def softmax_cross_entropy(logits: np.ndarray, targets: Sequence[int]) -> tuple[float, np.ndarray]:
    """Summed cross entropy with exact gradient (softmax minus one-hot)."""
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != t.shape[0]:
        raise ShapeError("logits/targets shape mismatch")
    shifted = x - x.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float((log_z - shifted[np.arange(len(t)), t]).sum())
    grad = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    grad[np.arange(len(t)), t] -= 1.0
    return loss, grad


def classifier_architecture(
    catalog: GlyphCatalog, base: Architecture = DEFAULT_ARCHITECTURE
) -> Architecture:
    """Same trunk, but a softmax head over catalog classes instead of an
    embedding (the classification-head comparison mode)."""
    return replace(base, out_dim=len(catalog), l2_normalize=False)


def train_classifier(
    dataset: Sequence[LabeledCrop],
    catalog: GlyphCatalog,
    cfg: TrainerConfig,
    seed: Optional[int] = None,
    base_arch: Architecture = DEFAULT_ARCHITECTURE,
) -> tuple[EncoderParams, list[EpochStats]]:
    """Train the feed-forward classification head on the same batches."""
    seed = cfg.seed if seed is None else seed
    arch = classifier_architecture(catalog, base_arch)
    train_crops, val_crops = _split_train_val(dataset, catalog, cfg.val_fraction, derive_seed(seed, "split"))
    params = init(seed, arch)
    state = AdamState.zeros(params)
    history: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        batches = sample_epoch(train_crops, catalog, cfg, derive_seed(seed, "epoch", 1, epoch))
        total, count = 0.0, 0
        for batch in batches:
            logits, cache = forward(params, [c.image for c in batch.crops])
            loss, grad = softmax_cross_entropy(logits, batch.class_ids)
            grads = backward(params, cache, grad)
            params, state = adamw_step(params, grads, state, cfg)
            total += loss
            count += len(batch.crops)
        acc = _classifier_val_top1(params, val_crops)
        history.append(EpochStats(1, epoch, total / max(count, 1), acc))
    return params, history


def _classifier_val_top1(params: EncoderParams, val: Sequence[LabeledCrop]) -> float:
    if not val:
        return float("nan")
    logits = embed_crops(params, [c.image for c in val])
    pred = logits.argmax(axis=1)
    truth = np.asarray([c.class_id for c in val], dtype=np.int64)
    return float((pred == truth).mean())


def classify_crops(params: EncoderParams, crops) -> np.ndarray:
    """Argmax class ids from a classification-head model."""
    if params.arch.l2_normalize:
        raise ShapeError("classify_crops needs a classification-head model")
    return embed_crops(params, crops).argmax(axis=1)
