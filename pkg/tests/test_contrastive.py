import math
from collections import Counter

import numpy as np
import pytest

from retrocr.contrastive import (
    AdamState,
    NeighborMap,
    TrainerConfig,
    TrainingBatch,
    adamw_step,
    intersperse_hard_sets,
    mine_hard_negatives,
    neighbor_map_from_embeddings,
    sample_epoch,
    softmax_cross_entropy,
    supcon_loss,
    train,
    train_classifier,
)
from retrocr.core import (
    DegenerateBatch,
    GlyphCatalog,
    GrayImage,
    LabeledCrop,
    MissingClass,
    NonFiniteGradient,
)
from retrocr.encoder import Architecture, init

TINY_ARCH = Architecture(input_hw=(16, 16), conv_channels=(4, 8), out_dim=12)


def tiny_dataset(n_classes, variants, seed=0, side=16):
    """Labeled crops with distinct deterministic pixel content."""
    rng = np.random.default_rng(seed)
    crops = []
    for cid in range(n_classes):
        base = rng.random((side, side)) * 0.5
        for v in range(variants):
            noise = rng.random((side, side)) * 0.3
            crops.append(LabeledCrop(GrayImage(base + noise), cid, "font-render"))
    return crops


class TestSupConLoss:
    def test_two_sample_same_class_is_zero(self):
        z = np.array([[1.0, 0.0], [0.6, 0.8]])
        loss, grad = supcon_loss(z, [7, 7], 0.1)
        assert loss == 0.0
        assert np.allclose(grad, 0.0)

    def test_four_identical_embeddings(self):
        z = np.tile([[0.6, 0.8, 0.0]], (4, 1))
        loss, _ = supcon_loss(z, [0, 0, 1, 1], 0.37)
        assert abs(loss - 4 * math.log(3)) < 1e-9

    def test_orthogonal_pairs_closed_form(self):
        e1, e2 = np.zeros(8), np.zeros(8)
        e1[0] = 1.0
        e2[1] = 1.0
        loss, _ = supcon_loss(np.stack([e1, e1, e2, e2]), [0, 0, 1, 1], 0.1)
        assert abs(loss - 4 * math.log(1 + 2 * math.exp(-10))) < 1e-9

    def test_singleton_class_rejected(self):
        with pytest.raises(DegenerateBatch):
            supcon_loss(np.eye(3), [0, 1, 1], 0.1)

    def test_single_class_batch_beyond_pair_rejected(self):
        with pytest.raises(DegenerateBatch):
            supcon_loss(np.random.default_rng(0).random((4, 5)), [2, 2, 2, 2], 0.1)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            z = rng.standard_normal((8, 6))
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            loss, _ = supcon_loss(z, [0, 0, 1, 1, 2, 2, 3, 3], 0.2)
            assert loss >= 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((8, 6))
        ids = [0, 0, 1, 1, 2, 2, 0, 2]
        tau = 0.25
        _, grad = supcon_loss(z, ids, tau)
        h = 1e-6
        for i in range(z.shape[0]):
            for j in range(z.shape[1]):
                zp, zm = z.copy(), z.copy()
                zp[i, j] += h
                zm[i, j] -= h
                fd = (supcon_loss(zp, ids, tau)[0] - supcon_loss(zm, ids, tau)[0]) / (2 * h)
                assert abs(fd - grad[i, j]) <= 1e-6 * max(abs(fd), abs(grad[i, j]), 1.0)

    def test_pulling_positives_closer_never_raises_loss(self):
        # move one sample toward its class partner; every step lowers loss
        rng = np.random.default_rng(2)
        z = rng.standard_normal((6, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        ids = [0, 0, 1, 1, 2, 2]
        losses = []
        for alpha in np.linspace(0.0, 0.9, 10):
            moved = z.copy()
            moved[1] = (1 - alpha) * z[1] + alpha * z[0]
            losses.append(supcon_loss(moved, ids, 0.3)[0])
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_temperature_validated(self):
        with pytest.raises(ValueError):
            supcon_loss(np.eye(4), [0, 0, 1, 1], 0.0)


class TestSampler:
    def test_paper_scale_batch_size(self):
        cfg = TrainerConfig(m=4, classes_per_batch=256, passes_per_epoch=1)
        dataset = tiny_dataset(256, 4, side=4)
        catalog = GlyphCatalog(f"c{i}" for i in range(256))
        batches = sample_epoch(dataset, catalog, cfg, 0)
        assert len(batches) == 1
        assert len(batches[0].crops) == 1024

    def test_exhaustion_reuse_rule(self):
        # class with 2 variants and m=4: each variant appears exactly twice
        cfg = TrainerConfig(m=4, classes_per_batch=2, passes_per_epoch=1)
        dataset = tiny_dataset(2, 2, side=4)
        catalog = GlyphCatalog("ab")
        (batch,) = sample_epoch(dataset, catalog, cfg, 1)
        for cid, slots in batch.layout:
            images = [batch.crops[i].image.array.tobytes() for i in slots]
            counts = Counter(images)
            assert sorted(counts.values()) == [2, 2]

    def test_small_instance_enumeration(self):
        # 10 classes x 8 variants, m=4, 5 classes per batch, 1 pass:
        # exactly 2 batches; each class contributes 4 distinct variants
        cfg = TrainerConfig(m=4, classes_per_batch=5, passes_per_epoch=1)
        dataset = tiny_dataset(10, 8, side=4)
        catalog = GlyphCatalog("abcdefghij")
        batches = sample_epoch(dataset, catalog, cfg, 5)
        assert len(batches) == 2
        seen_classes = []
        for batch in batches:
            for cid, slots in batch.layout:
                seen_classes.append(cid)
                blobs = {batch.crops[i].image.array.tobytes() for i in slots}
                assert len(blobs) == 4
        assert sorted(seen_classes) == list(range(10))

    def test_missing_class_rejected(self):
        cfg = TrainerConfig(m=2, classes_per_batch=2, passes_per_epoch=1)
        dataset = tiny_dataset(2, 3, side=4)
        catalog = GlyphCatalog("abc")
        with pytest.raises(MissingClass):
            sample_epoch(dataset, catalog, cfg, 0)

    def test_deterministic(self):
        cfg = TrainerConfig(m=3, classes_per_batch=4, passes_per_epoch=2)
        dataset = tiny_dataset(6, 5, side=4)
        catalog = GlyphCatalog("abcdef")
        a = sample_epoch(dataset, catalog, cfg, 9)
        b = sample_epoch(dataset, catalog, cfg, 9)
        assert [x.layout for x in a] == [y.layout for y in b]

    def test_invariants_over_random_epochs(self):
        # every batch is exactly-m-per-class; every class appears once per pass
        rng = np.random.default_rng(0)
        for trial in range(100):
            n_classes = int(rng.integers(2, 9))
            variants = int(rng.integers(1, 7))
            m = int(rng.integers(2, 6))
            cpb = int(rng.integers(1, n_classes + 1))
            passes = int(rng.integers(1, 4))
            cfg = TrainerConfig(m=m, classes_per_batch=cpb, passes_per_epoch=passes)
            dataset = tiny_dataset(n_classes, variants, seed=trial, side=4)
            catalog = GlyphCatalog(f"c{i}" for i in range(n_classes))
            batches = sample_epoch(dataset, catalog, cfg, trial)
            per_pass = math.ceil(n_classes / cpb)
            assert len(batches) == per_pass * passes
            for p in range(passes):
                chunk = batches[p * per_pass : (p + 1) * per_pass]
                classes_in_pass = []
                for batch in chunk:
                    batch.validate(m)
                    ids = batch.class_ids
                    counts = Counter(int(i) for i in ids)
                    assert all(v == m for v in counts.values())
                    classes_in_pass.extend(counts)
                assert sorted(classes_in_pass) == list(range(n_classes))

    def test_variant_balance_when_fewer_than_m(self):
        # c < m variants: each appears ceil(m/c) or floor(m/c) times
        rng = np.random.default_rng(3)
        for trial in range(30):
            c = int(rng.integers(1, 4))
            m = int(rng.integers(c + 1, 8))
            cfg = TrainerConfig(m=m, classes_per_batch=1, passes_per_epoch=1)
            dataset = tiny_dataset(1, c, seed=trial, side=4)
            catalog = GlyphCatalog("a")
            (batch,) = sample_epoch(dataset, catalog, cfg, trial)
            counts = Counter(
                batch.crops[i].image.array.tobytes() for i in batch.layout[0][1]
            )
            lo, hi = math.floor(m / c), math.ceil(m / c)
            assert all(v in (lo, hi) for v in counts.values())
            assert len(counts) == c


class TestMining:
    def test_two_classes_neighbor_is_other(self):
        dataset = tiny_dataset(2, 3, side=16)
        params = init(0, TINY_ARCH)
        nm = mine_hard_negatives(params, dataset, k=8)
        for i, neigh in enumerate(nm.neighbor_classes):
            own = dataset[i].class_id
            assert neigh == [1 - own]

    def test_hand_placed_embeddings_match_bruteforce(self):
        emb = np.array(
            [[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [-1.0, 0.0], [0.5, 0.5]], dtype=float
        )
        ids = [0, 1, 2, 3, 4]
        nm = neighbor_map_from_embeddings(emb, ids, k=2)
        for i in range(5):
            sims = emb @ emb[i]
            order = sorted(
                (j for j in range(5) if j != i), key=lambda j: (-sims[j], ids[j])
            )
            expect = []
            for j in order:
                if ids[j] not in expect:
                    expect.append(ids[j])
                if len(expect) == 2:
                    break
            assert nm.neighbor_classes[i] == expect

    def test_k_clamps(self):
        emb = np.eye(3)
        nm = neighbor_map_from_embeddings(emb, [0, 1, 2], k=8)
        assert all(len(n) == 2 for n in nm.neighbor_classes)

    def test_own_class_never_listed(self):
        dataset = tiny_dataset(4, 4, side=16)
        params = init(1, TINY_ARCH)
        nm = mine_hard_negatives(params, dataset, k=3)
        for i, neigh in enumerate(nm.neighbor_classes):
            assert dataset[i].class_id not in neigh


class TestIntersperse:
    def _setup(self, fraction, n_classes=8, k=3):
        cfg = TrainerConfig(
            m=2,
            classes_per_batch=6,
            passes_per_epoch=2,
            hard_negative_k=k,
            hard_negative_fraction=fraction,
        )
        dataset = tiny_dataset(n_classes, 4, side=16)
        catalog = GlyphCatalog(f"c{i}" for i in range(n_classes))
        batches = sample_epoch(dataset, catalog, cfg, 3)
        params = init(0, TINY_ARCH)
        neighbors = mine_hard_negatives(params, dataset, k)
        return cfg, batches, neighbors

    def test_fraction_zero_is_identity(self):
        cfg, batches, neighbors = self._setup(0.0)
        out = intersperse_hard_sets(batches, neighbors, cfg, 0)
        assert [b.layout for b in out] == [b.layout for b in batches]

    def test_fraction_one_inserts_contiguous_block(self):
        cfg, batches, neighbors = self._setup(1.0)
        out = intersperse_hard_sets(batches, neighbors, cfg, 0)
        for batch in out:
            batch.validate(cfg.m)
            classes = [cid for cid, _ in batch.layout]
            found = False
            for start in range(len(classes)):
                anchor = classes[start]
                expect = [anchor] + neighbors.neighbors_of_class(anchor, cfg.hard_negative_k)
                expect = expect[: len(classes)]  # hard set clamps to the batch
                if classes[start : start + len(expect)] == expect:
                    found = True
                    break
            assert found, f"no contiguous hard set in {classes}"

    def test_batch_size_and_m_preserved(self):
        cfg, batches, neighbors = self._setup(1.0)
        out = intersperse_hard_sets(batches, neighbors, cfg, 1)
        for before, after in zip(batches, out):
            assert len(after.crops) == len(before.crops)
            after.validate(cfg.m)

    def test_deterministic(self):
        cfg, batches, neighbors = self._setup(0.5)
        a = intersperse_hard_sets(batches, neighbors, cfg, 7)
        b = intersperse_hard_sets(batches, neighbors, cfg, 7)
        assert [x.layout for x in a] == [y.layout for y in b]


class TestAdamW:
    def _params(self):
        return init(0, TINY_ARCH)

    def test_zero_grads_zero_decay_is_identity(self):
        p = self._params()
        cfg = TrainerConfig(weight_decay=0.0)
        grads = {k: np.zeros(t.shape) for k, t in p.tensors.items()}
        q, state = adamw_step(p, grads, AdamState.zeros(p), cfg)
        assert all(np.array_equal(p.tensors[k], q.tensors[k]) for k in p.tensors)
        assert state.step == 1

    def test_hand_computed_first_step(self):
        # scalar w=1, g=1, lr=0.1, wd=0: bias-corrected m=v=1 so w' ~ 0.9
        p = self._params()
        p.tensors["fc_b"][0] = 1.0
        cfg = TrainerConfig(learning_rate=0.1, weight_decay=0.0)
        grads = {k: np.zeros(t.shape) for k, t in p.tensors.items()}
        grads["fc_b"][0] = 1.0
        q, _ = adamw_step(p, grads, AdamState.zeros(p), cfg)
        expect = 1.0 - 0.1 * (1.0 / (1.0 + cfg.eps))
        assert abs(float(q.tensors["fc_b"][0]) - expect) < 1e-7

    def test_paper_preset_values(self):
        cfg = TrainerConfig.paper_preset()
        assert cfg.learning_rate == 2e-5
        assert cfg.weight_decay == 5e-4
        assert cfg.m == 4 and cfg.classes_per_batch == 256
        assert cfg.batch_size == 1024
        assert cfg.temperature == 0.1

    def test_decay_shrinks_toward_zero(self):
        p = self._params()
        cfg = TrainerConfig(weight_decay=0.01)
        grads = {k: np.zeros(t.shape) for k, t in p.tensors.items()}
        q, _ = adamw_step(p, grads, AdamState.zeros(p), cfg)
        w_before = p.tensors["conv1_w"]
        w_after = q.tensors["conv1_w"]
        nz = w_before != 0
        assert (np.abs(w_after[nz]) < np.abs(w_before[nz])).all()
        assert (np.sign(w_after[nz]) == np.sign(w_before[nz])).all()

    def test_non_finite_gradient_aborts(self):
        p = self._params()
        grads = {k: np.zeros(t.shape) for k, t in p.tensors.items()}
        grads["fc_w"][0, 0] = np.nan
        with pytest.raises(NonFiniteGradient):
            adamw_step(p, grads, AdamState.zeros(p), TrainerConfig())


class TestTrain:
    def test_single_class_dataset_degenerates(self):
        dataset = tiny_dataset(1, 6, side=16)
        catalog = GlyphCatalog("a")
        cfg = TrainerConfig(m=4, classes_per_batch=4, passes_per_epoch=1, epochs=1)
        with pytest.raises(DegenerateBatch):
            train(dataset, catalog, cfg, arch=TINY_ARCH)

    def test_fixed_seed_reproducible(self):
        dataset = tiny_dataset(4, 6, side=16)
        catalog = GlyphCatalog("abcd")
        cfg = TrainerConfig(
            m=2, classes_per_batch=4, passes_per_epoch=2, epochs=2, seed=5
        )
        p1, h1 = train(dataset, catalog, cfg, arch=TINY_ARCH)
        p2, h2 = train(dataset, catalog, cfg, arch=TINY_ARCH)
        assert p1.weights_digest == p2.weights_digest
        assert h1 == h2

    def test_history_shape(self):
        dataset = tiny_dataset(3, 5, side=16)
        catalog = GlyphCatalog("abc")
        cfg = TrainerConfig(m=2, classes_per_batch=3, passes_per_epoch=1, epochs=2)
        _, history = train(dataset, catalog, cfg, arch=TINY_ARCH)
        assert [(h.stage, h.epoch) for h in history] == [(1, 1), (1, 2), (2, 1), (2, 2)]
        assert all(np.isfinite(h.loss) for h in history)


class TestClassifier:
    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((5, 4))
        targets = [0, 1, 2, 3, 1]
        loss, grad = softmax_cross_entropy(logits, targets)
        h = 1e-6
        for i in range(5):
            for j in range(4):
                lp, lm = logits.copy(), logits.copy()
                lp[i, j] += h
                lm[i, j] -= h
                fd = (
                    softmax_cross_entropy(lp, targets)[0]
                    - softmax_cross_entropy(lm, targets)[0]
                ) / (2 * h)
                assert abs(fd - grad[i, j]) < 1e-6

    def test_training_learns_tiny_problem(self):
        dataset = tiny_dataset(3, 8, side=16)
        catalog = GlyphCatalog("abc")
        cfg = TrainerConfig(m=4, classes_per_batch=3, passes_per_epoch=4, epochs=6)
        params, history = train_classifier(dataset, catalog, cfg, base_arch=TINY_ARCH)
        assert params.arch.out_dim == 3
        assert not params.arch.l2_normalize
        assert history[-1].loss < history[0].loss
