import numpy as np
import pytest

from retrocr.core import FormatError, GrayImage, IncompatibleModel, ShapeError
from retrocr.encoder import (
    Architecture,
    DEFAULT_ARCHITECTURE,
    EncoderParams,
    backward,
    embed_crops,
    forward,
    init,
    load_weights,
    save_weights,
)

SMALL = Architecture(input_hw=(16, 16), conv_channels=(4, 8), out_dim=12)


def random_batch(n, side=16, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, side, side))


class TestArchitecture:
    def test_default_shapes(self):
        shapes = DEFAULT_ARCHITECTURE.tensor_shapes()
        assert shapes["conv1_w"] == (16, 1, 3, 3)
        assert shapes["conv2_w"] == (32, 16, 3, 3)
        assert shapes["conv3_w"] == (64, 32, 3, 3)
        assert shapes["fc_w"] == (64 * 4 * 4, 128)
        assert shapes["fc_b"] == (128,)

    def test_fingerprint_distinguishes(self):
        assert DEFAULT_ARCHITECTURE.fingerprint != SMALL.fingerprint
        assert Architecture().fingerprint == DEFAULT_ARCHITECTURE.fingerprint

    def test_rejects_nonsquare(self):
        with pytest.raises(ShapeError):
            Architecture(input_hw=(16, 32))


class TestInit:
    def test_deterministic(self):
        a, b = init(5, SMALL), init(5, SMALL)
        assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)

    def test_seed_sensitivity(self):
        a, b = init(5, SMALL), init(6, SMALL)
        assert any(not np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)

    def test_finite_and_zero_biases(self):
        p = init(0, SMALL)
        for name, t in p.tensors.items():
            assert np.isfinite(t).all()
            if name.endswith("_b"):
                assert not t.any()

    def test_weights_digest_tracks_values(self):
        a = init(1, SMALL)
        b = a.copy()
        assert a.weights_digest == b.weights_digest
        b.tensors["fc_b"][0] = 1.0
        assert a.weights_digest != EncoderParams(b.arch, b.tensors).weights_digest


class TestForward:
    def test_shape_and_norm(self):
        p = init(2, SMALL)
        z, _ = forward(p, random_batch(1))
        assert z.shape == (1, 12)
        assert abs(np.linalg.norm(z[0]) - 1.0) < 1e-5

    def test_purity_on_duplicates(self):
        p = init(2, SMALL)
        x = random_batch(1)
        z, _ = forward(p, np.concatenate([x, x]))
        assert np.array_equal(z[0], z[1])

    def test_accepts_gray_images(self):
        p = init(2, DEFAULT_ARCHITECTURE)
        z, _ = forward(p, [GrayImage.blank(32, 32, 0.3)])
        assert z.shape == (1, 128)

    def test_wrong_size_rejected(self):
        p = init(2, SMALL)
        with pytest.raises(ShapeError):
            forward(p, random_batch(1, side=20))

    def test_norm_guard_on_degenerate_input(self):
        # all-white crop, all-zero weights, fc bias nudged off exactly zero:
        # the pre-normalization vector is tiny and the guard keeps it finite
        p = init(0, SMALL)
        for name in p.tensors:
            p.tensors[name][:] = 0.0
        p.tensors["fc_b"][0] = np.float32(1e-12)
        z, _ = forward(p, np.ones((1, 16, 16)))
        assert np.isfinite(z).all()

    def test_unit_norm_across_random_inputs(self):
        p = init(7, SMALL)
        z, _ = forward(p, random_batch(16, seed=3))
        assert np.abs(np.linalg.norm(z, axis=1) - 1.0).max() < 1e-5


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        p = init(4, SMALL)
        z, cache = forward(p, random_batch(2))
        grads = backward(p, cache, np.zeros_like(z))
        assert all(not g.any() for g in grads.values())

    def test_batch_additivity(self):
        p = init(4, SMALL)
        xa, xb = random_batch(1, seed=1), random_batch(1, seed=2)
        ga = np.random.default_rng(3).standard_normal((1, 12))
        gb = np.random.default_rng(4).standard_normal((1, 12))
        _, ca = forward(p, xa)
        _, cb = forward(p, xb)
        _, cab = forward(p, np.concatenate([xa, xb]))
        grads_a = backward(p, ca, ga)
        grads_b = backward(p, cb, gb)
        grads_ab = backward(p, cab, np.concatenate([ga, gb]))
        for name in grads_ab:
            assert np.allclose(grads_ab[name], grads_a[name] + grads_b[name], atol=1e-12)

    def test_shape_mismatch_rejected(self):
        p = init(4, SMALL)
        _, cache = forward(p, random_batch(2))
        with pytest.raises(ShapeError):
            backward(p, cache, np.zeros((3, 12)))

    def test_finite_difference_small_h(self):
        # h = 1e-5 keeps well clear of ReLU/pool kinks; the dedicated
        # acceptance criterion covers the h = 1e-3 protocol
        p = init(11, SMALL)
        batch = random_batch(3, seed=8)
        upstream = np.random.default_rng(9).standard_normal((3, 12))

        def loss_of(q):
            z, _ = forward(q, batch)
            return float((z * upstream).sum())

        _, cache = forward(p, batch)
        grads = backward(p, cache, upstream)
        rng = np.random.default_rng(10)
        for name in sorted(grads):
            t = p.tensors[name]
            for flat in rng.integers(0, t.size, size=4):
                idx = np.unravel_index(flat, t.shape)
                orig = float(t[idx])
                h = 1e-5
                plus, minus = p.copy(), p.copy()
                plus.tensors[name][idx] = np.float32(orig + h)
                minus.tensors[name][idx] = np.float32(orig - h)
                heff = float(plus.tensors[name][idx]) - float(minus.tensors[name][idx])
                fd = (loss_of(plus) - loss_of(minus)) / heff
                a = grads[name][idx]
                assert abs(a - fd) <= 1e-4 * max(abs(a), abs(fd), 1e-6), (name, idx)


class TestEmbedCrops:
    def test_matches_forward(self):
        p = init(1, SMALL)
        batch = random_batch(5)
        z, _ = forward(p, batch)
        assert np.allclose(embed_crops(p, list(batch), chunk=2), z)

    def test_empty(self):
        p = init(1, SMALL)
        assert embed_crops(p, []).shape == (0, 12)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        p = init(3, DEFAULT_ARCHITECTURE)
        path = tmp_path / "w.bin"
        save_weights(p, path)
        q = load_weights(path)
        assert q.arch == p.arch
        for name in p.tensors:
            assert np.array_equal(p.tensors[name], q.tensors[name])
        # saving again produces identical bytes
        path2 = tmp_path / "w2.bin"
        save_weights(q, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_altered_fingerprint_rejected(self, tmp_path):
        import json
        import struct

        p = init(3, SMALL)
        path = tmp_path / "w.bin"
        save_weights(p, path)
        raw = path.read_bytes()
        (hlen,) = struct.unpack_from("<I", raw)
        header = json.loads(raw[4 : 4 + hlen])
        header["arch_fingerprint"] = "0" * 64
        blob = json.dumps(header, sort_keys=True).encode()
        (tmp_path / "bad.bin").write_bytes(struct.pack("<I", len(blob)) + blob + raw[4 + hlen :])
        with pytest.raises(IncompatibleModel):
            load_weights(tmp_path / "bad.bin")

    def test_truncated_rejected(self, tmp_path):
        p = init(3, SMALL)
        path = tmp_path / "w.bin"
        save_weights(p, path)
        raw = path.read_bytes()
        (tmp_path / "cut.bin").write_bytes(raw[: len(raw) - 100])
        with pytest.raises(FormatError):
            load_weights(tmp_path / "cut.bin")
        (tmp_path / "tiny.bin").write_bytes(b"\x01")
        with pytest.raises(FormatError):
            load_weights(tmp_path / "tiny.bin")

    def test_architecture_pinning(self, tmp_path):
        p = init(3, SMALL)
        path = tmp_path / "w.bin"
        save_weights(p, path)
        load_weights(path, arch=SMALL)
        with pytest.raises(IncompatibleModel):
            load_weights(path, arch=DEFAULT_ARCHITECTURE)
