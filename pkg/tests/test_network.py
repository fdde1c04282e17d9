import numpy as np
import pytest

from permssl import softrank
from permssl.network import (
    AdamState,
    adam_step,
    cfn_backward,
    cfn_forward,
    embed,
    encode,
    init_cfn,
    load_checkpoint,
    save_checkpoint,
)
from permssl.oracles import relative_error
from permssl.patches import FormatError, SliceSpec, synth_note
from permssl.permcore import random_permutation


def tiny(dtype=np.float64, out_dim=None, seed=0):
    return init_cfn(3, 6, encoder_widths=(4, 4), head_width=4, out_dim=out_dim, seed=seed, dtype=dtype)


def flat_loss(params, X, loss_fn):
    theta, _ = cfn_forward(params, X)
    return loss_fn(np.asarray(theta, dtype=np.float64))[0]


def fd_param_grads(params, X, loss_fn, h=1e-6):
    """Central differences over every parameter entry, computed in float64."""
    p64 = params.astype(np.float64)
    out = []
    for arr in p64.arrays():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = flat_loss(p64, X, loss_fn)
            arr[idx] = old - h
            down = flat_loss(p64, X, loss_fn)
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def batch_loss(kind, perms, classes=None):
    def fn(theta):
        total, grads = 0.0, np.zeros_like(theta)
        for b in range(theta.shape[0]):
            if kind == "fy":
                l, g = softrank.fy_loss_and_grad(theta[b], perms[b], 0.5, 16, seed=(9, b))
            elif kind == "softrank-mse":
                l, g = softrank.soft_rank_mse_loss_and_grad(theta[b], perms[b], 1.0)
            else:
                l, g = softrank.xe_fixed_loss_and_grad(theta[b], classes[b])
            total += l
            grads[b] = g
        return total, grads

    return fn


class TestInit:
    def test_deterministic(self):
        a, b = init_cfn(6, 20, seed=3), init_cfn(6, 20, seed=3)
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_biases_zero_and_glorot_range(self):
        p = init_cfn(6, 200, encoder_widths=(100, 50), head_width=40, seed=1)
        for layer in p.layers:
            assert np.all(layer.bias == 0)
            limit = np.sqrt(6 / (layer.fan_in + layer.fan_out))
            assert np.abs(layer.weight).max() <= limit
            w = layer.weight.ravel().astype(np.float64)
            if w.size >= 10_000:
                sigma = limit / np.sqrt(3) / np.sqrt(w.size)
                assert abs(w.mean()) <= 3 * sigma

    def test_head_dims(self):
        p = init_cfn(5, 12, encoder_widths=(8, 7), head_width=9)
        assert p.head[0].fan_in == 5 * 7 and p.out_dim == 5
        assert init_cfn(5, 12, out_dim=100).out_dim == 100

    def test_invalid(self):
        with pytest.raises(ValueError):
            init_cfn(1, 10)
        with pytest.raises(ValueError):
            init_cfn(4, 10, encoder_widths=())


class TestForward:
    def test_zero_weights(self):
        p = tiny()
        for a in p.arrays():
            a[...] = 0
        theta, _ = cfn_forward(p, np.random.default_rng(0).normal(size=(2, 3, 6)))
        np.testing.assert_array_equal(theta, 0.0)

    def test_shapes(self):
        p = init_cfn(6, 20, encoder_widths=(16, 8), head_width=12)
        theta, trace = cfn_forward(p, np.zeros((5, 6, 20), dtype=np.float32))
        assert theta.shape == (5, 6)
        assert trace.embedding.shape == (5, 48)

    def test_encoder_equivariance(self):
        p = tiny()
        X = np.random.default_rng(1).normal(size=(4, 3, 6))
        perm = np.array([2, 0, 1])
        e = encode(p, X)[0].reshape(4, 3, 4)
        e_perm = encode(p, X[:, perm])[0].reshape(4, 3, 4)
        np.testing.assert_allclose(e_perm, e[:, perm])

    def test_weight_sharing_is_structural(self):
        # one encoder stack serves every patch: there is no per-patch copy
        p = tiny()
        assert len(p.encoder) == 2 and p.encoder[0].weight.shape == (4, 6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cfn_forward(tiny(), np.zeros((2, 4, 6)))


class TestBackward:
    def test_zero_cotangent(self):
        p = tiny()
        X = np.random.default_rng(2).normal(size=(3, 3, 6))
        _, trace = cfn_forward(p, X)
        for g in cfn_backward(p, trace, np.zeros((3, 3))):
            np.testing.assert_array_equal(g, 0.0)

    @pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-5), (np.float32, 1e-3)])
    @pytest.mark.parametrize("kind", ["fy", "softrank-mse", "xe"])
    def test_end_to_end_finite_differences(self, kind, dtype, tol):
        rng = np.random.default_rng(3)
        out_dim = 5 if kind == "xe" else None
        params = init_cfn(3, 6, (4, 4), 4, out_dim=out_dim, seed=4, dtype=dtype)
        for a in params.arrays():
            a += rng.normal(scale=0.1, size=a.shape).astype(dtype)
        X = rng.normal(size=(2, 3, 6)).astype(dtype)
        perms = np.array([random_permutation(3, s) for s in range(2)])
        loss_fn = batch_loss(kind, perms, classes=[1, 3])
        theta, trace = cfn_forward(params, X)
        _, dtheta = loss_fn(np.asarray(theta, dtype=np.float64))
        grads = cfn_backward(params, trace, dtheta)
        fd = fd_param_grads(params, X.astype(np.float64), loss_fn)
        flat = np.concatenate([g.ravel() for g in grads])
        flat_fd = np.concatenate([g.ravel() for g in fd])
        assert relative_error(flat, flat_fd) <= tol

    def test_single_patch_contribution(self):
        p = tiny()
        X = np.zeros((1, 3, 6))
        X[0, 0] = np.random.default_rng(5).uniform(0.5, 1.0, size=6)
        dtheta = np.array([[1.0, -2.0, 0.5]])
        _, trace = cfn_forward(p, X)
        g = cfn_backward(p, trace, dtheta)
        # analytic single path: only patch 0 reaches the first encoder layer
        x0 = X[0, 0]
        pre1 = p.encoder[0].weight @ x0
        h1 = np.maximum(pre1, 0)
        pre2 = p.encoder[1].weight @ h1
        epre = trace.head_cache[0][1][0]
        demb = p.head[0].weight.T @ ((p.head[1].weight.T @ dtheta[0]) * (epre > 0))
        d2 = demb[:4] * (pre2 > 0)
        d1 = (p.encoder[1].weight.T @ d2) * (pre1 > 0)
        np.testing.assert_allclose(g[0], np.outer(d1, x0), atol=1e-12)
        np.testing.assert_allclose(g[2], np.outer(d2, h1), atol=1e-12)

    def test_shape_mismatch(self):
        p = tiny()
        _, trace = cfn_forward(p, np.zeros((2, 3, 6)))
        with pytest.raises(ValueError):
            cfn_backward(p, trace, np.zeros((2, 4)))


class TestEmbed:
    def test_embed_shape_and_order(self):
        spec = SliceSpec(1, 4)
        s = synth_note(60, 2, 5, 0, 16, 16).spectrogram
        p = init_cfn(4, spec.patch_dim(16, 16), encoder_widths=(8, 5), seed=2)
        for a in p.arrays():
            a += np.random.default_rng(0).normal(scale=0.05, size=a.shape).astype(a.dtype)
        e = embed(p, s, spec)
        assert e.shape == (20,)
        np.testing.assert_array_equal(e, embed(p, s, spec))
        from permssl.patches import slice_patches, shuffle_patches

        shuffled = shuffle_patches(slice_patches(s, spec), [3, 1, 0, 2]).patches
        assert not np.array_equal(e, encode(p, shuffled[None])[0][0])

    def test_spec_mismatch(self):
        p = init_cfn(4, 64)
        with pytest.raises(ValueError):
            embed(p, np.zeros((16, 16), dtype=np.float32), SliceSpec(1, 3))


class TestAdam:
    def test_first_step_is_lr_sign(self):
        p = [np.zeros(5)]
        g = [np.array([3.0, -1e-2, 50.0, -7.0, 1e-3])]
        state = AdamState.zeros_like(p, lr=1e-3)
        adam_step(state, p, g)
        delta = p[0]
        assert np.all(np.sign(delta) == -np.sign(g[0]))
        assert np.all((np.abs(delta) >= 0.99e-3) & (np.abs(delta) <= 1e-3))

    def test_zero_grads(self):
        p = [np.arange(4.0)]
        state = AdamState.zeros_like(p)
        adam_step(state, p, [np.zeros(4)])
        np.testing.assert_array_equal(p[0], np.arange(4.0))

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(0)
            p = [np.ones((3, 2), dtype=np.float32)]
            s = AdamState.zeros_like(p)
            for _ in range(20):
                adam_step(s, p, [rng.normal(size=(3, 2)).astype(np.float32)])
            return p[0]

        assert run().tobytes() == run().tobytes()

    def test_shape_mismatch(self):
        p = [np.zeros(3)]
        with pytest.raises(ValueError):
            adam_step(AdamState.zeros_like(p), p, [np.zeros(4)])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = init_cfn(6, 20, encoder_widths=(16, 8), head_width=12, out_dim=30, seed=7)
        save_checkpoint(tmp_path / "m.ckpt", p, {"loss": "xe-fixed"})
        q, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert meta == {"loss": "xe-fixed"}
        assert q.dims() == p.dims()
        for a, b in zip(p.arrays(), q.arrays()):
            assert a.tobytes() == b.tobytes()
        save_checkpoint(tmp_path / "m2.ckpt", q, meta)
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()

    def test_bad_magic(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", tiny(np.float32))
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[0] ^= 0xFF
        (tmp_path / "m.ckpt").write_bytes(bytes(raw))
        with pytest.raises(FormatError) as err:
            load_checkpoint(tmp_path / "m.ckpt")
        assert err.value.offset == 0

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", tiny(np.float32))
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "m.ckpt").write_bytes(raw[:-3])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "m.ckpt")


def test_input_standardization_matches_prescaled_input(tmp_path):
    rng = np.random.default_rng(3)
    X = rng.normal(2.0, 3.0, size=(4, 3, 6))
    plain = tiny()
    scaled = init_cfn(3, 6, encoder_widths=(4, 4), head_width=4, seed=0, dtype=np.float64,
                      input_shift=2.0, input_scale=3.0)
    np.testing.assert_allclose(cfn_forward(scaled, X)[0], cfn_forward(plain, (X - 2.0) / 3.0)[0], rtol=1e-12)
    save_checkpoint(tmp_path / "s.ckpt", scaled)
    back, _ = load_checkpoint(tmp_path / "s.ckpt")
    assert (back.input_shift, back.input_scale) == (2.0, 3.0)
    assert back.encoder_hash() != plain.astype(np.float32).encoder_hash()


@pytest.mark.parametrize("scale", [0.0, -1.0, np.inf])
def test_rejects_bad_input_scale(scale):
    with pytest.raises(ValueError):
        init_cfn(3, 6, input_scale=scale)
