import numpy as np
import pytest

from partmix import encoder
from partmix.encoder import ModelDims
from partmix.numerics import NumericDomainError, fd_gradient_check

DIMS = ModelDims(C_in=3, C_f=4, M=3, num_ids=5)


@pytest.fixture
def params():
    p, _ = encoder.init_params(DIMS, seed=11)
    return p


def _images(rng, n=2, h=4, w=2):
    return rng.uniform(0, 1, size=(n, h, w, DIMS.C_in))


class TestEmbed:
    def test_zero_weights(self, params):
        p = dict(params, embed_W=np.zeros((3, 4)), embed_b=np.zeros(4))
        f = encoder.embed(p, _images(np.random.default_rng(0)))
        np.testing.assert_array_equal(f, 0.0)

    def test_constant_image_gives_constant_rows(self, params):
        x = np.full((1, 4, 2, 3), 0.3)
        f = encoder.embed(params, x)[0]
        np.testing.assert_array_equal(f, np.broadcast_to(f[0], f.shape))

    def test_channel_mismatch(self, params):
        with pytest.raises(ValueError):
            encoder.embed(params, np.zeros((1, 4, 2, 5)))

    def test_gradient(self, params):
        rng = np.random.default_rng(1)
        x = _images(rng)
        w = rng.normal(size=(2, 8, 4))
        f = encoder.embed(params, x)
        grads, _ = encoder.embed_backward(params, x, f, w)

        def loss(W):
            return float(np.sum(w * encoder.embed(dict(params, embed_W=W), x)))
        assert fd_gradient_check(loss, params["embed_W"], grads["embed_W"]).passed()


class TestDetectParts:
    def test_zero_weights_half(self, params):
        p = dict(params, det_W=np.zeros((4, 3)), det_b=np.zeros(3))
        m = encoder.detect_parts(p, np.random.default_rng(0).normal(size=(2, 8, 4)))
        np.testing.assert_array_equal(m, 0.5)

    def test_monotone_toward_one(self, params):
        f = np.ones((1, 1, 4))
        vals = []
        for b in (0.0, 5.0, 20.0, 30.0):
            p = dict(params, det_W=np.zeros((4, 3)), det_b=np.full(3, b))
            vals.append(encoder.detect_parts(p, f)[0, 0, 0])
        assert all(a < b for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1.0

    def test_saturation_raises(self, params):
        p = dict(params, det_W=np.zeros((4, 3)), det_b=np.full(3, 40.0))
        with pytest.raises(NumericDomainError):
            encoder.detect_parts(p, np.ones((1, 1, 4)))

    def test_open_interval(self, params):
        f = np.random.default_rng(2).normal(size=(3, 8, 4)) * 3
        m = encoder.detect_parts(params, f)
        assert np.all((m > 0) & (m < 1))


class TestPoolParts:
    def test_unit_mask_is_global_pool(self):
        f = np.random.default_rng(0).normal(size=(2, 8, 4))
        p = encoder.pool_parts(f, np.ones((2, 8, 3)))
        for k in range(3):
            np.testing.assert_array_equal(p[:, k], encoder.global_pool(f))

    def test_zero_mask(self):
        f = np.random.default_rng(0).normal(size=(1, 8, 4))
        m = np.random.default_rng(1).uniform(size=(1, 8, 3))
        m[..., 1] = 0.0
        np.testing.assert_array_equal(encoder.pool_parts(f, m)[0, 1], 0.0)

    def test_double_loop(self):
        rng = np.random.default_rng(4)
        f, m = rng.normal(size=(6, 5)), rng.uniform(size=(6, 3))
        ref = np.zeros((3, 5))
        for k in range(3):
            for c in range(5):
                ref[k, c] = sum(m[s, k] * f[s, c] for s in range(6)) / 6
        np.testing.assert_allclose(encoder.pool_parts(f, m), ref, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            encoder.pool_parts(np.zeros((1, 8, 4)), np.zeros((1, 7, 3)))


class TestDescriptor:
    def test_length(self):
        assert ModelDims(3, 16, 6, 10).desc_dim == 112

    def test_single_uniform_part(self):
        f = np.random.default_rng(0).normal(size=(1, 8, 4))
        p = encoder.pool_parts(f, np.ones((1, 8, 1)))
        d = encoder.person_descriptor(f, p)[0]
        np.testing.assert_array_equal(d[:4], d[4:])

    def test_slicing_round_trip(self, params):
        c = encoder.forward(params, _images(np.random.default_rng(3), n=1))
        pd = encoder.PersonDescriptor.from_concatenated(c.d[0], DIMS.C_f)
        np.testing.assert_array_equal(pd.global_, encoder.global_pool(c.f)[0])
        np.testing.assert_array_equal(pd.parts, c.p[0])
        np.testing.assert_array_equal(pd.concatenated, c.d[0])

    def test_backbone_gradient(self, params):
        rng = np.random.default_rng(5)
        x = _images(rng)
        wd = rng.normal(size=(2, DIMS.desc_dim))
        wp = rng.normal(size=(2, DIMS.M, DIMS.C_f))
        c = encoder.forward(params, x)
        grads = encoder.backward(params, c, dd=wd, dp=wp)
        for name in ("embed_W", "embed_b", "det_W", "det_b"):
            def loss(v, name=name):
                cc = encoder.forward(dict(params, **{name: v}), x)
                return float(np.sum(wd * cc.d) + np.sum(wp * cc.p))
            assert fd_gradient_check(loss, params[name], grads[name]).passed(), name


class TestClassifiers:
    def test_classify_is_softmax(self, params):
        d = np.zeros((1, DIMS.desc_dim))
        p = dict(params, cls_W=np.zeros_like(params["cls_W"]), cls_b=np.zeros(5))
        np.testing.assert_allclose(encoder.classify(p, "cls", d), np.full((1, 5), 0.2))

    def test_dim_mismatch(self, params):
        with pytest.raises(ValueError):
            encoder.classify(params, "cls", np.zeros((1, 3)))

    def test_modality_classifiers_start_tied(self, params):
        np.testing.assert_array_equal(params["vis_W"], params["ir_W"])
        np.testing.assert_array_equal(params["vis_b"], params["ir_b"])


class TestEMA:
    def _pair(self):
        live = {"vis_W": np.full((2, 2), 4.0), "vis_b": np.ones(2)}
        mean = {"mean_vis_W": np.zeros((2, 2)), "mean_vis_b": np.zeros(2)}
        return mean, live

    def test_zero_momentum_copies(self):
        mean, live = self._pair()
        out = encoder.ema_update(mean, live, 0.0)
        np.testing.assert_array_equal(out["mean_vis_W"], live["vis_W"])

    def test_one_step(self):
        mean, live = self._pair()
        out = encoder.ema_update(mean, live, 0.9)
        np.testing.assert_allclose(out["mean_vis_W"], 0.1 * live["vis_W"], rtol=1e-15)

    def test_geometric_convergence(self):
        mean, live = self._pair()
        for _ in range(2000):
            mean = encoder.ema_update(mean, live, 0.99)
        np.testing.assert_allclose(mean["mean_vis_W"], live["vis_W"], rtol=1e-8)

    def test_bad_momentum(self):
        mean, live = self._pair()
        with pytest.raises(ValueError):
            encoder.ema_update(mean, live, 1.0)


class TestSnapshot:
    def test_round_trip(self, tmp_path):
        params, mean = encoder.init_params(DIMS, 3)
        path = tmp_path / "params.bin"
        encoder.save_params(path, params, mean)
        p2, m2 = encoder.load_params(path)
        assert set(p2) == set(params) and set(m2) == set(mean)
        for k in params:
            np.testing.assert_array_equal(p2[k], params[k])
        for k in mean:
            np.testing.assert_array_equal(m2[k], mean[k])
        assert encoder.dims_of(p2) == DIMS

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a snapshot at all........")
        with pytest.raises(ValueError):
            encoder.load_params(path)
