import math

import mpmath
import numpy as np
import pytest

from partmix import augment, encoder, losses
from partmix.encoder import ModelDims
from partmix.losses import LossWeights
from partmix.numerics import fd_gradient_check

mpmath.mp.dps = 40
DIMS = ModelDims(3, 3, 2, 3)


def _state(seed=0, P=3, K=2):
    rng = np.random.default_rng(seed)
    params, mean = encoder.init_params(DIMS, seed)
    # separate the mean classifiers from the live ones so L_ML is non-trivial
    mean = {k: v + 0.3 * rng.normal(size=v.shape) for k, v in mean.items()}
    x = rng.uniform(size=(P * K, 4, 2, 3))
    labels = np.repeat(np.arange(P), K)
    mods = np.tile(np.repeat([0, 1], K // 2), P)
    return params, mean, x, labels, mods


def _ref_contrastive(s_pos, s_neg, tau):
    tau = mpmath.mpf(tau)
    total = mpmath.mpf(0)
    for sp, sn in zip(s_pos, s_neg):
        num = sum(mpmath.exp(mpmath.mpf(s) / tau) for s in sp)
        den = num + sum(mpmath.exp(mpmath.mpf(s) / tau) for s in sn)
        total += -mpmath.log(num / den)
    return float(total)


class TestContrastive:
    def test_ln2(self):
        loss, *_ = losses.contrastive_from_sims([[0.37]], [[0.37]], 0.1)
        assert abs(loss - math.log(2)) < 1e-12

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        sp, sn = rng.uniform(-1, 1, (100, 2)), rng.uniform(-1, 1, (100, 20))
        c = rng.uniform(-3, 3, (100, 1))
        a, *_ = losses.contrastive_from_sims(sp, sn, 0.1)
        b, *_ = losses.contrastive_from_sims(sp + c, sn + c, 0.1)
        assert abs(a - b) < 1e-9

    def test_mpmath_reference(self):
        rng = np.random.default_rng(1)
        sp, sn = rng.uniform(-1, 1, (8, 2)), rng.uniform(-1, 1, (8, 20))
        loss, *_ = losses.contrastive_from_sims(sp, sn, 0.1)
        assert loss == pytest.approx(_ref_contrastive(sp, sn, 0.1), rel=1e-13)

    def test_positive(self):
        rng = np.random.default_rng(2)
        loss, *_ = losses.contrastive_from_sims(rng.uniform(-1, 1, (5, 2)), rng.uniform(-1, 1, (5, 3)), 0.1)
        assert loss > 0

    def test_monotone(self):
        rng = np.random.default_rng(3)
        sp, sn = rng.uniform(-0.5, 0.5, (1, 2)), rng.uniform(-0.5, 0.5, (1, 5))
        base, *_ = losses.contrastive_from_sims(sp, sn, 0.1)
        for j in range(2):
            up = sp.copy()
            up[0, j] += 0.05
            assert losses.contrastive_from_sims(up, sn, 0.1)[0] < base
        for k in range(5):
            up = sn.copy()
            up[0, k] += 0.05
            assert losses.contrastive_from_sims(sp, up, 0.1)[0] > base

    def test_empty_positive_skipped(self):
        loss, gp, gn, skipped = losses.contrastive_from_sims(
            [[0.2], [0.1]], [[0.0], [0.3]], 0.1, pos_mask=[[True], [False]])
        ref, *_ = losses.contrastive_from_sims([[0.2]], [[0.0]], 0.1)
        assert skipped == 1 and loss == pytest.approx(ref, abs=1e-15)
        assert np.all(gp[1] == 0) and np.all(gn[1] == 0)

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            losses.contrastive_from_sims([[0.1]], [[0.1]], 0.0)

    def test_zero_descriptor(self):
        with pytest.raises(ValueError):
            losses.contrastive_loss(np.zeros((1, 4)), np.ones((1, 1, 4)), np.ones((1, 1, 4)), 0.1)

    def test_gradient_wrt_descriptors(self):
        rng = np.random.default_rng(4)
        a, p, n = rng.normal(size=(3, 6)), rng.normal(size=(3, 2, 6)), rng.normal(size=(3, 5, 6))
        _, da, dp, dn, _ = losses.contrastive_loss(a, p, n, 0.5)
        assert fd_gradient_check(lambda t: losses.contrastive_loss(t, p, n, 0.5)[0], a, da).passed()
        assert fd_gradient_check(lambda t: losses.contrastive_loss(a, t, n, 0.5)[0], p, dp).passed()
        assert fd_gradient_check(lambda t: losses.contrastive_loss(a, p, t, 0.5)[0], n, dn).passed()

    def test_gradient_high_precision_sharp_tau(self):
        # tau=0.1 on unrelated vectors: weights near 1e-9 defeat float64 differences,
        # so difference in 40-digit arithmetic instead
        rng = np.random.default_rng(6)
        a, p, n = rng.normal(size=(2, 5)), rng.normal(size=(2, 2, 5)), rng.normal(size=(2, 3, 5))
        dn = losses.contrastive_loss(a, p, n, 0.1)[3]

        def ref(a_, p_, n_):
            def cos(u, v):
                return mpmath.fsum(x * y for x, y in zip(u, v)) / mpmath.sqrt(
                    mpmath.fsum(x * x for x in u) * mpmath.fsum(y * y for y in v))
            s_pos = [[cos(a_[i], q) for q in p_[i]] for i in range(len(a_))]
            s_neg = [[cos(a_[i], q) for q in n_[i]] for i in range(len(a_))]
            tau, total = mpmath.mpf("0.1"), mpmath.mpf(0)
            for sp, sn in zip(s_pos, s_neg):
                num = mpmath.fsum(mpmath.exp(s / tau) for s in sp)
                total += mpmath.log(num + mpmath.fsum(mpmath.exp(s / tau) for s in sn)) - mpmath.log(num)
            return total

        mp = lambda arr: [[[mpmath.mpf(float(x)) for x in r] for r in b] for b in arr]
        A, P, N = mp(a[None])[0], mp(p), mp(n)
        h = mpmath.mpf("1e-15")
        for (i, j, c), g in np.ndenumerate(dn):
            N[i][j][c] += h
            up = ref(A, P, N)
            N[i][j][c] -= 2 * h
            down = ref(A, P, N)
            N[i][j][c] += h
            assert float((up - down) / (2 * h)) == pytest.approx(g, rel=1e-10, abs=1e-20)

    def test_plans_gradient(self):
        rng = np.random.default_rng(5)
        parts = rng.normal(size=(8, 3, 2))
        bank = augment.DescriptorBank(parts, np.repeat(np.arange(2), 4), np.tile([0, 0, 1, 1], 2))
        pos, neg = augment.build_pools(bank, 1, 4, 6, seed=0)
        res = losses.contrastive_loss_plans(parts, pos, neg, 0.5)
        f = lambda t: losses.contrastive_loss_plans(t, pos, neg, 0.5)["loss"]
        assert fd_gradient_check(f, parts, res["dparts"]).passed()


class TestClassification:
    def test_part_id_extremes(self):
        params, *_ = _state()
        parts = np.ones((2, DIMS.M, DIMS.C_f))
        uniform = dict(params, part_W=np.zeros_like(params["part_W"]), part_b=np.zeros(3))
        assert losses.part_id_loss(uniform, parts, [0, 1])[0] == pytest.approx(math.log(3), abs=1e-15)
        sure = dict(uniform, part_b=np.array([800.0, 0, 0]))
        assert losses.part_id_loss(sure, parts, [0, 0])[0] == 0.0

    def test_id_loss_uniform(self):
        params, _, x, labels, mods = _state()
        flat = dict(params, cls_W=np.zeros_like(params["cls_W"]), cls_b=np.zeros(3))
        d = encoder.forward(params, x).d
        assert losses.id_loss(flat, d, labels, mods)[0] == pytest.approx(2 * math.log(3), abs=1e-14)

    def test_id_loss_reference(self):
        params, _, x, labels, mods = _state(1)
        d = encoder.forward(params, x).d
        ref = 0.0
        for t in (0, 1):
            sel = mods == t
            z = d[sel] @ params["cls_W"] + params["cls_b"]
            ref += np.mean([-z[i, labels[sel][i]] + math.log(np.exp(z[i]).sum()) for i in range(sel.sum())])
        assert losses.id_loss(params, d, labels, mods)[0] == pytest.approx(ref, rel=1e-13)

    def test_sid_uniform(self):
        params, _, x, labels, mods = _state()
        flat = {**params, **{k: np.zeros_like(params[k]) for k in ("vis_W", "vis_b", "ir_W", "ir_b")}}
        d = encoder.forward(params, x).d
        assert losses.modality_specific_id_loss(flat, d, labels, mods)[0] == pytest.approx(2 * math.log(3))

    def test_label_range(self):
        params, _, x, labels, mods = _state()
        d = encoder.forward(params, x).d
        with pytest.raises(ValueError):
            losses.id_loss(params, d, labels + 5, mods)

    def test_gradients(self):
        params, _, x, labels, mods = _state(2)
        d = encoder.forward(params, x).d
        for fn, key in ((losses.id_loss, "cls_W"), (losses.modality_specific_id_loss, "vis_W")):
            _, g, dd = fn(params, d, labels, mods)
            assert fd_gradient_check(lambda t: fn(params, t, labels, mods)[0], d, dd).passed()
            assert fd_gradient_check(lambda t: fn(dict(params, **{key: t}), d, labels, mods)[0],
                                     params[key], g[key]).passed()


class TestModalityLearning:
    def test_zero_when_mean_equals_live(self):
        params, _, x, _, mods = _state()
        d = encoder.forward(params, x).d
        mean = {"mean_vis_W": params["ir_W"], "mean_vis_b": params["ir_b"],
                "mean_ir_W": params["vis_W"], "mean_ir_b": params["vis_b"]}
        assert losses.modality_learning_loss(params, mean, d, mods)[0] == pytest.approx(0.0, abs=1e-15)

    def test_ln2(self):
        params, mean, *_ = _state()
        D, C = params["vis_W"].shape
        d = np.zeros((1, D))
        live = dict(params, vis_W=np.zeros((D, C)), vis_b=np.array([1000.0, 0.0, -1000.0]))
        m = dict(mean, mean_ir_W=np.zeros((D, C)), mean_ir_b=np.array([0.0, 0.0, -1000.0]))
        assert losses.modality_learning_loss(live, m, d, np.array([0]))[0] == pytest.approx(math.log(2))

    def test_reference_and_gradient(self):
        params, mean, x, _, mods = _state(3)
        d = encoder.forward(params, x).d
        loss, g, dd = losses.modality_learning_loss(params, mean, d, mods)
        ref = 0.0
        for i in range(len(d)):
            live, tgt = ("vis", "mean_ir") if mods[i] == 0 else ("ir", "mean_vis")
            p = np.exp(d[i] @ params[f"{live}_W"] + params[f"{live}_b"]); p /= p.sum()
            q = np.exp(d[i] @ mean[f"{tgt}_W"] + mean[f"{tgt}_b"]); q /= q.sum()
            ref += float(np.sum(p * np.log(p / q)))
        assert loss == pytest.approx(ref, rel=1e-12)
        assert not any(k.startswith("mean_") for k in g)
        assert fd_gradient_check(lambda t: losses.modality_learning_loss(params, mean, t, mods)[0],
                                 d, dd).passed()
        assert fd_gradient_check(
            lambda t: losses.modality_learning_loss(dict(params, ir_W=t), mean, d, mods)[0],
            params["ir_W"], g["ir_W"]).passed()


class TestCenterCluster:
    def test_zero(self):
        d = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 0.0], [3.0, 0.0]])
        assert losses.center_cluster_loss(d, [0, 0, 1, 1], 1.0)[0] == 0.0

    def test_hinge_arithmetic(self):
        d = np.array([[0.0, 0.0], [0.4, 0.0]])
        assert losses.center_cluster_loss(d, [0, 1], 1.0)[0] == pytest.approx(0.6, abs=1e-15)

    def test_single_identity(self):
        with pytest.warns(RuntimeWarning):
            loss, _, single = losses.center_cluster_loss(np.array([[0.0], [2.0]]), [0, 0], 1.0)
        assert single and loss == pytest.approx(1.0)

    def test_reference_and_gradient(self):
        rng = np.random.default_rng(4)
        d, labels = rng.normal(size=(9, 4)) * 0.3, np.repeat(np.arange(3), 3)
        loss, dd, _ = losses.center_cluster_loss(d, labels, 1.0)
        z = np.stack([d[labels == k].mean(0) for k in range(3)])
        pull = np.mean(np.linalg.norm(d - z[labels], axis=1))
        push = sum(max(0.0, 1.0 - np.linalg.norm(z[a] - z[b])) for a in range(3) for b in range(a + 1, 3)) / 3
        assert loss == pytest.approx(pull + push, rel=1e-13)
        assert fd_gradient_check(lambda t: losses.center_cluster_loss(t, labels, 1.0)[0], d, dd).passed()


class TestTotal:
    def _plans(self, params, x, labels, mods):
        c = encoder.forward(params, x)
        bank = augment.DescriptorBank(c.p, labels, mods)
        return augment.build_pools(bank, 1, 4, 8, seed=0)

    def test_hand_weighted_sum(self):
        params, mean, x, labels, mods = _state(5, P=2, K=4)
        pos, neg = self._plans(params, x, labels, mods)
        w = LossWeights()
        res = losses.total_loss(params, mean, x, labels, mods, w, pos_plans=pos, neg_plans=neg)
        c = encoder.forward(params, x)
        comps = {
            "L_id": losses.id_loss(params, c.d, labels, mods)[0],
            "L_cc": losses.center_cluster_loss(c.d, labels)[0],
            "L_sid": losses.modality_specific_id_loss(params, c.d, labels, mods)[0],
            "L_ML": losses.modality_learning_loss(params, mean, c.d, mods)[0],
            "L_aid": losses.part_id_loss(params, c.p, labels)[0],
            "L_cont": losses.contrastive_loss_plans(c.p, pos, neg, 0.1)["loss"],
        }
        for k, v in comps.items():
            assert res.components[k] == pytest.approx(v, rel=1e-14), k
        hand = (comps["L_id"] + comps["L_cc"] + 0.5 * comps["L_sid"] + 2.5 * comps["L_ML"]
                + 0.5 * comps["L_aid"] + 0.5 * comps["L_cont"])
        assert res.total == pytest.approx(hand, rel=1e-14)

    def test_zero_weights(self):
        params, mean, x, labels, mods = _state(6, P=2, K=4)
        pos, neg = self._plans(params, x, labels, mods)
        res = losses.total_loss(params, mean, x, labels, mods, LossWeights(0, 0, 0, 0),
                                pos_plans=pos, neg_plans=neg)
        assert res.total == pytest.approx(res.components["L_id"] + res.components["L_cc"], rel=1e-15)

    def test_partmix_terms_not_evaluated(self):
        params, mean, x, labels, mods = _state(7)
        res = losses.total_loss(params, mean, x, labels, mods, include_partmix=False)
        assert res.diagnostics["evaluated"] == ["L_id", "L_cc", "L_sid", "L_ML"]
        assert res.components["L_aid"] == 0.0 and res.components["L_cont"] == 0.0

    def test_mean_classifiers_get_no_gradient(self):
        params, mean, x, labels, mods = _state(8)
        res = losses.total_loss(params, mean, x, labels, mods, include_partmix=False)
        assert set(res.grads) == set(params)

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_ML=-1.0)
        with pytest.raises(ValueError):
            LossWeights(lambda_cont=float("nan"))
