import numpy as np
import pytest

from tomoheight.errors import BadSpecError, ShapeMismatchError
from tomoheight.volnet import (
    Backbone,
    CollapseKind,
    ForwardCtx,
    ModelSpec,
    build_model,
    gradients,
    load_model,
    masked_mse,
    save_model,
)
from tomoheight.volnet.layers import BatchNorm3d, MaxPool3d, NearestResize3d
from tomoheight.volnet.models import activation_signature, same_signature


def tiny_spec(**kw):
    defaults = dict(backbone=Backbone.Model2, collapse=CollapseKind.GapZ,
                    in_channels=2, base_width=4, batch_norm=False)
    defaults.update(kw)
    return ModelSpec(**defaults)


class TestSpecValidation:
    def test_dropout_range(self):
        with pytest.raises(BadSpecError):
            tiny_spec(dropout_rate=0.6)

    def test_base_width_minimum(self):
        with pytest.raises(BadSpecError):
            tiny_spec(base_width=2)


class TestParameterBudgets:
    @pytest.mark.parametrize("backbone,target", [
        (Backbone.Model1, 21e6),
        (Backbone.Model2, 1.3e6),
        (Backbone.Model3, 1.2e6),
    ])
    def test_default_width_within_budget(self, backbone, target):
        for collapse in CollapseKind:
            model = build_model(ModelSpec(backbone, collapse, in_channels=3))
            n = model.n_params()
            assert abs(n - target) <= 0.15 * target, (backbone, collapse, n)


class TestCollapseHeads:
    @pytest.mark.parametrize("collapse", list(CollapseKind))
    def test_output_shape_16(self, collapse):
        model = build_model(tiny_spec(collapse=collapse, in_channels=3), seed=1)
        x = np.random.default_rng(0).uniform(0, 1, (2, 3, 16, 16, 36))
        y = model.forward(x)
        assert y.shape == (2, 16, 16)
        assert np.all(np.isfinite(y))

    def test_gapz_z_permutation_invariance(self):
        model = build_model(tiny_spec(collapse=CollapseKind.GapZ), seed=2)
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 1, (1, 2, 16, 16, 36))
        perm = rng.permutation(36)
        head = model.head
        feats = rng.standard_normal((1, 4, 16, 16, 36))
        a = head.forward(feats, ForwardCtx())
        b = head.forward(feats[:, :, :, :, perm], ForwardCtx())
        np.testing.assert_array_equal(a, b)

    def test_convz_sensitive_to_z_permutation(self):
        model = build_model(tiny_spec(collapse=CollapseKind.ConvZ), seed=2,
                            dtype=np.float64)
        rng = np.random.default_rng(4)
        x = rng.uniform(0, 1, (1, 2, 16, 16, 36))
        perm = rng.permutation(36)
        a = model.forward(x)
        b = model.forward(x[:, :, :, :, perm])
        assert np.abs(a - b).max() > 1e-6

    def test_head_requires_36_bins(self):
        model = build_model(tiny_spec(collapse=CollapseKind.ConvZ), seed=0)
        with pytest.raises(ShapeMismatchError):
            model.forward(np.zeros((1, 2, 16, 16, 20)))


class TestForward:
    def test_eval_deterministic(self):
        model = build_model(tiny_spec(batch_norm=True, dropout_rate=0.3), seed=5)
        x = np.random.default_rng(6).uniform(0, 1, (2, 2, 16, 16, 36))
        a = model.forward(x, ForwardCtx(train=False))
        b = model.forward(x, ForwardCtx(train=False))
        np.testing.assert_array_equal(a, b)

    def test_w16_model1_valid_w8_rejected(self):
        spec = ModelSpec(Backbone.Model1, CollapseKind.GapZ, in_channels=1,
                         base_width=4)
        model = build_model(spec, seed=0)
        y = model.forward(np.random.default_rng(0).uniform(0, 1, (1, 1, 16, 16, 36)))
        assert y.shape == (1, 16, 16)
        with pytest.raises(ShapeMismatchError):
            model.forward(np.zeros((1, 1, 8, 8, 36)))

    def test_channel_mismatch(self):
        model = build_model(tiny_spec(), seed=0)
        with pytest.raises(ShapeMismatchError):
            model.forward(np.zeros((1, 3, 16, 16, 36)))

    def test_dropout_zero_train_equals_eval(self):
        model = build_model(tiny_spec(dropout_rate=0.0, batch_norm=False), seed=7,
                            dtype=np.float64)
        x = np.random.default_rng(8).uniform(0, 1, (1, 2, 16, 16, 36))
        a = model.forward(x, ForwardCtx(train=True))
        b = model.forward(x, ForwardCtx(train=False))
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_dropout_active_in_train(self):
        model = build_model(tiny_spec(dropout_rate=0.5), seed=7, dtype=np.float64)
        x = np.random.default_rng(8).uniform(0, 1, (1, 2, 16, 16, 36))
        rng = np.random.default_rng(9)
        a = model.forward(x, ForwardCtx(train=True, rng=rng))
        b = model.forward(x, ForwardCtx(train=True, rng=rng))
        assert np.abs(a - b).max() > 1e-9  # fresh masks each call


class TestGradients:
    def test_zero_residual_zero_grads(self):
        model = build_model(tiny_spec(), seed=10, dtype=np.float64)
        x = np.random.default_rng(11).uniform(0, 1, (1, 2, 16, 16, 36))
        targets = model.forward(x, ForwardCtx(train=True))
        loss, _, grads = gradients(model, x, targets, train=True)
        assert loss == 0.0
        assert max(np.abs(g).max() for g in grads.values()) <= 1e-9

    def test_all_masked_zero_loss(self):
        model = build_model(tiny_spec(), seed=10, dtype=np.float64)
        x = np.random.default_rng(11).uniform(0, 1, (1, 2, 16, 16, 36))
        mask = np.zeros((1, 16, 16), dtype=bool)
        loss, _, grads = gradients(model, x, np.zeros((1, 16, 16)), mask, train=True)
        assert loss == 0.0
        assert max(np.abs(g).max() for g in grads.values()) == 0.0

    def test_fd_on_valid_stencils(self):
        # stencil validity: identical activation patterns at theta +/- h,
        # the condition under which central differences measure the gradient
        model = build_model(tiny_spec(), seed=0, dtype=np.float64)
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, (1, 2, 16, 16, 36))
        t = rng.uniform(20, 35, (1, 16, 16))
        loss, _, grads = gradients(model, x, t, train=True)
        params = dict(model.named_params())
        names = sorted(params)
        flat = [(n, i) for n in names for i in range(params[n].size)]
        h = 1e-3
        checked = 0
        for si in rng.permutation(len(flat)):
            if checked >= 12:
                break
            n, i = flat[si]
            p = params[n]
            orig = p.reshape(-1)[i]
            p.reshape(-1)[i] = orig + h
            lp, _ = masked_mse(model.forward(x, ForwardCtx(train=True)), t)
            sig_p = activation_signature(model)
            p.reshape(-1)[i] = orig - h
            lm, _ = masked_mse(model.forward(x, ForwardCtx(train=True)), t)
            sig_m = activation_signature(model)
            p.reshape(-1)[i] = orig
            if not same_signature(sig_p, sig_m):
                continue
            fd = (lp - lm) / (2 * h)
            an = grads[n].reshape(-1)[i]
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8)
            checked += 1
        assert checked == 12

    def test_batchnorm_model_directional_fd(self):
        # BN couples the whole batch; verify with a small step where the
        # activation pattern is stable
        model = build_model(tiny_spec(batch_norm=True), seed=1, dtype=np.float64)
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, (2, 2, 16, 16, 36))
        t = rng.uniform(20, 35, (2, 16, 16))
        _, _, grads = gradients(model, x, t, train=True)
        params = dict(model.named_params())
        v = {n: rng.standard_normal(p.shape) for n, p in params.items()}
        gdotv = sum(float(np.sum(grads[n] * v[n])) for n in params)
        h = 1e-6
        for n, p in params.items():
            p += h * v[n]
        lp, _ = masked_mse(model.forward(x, ForwardCtx(train=True)), t)
        for n, p in params.items():
            p -= 2 * h * v[n]
        lm, _ = masked_mse(model.forward(x, ForwardCtx(train=True)), t)
        for n, p in params.items():
            p += h * v[n]
        fd = (lp - lm) / (2 * h)
        assert gdotv == pytest.approx(fd, rel=1e-2)


class TestLayers:
    def test_maxpool_floors_odd(self):
        pool = MaxPool3d()
        x = np.random.default_rng(0).standard_normal((1, 2, 9, 8, 9))
        y = pool.forward(x, ForwardCtx())
        assert y.shape == (1, 2, 4, 4, 4)
        dy = np.ones_like(y)
        dx = pool.backward(dy)
        assert dx.shape == x.shape
        assert dx.sum() == y.size  # each window routes to exactly one input

    def test_nearest_resize_roundtrip_shapes(self):
        rs = NearestResize3d()
        x = np.random.default_rng(1).standard_normal((1, 3, 4, 4, 4))
        y = rs.forward_to(x, (9, 9, 9), ForwardCtx())
        assert y.shape == (1, 3, 9, 9, 9)
        dx = rs.backward(np.ones_like(y))
        assert dx.shape == x.shape
        assert dx.sum() == pytest.approx(9 * 9 * 9 * 3)

    def test_batchnorm_eval_uses_running_stats(self):
        bn = BatchNorm3d(2, dtype=np.float64)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 2, 3, 3, 3)) * 3 + 5
        for _ in range(200):
            bn.forward(x, ForwardCtx(train=True))
        y = bn.forward(x, ForwardCtx(train=False))
        # after convergence of running stats, eval output is ~standardized
        assert abs(float(y.mean())) < 0.05
        assert abs(float(y.std()) - 1.0) < 0.05


class TestCheckpoint:
    def test_roundtrip_identity(self, tmp_path):
        model = build_model(tiny_spec(batch_norm=True, in_channels=3), seed=3)
        # make running stats non-trivial
        x = np.random.default_rng(4).uniform(0, 1, (2, 3, 16, 16, 36)).astype(np.float32)
        model.forward(x, ForwardCtx(train=True))
        path = tmp_path / "m.tmdl"
        save_model(model, path)
        back = load_model(path)
        assert back.spec == model.spec
        for (na, a), (nb, b) in zip(model.named_params(), back.named_params()):
            assert na == nb
            assert a.tobytes() == b.tobytes()
        for (na, a), (nb, b) in zip(model.named_buffers(), back.named_buffers()):
            assert na == nb
            assert a.tobytes() == b.tobytes()
        ya = model.forward(x)
        yb = back.forward(x)
        np.testing.assert_array_equal(ya, yb)

    def test_roundtrip_many_seeds(self, tmp_path):
        for seed in range(100):
            spec = tiny_spec(collapse=list(CollapseKind)[seed % 3],
                             batch_norm=bool(seed % 2))
            model = build_model(spec, seed=seed)
            path = tmp_path / "r.tmdl"
            save_model(model, path)
            back = load_model(path)
            for (_, a), (_, b) in zip(model.named_params(), back.named_params()):
                assert a.tobytes() == b.tobytes()
