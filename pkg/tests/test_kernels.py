import math

import numpy as np
import pytest
import torch

from dkmpp.diffengine import central_diff_grad, concat_param_blocks, max_rel_err
from dkmpp.errors import ConfigError
from dkmpp.kernels import (
    BaseKernelSpec,
    MlpSpec,
    base_kernel,
    deep_kernel,
    identity_mlp_params,
    init_mlp_params,
    kernel_from_sqdist,
    mlp_forward,
    mlp_views,
    pairwise_sqdist,
)


class TestBaseKernel:
    @pytest.mark.parametrize("kind", ["rbf", "rq", "ou"])
    def test_zero_distance_gives_one(self, kind):
        spec = BaseKernelSpec.create(kind, 37.0)
        a = np.array([0.3, 0.4, 0.5])
        assert base_kernel(spec, a, a) == pytest.approx(1.0)

    def test_rbf_value(self):
        # phi=100, ||a-b||^2 = 0.01 -> exp(-1)
        spec = BaseKernelSpec.create("rbf", 100.0)
        assert base_kernel(spec, [0.0], [0.1]) == pytest.approx(math.exp(-1.0), rel=1e-12)

    def test_rq_value(self):
        # phi * d^2 = 3 -> (1+3)^(-1/2) = 0.5
        spec = BaseKernelSpec.create("rq", 3.0)
        assert base_kernel(spec, [0.0], [1.0]) == pytest.approx(0.5, rel=1e-12)

    def test_ou_value(self):
        spec = BaseKernelSpec.create("ou", 2.0)
        assert base_kernel(spec, [0.0], [0.5]) == pytest.approx(math.exp(-1.0), rel=1e-12)

    @pytest.mark.parametrize("kind", ["rbf", "rq", "ou"])
    def test_monotone_decay_in_distance(self, kind):
        spec = BaseKernelSpec.create(kind, 5.0)
        dists = np.linspace(0.0, 2.0, 30)
        vals = [base_kernel(spec, [0.0], [d]) for d in dists]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert all(0.0 < v <= 1.0 for v in vals)

    def test_phi_must_be_positive(self):
        with pytest.raises(ConfigError):
            BaseKernelSpec.create("rbf", -1.0)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            BaseKernelSpec("gauss", 0.0)

    def test_dimension_mismatch(self):
        spec = BaseKernelSpec.create("rbf", 1.0)
        with pytest.raises(ValueError):
            base_kernel(spec, [0.0, 1.0], [0.0])

    def test_ou_derivative_defined_zero_at_coincidence(self):
        phi = torch.tensor(2.0)
        q = torch.zeros(1, requires_grad=True)
        k = kernel_from_sqdist("ou", phi, q)
        (g,) = torch.autograd.grad(k.sum(), q)
        assert float(g) == 0.0


def test_pairwise_sqdist_matches_direct():
    rng = np.random.default_rng(0)
    a = torch.tensor(rng.normal(size=(7, 3)))
    b = torch.tensor(rng.normal(size=(5, 3)))
    q = pairwise_sqdist(a, b)
    direct = ((a.unsqueeze(1) - b.unsqueeze(0)) ** 2).sum(-1)
    assert torch.allclose(q, direct, rtol=1e-10, atol=1e-12)
    assert (q >= 0).all()


class TestMlp:
    def test_zero_weights_return_bias(self):
        spec = MlpSpec((3, 1))
        params = concat_param_blocks([("mlp.W0", np.zeros(3)), ("mlp.b0", [4.5])])
        for x in ([0.0, 0.0, 0.0], [1.0, -2.0, 3.0]):
            assert mlp_forward(spec, x, params)[0] == pytest.approx(4.5)

    def test_identity_layer(self):
        spec = MlpSpec((3, 3))
        params = identity_mlp_params(3, prefix="mlp")
        x = np.array([0.1, -0.2, 0.3])
        np.testing.assert_allclose(mlp_forward(spec, x, params), x)

    def test_synthetic_config_shape(self):
        # one hidden layer of width 8 mapping 3 -> 3
        spec = MlpSpec((3, 8, 3))
        params = init_mlp_params(spec, "mlp", seed=0)
        out = mlp_forward(spec, [0.2, 0.3, 0.4], params)
        assert out.shape == (3,)

    def test_width_mismatch_rejected(self):
        spec = MlpSpec((3, 8, 3))
        params = init_mlp_params(spec, "mlp", seed=0)
        with pytest.raises(ConfigError):
            mlp_forward(spec, [0.2, 0.3], params)

    def test_relu_hidden_identity_output(self):
        # single hidden unit: y = w2 * relu(w1 x + b1) + b2
        spec = MlpSpec((1, 1, 1))
        params = concat_param_blocks(
            [("mlp.W0", [2.0]), ("mlp.b0", [0.0]), ("mlp.W1", [3.0]), ("mlp.b1", [1.0])]
        )
        assert mlp_forward(spec, [2.0], params)[0] == pytest.approx(13.0)
        assert mlp_forward(spec, [-2.0], params)[0] == pytest.approx(1.0)  # rectified

    def test_init_xavier_bounds_and_zero_bias(self):
        spec = MlpSpec((4, 8, 1))
        params = init_mlp_params(spec, "f", seed=1)
        w0 = params.block("f.W0")
        bound = math.sqrt(6.0 / (4 + 8))
        assert np.all(np.abs(w0) <= bound)
        assert np.all(params.block("f.b0") == 0.0)
        assert np.all(params.block("f.b1") == 0.0)


class TestDeepKernel:
    def make_g(self, seed=0):
        spec = MlpSpec((3, 8, 3))
        params = init_mlp_params(spec, "g", seed=seed)
        return spec, params

    def test_same_point_gives_one(self):
        spec, params = self.make_g()
        k = BaseKernelSpec.create("rbf", 50.0)
        s = np.array([0.5, 0.5, 0.5])
        assert deep_kernel(k, spec, s, s, params) == pytest.approx(1.0)

    def test_symmetry_exact(self):
        spec, params = self.make_g(seed=2)
        k = BaseKernelSpec.create("rq", 10.0)
        rng = np.random.default_rng(5)
        for _ in range(1000):
            s, u = rng.normal(size=3), rng.normal(size=3)
            assert deep_kernel(k, spec, s, u, params) == deep_kernel(k, spec, u, s, params)

    def test_shifted_identity_equals_plain_kernel(self):
        # g(s) = s + 0.1 cancels in the distance (the synthetic ground truth)
        g = MlpSpec((3, 3))
        params = identity_mlp_params(3, prefix="g", shift=0.1)
        k = BaseKernelSpec.create("rbf", 100.0)
        rng = np.random.default_rng(6)
        for _ in range(50):
            s, u = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
            assert deep_kernel(k, g, s, u, params) == pytest.approx(
                base_kernel(k, s, u), rel=1e-12
            )

    def test_collapsing_transform_gives_constant_one(self):
        g = MlpSpec((3, 3))
        params = concat_param_blocks([("g.W0", np.zeros(9)), ("g.b0", np.zeros(3))])
        k = BaseKernelSpec.create("rbf", 100.0)
        rng = np.random.default_rng(7)
        for _ in range(20):
            s, u = rng.normal(size=3), rng.normal(size=3)
            assert deep_kernel(k, g, s, u, params) == pytest.approx(1.0)

    def test_bounded_and_one_iff_transformed_equal(self):
        spec, params = self.make_g(seed=3)
        k = BaseKernelSpec.create("rbf", 30.0)
        rng = np.random.default_rng(8)
        for _ in range(200):
            s, u = rng.normal(size=3), rng.normal(size=3)
            v = deep_kernel(k, spec, s, u, params)
            gs = mlp_forward(spec, s, params, "g")
            gu = mlp_forward(spec, u, params, "g")
            assert 0.0 < v <= 1.0
            if not np.allclose(gs, gu):
                assert v < 1.0

    @pytest.mark.parametrize("kind", ["rbf", "rq"])
    def test_input_derivative_matches_finite_differences(self, kind):
        spec, params = self.make_g(seed=4)
        kspec = BaseKernelSpec.create(kind, 20.0)
        u = np.array([0.4, 0.5, 0.6])
        theta = params.torch_values()
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(20):
            s = rng.uniform(0.0, 1.0, 3)

            def k_of_s(x):
                return deep_kernel(kspec, spec, x, u, params)

            st = torch.tensor(s, requires_grad=True)
            gs = mlp_views(spec, "g", params, theta)
            from dkmpp.kernels import mlp_apply

            a = mlp_apply(gs, st.reshape(1, 3))
            b = mlp_apply(gs, torch.tensor(u).reshape(1, 3))
            q = ((a - b) ** 2).sum()
            kval = kernel_from_sqdist(kind, torch.tensor(kspec.phi), q)
            (grad,) = torch.autograd.grad(kval, st)
            worst = max(worst, max_rel_err(grad.numpy(), central_diff_grad(k_of_s, s, 1e-5)))
        assert worst < 1e-4
