import math

import numpy as np
import pytest
import torch

from dkmpp.diffengine import (
    InputJet,
    ParamVector,
    central_diff_grad,
    central_diff_hess_diag,
    concat_param_blocks,
    eval_jet,
    finite_diff_check,
    max_rel_err,
    param_grad,
)
from dkmpp.errors import NonFiniteError


def make_params(values):
    return concat_param_blocks([("theta", np.asarray(values, dtype=float))])


class TestParamVector:
    def test_blocks_and_slices(self):
        pv = concat_param_blocks([("a", [1.0, 2.0]), ("b", [3.0])])
        assert len(pv) == 3
        np.testing.assert_array_equal(pv.block("a"), [1.0, 2.0])
        np.testing.assert_array_equal(pv.block("b"), [3.0])

    def test_set_values_bumps_version(self):
        pv = make_params([1.0, 2.0])
        v0 = pv.version
        pv.set_values([3.0, 4.0])
        assert pv.version == v0 + 1

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            make_params([1.0, math.nan])
        pv = make_params([1.0, 2.0])
        with pytest.raises(NonFiniteError):
            pv.set_values([1.0, math.inf])

    def test_bad_offsets_rejected(self):
        with pytest.raises(ValueError):
            ParamVector(("a", "b"), np.array([0, 2]), np.array([1.0, 2.0]))


class TestEvalJet:
    def test_constant_field(self):
        jet = eval_jet(lambda p, th: th[0] * 0 + 7.0, [1.0, 2.0, 3.0], make_params([0.0]), order=2)
        assert jet.value == pytest.approx(7.0)
        np.testing.assert_allclose(jet.grad, 0.0)
        np.testing.assert_allclose(jet.hess_diag, 0.0)

    def test_quadratic_in_t(self):
        jet = eval_jet(lambda p, th: p[0] ** 2, [3.0, 0.0, 0.0], make_params([0.0]), order=2)
        assert jet.grad[0] == pytest.approx(6.0)
        assert jet.hess_diag[0] == pytest.approx(2.0)
        assert jet.grad[1] == jet.grad[2] == 0.0

    def test_order_one_skips_hessian(self):
        jet = eval_jet(lambda p, th: p.sum(), [0.0, 0.0, 0.0], make_params([0.0]), order=1)
        assert jet.hess_diag is None
        np.testing.assert_allclose(jet.grad, 1.0)

    def test_matches_finite_differences_on_smooth_field(self):
        params = make_params([0.7, -0.3, 1.1])

        def field(p, th):
            return torch.sin(th[0] * p[0]) * torch.exp(th[1] * p[1]) + th[2] * p[2] ** 3

        point = np.array([0.4, 0.9, -0.2])
        jet = eval_jet(field, point, params, order=2)

        def f(x):
            return float(field(torch.tensor(x), params.torch_values()))

        assert max_rel_err(jet.grad, central_diff_grad(f, point, 1e-5)) < 1e-6
        assert max_rel_err(jet.hess_diag, central_diff_hess_diag(f, point, 1e-4)) < 1e-4

    def test_linearity(self):
        rng = np.random.default_rng(0)
        params = make_params([1.0])
        point = rng.normal(size=3)

        def f(p, th):
            return torch.sin(p[0]) + p[1] ** 2

        def g(p, th):
            return torch.cos(p[1] * p[2])

        a, b = 1.7, -0.6
        jf = eval_jet(f, point, params)
        jg = eval_jet(g, point, params)
        jc = eval_jet(lambda p, th: a * f(p, th) + b * g(p, th), point, params)
        np.testing.assert_allclose(jc.value, a * jf.value + b * jg.value, rtol=1e-12)
        np.testing.assert_allclose(jc.grad, a * jf.grad + b * jg.grad, rtol=1e-12)
        np.testing.assert_allclose(jc.hess_diag, a * jf.hess_diag + b * jg.hess_diag, rtol=1e-12)

    def test_affine_chain_rule(self):
        # jet of f(A s + b) equals the analytically transformed jet of f
        params = make_params([1.0])
        A = np.diag([2.0, -0.5, 3.0])
        b = np.array([0.1, 0.2, 0.3])

        def f(p, th):
            return torch.sin(p[0]) * torch.cos(p[1]) + p[2] ** 2

        def composed(p, th):
            q = torch.as_tensor(A) @ p + torch.as_tensor(b)
            return f(q, th)

        s = np.array([0.3, -0.4, 0.5])
        inner = eval_jet(f, A @ s + b, params)
        outer = eval_jet(composed, s, params)
        diag = np.diag(A)
        np.testing.assert_allclose(outer.grad, inner.grad * diag, rtol=1e-12)
        np.testing.assert_allclose(outer.hess_diag, inner.hess_diag * diag ** 2, rtol=1e-12)

    def test_non_finite_reported_with_coordinate(self):
        def field(p, th):
            return torch.log(p[0])  # -inf gradient side effects at p[0] <= 0

        with pytest.raises(NonFiniteError):
            eval_jet(field, [0.0, 0.0, 0.0], make_params([0.0]), order=1)


class TestParamGrad:
    def test_quadratic_norm_gradient_is_params(self):
        pv = make_params([1.0, -2.0, 0.5])
        grad = param_grad(lambda b, th: 0.5 * (th ** 2).sum(), None, pv)
        np.testing.assert_allclose(grad, pv.values, rtol=1e-12)

    def test_loss_ignoring_params_has_zero_gradient(self):
        pv = make_params([1.0, 2.0])
        grad = param_grad(lambda b, th: (th * 0.0).sum() + 3.0, None, pv)
        np.testing.assert_allclose(grad, 0.0)

    def test_nested_input_derivative_in_loss(self):
        # loss(theta) = d/dt [ sin(theta * t) ] at t=0.8  = theta*cos(theta*t);
        # its theta-gradient must match finite differences over theta.
        pv = make_params([0.9])
        t0 = 0.8

        def loss(batch, th):
            t = torch.tensor([t0], requires_grad=True)
            y = torch.sin(th[0] * t).sum()
            (dy_dt,) = torch.autograd.grad(y, t, create_graph=True)
            return dy_dt.sum()

        grad = param_grad(loss, None, pv)
        analytic = math.cos(pv.values[0] * t0) - pv.values[0] * t0 * math.sin(pv.values[0] * t0)
        assert grad[0] == pytest.approx(analytic, rel=1e-10)


class TestFiniteDiffCheck:
    def test_sin_gradient_error_scales_like_h_squared(self):
        f = lambda x: math.sin(x[0])
        claimed = np.array([1.0])  # cos(0)
        err_big = finite_diff_check(f, np.array([0.0]), claimed, h=1e-2, floor=1e-8)
        err_small = finite_diff_check(f, np.array([0.0]), claimed, h=1e-3, floor=1e-8)
        assert err_big == pytest.approx((1e-2) ** 2 / 6, rel=0.05)
        assert err_small == pytest.approx((1e-3) ** 2 / 6, rel=0.05)

    def test_central_difference_exact_for_quadratics(self):
        f = lambda x: 3.0 * x[0] ** 2 + 2.0 * x[0] + 1.0
        err = finite_diff_check(f, np.array([1.5]), np.array([11.0]), h=1e-3, floor=1e-8)
        assert err < 1e-10
