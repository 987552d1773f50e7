"""Tests for the far-field depth reparameterization μ' = e^f μ, s' = e^f s."""

import math

import numpy as np
import pytest
import torch

from exgs.farfield import apply_ffg, apply_ffg_autograd, ffg_backward
from exgs.rasterize import project
from exgs.scene import CameraView, GaussianPrimitive

torch.set_num_threads(1)


class TestApplyFfg:
    def test_zero_factor_is_identity(self):
        mu = torch.tensor([[1.0, -2.0, 3.0], [0.5, 0.0, 9.0]])
        s = torch.tensor([[0.1, 0.2, 0.3], [1.0, 1.0, 1.0]])
        mu_p, s_p = apply_ffg(mu, s, torch.zeros(2))
        assert torch.equal(mu_p, mu)
        assert torch.equal(s_p, s)

    def test_log_two_closed_form(self):
        mu_p, s_p = apply_ffg(
            torch.tensor([1.0, 2.0, 3.0]),
            torch.tensor([0.5, 0.5, 0.5]),
            torch.tensor(math.log(2.0)),
        )
        assert torch.allclose(mu_p, torch.tensor([2.0, 4.0, 6.0]), atol=1e-6)
        assert torch.allclose(s_p, torch.tensor([1.0, 1.0, 1.0]), atol=1e-6)

    def test_derivative_wrt_f_matches_finite_differences(self):
        mu = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
        s = torch.tensor([0.4, 0.2, 0.1], dtype=torch.float64)
        f0 = 0.37
        h = 1e-6
        up, _ = apply_ffg(mu, s, torch.tensor(f0 + h, dtype=torch.float64))
        dn, _ = apply_ffg(mu, s, torch.tensor(f0 - h, dtype=torch.float64))
        fd = (up - dn) / (2 * h)
        analytic = math.exp(f0) * mu  # d(e^f mu)/df = e^f mu
        assert float(((fd - analytic).abs() / analytic.abs()).max()) < 1e-6

    def test_composition(self):
        mu = torch.randn(8, 3, dtype=torch.float64)
        s = torch.rand(8, 3, dtype=torch.float64) + 0.1
        f1 = torch.randn(8, dtype=torch.float64) * 0.5
        f2 = torch.randn(8, dtype=torch.float64) * 0.5
        a_mu, a_s = apply_ffg(*apply_ffg(mu, s, f1), f2)
        b_mu, b_s = apply_ffg(mu, s, f1 + f2)
        assert torch.allclose(a_mu, b_mu, atol=1e-12)
        assert torch.allclose(a_s, b_s, atol=1e-12)

    def test_factor_magnitude_limit(self):
        mu = torch.zeros(1, 3)
        s = torch.ones(1, 3)
        with pytest.raises(ValueError):
            apply_ffg(mu, s, torch.tensor([12.5]))
        with pytest.raises(ValueError):
            apply_ffg(mu, s, torch.tensor([-13.0]))
        with pytest.raises(ValueError):
            apply_ffg(mu, s, torch.tensor([float("nan")]))


class TestFfgBackward:
    def test_zero_gradients_stay_zero(self):
        mu_p = torch.randn(4, 3)
        s_p = torch.rand(4, 3)
        g_mu, g_s, g_f = ffg_backward(
            torch.zeros(4, 3), torch.zeros(4, 3), mu_p, s_p, torch.randn(4)
        )
        assert torch.equal(g_mu, torch.zeros(4, 3))
        assert torch.equal(g_s, torch.zeros(4, 3))
        assert torch.equal(g_f, torch.zeros(4))

    def test_f_zero_passthrough(self):
        g_mu_p = torch.randn(4, 3, dtype=torch.float64)
        g_s_p = torch.randn(4, 3, dtype=torch.float64)
        mu_p = torch.randn(4, 3, dtype=torch.float64)
        s_p = torch.rand(4, 3, dtype=torch.float64)
        g_mu, g_s, g_f = ffg_backward(g_mu_p, g_s_p, mu_p, s_p, torch.zeros(4, dtype=torch.float64))
        assert torch.equal(g_mu, g_mu_p)
        assert torch.equal(g_s, g_s_p)
        assert torch.allclose(g_f, (g_mu_p * mu_p).sum(-1) + (g_s_p * s_p).sum(-1))

    def test_matches_finite_differences(self):
        torch.manual_seed(0)
        mu = torch.randn(6, 3, dtype=torch.float64)
        s = torch.rand(6, 3, dtype=torch.float64) + 0.2
        f = torch.randn(6, dtype=torch.float64) * 0.8
        w_mu = torch.randn(6, 3, dtype=torch.float64)
        w_s = torch.randn(6, 3, dtype=torch.float64)

        def loss(mu_, s_, f_):
            mu_p, s_p = apply_ffg(mu_, s_, f_)
            return float((w_mu * mu_p).sum() + (w_s * s_p).sum())

        mu_p, s_p = apply_ffg(mu, s, f)
        g_mu, g_s, g_f = ffg_backward(w_mu, w_s, mu_p, s_p, f)

        h = 1e-6
        for i in range(6):
            fp = f.clone()
            fp[i] += h
            fm = f.clone()
            fm[i] -= h
            fd = (loss(mu, s, fp) - loss(mu, s, fm)) / (2 * h)
            assert abs(fd - float(g_f[i])) / max(abs(fd), 1e-9) < 1e-5
        for i, j in [(0, 0), (2, 1), (5, 2)]:
            mp = mu.clone()
            mp[i, j] += h
            mm = mu.clone()
            mm[i, j] -= h
            fd = (loss(mp, s, f) - loss(mm, s, f)) / (2 * h)
            assert abs(fd - float(g_mu[i, j])) / max(abs(fd), 1e-9) < 1e-5
            sp = s.clone()
            sp[i, j] += h
            sm = s.clone()
            sm[i, j] -= h
            fd = (loss(mu, sp, f) - loss(mu, sm, f)) / (2 * h)
            assert abs(fd - float(g_s[i, j])) / max(abs(fd), 1e-9) < 1e-5

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ffg_backward(
                torch.zeros(3, 3),
                torch.zeros(4, 3),
                torch.zeros(4, 3),
                torch.zeros(4, 3),
                torch.zeros(4),
            )

    def test_autograd_function_gradcheck(self):
        torch.manual_seed(1)
        mu = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
        s = torch.rand(5, 3, dtype=torch.float64, requires_grad=True) + 0.1
        s.retain_grad()
        f = (torch.randn(5, dtype=torch.float64) * 0.5).requires_grad_(True)
        assert torch.autograd.gradcheck(apply_ffg_autograd, (mu, s, f), atol=1e-8)


class TestAngularInvariance:
    def test_projection_invariant_about_anchor(self):
        # With the camera at the node anchor, scaling depth by e^f leaves
        # mean2d and cov2d untouched and multiplies depth by e^f.
        pose = np.eye(4)
        pose[:3, :3] = np.array(
            [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]
        ).T  # columns: right, down, forward (world +x)
        cam = CameraView(
            fx=100.0, fy=100.0, cx=32.0, cy=32.0, pose=pose, width=64, height=64
        )
        rng = np.random.default_rng(7)
        checked = 0
        for _ in range(200):
            if checked >= 100:
                break
            direction = rng.normal(size=3)
            direction[0] = abs(direction[0]) + 2.0  # bias toward the camera axis
            direction /= np.linalg.norm(direction)
            dist = rng.uniform(5.0, 60.0)
            prim = GaussianPrimitive(
                position=direction * dist,
                log_scales=rng.uniform(-2.0, 0.5, 3),
                rotation=rng.normal(size=4),
                opacity_logit=0.0,
                color_sh=np.zeros((3, 1)),
                uncert_sh=np.zeros(4),
            )
            base = project(prim, cam)
            if base is None:
                continue
            f = rng.uniform(-1.5, 1.5)
            moved = GaussianPrimitive(
                position=prim.position * math.exp(f),
                log_scales=prim.log_scales + f,
                rotation=prim.rotation,
                opacity_logit=0.0,
                color_sh=np.zeros((3, 1)),
                uncert_sh=np.zeros(4),
            )
            out = project(moved, cam)
            assert out is not None
            assert np.abs(out.mean2d - base.mean2d).max() < 1e-9
            assert np.abs(out.cov2d - base.cov2d).max() < 1e-9
            assert abs(out.depth - base.depth * math.exp(f)) < 1e-9 * base.depth
            assert np.abs(out.view_dir - base.view_dir).max() < 1e-12
            checked += 1
        assert checked >= 100
