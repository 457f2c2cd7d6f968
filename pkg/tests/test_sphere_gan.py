import math

import numpy as np
import pytest
import torch

from imml.core import as_tensor, grad_check, make_rng
from imml.sphere_gan import (DegenerateProjectionError, GeneratorHead, SphereDiscriminator,
                             batch_sigma, center_loss, d_loss, decompose, distance_loss, g_loss,
                             huber, project_to_sphere, score_batch, sphere_scores)

LN4 = 2 * math.log(2)


class TestProjection:
    def test_three_four_five(self):
        p = project_to_sphere(as_tensor([3.0, 4.0]), as_tensor([0.0, 0.0]))
        assert p.tolist() == pytest.approx([0.6, 0.8], abs=1e-15)

    def test_unit_offset_is_returned(self, rng):
        u = rng.normal(size=5)
        u /= np.linalg.norm(u)
        c = rng.normal(size=5)
        p = project_to_sphere(torch.from_numpy(c + u), torch.from_numpy(c))
        assert np.allclose(p.numpy(), u, atol=1e-12)

    def test_subtract_then_normalise(self):
        p = project_to_sphere(as_tensor([1.0, 1.0]), as_tensor([1.0, 0.0]))
        assert p.tolist() == [0.0, 1.0]

    def test_degenerate(self):
        with pytest.raises(DegenerateProjectionError):
            project_to_sphere(as_tensor([1.0, 1.0]), as_tensor([1.0, 1.0 + 1e-9]))

    def test_unit_norm_random(self, rng):
        for scale in (1e-6, 1.0, 1e6):
            h = torch.from_numpy(rng.normal(size=(50, 6)) * scale)
            p = project_to_sphere(h, torch.zeros(6))
            assert (p.norm(dim=1) - 1).abs().max() <= 1e-9


class TestSigma:
    def test_mean_of_norms(self):
        assert batch_sigma(as_tensor([[3.0, 4.0], [0.0, 5.0]])).item() == 5.0

    def test_zero_row(self):
        assert batch_sigma(as_tensor([[0.0, 0.0]])).item() == 0.0

    def test_unit_rows(self, rng):
        v = rng.normal(size=(7, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        assert batch_sigma(torch.from_numpy(v)).item() == pytest.approx(1.0, abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            batch_sigma(torch.zeros(0, 3))


class TestScores:
    def test_hand_example(self):
        proj = as_tensor([[0.6, 0.8], [0.8, 0.6]])
        sb = sphere_scores(proj, as_tensor([1.0, 0.0]))
        assert sb.sigma_parallel.item() == pytest.approx(0.7, abs=1e-12)
        assert sb.sigma_perp.item() == pytest.approx(0.7, abs=1e-12)
        expected = [(0.8 - 0.6) / 0.7, (0.6 - 0.8) / 0.7]
        assert sb.scores.tolist() == pytest.approx(expected, abs=1e-9)

    def test_axis_orthogonal_batch_is_finite(self):
        proj = as_tensor([[0.0, 1.0], [0.0, -1.0], [0.0, 1.0]])
        sb = sphere_scores(proj, as_tensor([1.0, 0.0]))
        assert sb.sigma_parallel.item() == 0.0
        assert torch.isfinite(sb.scores).all()
        assert sb.scores.tolist() == [1.0, 1.0, 1.0]

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            sphere_scores(as_tensor([[1.0, 0.0]]), as_tensor([1.0, 0.0]))

    def test_decomposition_identity(self, rng):
        for _ in range(20):
            p = torch.from_numpy(rng.normal(size=(8, 5)))
            v = torch.from_numpy(rng.normal(size=5))
            par, perp = decompose(p, v)
            assert (par + perp - p).abs().max() <= 1e-9
            assert (par * perp).sum(-1).abs().max() <= 1e-9

    def test_radial_invariance(self, rng):
        disc = SphereDiscriminator(6, 3)
        disc.reset_parameters(make_rng(0, "d"))
        e = torch.from_numpy(rng.normal(size=(10, 3)))
        c = disc.center.detach()
        base = sphere_scores(project_to_sphere(c + e, c), disc.axis).scores
        for lam in (0.01, 3.0, 1e4):
            scaled = sphere_scores(project_to_sphere(c + lam * e, c), disc.axis).scores
            assert torch.allclose(base, scaled, atol=1e-9, rtol=0)

    def test_score_batch_shapes(self, rng):
        disc = SphereDiscriminator(6, 3)
        disc.reset_parameters(make_rng(0, "d"))
        sb = score_batch(torch.from_numpy(rng.normal(size=(9, 6))), disc)
        assert sb.scores.shape == (9,)
        assert (sb.projections.norm(dim=1) - 1).abs().max() <= 1e-9

    def test_sphere_dim_must_be_smaller(self):
        with pytest.raises(ValueError):
            SphereDiscriminator(4, 4)


class TestAdversarialLosses:
    @pytest.mark.parametrize("value", [-3.0, 0.0, 0.7])
    def test_equal_scores(self, value):
        s = torch.full((5,), value)
        assert d_loss(s, s, 1.0).item() == pytest.approx(LN4, abs=1e-12)
        assert g_loss(s, s, 1.0).item() == pytest.approx(LN4, abs=1e-12)

    def test_saturation(self):
        real, fake = torch.full((4,), 50.0), torch.full((4,), -50.0)
        assert d_loss(real, fake, 1.0).item() < 1e-20
        # log argument clamped at 1e-12: each of the two terms saturates at ln(1e12)
        assert g_loss(real, fake, 1.0).item() == pytest.approx(2 * math.log(1e12), rel=1e-12)
        assert g_loss(fake, real, 1.0).item() < 1e-20

    def test_eta_zero(self, rng):
        r, f = torch.from_numpy(rng.normal(size=6)), torch.from_numpy(rng.normal(size=4))
        assert d_loss(r, f, 0.0).item() == pytest.approx(LN4, abs=1e-12)

    def test_role_swap(self, rng):
        for _ in range(10):
            r, f = torch.from_numpy(rng.normal(size=6)), torch.from_numpy(rng.normal(size=6))
            assert g_loss(r, f, 1.3).item() == d_loss(f, r, 1.3).item()

    def test_permutation_invariance(self, rng):
        r, f = torch.from_numpy(rng.normal(size=8)), torch.from_numpy(rng.normal(size=8))
        pr, pf = torch.from_numpy(rng.permutation(8)), torch.from_numpy(rng.permutation(8))
        assert d_loss(r, f).item() == pytest.approx(d_loss(r[pr], f[pf]).item(), abs=1e-12)
        assert g_loss(r, f).item() == pytest.approx(g_loss(r[pr], f[pf]).item(), abs=1e-12)

    def test_monotone_in_scores(self, rng):
        r, f = torch.from_numpy(rng.normal(size=5)), torch.from_numpy(rng.normal(size=5))
        base = d_loss(r, f).item()
        for i in range(5):
            r2 = r.clone()
            r2[i] += 0.1
            assert d_loss(r2, f).item() < base
            f2 = f.clone()
            f2[i] += 0.1
            assert d_loss(r, f2).item() > base

    def test_empty(self):
        with pytest.raises(ValueError):
            d_loss(torch.zeros(0), torch.zeros(3))


class TestHuber:
    def test_values(self):
        assert huber(0.5) == 0.125
        assert huber(1.0) == 0.5
        assert huber(2.0) == 1.5

    def test_tensor_branches_agree_at_one(self):
        assert huber(torch.tensor(1.0)).item() == 0.5
        assert huber(torch.tensor(1.0 + 1e-12)).item() == pytest.approx(0.5, abs=1e-11)


class TestSphereLosses:
    def test_center_all_at_center(self):
        c = as_tensor([1.0, -2.0])
        assert center_loss(c.expand(4, 2), c).item() == 0.0

    def test_center_single(self):
        assert center_loss(as_tensor([[2.0, 0.0]]), as_tensor([0.0, 0.0])).item() == 1.5

    def test_center_mean(self):
        h = as_tensor([[0.5, 0.0], [0.0, 2.0]])
        assert center_loss(h, torch.zeros(2)).item() == pytest.approx(0.8125, abs=1e-15)

    def test_distance_common_sphere(self, rng):
        u = rng.normal(size=(6, 4))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        c = rng.normal(size=4)
        h = torch.from_numpy(c + 2.5 * u)
        assert distance_loss(h, torch.from_numpy(c)).item() == pytest.approx(0.0, abs=1e-12)

    def test_distance_example(self):
        h = as_tensor([[1.0, 0.0], [0.0, 3.0]])
        assert distance_loss(h, torch.zeros(2)).item() == pytest.approx(0.5, abs=1e-15)

    def test_distance_rotation_invariant(self, rng):
        h = torch.from_numpy(rng.normal(size=(7, 3)))
        c = torch.from_numpy(rng.normal(size=3))
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        rotated = c + (h - c) @ torch.from_numpy(q).T
        assert distance_loss(h, c).item() == pytest.approx(distance_loss(rotated, c).item(), abs=1e-12)


class TestGradients:
    """Autodiff against central differences, kept away from kinks and guards."""

    def _far_from_kinks(self, h, c):
        d = np.linalg.norm(h - c, axis=1)
        dev = np.abs(d - d.mean())
        return (np.abs(d - 1) > 1e-3).all() and (np.abs(dev - 1) > 1e-3).all() and (dev > 1e-3).all()

    def test_sphere_losses_wrt_embeddings_and_center(self):
        rng = make_rng(3, "grad")
        for _ in range(20):
            h, c = rng.normal(size=(6, 4)) * 1.5, rng.normal(size=4)
            if not self._far_from_kinks(h, c):
                continue
            ct, ht = torch.from_numpy(c), torch.from_numpy(h)
            assert grad_check(lambda x: center_loss(x, ct), h) < 1e-5
            assert grad_check(lambda x: distance_loss(x, ct), h) < 1e-5
            assert grad_check(lambda x: center_loss(ht, x), c) < 1e-5
            assert grad_check(lambda x: distance_loss(ht, x), c) < 1e-5

    def test_scores_wrt_embeddings_center_axis(self):
        rng = make_rng(4, "grad")
        for _ in range(20):
            e, c, v = rng.normal(size=(5, 3)), rng.normal(size=3), rng.normal(size=3)
            et, ct, vt = (torch.from_numpy(a) for a in (e, c, v))
            score = lambda ee, cc, vv: sphere_scores(project_to_sphere(ee, cc), vv).scores
            w = torch.from_numpy(rng.normal(size=5))
            assert grad_check(lambda x: (score(x, ct, vt) * w).sum(), e) < 1e-5
            assert grad_check(lambda x: (score(et, x, vt) * w).sum(), c) < 1e-5
            assert grad_check(lambda x: (score(et, ct, x) * w).sum(), v) < 1e-5

    def test_adversarial_losses_wrt_scores(self):
        rng = make_rng(5, "grad")
        for _ in range(20):
            r, f = rng.normal(size=6), rng.normal(size=6)
            rt, ft = torch.from_numpy(r), torch.from_numpy(f)
            assert grad_check(lambda x: d_loss(x, ft, 1.0), r) < 1e-5
            assert grad_check(lambda x: d_loss(rt, x, 1.0), f) < 1e-5
            assert grad_check(lambda x: g_loss(rt, x, 1.0), f) < 1e-5


def test_generator_head_shape(rng):
    g = GeneratorHead(5, 7)
    g.reset_parameters(make_rng(0, "g"))
    assert g(torch.from_numpy(rng.normal(size=(3, 5)))).shape == (3, 7)
