import numpy as np
import pytest
import torch

from facmap.field import Decoder, FactorizedGrid, SceneBounds
from facmap.geometry import Pose, Ray, CameraIntrinsics
from facmap.render import (
    composite_weights,
    render_color,
    render_depth,
    render_ray,
    render_rays,
    render_view,
)
from facmap.sampler import RaySamples
from oracles import composite_weights_loop, finite_difference, relative_gradient_error


def t64(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class TestCompositeWeights:
    def test_opaque_first_sample(self):
        w = composite_weights(t64([1.0, 0.7, 0.2]))
        assert torch.allclose(w, t64([1.0, 0.0, 0.0]))

    def test_empty_space(self):
        w = composite_weights(t64([0.0, 0.0, 0.0]))
        assert torch.all(w == 0)

    def test_half_occupancy(self):
        w = composite_weights(t64([0.5, 0.5]))
        assert torch.allclose(w, t64([0.5, 0.25]))

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError):
            composite_weights(t64([0.5, 0.5]), t=t64([2.0, 1.0]))

    def test_matches_loop_oracle(self, rng):
        for _ in range(20):
            occ = rng.uniform(0, 1, size=rng.integers(1, 20))
            got = composite_weights(t64(occ)).numpy()
            assert np.allclose(got, composite_weights_loop(occ), atol=1e-12)

    def test_partition_of_unity(self, rng):
        occ = t64(rng.uniform(0, 1, size=(50, 16)))
        w = composite_weights(occ)
        trans_final = torch.prod(1 - occ, dim=-1)
        total = w.sum(dim=-1) + trans_final
        assert torch.allclose(total, torch.ones_like(total), atol=1e-6)
        assert torch.all(w >= 0) and torch.all(w <= 1)

    def test_transmittance_monotone(self, rng):
        occ = t64(rng.uniform(0, 1, size=(20, 12)))
        trans = torch.cumprod(1 - occ, dim=-1)
        assert torch.all(trans[:, 1:] <= trans[:, :-1] + 1e-12)


class TestRenderColorDepth:
    def test_first_sample_wins(self):
        c = render_color(t64([1.0, 0.0]), t64([[1, 0, 0], [0, 1, 0]]))
        assert torch.allclose(c, t64([1, 0, 0]))

    def test_weighted_average(self):
        c = render_color(t64([0.5, 0.5]), t64([[1, 0, 0], [0, 0, 1]]))
        assert torch.allclose(c, t64([0.5, 0, 0.5]))

    def test_zero_weights_black(self):
        c = render_color(t64([0.0, 0.0]), t64([[1, 0, 0], [0, 1, 0]]))
        assert torch.all(c == 0)

    def test_depth_examples(self):
        d, low = render_depth(t64([1.0, 0.0, 0.0]), t64([2.0, 3.0, 4.0]))
        assert d.item() == pytest.approx(2.0)
        assert not bool(low)

        d, low = render_depth(t64([0.25] * 4), t64([1.0, 2.0, 3.0, 4.0]))
        assert d.item() == pytest.approx(2.5)

        d, low = render_depth(t64([0.0, 0.0]), t64([1.0, 2.0]))
        assert d.item() == 0.0
        assert bool(low)


def constant_occupancy_grid(raw_value, bounds, rng, res=6):
    """Grid whose raw density is raw_value everywhere (single channel pair)."""
    grid = FactorizedGrid(bounds, res=res, density_channels=1, appearance_channels=2, rng=rng, dtype=torch.float64)
    with torch.no_grad():
        grid.density_planes.fill_(1.0)
        grid.density_lines.fill_(raw_value / 3.0)
    return grid


class TestRenderRay:
    def setup_method(self):
        self.rng = np.random.default_rng(7)
        self.bounds = SceneBounds(np.zeros(3), np.array([4.0, 4.0, 4.0]))

    def _decoder(self, constant=None):
        dec = Decoder(feature_dim=6, hidden=4, rng=self.rng, dtype=torch.float64)
        if constant is not None:
            with torch.no_grad():
                for p in dec.parameters():
                    p.zero_()
                dec.b2.copy_(torch.logit(torch.tensor(constant, dtype=torch.float64)))
        return dec

    def test_empty_samples_rejected(self, rng):
        grid = constant_occupancy_grid(0.0, self.bounds, rng)
        ray = Ray(np.array([2.0, 2.0, 0.1]), np.array([0.0, 0.0, 1.0]))
        with pytest.raises(ValueError):
            render_rays(
                grid, self._decoder(), torch.zeros(1, 3, dtype=torch.float64),
                torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64),
                torch.zeros(1, 0, dtype=torch.float64),
            )
        _ = ray

    def test_step_field_depth(self):
        # wall: saturated occupancy for z >= 2, nearly empty before
        grid = FactorizedGrid(self.bounds, res=9, density_channels=1, appearance_channels=2, rng=self.rng, dtype=torch.float64)
        with torch.no_grad():
            grid.density_planes.zero_()
            grid.density_lines.zero_()
            grid.density_planes[2].fill_(1.0)  # XY plane factor
            line = torch.full((9,), -30.0, dtype=torch.float64)
            line[(np.arange(9) * 4.0 / 8) >= 2.0] = 30.0
            grid.density_lines[2, :, 0] = line
        ray = Ray(np.array([2.0, 2.0, 0.0]), np.array([0.0, 0.0, 1.0]))
        samples = RaySamples(np.linspace(0.05, 3.95, 40), 0.0, 4.0)
        out = render_ray(grid, self._decoder(), ray, samples)
        spacing = 3.9 / 39
        assert abs(out.depth - 2.0) <= spacing + 0.51 * (4.0 / 8)
        assert out.opacity > 0.99

    def test_empty_field_low_opacity(self):
        grid = constant_occupancy_grid(-30.0, self.bounds, self.rng)
        ray = Ray(np.array([2.0, 2.0, 0.1]), np.array([0.0, 0.0, 1.0]))
        samples = RaySamples(np.linspace(0.1, 3.9, 24), 0.0, 4.0)
        out = render_ray(grid, self._decoder(), ray, samples)
        assert out.opacity < 0.05
        assert out.low_confidence

    def test_constant_color_scaled_by_opacity(self):
        grid = constant_occupancy_grid(0.4, self.bounds, self.rng)
        dec = self._decoder(constant=0.75)
        ray = Ray(np.array([2.0, 2.0, 0.1]), np.array([0.0, 0.0, 1.0]))
        samples = RaySamples(np.linspace(0.1, 3.9, 16), 0.0, 4.0)
        out = render_ray(grid, dec, ray, samples)
        assert np.allclose(out.color, 0.75 * out.opacity, atol=1e-9)

    def test_zero_occupancy_insertion_invariance(self):
        grid = constant_occupancy_grid(0.5, self.bounds, self.rng)
        dec = self._decoder()
        o = torch.tensor([[2.0, 2.0, 0.1]], dtype=torch.float64)
        d = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        t = t64([[0.5, 1.0, 2.0, 3.0]])
        base = render_rays(grid, dec, o, d, t)
        t_aug = t64([[0.5, 1.0, 1.5, 2.0, 3.0]])
        mask = torch.tensor([[True, True, False, True, True]])
        aug = render_rays(grid, dec, o, d, t_aug, mask)
        assert torch.allclose(base.color, aug.color, atol=1e-9)
        assert torch.allclose(base.depth, aug.depth, atol=1e-9)

    def test_unsorted_samples_rejected(self):
        grid = constant_occupancy_grid(0.5, self.bounds, self.rng)
        with pytest.raises(ValueError):
            render_rays(
                grid, self._decoder(),
                torch.zeros(1, 3, dtype=torch.float64),
                torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64),
                t64([[2.0, 1.0]]),
            )

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        bounds = SceneBounds(np.zeros(3), np.ones(3) * 2.0)
        grid = FactorizedGrid(bounds, res=4, density_channels=2, appearance_channels=2, rng=rng, dtype=torch.float64)
        dec = Decoder(feature_dim=6, hidden=4, rng=rng, dtype=torch.float64)
        o = torch.tensor([[1.0, 1.0, 0.11]], dtype=torch.float64)
        d = torch.tensor([[0.05, -0.03, 1.0]], dtype=torch.float64)
        d = d / d.norm()
        t = t64([np.linspace(0.13, 1.71, 9)])
        target = t64([[0.2, 0.7, 0.4]])

        def loss_fn():
            out = render_rays(grid, dec, o, d, t)
            return ((out.color - target) ** 2).sum() + 0.3 * out.depth.sum()

        params = list(grid.parameters()) + list(dec.parameters())
        analytic = torch.autograd.grad(loss_fn(), params)
        numeric = finite_difference(loss_fn, params, h=1e-4)
        assert relative_gradient_error(analytic, numeric) < 1e-4

    def test_alpha_mode_runs(self):
        grid = constant_occupancy_grid(2.0, self.bounds, self.rng)
        dec = self._decoder()
        o = torch.tensor([[2.0, 2.0, 0.1]], dtype=torch.float64)
        d = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        t = t64([np.linspace(0.2, 3.8, 12)])
        out = render_rays(grid, dec, o, d, t, mode="alpha")
        assert 0 < float(out.opacity) <= 1 + 1e-6
        with pytest.raises(ValueError):
            render_rays(grid, dec, o, d, t, mode="nonsense")


class TestRenderView:
    def test_deterministic_and_shaped(self, rng):
        bounds = SceneBounds(np.zeros(3), np.ones(3) * 2.0)
        grid = FactorizedGrid(bounds, res=6, density_channels=2, appearance_channels=2, rng=rng)
        dec = Decoder(feature_dim=6, hidden=4, rng=rng)
        intr = CameraIntrinsics(20.0, 20.0, 8.0, 6.0, 16, 12)
        pose = Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.array([1.0, 1.0, 0.2]))
        v1 = render_view(grid, dec, pose, intr, coarse_samples=8, fine_samples=8)
        v2 = render_view(grid, dec, pose, intr, coarse_samples=8, fine_samples=8)
        assert v1.color_image().shape == (12, 16, 3)
        assert np.array_equal(v1.color, v2.color)
        assert np.array_equal(v1.depth, v2.depth)

    def test_stride(self, rng):
        bounds = SceneBounds(np.zeros(3), np.ones(3) * 2.0)
        grid = FactorizedGrid(bounds, res=6, density_channels=2, appearance_channels=2, rng=rng)
        dec = Decoder(feature_dim=6, hidden=4, rng=rng)
        intr = CameraIntrinsics(20.0, 20.0, 8.0, 6.0, 16, 12)
        pose = Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.array([1.0, 1.0, 0.2]))
        v = render_view(grid, dec, pose, intr, pixel_stride=4, coarse_samples=4, fine_samples=4)
        assert v.color_image().shape == (3, 4, 3)
