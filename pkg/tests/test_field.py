import numpy as np
import pytest
import torch

from facmap.field import (
    Decoder,
    FactorizedGrid,
    SceneBounds,
    decode_color,
    flops_per_point,
    load_checkpoint,
    normalize_coord,
    occupancy,
    param_count,
    query_appearance,
    query_density,
    save_checkpoint,
)
from oracles import (
    dense_axis_tensor,
    dense_factor_tensor,
    finite_difference,
    relative_gradient_error,
    trilinear,
)


def make_grid(rng, res=8, cd=3, ca=4, dtype=torch.float64):
    bounds = SceneBounds(np.array([-1.0, 0.0, 2.0]), np.array([1.0, 3.0, 5.0]))
    return FactorizedGrid(bounds, res=res, density_channels=cd, appearance_channels=ca, rng=rng, dtype=dtype)


class TestNormalizeCoord:
    def test_corners_and_midpoint(self, unit_bounds):
        bounds = SceneBounds(np.array([1.0, 2.0, 3.0]), np.array([3.0, 6.0, 11.0]))
        assert np.allclose(normalize_coord(bounds, bounds.min), [0, 0, 0])
        assert np.allclose(normalize_coord(bounds, bounds.max), [1, 1, 1])
        mid = 0.5 * (bounds.min + bounds.max)
        assert np.allclose(normalize_coord(bounds, mid), [0.5, 0.5, 0.5])

    def test_clamped(self):
        bounds = SceneBounds(np.zeros(3), np.ones(3))
        assert np.allclose(normalize_coord(bounds, [-5.0, 0.5, 9.0]), [0, 0.5, 1])


class TestQueries:
    def test_zero_grid_gives_zero(self, rng):
        grid = make_grid(rng)
        with torch.no_grad():
            for p in grid.parameters():
                p.zero_()
        pts = torch.tensor([[0.0, 1.0, 3.0], [0.5, 2.0, 4.0]], dtype=torch.float64)
        assert torch.all(query_density(grid, pts) == 0)
        assert torch.all(query_appearance(grid, pts) == 0)

    def test_constant_factors_closed_form(self, rng):
        # every plane and line entry 1 -> per-axis product 1 per channel,
        # density sums to 3 * C
        grid = make_grid(rng, cd=16, ca=4)
        with torch.no_grad():
            for p in grid.parameters():
                p.fill_(1.0)
        pts = torch.tensor([[0.3, 1.7, 4.1]], dtype=torch.float64)
        assert query_density(grid, pts).item() == pytest.approx(3 * 16, rel=1e-12)
        assert torch.allclose(query_appearance(grid, pts), torch.ones(1, 12, dtype=torch.float64))

    @pytest.mark.parametrize("res", [4, 8, 16])
    def test_matches_dense_tensor_oracle(self, rng, res):
        grid = make_grid(rng, res=res)
        dense_d = dense_factor_tensor(grid.density_planes, grid.density_lines)
        dense_axes = [
            dense_axis_tensor(grid.appearance_planes, grid.appearance_lines, a) for a in range(3)
        ]
        pts = np.stack(
            [
                rng.uniform(grid.bounds.min[a], grid.bounds.max[a], size=100)
                for a in range(3)
            ],
            axis=-1,
        )
        got_d = query_density(grid, torch.as_tensor(pts)).detach().numpy()
        got_a = query_appearance(grid, torch.as_tensor(pts)).detach().numpy()
        ca = grid.appearance_channels
        for i, p in enumerate(pts):
            coord = (p - grid.bounds.min) / grid.bounds.extent * (res - 1)
            want_d = trilinear(dense_d, coord).sum()
            scale = max(abs(want_d), 1e-6)
            assert abs(got_d[i] - want_d) / scale < 1e-5
            for a in range(3):
                want = trilinear(dense_axes[a], coord)
                got = got_a[i, a * ca : (a + 1) * ca]
                assert np.allclose(got, want, rtol=1e-5, atol=1e-9)

    def test_non_finite_rejected(self, rng):
        grid = make_grid(rng)
        with pytest.raises(ValueError):
            query_density(grid, torch.tensor([[np.nan, 0.0, 3.0]], dtype=torch.float64))

    def test_locality(self, rng):
        # a plane entry outside the bilinear footprint must not affect the value
        grid = make_grid(rng)
        pt = torch.tensor([[-0.9, 0.2, 2.2]], dtype=torch.float64)  # low corner region
        before = query_density(grid, pt).item()
        with torch.no_grad():
            grid.density_planes[0, -1, -1, :] += 100.0
            grid.appearance_planes[1, -1, -1, :] -= 50.0
        assert query_density(grid, pt).item() == before

    def test_out_of_box_clamped_and_detached(self, rng):
        grid = make_grid(rng)
        outside = torch.tensor([[-2.0, -1.0, 1.0]], dtype=torch.float64)
        corner = torch.tensor([grid.bounds.min], dtype=torch.float64)
        assert query_density(grid, outside).item() == pytest.approx(
            query_density(grid, corner).item()
        )
        # flagged points contribute no gradient to the grid
        loss = query_density(grid, outside).sum()
        grads = torch.autograd.grad(loss, grid.density_planes, allow_unused=True)[0]
        assert grads is None or torch.all(grads == 0)


class TestGradients:
    def test_density_gradient_matches_finite_differences(self, rng):
        grid = make_grid(rng, res=4, cd=2, ca=2)
        pts = torch.as_tensor(
            np.stack(
                [rng.uniform(grid.bounds.min[a] + 0.05, grid.bounds.max[a] - 0.05, size=5) for a in range(3)],
                axis=-1,
            )
        )
        coeff = torch.as_tensor(rng.normal(size=5))

        def loss_fn():
            return (query_density(grid, pts) * coeff).sum()

        loss = loss_fn()
        params = [grid.density_planes, grid.density_lines]
        analytic = torch.autograd.grad(loss, params)
        numeric = finite_difference(loss_fn, params, h=1e-4)
        assert relative_gradient_error(analytic, numeric) < 1e-4


class TestOccupancy:
    def test_known_values(self):
        assert occupancy(0.0) == pytest.approx(0.5)
        assert occupancy(2.0) == pytest.approx(0.8808, abs=1e-4)
        assert occupancy(40.0) == pytest.approx(1.0, abs=1e-12)
        assert occupancy(-40.0) == pytest.approx(0.0, abs=1e-12)

    def test_monotone(self):
        xs = np.linspace(-5, 5, 100)
        ys = occupancy(xs)
        assert np.all(np.diff(ys) > 0)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            occupancy(float("nan"))


class TestDecoder:
    def test_zero_weights_give_half(self, rng):
        dec = Decoder(feature_dim=6, hidden=4, rng=rng, dtype=torch.float64)
        with torch.no_grad():
            for p in dec.parameters():
                p.zero_()
        feat = torch.zeros(2, 6, dtype=torch.float64)
        d = torch.tensor([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]], dtype=torch.float64)
        out = decode_color(dec, feat, d)
        assert torch.allclose(out, torch.full((2, 3), 0.5, dtype=torch.float64))

    def test_large_bias_saturates(self, rng):
        dec = Decoder(feature_dim=6, hidden=4, rng=rng, dtype=torch.float64)
        with torch.no_grad():
            for p in dec.parameters():
                p.zero_()
            dec.b2.fill_(50.0)
        out = decode_color(dec, torch.zeros(1, 6, dtype=torch.float64), torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64))
        assert torch.all(out > 1 - 1e-9)

    def test_matches_numpy_oracle(self, rng):
        from oracles import numpy_decoder

        dec = Decoder(feature_dim=6, hidden=5, rng=rng, dtype=torch.float64)
        feat = rng.normal(size=6)
        d = rng.normal(size=3)
        d = d / np.linalg.norm(d)
        got = decode_color(
            dec, torch.as_tensor(feat).unsqueeze(0), torch.as_tensor(d).unsqueeze(0)
        )[0].detach().numpy()
        want = numpy_decoder(
            feat, d,
            dec.w1.detach().numpy(), dec.b1.detach().numpy(),
            dec.w2.detach().numpy(), dec.b2.detach().numpy(),
        )
        assert np.allclose(got, want, atol=1e-12)

    def test_unnormalized_direction_rejected(self, rng):
        dec = Decoder(feature_dim=6, hidden=4, rng=rng, dtype=torch.float64)
        with pytest.raises(ValueError):
            decode_color(dec, torch.zeros(1, 6, dtype=torch.float64), torch.tensor([[1.0, 1.0, 0.0]], dtype=torch.float64))


class TestSizeReports:
    def test_hand_counted_tiny_grid(self, rng):
        bounds = SceneBounds(np.zeros(3), np.ones(3))
        grid = FactorizedGrid(bounds, res=2, density_channels=1, appearance_channels=1, rng=rng)
        # planes: 3 * 2*2 * 1 = 12, lines: 3 * 2 * 1 = 6; twice for the two components
        assert param_count(grid) == 36

    def test_doubling_res_scaling(self, rng):
        bounds = SceneBounds(np.zeros(3), np.ones(3))
        g1 = FactorizedGrid(bounds, res=16, density_channels=2, appearance_channels=2, rng=rng)
        g2 = FactorizedGrid(bounds, res=32, density_channels=2, appearance_channels=2, rng=rng)
        planes1 = sum(p.numel() for p in (g1.density_planes, g1.appearance_planes))
        planes2 = sum(p.numel() for p in (g2.density_planes, g2.appearance_planes))
        lines1 = sum(p.numel() for p in (g1.density_lines, g1.appearance_lines))
        lines2 = sum(p.numel() for p in (g2.density_lines, g2.appearance_lines))
        assert planes2 == 4 * planes1
        assert lines2 == 2 * lines1

    def test_default_config_count(self):
        bounds = SceneBounds(np.zeros(3), np.ones(3))
        grid = FactorizedGrid(bounds)
        dec = Decoder(feature_dim=grid.feature_dim)
        # 3*128^2*(16+24) + 3*128*(16+24) + decoder (75*48+48 + 48*3+3)
        assert param_count(grid, dec) == 1_985_235

    def test_flops_positive_and_documented_shape(self):
        bounds = SceneBounds(np.zeros(3), np.ones(3))
        grid = FactorizedGrid(bounds)
        dec = Decoder(feature_dim=grid.feature_dim)
        flops = flops_per_point(grid, dec)
        macs = 3 * 7 * (16 + 24) + 75 * 48 + 48 * 3
        assert flops == 2 * macs + 48 + 12


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        grid = make_grid(rng, dtype=torch.float32)
        dec = Decoder(feature_dim=grid.feature_dim, hidden=6, rng=rng)
        path = tmp_path / "map.ckpt"
        save_checkpoint(path, grid, dec)
        g2, d2 = load_checkpoint(path)
        assert g2.res == grid.res
        assert np.allclose(g2.bounds.min, grid.bounds.min)
        for a, b in zip(grid.parameters(), g2.parameters()):
            assert torch.equal(a, b)
        for a, b in zip(dec.parameters(), d2.parameters()):
            assert torch.equal(a, b)

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(p)
