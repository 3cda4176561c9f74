import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hftbev.geometry import (
    BevGridSpec,
    CameraIntrinsics,
    GeometryError,
    bilinear_sample,
    build_resample_map,
    default_grid,
    default_intrinsics,
    frustum_mask,
    ground_to_pixel,
    pixel_to_ground,
    point_to_pixel,
)


def test_ground_projection_hand_values():
    intr = default_intrinsics()
    # straight ahead at 10 m: column = cx, row = cy + fy*h/z
    assert ground_to_pixel(intr, 0.0, 10.0) == pytest.approx((64.0, 64.0 + 128 * 1.5 / 10))
    u, v = ground_to_pixel(intr, 2.0, 4.0)
    assert u == pytest.approx(64 + 128 * 2 / 4)
    assert v == pytest.approx(64 + 128 * 1.5 / 4)


def test_projection_rejects_points_behind_camera():
    with pytest.raises(GeometryError):
        ground_to_pixel(default_intrinsics(), 1.0, 0.0)
    with pytest.raises(GeometryError):
        pixel_to_ground(default_intrinsics(), 10.0, 64.0)


@settings(max_examples=200, deadline=None)
@given(x=st.floats(-20, 20), z=st.floats(0.5, 80), fx=st.floats(50, 300), h=st.floats(0.5, 3.0))
def test_ground_roundtrip(x, z, fx, h):
    intr = CameraIntrinsics(fx, fx * 1.1, 64.0, 60.0, h)
    u, v = ground_to_pixel(intr, x, z)
    x2, z2 = pixel_to_ground(intr, u, v)
    assert x2 == pytest.approx(x, rel=1e-9, abs=1e-9)
    assert z2 == pytest.approx(z, rel=1e-9)


def test_elevated_point_projects_above_its_footprint():
    intr = default_intrinsics()
    _, v_ground = ground_to_pixel(intr, 0.0, 10.0)
    _, v_top = point_to_pixel(intr, 0.0, 1.0, 10.0)
    assert v_top < v_ground
    # a point at camera height sits on the horizon
    _, v_h = point_to_pixel(intr, 0.0, intr.cam_height, 10.0)
    assert v_h == pytest.approx(intr.cy)


def test_frustum_mask_matches_brute_force():
    intr, grid = default_intrinsics(), default_grid()
    m = frustum_mask(intr, grid)
    for i in range(grid.depth_cells):
        for j in range(grid.lateral_cells):
            x = grid.x_min + (j + 0.5) * grid.cell_size
            z = grid.z_min + (i + 0.5) * grid.cell_size
            u = intr.fx * x / z + intr.cx
            v = intr.fy * intr.cam_height / z + intr.cy
            assert m[i, j] == (0 <= u < intr.image_w and 0 <= v < intr.image_h)
    # the wedge widens with depth
    assert m[-1].sum() > m[8].sum()


def test_grid_validation():
    with pytest.raises(GeometryError):
        BevGridSpec(8, 8, 1.0, 1.0, 9.0, ((1.0, 3.0), (4.0, 9.0)))  # gap between extents
    with pytest.raises(GeometryError):
        BevGridSpec(8, 8, 1.0, 1.0, 9.0, ((1.0, 3.0), (3.0, 8.0)))  # does not reach z_max
    with pytest.raises(GeometryError):
        BevGridSpec(8, 8, -1.0, 1.0, 9.0, ((1.0, 9.0),))


def test_extent_rows_cover_grid():
    g = default_grid()
    rows = [g.extent_rows(i) for i in range(len(g.extents))]
    assert rows[0][0] == 0 and rows[-1][1] == g.depth_cells
    assert all(a[1] == b[0] for a, b in zip(rows, rows[1:]))
    assert sum(g.extent_depths()) == g.depth_cells


@pytest.mark.parametrize("stride", [8, 16, 32])
@pytest.mark.parametrize("extent", [0, 1, 2])
def test_resample_map_matches_per_cell_projection(stride, extent):
    intr, grid = default_intrinsics(), default_grid()
    rm = build_resample_map(intr, grid, stride, extent)
    z_lo, z_hi = grid.extents[extent]
    start, stop = grid.extent_rows(extent)
    D, U = stop - start, intr.image_w // stride
    for r in range(stop - start):
        z = grid.z_min + (start + r + 0.5) * grid.cell_size
        for j in range(grid.lateral_cells):
            x = grid.x_min + (j + 0.5) * grid.cell_size
            u = (intr.fx * x / z + intr.cx) / stride
            d = (z - z_lo) / (z_hi - z_lo) * (D - 1)
            assert abs(rm.u[r, j] - u) < 1e-9
            assert abs(rm.d[r, j] - d) < 1e-9
            assert rm.in_bounds[r, j] == (0 <= u <= U - 1 and 0 <= d <= D - 1)


def test_resample_map_is_cached_and_read_only():
    a = build_resample_map(default_intrinsics(), default_grid(), 8, 0)
    b = build_resample_map(default_intrinsics(), default_grid(), 8, 0)
    assert a is b
    with pytest.raises(ValueError):
        a.u[0, 0] = 1.0


def _oracle_sample(src, rm):
    C, D, U = src.shape
    Ze, W = rm.shape
    out = np.zeros((C, Ze, W))
    for r in range(Ze):
        for j in range(W):
            if not rm.in_bounds[r, j]:
                continue
            d, u = rm.d[r, j], rm.u[r, j]
            d0 = min(int(math.floor(d)), D - 2)
            u0 = min(int(math.floor(u)), U - 2)
            td, tu = d - d0, u - u0
            for c in range(C):
                out[c, r, j] = ((1 - td) * (1 - tu) * src[c, d0, u0] + (1 - td) * tu * src[c, d0, u0 + 1]
                                + td * (1 - tu) * src[c, d0 + 1, u0] + td * tu * src[c, d0 + 1, u0 + 1])
    return out


@pytest.mark.parametrize("stride,extent", [(8, 0), (16, 1), (32, 2)])
def test_bilinear_matches_scalar_oracle(rng, stride, extent):
    rm = build_resample_map(default_intrinsics(), default_grid(), stride, extent)
    src = rng.standard_normal((3, rm.depth_bins, rm.width))
    got = bilinear_sample(torch.from_numpy(src), rm).numpy()
    np.testing.assert_allclose(got, _oracle_sample(src, rm), atol=1e-6)
    assert np.all(got[:, ~rm.in_bounds] == 0)


def test_bilinear_reproduces_affine_fields():
    # bilinear interpolation is exact for fields linear in (d, u)
    rm = build_resample_map(default_intrinsics(), default_grid(), 8, 1)
    d, u = np.meshgrid(np.arange(rm.depth_bins), np.arange(rm.width), indexing="ij")
    src = torch.from_numpy((2.0 * d - 0.5 * u + 3.0)[None])
    got = bilinear_sample(src, rm)[0].numpy()
    want = 2.0 * rm.d - 0.5 * rm.u + 3.0
    np.testing.assert_allclose(got[rm.in_bounds], want[rm.in_bounds], atol=1e-9)


def test_bilinear_batched_and_shape_check():
    rm = build_resample_map(default_intrinsics(), default_grid(), 16, 0)
    src = torch.randn(2, 4, rm.depth_bins, rm.width, dtype=torch.float64)
    out = bilinear_sample(src, rm)
    assert out.shape == (2, 4, *rm.shape)
    torch.testing.assert_close(out[1], bilinear_sample(src[1], rm))
    with pytest.raises(ValueError):
        bilinear_sample(torch.randn(4, rm.depth_bins + 1, rm.width), rm)


def test_bilinear_gradient():
    rm = build_resample_map(CameraIntrinsics(32.0, 32.0, 16.0, 16.0, 1.5, 32, 32),
                            BevGridSpec(8, 8, 1.0, 1.0, 9.0, ((1.0, 3.0), (3.0, 5.0), (5.0, 9.0))), 8, 2)
    src = torch.randn(2, rm.depth_bins, rm.width, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda s: bilinear_sample(s, rm), (src,))


def test_intrinsics_serialization_roundtrip():
    intr = CameraIntrinsics(100.0, 110.0, 60.0, 62.0, 1.7, 128, 96)
    assert CameraIntrinsics.from_dict(intr.to_dict()) == intr
    g = default_grid()
    assert BevGridSpec.from_dict(g.to_dict()) == g
