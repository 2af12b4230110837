import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from occscene.errors import FormatError
from occscene.gsrender import (Camera, GaussianPrimitiveSet, composite_reference,
                               format_camera_rig, parse_camera_rig, project_gaussian,
                               project_road_lines, rasterize, voxels_to_gaussians)
from occscene.voxgrid import LAYOUT_CODE, UNKNOWN, BevLayout, SemanticOccupancyGrid

from conftest import random_grid
from scenes import frustum_camera, random_gaussians


def _cam(w=32, h=32, f=50.0, rot=np.eye(3), t=(0, 0, 0)):
    return Camera(f, f, w / 2, h / 2, w, h, rot, np.asarray(t, float))


def _prims(means, scales, opac, labels, quats=None):
    means = np.atleast_2d(np.asarray(means, float))
    n = len(means)
    if quats is None:
        quats = np.tile([1.0, 0, 0, 0], (n, 1))
    return GaussianPrimitiveSet(means, np.broadcast_to(np.asarray(scales, float), (n, 3)),
                                quats, np.broadcast_to(np.asarray(opac, float), (n,)), labels)


# ----------------------------------------------------------------- voxels -> gaussians


def test_all_free_grid_gives_empty_set():
    assert len(voxels_to_gaussians(SemanticOccupancyGrid(np.zeros((3, 3, 3), np.uint8)))) == 0


def test_single_voxel_primitive():
    labels = np.zeros((2, 2, 2), np.uint8)
    labels[0, 0, 0] = 4
    p = voxels_to_gaussians(SemanticOccupancyGrid(labels), 0.99, 0.5)
    assert len(p) == 1
    assert np.allclose(p.means[0], (0.5, 0.5, 0.5))
    assert np.allclose(p.scales[0], (0.5, 0.5, 0.5))
    assert np.array_equal(p.quats[0], (1, 0, 0, 0))
    assert p.opacities[0] == 0.99 and p.labels[0] == 4


def test_count_matches_occupancy_and_skips_unknown():
    g = random_grid(3, occupancy=0.1)
    assert len(voxels_to_gaussians(g)) == int(((g.labels != 0) & (g.labels != 255)).sum())
    labels = np.array(g.labels)
    labels[0, 0, :] = 255
    g2 = g.with_labels(labels)
    assert len(voxels_to_gaussians(g2)) == int(g2.occupied.sum())


def test_primitive_validation():
    with pytest.raises(FormatError):
        _prims([0, 0, 1], [0.0, 1, 1], 0.5, [1])
    with pytest.raises(FormatError):
        _prims([0, 0, 1], 1.0, 0.0, [1])
    with pytest.raises(FormatError):
        _prims([0, 0, 1], 1.0, 0.5, [1], quats=[[1.0, 0.1, 0, 0]])


# ----------------------------------------------------------------- projection


def test_on_axis_projection_closed_form():
    sigma = 0.2
    cam = Camera(120.0, 80.0, 31.0, 17.0, 64, 48, np.eye(3), np.zeros(3))
    proj = project_gaussian(_prims([0, 0, 1], sigma, 0.9, [1]), cam)
    assert np.allclose(proj.mean2d, (31.0, 17.0))
    assert np.allclose(proj.cov2d, np.diag([120.0 ** 2 * sigma ** 2, 80.0 ** 2 * sigma ** 2]) + 0.3 * np.eye(2))
    assert proj.depth == pytest.approx(1.0)


def test_behind_and_near_plane_culled():
    cam = _cam()
    assert project_gaussian(_prims([0, 0, -1], 0.2, 0.9, [1]), cam) is None
    assert project_gaussian(_prims([0, 0, 0.04], 0.2, 0.9, [1]), cam) is None
    assert project_gaussian(_prims([0, 0, 0.06], 0.2, 0.9, [1]), cam) is not None


def test_in_plane_camera_rotation_conjugates_cov():
    prims = _prims([0, 0, 2], [0.3, 0.1, 0.2], 0.9, [1])
    a = project_gaussian(prims, _cam())
    rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    b = project_gaussian(prims, _cam(rot=rz))
    P = rz[:2, :2]
    assert np.allclose(b.cov2d, P @ a.cov2d @ P.T)
    # the long axis moves from x to y
    assert a.cov2d[0, 0] > a.cov2d[1, 1] and b.cov2d[1, 1] > b.cov2d[0, 0]


@given(st.integers(0, 10_000))
def test_cov2d_symmetric_pd_with_floor(seed):
    prims = random_gaussians(seed, n=5)
    cam = frustum_camera()
    for i in range(len(prims)):
        pr = project_gaussian(prims, cam, i)
        if pr is None:
            continue
        assert np.allclose(pr.cov2d, pr.cov2d.T)
        assert np.linalg.eigvalsh(pr.cov2d).min() >= 0.3 - 1e-9


# ----------------------------------------------------------------- rasterization


def test_empty_scene():
    for fn in (rasterize, composite_reference):
        d, s = fn(GaussianPrimitiveSet.empty(), _cam())
        assert not d.values.any() and (s.labels == 255).all()


def test_single_on_axis_gaussian():
    cam = _cam()
    d, s = rasterize(_prims([0, 0, 5], 0.5, 0.99, [7]), cam)
    # centre pixel sits exactly on the mean, so alpha' = 0.99 (clamped)
    assert d.values[16, 16] == pytest.approx(5 * 0.99)
    assert s.labels[16, 16] == 7
    assert d.opacity.max() <= 1.0


def test_two_gaussians_hand_example():
    cam = _cam()
    prims = _prims([[0, 0, 4], [0, 0, 2]], 0.5, [0.9, 0.6], [2, 1])  # back first in input
    d, s = rasterize(prims, cam)
    assert d.values[16, 16] == pytest.approx(0.6 * 2 + 0.4 * 0.9 * 4)
    assert d.values[16, 16] == pytest.approx(2.64)
    assert s.labels[16, 16] == 1


def test_normalized_depth_variant():
    cam = _cam()
    d, _ = rasterize(_prims([0, 0, 5], 0.5, 0.5, [7]), cam, normalize_depth=True)
    assert d.values[16, 16] == pytest.approx(5.0)


def test_low_opacity_pixels_get_sentinel():
    cam = _cam()
    d, s = rasterize(_prims([0, 0, 5], 0.01, 0.5, [7]), cam)
    far = d.opacity < 1e-3
    assert far.any() and (s.labels[far] == 255).all() and (d.values[far] == 0).all()


@pytest.mark.parametrize("seed", range(4))
def test_matches_reference(seed):
    prims = random_gaussians(seed, n=150)
    cam = frustum_camera(128)
    d1, s1 = rasterize(prims, cam)
    d2, s2 = composite_reference(prims, cam)
    assert np.array_equal(s1.labels, s2.labels)
    assert np.abs(d1.values - d2.values).max() <= 1e-5


def test_one_primitive_semantics_identical():
    prims = random_gaussians(5, n=1)
    cam = frustum_camera(64)
    assert np.array_equal(rasterize(prims, cam)[1].labels, composite_reference(prims, cam)[1].labels)


def test_thread_count_does_not_change_output():
    prims = random_gaussians(1, n=120)
    cam = frustum_camera(96)
    a = rasterize(prims, cam, threads=1)
    b = rasterize(prims, cam, threads=4)
    assert np.array_equal(a[0].values, b[0].values) and np.array_equal(a[1].labels, b[1].labels)


@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    prims = random_gaussians(seed, n=30)
    perm = np.random.default_rng(seed).permutation(len(prims))
    shuffled = GaussianPrimitiveSet(prims.means[perm], prims.scales[perm], prims.quats[perm],
                                    prims.opacities[perm], prims.labels[perm])
    cam = frustum_camera(48)
    a, b = rasterize(prims, cam), rasterize(shuffled, cam)
    assert np.allclose(a[0].values, b[0].values, atol=1e-12)
    assert np.array_equal(a[1].labels, b[1].labels)


@given(st.integers(0, 10_000))
def test_transmittance_monotone_and_opacity_bounded(seed):
    prims = random_gaussians(seed, n=25)
    cam = frustum_camera(32)
    d, _ = composite_reference(prims, cam)
    assert (d.opacity >= 0).all() and (d.opacity <= 1 + 1e-12).all()
    # adding primitives behind everything never lowers accumulated opacity
    back = GaussianPrimitiveSet(np.r_[prims.means, [[100.0, 0, 0]]], np.r_[prims.scales, [[5.0, 5, 5]]],
                                np.r_[prims.quats, [[1.0, 0, 0, 0]]], np.r_[prims.opacities, [0.9]],
                                np.r_[prims.labels, [1]])
    d2, _ = composite_reference(back, cam)
    assert (d2.opacity >= d.opacity - 1e-12).all()


# ----------------------------------------------------------------- rigs and road lines


def test_camera_rig_round_trip():
    text = ("front 500 500 320 240 640 480 1 0 0 0 0 0 0\n"
            "# comment\n"
            "left 400 410 300 200 600 400 0.7071067811865476 0 0.7071067811865476 0 1 2 3\n")
    cams = parse_camera_rig(text)
    assert [c.name for c in cams] == ["front", "left"]
    again = parse_camera_rig(format_camera_rig(cams))
    for a, b in zip(cams, again):
        assert np.allclose(a.rotation, b.rotation) and np.allclose(a.translation, b.translation)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)
    with pytest.raises(FormatError):
        parse_camera_rig("bad 1 2 3\n")
    with pytest.raises(FormatError):
        parse_camera_rig("c 1 1 0 0 4 4 2 0 0 0 0 0 0\n")


def test_project_road_lines_paints_lowest_occupied():
    labels = np.zeros((3, 3, 4), np.uint8)
    labels[:, :, 1] = 11
    labels[1, 1, 3] = 4
    g = SemanticOccupancyGrid(labels)
    codes = np.zeros((3, 3), np.uint8)
    codes[1, :] = LAYOUT_CODE["lane_line"]
    out = project_road_lines(g, BevLayout(codes, 1.0, (0, 0)), 12)
    assert (out.labels[1, :, 1] == 12).all()
    assert out.labels[1, 1, 3] == 4
    assert (out.labels[[0, 2], :, 1] == 11).all()


def _street(z_car=1):
    labels = np.zeros((64, 64, 16), np.uint8)
    labels[:, :, 0] = 11
    labels[40:44, 30:34, z_car:z_car + 2] = 4
    return SemanticOccupancyGrid(labels, 0.5, (-16, -16, -2))


@pytest.mark.parametrize("normalize", [False, True])
def test_dense_scene_within_early_stop_bound(normalize):
    # thousands of overlapping splats: early termination may only drop mass behind T < 1e-4
    prims = voxels_to_gaussians(_street())
    cam = Camera.look_at((0, 0, 1.0), (10, 0, -1.5), fx=200, width=128, height=64)
    d, s = rasterize(prims, cam, normalize_depth=normalize)
    rd, rs = composite_reference(prims, cam, normalize_depth=normalize)
    assert np.array_equal(s.labels, rs.labels)
    bound = 1e-4 * float(cam.to_camera(prims.means)[:, 2].max())
    assert np.max(np.abs(d.values - rd.values)) <= bound


def test_off_axis_splats_near_camera_stay_local():
    # ground voxels beside and just in front of the camera must not smear across the image
    cam = Camera.look_at((0, 0, 1.0), (10, 0, -1.5), fx=200, width=128, height=64)
    _, s = rasterize(voxels_to_gaussians(_street()), cam)
    assert (s.labels == 4).sum() > 100
    assert (s.labels[:5] == UNKNOWN).all()  # sky rows
