import math
from itertools import combinations

import numpy as np
import pytest

from cagsplat.config import SceneConfig
from cagsplat.errors import ConfigError, DimensionError
from cagsplat.render import render
from cagsplat.scene import (
    build_dataset, default_camera, deform_mesh, jaw_channel, make_head_scene, make_oracle_field,
    oracle_render_dataset, psi_trajectory, rasterize_rigid_mask,
)

SMALL = SceneConfig(resolution=24, mesh_lat=8, mesh_lon=10, n_frames=10, oracle_gaussians=300)


@pytest.fixture(scope="module")
def mesh():
    return make_head_scene(0, SMALL)


def test_mesh_deterministic(mesh):
    again = make_head_scene(0, SMALL)
    for name in ("vertices_rest", "triangles", "uv", "blendshapes", "rigid_vertex_set"):
        assert getattr(mesh, name).tobytes() == getattr(again, name).tobytes()
    other = make_head_scene(1, SMALL)
    assert other.blendshapes.tobytes() != mesh.blendshapes.tobytes()


def test_mesh_structure(mesh):
    assert mesh.triangles.min() >= 0 and mesh.triangles.max() < len(mesh.vertices_rest)
    assert np.all(mesh.blendshapes[:, mesh.rigid_vertex_set] == 0)
    assert mesh.n_blendshapes == 8 and len(mesh.rigid_vertex_set) > 0
    assert np.all(np.isin(mesh.triangles[mesh.rigid_triangles], mesh.rigid_vertex_set))
    with pytest.raises(ConfigError):
        make_head_scene(0, SceneConfig(mesh_lat=2))
    with pytest.raises(ConfigError):
        make_head_scene(0, SceneConfig(n_blendshapes=16, psi_dim=16))


def test_zero_blendshapes_only_jaw_moves():
    m = make_head_scene(0, SceneConfig(mesh_lat=8, mesh_lon=10, n_blendshapes=0, psi_dim=4, n_tokens=2))
    psi = np.zeros(4)
    psi[jaw_channel(m)] = 0.2
    v = deform_mesh(m, psi)
    moved = np.any(v != m.vertices_rest, axis=1)
    assert moved.any()
    assert np.all(m.rigid_mask[moved])


def test_deform_examples(mesh):
    psi = np.zeros(16)
    np.testing.assert_array_equal(deform_mesh(mesh, psi), mesh.vertices_rest)
    psi[0] = 0.5
    np.testing.assert_array_equal(deform_mesh(mesh, psi), mesh.vertices_rest + 0.5 * mesh.blendshapes[0])
    with pytest.raises(DimensionError):
        deform_mesh(mesh, np.zeros(15))


def rigid_distances(v, idx):
    pts = v[idx]
    return np.linalg.norm(pts[:, None] - pts[None], axis=2)


def test_jaw_is_rigid_motion(mesh):
    rng = np.random.default_rng(0)
    base = rigid_distances(mesh.vertices_rest, mesh.rigid_vertex_set)
    for _ in range(5):
        psi = rng.normal(0, 0.5, 16)
        d = rigid_distances(deform_mesh(mesh, psi), mesh.rigid_vertex_set)
        assert np.abs(d - base).max() <= 1e-12 * base.max()
    psi = np.zeros(16)
    psi[jaw_channel(mesh)] = 0.3
    v = deform_mesh(mesh, psi)
    i = mesh.rigid_vertex_set[0]
    r0 = mesh.vertices_rest[i] - mesh.jaw_pivot
    r1 = v[i] - mesh.jaw_pivot
    # rotation about the x axis keeps x and turns the (y, z) part by the jaw angle
    assert abs(r0[0] - r1[0]) < 1e-15
    ang = math.atan2(r1[2], r1[1]) - math.atan2(r0[2], r0[1])
    assert abs(ang - 0.3) < 1e-12


def test_psi_trajectory():
    psi = psi_trajectory(50, SceneConfig(), 3)
    assert psi.shape == (50, 16)
    assert np.all(psi[0] == 0)
    assert np.all(psi[:, 9:] == 0)
    assert psi[:, 8].min() >= 0 and psi[:, 8].max() <= 0.3


def test_dataset_split_and_determinism(mesh):
    cams = [default_camera(SMALL)]
    ds = oracle_render_dataset(mesh, 11, cams, 0, SMALL)
    assert len(ds.frames) == 11
    assert [f.split for f in ds.frames] == ["train"] * 8 + ["test"] * 3
    again = oracle_render_dataset(mesh, 11, cams, 0, SMALL)
    for a, b in zip(ds.frames, again.frames):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.mask.tobytes() == b.mask.tobytes()
    assert ds.frames[0].mask.shape == ds.frames[0].image.shape[:2]


def test_build_dataset_regenerates_bit_identically():
    cfg = SceneConfig(resolution=16, mesh_lat=6, mesh_lon=8, n_frames=5, oracle_gaussians=100, seed=4)
    a, b = build_dataset(cfg), build_dataset(cfg)
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a.frames, b.frames))


def test_rest_frame_self_consistency(mesh):
    cam = default_camera(SMALL)
    ds = oracle_render_dataset(mesh, 3, [cam], 0, SMALL)
    oracle = make_oracle_field(mesh, SMALL)
    img = render(oracle.posed(mesh.vertices_rest, np.zeros(16)), cam).rgb
    assert img.tobytes() == ds.frames[0].image.tobytes()


def brute_force_mask(mesh, verts, cam):
    t = verts @ cam.rotation.T + cam.translation
    px = np.stack([cam.fx * t[:, 0] / t[:, 2] + cam.cx, cam.fy * t[:, 1] / t[:, 2] + cam.cy], axis=1)
    rigid = set(int(i) for i in mesh.rigid_triangles)
    out = np.zeros((cam.height, cam.width))
    for y in range(cam.height):
        for x in range(cam.width):
            best, owner = np.inf, False
            for ti, tri in enumerate(mesh.triangles):
                a, b, c = px[tri]
                det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
                if abs(det) < 1e-12:
                    continue
                l1 = ((x - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (y - a[1])) / det
                l2 = ((b[0] - a[0]) * (y - a[1]) - (x - a[0]) * (b[1] - a[1])) / det
                l0 = 1 - l1 - l2
                if min(l0, l1, l2) < 0:
                    continue
                depth = 1.0 / (l0 / t[tri[0], 2] + l1 / t[tri[1], 2] + l2 / t[tri[2], 2])
                if depth < best:
                    best, owner = depth, ti in rigid
            out[y, x] = owner
    return out


def test_mask_is_frontmost_rigid_surface(mesh):
    cam = default_camera(SMALL)
    psi = np.zeros(16)
    psi[jaw_channel(mesh)] = 0.25
    verts = deform_mesh(mesh, psi)
    mask = rasterize_rigid_mask(mesh, verts, cam)
    assert set(np.unique(mask)) <= {0.0, 1.0} and mask.sum() > 0
    np.testing.assert_array_equal(mask, brute_force_mask(mesh, verts, cam))
