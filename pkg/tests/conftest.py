import numpy as np
import pytest

from splatlight.gauss_model import GaussianCloud, IndexRange
from splatlight.splat_render import Camera, look_at


def random_cloud(rng, n, l_max=3, spread=0.3, mean_scale=0.08,
                 dc_range=0.8, rest_range=0.1, opacity=(0.3, 0.9)):
    """A well-conditioned random cloud near the origin; colors kept away from
    the [0,1] clamp so gradients stay live."""
    k = (l_max + 1) ** 2
    sh = np.concatenate([
        rng.uniform(-dc_range, dc_range, (n, 1, 3)),
        rng.uniform(-rest_range, rest_range, (n, k - 1, 3)),
    ], axis=1)
    return GaussianCloud.from_linear(
        means=rng.normal(0.0, spread, (n, 3)),
        scales=np.exp(rng.normal(np.log(mean_scale), 0.3, (n, 3))),
        rotations=rng.normal(0.0, 1.0, (n, 4)),
        opacities=rng.uniform(*opacity, n),
        sh_coeffs=sh,
    )


def centered_camera(size=16, focal=None, dist=2.5, near=0.1, far=50.0):
    """Camera on the -z axis looking at the origin; principal point on the
    center pixel so on-axis Gaussians land exactly on a pixel center."""
    focal = focal or 2.5 * size
    return look_at(eye=(0.0, 0.0, -dist), target=(0.0, 0.0, 0.0),
                   fx=focal, fy=focal, cx=size / 2, cy=size / 2,
                   width=size, height=size, near=near, far=far)


def fixture_scene(rng, n_scene=60, n_object=40, size=8):
    """Small merged scene: a wide ring of scene Gaussians plus a compact
    central object; corner pixels see no object mass."""
    angles = rng.uniform(0, 2 * np.pi, n_scene)
    ring_r = rng.uniform(1.1, 1.5, n_scene)
    scene_means = np.stack([ring_r * np.cos(angles),
                            ring_r * np.sin(angles),
                            rng.uniform(-0.2, 0.2, n_scene)], axis=1)
    k = 16
    scene = GaussianCloud.from_linear(
        means=scene_means,
        scales=np.full((n_scene, 3), 0.12),
        rotations=np.tile([1.0, 0, 0, 0], (n_scene, 1)),
        opacities=rng.uniform(0.5, 0.9, n_scene),
        sh_coeffs=np.concatenate([
            rng.uniform(-0.3, 0.3, (n_scene, 1, 3)),
            np.zeros((n_scene, k - 1, 3))], axis=1),
    )
    obj = GaussianCloud.from_linear(
        means=rng.normal(0.0, 0.08, (n_object, 3)),
        scales=np.full((n_object, 3), 0.06),
        rotations=np.tile([1.0, 0, 0, 0], (n_object, 1)),
        opacities=rng.uniform(0.6, 0.95, n_object),
        sh_coeffs=np.concatenate([
            rng.uniform(-0.4, 0.0, (n_object, 1, 3)),
            np.zeros((n_object, k - 1, 3))], axis=1),
    )
    merged = GaussianCloud(
        means=np.concatenate([scene.means, obj.means]),
        log_scales=np.concatenate([scene.log_scales, obj.log_scales]),
        quats_raw=np.concatenate([scene.quats_raw, obj.quats_raw]),
        opacities=np.concatenate([scene.opacities, obj.opacities]),
        f_dc=np.concatenate([scene.f_dc, obj.f_dc]),
        sh_rest=np.concatenate([scene.sh_rest, obj.sh_rest]),
        active_sh_degree=0,
    )
    cam = centered_camera(size=size, dist=2.2, focal=2.2 * size)
    return merged, IndexRange(n_scene, n_scene + n_object), [cam]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
