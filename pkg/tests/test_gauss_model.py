import numpy as np
import pytest

from splatlight.errors import EmptyRange, InvariantViolation, IoFailure, MalformedFile
from splatlight.gauss_model import (
    GaussianCloud,
    IndexRange,
    InsertionSpec,
    SHScheduleConfig,
    active_degree_at,
    init_object_appearance,
    insert_object,
    load_cloud,
    load_points,
    quat_mul,
    quat_to_rotmat,
    save_cloud,
    save_points,
)

from conftest import random_cloud


def one_gaussian_cloud():
    return GaussianCloud.from_linear(
        means=[[0.0, 0.0, 0.0]],
        scales=[[0.1, 0.1, 0.1]],
        rotations=[[1.0, 0.0, 0.0, 0.0]],
        opacities=[0.5],
        sh_coeffs=np.zeros((1, 16, 3)),
    )


# --- construction and invariants ---

def test_identity_single_gaussian_defaults():
    cloud = one_gaussian_cloud()
    assert len(cloud) == 1
    assert cloud.l_max == 3
    assert cloud.active_sh_degree == 3
    np.testing.assert_allclose(cloud.rotations, [[1, 0, 0, 0]])


def test_opacity_out_of_range_rejected():
    with pytest.raises(InvariantViolation):
        GaussianCloud(
            means=np.zeros((1, 3)), log_scales=np.zeros((1, 3)),
            quats_raw=[[1, 0, 0, 0]], opacities=[2.0],
            f_dc=np.zeros((1, 3)), sh_rest=np.zeros((1, 15, 3)))


def test_nan_rejected():
    with pytest.raises(InvariantViolation):
        GaussianCloud(
            means=[[np.nan, 0, 0]], log_scales=np.zeros((1, 3)),
            quats_raw=[[1, 0, 0, 0]], opacities=[0.5],
            f_dc=np.zeros((1, 3)), sh_rest=np.zeros((1, 15, 3)))


def test_zero_quaternion_rejected():
    with pytest.raises(InvariantViolation):
        GaussianCloud(
            means=np.zeros((1, 3)), log_scales=np.zeros((1, 3)),
            quats_raw=[[0, 0, 0, 0]], opacities=[0.5],
            f_dc=np.zeros((1, 3)), sh_rest=np.zeros((1, 15, 3)))


def test_partial_sh_set_rejected():
    with pytest.raises(InvariantViolation):
        GaussianCloud(
            means=np.zeros((1, 3)), log_scales=np.zeros((1, 3)),
            quats_raw=[[1, 0, 0, 0]], opacities=[0.5],
            f_dc=np.zeros((1, 3)), sh_rest=np.zeros((1, 7, 3)))


def test_nonpositive_scale_rejected_in_from_linear():
    with pytest.raises(InvariantViolation):
        GaussianCloud.from_linear(
            means=np.zeros((1, 3)), scales=[[0.0, 0.1, 0.1]],
            rotations=[[1, 0, 0, 0]], opacities=[0.5],
            sh_coeffs=np.zeros((1, 16, 3)))


# --- file round trips ---

def test_roundtrip_bit_identical(rng, tmp_path):
    cloud = random_cloud(rng, 100)
    path = tmp_path / "cloud.bin"
    save_cloud(cloud, path)
    back = load_cloud(path)
    assert back.bit_identical(cloud)
    assert back.l_max == cloud.l_max


def test_load_single_gaussian_file(tmp_path):
    cloud = one_gaussian_cloud()
    path = tmp_path / "one.bin"
    save_cloud(cloud, path)
    back = load_cloud(path)
    assert len(back) == 1
    assert back.active_sh_degree == back.l_max == 3


def test_load_rejects_opacity_out_of_range(tmp_path, rng):
    cloud = random_cloud(rng, 3)
    path = tmp_path / "bad.bin"
    save_cloud(cloud, path)
    data = bytearray(path.read_bytes())
    header_end = bytes(data).index(b"end_header\n") + len(b"end_header\n")
    # opacity is attribute 51 of 58 (x,y,z + 3 dc + 45 rest precede it)
    rec = np.frombuffer(bytes(data[header_end:]), dtype="<f4").reshape(3, 59).copy()
    rec[0, 51] = 2.0
    path.write_bytes(bytes(data[:header_end]) + rec.tobytes())
    with pytest.raises(InvariantViolation):
        load_cloud(path)


def test_logit_activation_mode(tmp_path, rng):
    cloud = random_cloud(rng, 3)
    path = tmp_path / "raw.bin"
    save_cloud(cloud, path)
    data = bytearray(path.read_bytes())
    header_end = bytes(data).index(b"end_header\n") + len(b"end_header\n")
    rec = np.frombuffer(bytes(data[header_end:]), dtype="<f4").reshape(3, 59).copy()
    rec[:, 51] = 2.0  # a raw logit, as real optimizer exports store it
    path.write_bytes(bytes(data[:header_end]) + rec.tobytes())
    back = load_cloud(path, opacity_activation="logit")
    np.testing.assert_allclose(back.opacities, 1 / (1 + np.exp(-2.0)), rtol=1e-6)


def test_empty_cloud_roundtrip(tmp_path):
    cloud = GaussianCloud.empty()
    path = tmp_path / "empty.bin"
    save_cloud(cloud, path)
    back = load_cloud(path)
    assert len(back) == 0


def test_save_unwritable_path(rng):
    cloud = random_cloud(rng, 2)
    with pytest.raises(IoFailure):
        save_cloud(cloud, "/nonexistent_dir_xyz/cloud.bin")


def test_malformed_header(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a cloud file at all")
    with pytest.raises(MalformedFile):
        load_cloud(path)


def test_truncated_payload(tmp_path, rng):
    cloud = random_cloud(rng, 4)
    path = tmp_path / "trunc.bin"
    save_cloud(cloud, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(MalformedFile):
        load_cloud(path)


def test_points_roundtrip(tmp_path, rng):
    pts = rng.normal(size=(50, 3)).astype(np.float32)
    path = tmp_path / "pts.bin"
    save_points(pts, path)
    np.testing.assert_array_equal(load_points(path), pts)


# --- insertion ---

def test_insert_identity_into_empty_scene(rng):
    obj = random_cloud(rng, 10)
    merged, spec = insert_object(GaussianCloud.empty(), obj, InsertionSpec.identity())
    assert spec.object_range == IndexRange(0, 10)
    assert np.array_equal(merged.means, obj.means)
    assert np.array_equal(merged.opacities, obj.opacities)
    assert np.array_equal(merged.f_dc, obj.f_dc)
    assert np.all(merged.sh_rest == 0.0)


def test_insert_translation_only(rng):
    scene = random_cloud(rng, 7)
    obj = random_cloud(rng, 5)
    spec = InsertionSpec(translation=[1.0, 0.0, 0.0],
                         rotation_wxyz=[1, 0, 0, 0], uniform_scale=1.0)
    merged, out = insert_object(scene, obj, spec)
    assert merged.bit_identical(scene, IndexRange(0, 7))
    np.testing.assert_allclose(
        merged.means[out.object_range.to_array()],
        obj.means + np.array([1.0, 0, 0], dtype=np.float32), atol=1e-6)
    # non-mean attributes are copied bit-exact
    assert np.array_equal(merged.opacities[7:], obj.opacities)
    assert np.array_equal(merged.f_dc[7:], obj.f_dc)


def test_insert_rotation_oracle():
    # independent oracle: rotate (1,0,0) by 90 degrees about z -> (0,1,0)
    obj = GaussianCloud.from_linear(
        means=[[1.0, 0.0, 0.0]], scales=[[0.1] * 3],
        rotations=[[1, 0, 0, 0]], opacities=[0.5],
        sh_coeffs=np.zeros((1, 16, 3)))
    half = np.sqrt(0.5)
    spec = InsertionSpec(translation=[0, 0, 0],
                         rotation_wxyz=[half, 0, 0, half], uniform_scale=1.0)
    merged, _ = insert_object(GaussianCloud.empty(), obj, spec)
    np.testing.assert_allclose(merged.means[0], [0.0, 1.0, 0.0], atol=1e-6)


def test_insert_scale_applies_to_means_and_scales(rng):
    obj = random_cloud(rng, 4)
    spec = InsertionSpec(translation=[0, 0, 0], rotation_wxyz=[1, 0, 0, 0],
                         uniform_scale=2.0)
    merged, out = insert_object(GaussianCloud.empty(), obj, spec)
    np.testing.assert_allclose(merged.means, obj.means * 2.0, rtol=1e-6)
    np.testing.assert_allclose(np.asarray(merged.scales),
                               np.asarray(obj.scales) * 2.0, rtol=1e-5)


def test_insert_rejects_non_unit_rotation(rng):
    obj = random_cloud(rng, 2)
    spec = InsertionSpec(translation=[0, 0, 0],
                         rotation_wxyz=[1.0, 0.2, 0, 0], uniform_scale=1.0)
    with pytest.raises(InvariantViolation):
        insert_object(GaussianCloud.empty(), obj, spec)


def test_insert_composition(rng):
    # insert with A then rigid-transform by B == insert with B o A, on means
    obj = random_cloud(rng, 20)
    qa = rng.normal(size=4)
    qa /= np.linalg.norm(qa)
    qb = rng.normal(size=4)
    qb /= np.linalg.norm(qb)
    ta, tb = rng.normal(size=3), rng.normal(size=3)
    sa, sb = 1.7, 0.6

    spec_a = InsertionSpec(ta, qa, sa)
    merged_a, _ = insert_object(GaussianCloud.empty(), obj, spec_a)
    spec_b = InsertionSpec(tb, qb, sb)
    merged_ab, _ = insert_object(GaussianCloud.empty(), merged_a, spec_b)

    q_ba = quat_mul(qb, qa)
    q_ba /= np.linalg.norm(q_ba)
    t_ba = sb * quat_to_rotmat(qb) @ ta + tb
    spec_ba = InsertionSpec(t_ba, q_ba, sb * sa)
    merged_direct, _ = insert_object(GaussianCloud.empty(), obj, spec_ba)
    np.testing.assert_allclose(merged_ab.means, merged_direct.means, atol=1e-5)


def test_insert_preview_keeps_higher_sh(rng):
    obj = random_cloud(rng, 5)
    merged, _ = insert_object(GaussianCloud.empty(), obj,
                              InsertionSpec.identity(), zero_higher_sh=False)
    assert np.array_equal(merged.sh_rest, obj.sh_rest)


def test_spec_json_roundtrip(tmp_path):
    spec = InsertionSpec(translation=[1, 2, 3],
                         rotation_wxyz=[1, 0, 0, 0], uniform_scale=0.5,
                         object_range=IndexRange(3, 9))
    path = tmp_path / "spec.json"
    spec.save(path)
    back = InsertionSpec.load(path)
    np.testing.assert_array_equal(back.translation, spec.translation)
    assert back.uniform_scale == 0.5
    assert back.object_range == IndexRange(3, 9)


# --- appearance init ---

def test_init_appearance_mean_of_two():
    cloud = GaussianCloud.from_linear(
        means=np.zeros((2, 3)), scales=np.full((2, 3), 0.1),
        rotations=np.tile([1, 0, 0, 0], (2, 1)), opacities=[0.5, 0.5],
        sh_coeffs=np.concatenate([
            np.array([[[0.2] * 3], [[0.4] * 3]]), np.zeros((2, 15, 3))], axis=1))
    out = init_object_appearance(cloud, IndexRange(0, 2))
    np.testing.assert_allclose(out.f_dc, 0.3, atol=1e-7)


def test_init_appearance_uniform_is_fixed_point(rng):
    cloud = random_cloud(rng, 6)
    f_dc = cloud.f_dc.copy()
    f_dc[:] = [0.25, -0.1, 0.6]
    cloud = cloud.with_appearance(f_dc, cloud.sh_rest)
    out = init_object_appearance(cloud, IndexRange(0, 6))
    assert np.array_equal(out.f_dc, cloud.f_dc)
    assert np.all(out.sh_rest == 0.0)


def test_init_appearance_matches_bruteforce_mean(rng):
    cloud = random_cloud(rng, 50)
    idx = IndexRange(0, 50)
    out = init_object_appearance(cloud, idx)
    # independent oracle: plain per-channel summation
    expect = np.zeros(3, dtype=np.float64)
    for i in range(50):
        expect += cloud.f_dc[i].astype(np.float64)
    expect /= 50
    np.testing.assert_allclose(out.f_dc[0], expect, atol=1e-7)


def test_init_appearance_idempotent(rng):
    cloud = random_cloud(rng, 12)
    once = init_object_appearance(cloud, IndexRange(2, 9))
    twice = init_object_appearance(once, IndexRange(2, 9))
    assert twice.bit_identical(once)


def test_init_appearance_scene_untouched(rng):
    cloud = random_cloud(rng, 10)
    out = init_object_appearance(cloud, IndexRange(6, 10))
    assert out.bit_identical(cloud, IndexRange(0, 6))


def test_init_appearance_empty_range(rng):
    with pytest.raises(EmptyRange):
        init_object_appearance(random_cloud(rng, 3), IndexRange(1, 1))


# --- SH schedule ---

def test_active_degree_schedule():
    cfg = SHScheduleConfig(sh_degree_interval=5000)
    assert active_degree_at(0, cfg, 3) == 0
    assert active_degree_at(4999, cfg, 3) == 0
    assert active_degree_at(5000, cfg, 3) == 1
    assert active_degree_at(999999, cfg, 3) == 3


def test_active_degree_monotone_and_bounded():
    cfg = SHScheduleConfig(sh_degree_interval=7)
    degrees = [active_degree_at(s, cfg, 3) for s in range(100)]
    assert all(a <= b for a, b in zip(degrees, degrees[1:]))
    assert max(degrees) == 3


def test_schedule_config_validation():
    with pytest.raises(InvariantViolation):
        SHScheduleConfig(sh_degree_interval=0)
