import json
import math
import os

import numpy as np
import pytest
from skimage.metrics import structural_similarity as skimage_ssim

from splatlight.bridge_client import loopback_client
from splatlight.errors import BoxTooSmall, CameraMismatch, EmptyMask, MissingScene
from splatlight.imgio import load_png, save_png
from splatlight.metrics_eval import (
    REFERENCE_AVERAGES,
    MetricsReport,
    SceneMetrics,
    bbox_from_mask,
    ctis,
    dtis,
    psnr_part,
    run_benchmark,
    ssim,
    ssim_part,
)

from conftest import centered_camera


# --- PSNR ---

def test_psnr_identical_is_inf(rng):
    img = rng.uniform(0, 1, (16, 16, 3))
    mask = np.ones((16, 16))
    assert psnr_part(img, img, mask) == math.inf


def test_psnr_constant_diff_closed_form(rng):
    gt = rng.uniform(0.2, 0.8, (20, 20, 3))
    pred = gt + 0.1
    mask = np.zeros((20, 20))
    mask[4:16, 4:16] = 1.0
    assert abs(psnr_part(pred, gt, mask) - 20.0) < 1e-9


def test_psnr_mask_excludes_error(rng):
    gt = rng.uniform(0.2, 0.8, (8, 8, 3))
    pred = gt.copy()
    pred[0, 0] += 0.3
    mask = np.ones((8, 8))
    mask[0, 0] = 0.0
    assert psnr_part(pred, gt, mask) == math.inf


def test_psnr_empty_mask(rng):
    img = rng.uniform(0, 1, (8, 8, 3))
    with pytest.raises(EmptyMask):
        psnr_part(img, img, np.zeros((8, 8)))


def test_psnr_mask_monotone_under_error_free_growth(rng):
    gt = rng.uniform(0.2, 0.8, (12, 12, 3))
    pred = gt.copy()
    pred[2:6, 2:6] += 0.05  # errors confined to a corner block
    small = np.zeros((12, 12))
    small[2:6, 2:6] = 1.0
    grown = small.copy()
    grown[8:, 8:] = 1.0  # adds only error-free pixels
    assert psnr_part(pred, gt, grown) >= psnr_part(pred, gt, small)


# --- SSIM ---

def test_ssim_identical_is_one(rng):
    img = rng.uniform(0, 1, (16, 16, 3))
    assert abs(ssim(img, img) - 1.0) < 1e-12


def test_ssim_matches_reference_implementation(rng):
    for trial in range(10):
        a = rng.uniform(0, 1, (24, 24, 3))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        mine = ssim(a, b)
        ref = skimage_ssim(a, b, channel_axis=2, data_range=1.0,
                           gaussian_weights=True, sigma=1.5,
                           use_sample_covariance=False)
        assert abs(mine - ref) < 1e-4, trial


def test_ssim_inverted_image_against_reference(rng):
    a = rng.uniform(0.05, 0.45, (20, 20, 3))  # keep away from mid-gray
    b = 1.0 - a
    ref = skimage_ssim(a, b, channel_axis=2, data_range=1.0,
                       gaussian_weights=True, sigma=1.5,
                       use_sample_covariance=False)
    assert abs(ssim(a, b) - ref) < 1e-4


def test_ssim_constant_images_closed_form():
    # zero variance: only the luminance term survives
    mu_x, mu_y = 0.3, 0.6
    a = np.full((16, 16), mu_x)
    b = np.full((16, 16), mu_y)
    c1 = 0.01 ** 2
    expect = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    assert abs(ssim(a, b) - expect) < 1e-12


def test_ssim_symmetric(rng):
    a = rng.uniform(0, 1, (18, 18, 3))
    b = rng.uniform(0, 1, (18, 18, 3))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-9


def test_ssim_part_box_too_small(rng):
    img = rng.uniform(0, 1, (20, 20, 3))
    with pytest.raises(BoxTooSmall):
        ssim_part(img, img, (0, 0, 9, 9))


# --- bbox ---

def test_bbox_single_pixel():
    mask = np.zeros((10, 10))
    mask[3, 7] = 1.0
    assert bbox_from_mask(mask) == (3, 7, 3, 7)


def test_bbox_full_mask():
    assert bbox_from_mask(np.ones((6, 9))) == (0, 0, 5, 8)


def test_bbox_diagonal_pair():
    mask = np.zeros((10, 10))
    mask[2, 3] = 1.0
    mask[7, 8] = 1.0
    assert bbox_from_mask(mask) == (2, 3, 7, 8)


def test_bbox_empty():
    with pytest.raises(EmptyMask):
        bbox_from_mask(np.zeros((4, 4)))


# --- embedding similarities ---

class FixedEmbedder:
    def __init__(self, text_vec, image_vec):
        self.text_vec, self.image_vec = text_vec, image_vec

    def embed_text(self, text):
        return self.text_vec

    def embed_image(self, image):
        return self.image_vec


def test_dtis_identical_images(rng):
    img = rng.uniform(0, 1, (8, 8, 3))
    client = loopback_client()
    assert abs(dtis(img, img, client) - 1.0) < 1e-6


def test_ctis_orthogonal_vectors():
    e = FixedEmbedder(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert abs(ctis(np.zeros((4, 4, 3)), "p", e) - 0.5) < 1e-12


def test_similarities_bounded(rng):
    client = loopback_client()
    for _ in range(5):
        a = rng.uniform(0, 1, (8, 8, 3))
        b = rng.uniform(0, 1, (8, 8, 3))
        v = dtis(a, b, client)
        assert 0.0 <= v <= 1.0
        assert 0.0 <= ctis(a, "prompt", client) <= 1.0


def test_reference_averages_regression_constants():
    assert REFERENCE_AVERAGES["psnr_part"] == 8.863
    assert REFERENCE_AVERAGES["ssim_part"] == 0.540
    assert REFERENCE_AVERAGES["ctis"] == 0.627
    assert REFERENCE_AVERAGES["dtis"] == 0.509


# --- benchmark harness ---

def write_scene(root, name, gt_images, init_images, masks, cam, prompt=None):
    base = root / name
    for sub in ("object_scene/images", "object_scene/masks", "scene/images",
                "object/images"):
        os.makedirs(base / sub, exist_ok=True)
    cams = {}
    for cam_id, img in gt_images.items():
        save_png(img, base / "object_scene" / "images" / f"{cam_id}.png")
        save_png(masks[cam_id], base / "object_scene" / "masks" / f"{cam_id}.png")
        save_png(init_images[cam_id], base / "scene" / "images" / f"{cam_id}.png")
        cams[cam_id] = cam.to_json()
    with open(base / "object_scene" / "cameras.json", "w") as fh:
        json.dump({"cameras": cams}, fh)
    if prompt:
        with open(base / "prompts.json", "w") as fh:
            json.dump({"target": prompt}, fh)


def build_fixture_dataset(tmp_path, rng, error=0.1):
    """Two scenes, one camera each, planted constant error on the mask."""
    dataset = tmp_path / "dataset"
    outputs = tmp_path / "outputs"
    cam = centered_camera(24)
    mask = np.zeros((24, 24))
    mask[5:19, 5:19] = 1.0
    for k, scene in enumerate(["scene_a", "scene_b"]):
        gt = rng.uniform(0.2, 0.7, (24, 24, 3))
        pred = gt.copy()
        pred[mask > 0.5] += error * (k + 1) / 2.0
        write_scene(dataset, scene, {"cam0": gt}, {"cam0": gt}, {"cam0": mask},
                    cam, prompt=f"a thing in {scene}")
        os.makedirs(outputs / scene, exist_ok=True)
        save_png(pred, outputs / scene / "cam0.png")
    return dataset, outputs, mask


def test_benchmark_matches_hand_computation(tmp_path, rng):
    dataset, outputs, mask = build_fixture_dataset(tmp_path, rng)
    report = run_benchmark(str(dataset), str(outputs),
                           embedder=loopback_client())
    assert [r.scene for r in report.rows] == ["scene_a", "scene_b"]
    for row in report.rows:
        pred = load_png(outputs / row.scene / "cam0.png")
        gt = load_png(dataset / row.scene / "object_scene" / "images" / "cam0.png")
        sel = mask > 0.5
        mse = float(np.mean(((pred - gt)[sel]) ** 2))
        assert abs(row.psnr_part - 10 * math.log10(1.0 / mse)) < 1e-9
        expect_ssim = ssim(pred[5:19, 5:19], gt[5:19, 5:19])
        assert abs(row.ssim_part - expect_ssim) < 1e-12
        assert 0.0 <= row.ctis <= 1.0 and 0.0 <= row.dtis <= 1.0
    avg = report.average
    assert abs(avg.psnr_part
               - np.mean([r.psnr_part for r in report.rows])) < 1e-9


def test_benchmark_self_evaluation(tmp_path, rng):
    dataset, outputs, _ = build_fixture_dataset(tmp_path, rng, error=0.0)
    report = run_benchmark(str(dataset), str(outputs),
                           embedder=loopback_client())
    for row in report.rows:
        assert row.psnr_part == math.inf
        assert abs(row.ssim_part - 1.0) < 1e-9
        assert abs(row.dtis - 1.0) < 1e-6


def test_benchmark_missing_scene(tmp_path, rng):
    dataset, outputs, _ = build_fixture_dataset(tmp_path, rng)
    import shutil
    shutil.rmtree(outputs / "scene_b")
    with pytest.raises(MissingScene):
        run_benchmark(str(dataset), str(outputs))


def test_benchmark_camera_mismatch(tmp_path, rng):
    dataset, outputs, _ = build_fixture_dataset(tmp_path, rng)
    os.rename(outputs / "scene_a" / "cam0.png",
              outputs / "scene_a" / "cam9.png")
    with pytest.raises(CameraMismatch):
        run_benchmark(str(dataset), str(outputs))


def test_report_csv_format(tmp_path):
    report = MetricsReport(rows=[
        SceneMetrics("s1", math.inf, 1.0, 0.6, 0.5),
        SceneMetrics("s2", 20.0, 0.8, 0.7, 0.6),
    ])
    path = tmp_path / "report.csv"
    report.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "scene,psnr_part,ssim_part,ctis,dtis"
    assert lines[1].startswith("s1,inf,")
    assert lines[-1].startswith("average,")
    jpath = tmp_path / "report.json"
    report.to_json(jpath)
    doc = json.loads(jpath.read_text())
    assert doc["metadata"]["reference_averages"]["ctis"] == 0.627
