"""Evaluation metrics (object-masked PSNR, object-box SSIM, embedding
similarities) and the directory-layout benchmark harness.

Expected dataset layout:
    root/<scene>/{object,scene,object_scene}/images/<cam_id>.png
    root/<scene>/object_scene/masks/<cam_id>.png     (optional; else rendered)
    root/<scene>/object_scene/cameras.json           (id -> camera)
    root/<scene>/object_scene/points.cloud           (needed to render masks)
    root/<scene>/prompts.json                        (optional, for CTIS)
Method outputs: outputs/<scene>/<cam_id>.png
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BoxTooSmall,
    CameraMismatch,
    EmptyMask,
    InvariantViolation,
    MissingScene,
    ShapeMismatch,
)
from .gauss_model import IndexRange, load_cloud
from .imgio import load_png
from .splat_render import Camera, render_mask

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# Published averages of the reference method, kept as regression constants for
# report formatting only; they are not reproducible at desk scale.
REFERENCE_AVERAGES = {"psnr_part": 8.863, "ssim_part": 0.540,
                      "ctis": 0.627, "dtis": 0.509}


def psnr_part(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """PSNR over masked pixels only; peak 1.0; +inf when MSE is zero."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    sel = np.asarray(mask, dtype=np.float64) > 0.5
    if sel.shape != pred.shape[:2]:
        raise ShapeMismatch(f"mask {sel.shape} vs image {pred.shape[:2]}")
    if not sel.any():
        raise EmptyMask("mask selects no pixels")
    diff = (pred - gt)[sel]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1D window along both axes."""
    from numpy.lib.stride_tricks import sliding_window_view
    tmp = sliding_window_view(img, len(w), axis=0) @ w
    return sliding_window_view(tmp, len(w), axis=1) @ w


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) on [0,1] images.

    Windows fully inside the image only, matching the usual cropped-mean
    definition; multichannel images average per-channel scores.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    h, w_ = pred.shape[:2]
    if h < SSIM_WINDOW or w_ < SSIM_WINDOW:
        raise BoxTooSmall(f"need >= {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w_}")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    scores = []
    for ch in range(pred.shape[2]):
        x, y = pred[..., ch], gt[..., ch]
        mu_x = _filter_valid(x, win)
        mu_y = _filter_valid(y, win)
        mu_xx = _filter_valid(x * x, win)
        mu_yy = _filter_valid(y * y, win)
        mu_xy = _filter_valid(x * y, win)
        var_x = mu_xx - mu_x * mu_x
        var_y = mu_yy - mu_y * mu_y
        cov = mu_xy - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def bbox_from_mask(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight inclusive (ymin, xmin, ymax, xmax) box of nonzero mask pixels."""
    sel = np.asarray(mask, dtype=np.float64) > 0.5
    ys, xs = np.nonzero(sel)
    if ys.size == 0:
        raise EmptyMask("mask selects no pixels")
    return int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max())


def ssim_part(pred: np.ndarray, gt: np.ndarray,
              bbox: tuple[int, int, int, int]) -> float:
    """SSIM restricted to an inclusive (ymin, xmin, ymax, xmax) crop."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    y0, x0, y1, x1 = bbox
    h, w_ = pred.shape[:2]
    if not (0 <= y0 <= y1 < h and 0 <= x0 <= x1 < w_):
        raise InvariantViolation(f"bbox {bbox} outside image {h}x{w_}")
    if y1 - y0 + 1 < SSIM_WINDOW or x1 - x0 + 1 < SSIM_WINDOW:
        raise BoxTooSmall(f"bbox {bbox} smaller than {SSIM_WINDOW}x{SSIM_WINDOW}")
    return ssim(pred[y0:y1 + 1, x0:x1 + 1], gt[y0:y1 + 1, x0:x1 + 1])


def _unit_cos_to_01(cos: float) -> float:
    return (cos + 1.0) / 2.0


def ctis(image: np.ndarray, prompt: str, embedder) -> float:
    """Prompt/image embedding similarity, linearly remapped to [0, 1]."""
    e_img = embedder.embed_image(image)
    e_txt = embedder.embed_text(prompt)
    return _unit_cos_to_01(float(np.dot(e_img, e_txt)))


def dtis(image_tgt: np.ndarray, image_init: np.ndarray, embedder) -> float:
    """Target/initial image embedding similarity, remapped to [0, 1]."""
    e_t = embedder.embed_image(image_tgt)
    e_i = embedder.embed_image(image_init)
    return _unit_cos_to_01(float(np.dot(e_t, e_i)))


# --- benchmark harness ---

@dataclass
class SceneMetrics:
    scene: str
    psnr_part: float
    ssim_part: float
    ctis: float | None = None
    dtis: float | None = None


@dataclass
class MetricsReport:
    rows: list[SceneMetrics]
    metadata: dict = field(default_factory=dict)

    def _avg(self, key: str) -> float | None:
        vals = [getattr(r, key) for r in self.rows]
        if any(v is None for v in vals) or not vals:
            return None
        return float(np.mean([v for v in vals]))

    @property
    def average(self) -> SceneMetrics:
        return SceneMetrics(
            scene="average",
            psnr_part=self._avg("psnr_part"),
            ssim_part=self._avg("ssim_part"),
            ctis=self._avg("ctis"),
            dtis=self._avg("dtis"),
        )

    def to_csv(self, path) -> None:
        def fmt(v):
            if v is None:
                return ""
            return "inf" if v == math.inf else f"{v:.6f}"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scene", "psnr_part", "ssim_part", "ctis", "dtis"])
            for r in self.rows + [self.average]:
                writer.writerow([r.scene, fmt(r.psnr_part), fmt(r.ssim_part),
                                 fmt(r.ctis), fmt(r.dtis)])

    def to_json(self, path) -> None:
        def enc(v):
            return "inf" if v == math.inf else v
        doc = {
            "rows": [{"scene": r.scene, "psnr_part": enc(r.psnr_part),
                      "ssim_part": enc(r.ssim_part), "ctis": r.ctis,
                      "dtis": r.dtis} for r in self.rows],
            "average": {k: enc(v) for k, v in vars(self.average).items()},
            "metadata": {**self.metadata,
                         "reference_averages": REFERENCE_AVERAGES},
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)


def _scene_cameras(scene_dir: str) -> dict[str, Camera]:
    path = os.path.join(scene_dir, "object_scene", "cameras.json")
    with open(path) as fh:
        doc = json.load(fh)
    return {cid: Camera.from_json(c) for cid, c in doc["cameras"].items()}


def _scene_mask(scene_dir: str, cam_id: str, cameras: dict) -> np.ndarray:
    mask_path = os.path.join(scene_dir, "object_scene", "masks", f"{cam_id}.png")
    if os.path.exists(mask_path):
        return load_png(mask_path)
    cloud_path = os.path.join(scene_dir, "object_scene", "points.cloud")
    with open(os.path.join(scene_dir, "object_scene", "object_range.json")) as fh:
        rng = json.load(fh)
    cloud = load_cloud(cloud_path)
    return render_mask(cloud, cameras[cam_id],
                       IndexRange(rng["start"], rng["stop"]))


def run_benchmark(dataset_root: str, outputs_dir: str,
                  embedder=None) -> MetricsReport:
    """Score method outputs against the dataset over matched camera ids."""
    scenes = sorted(d for d in os.listdir(dataset_root)
                    if os.path.isdir(os.path.join(dataset_root, d)))
    if not scenes:
        raise MissingScene(f"no scenes under {dataset_root}")
    rows = []
    for scene in scenes:
        scene_dir = os.path.join(dataset_root, scene)
        out_dir = os.path.join(outputs_dir, scene)
        if not os.path.isdir(out_dir):
            raise MissingScene(f"no outputs for scene {scene!r}")
        cameras = _scene_cameras(scene_dir)
        gt_dir = os.path.join(scene_dir, "object_scene", "images")
        init_dir = os.path.join(scene_dir, "scene", "images")
        gt_ids = {os.path.splitext(f)[0] for f in os.listdir(gt_dir)
                  if f.endswith(".png")}
        pred_ids = {os.path.splitext(f)[0] for f in os.listdir(out_dir)
                    if f.endswith(".png")}
        if gt_ids != pred_ids:
            raise CameraMismatch(
                f"scene {scene!r}: dataset ids {sorted(gt_ids)} vs "
                f"outputs {sorted(pred_ids)}")
        prompt = None
        prompt_path = os.path.join(scene_dir, "prompts.json")
        if os.path.exists(prompt_path):
            with open(prompt_path) as fh:
                prompt = json.load(fh).get("target")

        psnrs, ssims, ctis_vals, dtis_vals = [], [], [], []
        for cam_id in sorted(gt_ids):
            pred = load_png(os.path.join(out_dir, f"{cam_id}.png"))
            gt = load_png(os.path.join(gt_dir, f"{cam_id}.png"))
            mask = _scene_mask(scene_dir, cam_id, cameras)
            psnrs.append(psnr_part(pred, gt, mask))
            ssims.append(ssim_part(pred, gt, bbox_from_mask(mask)))
            if embedder is not None and prompt:
                ctis_vals.append(ctis(pred, prompt, embedder))
            if embedder is not None:
                init_path = os.path.join(init_dir, f"{cam_id}.png")
                if os.path.exists(init_path):
                    dtis_vals.append(dtis(pred, load_png(init_path), embedder))
        rows.append(SceneMetrics(
            scene=scene,
            psnr_part=float(np.mean(psnrs)),
            ssim_part=float(np.mean(ssims)),
            ctis=float(np.mean(ctis_vals)) if ctis_vals else None,
            dtis=float(np.mean(dtis_vals)) if dtis_vals else None,
        ))
    meta = {"embedder": getattr(embedder, "describe", lambda: None)()
            if embedder is not None else None}
    return MetricsReport(rows=rows, metadata=meta)
