"""Forward splatting renderer with analytic gradients for color/SH parameters.

Gaussians are projected to screen space via the standard EWA linearization,
depth-sorted globally, and alpha-composited front to back. The bundle records
per-pixel compositing weights w_i = alpha_i * prod_{j<i}(1 - alpha_j), which
make the color/SH gradient a frozen linear map: no autodiff machinery needed
because geometry and opacity are never optimized here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import sh
from .errors import DegenerateCovariance, InvariantViolation, ShapeMismatch
from .gauss_model import GaussianCloud, as_indices, quat_to_rotmat

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
COV2D_DILATION = 0.3  # px^2 added to the diagonal, standard anti-aliasing


@dataclass
class Camera:
    """Pinhole camera: world-to-camera rigid transform plus intrinsics."""

    world_to_cam: np.ndarray  # 4x4, row-major
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise InvariantViolation("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvariantViolation("image size must be positive")
        if not 0 < self.near < self.far:
            raise InvariantViolation("need 0 < near < far")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "world_to_cam": [[float(v) for v in row] for row in self.world_to_cam],
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(
            world_to_cam=np.asarray(d["world_to_cam"], dtype=np.float64),
            fx=float(d["fx"]), fy=float(d["fy"]),
            cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            near=float(d.get("near", 0.01)), far=float(d.get("far", 100.0)),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "Camera":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def look_at(eye, target, up=(0.0, 1.0, 0.0), **intrinsics) -> Camera:
    """Camera at `eye` looking at `target` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise InvariantViolation("view direction parallel to up vector")
    x = x / nx
    y = np.cross(z, x)
    w2c = np.eye(4)
    w2c[:3, :3] = np.stack([x, y, z])
    w2c[:3, 3] = -w2c[:3, :3] @ eye
    return Camera(world_to_cam=w2c, **intrinsics)


@dataclass
class RenderBundle:
    """Rendered image plus the compositing state needed for color gradients.

    weights are CSR over pixels (row-major): for pixel p, entries
    [pixel_ptr[p], pixel_ptr[p+1]) hold (gauss_index, weight) pairs in
    front-to-back order; weights sum to alpha at that pixel.
    """

    rgb: np.ndarray     # (H, W, 3) in [0, 1]
    alpha: np.ndarray   # (H, W) in [0, 1]
    depth: np.ndarray   # (H, W) alpha-weighted expected depth, meters
    pixel_ptr: np.ndarray    # (H*W + 1,) int64
    gauss_index: np.ndarray  # (nnz,) int64, indices into the cloud
    weight: np.ndarray       # (nnz,) float64, w_i >= 0
    background: np.ndarray   # (3,)
    active_sh_degree: int
    cov2d_dilation: float = COV2D_DILATION

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def weights_at(self, y: int, x: int) -> list[tuple[int, float]]:
        p = y * self.width + x
        lo, hi = self.pixel_ptr[p], self.pixel_ptr[p + 1]
        return [(int(i), float(w)) for i, w in
                zip(self.gauss_index[lo:hi], self.weight[lo:hi])]

    def accumulate_mask(self, index_set, n_gaussians: int) -> np.ndarray:
        """Per-pixel sum of weights over the given Gaussian index set."""
        idx = as_indices(index_set, n_gaussians)
        member = np.zeros(n_gaussians, dtype=bool)
        member[idx] = True
        mask_flat = np.zeros(self.height * self.width, dtype=np.float64)
        sel = member[self.gauss_index]
        if np.any(sel):
            pixels = np.repeat(np.arange(self.height * self.width),
                               np.diff(self.pixel_ptr))
            np.add.at(mask_flat, pixels[sel], self.weight[sel])
        return mask_flat.reshape(self.height, self.width)


@dataclass
class ColorGrad:
    """Gradient w.r.t. SH coefficients, shaped like the cloud's stack."""

    d_sh: np.ndarray  # (N, K, 3)

    @property
    def d_dc(self) -> np.ndarray:
        return self.d_sh[:, 0, :]

    @property
    def d_rest(self) -> np.ndarray:
        return self.d_sh[:, 1:, :]


def _camera_space(cloud: GaussianCloud, cam: Camera):
    means = cloud.means.astype(np.float64)
    xc = means @ cam.rotation.T + cam.translation
    return means, xc


def _projected_gaussians(cloud: GaussianCloud, cam: Camera):
    """Project to screen space; returns per-Gaussian splat parameters.

    Culls Gaussians behind the near plane. Output arrays are depth-sorted
    front to back with index as the deterministic tie-break.
    """
    n = len(cloud)
    means_w, xc = _camera_space(cloud, cam)
    z = xc[:, 2]
    keep = z > cam.near
    orig = np.nonzero(keep)[0]
    if orig.size == 0:
        return None
    xc = xc[keep]
    z = z[keep]

    u = cam.fx * xc[:, 0] / z + cam.cx
    v = cam.fy * xc[:, 1] / z + cam.cy

    # Sigma_3d = R S^2 R^T, then EWA: Sigma_2d = J W Sigma_3d W^T J^T
    rot = quat_to_rotmat(cloud.quats_raw[orig])
    s = np.exp(cloud.log_scales[orig].astype(np.float64))
    m = rot * s[:, None, :]
    cov3d = m @ np.transpose(m, (0, 2, 1))
    w = cam.rotation
    cov_cam = w @ cov3d @ w.T

    invz = 1.0 / z
    jac = np.zeros((orig.size, 2, 3))
    jac[:, 0, 0] = cam.fx * invz
    jac[:, 0, 2] = -cam.fx * xc[:, 0] * invz * invz
    jac[:, 1, 1] = cam.fy * invz
    jac[:, 1, 2] = -cam.fy * xc[:, 1] * invz * invz
    cov2d = jac @ cov_cam @ np.transpose(jac, (0, 2, 1))
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    if np.any(det <= 0) or not np.all(np.isfinite(det)):
        raise DegenerateCovariance("non-invertible 2D covariance after dilation")
    # conic = inverse covariance, (a, b, c) with quad form a dx^2 + 2b dxdy + c dy^2
    conic = np.stack([cov2d[:, 1, 1] / det,
                      -cov2d[:, 0, 1] / det,
                      cov2d[:, 0, 0] / det], axis=1)

    order = np.lexsort((orig, z))  # front-to-back, stable on index
    return {
        "orig": orig[order],
        "z": z[order],
        "uv": np.stack([u, v], axis=1)[order],
        "conic": conic[order],
        "opacity": cloud.opacities[orig].astype(np.float64)[order],
    }


def _gaussian_colors(cloud: GaussianCloud, cam: Camera, degree: int):
    """Per-Gaussian decoded color and the clamp gate, at the camera's view dirs.

    Returns (colors (N, 3), gate (N, 3) bool, basis (N, K_active)).
    """
    dirs = cloud.means.astype(np.float64) - cam.center
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    dirs = dirs / norms
    basis = sh.sh_basis(dirs, degree)
    k = sh.num_coeffs(degree)
    coeffs = cloud.sh_coeffs.astype(np.float64)[:, :k, :]
    raw = 0.5 + np.einsum("nk,nkc->nc", basis, coeffs)
    gate = (raw > 0.0) & (raw < 1.0)
    return np.clip(raw, 0.0, 1.0), gate, basis


def render(cloud: GaussianCloud, cam: Camera, background=(0.0, 0.0, 0.0),
           chunk_size: int = 512) -> RenderBundle:
    """Splat a cloud to an image, recording per-pixel compositing weights."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    h, w = cam.height, cam.width
    npix = h * w

    proj = _projected_gaussians(cloud, cam)
    if proj is None:
        return RenderBundle(
            rgb=np.tile(bg, (h, w, 1)), alpha=np.zeros((h, w)),
            depth=np.zeros((h, w)),
            pixel_ptr=np.zeros(npix + 1, dtype=np.int64),
            gauss_index=np.zeros(0, dtype=np.int64), weight=np.zeros(0),
            background=bg, active_sh_degree=cloud.active_sh_degree)

    colors, _, _ = _gaussian_colors(cloud, cam, cloud.active_sh_degree)
    colors = colors[proj["orig"]]

    ys, xs = np.mgrid[0:h, 0:w]
    px = xs.ravel().astype(np.float64)
    py = ys.ravel().astype(np.float64)

    transmittance = np.ones(npix)
    accum_rgb = np.zeros((npix, 3))
    accum_depth = np.zeros(npix)
    ent_pos, ent_pix, ent_idx, ent_w = [], [], [], []

    m = proj["orig"].size
    for lo in range(0, m, chunk_size):
        hi = min(lo + chunk_size, m)
        uv = proj["uv"][lo:hi]
        conic = proj["conic"][lo:hi]
        dx = px[None, :] - uv[:, 0:1]
        dy = py[None, :] - uv[:, 1:2]
        power = -0.5 * (conic[:, 0:1] * dx * dx
                        + 2.0 * conic[:, 1:2] * dx * dy
                        + conic[:, 2:3] * dy * dy)
        alpha = proj["opacity"][lo:hi, None] * np.exp(power)
        np.minimum(alpha, ALPHA_CLAMP, out=alpha)
        alpha[alpha < ALPHA_SKIP] = 0.0

        # within-chunk exclusive cumulative transmittance, then fold running T
        one_minus = 1.0 - alpha
        t_within = np.cumprod(one_minus, axis=0)
        t_before = np.vstack([np.ones((1, npix)), t_within[:-1]])
        wts = alpha * t_before * transmittance[None, :]

        gi, pi = np.nonzero(wts)
        if gi.size:
            ent_pos.append(gi + lo)
            ent_pix.append(pi)
            ent_idx.append(proj["orig"][lo:hi][gi])
            ent_w.append(wts[gi, pi])
        accum_rgb += wts.T @ colors[lo:hi]
        accum_depth += proj["z"][lo:hi] @ wts
        transmittance *= t_within[-1]

    alpha_img = 1.0 - transmittance
    rgb = accum_rgb + transmittance[:, None] * bg
    depth = np.where(alpha_img > 0, accum_depth / np.maximum(alpha_img, 1e-300), 0.0)

    if ent_pos:
        pos = np.concatenate(ent_pos)
        pix = np.concatenate(ent_pix)
        idx = np.concatenate(ent_idx)
        wval = np.concatenate(ent_w)
        order = np.lexsort((pos, pix))  # pixel-major, front-to-back inside
        pix, idx, wval = pix[order], idx[order], wval[order]
        ptr = np.zeros(npix + 1, dtype=np.int64)
        np.add.at(ptr, pix + 1, 1)
        np.cumsum(ptr, out=ptr)
    else:
        ptr = np.zeros(npix + 1, dtype=np.int64)
        idx = np.zeros(0, dtype=np.int64)
        wval = np.zeros(0)

    return RenderBundle(
        rgb=rgb.reshape(h, w, 3), alpha=alpha_img.reshape(h, w),
        depth=depth.reshape(h, w), pixel_ptr=ptr, gauss_index=idx, weight=wval,
        background=bg, active_sh_degree=cloud.active_sh_degree)


def render_mask(cloud: GaussianCloud, cam: Camera, index_set) -> np.ndarray:
    """Per-pixel compositing weight mass of the given Gaussians, in [0, 1]."""
    bundle = render(cloud, cam)
    return bundle.accumulate_mask(index_set, len(cloud))


def recolor(bundle: RenderBundle, cloud: GaussianCloud, cam: Camera,
            active_sh_degree: int | None = None) -> RenderBundle:
    """Recompute rgb for new colors with frozen compositing weights.

    Valid while geometry and opacity are unchanged from the bundle's render;
    returns a new bundle sharing the weight arrays.
    """
    degree = cloud.active_sh_degree if active_sh_degree is None else active_sh_degree
    colors, _, _ = _gaussian_colors(cloud, cam, degree)
    npix = bundle.height * bundle.width
    pixels = np.repeat(np.arange(npix), np.diff(bundle.pixel_ptr))
    entry_colors = colors[bundle.gauss_index]
    rgb = np.stack(
        [np.bincount(pixels, weights=bundle.weight * entry_colors[:, ch],
                     minlength=npix) for ch in range(3)], axis=1)
    rgb += (1.0 - bundle.alpha.reshape(-1, 1)) * bundle.background
    return RenderBundle(
        rgb=rgb.reshape(bundle.height, bundle.width, 3), alpha=bundle.alpha,
        depth=bundle.depth, pixel_ptr=bundle.pixel_ptr,
        gauss_index=bundle.gauss_index, weight=bundle.weight,
        background=bundle.background, active_sh_degree=degree,
        cov2d_dilation=bundle.cov2d_dilation)


def backprop_color(bundle: RenderBundle, cloud: GaussianCloud, cam: Camera,
                   dL_dimage: np.ndarray) -> ColorGrad:
    """Pull an image cotangent back to SH coefficients through frozen weights.

    d rgb(p) / d c_{lm, i, ch} = w_i(p) * Y_lm(view_dir_i) while the decoded
    color is strictly inside (0, 1); the clamp gates the gradient to zero
    otherwise. Coefficients above the bundle's active degree get zero.
    """
    dL = np.asarray(dL_dimage, dtype=np.float64)
    h, w = bundle.height, bundle.width
    if dL.shape != (h, w, 3):
        raise ShapeMismatch(f"dL_dimage must be {(h, w, 3)}, got {dL.shape}")

    n = len(cloud)
    k_total = (cloud.l_max + 1) ** 2
    grad = np.zeros((n, k_total, 3))
    if bundle.gauss_index.size == 0:
        return ColorGrad(grad)

    # s_{i,ch} = sum_p w_i(p) dL(p,ch)
    pixels = np.repeat(np.arange(h * w), np.diff(bundle.pixel_ptr))
    contrib = bundle.weight[:, None] * dL.reshape(-1, 3)[pixels]
    s = np.zeros((n, 3))
    np.add.at(s, bundle.gauss_index, contrib)

    degree = bundle.active_sh_degree
    _, gate, basis = _gaussian_colors(cloud, cam, degree)
    k = sh.num_coeffs(degree)
    grad[:, :k, :] = basis[:, :, None] * (s * gate)[:, None, :]
    return ColorGrad(grad)


def depth_to_condition(bundle: RenderBundle, cam: Camera) -> np.ndarray:
    """Map expected depth to a [0,1] inverse-depth conditioning image.

    Near surfaces map toward 1, far toward 0; empty pixels are 0.
    """
    inv_near, inv_far = 1.0 / cam.near, 1.0 / cam.far
    d = bundle.depth
    with np.errstate(divide="ignore"):
        inv = np.where(d > 0, 1.0 / np.maximum(d, 1e-12), inv_far)
    cond = (inv - inv_far) / (inv_near - inv_far)
    cond = np.clip(cond, 0.0, 1.0)
    return np.where(bundle.alpha > 0, cond, 0.0)
