"""Gaussian cloud data model, file I/O, rigid insertion, and appearance init.

Storage follows the de-facto splat export layout: a PLY-style binary file with
float32 attributes x,y,z, f_dc_*, f_rest_*, opacity, scale_* (log-stored),
rot_* (unnormalized wxyz). The in-memory cloud keeps exactly those arrays, so
save/load round-trips are bit-identical; linear scales and unit rotations are
exposed as derived views.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyRange, InvariantViolation, IoFailure, MalformedFile

L_MAX_DEFAULT = 3


# --- quaternion helpers (wxyz convention) ---

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0) or not np.all(np.isfinite(n)):
        raise InvariantViolation("quaternion with zero or non-finite norm")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, wxyz, broadcasting over leading dims."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (..., 4) wxyz -> rotation matrix (..., 3, 3)."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


# --- index ranges ---

@dataclass(frozen=True)
class IndexRange:
    """Half-open [start, stop) range of Gaussian indices."""

    start: int
    stop: int

    def __post_init__(self):
        if self.start < 0 or self.stop < self.start:
            raise InvariantViolation(f"bad index range [{self.start}, {self.stop})")

    def __len__(self) -> int:
        return self.stop - self.start

    def to_array(self) -> np.ndarray:
        return np.arange(self.start, self.stop, dtype=np.int64)


def as_indices(index_set, n: int) -> np.ndarray:
    """Normalize an IndexRange or array-like of indices, bounds-checked against n."""
    if isinstance(index_set, IndexRange):
        idx = index_set.to_array()
    else:
        idx = np.asarray(index_set, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise InvariantViolation(f"indices out of bounds for cloud of size {n}")
    return idx


# --- the cloud ---

class GaussianCloud:
    """A set of 3D Gaussians: means, scales, rotations, opacities, SH colors.

    Canonical arrays (all float32, bit-preserved by save/load):
      means      (N, 3)        positions, scene units
      f_dc       (N, 3)        degree-0 SH coefficient per channel
      sh_rest    (N, K-1, 3)   degree >= 1 coefficients, K = (L_max+1)^2
      opacities  (N,)          in [0, 1]
      log_scales (N, 3)        log of the per-axis scale
      quats_raw  (N, 4)        wxyz, not necessarily unit

    Values are treated as immutable after construction; builder-style methods
    return new clouds and never alias mutable state with the receiver.
    """

    def __init__(self, means, log_scales, quats_raw, opacities, f_dc, sh_rest,
                 active_sh_degree: int | None = None):
        self.means = np.ascontiguousarray(means, dtype=np.float32)
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float32)
        self.quats_raw = np.ascontiguousarray(quats_raw, dtype=np.float32)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float32)
        self.f_dc = np.ascontiguousarray(f_dc, dtype=np.float32)
        self.sh_rest = np.ascontiguousarray(sh_rest, dtype=np.float32)

        n = self.means.shape[0]
        if self.means.shape != (n, 3):
            raise InvariantViolation(f"means must be (N, 3), got {self.means.shape}")
        for name, arr, shape in [
            ("log_scales", self.log_scales, (n, 3)),
            ("quats_raw", self.quats_raw, (n, 4)),
            ("opacities", self.opacities, (n,)),
            ("f_dc", self.f_dc, (n, 3)),
        ]:
            if arr.shape != shape:
                raise InvariantViolation(f"{name} must be {shape}, got {arr.shape}")
        if self.sh_rest.ndim != 3 or self.sh_rest.shape[0] != n or self.sh_rest.shape[2] != 3:
            raise InvariantViolation(f"sh_rest must be (N, K-1, 3), got {self.sh_rest.shape}")

        k = self.sh_rest.shape[1] + 1
        l_max = int(math.isqrt(k)) - 1
        if (l_max + 1) ** 2 != k:
            raise InvariantViolation(f"{k} SH coefficients is not a full degree set")
        self.l_max = l_max
        if active_sh_degree is None:
            active_sh_degree = l_max
        if not 0 <= active_sh_degree <= l_max:
            raise InvariantViolation(
                f"active_sh_degree {active_sh_degree} outside [0, {l_max}]")
        self.active_sh_degree = int(active_sh_degree)

        for name, arr in [("means", self.means), ("log_scales", self.log_scales),
                          ("quats_raw", self.quats_raw), ("opacities", self.opacities),
                          ("f_dc", self.f_dc), ("sh_rest", self.sh_rest)]:
            if not np.all(np.isfinite(arr)):
                raise InvariantViolation(f"non-finite values in {name}")
        if n and (self.opacities.min() < 0.0 or self.opacities.max() > 1.0):
            raise InvariantViolation("opacity out of [0, 1]")
        if n:
            norms = np.linalg.norm(self.quats_raw.astype(np.float64), axis=1)
            if np.any(norms == 0.0):
                raise InvariantViolation("zero-norm quaternion")

    # --- construction helpers ---

    @classmethod
    def from_linear(cls, means, scales, rotations, opacities, sh_coeffs,
                    active_sh_degree: int | None = None) -> "GaussianCloud":
        """Build from linear scales, unit rotations, and a (N, K, 3) SH stack."""
        scales = np.asarray(scales, dtype=np.float64)
        if np.any(scales <= 0):
            raise InvariantViolation("scales must be positive")
        sh = np.asarray(sh_coeffs, dtype=np.float32)
        if sh.ndim != 3 or sh.shape[2] != 3:
            raise InvariantViolation(f"sh_coeffs must be (N, K, 3), got {sh.shape}")
        return cls(
            means=means,
            log_scales=np.log(scales),
            quats_raw=rotations,
            opacities=opacities,
            f_dc=sh[:, 0, :],
            sh_rest=sh[:, 1:, :],
            active_sh_degree=active_sh_degree,
        )

    @classmethod
    def empty(cls, l_max: int = L_MAX_DEFAULT) -> "GaussianCloud":
        k = (l_max + 1) ** 2
        z = np.zeros
        return cls(z((0, 3)), z((0, 3)), z((0, 4)), z((0,)), z((0, 3)), z((0, k - 1, 3)),
                   active_sh_degree=0)

    # --- derived views ---

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def scales(self) -> np.ndarray:
        """Linear, strictly positive per-axis scales, float64."""
        return np.exp(self.log_scales.astype(np.float64))

    @property
    def rotations(self) -> np.ndarray:
        """Unit quaternions (wxyz), float64."""
        return quat_normalize(self.quats_raw)

    @property
    def sh_coeffs(self) -> np.ndarray:
        """(N, K, 3) stack: degree-0 first, then degrees 1..L_max."""
        return np.concatenate([self.f_dc[:, None, :], self.sh_rest], axis=1)

    def with_appearance(self, f_dc: np.ndarray, sh_rest: np.ndarray,
                        active_sh_degree: int | None = None) -> "GaussianCloud":
        """New cloud with replaced color coefficients; geometry arrays shared."""
        return GaussianCloud(
            self.means, self.log_scales, self.quats_raw, self.opacities,
            f_dc, sh_rest,
            self.active_sh_degree if active_sh_degree is None else active_sh_degree,
        )

    def with_active_degree(self, degree: int) -> "GaussianCloud":
        return self.with_appearance(self.f_dc, self.sh_rest, degree)

    def subset(self, index_set) -> "GaussianCloud":
        idx = as_indices(index_set, len(self))
        return GaussianCloud(
            self.means[idx], self.log_scales[idx], self.quats_raw[idx],
            self.opacities[idx], self.f_dc[idx], self.sh_rest[idx],
            self.active_sh_degree,
        )

    def drop(self, index_set) -> "GaussianCloud":
        keep = np.ones(len(self), dtype=bool)
        keep[as_indices(index_set, len(self))] = False
        return self.subset(np.nonzero(keep)[0])

    def bit_identical(self, other: "GaussianCloud", index_set=None) -> bool:
        """Exact equality of canonical attribute bits (optionally on a subset)."""
        if index_set is None:
            idx = np.arange(len(self))
        else:
            idx = as_indices(index_set, len(self))
        if len(self) != len(other) and index_set is None:
            return False
        return all(
            np.array_equal(a[idx], b[idx])
            for a, b in [
                (self.means, other.means), (self.log_scales, other.log_scales),
                (self.quats_raw, other.quats_raw), (self.opacities, other.opacities),
                (self.f_dc, other.f_dc), (self.sh_rest, other.sh_rest),
            ]
        )


# --- file I/O ---

_HEADER_MAGIC = "ply"


def _attribute_names(k: int) -> list[str]:
    names = ["x", "y", "z"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * (k - 1))]
    names += ["opacity"]
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    return names


def _write_header(fh, names: list[str], count: int) -> None:
    lines = [_HEADER_MAGIC, "format binary_little_endian 1.0",
             f"element vertex {count}"]
    lines += [f"property float {n}" for n in names]
    lines.append("end_header")
    fh.write(("\n".join(lines) + "\n").encode("ascii"))


def _read_header(fh) -> tuple[int, list[str]]:
    lines = []
    while True:
        line = fh.readline()
        if not line:
            raise MalformedFile("unterminated header")
        text = line.decode("ascii", errors="replace").strip()
        lines.append(text)
        if text == "end_header":
            break
        if len(lines) > 4096:
            raise MalformedFile("header too long")
    if not lines or lines[0] != _HEADER_MAGIC:
        raise MalformedFile("missing magic line")
    count = None
    names = []
    for text in lines[1:-1]:
        if text.startswith("format"):
            if "binary_little_endian" not in text:
                raise MalformedFile(f"unsupported format: {text}")
        elif text.startswith("element vertex"):
            try:
                count = int(text.split()[-1])
            except ValueError as e:
                raise MalformedFile(f"bad element count: {text}") from e
        elif text.startswith("element"):
            raise MalformedFile(f"unsupported element: {text}")
        elif text.startswith("property"):
            parts = text.split()
            if len(parts) != 3 or parts[1] != "float":
                raise MalformedFile(f"unsupported property: {text}")
            names.append(parts[2])
        elif text.startswith("comment"):
            continue
        else:
            raise MalformedFile(f"unrecognized header line: {text}")
    if count is None:
        raise MalformedFile("header missing vertex count")
    if count < 0:
        raise MalformedFile("negative vertex count")
    return count, names


def _read_records(fh, count: int, names: list[str]) -> np.ndarray:
    data = fh.read()
    expected = count * len(names) * 4
    if len(data) != expected:
        raise MalformedFile(
            f"payload is {len(data)} bytes, expected {expected} "
            f"({count} records x {len(names)} float32 attributes)")
    return np.frombuffer(data, dtype="<f4").reshape(count, len(names))


def save_cloud(cloud: GaussianCloud, path) -> None:
    """Write a cloud to the binary point-attribute format (bit-preserving)."""
    k = (cloud.l_max + 1) ** 2
    names = _attribute_names(k)
    n = len(cloud)
    # f_rest is channel-major on disk: index = channel * (K-1) + coeff
    rest = np.transpose(cloud.sh_rest, (0, 2, 1)).reshape(n, 3 * (k - 1))
    table = np.concatenate(
        [cloud.means, cloud.f_dc, rest, cloud.opacities[:, None],
         cloud.log_scales, cloud.quats_raw], axis=1).astype("<f4")
    try:
        with open(path, "wb") as fh:
            _write_header(fh, names, n)
            fh.write(table.tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write cloud to {path}: {e}") from e


def load_cloud(path, opacity_activation: str = "linear") -> GaussianCloud:
    """Load a cloud file.

    opacity_activation: "linear" (default) expects the stored opacity already
    in [0, 1]; "logit" applies a sigmoid for raw optimizer exports.
    """
    try:
        with open(path, "rb") as fh:
            count, names = _read_header(fh)
            table = _read_records(fh, count, names)
    except OSError as e:
        raise IoFailure(f"cannot read cloud from {path}: {e}") from e

    cols = {name: table[:, i] for i, name in enumerate(names)}
    required = {"x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
                "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1", "f_dc_2"}
    missing = required - set(names)
    if missing:
        raise MalformedFile(f"missing attributes: {sorted(missing)}")
    n_rest = sum(1 for n in names if n.startswith("f_rest_"))
    if n_rest % 3 != 0:
        raise MalformedFile(f"f_rest count {n_rest} not divisible by 3")
    k = n_rest // 3 + 1
    l_max = int(math.isqrt(k)) - 1
    if (l_max + 1) ** 2 != k:
        raise MalformedFile(f"{k} SH coefficients per channel is not a full degree set")

    means = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    f_dc = np.stack([cols[f"f_dc_{i}"] for i in range(3)], axis=1)
    if n_rest:
        rest_flat = np.stack([cols[f"f_rest_{i}"] for i in range(n_rest)], axis=1)
        sh_rest = np.transpose(rest_flat.reshape(count, 3, k - 1), (0, 2, 1))
    else:
        sh_rest = np.zeros((count, 0, 3), dtype=np.float32)
    opacity = cols["opacity"]
    if opacity_activation == "logit":
        opacity = 1.0 / (1.0 + np.exp(-opacity.astype(np.float64)))
    elif opacity_activation != "linear":
        raise InvariantViolation(f"unknown opacity activation {opacity_activation!r}")
    log_scales = np.stack([cols[f"scale_{i}"] for i in range(3)], axis=1)
    quats = np.stack([cols[f"rot_{i}"] for i in range(4)], axis=1)

    return GaussianCloud(means, log_scales, quats, opacity, f_dc, sh_rest,
                         active_sh_degree=l_max)


def save_points(points: np.ndarray, path) -> None:
    """Write a positions-only cloud file (x, y, z attributes)."""
    pts = np.ascontiguousarray(points, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvariantViolation(f"points must be (N, 3), got {pts.shape}")
    try:
        with open(path, "wb") as fh:
            _write_header(fh, ["x", "y", "z"], pts.shape[0])
            fh.write(pts.tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write points to {path}: {e}") from e


def load_points(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            count, names = _read_header(fh)
            table = _read_records(fh, count, names)
    except OSError as e:
        raise IoFailure(f"cannot read points from {path}: {e}") from e
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise MalformedFile(f"points file missing {axis}")
    idx = [names.index(a) for a in ("x", "y", "z")]
    return table[:, idx].copy()


# --- insertion ---

@dataclass
class InsertionSpec:
    """Rigid placement of an object cloud inside a scene cloud."""

    translation: np.ndarray
    rotation_wxyz: np.ndarray
    uniform_scale: float
    object_range: IndexRange | None = None

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation_wxyz = np.asarray(self.rotation_wxyz, dtype=np.float64).reshape(4)
        if self.uniform_scale <= 0:
            raise InvariantViolation("uniform_scale must be positive")

    @classmethod
    def identity(cls) -> "InsertionSpec":
        return cls(np.zeros(3), np.array([1.0, 0, 0, 0]), 1.0)

    def to_json(self) -> dict:
        d = {
            "translation": [float(v) for v in self.translation],
            "rotation_wxyz": [float(v) for v in self.rotation_wxyz],
            "scale": float(self.uniform_scale),
        }
        if self.object_range is not None:
            d["object_range"] = [self.object_range.start, self.object_range.stop]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "InsertionSpec":
        rng = d.get("object_range")
        return cls(
            translation=np.asarray(d["translation"], dtype=np.float64),
            rotation_wxyz=np.asarray(d["rotation_wxyz"], dtype=np.float64),
            uniform_scale=float(d["scale"]),
            object_range=IndexRange(int(rng[0]), int(rng[1])) if rng else None,
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "InsertionSpec":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def insert_object(scene: GaussianCloud, obj: GaussianCloud, spec: InsertionSpec,
                  zero_higher_sh: bool = True) -> tuple[GaussianCloud, InsertionSpec]:
    """Merge an object cloud into a scene under a rigid similarity transform.

    Object means are scaled, rotated, then translated; quaternions are
    left-multiplied by the spec rotation; scales multiply by the uniform
    scale; opacity and degree-0 color are copied bit-exact. Higher SH degrees
    are zeroed by default since the pipeline reinitializes them anyway;
    zero_higher_sh=False keeps them unrotated for raw previews (view-dependent
    color is then wrong for rotated objects).
    """
    if scene.l_max != obj.l_max:
        raise InvariantViolation("scene and object SH degree sets differ")
    rot_norm = float(np.linalg.norm(spec.rotation_wxyz))
    if abs(rot_norm - 1.0) > 1e-6:
        raise InvariantViolation(f"spec rotation norm {rot_norm} not unit")

    r = quat_to_rotmat(spec.rotation_wxyz)
    means64 = obj.means.astype(np.float64)
    new_means = (spec.uniform_scale * means64) @ r.T + spec.translation
    new_quats = quat_mul(spec.rotation_wxyz, obj.quats_raw.astype(np.float64))
    new_log_scales = obj.log_scales.astype(np.float64) + math.log(spec.uniform_scale)
    new_rest = np.zeros_like(obj.sh_rest) if zero_higher_sh else obj.sh_rest

    merged = GaussianCloud(
        means=np.concatenate([scene.means, new_means.astype(np.float32)]),
        log_scales=np.concatenate([scene.log_scales, new_log_scales.astype(np.float32)]),
        quats_raw=np.concatenate([scene.quats_raw, new_quats.astype(np.float32)]),
        opacities=np.concatenate([scene.opacities, obj.opacities]),
        f_dc=np.concatenate([scene.f_dc, obj.f_dc]),
        sh_rest=np.concatenate([scene.sh_rest, new_rest]),
        active_sh_degree=scene.active_sh_degree,
    )
    out_range = IndexRange(len(scene), len(scene) + len(obj))
    return merged, replace(spec, object_range=out_range)


def init_object_appearance(cloud: GaussianCloud, index_set) -> GaussianCloud:
    """Set object degree-0 colors to their per-channel mean and zero higher SH."""
    idx = as_indices(index_set, len(cloud))
    if idx.size == 0:
        raise EmptyRange("object index set is empty")
    mean_dc = cloud.f_dc[idx].astype(np.float64).mean(axis=0)
    f_dc = cloud.f_dc.copy()
    f_dc[idx] = mean_dc.astype(np.float32)
    sh_rest = cloud.sh_rest.copy()
    sh_rest[idx] = 0.0
    return cloud.with_appearance(f_dc, sh_rest)


# --- SH degree schedule ---

@dataclass(frozen=True)
class SHScheduleConfig:
    """Progressive SH activation: a new degree unlocks every interval steps."""

    sh_degree_interval: int = 5000

    def __post_init__(self):
        if self.sh_degree_interval <= 0:
            raise InvariantViolation("sh_degree_interval must be positive")


def active_degree_at(step: int, cfg: SHScheduleConfig, l_max: int) -> int:
    if step < 0:
        raise InvariantViolation("step must be >= 0")
    return min(l_max, step // cfg.sh_degree_interval)
