"""Personalization dataset builder: renders object views on a randomized
orbit, relights them through the bridge, pulls class-preservation samples, and
emits the fine-tune job manifest the model service executes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from .bridge_client import BridgeClient
from .errors import BridgeFailure, InvariantViolation, MissingSource
from .gauss_model import GaussianCloud
from .guidance import DiffusionSchedule, make_schedule
from .imgio import save_png
from .splat_render import Camera, look_at, render

RARE_TOKEN = "<ktn>"


def default_backgrounds() -> list[str]:
    """The 20 environment prompts from the versioned config file."""
    with resources.files("splatlight.data").joinpath("backgrounds.json").open() as fh:
        return list(json.load(fh)["backgrounds"])


@dataclass(frozen=True)
class TrainRecipe:
    """Fine-tune settings forwarded verbatim to the model service."""

    iters: int = 500
    batch: int = 4
    lr: float = 5e-6
    weight_decay: float = 1e-2
    scheduler: str = "constant"


@dataclass
class PersonalizationPlan:
    object_desc: str
    n_views: int = 32
    backgrounds: list[str] = field(default_factory=default_backgrounds)
    directions: tuple[str, str] = ("left", "right")
    rare_token: str = RARE_TOKEN
    n_class_images: int = 200
    instance_probability: float = 0.7
    train: TrainRecipe = field(default_factory=TrainRecipe)
    render_size: int = 128

    def __post_init__(self):
        if not 0.0 < self.instance_probability < 1.0:
            raise InvariantViolation("instance_probability must be in (0, 1)")
        if self.n_views <= 0:
            raise InvariantViolation("n_views must be positive")
        if not self.backgrounds:
            raise InvariantViolation("backgrounds list is empty")

    @property
    def class_prompt(self) -> str:
        return f"a {self.object_desc}"

    @property
    def instance_prompt(self) -> str:
        return f"a {self.rare_token} {self.object_desc}"

    def to_json(self) -> dict:
        d = asdict(self)
        d["directions"] = list(self.directions)
        d["class_prompt"] = self.class_prompt
        d["instance_prompt"] = self.instance_prompt
        return d


@dataclass(frozen=True)
class ManifestRecord:
    record_id: int
    image: str                  # path relative to the manifest
    prompt: str
    source: str                 # "iclight" | "class"


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    plan: dict
    rng_seed: int

    def by_source(self, source: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.source == source]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"type": "plan", "plan": self.plan,
                                 "rng_seed": self.rng_seed}) + "\n")
            for r in sorted(self.records, key=lambda r: r.record_id):
                fh.write(json.dumps({"type": "record", **asdict(r)}) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        records, plan, seed = [], {}, 0
        with open(path) as fh:
            for line in fh:
                d = json.loads(line)
                if d["type"] == "plan":
                    plan, seed = d["plan"], d["rng_seed"]
                else:
                    d.pop("type")
                    records.append(ManifestRecord(**d))
        return cls(records=records, plan=plan, rng_seed=seed)

    def to_job_payload(self, base_dir: str | None = None) -> dict:
        """The fine-tune job spec sent over the bridge."""
        def path_of(r):
            return os.path.join(base_dir, r.image) if base_dir else r.image
        return {
            "records": [{"image": path_of(r), "prompt": r.prompt,
                         "source": r.source} for r in self.records],
            "instance_probability": self.plan["instance_probability"],
            "rare_token": self.plan["rare_token"],
            "train": dict(self.plan["train"]),
        }


# --- orbit cameras ---

def sample_orbit_angles(rng: np.random.Generator) -> tuple[float, float]:
    """Azimuth uniform on [0, 2pi); elevation uniform on [-10 deg, 40 deg]."""
    azimuth = float(rng.uniform(0.0, 2.0 * math.pi))
    elevation = float(rng.uniform(math.radians(-10.0), math.radians(40.0)))
    return azimuth, elevation


def orbit_camera(cloud: GaussianCloud, azimuth: float, elevation: float,
                 size: int) -> Camera:
    """Camera on a sphere of 2.5x the object's bounding-sphere radius."""
    center = cloud.means.astype(np.float64).mean(axis=0)
    bounding = float(np.linalg.norm(
        cloud.means.astype(np.float64) - center, axis=1).max())
    radius = 2.5 * max(bounding, 1e-3)
    eye = center + radius * np.array([
        math.cos(elevation) * math.cos(azimuth),
        math.sin(elevation),
        math.cos(elevation) * math.sin(azimuth),
    ])
    focal = 1.2 * size
    return look_at(eye, center, fx=focal, fy=focal, cx=size / 2, cy=size / 2,
                   width=size, height=size, near=radius * 0.05, far=radius * 10.0)


# --- class-preservation sampling through the bridge ---

def sample_image_via_bridge(client: BridgeClient, prompt: str,
                            latent_shape: tuple, sched: DiffusionSchedule,
                            seed: int, steps: int = 4,
                            model_id: str | None = None) -> np.ndarray:
    """Deterministic few-step DDIM-style sampler over the remote denoiser."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(latent_shape)
    ts = np.linspace(sched.T, 1, steps).round().astype(int)
    x0 = z
    for i, t in enumerate(ts):
        a, s = sched.alpha(int(t)), sched.sigma(int(t))
        eps = client.predict_noise(z, int(t), prompt, model_id=model_id).epsilon_hat
        x0 = (z - s * eps) / a
        if i + 1 < len(ts):
            a2, s2 = sched.alpha(int(ts[i + 1])), sched.sigma(int(ts[i + 1]))
            z = a2 * x0 + s2 * eps
    return x0


def build_dataset(object_cloud: GaussianCloud, plan: PersonalizationPlan,
                  client: BridgeClient, out_dir: str, rng_seed: int = 0,
                  resume: bool = True,
                  schedule: DiffusionSchedule | None = None) -> DatasetManifest:
    """Render, relight, and sample the fine-tuning dataset; deterministic
    under rng_seed even across resume (each record has its own seed stream).

    On BridgeFailure the partial manifest plus a cursor file are persisted so
    a later call continues where it stopped.
    """
    sched = schedule or make_schedule(1000)
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    cursor_path = os.path.join(out_dir, "cursor.json")

    done = 0
    records: list[ManifestRecord] = []
    if resume and os.path.exists(cursor_path) and os.path.exists(manifest_path):
        existing = DatasetManifest.load(manifest_path)
        with open(cursor_path) as fh:
            done = json.load(fh)["next_record"]
        records = existing.records[:done]

    total = plan.n_views + plan.n_class_images
    latent_hw = plan.render_size // 2

    def persist(records_now: list[ManifestRecord], next_record: int):
        DatasetManifest(records_now, plan.to_json(), rng_seed).save(manifest_path)
        with open(cursor_path, "w") as fh:
            json.dump({"next_record": next_record}, fh)

    try:
        for rid in range(done, total):
            rng = np.random.default_rng([rng_seed, rid])
            if rid < plan.n_views:
                azimuth, elevation = sample_orbit_angles(rng)
                cam = orbit_camera(object_cloud, azimuth, elevation,
                                   plan.render_size)
                img = render(object_cloud, cam, background=(1.0, 1.0, 1.0)).rgb
                bg = plan.backgrounds[int(rng.integers(len(plan.backgrounds)))]
                direction = plan.directions[int(rng.integers(len(plan.directions)))]
                relit = client.relight(img, fg_prompt=plan.class_prompt,
                                       bg_prompt=bg, direction=direction)
                name = f"instance_{rid:04d}.png"
                save_png(relit, os.path.join(out_dir, name))
                records.append(ManifestRecord(rid, name, plan.instance_prompt,
                                              "iclight"))
            else:
                img = sample_image_via_bridge(
                    client, plan.class_prompt, (latent_hw, latent_hw, 3),
                    sched, seed=int(rng.integers(2**63)))
                name = f"class_{rid - plan.n_views:04d}.png"
                save_png(np.clip(img.repeat(2, axis=0).repeat(2, axis=1), 0, 1),
                         os.path.join(out_dir, name))
                records.append(ManifestRecord(rid, name, plan.class_prompt,
                                              "class"))
    except BridgeFailure:
        persist(records, len(records))
        raise

    persist(records, total)
    manifest = DatasetManifest(records, plan.to_json(), rng_seed)
    return manifest


def sample_training_mix(manifest: DatasetManifest, k: int,
                        rng: np.random.Generator) -> list[ManifestRecord]:
    """k i.i.d. draws: instance record w.p. instance_probability, else class."""
    instance = manifest.by_source("iclight")
    cls = manifest.by_source("class")
    if not instance or not cls:
        raise MissingSource("manifest needs both iclight and class records")
    p = float(manifest.plan["instance_probability"])
    out = []
    for _ in range(k):
        pool = instance if rng.uniform() < p else cls
        out.append(pool[int(rng.integers(len(pool)))])
    return out
