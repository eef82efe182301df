"""Command-line front door.

Exit codes: 0 ok, 1 usage, 2 data (missing/malformed inputs), 3 bridge.
All artifacts land under --out/<run-id>/ with a config-snapshot JSON; run ids
are deterministic hashes of the arguments so repeated runs are reproducible.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import signal
import sys

import numpy as np

from . import errors as err
from .bridge_client import (
    BridgeClient,
    BridgeEndpoint,
    LoopbackFixture,
    RemoteCodec,
    RemoteDenoiser,
    loopback_client,
)
from .gauss_model import (
    GaussianCloud,
    IndexRange,
    InsertionSpec,
    init_object_appearance,
    insert_object,
    load_cloud,
    save_cloud,
    save_points,
)
from .guidance import ToyCodec, ToyDenoiser, make_schedule
from .imgio import save_png, tile_grid
from .mesh_sampling import MeshScene, SampleConfig, sample_points
from .metrics_eval import run_benchmark
from .personalize import DatasetManifest, PersonalizationPlan, TrainRecipe, build_dataset
from .relight_opt import OptimizationConfig, RelightJob, RunIO, two_step_dds, two_step_sds_2d
from .splat_render import Camera, look_at, render

log = logging.getLogger("splatlight")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BRIDGE = 3

SNAPSHOT_SCHEMA_VERSION = 1

DATA_ERRORS = (
    err.MalformedFile, err.InvariantViolation, err.IoFailure, err.EmptyRange,
    err.EmptyMask, err.BoxTooSmall, err.MissingScene, err.CameraMismatch,
    err.EmptyMesh, err.ZeroVolumeAll, err.MissingSource, err.ShapeMismatch,
    err.NonFiniteLoss, FileNotFoundError, json.JSONDecodeError, KeyError,
)
BRIDGE_ERRORS = (err.BridgeFailure, err.DenoiserFailure)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _run_dir(out: str, command: str, args: dict) -> str:
    blob = json.dumps({"command": command, **args}, sort_keys=True)
    run_id = f"{command}-{hashlib.sha1(blob.encode()).hexdigest()[:10]}"
    path = os.path.join(out, run_id)
    os.makedirs(path, exist_ok=True)
    return path


def _write_snapshot(run_dir: str, command: str, args: dict) -> None:
    snap = {"schema_version": SNAPSHOT_SCHEMA_VERSION, "command": command,
            "args": args}
    with open(os.path.join(run_dir, "config_snapshot.json"), "w") as fh:
        json.dump(snap, fh, indent=2, sort_keys=True)


def _require_files(*paths) -> None:
    for p in paths:
        if p and not os.path.exists(p):
            raise FileNotFoundError(p)


def _bridge_handles(bridge: str, seed: int, toy_spec: dict | None = None,
                    schedule=None):
    """denoiser/codec/client for --bridge toy or a URL."""
    sched = schedule or make_schedule(1000)
    if bridge == "toy":
        codec = ToyCodec()
        if toy_spec and "target_image" in toy_spec:
            from .imgio import load_png
            tgt = codec.encode(load_png(toy_spec["target_image"]))
            init = codec.encode(load_png(toy_spec["init_image"]))
            mu_map = {toy_spec["target_prompt"]: tgt, toy_spec["init_prompt"]: init}
            denoiser = ToyDenoiser(sched, mu_map, s=float(toy_spec.get("s", 0.05)),
                                   uncond_mu=init)
        else:
            def mu_of(prompt: str):
                h = int.from_bytes(hashlib.sha256(
                    prompt.encode()).digest()[:8], "little")
                return np.random.default_rng([h, seed]).uniform(-0.5, 0.5)
            denoiser = ToyDenoiser(sched, mu_of, s=0.05)
        client = loopback_client(LoopbackFixture())
        return denoiser, codec, client
    endpoint = BridgeEndpoint(base_url=bridge,
                              auth_token=os.environ.get("BRIDGE_TOKEN"))
    client = BridgeClient(endpoint)
    return RemoteDenoiser(client), RemoteCodec(client), client


def _default_orbit(cloud: GaussianCloud, n: int, size: int) -> list[Camera]:
    center = cloud.means.astype(np.float64).mean(axis=0) if len(cloud) else np.zeros(3)
    spread = 1.0
    if len(cloud):
        spread = max(float(np.linalg.norm(
            cloud.means.astype(np.float64) - center, axis=1).max()), 1e-3)
    radius = 2.5 * spread
    cams = []
    for k in range(n):
        az = 2.0 * np.pi * k / n
        eye = center + radius * np.array([np.cos(az), 0.35, np.sin(az)])
        cams.append(look_at(eye, center, fx=1.2 * size, fy=1.2 * size,
                            cx=size / 2, cy=size / 2, width=size, height=size,
                            near=0.05 * radius, far=20.0 * radius))
    return cams


# --- subcommands ---

def cmd_insert(args) -> int:
    _require_files(args.scene, args.object, args.spec)
    scene = load_cloud(args.scene)
    obj = load_cloud(args.object)
    spec = InsertionSpec.load(args.spec)
    merged, out_spec = insert_object(scene, obj, spec)
    if args.init_mean:
        merged = init_object_appearance(merged, out_spec.object_range)

    run_dir = _run_dir(args.out, "insert", vars_of(args))
    _write_snapshot(run_dir, "insert", vars_of(args))
    save_cloud(merged, os.path.join(run_dir, "merged.cloud"))
    out_spec.save(os.path.join(run_dir, "insertion_spec.json"))

    cams = _default_orbit(merged, args.preview_cameras, args.preview_size)
    tiles = [render(merged, cam, background=(0.0, 0.0, 0.0)).rgb for cam in cams]
    save_png(tile_grid(tiles), os.path.join(run_dir, "preview_grid.png"))
    log.info("wrote %s", run_dir)
    print(run_dir)
    return EXIT_OK


def _load_relight_job(args):
    with open(args.job) as fh:
        job_doc = json.load(fh)
    prompts = job_doc.get("prompts") or {}
    if not prompts.get("target") or not prompts.get("initial"):
        raise UsageError("job prompts.target and prompts.initial are required")

    if "merged_cloud" in job_doc:
        _require_files(job_doc["merged_cloud"])
        cloud = load_cloud(job_doc["merged_cloud"])
        start, stop = job_doc["object_range"]
        obj_range = IndexRange(int(start), int(stop))
    else:
        _require_files(job_doc["scene_cloud"], job_doc["object_cloud"],
                       job_doc["insertion_spec"])
        scene = load_cloud(job_doc["scene_cloud"])
        obj = load_cloud(job_doc["object_cloud"])
        spec = InsertionSpec.load(job_doc["insertion_spec"])
        cloud, spec = insert_object(scene, obj, spec)
        obj_range = spec.object_range
    if job_doc.get("init_mean", True):
        cloud = init_object_appearance(cloud, obj_range)

    cfg_doc = dict(job_doc.get("config", {}))
    cfg_doc.setdefault("rng_seed", args.seed)
    if "cameras" in job_doc:
        pool = [Camera.from_json(c) for c in job_doc["cameras"]]
    else:
        pool = _default_orbit(cloud, 4, int(job_doc.get("render_size", 32)))
    config = OptimizationConfig.from_json(cfg_doc, camera_pool=pool)

    toy_spec = job_doc.get("toy")
    if toy_spec and "target_image" in toy_spec:
        toy_spec = {**toy_spec, "target_prompt": prompts["target"],
                    "init_prompt": prompts["initial"]}
    sched = make_schedule(1000)
    denoiser, codec, _ = _bridge_handles(args.bridge, args.seed, toy_spec, sched)
    job = RelightJob(cloud=cloud, object_range=obj_range,
                     prompt_target=prompts["target"],
                     prompt_initial=prompts["initial"],
                     config=config, denoiser=denoiser, codec=codec,
                     schedule=sched, use_depth=bool(job_doc.get("use_depth", False)))
    return job


def cmd_relight(args) -> int:
    _require_files(args.job)
    job = _load_relight_job(args)
    run_dir = _run_dir(args.out, "relight", vars_of(args))
    _write_snapshot(run_dir, "relight", vars_of(args))

    interrupted = {"flag": False}

    def on_sigint(signum, frame):
        interrupted["flag"] = True
        log.warning("SIGINT: will checkpoint at the next outer iteration")

    previous = signal.signal(signal.SIGINT, on_sigint)
    try:
        io = RunIO(
            log_path=os.path.join(run_dir, "metrics.csv"),
            preview_dir=os.path.join(run_dir, "previews"),
            checkpoint_dir=os.path.join(run_dir, "checkpoints"),
            resume_from=args.resume,
            stop_after_outer=args.stop_after_outer,
            stop_flag=lambda: interrupted["flag"],
        )
        if args.checkpoint_every:
            job.config.checkpoint_every_outer = args.checkpoint_every
        result = two_step_dds(job, io)
    finally:
        signal.signal(signal.SIGINT, previous)
    save_cloud(result, os.path.join(run_dir, "relit.cloud"))
    log.info("wrote %s", run_dir)
    print(run_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    _require_files(args.dataset, args.outputs)
    embedder = None
    if args.bridge != "none":
        _, _, client = _bridge_handles(args.bridge, args.seed)
        embedder = client
    report = run_benchmark(args.dataset, args.outputs, embedder=embedder)
    run_dir = _run_dir(args.out, "eval", vars_of(args))
    _write_snapshot(run_dir, "eval", vars_of(args))
    report.to_csv(os.path.join(run_dir, "report.csv"))
    report.to_json(os.path.join(run_dir, "report.json"))
    log.info("wrote %s", run_dir)
    print(run_dir)
    return EXIT_OK


def cmd_sample_points(args) -> int:
    _require_files(args.mesh)
    scene = MeshScene.from_obj(args.mesh)
    cfg = SampleConfig(strategy=args.strategy, count=args.count,
                       rng_seed=args.seed)
    pts = sample_points(scene, cfg)
    run_dir = _run_dir(args.out, "sample-points", vars_of(args))
    _write_snapshot(run_dir, "sample-points", vars_of(args))
    save_points(pts, os.path.join(run_dir, "points.cloud"))
    if args.ascii:
        np.savetxt(os.path.join(run_dir, "points.xyz"), pts, fmt="%.8f")
    log.info("wrote %s", run_dir)
    print(run_dir)
    return EXIT_OK


def cmd_personalize(args) -> int:
    _require_files(args.object, args.plan)
    cloud = load_cloud(args.object)
    with open(args.plan) as fh:
        plan_doc = json.load(fh)
    train = TrainRecipe(**plan_doc.pop("train", {}))
    plan_doc.pop("class_prompt", None)
    plan_doc.pop("instance_prompt", None)
    if "directions" in plan_doc:
        plan_doc["directions"] = tuple(plan_doc["directions"])
    plan = PersonalizationPlan(train=train, **plan_doc)

    _, _, client = _bridge_handles(args.bridge, args.seed)
    run_dir = _run_dir(args.out, "personalize", vars_of(args))
    _write_snapshot(run_dir, "personalize", vars_of(args))
    dataset_dir = os.path.join(run_dir, "dataset")
    manifest = build_dataset(cloud, plan, client, dataset_dir,
                             rng_seed=args.seed)
    job_payload = manifest.to_job_payload(base_dir=dataset_dir)
    with open(os.path.join(run_dir, "finetune_job.json"), "w") as fh:
        json.dump(job_payload, fh, indent=2)
    job_id = client.submit_finetune(job_payload)
    with open(os.path.join(run_dir, "job_id.txt"), "w") as fh:
        fh.write(job_id + "\n")
    log.info("submitted fine-tune job %s", job_id)
    print(run_dir)
    print(job_id)
    return EXIT_OK


def cmd_generate_2d(args) -> int:
    if args.size % 2:
        raise UsageError("--size must be even for the 2x codec")
    sched = make_schedule(1000)
    denoiser, codec, _ = _bridge_handles(args.bridge, args.seed, None, sched)
    config = OptimizationConfig(rng_seed=args.seed)
    image = two_step_sds_2d(args.prompt, (args.size, args.size), denoiser,
                            codec, omega=args.omega, n_steps=args.steps,
                            config=config, schedule=sched)
    run_dir = _run_dir(args.out, "generate-2d", vars_of(args))
    _write_snapshot(run_dir, "generate-2d", vars_of(args))
    save_png(np.clip(image, 0.0, 1.0), os.path.join(run_dir, "generated.png"))
    np.save(os.path.join(run_dir, "generated.npy"), image.astype(np.float32))
    log.info("wrote %s", run_dir)
    print(run_dir)
    return EXIT_OK


def vars_of(args) -> dict:
    d = {k: v for k, v in vars(args).items() if k != "func"}
    return d


def build_parser() -> _Parser:
    parser = _Parser(prog="splatlight",
                     description="Gaussian-splat object insertion and "
                                 "diffusion-guided relighting")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0,
                       help="global RNG seed (runs are deterministic per seed)")
        p.add_argument("--bridge", default="toy",
                       help="'toy' for the offline analytic backend, or a "
                            "model-service URL")
        p.add_argument("--out", required=True, help="output directory root")
        p.add_argument("--log-level", default="warning",
                       choices=["debug", "info", "warning", "error"])

    p = sub.add_parser("insert", help="merge an object cloud into a scene cloud")
    p.add_argument("--scene", required=True, help="scene cloud file")
    p.add_argument("--object", required=True, help="object cloud file")
    p.add_argument("--spec", required=True, help="insertion spec JSON")
    p.add_argument("--init-mean", action="store_true",
                   help="also reset object colors to their mean")
    p.add_argument("--preview-cameras", type=int, default=4)
    p.add_argument("--preview-size", type=int, default=64)
    common(p)
    p.set_defaults(func=cmd_insert)

    p = sub.add_parser("relight", help="run the 2-step color/SH optimization")
    p.add_argument("--job", required=True, help="job spec JSON")
    p.add_argument("--resume", default=None, help="checkpoint .npz to resume")
    p.add_argument("--stop-after-outer", type=int, default=None,
                   help="stop (with checkpoint) after N outer iterations")
    p.add_argument("--checkpoint-every", type=int, default=None,
                   help="checkpoint every N outer iterations")
    common(p)
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("eval", help="score method outputs against a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--outputs", required=True)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample-points", help="sample a point cloud on a mesh")
    p.add_argument("--mesh", required=True, help="OBJ mesh file")
    p.add_argument("--strategy", default="surface_area",
                   choices=["surface_area", "uniform_triangle", "bbox"])
    p.add_argument("--count", type=int, default=10000)
    p.add_argument("--ascii", action="store_true", help="also write points.xyz")
    common(p)
    p.set_defaults(func=cmd_sample_points)

    p = sub.add_parser("personalize",
                       help="build the fine-tune dataset and submit the job")
    p.add_argument("--object", required=True, help="object cloud file")
    p.add_argument("--plan", required=True, help="personalization plan JSON")
    common(p)
    p.set_defaults(func=cmd_personalize)

    p = sub.add_parser("generate-2d", help="two-step image generation")
    p.add_argument("--prompt", required=True)
    p.add_argument("--omega", type=float, default=15.0)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--size", type=int, default=32)
    common(p)
    p.set_defaults(func=cmd_generate_2d)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level.upper())
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except BRIDGE_ERRORS as e:
        print(f"bridge error: {e}", file=sys.stderr)
        return EXIT_BRIDGE
    except DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
