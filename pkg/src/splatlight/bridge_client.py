"""Wire-protocol client for the external model service, plus the in-process
loopback fixture used by the test suite.

One op per HTTP/1.1 POST; arrays travel as base64 little-endian float32 with
an explicit shape. See PROTOCOL.md for the full envelope and error-code
contract. The remote denoiser/codec adapters are drop-in replacements for the
toy implementations in `guidance`.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
from dataclasses import dataclass

import numpy as np

from .errors import (
    BridgeTimeout,
    InvariantViolation,
    ProtocolError,
    ServerError,
    UnknownJob,
)
from .guidance import DenoiserCondition, NoisePrediction

PROTOCOL_VERSION = 1
RETRY_BASE_SECONDS = 0.5
RETRY_FACTOR = 2.0


# --- array payload codec ---

def encode_array(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": list(a.shape),
        "dtype": "float32",
        "data_b64": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def decode_array(d: dict) -> np.ndarray:
    try:
        shape = tuple(int(v) for v in d["shape"])
        if d.get("dtype", "float32") != "float32":
            raise ProtocolError(f"unsupported dtype {d.get('dtype')!r}")
        raw = base64.b64decode(d["data_b64"], validate=True)
    except ProtocolError:
        raise
    except Exception as e:
        raise ProtocolError(f"bad array payload: {e}") from e
    n = int(np.prod(shape)) if shape else 1
    if len(raw) != 4 * n:
        raise ProtocolError(
            f"array payload is {len(raw)} bytes but shape {shape} needs {4 * n}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


# --- transport seam ---

class HttpTransport:
    """requests-backed transport; connection problems surface as timeouts."""

    def __init__(self):
        import requests
        self._requests = requests

    def post(self, url: str, payload: dict, timeout: float,
             headers: dict | None = None) -> tuple[int, dict]:
        rq = self._requests
        try:
            resp = rq.post(url, json=payload, timeout=timeout, headers=headers or {})
        except (rq.Timeout, rq.ConnectionError) as e:
            raise BridgeTimeout(str(e)) from e
        try:
            body = resp.json()
        except ValueError as e:
            raise ProtocolError(f"non-JSON response (HTTP {resp.status_code})") from e
        return resp.status_code, body


class CallableTransport:
    """Wraps an in-process handler(envelope) -> (status, body); for fixtures."""

    def __init__(self, handler):
        self.handler = handler

    def post(self, url, payload, timeout, headers=None):
        return self.handler(payload)


@dataclass
class BridgeEndpoint:
    base_url: str
    timeout: float = 30.0
    max_retries: int = 2
    auth_token: str | None = None

    def __post_init__(self):
        if self.timeout <= 0:
            raise InvariantViolation("timeout must be positive")
        if self.max_retries < 0:
            raise InvariantViolation("max_retries must be >= 0")


class BridgeClient:
    """Protocol client; safe for concurrent use, retries only timeout/5xx."""

    def __init__(self, endpoint: BridgeEndpoint, transport=None, sleep_fn=time.sleep):
        self.endpoint = endpoint
        self.transport = transport or HttpTransport()
        self.sleep_fn = sleep_fn
        self._counter = 0

    # --- envelope plumbing ---

    def _next_request_id(self) -> str:
        self._counter += 1
        return f"req-{self._counter:08d}"

    def _call(self, op: str, payload: dict) -> dict:
        request_id = self._next_request_id()
        envelope = {"op": op, "request_id": request_id, "payload": payload}
        url = self.endpoint.base_url.rstrip("/") + "/bridge"
        headers = {}
        if self.endpoint.auth_token:
            headers["Authorization"] = f"Bearer {self.endpoint.auth_token}"

        attempts = self.endpoint.max_retries + 1
        last_exc = None
        for attempt in range(attempts):
            if attempt:
                self.sleep_fn(RETRY_BASE_SECONDS * RETRY_FACTOR ** (attempt - 1))
            try:
                status, body = self.transport.post(url, envelope,
                                                   self.endpoint.timeout, headers)
            except BridgeTimeout as e:
                last_exc = e
                continue
            if status >= 500:
                code = "internal"
                if isinstance(body, dict):
                    code = (body.get("error") or {}).get("code", code)
                last_exc = ServerError(code, f"HTTP {status}")
                continue
            return self._parse_response(body, request_id)
        raise last_exc

    def _parse_response(self, body, request_id: str) -> dict:
        if not isinstance(body, dict) or "ok" not in body:
            raise ProtocolError("response missing 'ok' field")
        if body.get("request_id") != request_id:
            raise ProtocolError(
                f"request_id mismatch: sent {request_id}, got {body.get('request_id')}")
        if body["ok"]:
            payload = body.get("payload")
            if not isinstance(payload, dict):
                raise ProtocolError("ok response missing payload")
            return payload
        err = body.get("error") or {}
        code = err.get("code", "unknown")
        message = err.get("message", "")
        if code == "protocol_error":
            raise ProtocolError(message or "server rejected the request")
        if code == "unknown_job":
            raise UnknownJob(message or "unknown fine-tune job")
        raise ServerError(code, message)

    # --- ops ---

    def capabilities(self) -> dict:
        caps = self._call("capabilities", {})
        for key in ("version", "downscale", "latent_channels", "embed_dim"):
            if key not in caps:
                raise ProtocolError(f"capabilities missing {key!r}")
        return caps

    def predict_noise(self, latent: np.ndarray, t: int, prompt: str,
                      unconditional: bool = False,
                      depth: np.ndarray | None = None,
                      conditioning_scale: float = 1.0,
                      model_id: str | None = None) -> NoisePrediction:
        payload = {
            "latent": encode_array(latent),
            "t": int(t),
            "prompt": prompt,
            "unconditional": bool(unconditional),
            "conditioning_scale": float(conditioning_scale),
        }
        if depth is not None:
            payload["depth"] = encode_array(depth)
        if model_id is not None:
            payload["model_id"] = model_id
        out = self._call("predict_noise", payload)
        eps = decode_array(out["epsilon_hat"])
        if eps.shape != tuple(np.asarray(latent).shape):
            raise ProtocolError(
                f"epsilon shape {eps.shape} != latent shape {np.asarray(latent).shape}")
        return NoisePrediction(eps)

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        out = self._call("encode", {"image": encode_array(image)})
        return decode_array(out["latent"]).astype(np.float64)

    def decode_latent(self, latent: np.ndarray) -> np.ndarray:
        out = self._call("decode", {"latent": encode_array(latent)})
        return decode_array(out["image"]).astype(np.float64)

    def embed_text(self, text: str) -> np.ndarray:
        out = self._call("embed", {"kind": "text", "text": text})
        return decode_array(out["vector"]).astype(np.float64)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        out = self._call("embed", {"kind": "image", "image": encode_array(image)})
        return decode_array(out["vector"]).astype(np.float64)

    def relight(self, image: np.ndarray, fg_prompt: str, bg_prompt: str,
                direction: str) -> np.ndarray:
        if direction not in ("left", "right"):
            raise ProtocolError(f"invalid lighting direction {direction!r}")
        out = self._call("relight", {
            "image": encode_array(image),
            "fg_prompt": fg_prompt,
            "bg_prompt": bg_prompt,
            "direction": direction,
        })
        img = decode_array(out["image"]).astype(np.float64)
        if img.shape != tuple(np.asarray(image).shape):
            raise ProtocolError("relit image shape differs from input")
        return img

    def submit_finetune(self, manifest: dict) -> str:
        out = self._call("finetune_submit", {"manifest": manifest})
        job_id = out.get("job_id")
        if not isinstance(job_id, str):
            raise ProtocolError("finetune_submit response missing job_id")
        return job_id

    def poll_finetune(self, job_id: str) -> dict:
        out = self._call("finetune_poll", {"job_id": job_id})
        if "status" not in out:
            raise ProtocolError("finetune_poll response missing status")
        return out


# --- adapters onto the guidance abstractions ---

class RemoteDenoiser:
    """Denoiser backed by the bridge; interchangeable with ToyDenoiser."""

    def __init__(self, client: BridgeClient, model_id: str | None = None):
        self.client = client
        self.model_id = model_id

    def predict(self, latent, t, cond: DenoiserCondition, unconditional=False,
                epsilon=None) -> NoisePrediction:
        return self.client.predict_noise(
            latent, t, cond.prompt, unconditional=unconditional,
            depth=cond.depth, conditioning_scale=cond.condition_strength,
            model_id=self.model_id)


class RemoteCodec:
    """Latent codec backed by the bridge encode/decode ops."""

    def __init__(self, client: BridgeClient):
        self.client = client

    def encode(self, image):
        return self.client.encode_image(image)

    def decode(self, latent):
        return self.client.decode_latent(latent)


# --- loopback fixture (reference protocol implementation, in-process) ---

def deterministic_embedding(data: bytes, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(data).digest()[:8], "little")
    vec = np.random.default_rng(seed).standard_normal(dim)
    return vec / np.linalg.norm(vec)


def relight_ramp(width: int, direction: str) -> np.ndarray:
    """The fixture's documented lighting transform: a horizontal gain ramp
    from 1.25 on the lit side down to 0.75 on the far side."""
    ramp = np.linspace(1.25, 0.75, width)
    return ramp if direction == "left" else ramp[::-1]


class LoopbackFixture:
    """Deterministic reference server logic, callable in-process.

    mode "echo" answers predict_noise with the sent latent; mode "toy" runs the
    analytic toy denoiser with a prompt-keyed mean table.
    """

    def __init__(self, mode: str = "echo", schedule=None, mu_by_prompt=None,
                 toy_s: float = 0.0, uncond_mu=None):
        from .guidance import ToyCodec
        self.mode = mode
        self.codec = ToyCodec()
        self.schedule = schedule
        self.mu_by_prompt = mu_by_prompt or {}
        self.toy_s = toy_s
        self.uncond_mu = uncond_mu
        self.jobs: dict[str, dict] = {}
        self.calls: list[str] = []
        self.embed_dim = 64

    def capabilities(self) -> dict:
        return {"version": PROTOCOL_VERSION, "downscale": 2,
                "latent_channels": 3, "embed_dim": self.embed_dim,
                "fixture": True}

    def handle(self, envelope: dict) -> tuple[int, dict]:
        request_id = envelope.get("request_id")
        op = envelope.get("op")
        self.calls.append(op)
        try:
            payload = self._dispatch(op, envelope.get("payload") or {})
            return 200, {"request_id": request_id, "ok": True, "payload": payload}
        except ProtocolError as e:
            return 400, {"request_id": request_id, "ok": False,
                         "error": {"code": "protocol_error", "message": str(e)}}
        except UnknownJob as e:
            return 400, {"request_id": request_id, "ok": False,
                         "error": {"code": "unknown_job", "message": str(e)}}
        except ServerError as e:
            return 400, {"request_id": request_id, "ok": False,
                         "error": {"code": e.code, "message": e.message}}

    def _dispatch(self, op: str, p: dict) -> dict:
        if op == "capabilities":
            return self.capabilities()
        if op == "predict_noise":
            latent = decode_array(p["latent"])
            if self.mode == "toy":
                from .guidance import toy_denoiser_predict
                if p.get("unconditional"):
                    mu = self.uncond_mu if self.uncond_mu is not None else 0.0
                else:
                    mu = self.mu_by_prompt.get(p.get("prompt"), 0.0)
                pred = toy_denoiser_predict(
                    latent.astype(np.float64), int(p["t"]), self.schedule,
                    np.broadcast_to(np.asarray(mu, dtype=np.float64), latent.shape),
                    self.toy_s)
                return {"epsilon_hat": encode_array(pred.epsilon_hat)}
            return {"epsilon_hat": encode_array(latent)}
        if op == "encode":
            image = decode_array(p["image"])
            return {"latent": encode_array(self.codec.encode(image))}
        if op == "decode":
            latent = decode_array(p["latent"])
            return {"image": encode_array(self.codec.decode(latent))}
        if op == "embed":
            if p.get("kind") == "text":
                data = p.get("text", "").encode("utf-8")
            else:
                data = decode_array(p["image"]).tobytes()
            return {"vector": encode_array(
                deterministic_embedding(data, self.embed_dim))}
        if op == "relight":
            image = decode_array(p["image"]).astype(np.float64)
            direction = p.get("direction")
            if direction not in ("left", "right"):
                raise ProtocolError(f"invalid direction {direction!r}")
            ramp = relight_ramp(image.shape[1], direction)
            out = np.clip(image * ramp[None, :, None], 0.0, 1.0)
            return {"image": encode_array(out)}
        if op == "finetune_submit":
            manifest = p.get("manifest") or {}
            records = manifest.get("records", [])
            if not records:
                raise ServerError("invalid_dataset", "manifest has no records")
            digest = hashlib.sha1(
                json.dumps(manifest, sort_keys=True).encode()).hexdigest()[:12]
            job_id = f"ft-{digest}"
            self.jobs[job_id] = {"status": "completed", "model_id": job_id}
            return {"job_id": job_id}
        if op == "finetune_poll":
            job_id = p.get("job_id")
            if job_id not in self.jobs:
                raise UnknownJob(f"no such job {job_id!r}")
            return dict(self.jobs[job_id])
        raise ProtocolError(f"unknown op {op!r}")


def loopback_client(fixture: LoopbackFixture | None = None,
                    max_retries: int = 2) -> BridgeClient:
    """Client wired to an in-process fixture (no sockets)."""
    fixture = fixture or LoopbackFixture()
    endpoint = BridgeEndpoint(base_url="loopback://fixture", timeout=5.0,
                              max_retries=max_retries)
    client = BridgeClient(endpoint, transport=CallableTransport(fixture.handle),
                          sleep_fn=lambda s: None)
    client.fixture = fixture
    return client
