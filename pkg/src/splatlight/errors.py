"""Exception taxonomy shared across the package."""


class SplatlightError(Exception):
    """Base class for all package errors."""


# --- data model / file I/O ---

class MalformedFile(SplatlightError):
    """Cloud or mesh file has a bad header, attribute set, or record count."""


class InvariantViolation(SplatlightError):
    """A domain-type invariant does not hold (range, norm, shape, ...)."""


class IoFailure(SplatlightError):
    """Filesystem write/read failed."""


class EmptyRange(SplatlightError):
    """An index range that must be non-empty is empty."""


# --- rendering ---

class DegenerateCovariance(SplatlightError):
    """2D covariance not invertible after regularization; indicates a bug."""


class ShapeMismatch(SplatlightError):
    """Array arguments have incompatible shapes."""


# --- guidance / optimization ---

class InvalidT(SplatlightError):
    """Diffusion step count or timestep out of range."""


class SigmaZero(SplatlightError):
    """sigma_t = 0 where a division by sigma_t is required."""


class OddDimensions(SplatlightError):
    """Image dimensions not divisible by the codec block size."""


class DenoiserFailure(SplatlightError):
    """The denoiser backend failed; propagated to the caller."""


class NonFiniteLoss(SplatlightError):
    """Optimization produced a NaN/Inf loss; run aborted."""


# --- metrics ---

class EmptyMask(SplatlightError):
    """Metric mask selects no pixels."""


class BoxTooSmall(SplatlightError):
    """Bounding box smaller than the SSIM window."""


class MissingScene(SplatlightError):
    """Benchmark scene directory absent."""


class CameraMismatch(SplatlightError):
    """Prediction/ground-truth camera ids do not line up."""


# --- mesh sampling ---

class EmptyMesh(SplatlightError):
    """Mesh scene has no triangles."""


class ZeroVolumeAll(SplatlightError):
    """Volume-weighted sampling requested but every object has zero volume."""


# --- personalization ---

class MissingSource(SplatlightError):
    """Dataset manifest lacks instance or class records."""


# --- bridge ---

class BridgeFailure(SplatlightError):
    """Base class for bridge transport/protocol errors."""


class BridgeTimeout(BridgeFailure):
    """Request timed out or the endpoint is unreachable (after retries)."""


class ProtocolError(BridgeFailure):
    """Malformed request/response envelope; never retried."""


class ServerError(BridgeFailure):
    """Server-reported failure with a machine-readable code."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message


class UnknownJob(BridgeFailure):
    """Fine-tune job id not known to the server."""
