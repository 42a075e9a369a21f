"""Dataset metadata, head-facing angles, and pose-guided sampling.

Records carry (shape, pose, camera intrinsics/extrinsics, optional image
path); sampling reweights them by head-facing-angle bin under a Gaussian
centered on the front view, evaluated at circular distance.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .body import Pose, forward_kinematics
from .errors import DataFormatError
from .formats import canonical_json_dumps

HEAD_JOINT = 15
TWO_PI = 2.0 * math.pi


@dataclass
class SamplerConfig:
    bins: int = 72
    mu_theta: float = 0.0
    sigma_theta: float = math.radians(15.0)
    mode: str = "gaussian"  # original | gaussian | uniform

    def __post_init__(self):
        if self.bins < 4:
            raise ValueError("need at least 4 bins")
        if self.mode not in ("original", "gaussian", "uniform"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.mode == "gaussian" and self.sigma_theta <= 0:
            raise ValueError("sigma_theta must be positive in gaussian mode")


@dataclass
class PoseRecord:
    id: str
    beta: np.ndarray
    theta: np.ndarray        # (K, 3) axis-angle
    cam: dict                # fx, fy, cx, cy, R (3,3), t (3,)
    image: str = None


@dataclass
class DatasetMeta:
    records: list
    head_angle: np.ndarray = field(default=None)  # (N,) in [0, 2pi)
    bin: np.ndarray = field(default=None)         # (N,) in [0, M)

    def __len__(self):
        return len(self.records)


def _yaw_of(rotation):
    forward = rotation @ np.array([0.0, 0.0, 1.0])
    if math.hypot(forward[0], forward[2]) < 1e-9:
        return None
    return math.atan2(forward[0], forward[2]) % TWO_PI


def head_facing_angle(model, pose, head_joint=HEAD_JOINT):
    """Yaw of the head's forward axis on the ground plane, [0, 2pi).

    0 means facing the dataset's front view; falls back to the root yaw
    when the head's forward axis points straight up or down.
    """
    if head_joint >= model.num_joints:
        raise ValueError("model has no head joint at the expected index")
    transforms = forward_kinematics(model, pose)
    yaw = _yaw_of(transforms[head_joint, :3, :3])
    if yaw is None:
        yaw = _yaw_of(transforms[0, :3, :3])
    return yaw if yaw is not None else 0.0


def annotate_head_bins(meta, model, cfg):
    """Fill head_angle and bin for every record (in place, returns meta)."""
    angles = np.empty(len(meta.records))
    for i, rec in enumerate(meta.records):
        angles[i] = head_facing_angle(model, Pose(rec.theta, np.zeros(3)))
    meta.head_angle = angles
    meta.bin = np.floor(angles * cfg.bins / TWO_PI).astype(np.int64) % cfg.bins
    return meta


def wrap_to_pi(angle):
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(-np.asarray(angle, dtype=np.float64) + np.pi, TWO_PI)
    return -(wrapped - np.pi)


def bin_target_mass(cfg):
    """Unnormalized per-bin mass at the bin angles theta_m = 2 pi m / M."""
    m = np.arange(cfg.bins)
    theta_m = TWO_PI * m / cfg.bins
    if cfg.mode == "uniform":
        return np.ones(cfg.bins)
    if cfg.mode == "gaussian":
        dist = wrap_to_pi(theta_m - cfg.mu_theta)
        return (
            1.0
            / (cfg.sigma_theta * math.sqrt(TWO_PI))
            * np.exp(-0.5 * (dist / cfg.sigma_theta) ** 2)
        )
    raise ValueError("original mode has no target curve (empirical frequencies)")


def pose_guided_weights(meta, cfg):
    """Per-record sampling probability; sums to 1.

    Bin mass follows the Gaussian evaluated at the bin angle (circularly
    wrapped); within a bin every record is equally likely. Empty bins carry
    zero mass. Modes: original = empirical frequencies, uniform = equal
    mass per populated bin.
    """
    if meta.bin is None:
        raise ValueError("meta has no head-angle bins; annotate it first")
    n = len(meta)
    if n == 0:
        raise DataFormatError("dataset has no records")
    counts = np.bincount(meta.bin, minlength=cfg.bins)
    if cfg.mode == "original":
        return np.full(n, 1.0 / n)
    mass = bin_target_mass(cfg)
    mass = np.where(counts > 0, mass, 0.0)
    total = mass.sum()
    if total <= 0:
        raise DataFormatError("all bins empty under the sampling config")
    mass /= total
    w = mass[meta.bin] / counts[meta.bin]
    return w / w.sum()


def sample_batch(weights, batch, rng):
    """IID categorical draws of record indices; deterministic under seed."""
    weights = np.asarray(weights, dtype=np.float64)
    return rng.choice(len(weights), size=batch, p=weights)


def sample_latent(rng, dim):
    if dim < 1:
        raise ValueError("latent dimension must be >= 1")
    return rng.standard_normal(dim)


class PoseSampler:
    """Meta + config + cached weights; draws full records."""

    def __init__(self, meta, cfg):
        self.meta = meta
        self.cfg = cfg
        self.weights = pose_guided_weights(meta, cfg)

    def sample(self, batch, rng):
        idx = sample_batch(self.weights, batch, rng)
        return [self.meta.records[i] for i in idx]


# ---------------------------------------------------------------------------
# JSON Lines metadata


def record_to_dict(rec):
    out = {
        "id": rec.id,
        "beta": list(map(float, rec.beta)),
        "theta": np.asarray(rec.theta, dtype=np.float64).tolist(),
        "cam": {
            "fx": float(rec.cam["fx"]),
            "fy": float(rec.cam["fy"]),
            "cx": float(rec.cam["cx"]),
            "cy": float(rec.cam["cy"]),
            "R": np.asarray(rec.cam["R"], dtype=np.float64).reshape(-1).tolist(),
            "t": np.asarray(rec.cam["t"], dtype=np.float64).tolist(),
        },
    }
    if rec.image is not None:
        out["image"] = rec.image
    return out


def record_from_dict(data):
    try:
        cam = data["cam"]
        rec = PoseRecord(
            id=str(data["id"]),
            beta=np.asarray(data["beta"], dtype=np.float64),
            theta=np.asarray(data["theta"], dtype=np.float64),
            cam={
                "fx": float(cam["fx"]),
                "fy": float(cam["fy"]),
                "cx": float(cam["cx"]),
                "cy": float(cam["cy"]),
                "R": np.asarray(cam["R"], dtype=np.float64).reshape(3, 3),
                "t": np.asarray(cam["t"], dtype=np.float64),
            },
            image=data.get("image"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed dataset record: {exc}") from exc
    if rec.theta.ndim != 2 or rec.theta.shape[1] != 3:
        raise DataFormatError("theta must be (K, 3) axis-angle rows")
    return rec


def save_dataset_jsonl(records, path):
    lines = [canonical_json_dumps(record_to_dict(rec)) for rec in records]
    from .formats import atomic_write_text

    atomic_write_text(path, "\n".join(lines) + "\n")


def load_dataset_jsonl(path):
    records = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(record_from_dict(json.loads(line)))
                except json.JSONDecodeError as exc:
                    raise DataFormatError(
                        f"{path}:{lineno}: invalid JSON: {exc}"
                    ) from exc
    except OSError as exc:
        raise DataFormatError(f"cannot read dataset {path}: {exc}") from exc
    if not records:
        raise DataFormatError(f"dataset {path} has no records")
    return DatasetMeta(records=records)
