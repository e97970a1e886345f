"""Gaussian cloud data model and 3DGS-compatible PLY serialization."""

from __future__ import annotations

import enum
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from gsmark.validation import InvalidParameterError, check_finite

__all__ = [
    "Origin",
    "Gaussian",
    "GaussianCloud",
    "PlyFormatError",
    "build_covariance",
    "quaternion_to_rotation",
    "union",
    "save_ply",
    "load_ply",
]

MAX_SH_DEGREE = 3


class PlyFormatError(ValueError):
    """Raised when a PLY file lacks a required Gaussian property."""


class Origin(enum.IntEnum):
    ORIGINAL = 0
    MARKER = 1


def n_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def quaternion_to_rotation(q) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion, normalized first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def build_covariance(q, log_scale) -> np.ndarray:
    """Return ``R diag(exp(2 log_scale)) R^T``; broadcasts over leading axes."""
    q = np.asarray(q, dtype=np.float64)
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(log_scale))):
        raise InvalidParameterError("quaternion and log-scale must be finite")
    if np.any(np.linalg.norm(q, axis=-1) == 0):
        raise InvalidParameterError("zero quaternion")
    R = quaternion_to_rotation(q)
    s2 = np.exp(2.0 * log_scale)
    cov = (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True)
class Gaussian:
    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    sh: np.ndarray  # (n_coeffs, 3)
    opacity_logit: float

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.rotation, self.log_scale)


def _frozen(a, dtype=np.float32) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """Immutable array-of-Gaussians container.

    All per-Gaussian arrays are float32 and share the leading dimension.
    ``sh`` has shape ``(n, (sh_degree + 1) ** 2, 3)``; coefficient 0 is the
    DC term. Rotations are stored raw (unnormalized) so that file round
    trips are bit-exact.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    sh: np.ndarray
    opacity_logits: np.ndarray
    origin: np.ndarray = field(default=None)
    sh_degree: int = 0

    def __post_init__(self):
        n = np.asarray(self.positions).shape[0]
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("positions", _frozen(np.reshape(self.positions, (n, 3))))
        set_("rotations", _frozen(np.reshape(self.rotations, (n, 4))))
        set_("log_scales", _frozen(np.reshape(self.log_scales, (n, 3))))
        set_("opacity_logits", _frozen(np.reshape(self.opacity_logits, (n,))))
        if not 0 <= self.sh_degree <= MAX_SH_DEGREE:
            raise InvalidParameterError(f"sh_degree must be in [0, {MAX_SH_DEGREE}]")
        k = n_sh_coeffs(self.sh_degree)
        sh = np.asarray(self.sh)
        if sh.shape != (n, k, 3):
            raise InvalidParameterError(
                f"sh must have shape {(n, k, 3)} for degree {self.sh_degree}, got {sh.shape}"
            )
        set_("sh", _frozen(sh))
        origin = np.zeros(n, np.uint8) if self.origin is None else self.origin
        set_("origin", _frozen(np.reshape(origin, (n,)), np.uint8))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            self.positions[i], self.rotations[i], self.log_scales[i],
            self.sh[i], float(self.opacity_logits[i]),
        )

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianCloud":
        k = n_sh_coeffs(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros((0, k, 3)), np.zeros(0), sh_degree=sh_degree)

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree: int = 0, origin=None) -> "GaussianCloud":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty(sh_degree)
        return cls(
            np.stack([g.position for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.stack([g.sh for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            origin=origin,
            sh_degree=sh_degree,
        )

    @property
    def n_original(self) -> int:
        return int(np.sum(self.origin == Origin.ORIGINAL))

    @property
    def n_markers(self) -> int:
        return int(np.sum(self.origin == Origin.MARKER))

    @property
    def covariances(self) -> np.ndarray:
        return build_covariance(self.rotations, self.log_scales)

    def subset(self, index) -> "GaussianCloud":
        index = np.asarray(index)
        return GaussianCloud(
            self.positions[index], self.rotations[index], self.log_scales[index],
            self.sh[index], self.opacity_logits[index], origin=self.origin[index],
            sh_degree=self.sh_degree,
        )

    def filter(self, origin: Origin) -> "GaussianCloud":
        return self.subset(np.flatnonzero(self.origin == origin))

    def replace(self, **changes) -> "GaussianCloud":
        fields = dict(
            positions=self.positions, rotations=self.rotations, log_scales=self.log_scales,
            sh=self.sh, opacity_logits=self.opacity_logits, origin=self.origin,
            sh_degree=self.sh_degree,
        )
        fields.update(changes)
        return GaussianCloud(**fields)

    def with_origin(self, origin: Origin) -> "GaussianCloud":
        return self.replace(origin=np.full(len(self), int(origin), np.uint8))

    def bounding_diagonal(self) -> float:
        if len(self) == 0:
            return 0.0
        lo, hi = self.positions.min(axis=0), self.positions.max(axis=0)
        return float(np.linalg.norm(hi.astype(np.float64) - lo))

    def digest(self) -> str:
        """SHA-256 over every parameter buffer, flags, and degree."""
        h = hashlib.sha256()
        for a in (self.positions, self.rotations, self.log_scales, self.sh,
                  self.opacity_logits, self.origin):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(str(self.sh_degree).encode())
        return h.hexdigest()

    def identical(self, other: "GaussianCloud") -> bool:
        """Bit-level equality of all fields."""
        return len(self) == len(other) and self.digest() == other.digest()


def union(original: GaussianCloud, markers: GaussianCloud) -> GaussianCloud:
    """Concatenate originals then markers, flagging them ORIGINAL / MARKER."""
    if original.sh_degree != markers.sh_degree:
        raise InvalidParameterError(
            f"sh_degree mismatch: {original.sh_degree} vs {markers.sh_degree}"
        )
    origin = np.concatenate([
        np.full(len(original), Origin.ORIGINAL, np.uint8),
        np.full(len(markers), Origin.MARKER, np.uint8),
    ])
    return GaussianCloud(
        np.concatenate([original.positions, markers.positions]),
        np.concatenate([original.rotations, markers.rotations]),
        np.concatenate([original.log_scales, markers.log_scales]),
        np.concatenate([original.sh, markers.sh]),
        np.concatenate([original.opacity_logits, markers.opacity_logits]),
        origin=origin,
        sh_degree=original.sh_degree,
    )


# ---------------------------------------------------------------- PLY I/O

def _property_names(sh_degree: int) -> list[str]:
    n_rest = 3 * (n_sh_coeffs(sh_degree) - 1)
    return (
        ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        + [f"f_rest_{i}" for i in range(n_rest)]
        + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    )


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _marker_ranges(origin: np.ndarray) -> list[list[int]]:
    ranges, start = [], None
    for i, flag in enumerate(origin.tolist() + [Origin.ORIGINAL]):
        if flag == Origin.MARKER and start is None:
            start = i
        elif flag != Origin.MARKER and start is not None:
            ranges.append([start, i])
            start = None
    return ranges


def save_ply(cloud: GaussianCloud, path) -> None:
    """Write ``cloud`` as binary little-endian 3DGS PLY plus a JSON sidecar.

    The sidecar (``<file>.json``) records the SH degree and the half-open
    index ranges of MARKER Gaussians; the PLY layout has no flag field.
    """
    for name in ("positions", "rotations", "log_scales", "sh", "opacity_logits"):
        check_finite(getattr(cloud, name), name)
    n = len(cloud)
    names = _property_names(cloud.sh_degree)
    data = np.zeros(n, dtype=[(p, "<f4") for p in names])
    data["x"], data["y"], data["z"] = cloud.positions.T
    for c in range(3):
        data[f"f_dc_{c}"] = cloud.sh[:, 0, c]
    # f_rest is channel-major: all coefficients of R, then G, then B.
    rest = np.transpose(cloud.sh[:, 1:, :], (0, 2, 1)).reshape(n, -1)
    for i in range(rest.shape[1]):
        data[f"f_rest_{i}"] = rest[:, i]
    data["opacity"] = cloud.opacity_logits
    for i in range(3):
        data[f"scale_{i}"] = cloud.log_scales[:, i]
    for i in range(4):
        data[f"rot_{i}"] = cloud.rotations[:, i]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PlyData([PlyElement.describe(data, "vertex")], text=False, byte_order="<").write(str(path))
    meta = {"sh_degree": cloud.sh_degree, "count": n, "marker_ranges": _marker_ranges(cloud.origin)}
    sidecar_path(path).write_text(json.dumps(meta, indent=1))


def load_ply(path, on_nonfinite: str = "raise") -> GaussianCloud:
    """Read a 3DGS PLY; origin flags come from the sidecar when present.

    ``on_nonfinite`` is ``"raise"`` (default) or ``"warn"``.
    """
    path = Path(path)
    ply = PlyData.read(str(path))
    try:
        v = ply["vertex"].data
    except KeyError as exc:
        raise PlyFormatError(f"{path}: no 'vertex' element") from exc
    props = set(v.dtype.names)
    required = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    for name in required:
        if name not in props:
            raise PlyFormatError(f"{path}: missing required property '{name}'")
    n_rest = sum(1 for p in props if p.startswith("f_rest_"))
    k = n_rest // 3 + 1
    degree = int(round(np.sqrt(k))) - 1
    if n_sh_coeffs(degree) != k or n_rest % 3:
        raise PlyFormatError(f"{path}: {n_rest} f_rest properties do not match any SH degree")
    n = len(v)
    col = lambda name: np.asarray(v[name], dtype=np.float32)  # noqa: E731
    positions = np.stack([col("x"), col("y"), col("z")], axis=1)
    sh = np.zeros((n, k, 3), np.float32)
    for c in range(3):
        sh[:, 0, c] = col(f"f_dc_{c}")
    if n_rest:
        rest = np.stack([col(f"f_rest_{i}") for i in range(n_rest)], axis=1)
        sh[:, 1:, :] = rest.reshape(n, 3, k - 1).transpose(0, 2, 1)
    cloud_fields = dict(
        positions=positions,
        rotations=np.stack([col(f"rot_{i}") for i in range(4)], axis=1),
        log_scales=np.stack([col(f"scale_{i}") for i in range(3)], axis=1),
        sh=sh,
        opacity_logits=col("opacity"),
    )
    for name, arr in cloud_fields.items():
        if not np.all(np.isfinite(arr)):
            msg = f"{path}: non-finite values in {name}"
            if on_nonfinite == "raise":
                raise InvalidParameterError(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    origin = np.zeros(n, np.uint8)
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        for start, stop in meta.get("marker_ranges", []):
            origin[start:stop] = Origin.MARKER
    return GaussianCloud(**cloud_fields, origin=origin, sh_degree=degree)
