"""Displacement fields on the unit cube: composition, warping, Jacobians.

A field stores u with phi(x) = x + u(x); u is expressed in normalized
coordinates, so values are grid-independent and fields predicted at a
coarse resolution compose with full-resolution maps without rescaling.
Plain functions operate on arrays; the ``*_nodes`` variants build the
same computation on a tape so losses can differentiate through it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import Tensor3, grid_coordinates
from .tape import (
    Node,
    Tape,
    _grad_axis,
    sample_nearest_values,
    sample_trilinear_values,
)
from .volume import LabelVolume, Volume


class TransformError(ValueError):
    """Invalid field construction or transform preconditions."""


@dataclass(frozen=True)
class DisplacementField:
    """3-channel displacement u on an (nx, ny, nz) grid, phi(x) = x + u(x)."""

    u: Tensor3

    def __post_init__(self):
        if self.u.channels != 3:
            raise TransformError(f"displacement needs 3 channels, got {self.u.channels}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.u.dims

    @staticmethod
    def identity(dims) -> "DisplacementField":
        return DisplacementField(Tensor3.zeros(dims, channels=3))

    @staticmethod
    def translation(dims, t) -> "DisplacementField":
        u = np.broadcast_to(np.asarray(t, dtype=np.float64), (*dims, 3))
        return DisplacementField(Tensor3(np.array(u)))

    def map_points(self, points: np.ndarray) -> np.ndarray:
        """Evaluate phi at normalized points of shape (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        u_at = sample_trilinear_values(self.u.data, pts)
        return pts + u_at


def compose(phi1: DisplacementField, phi2: DisplacementField) -> DisplacementField:
    """(phi1 o phi2)(x) = phi2(x) + u1(phi2(x)), output on phi2's grid."""
    coords = grid_coordinates(phi2.dims).data + phi2.u.data
    u1_at = sample_trilinear_values(phi1.u.data, coords)
    return DisplacementField(Tensor3(phi2.u.data + u1_at))


def compose_nodes(tape: Tape, u1: Node, u2: Node) -> Node:
    """Tape version of compose, differentiable through both fields."""
    grid = tape.input(grid_coordinates(u2.value.dims))
    coords = tape.add(grid, u2)
    u1_at = tape.trilinear_sample(u1, coords)
    return tape.add(u2, u1_at)


def resample_field_to(phi: DisplacementField, dims) -> DisplacementField:
    """Trilinear resample of u onto new grid dims (values are grid-free)."""
    dims = tuple(int(d) for d in dims)
    if phi.dims == dims:
        return phi
    coords = grid_coordinates(dims).data
    return DisplacementField(Tensor3(sample_trilinear_values(phi.u.data, coords)))


def resample_field_nodes(tape: Tape, u: Node, dims) -> Node:
    if u.value.dims == tuple(dims):
        return u
    coords = tape.input(grid_coordinates(dims))
    return tape.trilinear_sample(u, coords)


def warp(v: Volume, phi: DisplacementField) -> Volume:
    """Resample v at phi(x): out(x) = v(x + u(x)), edge-clamped."""
    phi_v = resample_field_to(phi, v.dims)
    coords = grid_coordinates(v.dims).data + phi_v.u.data
    out = sample_trilinear_values(v.grid.data, coords)
    return replace(v, grid=Tensor3(out))


def warp_nodes(tape: Tape, image: Node, u: Node) -> Node:
    """Tape version of warp; resamples u onto the image grid if needed."""
    u_res = resample_field_nodes(tape, u, image.value.dims)
    grid = tape.input(grid_coordinates(image.value.dims))
    coords = tape.add(grid, u_res)
    return tape.trilinear_sample(image, coords)


def warp_nearest(lv: LabelVolume, phi: DisplacementField) -> LabelVolume:
    """Label-safe warp: nearest-neighbor lookup of labels at phi(x)."""
    phi_v = resample_field_to(phi, lv.dims)
    coords = grid_coordinates(lv.dims).data + phi_v.u.data
    out = sample_nearest_values(lv.labels[..., None], coords)[..., 0]
    return replace(lv, labels=out)


def jacobian_det_map(phi: DisplacementField) -> Tensor3:
    """Per-voxel determinant of the 3x3 Jacobian of phi.

    Central differences in normalized coordinates, one-sided at the
    boundary slices; the identity field gives det = 1 everywhere.
    """
    if min(phi.dims) < 3:
        raise TransformError(f"jacobian needs >= 3 voxels per axis, got {phi.dims}")
    u = phi.u.data
    J = np.empty((*phi.dims, 3, 3))
    for comp in range(3):
        for axis in range(3):
            J[..., comp, axis] = _grad_axis(u[..., comp], axis) + (comp == axis)
    det = (
        J[..., 0, 0] * (J[..., 1, 1] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 1])
        - J[..., 0, 1] * (J[..., 1, 0] * J[..., 2, 2] - J[..., 1, 2] * J[..., 2, 0])
        + J[..., 0, 2] * (J[..., 1, 0] * J[..., 2, 1] - J[..., 1, 1] * J[..., 2, 0])
    )
    return Tensor3(det)


def percent_neg_jac(phi: DisplacementField, on_dims=None) -> float:
    """Folding fraction: percent of voxels with negative Jacobian determinant.

    Computed on the field's own grid by default; pass ``on_dims`` to
    resample the map onto another grid (e.g. the original image grid)
    first.
    """
    if on_dims is not None:
        phi = resample_field_to(phi, on_dims)
    det = jacobian_det_map(phi).data
    return 100.0 * float(np.count_nonzero(det < 0.0)) / det.size


def approximate_inverse(phi: DisplacementField, iterations: int = 40) -> DisplacementField:
    """Fixed-point inverse: v <- -u(x + v(x)), on phi's grid."""
    grid = grid_coordinates(phi.dims).data
    v = np.zeros_like(phi.u.data)
    for _ in range(iterations):
        v = -sample_trilinear_values(phi.u.data, grid + v)
    return DisplacementField(Tensor3(v))


# -- affine augmentation ---------------------------------------------------------


@dataclass(frozen=True)
class AffineTransform:
    """Linear part, translation (normalized coords), and per-axis flips,
    all acting about the domain center (0.5, 0.5, 0.5)."""

    linear: np.ndarray
    translation: np.ndarray
    flips: tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        A = np.asarray(self.linear, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "linear", A)
        object.__setattr__(self, "translation", t)
        if abs(np.linalg.det(self.matrix())) < 1e-8:
            raise TransformError("affine transform is singular")

    def matrix(self) -> np.ndarray:
        F = np.diag([-1.0 if f else 1.0 for f in self.flips])
        return self.linear @ F

    @staticmethod
    def identity() -> "AffineTransform":
        return AffineTransform(np.eye(3), np.zeros(3))


def _rotation_matrix(angles_rad) -> np.ndarray:
    ax, ay, az = angles_rad
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def random_affine(
    seed: int,
    max_rotation_deg: float = 10.0,
    max_scale_dev: float = 0.1,
    max_translation: float = 0.05,
    flip_prob: float = 0.5,
) -> AffineTransform:
    """Seeded draw: uniform rotation angles, per-axis log-scales and
    translations within the bounds, Bernoulli flips per axis."""
    if min(max_rotation_deg, max_scale_dev, max_translation) < 0 or flip_prob < 0:
        raise TransformError("augmentation bounds must be non-negative")
    rng = np.random.default_rng(seed)
    angles = np.deg2rad(rng.uniform(-max_rotation_deg, max_rotation_deg, size=3))
    log_scales = rng.uniform(-max_scale_dev, max_scale_dev, size=3)
    translation = rng.uniform(-max_translation, max_translation, size=3)
    flips = tuple(bool(rng.random() < flip_prob) for _ in range(3))
    linear = _rotation_matrix(angles) @ np.diag(np.exp(log_scales))
    return AffineTransform(linear, translation, flips)


def apply_affine(v: Volume, T: AffineTransform) -> Volume:
    """Inverse-map trilinear resampling about the domain center."""
    M = T.matrix()
    Minv = np.linalg.inv(M)
    center = np.array([0.5, 0.5, 0.5])
    coords = grid_coordinates(v.dims).data
    flat = coords.reshape(-1, 3)
    src = (flat - center - T.translation) @ Minv.T + center
    out = sample_trilinear_values(v.grid.data, src.reshape(coords.shape))
    return replace(v, grid=Tensor3(out))


def apply_affine_points(points_norm: np.ndarray, T: AffineTransform) -> np.ndarray:
    """Forward map of normalized points under the same transform."""
    center = np.array([0.5, 0.5, 0.5])
    pts = np.atleast_2d(np.asarray(points_norm, dtype=np.float64))
    return (pts - center) @ T.matrix().T + center + T.translation
