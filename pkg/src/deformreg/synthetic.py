"""Multimodal phantom generator with exact ground truth.

Phantoms are textured backgrounds plus non-overlapping ellipsoids with
well-separated mean intensities, labeled and landmarked. Rendering works
on a supersampled copy of the base volume so the moving and fixed images
carry identical interpolation smoothing; otherwise a registration can
"win" by blurring one side.

Ground-truth deformations are sums of wide Gaussian-envelope
displacements whose amplitude is bounded analytically, so the Jacobian
stays positive (fold-free) and a fixed-point inverse exists. Intensity
remaps stand in for cross-modality appearance change: the inverted remap
produces the locally anticorrelated regime where plain correlation
losses fail and their squared variant does not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor3, grid_coordinates
from .transforms import (
    DisplacementField,
    approximate_inverse,
    resample_field_to,
    warp,
    warp_nearest,
)
from .volume import LabelVolume, LandmarkSet, Volume, resize_trilinear

# max |d/dr exp(-r^2 / (2 s^2))| = exp(-1/2) / s
_GAUSS_GRAD_PEAK = float(np.exp(-0.5))
# wide envelopes: neighborhoods move coherently, which keeps windowed
# similarity informative across multi-voxel displacements
_SIGMA_RANGE = (0.25, 0.40)


class SyntheticError(ValueError):
    """Phantom construction failure (placement, amplitude bound)."""


@dataclass(frozen=True)
class Phantom:
    base: Volume
    labels: LabelVolume
    landmarks: LandmarkSet
    structure_means: tuple
    base_supersampled: Volume | None = None


@dataclass(frozen=True)
class TruthBundle:
    """Everything needed to score a registration of the rendered pair."""

    field: DisplacementField
    labels_a: LabelVolume
    labels_b: LabelVolume
    landmarks_a: LandmarkSet
    landmarks_b: LandmarkSet


@dataclass(frozen=True)
class ModalityRemap:
    """Intensity map [0,1] -> [0,1] simulating a different acquisition of
    the same anatomy."""

    kind: str = "identity"
    gamma: float = 1.0
    center: float = 0.5
    slope: float = 8.0
    breakpoints: tuple = ()

    def apply(self, values: np.ndarray) -> np.ndarray:
        x = np.clip(values, 0.0, 1.0)
        if self.kind == "identity":
            return x
        if self.kind == "invert":
            return 1.0 - x
        if self.kind == "gamma":
            if self.gamma <= 0:
                raise SyntheticError(f"gamma must be positive, got {self.gamma}")
            return x**self.gamma
        if self.kind == "sigmoid":
            raw = 1.0 / (1.0 + np.exp(-self.slope * (x - self.center)))
            lo = 1.0 / (1.0 + np.exp(-self.slope * (0.0 - self.center)))
            hi = 1.0 / (1.0 + np.exp(-self.slope * (1.0 - self.center)))
            return (raw - lo) / (hi - lo)
        if self.kind == "piecewise":
            pts = np.asarray(self.breakpoints, dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
                raise SyntheticError("piecewise remap needs >= 2 (x, y) breakpoints")
            order = np.argsort(pts[:, 0])
            return np.interp(x, pts[order, 0], np.clip(pts[order, 1], 0.0, 1.0))
        raise SyntheticError(f"unknown remap kind {self.kind!r}")


def _smooth_noise(rng, dims, passes=4):
    a = rng.uniform(0.0, 1.0, size=dims)
    for _ in range(passes):
        for axis in range(3):
            a = (np.roll(a, 1, axis) + a + np.roll(a, -1, axis)) / 3.0
    a -= a.min()
    peak = a.max()
    if peak > 0:
        a /= peak
    return a


def make_phantom(
    seed: int,
    dims,
    n_structures: int = 3,
    retry_budget: int = 200,
    supersample: int = 2,
) -> Phantom:
    """Textured background plus labeled ellipsoids with distinct intensities.

    Landmarks sit at every structure center and at three near-boundary
    extrema per structure (inside the labeled region), so even a single
    structure carries four landmarks. ``supersample`` sets the resolution
    multiple of the rendering copy (1 disables it).
    """
    dims = tuple(int(d) for d in dims)
    if min(dims) < 16:
        raise SyntheticError(f"phantom dims must be >= 16 per axis, got {dims}")
    if n_structures < 1:
        raise SyntheticError("need at least one structure")
    if supersample < 1:
        raise SyntheticError("supersample factor must be >= 1")
    means = np.linspace(0.40, 0.85, n_structures)
    if n_structures > 1 and means[1] - means[0] < 0.1:
        raise SyntheticError(
            f"{n_structures} structures cannot keep mean separation >= 0.1"
        )
    rng = np.random.default_rng(seed)
    hi_dims = tuple((n - 1) * supersample + 1 for n in dims)
    coords_hi = grid_coordinates(hi_dims).data
    coords_lo = grid_coordinates(dims).data

    # smoothing passes scale with supersample^2 to keep the physical
    # feature size of the noise fixed
    ss2 = supersample * supersample
    background = 0.14 + 0.10 * _smooth_noise(rng, hi_dims, passes=4 * ss2)
    fine = _smooth_noise(rng, hi_dims, passes=ss2)
    texture = 0.20 * (fine - fine.mean())

    values_hi = background.copy()
    labels_lo = np.zeros(dims, dtype=np.int64)
    landmark_rows = []

    for sid in range(1, n_structures + 1):
        placed = False
        for _ in range(retry_budget + 1):
            center = rng.uniform(0.22, 0.78, size=3)
            semi = rng.uniform(0.08, 0.16, size=3)
            r2_lo = np.zeros(dims)
            for axis in range(3):
                r2_lo += ((coords_lo[..., axis] - center[axis]) / semi[axis]) ** 2
            # keep one clear voxel ring between structures
            if not np.any(labels_lo[r2_lo <= 1.6]):
                placed = True
                break
        if not placed:
            raise SyntheticError(
                f"could not place structure {sid} without overlap "
                f"within {retry_budget} retries"
            )
        r2_hi = np.zeros(hi_dims)
        for axis in range(3):
            r2_hi += ((coords_hi[..., axis] - center[axis]) / semi[axis]) ** 2
        # gentle interior falloff keeps local windows non-degenerate
        values_hi = np.where(
            r2_hi <= 1.0, means[sid - 1] + 0.04 * (1.0 - r2_hi), values_hi
        )
        labels_lo[r2_lo <= 1.0] = sid
        landmark_rows.append(center)
        landmark_rows.append(center + np.array([0.8 * semi[0], 0.0, 0.0]))
        landmark_rows.append(center - np.array([0.0, 0.8 * semi[1], 0.0]))
        landmark_rows.append(center + np.array([0.0, 0.0, 0.8 * semi[2]]))

    base_hi = Volume(
        grid=Tensor3(np.clip(values_hi + texture, 0.0, 1.0)),
        modality="SYNTH-BASE",
        preprocessed=True,
    )
    if supersample > 1:
        base = resize_trilinear(base_hi, dims)
        base = Volume(base.grid, modality="SYNTH-BASE", preprocessed=True)
    else:
        base = base_hi
    geo = base.geometry
    landmarks = LandmarkSet(geo.normalized_to_mm(np.array(landmark_rows)), frame="base")
    landmarks.assert_inside(geo)
    return Phantom(
        base=base,
        labels=LabelVolume(labels_lo),
        landmarks=landmarks,
        structure_means=tuple(float(m) for m in means),
        base_supersampled=base_hi if supersample > 1 else None,
    )


def deformation_amplitude_bound(sigmas) -> float:
    """Largest per-bump displacement magnitude keeping the sum of envelope
    gradients below 1 (positive Jacobian), with a 5% safety margin."""
    total = sum(_GAUSS_GRAD_PEAK / s for s in sigmas)
    return 0.95 / total


def make_deformation(
    seed: int,
    dims,
    amplitude: float,
    n_bumps: int = 2,
    sigma_range: tuple = _SIGMA_RANGE,
) -> DisplacementField:
    """Sum of Gaussian-envelope displacements, fold-free by construction.

    ``amplitude`` is the displacement magnitude of each bump in normalized
    coordinates; it must stay below the analytic bound for the drawn
    envelope widths, otherwise the call is rejected with that bound.
    """
    dims = tuple(int(d) for d in dims)
    if n_bumps < 0:
        raise SyntheticError("n_bumps must be >= 0")
    rng = np.random.default_rng(seed)
    if n_bumps == 0 or amplitude == 0.0:
        return DisplacementField.identity(dims)
    sigmas = rng.uniform(*sigma_range, size=n_bumps)
    bound = deformation_amplitude_bound(sigmas)
    if amplitude > bound:
        raise SyntheticError(
            f"amplitude {amplitude:.4g} exceeds the fold-free bound {bound:.4g} "
            f"for {n_bumps} bumps with envelopes {np.round(sigmas, 3)}"
        )
    coords = grid_coordinates(dims).data
    u = np.zeros((*dims, 3))
    for b in range(n_bumps):
        center = rng.uniform(0.3, 0.7, size=3)
        direction = rng.normal(size=3)
        direction *= amplitude / np.linalg.norm(direction)
        r2 = np.sum((coords - center) ** 2, axis=-1)
        envelope = np.exp(-r2 / (2.0 * sigmas[b] ** 2))
        u += envelope[..., None] * direction
    return DisplacementField(Tensor3(u))


def render_pair(
    phantom: Phantom,
    remap_a: ModalityRemap,
    remap_b: ModalityRemap,
    deformation: DisplacementField,
):
    """Build the registration task (A, B, truth).

    B is the deformed base under remap_b, so the ground-truth map for the
    pair (A, B) is exactly ``deformation``; landmarks in B's frame come
    from the numerical inverse. When the phantom carries a supersampled
    base, both images render from it and are downsampled together, so
    they share identical interpolation smoothing.
    """
    base = phantom.base
    dims = base.dims
    if phantom.base_supersampled is not None:
        src = phantom.base_supersampled
        defo_src = resample_field_to(deformation, src.dims)
        a_full = Volume(Tensor3(remap_a.apply(src.values())),
                        modality="SYNTH-A", preprocessed=True)
        b_full = Volume(Tensor3(remap_b.apply(warp(src, defo_src).values())),
                        modality="SYNTH-B", preprocessed=True)
        vol_a = resize_trilinear(a_full, dims)
        vol_b = resize_trilinear(b_full, dims)
        vol_a = Volume(vol_a.grid, spacing=base.spacing, origin=base.origin,
                       modality="SYNTH-A", preprocessed=True)
        vol_b = Volume(vol_b.grid, spacing=base.spacing, origin=base.origin,
                       modality="SYNTH-B", preprocessed=True)
    else:
        vol_a = Volume(
            grid=Tensor3(remap_a.apply(base.values())),
            spacing=base.spacing, origin=base.origin,
            modality="SYNTH-A", preprocessed=True,
        )
        vol_b = Volume(
            grid=Tensor3(remap_b.apply(warp(base, deformation).values())),
            spacing=base.spacing, origin=base.origin,
            modality="SYNTH-B", preprocessed=True,
        )
    geo = base.geometry
    inverse = approximate_inverse(deformation)
    lm_a_norm = geo.mm_to_normalized(phantom.landmarks.points)
    lm_b_norm = inverse.map_points(lm_a_norm)
    truth = TruthBundle(
        field=deformation,
        labels_a=phantom.labels,
        labels_b=warp_nearest(phantom.labels, deformation),
        landmarks_a=phantom.landmarks,
        landmarks_b=LandmarkSet(geo.normalized_to_mm(lm_b_norm), frame="b"),
    )
    return vol_a, vol_b, truth
