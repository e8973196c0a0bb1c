"""Dense 3D tensor carrier used by every numeric module.

A Tensor3 is an (nx, ny, nz, channels) float64 array with finiteness
enforced at construction. Volumes are 1-channel, displacement fields are
3-channel, descriptors can be wider. All differentiated computation runs
in float64; file formats downcast to float32 at the I/O boundary.
"""

from __future__ import annotations

import numpy as np


class TensorError(ValueError):
    """Invalid tensor construction or incompatible operand shapes."""


class Tensor3:
    """Immutable dense scalar grid: spatial dims (nx, ny, nz) plus channels."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 3:
            arr = arr[..., np.newaxis]
        if arr.ndim != 4:
            raise TensorError(f"expected 3 or 4 array dims, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise TensorError(f"all dims must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise TensorError("non-finite values rejected at tensor construction")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor3 is immutable")

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor3":
        """No-copy constructor for freshly computed (nx,ny,nz,C) arrays.

        Internal fast path: the caller hands over ownership; the finiteness
        invariant is still enforced.
        """
        if arr.ndim != 4:
            raise TensorError(f"expected 4 array dims, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise TensorError("non-finite values rejected at tensor construction")
        arr.setflags(write=False)
        obj = object.__new__(cls)
        object.__setattr__(obj, "data", arr)
        return obj

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor3(dims={self.dims}, channels={self.channels})"

    @staticmethod
    def full(dims, value: float, channels: int = 1) -> "Tensor3":
        nx, ny, nz = dims
        return Tensor3(np.full((nx, ny, nz, channels), value, dtype=np.float64))

    @staticmethod
    def zeros(dims, channels: int = 1) -> "Tensor3":
        return Tensor3.full(dims, 0.0, channels)

    @staticmethod
    def scalar(value: float) -> "Tensor3":
        return Tensor3(np.full((1, 1, 1, 1), value, dtype=np.float64))


def grid_coordinates(dims) -> Tensor3:
    """Normalized coordinates of the grid nodes as a 3-channel tensor.

    Node i along an axis of length n sits at i/(n-1); a length-1 axis sits
    at 0. This node-centered convention is shared by interpolation, spatial
    gradients and displacement-field composition, so maps expressed on the
    unit cube stay consistent across grid resolutions.
    """
    nx, ny, nz = dims
    ax = [np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1) for n in (nx, ny, nz)]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    return Tensor3(np.stack([gx, gy, gz], axis=-1))


def grid_spacing(dims) -> np.ndarray:
    """Normalized-coordinate distance between adjacent nodes per axis."""
    return np.array([1.0 / (n - 1) if n > 1 else 1.0 for n in dims])
