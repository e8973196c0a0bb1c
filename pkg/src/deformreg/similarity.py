"""Differentiable similarity losses: 1-LNCC, 1-LNCC^2, MIND-SSC, MSE.

LNCC is a windowed Pearson correlation computed with separable
count-normalized box filters; its squared variant is agnostic to the
local correlation sign, which is what makes contrast-inverted pairs
registrable. MIND-SSC compares 12-channel self-similarity descriptors
instead of raw intensities.

The single epsilon of the package (default 1e-5) sits inside each
variance before the product under the square root, and floors the MIND
normalizer; no other stabilizers exist, so brute-force oracles can
reproduce every value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tape import Node, Tape
from .tensor import Tensor3
from .volume import Volume

SIMILARITY_KINDS = ("LNCC", "LNCC2", "MIND_SSC", "MSE")

# The 6 unit-offset neighbors, then the 12 mutually-adjacent (orthogonal)
# neighbor pairs in lexicographic neighbor-index order. This enumeration
# fixes the descriptor channel order.
NEIGHBOR_OFFSETS = (
    (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
)
SSC_PAIRS = tuple(
    (i, j)
    for i in range(6)
    for j in range(i + 1, 6)
    if sum(a * b for a, b in zip(NEIGHBOR_OFFSETS[i], NEIGHBOR_OFFSETS[j])) == 0
)
assert len(SSC_PAIRS) == 12


class SimilarityError(ValueError):
    """Bad configuration or incompatible inputs."""


@dataclass(frozen=True)
class SimilarityConfig:
    kind: str = "LNCC2"
    window_radius: int = 2
    eps: float = 1e-5
    mind_patch_radius: int = 1

    def __post_init__(self):
        if self.kind not in SIMILARITY_KINDS:
            raise SimilarityError(f"unknown similarity kind {self.kind!r}")
        if self.window_radius < 1:
            raise SimilarityError(f"window_radius must be >= 1, got {self.window_radius}")
        if self.eps <= 0:
            raise SimilarityError(f"eps must be positive, got {self.eps}")
        if self.mind_patch_radius < 1:
            raise SimilarityError(
                f"mind_patch_radius must be >= 1, got {self.mind_patch_radius}"
            )


def _check_same_dims(a: Node, b: Node):
    if a.value.shape != b.value.shape:
        raise SimilarityError(f"input shapes differ: {a.value.shape} vs {b.value.shape}")


def lncc_map_nodes(tape: Tape, a: Node, b: Node, cfg: SimilarityConfig) -> Node:
    """Per-voxel windowed correlation rho = cov / sqrt((var_a+eps)(var_b+eps))."""
    _check_same_dims(a, b)
    r = cfg.window_radius
    ea = tape.box_filter(a, r)
    eb = tape.box_filter(b, r)
    eab = tape.box_filter(tape.mul(a, b), r)
    ea2 = tape.box_filter(tape.square(a), r)
    eb2 = tape.box_filter(tape.square(b), r)
    cov = tape.sub(eab, tape.mul(ea, eb))
    var_a = tape.sub(ea2, tape.square(ea))
    var_b = tape.sub(eb2, tape.square(eb))
    denom = tape.sqrt(
        tape.mul(tape.add_const(var_a, cfg.eps), tape.add_const(var_b, cfg.eps))
    )
    return tape.div(cov, denom)


def mind_ssc_descriptor_nodes(tape: Tape, a: Node, cfg: SimilarityConfig) -> Node:
    """12-channel self-similarity descriptor.

    For each of the 12 orthogonal neighbor pairs (i, j), the pair distance
    is the patch-mean squared difference between the images shifted by the
    two neighbor offsets (edge-clamped shifts, count-normalized patch
    mean). Channels are exp(-SSD_k / V) with V the per-voxel mean of the
    12 distances, floored at eps.
    """
    dims = a.value.dims
    need = 2 * (cfg.mind_patch_radius + 1) + 1
    if min(dims) < need:
        raise SimilarityError(
            f"volume dims {dims} too small for patch radius {cfg.mind_patch_radius}"
        )
    shifted = [tape.shift(a, off) for off in NEIGHBOR_OFFSETS]
    ssds = []
    for i, j in SSC_PAIRS:
        diff = tape.sub(shifted[i], shifted[j])
        ssds.append(tape.box_filter(tape.square(diff), cfg.mind_patch_radius))
    total = ssds[0]
    for k in range(1, 12):
        total = tape.add(total, ssds[k])
    v_floor = tape.clamp(tape.scale(total, 1.0 / 12.0), lo=cfg.eps)
    channels = [tape.exp(tape.scale(tape.div(ssd, v_floor), -1.0)) for ssd in ssds]
    return tape.concat_channels(channels)


def loss_similarity_nodes(tape: Tape, a: Node, b: Node, cfg: SimilarityConfig) -> Node:
    """Scalar similarity loss; >= 0 up to the epsilon slack of LNCC."""
    _check_same_dims(a, b)
    if cfg.kind == "LNCC":
        rho = lncc_map_nodes(tape, a, b, cfg)
        return tape.add_const(tape.scale(tape.mean(rho), -1.0), 1.0)
    if cfg.kind == "LNCC2":
        rho = lncc_map_nodes(tape, a, b, cfg)
        return tape.add_const(tape.scale(tape.mean(tape.square(rho)), -1.0), 1.0)
    if cfg.kind == "MSE":
        return tape.mean(tape.square(tape.sub(a, b)))
    if cfg.kind == "MIND_SSC":
        da = mind_ssc_descriptor_nodes(tape, a, cfg)
        db = mind_ssc_descriptor_nodes(tape, b, cfg)
        return tape.mean(tape.square(tape.sub(da, db)))
    raise SimilarityError(f"unknown similarity kind {cfg.kind!r}")


# -- plain wrappers (fresh throwaway tape, value only) ---------------------------


def _as_tensor(x) -> Tensor3:
    if isinstance(x, Volume):
        return x.grid
    if isinstance(x, Tensor3):
        return x
    return Tensor3(np.asarray(x, dtype=np.float64))


def lncc_map(a, b, cfg: SimilarityConfig = SimilarityConfig()) -> Tensor3:
    tape = Tape()
    return lncc_map_nodes(tape, tape.input(_as_tensor(a)), tape.input(_as_tensor(b)), cfg).value


def loss_similarity(a, b, cfg: SimilarityConfig = SimilarityConfig()) -> float:
    tape = Tape()
    return loss_similarity_nodes(
        tape, tape.input(_as_tensor(a)), tape.input(_as_tensor(b)), cfg
    ).value.item()


def mind_ssc_descriptor(a, cfg: SimilarityConfig = SimilarityConfig(kind="MIND_SSC")) -> Tensor3:
    tape = Tape()
    return mind_ssc_descriptor_nodes(tape, tape.input(_as_tensor(a)), cfg).value
