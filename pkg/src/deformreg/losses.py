"""Registration objectives: symmetric similarity + inverse-consistency penalty.

The pair loss evaluates a model in both directions and assembles

    L = L_sim(A o phi_ab, B) + L_sim(B o phi_ba, A)
        + lam * mean_interior ||grad(phi_ab o phi_ba) - I||_F^2

with the gradient taken by deterministic central differences and the
Frobenius term averaged over interior voxels (so lam is grid-size
independent). The randomized variant decouples the volumes fed to the
model from the volumes the similarity terms compare; the maps depend on
the input pair only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .similarity import SimilarityConfig, loss_similarity_nodes
from .tape import Node, Tape
from .transforms import DisplacementField, compose_nodes, warp_nodes
from .volume import Volume


class LossError(ValueError):
    """Bad loss configuration or incompatible inputs."""


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.5
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    use_regularizer: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise LossError(f"regularizer weight must be >= 0, got {self.lam}")


def gradient_inverse_consistency_nodes(tape: Tape, u_ab: Node, u_ba: Node) -> Node:
    """Mean squared Frobenius norm of grad(phi_ab o phi_ba) - I over
    interior voxels (central differences; boundary slices excluded)."""
    dims = u_ba.value.dims
    if min(dims) < 3:
        raise LossError(f"consistency penalty needs a grid >= 3^3, got {dims}")
    comp = compose_nodes(tape, u_ab, u_ba)
    # displacement of the composition is exactly J - I of the composed map
    jac_minus_i = tape.spatial_gradient(comp)
    interior = tape.crop_border(jac_minus_i, 1)
    n_interior = int(np.prod([d - 2 for d in dims]))
    return tape.scale(tape.sum(tape.square(interior)), 1.0 / n_interior)


def gradient_inverse_consistency(phi_ab: DisplacementField, phi_ba: DisplacementField) -> float:
    tape = Tape()
    node = gradient_inverse_consistency_nodes(
        tape, tape.input(phi_ab.u), tape.input(phi_ba.u)
    )
    return node.value.item()


def _check_pair(*volumes: Volume):
    dims = volumes[0].dims
    for v in volumes:
        if v.dims != dims:
            raise LossError(f"volume dims differ: {v.dims} vs {dims}")
        if not v.preprocessed:
            raise LossError("pair losses expect preprocessed volumes")


def randomized_loss_nodes(
    tape: Tape,
    bound_model,
    input_a: Node,
    input_b: Node,
    loss_a: Node,
    loss_b: Node,
    cfg: LossConfig,
):
    """Assemble the loss on an existing tape; returns (total, terms dict).

    Maps are predicted from the input pair; similarity compares the warped
    loss pair. With loss pair == input pair this is the plain symmetric
    objective.
    """
    u_ab = bound_model.evaluate(input_a, input_b, "ab")
    u_ba = bound_model.evaluate(input_b, input_a, "ba")
    sim_ab = loss_similarity_nodes(tape, warp_nodes(tape, loss_a, u_ab), loss_b, cfg.similarity)
    sim_ba = loss_similarity_nodes(tape, warp_nodes(tape, loss_b, u_ba), loss_a, cfg.similarity)
    total = tape.add(sim_ab, sim_ba)
    terms = {"sim_ab": sim_ab, "sim_ba": sim_ba, "u_ab": u_ab, "u_ba": u_ba, "reg": None}
    if cfg.use_regularizer:
        reg = gradient_inverse_consistency_nodes(tape, u_ab, u_ba)
        terms["reg"] = reg
        total = tape.add(total, tape.scale(reg, cfg.lam))
    return total, terms


def loss_breakdown(
    input_a: Volume,
    input_b: Volume,
    loss_a: Volume,
    loss_b: Volume,
    model,
    cfg: LossConfig,
) -> dict[str, float]:
    """Term-wise evaluation on a throwaway tape (no gradients)."""
    _check_pair(input_a, input_b, loss_a, loss_b)
    tape = Tape()
    bound = model.bind(tape)
    nodes = {}
    for key, vol in (("ia", input_a), ("ib", input_b), ("la", loss_a), ("lb", loss_b)):
        nodes[key] = tape.input(vol.grid)
    total, terms = randomized_loss_nodes(
        tape, bound, nodes["ia"], nodes["ib"], nodes["la"], nodes["lb"], cfg
    )
    out = {
        "total": total.value.item(),
        "sim_ab": terms["sim_ab"].value.item(),
        "sim_ba": terms["sim_ba"].value.item(),
        "reg": terms["reg"].value.item() if terms["reg"] is not None else 0.0,
    }
    return out


def randomized_loss(
    input_a: Volume,
    input_b: Volume,
    loss_a: Volume,
    loss_b: Volume,
    model,
    cfg: LossConfig,
) -> float:
    return loss_breakdown(input_a, input_b, loss_a, loss_b, model, cfg)["total"]


def total_loss(ia: Volume, ib: Volume, model, cfg: LossConfig) -> float:
    """Symmetric objective: the randomized loss degenerated to loss pair ==
    input pair."""
    return randomized_loss(ia, ib, ia, ib, model, cfg)
