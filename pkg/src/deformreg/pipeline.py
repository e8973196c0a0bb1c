"""Multi-resolution registration model and per-pair instance optimization.

The model is a four-stage composition: two coarse stages evaluated on
average-pooled inputs (quarter and half resolution) and two full-
resolution stages, wired as nested two-step compositions. Stages are
direct displacement parameter grids optimized per pair; each direction
(A->B, B->A) keeps its own set, tied only through the inverse-consistency
penalty. A fresh (zero) model is exactly the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import LossConfig, randomized_loss_nodes
from .tape import Node, Tape
from .tensor import Tensor3, TensorError
from .transforms import DisplacementField, compose_nodes, resample_field_nodes, warp_nodes
from .volume import Volume

STAGE_COUNT = 4
DIRECTIONS = ("ab", "ba")


class PipelineError(ValueError):
    """Model construction or optimization precondition failure."""


class NumericalAbort(RuntimeError):
    """Loss became non-finite during optimization."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at optimization step {step}")
        self.step = step


def pooled_dim(n: int) -> int:
    return (n + 1) // 2


def two_step(tape: Tape, eval_coarse, eval_fine, ia: Node, ib: Node) -> Node:
    """Coarse map first, then a residual map estimated between the warped
    source and the target; returns coarse o residual."""
    phi1 = eval_coarse(ia, ib)
    warped = warp_nodes(tape, ia, phi1)
    phi2 = eval_fine(warped, ib)
    return compose_nodes(tape, phi1, phi2)


def down_sample(tape: Tape, eval_inner, ia: Node, ib: Node) -> Node:
    """Evaluate the inner stage on 2x average-pooled inputs; the returned
    field lives in normalized coordinates, so it only needs resampling
    onto the outer grid."""
    pa = tape.avg_pool2(ia)
    pb = tape.avg_pool2(ib)
    phi = eval_inner(pa, pb)
    return resample_field_nodes(tape, phi, ia.value.dims)


def stage_grid_dims(base_dims) -> tuple:
    """Grid dims of the four stages: quarter, half, full, full."""
    half = tuple(pooled_dim(n) for n in base_dims)
    quarter = tuple(pooled_dim(n) for n in half)
    return (quarter, half, tuple(base_dims), tuple(base_dims))


@dataclass
class PyramidModel:
    """Four displacement parameter grids per direction plus their wiring."""

    base_dims: tuple
    params: dict[str, Tensor3] = field(default_factory=dict)

    @property
    def stage_dims(self) -> tuple:
        return stage_grid_dims(self.base_dims)

    def param_key(self, direction: str, stage: int) -> str:
        return f"{direction}{stage}"

    def bind(self, tape: Tape) -> "BoundPyramid":
        return BoundPyramid(tape, self)

    def copy(self) -> "PyramidModel":
        return PyramidModel(self.base_dims, dict(self.params))

    def fields(self) -> tuple[DisplacementField, DisplacementField]:
        """Evaluate the current parameters into full-resolution maps."""
        tape = Tape()
        bound = self.bind(tape)
        dummy = tape.input(Tensor3.zeros(self.base_dims))
        u_ab = bound.evaluate(dummy, dummy, "ab")
        u_ba = bound.evaluate(dummy, dummy, "ba")
        return (
            DisplacementField(u_ab.value),
            DisplacementField(u_ba.value),
        )


def build_model(base_dims) -> PyramidModel:
    """Zero-initialized model; evaluating it yields the identity map."""
    base_dims = tuple(int(n) for n in base_dims)
    if len(base_dims) != 3 or min(base_dims) < 8:
        raise PipelineError(f"base dims must be >= 8 per axis to quarter, got {base_dims}")
    model = PyramidModel(base_dims)
    for direction in DIRECTIONS:
        for stage, dims in enumerate(stage_grid_dims(base_dims)):
            model.params[model.param_key(direction, stage)] = Tensor3.zeros(dims, channels=3)
    return model


class BoundPyramid:
    """Model parameters registered on one tape, ready for evaluation."""

    def __init__(self, tape: Tape, model: PyramidModel, trainable: bool = True):
        self.tape = tape
        self.model = model
        self.nodes = {
            key: tape.input(value, parameter=trainable)
            for key, value in model.params.items()
        }

    def _stage_eval(self, key: str):
        node = self.nodes[key]

        def ev(ia: Node, ib: Node) -> Node:
            if ia.value.dims != node.value.dims or ib.value.dims != node.value.dims:
                raise PipelineError(
                    f"stage {key} expects inputs on {node.value.dims}, "
                    f"got {ia.value.dims} and {ib.value.dims}"
                )
            return node

        return ev

    def evaluate(self, ia: Node, ib: Node, direction: str) -> Node:
        """Nested two-step/downsample composition over the four stages."""
        if direction not in DIRECTIONS:
            raise PipelineError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
        tape = self.tape
        s = [self._stage_eval(self.model.param_key(direction, i)) for i in range(STAGE_COUNT)]
        lvl_quarter = lambda a, b: down_sample(tape, s[0], a, b)
        lvl_half = lambda a, b: two_step(tape, lvl_quarter, s[1], a, b)
        lvl_half_at_full = lambda a, b: down_sample(tape, lvl_half, a, b)
        lvl_full = lambda a, b: two_step(tape, lvl_half_at_full, s[2], a, b)
        return two_step(tape, lvl_full, s[3], ia, ib)


def evaluate_model(model: PyramidModel, ia: Volume, ib: Volume):
    """Plain evaluation of both directional maps for a volume pair."""
    tape = Tape()
    bound = BoundPyramid(tape, model, trainable=False)
    na, nb = tape.input(ia.grid), tape.input(ib.grid)
    u_ab = bound.evaluate(na, nb, "ab")
    u_ba = bound.evaluate(nb, na, "ba")
    return DisplacementField(u_ab.value), DisplacementField(u_ba.value)


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam settings.

    The nominal rate matches network fine-tuning practice; direct
    displacement-grid parameters need a much larger step, so the
    effective rate is lr * lr_scale. ``stage_damping`` multiplies the
    rate per pyramid stage (coarse to fine): grids have no architectural
    smoothness prior, and without damping the full-resolution stages
    chase local texture before the coarse stages can move, folding the
    map. Flat damping (1,1,1,1) recovers the undamped behavior."""

    steps: int = 50
    lr: float = 2e-5
    lr_scale: float = 100.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    stage_damping: tuple = (1.0, 0.3, 0.1, 0.1)

    def __post_init__(self):
        if len(self.stage_damping) != STAGE_COUNT:
            raise PipelineError(
                f"stage_damping needs {STAGE_COUNT} factors, got {self.stage_damping}"
            )

    @property
    def effective_lr(self) -> float:
        return self.lr * self.lr_scale


@dataclass
class RegistrationResult:
    phi_ab: DisplacementField
    phi_ba: DisplacementField
    loss_trace: list[float]
    config: dict
    warning: str | None = None


class Adam:
    """Standard bias-corrected Adam over a name->array parameter dict,
    with an optional per-key learning-rate multiplier."""

    def __init__(self, cfg: OptimizerConfig, lr_multipliers: dict | None = None):
        self.cfg = cfg
        self.lr_multipliers = lr_multipliers or {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor3], grads: dict[str, np.ndarray]) -> dict[str, Tensor3]:
        c = self.cfg
        self.t += 1
        out = {}
        for key, value in params.items():
            g = grads[key]
            m = self.m.setdefault(key, np.zeros_like(g))
            v = self.v.setdefault(key, np.zeros_like(g))
            m[:] = c.beta1 * m + (1 - c.beta1) * g
            v[:] = c.beta2 * v + (1 - c.beta2) * g * g
            m_hat = m / (1 - c.beta1**self.t)
            v_hat = v / (1 - c.beta2**self.t)
            lr = c.effective_lr * self.lr_multipliers.get(key, 1.0)
            out[key] = Tensor3(value.data - lr * m_hat / (np.sqrt(v_hat) + c.eps))
        return out


def instance_optimize(
    ia: Volume,
    ib: Volume,
    loss_cfg: LossConfig | None = None,
    opt_cfg: OptimizerConfig | None = None,
    model: PyramidModel | None = None,
    loss_ia: Volume | None = None,
    loss_ib: Volume | None = None,
) -> RegistrationResult:
    """Per-pair Adam refinement of all stage parameters.

    The trace holds the loss before each update plus the final value
    (length steps + 1). Raises NumericalAbort if the loss leaves the
    finite range. Deterministic: same inputs and config give a
    bit-identical trace.
    """
    loss_cfg = loss_cfg or LossConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    if ia.dims != ib.dims:
        raise PipelineError(f"volume dims differ: {ia.dims} vs {ib.dims}")
    if not (ia.preprocessed and ib.preprocessed):
        raise PipelineError("instance optimization expects preprocessed volumes")
    model = model if model is not None else build_model(ia.dims)
    la = loss_ia if loss_ia is not None else ia
    lb = loss_ib if loss_ib is not None else ib

    multipliers = {
        model.param_key(direction, stage): opt_cfg.stage_damping[stage]
        for direction in DIRECTIONS
        for stage in range(STAGE_COUNT)
    }
    adam = Adam(opt_cfg, multipliers)
    trace: list[float] = []

    def forward(with_grads: bool):
        # overflow here is not a crash: it surfaces as a TensorError or a
        # non-finite loss and becomes a NumericalAbort below
        with np.errstate(over="ignore", invalid="ignore"):
            tape = Tape()
            bound = BoundPyramid(tape, model, trainable=with_grads)
            na, nb = tape.input(ia.grid), tape.input(ib.grid)
            nla = na if la is ia else tape.input(la.grid)
            nlb = nb if lb is ib else tape.input(lb.grid)
            total, _ = randomized_loss_nodes(tape, bound, na, nb, nla, nlb, loss_cfg)
            value = total.value.item()
            if not with_grads:
                return value, None
            grads = tape.backward(total)
            by_key = {key: grads[node.id].data for key, node in bound.nodes.items()}
            return value, by_key

    for step in range(opt_cfg.steps):
        try:
            value, grads = forward(with_grads=True)
        except TensorError as exc:  # overflow inside an op is a numeric abort too
            raise NumericalAbort(step) from exc
        if not np.isfinite(value):
            raise NumericalAbort(step)
        trace.append(value)
        model.params = adam.step(model.params, grads)

    try:
        final_value, _ = forward(with_grads=False)
    except TensorError as exc:
        raise NumericalAbort(opt_cfg.steps) from exc
    if not np.isfinite(final_value):
        raise NumericalAbort(opt_cfg.steps)
    trace.append(final_value)

    phi_ab, phi_ba = model.fields()
    warning = None
    if trace[-1] > trace[0]:
        warning = (
            f"final loss {trace[-1]:.6g} exceeds initial {trace[0]:.6g}; "
            "Adam is not monotone"
        )
    config = {
        "loss": {
            "lambda": loss_cfg.lam,
            "use_regularizer": loss_cfg.use_regularizer,
            "similarity": {
                "kind": loss_cfg.similarity.kind,
                "window_radius": loss_cfg.similarity.window_radius,
                "eps": loss_cfg.similarity.eps,
                "mind_patch_radius": loss_cfg.similarity.mind_patch_radius,
            },
        },
        "optimizer": {
            "steps": opt_cfg.steps,
            "lr": opt_cfg.lr,
            "lr_scale": opt_cfg.lr_scale,
            "beta1": opt_cfg.beta1,
            "beta2": opt_cfg.beta2,
            "eps": opt_cfg.eps,
            "seed": opt_cfg.seed,
            "stage_damping": list(opt_cfg.stage_damping),
        },
    }
    return RegistrationResult(phi_ab, phi_ba, trace, config, warning)
