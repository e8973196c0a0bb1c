"""Pyramid wiring, model construction, and instance optimization."""

import numpy as np
import pytest

from deformreg.losses import LossConfig
from deformreg.pipeline import (
    BoundPyramid,
    NumericalAbort,
    OptimizerConfig,
    PipelineError,
    build_model,
    down_sample,
    evaluate_model,
    instance_optimize,
    stage_grid_dims,
    two_step,
)
from deformreg.tape import Tape
from deformreg.tensor import Tensor3, grid_coordinates
from deformreg.transforms import DisplacementField, warp
from deformreg.volume import Volume


def make_volume(values):
    return Volume(grid=Tensor3(np.asarray(values, dtype=np.float64)),
                  modality="SYNTH-BASE", preprocessed=True)


def constant_field_eval(tape, dims, t):
    """Stub stage: returns a constant-translation field, records its inputs."""
    calls = []

    def ev(ia, ib):
        calls.append((ia, ib))
        u = np.broadcast_to(np.asarray(t, dtype=np.float64), (*dims, 3)).copy()
        return tape.input(Tensor3(u))

    return ev, calls


class TestTwoStep:
    def test_identity_stages(self):
        tape = Tape()
        rng = np.random.default_rng(1)
        dims = (8, 8, 8)
        ia = tape.input(Tensor3(rng.uniform(0, 1, (*dims, 1))))
        ib = tape.input(Tensor3(rng.uniform(0, 1, (*dims, 1))))
        ev1, _ = constant_field_eval(tape, dims, (0, 0, 0))
        ev2, _ = constant_field_eval(tape, dims, (0, 0, 0))
        out = two_step(tape, ev1, ev2, ia, ib)
        assert np.max(np.abs(out.value.data)) <= 1e-12

    def test_translation_then_identity(self):
        tape = Tape()
        dims = (8, 8, 8)
        ia = tape.input(Tensor3.full(dims, 0.5))
        ib = tape.input(Tensor3.full(dims, 0.5))
        ev1, _ = constant_field_eval(tape, dims, (0.1, 0.0, 0.0))
        ev2, _ = constant_field_eval(tape, dims, (0.0, 0.0, 0.0))
        out = two_step(tape, ev1, ev2, ia, ib)
        assert np.allclose(out.value.data, [0.1, 0.0, 0.0], atol=1e-12)

    def test_translations_compose_additively(self):
        tape = Tape()
        dims = (8, 8, 8)
        ia = tape.input(Tensor3.full(dims, 0.5))
        ib = tape.input(Tensor3.full(dims, 0.5))
        ev1, _ = constant_field_eval(tape, dims, (0.05, -0.02, 0.0))
        ev2, _ = constant_field_eval(tape, dims, (0.03, 0.01, -0.04))
        out = two_step(tape, ev1, ev2, ia, ib)
        assert np.allclose(out.value.data, [0.08, -0.01, -0.04], atol=1e-12)

    def test_second_stage_sees_warped_first_argument(self):
        # the residual stage is estimated between the warped source and
        # the unchanged target
        tape = Tape()
        dims = (9, 9, 9)
        ramp = grid_coordinates(dims).data[..., 0:1]
        rng = np.random.default_rng(2)
        target = rng.uniform(0, 1, (*dims, 1))
        ia = tape.input(Tensor3(ramp))
        ib = tape.input(Tensor3(target))
        t = (0.25, 0.0, 0.0)
        ev1, _ = constant_field_eval(tape, dims, t)
        ev2, calls2 = constant_field_eval(tape, dims, (0, 0, 0))
        two_step(tape, ev1, ev2, ia, ib)
        (warped_arg, target_arg), = calls2
        expected = warp(make_volume(ramp[..., 0]), DisplacementField.translation(dims, t))
        assert np.max(np.abs(warped_arg.value.data[..., 0] - expected.values())) < 1e-10
        assert warped_arg is not ia
        assert target_arg is ib


class TestDownSample:
    def test_inner_sees_pooled_dims(self):
        tape = Tape()
        dims = (16, 16, 16)
        ia = tape.input(Tensor3.full(dims, 0.3))
        ib = tape.input(Tensor3.full(dims, 0.7))
        ev, calls = constant_field_eval(tape, (8, 8, 8), (0, 0, 0))
        down_sample(tape, ev, ia, ib)
        (pa, pb), = calls
        assert pa.value.dims == (8, 8, 8)
        assert pb.value.dims == (8, 8, 8)

    def test_identity_passthrough(self):
        tape = Tape()
        dims = (16, 16, 16)
        ia = tape.input(Tensor3.full(dims, 0.3))
        ib = tape.input(Tensor3.full(dims, 0.7))
        ev, _ = constant_field_eval(tape, (8, 8, 8), (0, 0, 0))
        out = down_sample(tape, ev, ia, ib)
        assert out.value.dims == dims
        assert np.max(np.abs(out.value.data)) <= 1e-12

    def test_constant_translation_is_scale_free(self):
        tape = Tape()
        dims = (16, 16, 16)
        ia = tape.input(Tensor3.full(dims, 0.3))
        ib = tape.input(Tensor3.full(dims, 0.7))
        ev, _ = constant_field_eval(tape, (8, 8, 8), (0.07, 0.0, -0.01))
        out = down_sample(tape, ev, ia, ib)
        assert np.allclose(out.value.data, [0.07, 0.0, -0.01], atol=1e-12)


class TestBuildModel:
    def test_stage_dims_from_nesting(self):
        assert stage_grid_dims((32, 32, 32)) == ((8,) * 3, (16,) * 3, (32,) * 3, (32,) * 3)
        model = build_model((32, 32, 32))
        assert model.params["ab0"].dims == (8, 8, 8)
        assert model.params["ab1"].dims == (16, 16, 16)
        assert model.params["ab2"].dims == (32, 32, 32)
        assert model.params["ba3"].dims == (32, 32, 32)

    def test_odd_dims_pool_with_ceil(self):
        assert stage_grid_dims((21, 21, 21)) == ((6,) * 3, (11,) * 3, (21,) * 3, (21,) * 3)

    def test_too_small_rejected(self):
        with pytest.raises(PipelineError):
            build_model((6, 32, 32))

    def test_fresh_model_is_identity(self):
        rng = np.random.default_rng(3)
        model = build_model((16, 16, 16))
        a = make_volume(rng.uniform(0, 1, (16, 16, 16)))
        b = make_volume(rng.uniform(0, 1, (16, 16, 16)))
        phi_ab, phi_ba = evaluate_model(model, a, b)
        assert np.max(np.abs(phi_ab.u.data)) == 0.0
        assert np.max(np.abs(phi_ba.u.data)) == 0.0

    def test_stage_input_dims_contract(self):
        model = build_model((16, 16, 16))
        tape = Tape()
        bound = BoundPyramid(tape, model)
        good = tape.input(Tensor3.zeros((16, 16, 16)))
        bad = tape.input(Tensor3.zeros((8, 8, 8)))
        with pytest.raises(PipelineError, match="stage"):
            bound.evaluate(bad, good, "ab")

    def test_unknown_direction(self):
        model = build_model((16, 16, 16))
        tape = Tape()
        bound = BoundPyramid(tape, model)
        x = tape.input(Tensor3.zeros((16, 16, 16)))
        with pytest.raises(PipelineError):
            bound.evaluate(x, x, "xy")


class TestInstanceOptimize:
    def test_aligned_pair_stays_near_identity(self):
        rng = np.random.default_rng(4)
        v = make_volume(rng.uniform(0.1, 0.9, (16, 16, 16)))
        res = instance_optimize(v, v, LossConfig(), OptimizerConfig(steps=10))
        from deformreg.transforms import percent_neg_jac

        assert percent_neg_jac(res.phi_ab) == 0.0
        assert len(res.loss_trace) == 11
        # Adam steps +-lr even at a perfect optimum, so allow either the
        # 2x-slack bound or an absolute epsilon-scale ceiling
        assert res.loss_trace[-1] <= max(2 * res.loss_trace[0], 5e-3)
        assert np.max(np.abs(res.phi_ab.u.data)) < 0.5 / 15.0  # half a voxel

    def test_trace_deterministic(self):
        rng = np.random.default_rng(5)
        a = make_volume(rng.uniform(0.1, 0.9, (16, 16, 16)))
        b = make_volume(rng.uniform(0.1, 0.9, (16, 16, 16)))
        cfg = OptimizerConfig(steps=5)
        first = instance_optimize(a, b, LossConfig(), cfg)
        second = instance_optimize(a, b, LossConfig(), cfg)
        assert first.loss_trace == second.loss_trace
        assert np.array_equal(first.phi_ab.u.data, second.phi_ab.u.data)

    def test_translation_recovery(self):
        rng = np.random.default_rng(6)
        n = 16
        base = rng.uniform(0, 1, (n, n, n))
        for _ in range(2):
            for axis in range(3):
                base = (np.roll(base, 1, axis) + base + np.roll(base, -1, axis)) / 3
        base = (base - base.min()) / (base.max() - base.min())
        a = make_volume(base)
        t = (0.05, 0.0, 0.0)
        b = warp(a, DisplacementField.translation((n, n, n), t))
        res = instance_optimize(a, b, LossConfig(), OptimizerConfig(steps=150))
        interior = res.phi_ab.u.data[3:-3, 3:-3, 3:-3, :]
        assert interior[..., 0].mean() == pytest.approx(t[0], rel=0.1)

    def test_dim_mismatch_rejected(self):
        rng = np.random.default_rng(7)
        a = make_volume(rng.uniform(0, 1, (16, 16, 16)))
        b = make_volume(rng.uniform(0, 1, (18, 16, 16)))
        with pytest.raises(PipelineError):
            instance_optimize(a, b)

    def test_unpreprocessed_rejected(self):
        rng = np.random.default_rng(8)
        raw = Volume(Tensor3(rng.uniform(0, 500, (16, 16, 16))), modality="CT")
        with pytest.raises(PipelineError):
            instance_optimize(raw, raw)

    def test_numerical_abort_carries_step(self):
        rng = np.random.default_rng(9)
        a = make_volume(rng.uniform(0.1, 0.9, (16, 16, 16)))
        b = make_volume(rng.uniform(0.1, 0.9, (16, 16, 16)))
        absurd = OptimizerConfig(steps=3, lr_scale=1e190)
        with pytest.raises(NumericalAbort) as err:
            instance_optimize(a, b, LossConfig(), absurd)
        assert err.value.step >= 1

    def test_result_config_snapshot(self):
        rng = np.random.default_rng(10)
        v = make_volume(rng.uniform(0.1, 0.9, (16, 16, 16)))
        res = instance_optimize(v, v, LossConfig(), OptimizerConfig(steps=2))
        assert res.config["loss"]["lambda"] == 1.5
        assert res.config["optimizer"]["steps"] == 2
