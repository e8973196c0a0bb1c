"""Command-line entry point for reproducible registration runs.

Subcommands: register (per-pair optimization), synth (phantom pair with
ground truth), evaluate (metrics report from a field plus truth), plan
(pair sampling with the aliasing guard), preprocess (intensity rules).
Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
abort. Reports embed a hash of the fully-resolved configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .fileio import (
    FormatError,
    UnsupportedError,
    read_landmarks_csv,
    read_nifti,
    read_nifti_labels,
    read_volume_raw,
    write_field_raw,
    write_landmarks_csv,
    write_nifti,
    write_nifti_labels,
    write_volume_raw,
)
from .losses import LossConfig, LossError
from .metrics import MetricsError, evaluate_pair
from .pipeline import NumericalAbort, OptimizerConfig, PipelineError, instance_optimize
from .sampling import (
    SamplingError,
    build_plan,
    dataset_weights,
    epoch_plan,
    erratum_guard,
    read_manifest,
    write_plans_csv,
)
from .similarity import SimilarityConfig, SimilarityError
from .synthetic import ModalityRemap, SyntheticError, make_deformation, make_phantom, render_pair
from .tensor import TensorError
from .transforms import DisplacementField, TransformError, percent_neg_jac
from .volume import Volume, VolumeError, preprocess

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

CONFIG_ERRORS = (
    LossError, SimilarityError, SamplingError, PipelineError, TransformError,
    SyntheticError, VolumeError, MetricsError, TensorError, KeyError, ValueError,
)

DEFAULT_CONFIG = {
    "similarity": {
        "kind": "LNCC2",
        "window_radius": 2,
        "eps": 1e-5,
        "mind_patch_radius": 1,
    },
    "loss": {"lambda": 1.5, "use_regularizer": True},
    "optimizer": {
        "steps": 50,
        "lr": 2e-5,
        "lr_scale": 100.0,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "seed": 0,
        "stage_damping": [1.0, 0.3, 0.1, 0.1],
    },
    "strategy": "F",
    "pairs_per_epoch": 4000,
}


class ConfigError(ValueError):
    pass


def _merge_config(path: str | None) -> dict:
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is None:
        return config
    try:
        user = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    for section, value in user.items():
        if section not in config:
            raise ConfigError(f"unknown config key: {section}")
        if isinstance(config[section], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {section} must be an object")
            for key, inner in value.items():
                if key not in config[section]:
                    raise ConfigError(f"unknown config key: {section}.{key}")
                config[section][key] = inner
        else:
            config[section] = value
    return config


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()[:16]


def _configs_from_dict(config: dict):
    sim = SimilarityConfig(**config["similarity"])
    loss = LossConfig(
        lam=config["loss"]["lambda"],
        similarity=sim,
        use_regularizer=config["loss"]["use_regularizer"],
    )
    opt_raw = dict(config["optimizer"])
    opt_raw["stage_damping"] = tuple(opt_raw["stage_damping"])
    opt = OptimizerConfig(**opt_raw)
    return loss, opt


def _read_volume(path: str) -> Volume:
    p = Path(path)
    if p.suffix == ".nii":
        return read_nifti(p)
    if p.exists() or Path(str(p) + ".json").exists():
        return read_volume_raw(str(p).removesuffix(".raw"))
    raise FileNotFoundError(f"volume not found: {path}")


def cmd_register(args) -> int:
    config = _merge_config(args.config)
    loss_cfg, opt_cfg = _configs_from_dict(config)
    source = _read_volume(args.source)
    target = _read_volume(args.target)
    if not source.preprocessed:
        source = preprocess(source)
    if not target.preprocessed:
        target = preprocess(target)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = instance_optimize(source, target, loss_cfg, opt_cfg)
    write_field_raw(result.phi_ab.u.data, out_dir / "phi_ab", {"direction": "ab"})
    write_field_raw(result.phi_ba.u.data, out_dir / "phi_ba", {"direction": "ba"})
    with open(out_dir / "trace.csv", "w") as f:
        f.write("step,loss\n")
        for step, value in enumerate(result.loss_trace):
            f.write(f"{step},{value:.12g}\n")
    report = {
        "config_hash": config_hash(config),
        "initial_loss": result.loss_trace[0],
        "final_loss": result.loss_trace[-1],
        "steps": opt_cfg.steps,
        "percent_neg_jacobian": percent_neg_jac(result.phi_ab),
        "warning": result.warning,
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(f"register: final loss {report['final_loss']:.6g}, "
          f"%|J|<0 = {report['percent_neg_jacobian']:.4g}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = (args.dims,) * 3
    phantom = make_phantom(args.seed, dims, n_structures=args.structures)
    amplitude = args.amplitude_voxels / (args.dims - 1)
    deformation = make_deformation(args.seed + 1, dims, amplitude, n_bumps=args.bumps)
    vol_a, vol_b, truth = render_pair(
        phantom,
        ModalityRemap(args.remap_a),
        ModalityRemap(args.remap_b),
        deformation,
    )
    write_nifti(vol_a, out_dir / "a.nii")
    write_nifti(vol_b, out_dir / "b.nii")
    write_nifti_labels(truth.labels_a, out_dir / "labels_a.nii")
    write_nifti_labels(truth.labels_b, out_dir / "labels_b.nii")
    write_landmarks_csv(truth.landmarks_a, out_dir / "landmarks_a.csv")
    write_landmarks_csv(truth.landmarks_b, out_dir / "landmarks_b.csv")
    write_field_raw(truth.field.u.data, out_dir / "truth_field", {"direction": "ab"})
    meta = {
        "seed": args.seed,
        "dims": list(dims),
        "structures": args.structures,
        "remap_a": args.remap_a,
        "remap_b": args.remap_b,
        "amplitude_voxels": args.amplitude_voxels,
        "bumps": args.bumps,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    print(f"synth: pair written to {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .fileio import read_field_raw
    from .tensor import Tensor3

    phi = None
    if args.field:
        u = read_field_raw(str(args.field).removesuffix(".raw"))
        phi = DisplacementField(Tensor3(u))
    labels_a = read_nifti_labels(args.labels_a) if args.labels_a else None
    labels_b = read_nifti_labels(args.labels_b) if args.labels_b else None
    landmarks_a = read_landmarks_csv(args.landmarks_a, "a") if args.landmarks_a else None
    landmarks_b = read_landmarks_csv(args.landmarks_b, "b") if args.landmarks_b else None
    geometry = None
    if args.reference:
        geometry = _read_volume(args.reference).geometry
    elif labels_a is not None:
        geometry = labels_a.geometry
    if phi is None:
        if labels_a is not None:
            phi = DisplacementField.identity(labels_a.dims)
        elif geometry is not None:
            phi = DisplacementField.identity(geometry.dims)
        else:
            raise ConfigError("evaluate needs --field, --labels-a, or --reference")
    invocation = {
        "command": "evaluate",
        "field": args.field,
        "labels_a": args.labels_a,
        "labels_b": args.labels_b,
        "landmarks_a": args.landmarks_a,
        "landmarks_b": args.landmarks_b,
        "reference": args.reference,
    }
    report = evaluate_pair(
        phi,
        labels_a=labels_a,
        labels_b=labels_b,
        landmarks_a=landmarks_a,
        landmarks_b=landmarks_b,
        geometry=geometry,
        pair_id=args.pair_id,
        config_hash=config_hash(invocation),
    )
    Path(args.out).write_text(report.to_json())
    summary = []
    if report.mean_dice is not None:
        summary.append(f"Dice {report.mean_dice:.2f}")
    if report.mtre_mm is not None:
        summary.append(f"mTRE {report.mtre_mm:.4g} mm")
    summary.append(f"%|J|<0 = {report.percent_neg_jacobian:.4g}")
    print("evaluate: " + ", ".join(summary))
    return EXIT_OK


def cmd_plan(args) -> int:
    config = _merge_config(args.config)
    manifests = [read_manifest(p) for p in args.manifest]
    strategy = args.strategy or config["strategy"]
    if args.epoch:
        weights = dataset_weights(manifests, mode=args.weights_mode)
        plans = epoch_plan(
            manifests, weights, strategy,
            pairs_per_epoch=args.pairs, seed=args.seed,
        )
    else:
        plans = build_plan(manifests, strategy, args.pairs, seed=args.seed)
    write_plans_csv(plans, args.out)
    verdict = erratum_guard(plans, strategy)
    print(f"plan: {len(plans)} pairs -> {args.out}")
    print(f"erratum guard: {verdict}")
    return EXIT_OK if verdict.passed else EXIT_CONFIG


def cmd_preprocess(args) -> int:
    volume = _read_volume(args.input)
    if args.modality:
        from dataclasses import replace

        volume = replace(volume, modality=args.modality)
    out = preprocess(volume)
    out_path = Path(args.output)
    if out_path.suffix == ".nii":
        write_nifti(out, out_path)
    else:
        write_volume_raw(out, out_path)
    vals = out.values()
    print(f"preprocess: wrote {out_path} (range [{vals.min():.4g}, {vals.max():.4g}])")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deformreg",
        description="Optimization-based multimodal deformable 3D registration",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="optimize a displacement field for one pair")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("synth", help="write a phantom pair with ground truth")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--dims", type=int, default=32)
    p.add_argument("--structures", type=int, default=4)
    p.add_argument("--remap-a", default="identity")
    p.add_argument("--remap-b", default="invert")
    p.add_argument("--amplitude-voxels", type=float, default=2.0)
    p.add_argument("--bumps", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("evaluate", help="score a registration against truth")
    p.add_argument("--field")
    p.add_argument("--labels-a")
    p.add_argument("--labels-b")
    p.add_argument("--landmarks-a")
    p.add_argument("--landmarks-b")
    p.add_argument("--reference", help="volume supplying the mm geometry")
    p.add_argument("--pair-id", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plan", help="sample training pairs and run the aliasing guard")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--strategy", choices=("B", "F", "R"))
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epoch", action="store_true",
                   help="weighted epoch sampling instead of uniform draws")
    p.add_argument("--weights-mode", choices=("training", "finetuning"), default="training")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("preprocess", help="apply the intensity normalization rules")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--modality")
    p.set_defaults(func=cmd_preprocess)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError, PermissionError,
            FormatError, UnsupportedError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
