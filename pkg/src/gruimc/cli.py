"""``imc`` command line: data generation, training, certification, simulation, evaluation.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 certification failure, 5 simulation fault.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_UNCERTIFIED, EXIT_SIMULATION = 0, 2, 3, 4, 5

log = logging.getLogger("gruimc")


def _deterministic_env() -> None:
    # single-threaded BLAS gives a fixed reduction order; only effective before numpy loads
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"


def _load_config(args):
    from . import config as config_mod

    data = {}
    if getattr(args, "preset", None):
        data = config_mod.preset(args.preset)
    if getattr(args, "config", None):
        try:
            data = _merge(data, json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise config_mod.ConfigError(f"cannot read {args.config}: {exc}") from exc
    data = config_mod.apply_env(data)
    if args.seed is not None:
        data["seed"] = args.seed
    if getattr(args, "out_dir", None):
        data["output_dir"] = str(args.out_dir)
    return config_mod.from_dict(data)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def cmd_gen_data(args) -> int:
    from . import pipeline

    cfg = _load_config(args)
    for p in pipeline.gen_data(cfg, args.out, args.workers):
        print(p)
    return EXIT_OK


def cmd_train_model(args) -> int:
    from . import pipeline

    cfg = _load_config(args)
    path, report = pipeline.train_model(cfg, args.data, args.out)
    print(f"{path}: best epoch {report['best_epoch']}, val MSE {report['best_val_mse']:.6g}, "
          f"stopped at {report['stopping_epoch']} ({report['stop_reason']})")
    return EXIT_OK


def cmd_certify(args) -> int:
    from . import pipeline

    ok, cert = pipeline.certify_file(args.weights, args.out, args.target)
    bound = 0.0 if args.target is None else args.target
    for i, nu in enumerate(cert["residuals"]):
        ok_l = nu < bound if args.target is None else nu <= bound
        print(f"layer {i + 1}: nu = {nu:+.6f}  {'ok' if ok_l else 'VIOLATED'}")
    print("certified" if ok else "NOT certified")
    return EXIT_OK if ok else EXIT_UNCERTIFIED


def cmd_gen_refs(args) -> int:
    from . import pipeline

    cfg = _load_config(args)
    for p in pipeline.gen_refs(cfg, args.model, args.out):
        print(p)
    return EXIT_OK


def cmd_train_controller(args) -> int:
    from . import pipeline

    cfg = _load_config(args)
    path, report = pipeline.train_controller(cfg, args.model, args.refs, args.out)
    print(f"{path}: best epoch {report['best_epoch']}, val MSE {report['best_val_mse']:.6g}, "
          f"stopped at {report['stopping_epoch']} ({report['stop_reason']})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from . import imc, pipeline
    from . import plant as plant_mod
    from .gru import load_network

    cfg = _load_config(args)
    params = pipeline.plant_params(cfg)
    normalizer = plant_mod.Normalizer.for_plant(params)
    schedule = imc.Schedule.load(args.schedule, normalizer)
    noise = cfg.loop.noise_std if args.noise is None else args.noise
    asm = imc.tank_assembly(load_network(args.ctrl), load_network(args.model), cfg.tau_s, cfg.tau_r,
                            noise_std=noise, seed=cfg.seed, params=params)
    run = imc.run_experiment(asm, schedule, sample_period=cfg.tau_s)
    out = Path(args.out)
    run.to_csv(out)
    imc.write_sidecar(out.with_suffix(".json"),
                      {"tau_s": cfg.tau_s, "tau_r": cfg.tau_r, "noise_std": noise, "seed": cfg.seed,
                       "plant": params.to_dict()},
                      {"model": args.model, "controller": args.ctrl})
    print(out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from . import pipeline

    cfg = _load_config(args)
    report = pipeline.evaluate(args.log, args.schedule, args.noisy_log, cfg, pipeline.plant_params(cfg))
    Path(args.out).write_text(report.to_json())
    print(report.render())
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from . import pipeline

    cfg = _load_config(args)
    try:
        manifest = pipeline.run_pipeline(cfg, args.workers)
    except pipeline.StageFailed as exc:
        print(f"stage {exc.stage} failed: {exc}", file=sys.stderr)
        for a in exc.artifacts:
            print(f"  kept {Path(cfg.output_dir) / a}", file=sys.stderr)
        return exc.code
    print((Path(cfg.output_dir) / "report.txt").read_text(), end="")
    print(f"manifest: {Path(cfg.output_dir) / 'manifest.json'} ({len(manifest.artifacts)} artifacts)")
    return EXIT_OK


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config JSON")
    p.add_argument("--preset", choices=("full", "desk", "smoke"), help="start from a named config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imc", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--workers", type=int, default=1, help="processes for independent experiments")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded linear algebra for bitwise-reproducible runs")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress lines on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="open-loop plant experiments -> NDJSON")
    _config_args(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-model", help="identify the GRU plant model")
    _config_args(p)
    p.add_argument("--data", type=Path, required=True, help="directory written by gen-data")
    p.add_argument("--out", type=Path, required=True, help="model weights JSON")
    p.set_defaults(func=cmd_train_model)

    p = sub.add_parser("certify", help="check the stability condition (exit 0 iff certified)")
    p.add_argument("weights", type=Path)
    p.add_argument("--out", type=Path, help="write the certificate JSON here")
    p.add_argument("--target", type=float, default=None,
                   help="require every residual <= TARGET instead of < 0")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("gen-refs", help="feasible reference trajectories from a model")
    _config_args(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_gen_refs)

    p = sub.add_parser("train-controller", help="learn the controller against a frozen model")
    _config_args(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--refs", type=Path, required=True, help="directory written by gen-refs")
    p.add_argument("--out", type=Path, required=True, help="controller weights JSON")
    p.set_defaults(func=cmd_train_controller)

    p = sub.add_parser("simulate", help="closed-loop run on the tank plant")
    _config_args(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--ctrl", type=Path, required=True)
    p.add_argument("--schedule", type=Path, required=True, help="set-point NDJSON")
    p.add_argument("--noise", type=float, default=None, help="measurement noise std (normalized)")
    p.add_argument("--out", type=Path, required=True, help="log CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="steady-state and tracking metrics from closed-loop logs")
    _config_args(p)
    p.add_argument("--log", type=Path, required=True, help="noise-free log CSV")
    p.add_argument("--noisy-log", type=Path, default=None, help="noisy log CSV for the tracking RMSE")
    p.add_argument("--schedule", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="report JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="every stage end to end, with a run manifest")
    _config_args(p)
    p.add_argument("--out-dir", type=Path, default=None, help="overrides output_dir")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.deterministic:
        _deterministic_env()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    from .config import ConfigError
    from .imc import SimulationFault
    from .training import TrainingDiverged

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except SimulationFault as exc:
        print(f"simulation fault: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
