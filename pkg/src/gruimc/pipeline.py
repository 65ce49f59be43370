"""Stage functions shared by the CLI subcommands and the end-to-end pipeline.

Each stage reads and writes files only, so every subcommand can be rerun on
its own.  Layout of a run directory::

    data/io_{train,val,test}.ndjson   open-loop plant experiments
    model.json, model.report.json     identified model and its training report
    model.cert.json                   stability certificate
    refs/refs_{train,val,test}.ndjson reference trajectories, refs/pool.json
    ctrl.json, ctrl.report.json, ctrl.cert.json
    schedule.ndjson                   closed-loop set-points
    loop_clean.csv, loop_noisy.csv    closed-loop logs (+ .json sidecars)
    report.json, report.txt           evaluation
    manifest.json
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

from . import datagen as dg
from . import imc, metrics
from . import plant as plant_mod
from .config import ExperimentConfig
from .gru import init_network, load_network, save_network, simulate
from .manifest import RunManifest, now
from .stability import certify
from .training import TrainingDiverged, train

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_UNCERTIFIED, EXIT_SIMULATION = 0, 2, 3, 4, 5

# offsets added to the run seed, one per random stream
_SEED_IO = {"train": 1, "val": 2, "test": 3}
_SEED_POOL, _SEED_REFS, _SEED_NOISE = 0, 0, 12


class StageFailed(RuntimeError):
    """A pipeline stage stopped; carries the stage name, exit code and artifacts kept so far."""

    def __init__(self, stage: str, message: str, code: int, artifacts: list[str] | None = None):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.code = code
        self.artifacts = artifacts or []


def plant_params(cfg: ExperimentConfig) -> plant_mod.TankParams:
    if cfg.plant_params is None:
        return plant_mod.DEFAULT_PARAMS
    return plant_mod.TankParams.from_json(cfg.plant_params)


def _io_lengths(cfg: ExperimentConfig) -> dict[str, int]:
    io = cfg.io
    return {"train": io.window + (io.train_windows - 1) * io.stride,
            "val": io.window + (io.val_windows - 1) * io.val_stride,
            "test": io.test_length}


def _experiment(args):
    cfg_dict, split, length, seed = args
    mprs = dg.MprsConfig(**cfg_dict["mprs"])
    params = plant_mod.TankParams(**cfg_dict["params"])
    rng = np.random.default_rng(seed + _SEED_IO[split])
    u = dg.gen_mprs(mprs, length, rng)
    y, _ = dg.run_plant(u, params, noise_std=cfg_dict["noise_std"], rng=rng,
                        h0=imc.mid_range_levels(params), tau_s=cfg_dict["tau_s"])
    return split, u, y


def gen_data(cfg: ExperimentConfig, out_dir, workers: int = 1) -> list[Path]:
    """Run the three open-loop experiments and write them as NDJSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = plant_params(cfg)
    shared = {"tau_s": cfg.tau_s, "mprs": asdict(cfg.mprs), "params": params.to_dict(),
              "noise_std": cfg.io.noise_std}
    jobs = [(shared, split, n, cfg.seed) for split, n in _io_lengths(cfg).items()]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_experiment, jobs))
    else:
        results = [_experiment(j) for j in jobs]
    paths = []
    for split, u, y in results:
        path = out_dir / f"io_{split}.ndjson"
        dg.write_ndjson(path, dg.io_records(u, y, cfg.tau_s))
        paths.append(path)
    return paths


def _windows(cfg: ExperimentConfig, data_dir: Path):
    u, y = dg.load_io(data_dir / "io_train.ndjson")
    train_set = dg.tbptt_slices(u, y, cfg.io.window, cfg.io.stride)
    uv, yv = dg.load_io(data_dir / "io_val.ndjson")
    val_set = dg.tbptt_slices(uv, yv, cfg.io.window, cfg.io.val_stride)
    return train_set, val_set


def _progress(message: str) -> None:
    log.info(message)


def _save_report(report, path: Path) -> None:
    path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")


def model_test_fit(model, data_dir, washout: int) -> float:
    u, y = dg.load_io(Path(data_dir) / "io_test.ndjson")
    return metrics.fit_index(simulate(model, u).outputs, y, washout)


def train_model(cfg: ExperimentConfig, data_dir, out_path) -> tuple[Path, dict]:
    data_dir, out_path = Path(data_dir), Path(out_path)
    train_set, val_set = _windows(cfg, data_dir)
    net = init_network(2, cfg.model.widths, 2, "identity", np.random.default_rng(cfg.model.init_seed))
    best, report = train(net, train_set, val_set, cfg.model_train, loss="model", progress=_progress)
    save_network(best, out_path, role="model")
    _save_report(report, out_path.with_suffix(".report.json"))
    return out_path, report.to_dict()


def certify_file(weights_path, out_path=None, target: float | None = None) -> tuple[bool, dict]:
    """Certificate of a weight file; ``target`` (e.g. the training margin) tightens the test."""
    cert = certify(load_network(weights_path))
    ok = cert.certified if target is None else cert.satisfies(target)
    if out_path is not None:
        Path(out_path).write_text(json.dumps(cert.to_dict(), sort_keys=True, indent=1) + "\n")
    return ok, cert.to_dict()


def gen_refs(cfg: ExperimentConfig, model_path, out_dir) -> list[Path]:
    """Screen feasible set-points on the model and build the reference splits."""
    model = load_network(model_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    r = cfg.refs
    fmap = dg.feasible_output_map(model, r.map_density)
    pool, inputs = dg.screen_setpoints(model, fmap, r.pool, np.random.default_rng(cfg.seed + _SEED_POOL),
                                       r.inset, r.tol_y)
    ref_model = dg.ReferenceModel.from_time_constant(cfg.tau_s, cfg.tau_r, model.output_dim)
    sets = dg.gen_reference_dataset(pool, r.count, r.length, ref_model, r.hold_min, r.hold_max,
                                    r.split, seed=cfg.seed + _SEED_REFS)
    paths = []
    for name, refs in sets.items():
        path = out_dir / f"refs_{name}.ndjson"
        dg.write_ndjson(path, dg.reference_records(refs, cfg.tau_s))
        paths.append(path)
    pool_path = out_dir / "pool.json"
    dg.write_meta(pool_path, setpoints=pool, inputs=inputs, map_outputs=fmap.y)
    paths.append(pool_path)
    return paths


def train_controller(cfg: ExperimentConfig, model_path, refs_dir, out_path) -> tuple[Path, dict]:
    model = load_network(model_path)
    refs_dir, out_path = Path(refs_dir), Path(out_path)
    train_refs = dg.load_references(refs_dir / "refs_train.ndjson").filtered
    val_refs = dg.load_references(refs_dir / "refs_val.ndjson").filtered
    ctrl = init_network(model.output_dim, cfg.controller.widths, model.input_dim, "tanh",
                        np.random.default_rng(cfg.controller.init_seed))
    best, report = train(ctrl, train_refs, val_refs, cfg.controller_train, loss="controller",
                         model=model, progress=_progress)
    save_network(best, out_path, role="controller")
    _save_report(report, out_path.with_suffix(".report.json"))
    return out_path, report.to_dict()


def controller_test_fit(ctrl, model, refs_dir, washout: int) -> list[float]:
    """Nominal tracking FIT (controller in series with the model) per held-out reference."""
    refs = dg.load_references(Path(refs_dir) / "refs_test.ndjson").filtered
    return [metrics.fit_index(simulate(model, simulate(ctrl, r).outputs).outputs, r, washout)
            for r in refs]


def default_schedule(cfg: ExperimentConfig, model, normalizer: plant_mod.Normalizer) -> imc.Schedule:
    """Four feasible set-points spread toward the edge of the feasible output map."""
    lp = cfg.loop
    if lp.setpoints is not None:
        sp = normalizer.normalize_many(np.asarray(lp.setpoints, dtype=np.float64), plant_mod.OUTPUT_CHANNELS)
        return imc.Schedule(sp, [lp.hold] * len(sp))
    fmap = dg.feasible_output_map(model, cfg.refs.map_density)
    centroid = fmap.y.mean(axis=0)
    vertices = fmap.y[ConvexHull(fmap.y).vertices]
    # greedy farthest-point pick of four hull vertices spreads the set-points over the map
    chosen = [int(np.argmax(np.linalg.norm(vertices - centroid, axis=1)))]
    while len(chosen) < 4:
        gap = np.min(np.linalg.norm(vertices[:, None] - vertices[chosen][None], axis=2), axis=1)
        chosen.append(int(np.argmax(gap)))
    points = []
    for corner in vertices[chosen]:
        for shrink in (1.0, 0.8, 0.6, 0.4):
            y0 = centroid + lp.spread * shrink * (corner - centroid)
            try:
                dg.solve_equilibrium(model, y0, tol_y=cfg.refs.tol_y, grid=fmap, precise=False)
            except dg.EquilibriumNotFound:
                continue
            points.append(y0)
            break
        else:
            points.append(centroid)
    return imc.Schedule(np.array(points), [lp.hold] * len(points))


def _loop(args):
    cfg_dict, model_path, ctrl_path, schedule, noise_std, seed = args
    params = plant_mod.TankParams(**cfg_dict["params"])
    asm = imc.tank_assembly(load_network(ctrl_path), load_network(model_path), cfg_dict["tau_s"],
                            cfg_dict["tau_r"], noise_std=noise_std, seed=seed, params=params)
    return imc.run_experiment(asm, schedule, sample_period=cfg_dict["tau_s"])


def simulate_loop(cfg: ExperimentConfig, model_path, ctrl_path, schedule: imc.Schedule, out_dir,
                  workers: int = 1) -> list[Path]:
    """Noise-free and noisy closed-loop runs, each logged as CSV with a JSON sidecar."""
    out_dir = Path(out_dir)
    params = plant_params(cfg)
    shared = {"tau_s": cfg.tau_s, "tau_r": cfg.tau_r, "params": params.to_dict()}
    noise_seed = cfg.seed + _SEED_NOISE
    jobs = [(shared, model_path, ctrl_path, schedule, 0.0, noise_seed),
            (shared, model_path, ctrl_path, schedule, cfg.loop.noise_std, noise_seed)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            logs = list(pool.map(_loop, jobs))
    else:
        logs = [_loop(j) for j in jobs]
    paths = []
    for name, lg, noise in zip(("loop_clean", "loop_noisy"), logs, (0.0, cfg.loop.noise_std)):
        path = out_dir / f"{name}.csv"
        lg.to_csv(path)
        sidecar = path.with_suffix(".json")
        imc.write_sidecar(sidecar, {"tau_s": cfg.tau_s, "tau_r": cfg.tau_r, "noise_std": noise,
                                    "noise_seed": noise_seed, "plant": params.to_dict()},
                          {"model": model_path, "controller": ctrl_path}, relative_to=out_dir)
        paths += [path, sidecar]
    return paths


def evaluate(log_path, schedule_path, noisy_log_path=None, cfg: ExperimentConfig | None = None,
             params: plant_mod.TankParams = plant_mod.DEFAULT_PARAMS) -> metrics.EvalReport:
    """Steady-state errors from the noise-free log, tracking RMSE from the noisy one (if given)."""
    normalizer = plant_mod.Normalizer.for_plant(params)
    schedule = imc.Schedule.load(schedule_path, normalizer)
    window = cfg.loop.settle_window if cfg else 10
    drift = cfg.loop.drift_threshold if cfg else 1e-4
    clean = imc.ClosedLoopLog.from_csv(log_path)
    y_clean = normalizer.denormalize_many(clean.array("y_p"), plant_mod.OUTPUT_CHANNELS)
    sp = normalizer.denormalize_many(schedule.setpoints, plant_mod.OUTPUT_CHANNELS)
    ss_mean, ss_max, rows = metrics.steady_state_errors(y_clean, sp, schedule.segments(), window, drift)
    track_log = imc.ClosedLoopLog.from_csv(noisy_log_path) if noisy_log_path else clean
    yf = normalizer.denormalize_many(track_log.array("yf"), plant_mod.OUTPUT_CHANNELS)
    yp = normalizer.denormalize_many(track_log.array("y_p"), plant_mod.OUTPUT_CHANNELS)
    u = track_log.array("u")
    meta = {"samples": len(clean), "u_max_abs": float(max(np.abs(u).max(), np.abs(clean.array("u")).max())),
            "y_p_max_m": float(max(yp.max(), y_clean.max())), "y_p_min_m": float(min(yp.min(), y_clean.min()))}
    return metrics.EvalReport(metrics.tracking_rmse(yf, yp), ss_mean, ss_max, None, rows, meta)


def _config_snapshot(cfg: ExperimentConfig) -> dict:
    # the output directory is where a run lands, not what it computes
    snap = cfg.to_dict()
    snap.pop("output_dir")
    return snap


def run_pipeline(cfg: ExperimentConfig, workers: int = 1) -> RunManifest:
    """gen-data, train-model, certify, gen-refs, train-controller, certify, simulate, evaluate."""
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config=_config_snapshot(cfg), started=now())
    (root / "config.json").write_text(json.dumps(_config_snapshot(cfg), sort_keys=True, indent=1) + "\n")

    def record(stage: str, paths) -> None:
        for p in paths:
            manifest.add(root, Path(p))
        manifest.stages.append(stage)
        manifest.save(root / "manifest.json")

    def fail(stage: str, message: str, code: int):
        manifest.finished = now()
        manifest.save(root / "manifest.json")
        raise StageFailed(stage, message, code, sorted(manifest.artifacts))

    log.info("stage gen-data")
    record("gen-data", gen_data(cfg, root / "data", workers))

    log.info("stage train-model")
    try:
        model_path, _ = train_model(cfg, root / "data", root / "model.json")
    except TrainingDiverged as exc:
        fail("train-model", str(exc), EXIT_DIVERGED)
    record("train-model", [model_path, model_path.with_suffix(".report.json")])

    ok, cert = certify_file(model_path, root / "model.cert.json", cfg.model_train.margin)
    record("certify-model", [root / "model.cert.json"])
    if not ok:
        fail("certify-model", f"model residuals {cert['residuals']} exceed the margin", EXIT_UNCERTIFIED)

    log.info("stage gen-refs")
    record("gen-refs", gen_refs(cfg, model_path, root / "refs"))

    log.info("stage train-controller")
    try:
        ctrl_path, _ = train_controller(cfg, model_path, root / "refs", root / "ctrl.json")
    except TrainingDiverged as exc:
        fail("train-controller", str(exc), EXIT_DIVERGED)
    record("train-controller", [ctrl_path, ctrl_path.with_suffix(".report.json")])

    ok, cert = certify_file(ctrl_path, root / "ctrl.cert.json", cfg.controller_train.margin)
    record("certify-controller", [root / "ctrl.cert.json"])
    if not ok:
        fail("certify-controller", f"controller residuals {cert['residuals']} exceed the margin",
             EXIT_UNCERTIFIED)

    log.info("stage simulate")
    params = plant_params(cfg)
    normalizer = plant_mod.Normalizer.for_plant(params)
    model = load_network(model_path)
    schedule = default_schedule(cfg, model, normalizer)
    schedule.save(root / "schedule.ndjson", normalizer)
    try:
        paths = simulate_loop(cfg, model_path, ctrl_path, schedule, root, workers)
    except imc.SimulationFault as exc:
        fail("simulate", str(exc), EXIT_SIMULATION)
    record("simulate", [root / "schedule.ndjson"] + paths)

    log.info("stage evaluate")
    report = evaluate(root / "loop_clean.csv", root / "schedule.ndjson", root / "loop_noisy.csv", cfg, params)
    report.fit = model_test_fit(model, root / "data", cfg.model_train.washout)
    report.metadata["controller_fit"] = controller_test_fit(load_network(ctrl_path), model, root / "refs",
                                                            cfg.controller_train.washout)
    (root / "report.json").write_text(report.to_json())
    (root / "report.txt").write_text(report.render() + "\n")
    record("evaluate", [root / "report.json", root / "report.txt"])

    manifest.finished = now()
    manifest.save(root / "manifest.json")
    return manifest
