"""Internal Model Control loop with filtered modeling-error feedback.

Per control period ``k``:

1. the reference model yields the filtered reference ``yf(k)`` and absorbs ``y0(k)``;
2. the controller input is ``yf(k) - F(e_m)``, where the feedback filter has
   seen modeling errors up to period ``k - 1`` only;
3. the controller steps and emits ``u(k)`` in (-1, 1)^m;
4. the plant takes ``u(k)`` and is measured, giving ``y_p(k)``;
5. the internal model takes the same ``u(k)``, giving ``y_m(k)``;
6. ``e_m(k) = y_p(k) - y_m(k)`` enters the feedback filter for the next period.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plant as plant_mod
from .datagen import FirstOrderFilter, ReferenceModel, read_ndjson, write_ndjson
from .gru import GruNetwork, _step


class SimulationFault(RuntimeError):
    def __init__(self, message: str, log: "ClosedLoopLog | None" = None):
        super().__init__(message)
        self.log = log


class ModelPlant:
    """A GRU network standing in for the plant (nominal, noiseless tests)."""

    def __init__(self, model: GruNetwork, xi0=None, noise_std: float = 0.0, rng=None):
        self.model = model
        self.xi = model.zero_state() if xi0 is None else np.array(xi0, dtype=np.float64)
        self.noise_std = noise_std
        self.rng = rng

    def apply(self, u: np.ndarray) -> np.ndarray:
        self.xi, y = _step(self.model, self.xi, u)
        if self.noise_std > 0:
            y = y + self.rng.normal(0.0, self.noise_std, y.shape)
        return y

    @property
    def state(self) -> np.ndarray:
        return self.xi.copy()


@dataclass
class Schedule:
    """Piecewise-constant set-points (normalized units) with hold times in periods."""

    setpoints: np.ndarray
    holds: np.ndarray

    def __post_init__(self):
        self.setpoints = np.atleast_2d(np.asarray(self.setpoints, dtype=np.float64))
        self.holds = np.asarray(self.holds, dtype=int).reshape(-1)
        if len(self.holds) != len(self.setpoints) or np.any(self.holds < 1):
            raise ValueError("one positive hold time per set-point is required")

    @property
    def duration(self) -> int:
        return int(self.holds.sum())

    def profile(self) -> np.ndarray:
        return np.repeat(self.setpoints, self.holds, axis=0)

    def segments(self) -> list[tuple[int, int]]:
        ends = np.cumsum(self.holds)
        return [(int(e - h), int(e)) for e, h in zip(ends, self.holds)]

    def save(self, path, normalizer: plant_mod.Normalizer) -> None:
        meters = normalizer.denormalize_many(self.setpoints, plant_mod.OUTPUT_CHANNELS)
        write_ndjson(path, [{"kind": "setpoint", "index": i, "y0_m": list(map(float, y)),
                             "hold_steps": int(h)} for i, (y, h) in enumerate(zip(meters, self.holds))])

    @classmethod
    def load(cls, path, normalizer: plant_mod.Normalizer) -> "Schedule":
        recs = sorted((r for r in read_ndjson(path) if r.get("kind") == "setpoint"),
                      key=lambda r: r["index"])
        if not recs:
            raise ValueError(f"{path}: no set-point records")
        meters = np.array([r["y0_m"] for r in recs], dtype=np.float64)
        return cls(normalizer.normalize_many(meters, plant_mod.OUTPUT_CHANNELS),
                   [r["hold_steps"] for r in recs])


@dataclass
class ClosedLoopLog:
    y0: list = field(default_factory=list)
    yf: list = field(default_factory=list)
    e_filtered: list = field(default_factory=list)
    ctrl_input: list = field(default_factory=list)
    u: list = field(default_factory=list)
    y_p: list = field(default_factory=list)
    y_m: list = field(default_factory=list)
    e_m: list = field(default_factory=list)
    xi_c: list = field(default_factory=list)
    xi_m: list = field(default_factory=list)
    levels: list = field(default_factory=list)
    sample_period: float = 25.0

    SERIES = ("y0", "yf", "e_filtered", "ctrl_input", "u", "y_p", "y_m", "e_m", "xi_c", "xi_m", "levels")

    def __len__(self):
        return len(self.y0)

    def array(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=np.float64)

    def append(self, row: dict) -> None:
        for name in self.SERIES:
            if row.get(name) is not None:
                getattr(self, name).append(row[name])

    def columns(self) -> list[tuple[str, np.ndarray]]:
        cols = []
        names = {"y0": ("h1", "h2"), "yf": ("h1", "h2"), "e_filtered": ("h1", "h2"),
                 "ctrl_input": ("h1", "h2"), "u": ("q_a", "q_b"), "y_p": ("h1", "h2"),
                 "y_m": ("h1", "h2"), "e_m": ("h1", "h2")}
        for name in self.SERIES:
            arr = self.array(name)
            if arr.size == 0:
                continue
            labels = names.get(name) or [str(i + 1) for i in range(arr.shape[1])]
            for i, lab in enumerate(labels):
                suffix = "_m" if name == "levels" else ""
                cols.append((f"{name}_{lab}{suffix}", arr[:, i]))
        return cols

    def to_csv(self, path) -> None:
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "time_s"] + [c for c, _ in cols])
            for k in range(len(self)):
                w.writerow([k, k * self.sample_period] + [repr(float(v[k])) for _, v in cols])

    @classmethod
    def from_csv(cls, path) -> "ClosedLoopLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: empty log")
        log = cls()
        if len(rows) > 1:
            log.sample_period = float(rows[1]["time_s"]) - float(rows[0]["time_s"])
        for name in cls.SERIES:
            keys = [k for k in rows[0] if k.startswith(name + "_")
                    and not any(k.startswith(o + "_") for o in cls.SERIES if o != name and o.startswith(name))]
            if keys:
                setattr(log, name, [[float(r[k]) for k in keys] for r in rows])
        return log


class ImcAssembly:
    """Controller, internal model, plant and the two first-order filters, plus loop state."""

    def __init__(self, controller: GruNetwork, model: GruNetwork, plant, reference: ReferenceModel,
                 feedback: ReferenceModel | None = None, yf0=None, normalizer=None):
        if controller.output_dim != model.input_dim:
            raise ValueError(f"controller output dim {controller.output_dim} != model input dim {model.input_dim}")
        if controller.input_dim != model.output_dim:
            raise ValueError("controller input dim must equal the model/plant output dim")
        self.controller = controller
        self.model = model
        self.plant = plant
        self.reference = reference
        self.feedback = feedback  # None feeds e_m back unfiltered
        self.normalizer = normalizer
        p = model.output_dim
        self.ref_filter = FirstOrderFilter(reference, np.zeros(p) if yf0 is None else yf0)
        self.fb_filter = FirstOrderFilter(feedback, np.zeros(p)) if feedback is not None else None
        self.xi_c = controller.zero_state()
        self.xi_m = model.zero_state()
        self.e_m = np.zeros(p)

    def feedback_signal(self) -> np.ndarray:
        return self.fb_filter.output() if self.fb_filter is not None else self.e_m.copy()


def closed_loop_step(asm: ImcAssembly, y0) -> dict:
    """One control period; returns the log row."""
    y0 = np.asarray(y0, dtype=np.float64)
    yf = asm.ref_filter.output()
    asm.ref_filter.update(y0)
    e_f = asm.feedback_signal()
    c_in = yf - e_f
    asm.xi_c, u = _step(asm.controller, asm.xi_c, c_in)
    y_p = asm.plant.apply(u)
    asm.xi_m, y_m = _step(asm.model, asm.xi_m, u)
    asm.e_m = y_p - y_m
    if asm.fb_filter is not None:
        asm.fb_filter.update(asm.e_m)
    row = {"y0": y0, "yf": yf, "e_filtered": e_f, "ctrl_input": c_in, "u": u, "y_p": y_p,
           "y_m": y_m, "e_m": asm.e_m.copy(), "xi_c": asm.xi_c.copy(), "xi_m": asm.xi_m.copy(),
           "levels": getattr(asm.plant, "h", None)}
    for name in ("yf", "u", "y_p", "y_m"):
        if not np.all(np.isfinite(row[name])):
            raise SimulationFault(f"non-finite {name} = {row[name]}")
    return row


def run_experiment(asm: ImcAssembly, schedule: Schedule, duration: int | None = None,
                   sample_period: float = 25.0) -> ClosedLoopLog:
    """Step the loop through the schedule (repeating its last set-point past its end)."""
    profile = schedule.profile()
    duration = len(profile) if duration is None else duration
    log = ClosedLoopLog(sample_period=sample_period)
    for k in range(duration):
        y0 = profile[min(k, len(profile) - 1)]
        try:
            row = closed_loop_step(asm, y0)
        except SimulationFault as exc:
            raise SimulationFault(f"t = {k * sample_period:g} s: {exc}", log) from exc
        log.append(row)
    return log


def mid_range_levels(params: plant_mod.TankParams = plant_mod.DEFAULT_PARAMS) -> np.ndarray:
    """Settled levels with both pumps at the middle of their range."""
    q_a = 0.5 * (params.q_min[0] + params.q_max[0])
    q_b = 0.5 * (params.q_min[1] + params.q_max[1])
    return plant_mod.settle(q_a, q_b, params)


def tank_assembly(controller: GruNetwork, model: GruNetwork, tau_s: float = 25.0,
                  tau_r: float = 2000.0, tau_f: float | None = None, noise_std: float = 0.0,
                  seed: int = 0, params: plant_mod.TankParams = plant_mod.DEFAULT_PARAMS,
                  h0=None) -> ImcAssembly:
    """Loop around the quadruple-tank plant with the default conventions."""
    normalizer = plant_mod.Normalizer.for_plant(params)
    h0 = mid_range_levels(params) if h0 is None else h0
    tank = plant_mod.TankPlant(h0, params, normalizer, tau_s, noise_std, np.random.default_rng(seed))
    ref = ReferenceModel.from_time_constant(tau_s, tau_r, model.output_dim)
    fb = ReferenceModel.from_time_constant(tau_s, tau_r if tau_f is None else tau_f, model.output_dim)
    return ImcAssembly(controller, model, tank, ref, fb, normalizer=normalizer)


def write_sidecar(path, config: dict, weight_files: dict[str, str | Path], relative_to=None) -> None:
    """JSON beside a log: run config plus git-style hashes of the weight files used."""
    from .manifest import git_blob_hash

    def name(p):
        if relative_to is None:
            return str(p)
        try:
            return str(Path(p).resolve().relative_to(Path(relative_to).resolve()))
        except ValueError:
            return str(p)

    doc = {"config": config,
           "weights": {k: {"path": name(p), "hash": git_blob_hash(p)} for k, p in weight_files.items()}}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
