"""Training data: plant excitation, window extraction, references and set-point screening."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import Delaunay

from . import plant
from .gru import GruNetwork, _step

# --- excitation -------------------------------------------------------------


@dataclass
class MprsConfig:
    levels: int = 16                      # distinct amplitude levels per channel; 0 = continuous
    hold_min: int = 8                     # steps
    hold_max: int = 60
    amplitude: list[tuple[float, float]] = field(default_factory=lambda: [(-0.7, 0.7), (-0.7, 0.7)])
    seed: int = 0

    def __post_init__(self):
        self.amplitude = [tuple(float(x) for x in a) for a in self.amplitude]
        if self.hold_min < 1 or self.hold_max < self.hold_min:
            raise ValueError("need 1 <= hold_min <= hold_max")
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        for lo, hi in self.amplitude:
            if not -1.0 <= lo <= hi <= 1.0:
                raise ValueError(f"amplitude range ({lo}, {hi}) must lie in [-1, 1]")


def gen_mprs(cfg: MprsConfig, length: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Multilevel pseudo-random sequence ``(length, channels)``; channels switch independently."""
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    out = np.empty((length, len(cfg.amplitude)))
    for j, (lo, hi) in enumerate(cfg.amplitude):
        if cfg.levels == 1:
            grid = np.array([0.5 * (lo + hi)])
        elif cfg.levels > 1:
            grid = np.linspace(lo, hi, cfg.levels)
        k = 0
        while k < length:
            hold = int(rng.integers(cfg.hold_min, cfg.hold_max + 1))
            value = grid[rng.integers(len(grid))] if cfg.levels else rng.uniform(lo, hi)
            out[k:k + hold, j] = value
            k += hold
    return out


def run_plant(u: np.ndarray, params: plant.TankParams = plant.DEFAULT_PARAMS,
              normalizer: plant.Normalizer | None = None, noise_std: float = 0.0,
              rng: np.random.Generator | None = None, h0=None, tau_s: float = 25.0):
    """Open-loop plant experiment with normalized inputs.

    ``y[k]`` is the measurement taken after applying ``u[k]`` for one period.
    Returns ``(y, levels)`` with levels ``(T + 1, 4)`` in meters.
    """
    normalizer = normalizer or plant.Normalizer.for_plant(params)
    h0 = np.zeros(4) if h0 is None else h0
    p = plant.TankPlant(h0, params, normalizer, tau_s, noise_std, rng)
    y = np.empty((len(u), 2))
    levels = np.empty((len(u) + 1, 4))
    levels[0] = p.state
    for k, uk in enumerate(u):
        y[k] = p.apply(uk)
        levels[k + 1] = p.h
    return y, levels


def tbptt_slices(u: np.ndarray, y: np.ndarray, window: int, stride: int):
    """Overlapping windows at offsets 0, stride, 2*stride, ...; returns ``(N, T, .)`` arrays."""
    L = len(u)
    if len(y) != L:
        raise ValueError("input and output sequences differ in length")
    if window > L:
        raise ValueError(f"window {window} exceeds sequence length {L}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    starts = range(0, L - window + 1, stride)
    return (np.stack([u[s:s + window] for s in starts]),
            np.stack([y[s:s + window] for s in starts]))


# --- reference model and filters -------------------------------------------


@dataclass(frozen=True)
class ReferenceModel:
    """Decoupled discrete first-order lags with unit static gain."""

    alpha: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if not all(0.0 < a < 1.0 for a in self.alpha):
            raise ValueError("filter poles must lie in (0, 1)")

    @classmethod
    def from_time_constant(cls, tau_s: float, tau_r: float, channels: int = 2) -> "ReferenceModel":
        return cls((math.exp(-tau_s / tau_r),) * channels)


class FirstOrderFilter:
    """``x(k+1) = x(k) + (1 - alpha)(u(k) - x(k))``; the output is the current state."""

    def __init__(self, model: ReferenceModel, initial):
        self.gain = 1.0 - np.asarray(model.alpha)
        self.state = np.array(initial, dtype=np.float64).reshape(len(model.alpha))

    def output(self) -> np.ndarray:
        return self.state.copy()

    def update(self, u) -> None:
        self.state = self.state + self.gain * (np.asarray(u, dtype=np.float64) - self.state)


def filter_reference(y0: np.ndarray, model: ReferenceModel, initial=None) -> np.ndarray:
    """Filtered sequence, ``out[0] = initial`` (default ``y0[0]``), ``out[k+1]`` lagging ``y0[k]``."""
    y0 = np.asarray(y0, dtype=np.float64)
    filt = FirstOrderFilter(model, y0[0] if initial is None else initial)
    out = np.empty_like(y0)
    for k in range(len(y0)):
        out[k] = filt.state
        filt.update(y0[k])
    return out


# --- equilibria -------------------------------------------------------------


class EquilibriumNotFound(RuntimeError):
    def __init__(self, message: str, best: "Equilibrium | None" = None):
        super().__init__(message)
        self.best = best


class Unsettled(RuntimeError):
    pass


@dataclass
class Equilibrium:
    u: np.ndarray
    xi: np.ndarray
    y: np.ndarray
    state_residual: float   # |xi - f(xi, u)|_inf
    output_error: float     # |g(xi) - y0|_2 against the requested set-point


def settle(model: GruNetwork, u: np.ndarray, xi0=None, tol: float = 1e-9, cap: int = 50_000):
    """Hold a constant input until the state stops moving.

    Works on one input ``(m,)`` or a batch ``(K, m)``.  Returns the settled
    states, outputs and the number of steps taken.
    """
    u = np.asarray(u, dtype=np.float64)
    batch = None if u.ndim == 1 else len(u)
    xi = model.zero_state(batch) if xi0 is None else np.array(xi0, dtype=np.float64)
    for k in range(1, cap + 1):
        xi_next, y = _step(model, xi, u)
        moved = np.max(np.abs(xi_next - xi))
        xi = xi_next
        if moved < tol:
            return xi, y, k
    raise Unsettled(f"state still moving by {moved:.3g} after {cap} steps")


@dataclass
class FeasibleMap:
    """Settled model outputs over a grid of constant inputs."""

    u: np.ndarray
    xi: np.ndarray
    y: np.ndarray
    residual: np.ndarray

    def __len__(self):
        return len(self.u)

    def nearest(self, y0: np.ndarray, k: int = 1) -> np.ndarray:
        d = np.linalg.norm(self.y - y0, axis=1)
        return np.argsort(d, kind="stable")[:k]

    def contains(self, points: np.ndarray, inset: float = 0.0) -> np.ndarray:
        """Whether points lie in the convex hull shrunk about its centroid by ``inset``."""
        centroid = self.y.mean(axis=0)
        hull = Delaunay(centroid + (1.0 - inset) * (self.y - centroid))
        return hull.find_simplex(np.atleast_2d(points)) >= 0

    def sample_setpoints(self, count: int, rng: np.random.Generator, inset: float = 0.02,
                         max_tries: int = 100_000) -> np.ndarray:
        lo, hi = self.y.min(axis=0), self.y.max(axis=0)
        out = []
        tries = 0
        while len(out) < count:
            cand = rng.uniform(lo, hi, (max(count, 16), self.y.shape[1]))
            out.extend(cand[self.contains(cand, inset)])
            tries += len(cand)
            if tries > max_tries:
                raise RuntimeError("could not sample set-points inside the feasible hull")
        return np.array(out[:count])


def feasible_output_map(model: GruNetwork, density: int = 11, tol: float = 1e-9,
                        cap: int = 50_000) -> FeasibleMap:
    """Settle the model on a ``density^m`` grid of constant inputs in [-1, 1]^m."""
    axes = [np.linspace(-1.0, 1.0, density)] * model.input_dim
    U = np.array(np.meshgrid(*axes, indexing="ij")).reshape(model.input_dim, -1).T
    xi, y, _ = settle(model, U, tol=tol, cap=cap)
    xi_next, _ = _step(model, xi, U)
    residual = np.max(np.abs(xi_next - xi), axis=1)
    return FeasibleMap(U, xi, y, residual)


def solve_equilibrium(model: GruNetwork, y0, tol: float = 1e-9, tol_y: float = 1e-3,
                      cap: int = 50_000, budget: int = 400, grid: int | FeasibleMap = 11,
                      u_start=None, precise: bool = True, restarts: int = 3) -> Equilibrium:
    """Find a constant input whose settled model output equals ``y0``.

    Phase 1 picks a warm start from a coarse input grid (or ``u_start``);
    phase 2 refines it with bounded Nelder-Mead, each evaluation settling the
    model from the previous evaluation's state.  The output misfit is not
    convex in the input, so when a refinement stalls the next-nearest grid
    points serve as further warm starts (up to ``restarts`` in total).  With
    ``precise=False`` a search stops as soon as the output error is below
    ``tol_y / 10``.  Raises ``EquilibriumNotFound`` when the best output error
    is ``>= tol_y``.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    if y0.shape != (model.output_dim,):
        raise ValueError(f"set-point must have shape ({model.output_dim},)")
    if np.any(np.abs(y0) > 1.0):
        raise EquilibriumNotFound(f"set-point {y0} lies outside the normalized output box")

    if u_start is not None:
        u0 = np.clip(np.asarray(u_start, dtype=np.float64), -1.0, 1.0)
        xi_warm, _, _ = settle(model, u0, tol=tol, cap=cap)
        starts = [(u0, xi_warm)]
    else:
        fmap = grid if isinstance(grid, FeasibleMap) else feasible_output_map(model, grid, tol, cap)
        starts = [(fmap.u[i], fmap.xi[i]) for i in fmap.nearest(y0, max(1, restarts))]

    best = None
    for u0, xi_warm in starts:
        eq = _refine(model, y0, u0, xi_warm, tol, tol_y, cap, budget, precise)
        if best is None or eq.output_error < best.output_error:
            best = eq
        if eq.output_error < tol_y:
            return eq
    raise EquilibriumNotFound(
        f"best output error {best.output_error:.3g} >= {tol_y} for set-point {y0}", best)


def _refine(model, y0, u0, xi_warm, tol, tol_y, cap, budget, precise) -> Equilibrium:
    memo = {"xi": xi_warm}

    def score(u):
        u = np.clip(u, -1.0, 1.0)
        xi, y, _ = settle(model, u, memo["xi"], tol, cap)
        memo["xi"] = xi
        return float(np.linalg.norm(y - y0))

    def stop_early(intermediate_result):
        if intermediate_result.fun < 0.1 * tol_y:
            raise StopIteration

    m = model.input_dim
    res = minimize(score, u0, method="Nelder-Mead", bounds=[(-1.0, 1.0)] * m,
                   callback=None if precise else stop_early,
                   options={"xatol": 1e-8, "fatol": 1e-12, "maxfev": budget,
                            "initial_simplex": _simplex(u0, 0.05)})
    u_s = np.clip(res.x, -1.0, 1.0)
    xi_s, y_s, _ = settle(model, u_s, memo["xi"], tol, cap)
    xi_next, _ = _step(model, xi_s, u_s)
    return Equilibrium(u_s, xi_s, y_s, float(np.max(np.abs(xi_next - xi_s))),
                       float(np.linalg.norm(y_s - y0)))


def _simplex(u0: np.ndarray, size: float) -> np.ndarray:
    pts = [u0.copy()]
    for j in range(len(u0)):
        p = u0.copy()
        p[j] += size if p[j] + size <= 1.0 else -size
        pts.append(p)
    return np.array(pts)


# --- reference datasets -----------------------------------------------------


def screen_setpoints(model: GruNetwork, fmap: FeasibleMap, count: int, rng: np.random.Generator,
                     inset: float = 0.02, tol_y: float = 1e-3, max_attempts: int | None = None,
                     **solver_kw) -> tuple[np.ndarray, np.ndarray]:
    """Sample set-points inside the feasible hull and keep those with an equilibrium.

    Returns ``(setpoints, inputs)``.
    """
    max_attempts = 5 * count if max_attempts is None else max_attempts
    kept, inputs = [], []
    attempts = 0
    while len(kept) < count:
        if attempts >= max_attempts:
            raise RuntimeError(f"only {len(kept)} of {count} set-points passed the feasibility screen")
        for y0 in fmap.sample_setpoints(count - len(kept), rng, inset):
            attempts += 1
            try:
                eq = solve_equilibrium(model, y0, tol_y=tol_y, grid=fmap, precise=False, **solver_kw)
            except EquilibriumNotFound:
                continue
            kept.append(y0)
            inputs.append(eq.u)
    return np.array(kept), np.array(inputs)


def piecewise_reference(setpoints: np.ndarray, length: int, hold_min: int, hold_max: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Random steps between pool set-points with uniform hold times."""
    out = np.empty((length, setpoints.shape[1]))
    k = 0
    while k < length:
        hold = int(rng.integers(hold_min, hold_max + 1))
        out[k:k + hold] = setpoints[rng.integers(len(setpoints))]
        k += hold
    return out


def default_split(count: int) -> tuple[int, int, int]:
    val = round(count * 40 / 430)
    test = round(count * 10 / 430)
    return count - val - test, val, test


@dataclass
class ReferenceSet:
    setpoints: np.ndarray   # raw piecewise-constant y0, (N, T, p)
    filtered: np.ndarray    # after the reference model, (N, T, p)
    ids: list[int]


def gen_reference_dataset(pool: np.ndarray, count: int, length: int, ref_model: ReferenceModel,
                          hold_min: int = 80, hold_max: int = 400,
                          split: Sequence[int] | None = None, seed: int = 0) -> dict[str, ReferenceSet]:
    """Build ``count`` references from a screened set-point pool and split them."""
    split = default_split(count) if split is None else tuple(split)
    if sum(split) != count:
        raise ValueError(f"split {split} does not add up to {count}")
    rng = np.random.default_rng(seed)
    raw = np.stack([piecewise_reference(pool, length, hold_min, hold_max, rng) for _ in range(count)])
    filt = np.stack([filter_reference(r, ref_model) for r in raw])
    order = rng.permutation(count)
    out = {}
    start = 0
    for name, size in zip(("train", "val", "test"), split):
        idx = np.sort(order[start:start + size])
        out[name] = ReferenceSet(raw[idx], filt[idx], [int(i) for i in idx])
        start += size
    return out


# --- NDJSON files -----------------------------------------------------------


def write_ndjson(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_ndjson(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


IO_CHANNELS = ["q_a", "q_b", "h1", "h2"]
REF_CHANNELS = ["y0_h1", "y0_h2", "yf_h1", "yf_h2"]


def io_records(u: np.ndarray, y: np.ndarray, sample_period: float, start_id: int = 0) -> list[dict]:
    return [{"id": start_id + i, "kind": "io", "sample_period": sample_period,
             "channels": IO_CHANNELS, "data": np.hstack([ui, yi]).tolist()}
            for i, (ui, yi) in enumerate(zip(u, y))]


def reference_records(refs: ReferenceSet, sample_period: float) -> list[dict]:
    return [{"id": i, "kind": "reference", "sample_period": sample_period,
             "channels": REF_CHANNELS, "data": np.hstack([r, f]).tolist()}
            for i, r, f in zip(refs.ids, refs.setpoints, refs.filtered)]


def load_io(path) -> tuple[np.ndarray, np.ndarray]:
    recs = [r for r in read_ndjson(path) if r["kind"] == "io"]
    data = np.array([r["data"] for r in recs], dtype=np.float64)
    return data[..., :2], data[..., 2:]


def load_references(path) -> ReferenceSet:
    recs = [r for r in read_ndjson(path) if r["kind"] == "reference"]
    data = np.array([r["data"] for r in recs], dtype=np.float64)
    return ReferenceSet(data[..., :2], data[..., 2:], [r["id"] for r in recs])


def write_meta(path, **meta) -> None:
    Path(path).write_text(json.dumps(meta, sort_keys=True, indent=1, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")
