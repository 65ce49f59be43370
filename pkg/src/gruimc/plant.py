"""Quadruple-tank benchmark plant.

Four tanks fed by two pumps through valve splits ``gamma_a``/``gamma_b``;
only the lower levels ``h1``, ``h2`` are measured.  Levels are in meters and
flows in m^3/s; the learning side sees signals normalized to [-1, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class TankParams:
    a1: float = 1.31e-4
    a2: float = 1.51e-4
    a3: float = 9.27e-5
    a4: float = 8.82e-5
    S: float = 0.06
    gamma_a: float = 0.3
    gamma_b: float = 0.4
    g: float = 9.81
    h_min: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    h_max: tuple[float, float, float, float] = (1.36, 1.36, 1.3, 1.3)
    q_min: tuple[float, float] = (0.0, 0.0)
    q_max: tuple[float, float] = (9e-4, 1.3e-3)

    def __post_init__(self):
        for name in ("a1", "a2", "a3", "a4", "S", "g"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("gamma_a", "gamma_b"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        object.__setattr__(self, "h_min", tuple(float(x) for x in self.h_min))
        object.__setattr__(self, "h_max", tuple(float(x) for x in self.h_max))
        object.__setattr__(self, "q_min", tuple(float(x) for x in self.q_min))
        object.__setattr__(self, "q_max", tuple(float(x) for x in self.q_max))
        if len(self.h_min) != 4 or len(self.h_max) != 4 or len(self.q_min) != 2 or len(self.q_max) != 2:
            raise ValueError("need 4 level bounds and 2 flow bounds")
        if any(lo >= hi for lo, hi in zip(self.h_min + self.q_min, self.h_max + self.q_max)):
            raise ValueError("bounds must be ordered (min < max)")

    @classmethod
    def from_json(cls, path) -> "TankParams":
        doc = json.loads(Path(path).read_text())
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown plant parameters: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


DEFAULT_PARAMS = TankParams()


def derivatives(h: np.ndarray, q_a: float, q_b: float, params: TankParams = DEFAULT_PARAMS) -> np.ndarray:
    """Level rates ``dh/dt`` in m/s for levels ``h`` (m) and pump flows (m^3/s)."""
    h = np.asarray(h, dtype=np.float64)
    if np.any(h < 0):
        raise ValueError(f"negative tank level {h}; clamp before evaluating the dynamics")
    p = params
    out = np.sqrt(2.0 * p.g * h) * np.array([p.a1, p.a2, p.a3, p.a4]) / p.S
    return np.array([
        -out[0] + out[2] + p.gamma_a / p.S * q_a,
        -out[1] + out[3] + p.gamma_b / p.S * q_b,
        -out[2] + (1.0 - p.gamma_b) / p.S * q_b,
        -out[3] + (1.0 - p.gamma_a) / p.S * q_a,
    ])


def clamp_flows(q_a: float, q_b: float, params: TankParams = DEFAULT_PARAMS) -> tuple[float, float]:
    return (min(max(q_a, params.q_min[0]), params.q_max[0]),
            min(max(q_b, params.q_min[1]), params.q_max[1]))


def step(h: np.ndarray, q_a: float, q_b: float, params: TankParams = DEFAULT_PARAMS,
         tau_s: float = 25.0, substep: float = 1.0) -> np.ndarray:
    """Integrate the tank dynamics over one sampling period with fixed-step RK4."""
    q_a, q_b = clamp_flows(q_a, q_b, params)
    p = params
    n = max(1, int(round(tau_s / substep)))
    dt = tau_s / n
    lo, hi = p.h_min, p.h_max
    h = np.clip(np.asarray(h, dtype=np.float64), lo, hi)
    # scalar arithmetic: this loop dominates data generation time
    r = math.sqrt(2.0 * p.g) / p.S
    c1, c2, c3, c4 = p.a1 * r, p.a2 * r, p.a3 * r, p.a4 * r
    in1, in2 = p.gamma_a / p.S * q_a, p.gamma_b / p.S * q_b
    in3, in4 = (1.0 - p.gamma_b) / p.S * q_b, (1.0 - p.gamma_a) / p.S * q_a

    # stage states are clamped too, so no stage sees a level past a bound
    def f(x):
        o1, o2, o3, o4 = (c * math.sqrt(min(max(v, l), u))
                          for c, v, l, u in zip((c1, c2, c3, c4), x, lo, hi))
        return (-o1 + o3 + in1, -o2 + o4 + in2, -o3 + in3, -o4 + in4)

    x = [float(v) for v in h]
    for _ in range(n):
        k1 = f(x)
        k2 = f([v + 0.5 * dt * k for v, k in zip(x, k1)])
        k3 = f([v + 0.5 * dt * k for v, k in zip(x, k2)])
        k4 = f([v + dt * k for v, k in zip(x, k3)])
        x = [min(max(v + dt / 6.0 * (a + 2.0 * b + 2.0 * c + d), l), u)
             for v, a, b, c, d, l, u in zip(x, k1, k2, k3, k4, lo, hi)]
    h = np.array(x)
    if not np.all(np.isfinite(h)):
        raise FloatingPointError(f"non-finite tank state {h}")
    return h


def steady_levels(q_a: float, q_b: float, params: TankParams = DEFAULT_PARAMS) -> np.ndarray:
    """Analytic equilibrium levels for constant flows, ignoring overflow limits."""
    p = params
    h3 = ((1.0 - p.gamma_b) * q_b / p.a3) ** 2 / (2.0 * p.g)
    h4 = ((1.0 - p.gamma_a) * q_a / p.a4) ** 2 / (2.0 * p.g)
    h1 = ((p.a3 * np.sqrt(2 * p.g * h3) + p.gamma_a * q_a) / p.a1) ** 2 / (2.0 * p.g)
    h2 = ((p.a4 * np.sqrt(2 * p.g * h4) + p.gamma_b * q_b) / p.a2) ** 2 / (2.0 * p.g)
    return np.array([h1, h2, h3, h4])


class Normalizer:
    """Per-channel affine maps ``[lo, hi] <-> [-1, 1]``."""

    def __init__(self, ranges: dict[str, tuple[float, float]]):
        self.ranges = {}
        for name, (lo, hi) in ranges.items():
            if not hi > lo:
                raise ValueError(f"channel {name}: empty range [{lo}, {hi}]")
            self.ranges[name] = (float(lo), float(hi))

    @classmethod
    def for_plant(cls, params: TankParams = DEFAULT_PARAMS) -> "Normalizer":
        ranges = {f"h{i + 1}": (params.h_min[i], params.h_max[i]) for i in range(4)}
        ranges["q_a"] = (params.q_min[0], params.q_max[0])
        ranges["q_b"] = (params.q_min[1], params.q_max[1])
        return cls(ranges)

    def _range(self, channel: str):
        try:
            return self.ranges[channel]
        except KeyError:
            raise KeyError(f"unknown channel {channel!r}") from None

    def normalize(self, value, channel: str):
        lo, hi = self._range(channel)
        return (np.asarray(value, dtype=np.float64) - lo) * (2.0 / (hi - lo)) - 1.0

    def denormalize(self, value, channel: str):
        lo, hi = self._range(channel)
        return (np.asarray(value, dtype=np.float64) + 1.0) * ((hi - lo) / 2.0) + lo

    def scale(self, channel: str) -> float:
        """Meters (or m^3/s) per normalized unit."""
        lo, hi = self._range(channel)
        return (hi - lo) / 2.0

    def normalize_many(self, values: np.ndarray, channels) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        return np.stack([self.normalize(values[..., i], c) for i, c in enumerate(channels)], axis=-1)

    def denormalize_many(self, values: np.ndarray, channels) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        return np.stack([self.denormalize(values[..., i], c) for i, c in enumerate(channels)], axis=-1)


OUTPUT_CHANNELS = ("h1", "h2")
INPUT_CHANNELS = ("q_a", "q_b")


def measure(h: np.ndarray, normalizer: Normalizer, noise_std: float = 0.0,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Normalized ``[h1, h2]`` plus white Gaussian noise (std in normalized units)."""
    y = normalizer.normalize_many(np.asarray(h)[:2], OUTPUT_CHANNELS)
    if noise_std > 0:
        if rng is None:
            raise ValueError("a random generator is required for noisy measurements")
        y = y + rng.normal(0.0, noise_std, 2)
    return y


class TankPlant:
    """Stateful plant taking normalized pump commands and returning normalized levels."""

    def __init__(self, h0, params: TankParams = DEFAULT_PARAMS, normalizer: Normalizer | None = None,
                 tau_s: float = 25.0, noise_std: float = 0.0, rng: np.random.Generator | None = None):
        self.params = params
        self.normalizer = normalizer or Normalizer.for_plant(params)
        self.tau_s = tau_s
        self.noise_std = noise_std
        self.rng = rng
        self.h = np.asarray(h0, dtype=np.float64).copy()

    def apply(self, u: np.ndarray) -> np.ndarray:
        q = self.normalizer.denormalize_many(u, INPUT_CHANNELS)
        self.h = step(self.h, q[0], q[1], self.params, self.tau_s)
        return measure(self.h, self.normalizer, self.noise_std, self.rng)

    @property
    def state(self) -> np.ndarray:
        return self.h.copy()


def settle(q_a: float, q_b: float, params: TankParams = DEFAULT_PARAMS, h0=None,
           tau_s: float = 25.0, tol: float = 1e-10, max_steps: int = 20000) -> np.ndarray:
    """Hold constant flows until the per-step level change drops below ``tol``."""
    h = np.zeros(4) if h0 is None else np.asarray(h0, dtype=np.float64)
    for _ in range(max_steps):
        h_next = step(h, q_a, q_b, params, tau_s)
        if np.max(np.abs(h_next - h)) < tol:
            return h_next
        h = h_next
    raise RuntimeError(f"plant did not settle within {max_steps} steps")
