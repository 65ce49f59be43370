"""Evaluation indices: FIT, tracking RMSE and steady-state errors."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


def fit_index(y_model, y_plant, washout: int = 0) -> float:
    """FIT in percent: ``100 (1 - sqrt(MSE(y_m, y_p) / MSE(y_p, mean(y_p))))``."""
    ym = np.asarray(y_model, dtype=np.float64)[washout:]
    yp = np.asarray(y_plant, dtype=np.float64)[washout:]
    if ym.shape != yp.shape:
        raise ValueError(f"length mismatch: {ym.shape} vs {yp.shape}")
    ym = ym.reshape(len(ym), -1)
    yp = yp.reshape(len(yp), -1)
    spread = np.mean(np.sum((yp - yp.mean(axis=0)) ** 2, axis=1))
    if spread == 0:
        raise ValueError("reference output has zero variance; FIT is undefined")
    err = np.mean(np.sum((ym - yp) ** 2, axis=1))
    return float(100.0 * (1.0 - np.sqrt(err / spread)))


def tracking_rmse(reference, output) -> float:
    """``||reference - output||_{2,2} / sqrt(T)``, in the units of the inputs."""
    r = np.asarray(reference, dtype=np.float64)
    y = np.asarray(output, dtype=np.float64)
    if r.shape != y.shape:
        raise ValueError(f"length mismatch: {r.shape} vs {y.shape}")
    return float(np.sqrt(np.sum((r - y) ** 2) / len(r)))


@dataclass
class SteadyStateRow:
    index: int
    setpoint: list[float]
    settled_output: list[float]
    error: float
    drift: float
    settled: bool


def steady_state_errors(output, setpoints, segments, window: int = 10, drift_threshold: float = 1e-4):
    """Per-segment steady-state error between set-point and the output averaged over the last ``window`` samples.

    ``output`` is ``(T, p)``, ``setpoints`` ``(K, p)`` and ``segments`` a list of
    ``(start, end)`` index pairs.  Returns ``(mean_error, max_error, rows)``.
    A segment whose output moves by more than ``drift_threshold`` between
    consecutive samples inside the window is flagged as unsettled.
    """
    y = np.asarray(output, dtype=np.float64)
    rows = []
    for i, ((start, end), sp) in enumerate(zip(segments, np.asarray(setpoints, dtype=np.float64))):
        end = min(end, len(y))
        if end - start < window:
            raise ValueError(f"segment {i} is shorter than the settle window")
        tail = y[end - window:end]
        y_ss = tail.mean(axis=0)
        drift = float(np.max(np.abs(np.diff(tail, axis=0)))) if window > 1 else 0.0
        rows.append(SteadyStateRow(i, sp.tolist(), y_ss.tolist(), float(np.linalg.norm(sp - y_ss)),
                                   drift, drift <= drift_threshold))
    errors = [r.error for r in rows]
    return float(np.mean(errors)), float(np.max(errors)), rows


@dataclass
class EvalReport:
    tracking_rmse: float | None = None        # m
    ss_mean: float | None = None              # m
    ss_max: float | None = None               # m
    fit: float | None = None                  # %
    steady_state: list[SteadyStateRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def render(self) -> str:
        def fmt(v, spec):
            return "n/a" if v is None else format(v, spec)

        lines = [
            f"{'Metric':<40}{'Proposed IMC':>14}",
            "-" * 54,
            f"{'Tracking RMSE eps_tr [m]':<40}{fmt(self.tracking_rmse, '.4g'):>14}",
            f"{'Average steady-state error [m]':<40}{fmt(self.ss_mean, '.3e'):>14}",
            f"{'Maximum steady-state error [m]':<40}{fmt(self.ss_max, '.3e'):>14}",
        ]
        if self.fit is not None:
            lines.append(f"{'FIT [%]':<40}{self.fit:>14.2f}")
        if self.steady_state:
            lines.append("")
            lines.append("set-point [m]          settled [m]            error [m]   settled")
            for r in self.steady_state:
                sp = ", ".join(f"{v:.3f}" for v in r.setpoint)
                ss = ", ".join(f"{v:.3f}" for v in r.settled_output)
                lines.append(f"({sp})   ({ss})   {r.error:.3e}   {'yes' if r.settled else 'NO'}")
        return "\n".join(lines)
