"""Piecewise-constant nodal flow controls."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

HOUR = 3600.0


@dataclass(frozen=True, eq=False)
class ControlSchedule:
    """Flow controls ``theta[node, interval]`` in kg/s.

    ``q_i(t) = theta[i, floor(t / interval)]``; the last interval is closed
    at the horizon so ``t = horizon`` maps to the final column.
    """

    theta: np.ndarray
    horizon: float
    interval: float = HOUR

    def __post_init__(self):
        th = np.array(self.theta, dtype=float)
        if th.ndim != 2:
            raise ValidationError("theta must be a [node x interval] matrix")
        if not np.all(np.isfinite(th)):
            raise ValidationError("theta must be finite")
        if not (self.horizon > 0 and self.interval > 0):
            raise ValidationError("horizon and interval must be positive")
        need = n_intervals(self.horizon, self.interval)
        if th.shape[1] != need:
            raise ValidationError(
                f"theta has {th.shape[1]} intervals, horizon {self.horizon} s needs {need}"
            )
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)

    @property
    def n_nodes(self) -> int:
        return self.theta.shape[0]

    @property
    def n_intervals(self) -> int:
        return self.theta.shape[1]

    @property
    def n_params(self) -> int:
        return self.theta.size

    def at(self, t: float) -> np.ndarray:
        if not (0.0 <= t <= self.horizon):
            raise ValidationError(f"t = {t} outside [0, {self.horizon}]")
        h = min(int(math.floor(t / self.interval)), self.n_intervals - 1)
        return self.theta[:, h].copy()

    def with_theta(self, theta) -> "ControlSchedule":
        return ControlSchedule(np.asarray(theta, dtype=float).reshape(self.theta.shape),
                               self.horizon, self.interval)

    @classmethod
    def constant(cls, q, horizon, interval=HOUR) -> "ControlSchedule":
        q = np.asarray(q, dtype=float)
        return cls(np.repeat(q[:, None], n_intervals(horizon, interval), axis=1), horizon, interval)

    def to_csv(self, path, node_ids):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "hour", "q_kg_s"])
            for i, nid in enumerate(node_ids):
                for h in range(self.n_intervals):
                    w.writerow([nid, h, repr(float(self.theta[i, h]))])

    @classmethod
    def from_csv(cls, path, node_ids, horizon, interval=HOUR) -> "ControlSchedule":
        """Read the long-format ``node,hour,q_kg_s`` file written by ``to_csv``."""
        pos = {nid: i for i, nid in enumerate(node_ids)}
        theta = np.full((len(node_ids), n_intervals(horizon, interval)), np.nan)
        with open(path, newline="") as fh:
            rows = csv.DictReader(fh)
            if rows.fieldnames is None or set(rows.fieldnames) != {"node", "hour", "q_kg_s"}:
                raise ValidationError(f"{path}: expected header node,hour,q_kg_s")
            for row in rows:
                if row["node"] not in pos:
                    raise ValidationError(f"{path}: unknown node {row['node']!r}")
                h = int(row["hour"])
                if not 0 <= h < theta.shape[1]:
                    raise ValidationError(f"{path}: hour {h} outside horizon")
                theta[pos[row["node"]], h] = float(row["q_kg_s"])
        if np.isnan(theta).any():
            raise ValidationError(f"{path}: controls do not cover every node and hour")
        return cls(theta, horizon, interval)


def n_intervals(horizon: float, interval: float) -> int:
    # tolerate horizons that are an integer multiple up to roundoff
    return max(1, math.ceil(horizon / interval - 1e-9))
