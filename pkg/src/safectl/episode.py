"""Per-step episode records shared by the controllers, checks and the harness."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

CERTIFIED = "certified"
FALLBACK = "fallback-applied"
INFEASIBLE = "infeasible"
UNFILTERED = "none"


@dataclass
class EpisodeLog:
    """States x_0..x_N (one more than inputs) plus per-step inputs, costs and constraint values."""

    n_x: int
    n_u: int
    n_w: int = 0
    states: List[np.ndarray] = field(default_factory=list)
    u_learn: List[np.ndarray] = field(default_factory=list)
    u_applied: List[np.ndarray] = field(default_factory=list)
    w: List[np.ndarray] = field(default_factory=list)
    cost: List[float] = field(default_factory=list)
    c: List[np.ndarray] = field(default_factory=list)
    filter_status: List[str] = field(default_factory=list)
    events: List[dict] = field(default_factory=list)

    @classmethod
    def from_arrays(cls, states, inputs, costs=None, c=None, u_learn=None, w=None, status=None):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        inputs = np.asarray(inputs, dtype=float).reshape(len(inputs), -1)
        log = cls(states.shape[1], inputs.shape[1])
        log.states = list(states)
        log.u_applied = list(inputs)
        n = len(inputs)
        log.u_learn = list(inputs if u_learn is None else np.asarray(u_learn, dtype=float).reshape(n, -1))
        log.cost = [0.0] * n if costs is None else [float(v) for v in costs]
        log.c = [np.zeros(0)] * n if c is None else [np.atleast_1d(np.asarray(v, dtype=float)) for v in c]
        log.w = [np.zeros(0)] * n if w is None else [np.asarray(v, dtype=float) for v in w]
        log.filter_status = [UNFILTERED] * n if status is None else list(status)
        return log

    def start(self, x0) -> None:
        self.states = [np.asarray(x0, dtype=float).copy()]

    def record(self, u_applied, x_next, cost: float, c, u_learn=None, w=None,
               filter_status: str = UNFILTERED) -> None:
        u_applied = np.asarray(u_applied, dtype=float).reshape(-1)
        self.u_applied.append(u_applied)
        self.u_learn.append(u_applied if u_learn is None else np.asarray(u_learn, dtype=float).reshape(-1))
        self.w.append(np.zeros(self.n_w) if w is None else np.asarray(w, dtype=float).reshape(-1))
        self.cost.append(float(cost))
        self.c.append(np.atleast_1d(np.asarray(c, dtype=float)))
        self.filter_status.append(filter_status)
        self.states.append(np.asarray(x_next, dtype=float).copy())

    def event(self, kind: str, step: int, **info) -> None:
        self.events.append({"kind": kind, "step": int(step), **info})

    def __len__(self) -> int:
        return len(self.u_applied)

    @property
    def x(self) -> np.ndarray:
        return np.array(self.states).reshape(-1, self.n_x)

    @property
    def u(self) -> np.ndarray:
        return np.array(self.u_applied).reshape(-1, self.n_u)

    @property
    def c_array(self) -> np.ndarray:
        return np.array(self.c) if self.c else np.zeros((0, 0))

    def count_events(self, kind: Optional[str] = None) -> int:
        return sum(1 for e in self.events if kind is None or e["kind"] == kind)
