"""Episode records shared by the environment, collection, and verifiers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OUTCOME_RUNNING = "running"
OUTCOME_SUCCESS = "success"
OUTCOME_COLLISION = "collision"
OUTCOME_TIMEOUT = "timeout"
TERMINAL_OUTCOMES = (OUTCOME_SUCCESS, OUTCOME_COLLISION, OUTCOME_TIMEOUT)


@dataclass
class Transition:
    """One policy query: observation, the executed action chunk, and the
    chunk index t within the episode."""

    state: np.ndarray   # (obs_dim,)
    chunk: np.ndarray   # (chunk_len, action_dim)
    t: int


@dataclass
class Trajectory:
    transitions: list[Transition]
    success: int                 # 1 iff outcome == success
    success_step: int | None     # chunk index of the terminal chunk, when success
    outcome: str
    meta: dict = field(default_factory=dict)
    path: np.ndarray | None = None   # per-env-step positions, (steps+1, 2)

    def __len__(self) -> int:
        return len(self.transitions)

    def validate(self) -> None:
        if self.outcome not in TERMINAL_OUTCOMES:
            raise ValueError(f"trajectory is not terminal: outcome={self.outcome!r}")
        if self.success not in (0, 1):
            raise ValueError(f"success label must be 0/1, got {self.success}")
        for i, tr in enumerate(self.transitions):
            if tr.t != i:
                raise ValueError(f"transition {i} has index t={tr.t}")
        if self.success == 1:
            if self.success_step != len(self.transitions) - 1:
                raise ValueError(
                    f"success_step {self.success_step} != last transition index "
                    f"{len(self.transitions) - 1}"
                )


def is_success(traj: Trajectory) -> int:
    """Binary episode label; the trajectory must be terminal."""
    if traj.outcome not in TERMINAL_OUTCOMES:
        raise ValueError(f"trajectory is not terminal: outcome={traj.outcome!r}")
    return 1 if traj.outcome == OUTCOME_SUCCESS else 0
