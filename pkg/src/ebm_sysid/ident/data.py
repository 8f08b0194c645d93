"""Dataset generation: seeded initial conditions, Euler rollouts of the
ground truth, and a by-trajectory train/test split (no sample-level
leakage across the split)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import dynamics as dyn
from .._io import atomic_write_text, fmt17
from .truths import GroundTruth


class DataGenerationError(Exception):
    pass


@dataclass
class Dataset:
    """Sampled states with target field values, tagged by trajectory.

    Rows are ordered by (trajectory, step), so the ``rollout_steps``
    successors of a row within the same trajectory are the next rows.
    """
    states: np.ndarray          # (S, 2)
    targets: np.ndarray         # (S, 2)
    traj_id: np.ndarray         # (S,)
    step: np.ndarray            # (S,)
    steps_per_traj: int
    train_trajectories: np.ndarray
    test_trajectories: np.ndarray
    flagged_trajectories: list[int]
    seed: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        train = set(self.train_trajectories.tolist())
        test = set(self.test_trajectories.tolist())
        if train & test:
            raise DataGenerationError("train and test trajectory sets overlap")

    @property
    def n_samples(self) -> int:
        return len(self.states)

    def _mask(self, traj_set: np.ndarray) -> np.ndarray:
        return np.isin(self.traj_id, traj_set)

    @property
    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self._mask(self.train_trajectories))

    @property
    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(self._mask(self.test_trajectories))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["x", "y", "fx", "fy", "traj_id", "step"])
        for i in range(self.n_samples):
            writer.writerow([fmt17(self.states[i, 0]), fmt17(self.states[i, 1]),
                             fmt17(self.targets[i, 0]), fmt17(self.targets[i, 1]),
                             int(self.traj_id[i]), int(self.step[i])])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {
            "seed": self.seed,
            "steps_per_traj": self.steps_per_traj,
            "n_samples": self.n_samples,
            "train_trajectories": [int(t) for t in self.train_trajectories],
            "test_trajectories": [int(t) for t in self.test_trajectories],
            "flagged_trajectories": [int(t) for t in self.flagged_trajectories],
            "provenance": self.provenance,
        }

    def save(self, directory: str | Path, stem: str = "dataset"):
        directory = Path(directory)
        atomic_write_text(directory / f"{stem}.csv", self.to_csv())
        atomic_write_text(directory / f"{stem}.json",
                          json.dumps(self.sidecar(), indent=1) + "\n")

    @staticmethod
    def load(directory: str | Path, stem: str = "dataset") -> "Dataset":
        directory = Path(directory)
        with open(directory / f"{stem}.json") as fh:
            side = json.load(fh)
        rows = list(csv.reader(io.StringIO((directory / f"{stem}.csv").read_text())))
        body = rows[1:]
        data = np.array([[float(v) for v in row[:4]] for row in body])
        traj = np.array([int(row[4]) for row in body])
        step = np.array([int(row[5]) for row in body])
        return Dataset(states=data[:, :2], targets=data[:, 2:4], traj_id=traj, step=step,
                       steps_per_traj=int(side["steps_per_traj"]),
                       train_trajectories=np.array(side["train_trajectories"], dtype=np.int64),
                       test_trajectories=np.array(side["test_trajectories"], dtype=np.int64),
                       flagged_trajectories=list(side["flagged_trajectories"]),
                       seed=int(side["seed"]), provenance=side.get("provenance", {}))


def generate_dataset(truth: GroundTruth, box=((-2.0, 2.0), (-2.0, 2.0)), n_traj: int = 2000,
                     steps: int = 10, dt: float = 0.01, split_ratio: float = 0.8,
                     seed: int = 0) -> Dataset:
    """Sample n_traj uniform initial conditions in the box, integrate each
    for ``steps`` Euler steps, and keep every visited state with the true
    field value there.  The split is by trajectory.  Trajectories that
    trip the divergence guard are truncated and flagged."""
    if n_traj < 1:
        raise DataGenerationError(f"n_traj must be >= 1, got {n_traj}")
    if not 0.0 < split_ratio < 1.0:
        raise DataGenerationError(f"split_ratio must be in (0, 1), got {split_ratio}")
    rng = np.random.default_rng(np.random.PCG64(seed))
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    X0 = lo + (hi - lo) * rng.random((n_traj, 2))
    all_states, diverged_at = dyn.rollout_states(truth.field, X0, dt=dt, steps=steps)

    states, targets, traj_ids, step_ids = [], [], [], []
    flagged = [int(i) for i in np.flatnonzero(diverged_at >= 0)]
    for i in range(n_traj):
        last = steps if diverged_at[i] < 0 else int(diverged_at[i]) - 1
        for k in range(last + 1):
            states.append(all_states[k, i])
            traj_ids.append(i)
            step_ids.append(k)
    states = np.array(states)
    targets = truth.field(states)
    traj_ids = np.array(traj_ids, dtype=np.int64)
    step_ids = np.array(step_ids, dtype=np.int64)

    perm = rng.permutation(n_traj)
    n_train = int(round(split_ratio * n_traj))
    if n_train == 0 or n_train == n_traj:
        raise DataGenerationError(f"split_ratio {split_ratio} leaves an empty side for {n_traj} trajectories")
    train = np.sort(perm[:n_train])
    test = np.sort(perm[n_train:])
    provenance = {
        "box": [[float(a), float(b)] for a, b in box],
        "n_traj": n_traj, "steps": steps, "dt": dt, "split_ratio": split_ratio,
        "sign": truth.sign, "metric": truth.metric.kind,
        "potential": type(truth.potential).__name__,
        "potential_params": {k: float(v) for k, v in vars(truth.potential).items()},
    }
    return Dataset(states=states, targets=targets, traj_id=traj_ids, step=step_ids,
                   steps_per_traj=steps, train_trajectories=train, test_trajectories=test,
                   flagged_trajectories=flagged, seed=seed, provenance=provenance)
