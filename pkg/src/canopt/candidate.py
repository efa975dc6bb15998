"""Solution candidates: trajectories, multipliers, and their file layout.

A candidate stores everything the residual checks need: nodal states and
slacks, interval controls (or a measure-valued relaxed control), parameter
values, adjoints for integro-differentially bound states, multiplier
estimates, and the criterion value.  Multiplier functions are nodal values
with piecewise-linear interpolation and vanish identically outside [0, T].

On disk a candidate is a JSON header plus one CSV of nodal columns; relaxed
controls get a second CSV with one row per (interval, atom).  All floats are
written with 12 significant digits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .problem import CanonicalProblem, Mesh, ProblemError, g12

__all__ = ["RelaxedControl", "SolutionCandidate"]


@dataclass
class RelaxedControl:
    """Measure-valued control: per interval, weighted atoms in the feasible set.

    ``weights`` has shape (slots, n); ``atoms`` maps each control name to a
    (slots, n) array of values.  Weights are nonnegative and sum to one over
    slots at every interval; atoms with weight below ``active_tol`` are
    considered absent when reporting support.
    """

    weights: np.ndarray
    atoms: dict[str, np.ndarray]
    active_tol: float = 1e-9

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.atoms = {k: np.asarray(v, dtype=float) for k, v in self.atoms.items()}
        if self.weights.ndim != 2:
            raise ProblemError("relaxed weights must be a (slots, intervals) array")
        for name, arr in self.atoms.items():
            if arr.shape != self.weights.shape:
                raise ProblemError(f"atom values for '{name}' must match the weights shape")

    @property
    def slots(self) -> int:
        return self.weights.shape[0]

    @property
    def n(self) -> int:
        return self.weights.shape[1]

    def support_sizes(self) -> np.ndarray:
        return (self.weights > self.active_tol).sum(axis=0)

    def mean_controls(self) -> dict[str, np.ndarray]:
        """Weight-averaged control per interval (for plotting and state checks)."""
        return {k: np.sum(self.weights * v, axis=0) for k, v in self.atoms.items()}

    def validate(self, tol: float = 1e-6) -> None:
        if np.min(self.weights) < -tol:
            raise ProblemError(f"negative relaxed weight {np.min(self.weights):.3e}")
        gap = np.max(np.abs(self.weights.sum(axis=0) - 1.0))
        if gap > tol:
            raise ProblemError(f"relaxed weights sum to 1 +/- {gap:.3e}")

    @classmethod
    def classical(cls, u: Mapping[str, np.ndarray]) -> "RelaxedControl":
        """Wrap an ordinary control as the one-atom relaxed control."""
        n = len(next(iter(u.values())))
        return cls(weights=np.ones((1, n)),
                   atoms={k: np.asarray(v, dtype=float)[None, :] for k, v in u.items()})


@dataclass
class SolutionCandidate:
    mesh: Mesh
    x: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)
    relaxed: RelaxedControl | None = None
    slacks: dict[str, np.ndarray] = field(default_factory=dict)
    params: dict[str, float] = field(default_factory=dict)
    psi: dict[str, np.ndarray] = field(default_factory=dict)
    lam: dict[int, np.ndarray | float] = field(default_factory=dict)
    lamt: dict[int, float] = field(default_factory=dict)
    lam0: int = 1
    objective: float = float("nan")
    meta: dict = field(default_factory=dict)

    def controls(self) -> dict[str, np.ndarray]:
        """Interval controls; for relaxed candidates, the weighted mean."""
        if self.relaxed is not None:
            return self.relaxed.mean_controls()
        return self.u

    def copy(self) -> "SolutionCandidate":
        rc = None
        if self.relaxed is not None:
            rc = RelaxedControl(self.relaxed.weights.copy(),
                                {k: v.copy() for k, v in self.relaxed.atoms.items()},
                                self.relaxed.active_tol)
        return SolutionCandidate(
            mesh=self.mesh,
            x={k: v.copy() for k, v in self.x.items()},
            u={k: v.copy() for k, v in self.u.items()},
            relaxed=rc,
            slacks={k: v.copy() for k, v in self.slacks.items()},
            params=dict(self.params),
            psi={k: v.copy() for k, v in self.psi.items()},
            lam={k: (v.copy() if isinstance(v, np.ndarray) else v)
                 for k, v in self.lam.items()},
            lamt=dict(self.lamt),
            lam0=self.lam0,
            objective=self.objective,
            meta=dict(self.meta),
        )

    def fingerprint(self) -> str:
        """Stable content hash; used to assert checks never mutate a candidate."""
        import hashlib
        hasher = hashlib.sha256()
        for label, arr in self._array_items():
            hasher.update(label.encode())
            hasher.update(np.ascontiguousarray(arr).tobytes())
        hasher.update(json.dumps({"params": self.params, "lamt": self.lamt,
                                  "lam0": self.lam0, "objective": self.objective},
                                 sort_keys=True).encode())
        return hasher.hexdigest()

    def _array_items(self):
        for name in sorted(self.x):
            yield f"x:{name}", self.x[name]
        for name in sorted(self.u):
            yield f"u:{name}", self.u[name]
        for name in sorted(self.slacks):
            yield f"z:{name}", self.slacks[name]
        for name in sorted(self.psi):
            yield f"psi:{name}", self.psi[name]
        for j in sorted(self.lam):
            yield f"lam:{j}", np.atleast_1d(np.asarray(self.lam[j], dtype=float))
        if self.relaxed is not None:
            yield "rc:w", self.relaxed.weights
            for name in sorted(self.relaxed.atoms):
                yield f"rc:{name}", self.relaxed.atoms[name]

    # --- serialization ----------------------------------------------------

    def save(self, directory, stem: str = "candidate") -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written: list[Path] = []

        head = {
            "mesh": {"n": self.mesh.n, "horizon": self.mesh.horizon},
            "objective": _num(self.objective),
            "lam0": self.lam0,
            "params": {k: _num(v) for k, v in self.params.items()},
            "lamt": {str(k): _num(v) for k, v in self.lamt.items()},
            "scalar_lam": {str(k): _num(float(v)) for k, v in self.lam.items()
                           if not isinstance(v, np.ndarray)},
            "relaxed": self.relaxed is not None,
            "meta": self.meta,
        }
        jpath = directory / f"{stem}.json"
        jpath.write_text(json.dumps(head, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
        written.append(jpath)

        cols: list[tuple[str, np.ndarray]] = []
        t = self.mesh.nodes
        cols.append(("t", t))
        for name in self.x:
            cols.append((f"x:{name}", self.x[name]))
        for name, arr in self.controls().items():
            cols.append((f"u:{name}", np.append(arr, arr[-1])))
        for name in self.slacks:
            cols.append((f"z:{name}", self.slacks[name]))
        for name in self.psi:
            cols.append((f"psi:{name}", self.psi[name]))
        for j in sorted(self.lam):
            v = self.lam[j]
            if isinstance(v, np.ndarray):
                cols.append((f"lam:{j}", v))
        cpath = directory / f"{stem}.csv"
        with open(cpath, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(name for name, _ in cols) + "\n")
            for k in range(self.mesh.n + 1):
                fh.write(",".join(g12(arr[k]) for _, arr in cols) + "\n")
        written.append(cpath)

        if self.relaxed is not None:
            rpath = directory / f"{stem}_relaxed.csv"
            names = sorted(self.relaxed.atoms)
            with open(rpath, "w", encoding="utf-8", newline="\n") as fh:
                fh.write("t,slot,gamma," + ",".join(f"u:{n}" for n in names) + "\n")
                for i in range(self.relaxed.n):
                    for s in range(self.relaxed.slots):
                        row = [g12(t[i]), str(s), g12(self.relaxed.weights[s, i])]
                        row += [g12(self.relaxed.atoms[n][s, i]) for n in names]
                        fh.write(",".join(row) + "\n")
            written.append(rpath)
        return written

    @classmethod
    def load(cls, directory, stem: str = "candidate") -> "SolutionCandidate":
        directory = Path(directory)
        jpath = directory / f"{stem}.json"
        if not jpath.exists():
            raise ProblemError(f"missing candidate header {jpath}")
        head = json.loads(jpath.read_text(encoding="utf-8"))
        mesh = Mesh(int(head["mesh"]["n"]), float(head["mesh"]["horizon"]))

        table: dict[str, np.ndarray] = {}
        cpath = directory / f"{stem}.csv"
        with open(cpath, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            rows = [line.strip().split(",") for line in fh if line.strip()]
        data = np.asarray(rows, dtype=float)
        for idx, name in enumerate(header):
            table[name] = data[:, idx]

        cand = cls(mesh=mesh)
        cand.lam0 = int(head["lam0"])
        cand.objective = float(head["objective"])
        cand.params = {k: float(v) for k, v in head.get("params", {}).items()}
        cand.lamt = {int(k): float(v) for k, v in head.get("lamt", {}).items()}
        cand.meta = head.get("meta", {})
        for k, v in head.get("scalar_lam", {}).items():
            cand.lam[int(k)] = float(v)
        for name, col in table.items():
            if name.startswith("x:"):
                cand.x[name[2:]] = col
            elif name.startswith("u:"):
                cand.u[name[2:]] = col[:-1]
            elif name.startswith("z:"):
                cand.slacks[name[2:]] = col
            elif name.startswith("psi:"):
                cand.psi[name[4:]] = col
            elif name.startswith("lam:"):
                cand.lam[int(name[4:])] = col

        if head.get("relaxed"):
            rpath = directory / f"{stem}_relaxed.csv"
            with open(rpath, "r", encoding="utf-8") as fh:
                rhead = fh.readline().strip().split(",")
                rrows = [line.strip().split(",") for line in fh if line.strip()]
            rdata = np.asarray(rrows, dtype=float)
            slots = int(rdata[:, 1].max()) + 1
            n = mesh.n
            weights = rdata[:, 2].reshape(n, slots).T
            atoms = {}
            for idx, name in enumerate(rhead):
                if name.startswith("u:"):
                    atoms[name[2:]] = rdata[:, idx].reshape(n, slots).T
            cand.relaxed = RelaxedControl(weights, atoms)
            cand.u = {}
        return cand

    def check_shapes(self, problem: CanonicalProblem) -> None:
        n = self.mesh.n
        for name in problem.state_names:
            if name not in self.x or self.x[name].shape != (n + 1,):
                raise ProblemError(f"candidate lacks {n + 1} nodal values for state '{name}'")
        if self.relaxed is not None:
            if self.relaxed.n != n:
                raise ProblemError("relaxed control does not match the mesh")
            missing = set(problem.control_names) - set(self.relaxed.atoms)
        else:
            missing = {name for name in problem.control_names
                       if name not in self.u or self.u[name].shape != (n,)}
        if missing:
            raise ProblemError(f"candidate lacks control values for {sorted(missing)}")
        for name in problem.slack_names:
            if name not in self.slacks:
                raise ProblemError(f"candidate lacks slack values for '{name}'")
        for name in problem.param_names:
            if name not in self.params:
                raise ProblemError(f"candidate lacks a value for parameter '{name}'")


def _num(v: float) -> float:
    v = float(v)
    if np.isnan(v):
        return v
    return float(g12(v))
