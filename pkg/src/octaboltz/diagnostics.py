"""Moment reconstruction, conservation audits and CSV time series."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lattice import VelocityLattice, analytic_geometry

COLUMNS = (
    "t", "mass",
    "p1_rec", "p2_rec", "p3_rec", "E_rec",
    "p1_int", "p2_int", "p3_int", "E_int",
    "rhs_l1", "min_N",
)


def _geometry(source) -> dict:
    if isinstance(source, VelocityLattice):
        return analytic_geometry(source)
    return source.geometry


def reconstruct_moments(source, N):
    """Momentum and energy implied by cell densities alone.

    ``source`` is a coefficient set or a lattice.  Returns
    ``(sum_a m_a N_a, 1/2 sum_a (|c_a|^2 + 3 d) N_a)``; a stack of density
    vectors gives stacked results.
    """
    geo = _geometry(source)
    N = np.asarray(N, dtype=float)
    return N @ geo["mean_velocity"], 0.5 * (N @ geo["cell_energy"])


def goodness(source, state) -> dict:
    """Absolute and relative gaps between integrated and reconstructed moments."""
    p_rec, E_rec = reconstruct_moments(source, state.N)
    p_rec = np.asarray(p_rec).reshape(-1, 3).sum(axis=0)
    E_rec = float(np.sum(E_rec))
    p_int = np.asarray(state.p).reshape(-1, 3).sum(axis=0)
    E_int = float(np.sum(state.E))
    dp = np.abs(p_int - p_rec)
    dE = abs(E_int - E_rec)
    return {
        "p_abs": dp,
        "E_abs": dE,
        # momentum scale: |p| plus the mass, so a zero-momentum state stays well posed
        "p_rel": dp / (np.linalg.norm(p_int) + float(np.sum(state.N))),
        "E_rel": dE / max(abs(E_int), 1e-300),
    }


@dataclass
class RunRecord:
    """Time series of conservation and relaxation figures for one run."""

    rows: list = field(default_factory=list)
    max_rescale: float = float("nan")

    def append(self, t, mass, p_rec, E_rec, p_int, E_int, rhs_l1, min_N):
        if self.rows and not t > self.rows[-1][0]:
            raise ValueError(f"time {t} does not increase past {self.rows[-1][0]}")
        row = (float(t), float(mass), *map(float, p_rec), float(E_rec),
               *map(float, p_int), float(E_int), float(rhs_l1), float(min_N))
        self.rows.append(row)

    def record_state(self, source, state, rhs=None):
        """Append one row from a (0-D or slab) state; moments are summed over nodes."""
        p_rec, E_rec = reconstruct_moments(source, state.N)
        self.append(
            state.t,
            np.sum(state.N),
            np.asarray(p_rec).reshape(-1, 3).sum(axis=0),
            np.sum(E_rec),
            np.asarray(state.p).reshape(-1, 3).sum(axis=0),
            np.sum(state.E),
            0.0 if rhs is None else np.abs(rhs).sum(),
            np.min(state.N),
        )

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[COLUMNS.index(name)] for row in self.rows])

    def as_array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float).reshape(-1, len(COLUMNS))


def write_timeseries(record: RunRecord, path, format: str = "csv") -> None:
    """CSV with a fixed header; floats carry 17 significant digits."""
    if format != "csv":
        raise ValueError(f"unsupported time-series format {format!r}")
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(COLUMNS)
            for row in record.rows:
                writer.writerow([f"{v:.17g}" for v in row])
    except OSError as exc:
        raise OSError(f"cannot write time series to {path}: {exc.strerror}") from exc


def read_timeseries(path) -> RunRecord:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        record = RunRecord()
        record.rows = [tuple(float(v) for v in row) for row in reader if row]
    return record
