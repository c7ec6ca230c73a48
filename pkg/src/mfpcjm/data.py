"""Joint longitudinal/time-to-event data container and its CSV layout.

Files
-----
``survival.csv``
    ``id,time,event,<covariate>...`` with one row per subject.
``longitudinal.csv``
    ``id,marker,time,value`` in long format.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import SchemaError

SURVIVAL_FILE = "survival.csv"
LONGITUDINAL_FILE = "longitudinal.csv"


@dataclass(frozen=True, eq=False)
class LongSurvDataset:
    """Survival triples plus irregular multi-marker longitudinal observations.

    Observations are stored stacked and sorted by (marker, subject, time), so
    ``marker_obs(k)`` returns the marker-``k`` block in subject order.

    Parameters
    ----------
    ids : array_like, shape (n,)
        Subject identifiers.
    time : array_like, shape (n,)
        Follow-up (event or censoring) times.
    event : array_like, shape (n,)
        Event indicators in {0, 1}.
    covariates : mapping of str to array_like
        Baseline covariates, one value per subject.
    markers : sequence of str
        Marker names; defines K.
    obs_marker, obs_subject : array_like of int, shape (N,)
        Marker index and subject index (position, not id) of each observation.
    obs_time, obs_value : array_like, shape (N,)
        Observation times and values.
    t_max : float, optional
        Upper end of the follow-up interval. Defaults to ``max(time)``.
    """

    ids: np.ndarray
    time: np.ndarray
    event: np.ndarray
    covariates: Mapping[str, np.ndarray]
    markers: tuple
    obs_marker: np.ndarray
    obs_subject: np.ndarray
    obs_time: np.ndarray
    obs_value: np.ndarray
    t_max: float | None = None
    _slices: list = field(default=None, repr=False)

    def __post_init__(self):
        setattr_ = object.__setattr__
        time = np.asarray(self.time, dtype=float)
        event = np.asarray(self.event)
        n = time.shape[0]
        if time.ndim != 1 or event.shape != (n,) or len(self.ids) != n:
            raise SchemaError("ids, time and event must be 1-d arrays of equal length")
        if not np.all(np.isin(event, (0, 1))):
            raise SchemaError("event indicators must be 0 or 1")
        if np.any(~np.isfinite(time)) or np.any(time <= 0):
            raise SchemaError("follow-up times must be finite and positive")
        t_max = float(time.max()) if self.t_max is None else float(self.t_max)
        if np.any(time > t_max * (1 + 1e-12)):
            raise SchemaError("follow-up time exceeds t_max")
        covs = {}
        for name, vals in self.covariates.items():
            vals = np.asarray(vals, dtype=float)
            if vals.shape != (n,):
                raise SchemaError(f"covariate {name!r} must have one value per subject")
            if name == "t":
                raise SchemaError("'t' is reserved for time and cannot be a covariate")
            covs[name] = vals
        markers = tuple(str(m) for m in self.markers)
        if not markers:
            raise SchemaError("at least one marker is required")

        mk = np.asarray(self.obs_marker, dtype=int)
        sb = np.asarray(self.obs_subject, dtype=int)
        ot = np.asarray(self.obs_time, dtype=float)
        ov = np.asarray(self.obs_value, dtype=float)
        N = mk.shape[0]
        if not (sb.shape == ot.shape == ov.shape == (N,)):
            raise SchemaError("observation arrays must have equal length")
        if N:
            if mk.min() < 0 or mk.max() >= len(markers):
                raise SchemaError("observation marker index out of range")
            if sb.min() < 0 or sb.max() >= n:
                raise SchemaError("observation subject index out of range")
            if not (np.all(np.isfinite(ot)) and np.all(np.isfinite(ov))):
                raise SchemaError("observation times and values must be finite")
            if np.any(ot < 0) or np.any(ot > time[sb] + 1e-12):
                raise SchemaError("observation times must lie in [0, T_i]")
        order = np.lexsort((ot, sb, mk))
        mk, sb, ot, ov = mk[order], sb[order], ot[order], ov[order]
        bounds = np.searchsorted(mk, np.arange(len(markers) + 1))

        setattr_(self, "ids", np.asarray(self.ids))
        setattr_(self, "time", time)
        setattr_(self, "event", event.astype(int))
        setattr_(self, "covariates", covs)
        setattr_(self, "markers", markers)
        setattr_(self, "obs_marker", mk)
        setattr_(self, "obs_subject", sb)
        setattr_(self, "obs_time", ot)
        setattr_(self, "obs_value", ov)
        setattr_(self, "t_max", t_max)
        setattr_(self, "_slices", [slice(bounds[k], bounds[k + 1]) for k in range(len(markers))])

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def K(self) -> int:
        return len(self.markers)

    @property
    def N(self) -> int:
        return self.obs_time.shape[0]

    def marker_obs(self, k: int):
        """Return ``(subject, time, value)`` arrays of marker ``k``."""
        s = self._slices[k]
        return self.obs_subject[s], self.obs_time[s], self.obs_value[s]

    def n_obs(self, k: int) -> int:
        s = self._slices[k]
        return s.stop - s.start

    def per_subject(self, k: int):
        """List of ``(times, values)`` per subject for marker ``k``."""
        subj, t, y = self.marker_obs(k)
        cuts = np.searchsorted(subj, np.arange(self.n + 1))
        return [(t[a:b], y[a:b]) for a, b in zip(cuts[:-1], cuts[1:])]

    def covariate(self, name: str) -> np.ndarray:
        try:
            return self.covariates[name]
        except KeyError:
            raise SchemaError(f"unknown covariate {name!r}; available: {sorted(self.covariates)}") from None

    def subset(self, subjects: Sequence[int]) -> "LongSurvDataset":
        """Dataset restricted to the given subject positions (renumbered)."""
        subjects = np.asarray(subjects, dtype=int)
        remap = np.full(self.n, -1)
        remap[subjects] = np.arange(subjects.size)
        keep = remap[self.obs_subject] >= 0
        return LongSurvDataset(
            ids=self.ids[subjects],
            time=self.time[subjects],
            event=self.event[subjects],
            covariates={k: v[subjects] for k, v in self.covariates.items()},
            markers=self.markers,
            obs_marker=self.obs_marker[keep],
            obs_subject=remap[self.obs_subject[keep]],
            obs_time=self.obs_time[keep],
            obs_value=self.obs_value[keep],
            t_max=self.t_max,
        )

    # ------------------------------------------------------------------ I/O
    def to_csv(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        cov_names = list(self.covariates)
        with open(directory / SURVIVAL_FILE, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "time", "event", *cov_names])
            for i in range(self.n):
                w.writerow([self.ids[i], repr(float(self.time[i])), int(self.event[i]),
                            *(repr(float(self.covariates[c][i])) for c in cov_names)])
        with open(directory / LONGITUDINAL_FILE, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "marker", "time", "value"])
            for m, s, t, v in zip(self.obs_marker, self.obs_subject, self.obs_time, self.obs_value):
                w.writerow([self.ids[s], self.markers[m], repr(float(t)), repr(float(v))])

    @classmethod
    def from_csv(cls, directory, markers: Sequence[str] | None = None,
                 t_max: float | None = None) -> "LongSurvDataset":
        """Read ``survival.csv`` and ``longitudinal.csv`` from ``directory``.

        Raises
        ------
        SchemaError
            With file, row and column of the first malformed entry.
        """
        directory = Path(directory)
        surv_rows = _read_csv(directory / SURVIVAL_FILE, ("id", "time", "event"))
        header, rows = surv_rows
        cov_names = [c for c in header if c not in ("id", "time", "event")]
        ids, time, event = [], [], []
        covs = {c: [] for c in cov_names}
        for lineno, row in rows:
            ids.append(row["id"])
            time.append(_parse_float(row, "time", SURVIVAL_FILE, lineno))
            ev = _parse_float(row, "event", SURVIVAL_FILE, lineno)
            if ev not in (0.0, 1.0):
                raise SchemaError(f"{SURVIVAL_FILE} row {lineno}, column 'event': expected 0 or 1, got {row['event']!r}")
            event.append(int(ev))
            for c in cov_names:
                covs[c].append(_parse_float(row, c, SURVIVAL_FILE, lineno))
        if len(set(ids)) != len(ids):
            raise SchemaError(f"{SURVIVAL_FILE}: duplicate subject ids")
        index = {sid: i for i, sid in enumerate(ids)}

        _, lrows = _read_csv(directory / LONGITUDINAL_FILE, ("id", "marker", "time", "value"))
        found = []
        mk, sb, ot, ov = [], [], [], []
        for lineno, row in lrows:
            if row["id"] not in index:
                raise SchemaError(f"{LONGITUDINAL_FILE} row {lineno}, column 'id': unknown subject {row['id']!r}")
            name = row["marker"]
            if name not in found:
                found.append(name)
            mk.append(name)
            sb.append(index[row["id"]])
            ot.append(_parse_float(row, "time", LONGITUDINAL_FILE, lineno))
            ov.append(_parse_float(row, "value", LONGITUDINAL_FILE, lineno))
        if markers is None:
            markers = found
        else:
            unknown = set(found) - set(markers)
            if unknown:
                raise SchemaError(f"{LONGITUDINAL_FILE}: unknown markers {sorted(unknown)}")
        mindex = {m: k for k, m in enumerate(markers)}
        return cls(ids=np.array(ids, dtype=object), time=np.array(time), event=np.array(event),
                   covariates={c: np.array(v) for c, v in covs.items()}, markers=tuple(markers),
                   obs_marker=np.array([mindex[m] for m in mk], dtype=int),
                   obs_subject=np.array(sb, dtype=int), obs_time=np.array(ot), obs_value=np.array(ov),
                   t_max=t_max)


def _read_csv(path: Path, required):
    if not path.exists():
        raise SchemaError(f"missing file {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path.name}: missing columns {missing}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(v is None for v in row.values()):
                raise SchemaError(f"{path.name} row {lineno}: wrong number of fields")
            rows.append((lineno, row))
    return header, rows


def _parse_float(row, column, fname, lineno) -> float:
    raw = row[column]
    try:
        val = float(raw)
    except (TypeError, ValueError):
        raise SchemaError(f"{fname} row {lineno}, column {column!r}: not a number: {raw!r}") from None
    if not math.isfinite(val):
        raise SchemaError(f"{fname} row {lineno}, column {column!r}: non-finite value")
    return val
