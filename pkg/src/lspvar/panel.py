"""Panel ingestion: lagged regression pairs and cached Gram statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, NonFinite, TooShort


@dataclass(frozen=True)
class RawPanel:
    """Raw observations: ``series[m]`` is p x (T_m + 1), column t holds X_t."""

    ids: tuple[str, ...]
    series: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.series):
            raise ValueError("ids and series must have the same length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("entity ids must be unique")

    @classmethod
    def from_arrays(cls, series: Sequence[np.ndarray], ids: Sequence[str] | None = None) -> "RawPanel":
        series = tuple(np.atleast_2d(np.asarray(s, dtype=float)) for s in series)
        if ids is None:
            ids = [f"e{m:03d}" for m in range(len(series))]
        return cls(tuple(str(i) for i in ids), series)

    @property
    def M(self) -> int:
        return len(self.series)


@dataclass(frozen=True, eq=False)
class PanelData:
    """Per-entity lag pairs with the p x p statistics every solver block reads.

    Stacked arrays have the entity on the leading axis: ``gram[m] = X_m X_m'/T_m``,
    ``cross[m] = Y_m X_m'/T_m`` and ``yy[m] = diag(Y_m Y_m')/T_m``.
    """

    ids: tuple[str, ...]
    X: tuple[np.ndarray, ...]
    Y: tuple[np.ndarray, ...]
    gram: np.ndarray
    cross: np.ndarray
    yy: np.ndarray
    T: np.ndarray = field(repr=False)

    @property
    def M(self) -> int:
        return len(self.ids)

    @property
    def p(self) -> int:
        return self.gram.shape[1]

    def subset(self, index: Sequence[int]) -> "PanelData":
        index = list(index)
        return PanelData(
            ids=tuple(self.ids[i] for i in index),
            X=tuple(self.X[i] for i in index),
            Y=tuple(self.Y[i] for i in index),
            gram=self.gram[index],
            cross=self.cross[index],
            yy=self.yy[index],
            T=self.T[index],
        )

    def to_raw(self) -> RawPanel:
        series = [np.column_stack([x[:, :1], y]) for x, y in zip(self.X, self.Y)]
        return RawPanel(self.ids, tuple(series))


def build_panel(raw: RawPanel) -> PanelData:
    if raw.M == 0:
        raise TooShort("panel has no entities")
    p = raw.series[0].shape[0]
    xs, ys, grams, crosses, yys, Ts = [], [], [], [], [], []
    for eid, s in zip(raw.ids, raw.series):
        if s.ndim != 2 or s.shape[0] != p:
            raise DimensionMismatch(f"entity {eid!r} has {s.shape[0]} variables, expected {p}")
        if s.shape[1] < 2:
            raise TooShort(f"entity {eid!r} needs at least 2 time points, got {s.shape[1]}")
        if not np.all(np.isfinite(s)):
            raise NonFinite(f"entity {eid!r} contains non-finite values")
        x = np.ascontiguousarray(s[:, :-1])
        y = np.ascontiguousarray(s[:, 1:])
        T = x.shape[1]
        gram = x @ x.T / T
        xs.append(x)
        ys.append(y)
        grams.append(0.5 * (gram + gram.T))
        crosses.append(y @ x.T / T)
        yys.append(np.sum(y * y, axis=1) / T)
        Ts.append(T)
    return PanelData(
        ids=tuple(raw.ids),
        X=tuple(xs),
        Y=tuple(ys),
        gram=np.stack(grams),
        cross=np.stack(crosses),
        yy=np.stack(yys),
        T=np.asarray(Ts, dtype=float),
    )


def min_gram_eigen(panel: PanelData) -> float:
    """Restricted strong convexity constant: smallest Gram eigenvalue over entities."""
    lam = np.linalg.eigvalsh(panel.gram)[:, 0]
    return max(float(lam.min()), 0.0)


# --- CSV ingestion -----------------------------------------------------------


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def read_long_csv(path: str | Path) -> RawPanel:
    """Read ``entity,time,v1..vp`` rows sorted by (entity, time)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not all(_is_number(t) for t in rows[0][1:]):
        rows = rows[1:]
    ids: list[str] = []
    blocks: dict[str, list[list[float]]] = {}
    last_time: dict[str, int] = {}
    for r in rows:
        eid, t, values = r[0], int(r[1]), [float(v) for v in r[2:]]
        if eid not in blocks:
            if ids and eid in last_time:
                raise ValueError(f"rows for entity {eid!r} are not contiguous")
            ids.append(eid)
            blocks[eid] = []
        elif t != last_time[eid] + 1:
            raise ValueError(f"entity {eid!r}: time {t} does not follow {last_time[eid]}")
        last_time[eid] = t
        blocks[eid].append(values)
    widths = {len(v) for b in blocks.values() for v in b}
    if len(widths) > 1:
        raise DimensionMismatch(f"rows have differing numbers of variables: {sorted(widths)}")
    return RawPanel(tuple(ids), tuple(np.asarray(blocks[e], dtype=float).T for e in ids))


def read_entity_csv(path: str | Path) -> np.ndarray:
    """One entity per file: rows are time points, columns are variables."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not all(_is_number(t) for t in rows[0]):
        rows = rows[1:]
    return np.asarray([[float(v) for v in r] for r in rows], dtype=float).T


def read_panel_dir(directory: str | Path) -> RawPanel:
    directory = Path(directory)
    files = sorted(f for f in directory.glob("*.csv") if f.is_file())
    if not files:
        raise FileNotFoundError(f"no entity CSV files in {directory}")
    return RawPanel(tuple(f.stem for f in files), tuple(read_entity_csv(f) for f in files))


def read_panel(path: str | Path) -> RawPanel:
    path = Path(path)
    return read_panel_dir(path) if path.is_dir() else read_long_csv(path)


def write_panel_dir(raw: RawPanel, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for eid, s in zip(raw.ids, raw.series):
        path = directory / f"{eid}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"v{j + 1}" for j in range(s.shape[0])])
            for col in s.T:
                w.writerow([repr(float(v)) for v in col])
        written.append(path)
    return written
