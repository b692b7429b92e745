"""Synthetic heterogeneous client datasets with planted cluster structure.

Each group is a sinusoid family (level, amplitude, period, bounded noise,
per-variable offsets); clients draw their group's family with a
client-specific phase.  Noise is clipped at three sigmas so planted range and
gap properties hold for every generated step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .models import Batch
from .stl.trace import Trace


class DataGenError(ValueError):
    pass


@dataclass(frozen=True)
class GroupFamily:
    level: float
    amplitude: float
    period: float
    noise_sigma: float = 0.0
    var_offsets: tuple = (0.0,)


@dataclass
class GenSpec:
    n_clients: int
    n_groups: int
    families: list
    n_vars: int = 1
    series_len: int = 300
    input_len: int = 120
    output_len: int = 24
    gap: float | None = None  # planted: first minus second variable stays above this
    seed: int = 0

    def __post_init__(self):
        if self.n_groups > self.n_clients:
            raise DataGenError("need n_groups <= n_clients")
        if len(self.families) != self.n_groups:
            raise DataGenError("one family per group required")
        if self.series_len < self.input_len + self.output_len:
            raise DataGenError("series too short for one window")
        for fam in self.families:
            if len(fam.var_offsets) != self.n_vars:
                raise DataGenError(
                    f"family offsets {fam.var_offsets} do not cover {self.n_vars} variables"
                )
            if fam.amplitude > 0 and not fam.noise_sigma < fam.amplitude / 4:
                raise DataGenError("need noise sigma < amplitude/4")
            if fam.amplitude == 0 and fam.noise_sigma != 0:
                raise DataGenError("constant families must be noise-free")
            if fam.period <= 0:
                raise DataGenError("period must be positive")
        if self.gap is not None:
            if self.n_vars < 2:
                raise DataGenError("planted gap needs at least two variables")
            for fam in self.families:
                margin = fam.var_offsets[0] - fam.var_offsets[1] - 6 * fam.noise_sigma
                if not margin > self.gap:
                    raise DataGenError(
                        f"offsets {fam.var_offsets[:2]} cannot guarantee gap > {self.gap}"
                    )

    @property
    def schema(self) -> tuple:
        return tuple(f"x{i + 1}" for i in range(self.n_vars))

    @property
    def window_count(self) -> int:
        return self.series_len - self.input_len - self.output_len + 1


@dataclass
class ClientDataset:
    client_id: int
    schema: tuple
    series: np.ndarray
    train: Batch
    val: Batch
    test: Batch

    @property
    def n_train(self) -> int:
        return len(self.train)


def _client_series(spec: GenSpec, fam: GroupFamily, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(spec.series_len, dtype=np.float64)
    phase = rng.uniform(0.0, fam.period)
    seasonal = fam.amplitude * np.sin(2.0 * np.pi * (t + phase) / fam.period)
    cols = []
    for v in range(spec.n_vars):
        noise = rng.normal(0.0, fam.noise_sigma, spec.series_len) if fam.noise_sigma else 0.0
        noise = np.clip(noise, -3 * fam.noise_sigma, 3 * fam.noise_sigma)
        cols.append(fam.level + fam.var_offsets[v] + seasonal + noise)
    return np.stack(cols, axis=1)


def _window_split(spec: GenSpec, series: np.ndarray):
    n, m = spec.input_len, spec.output_len
    starts = np.arange(spec.window_count)
    x = np.stack([series[s : s + n] for s in starts])
    y = np.stack([series[s + n : s + n + m] for s in starts])
    n_train = int(0.8 * len(starts))
    n_val = int(0.1 * len(starts))
    cut1, cut2 = n_train, n_train + n_val
    mk = lambda sl: Batch(x[sl], y[sl], spec.schema)
    return mk(slice(0, cut1)), mk(slice(cut1, cut2)), mk(slice(cut2, None))


def generate(spec: GenSpec):
    """Builds (client datasets, ground-truth group labels).

    Labels exist only so clustering-recovery tests can score assignments;
    the federation never sees them.  Client i draws group i mod n_groups.
    """
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_clients)
    clients, labels = [], []
    for i in range(spec.n_clients):
        group = i % spec.n_groups
        rng = np.random.default_rng(seeds[i])
        series = _client_series(spec, spec.families[group], rng)
        train, val, test = _window_split(spec, series)
        if len(train) < 1 or len(test) < 1:
            raise DataGenError("split produced an empty train or test set")
        clients.append(ClientDataset(i, spec.schema, series, train, val, test))
        labels.append(group)
    return clients, labels


def load_csv(path) -> Trace:
    """Trace from a CSV file: header row of variable names, one row per step.

    Empty interior cells are filled by linear interpolation; missing values at
    either end have no anchor and are an error.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataGenError("empty CSV") from None
        schema = tuple(name.strip() for name in header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                row = [""] * len(schema)  # blank line: a full row of missing cells
            if len(row) != len(schema):
                raise DataGenError(f"line {lineno}: expected {len(schema)} cells, got {len(row)}")
            vals = []
            for cell in row:
                cell = cell.strip()
                if not cell:
                    vals.append(np.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataGenError(f"line {lineno}: non-numeric cell {cell!r}") from None
            rows.append(vals)
    if not rows:
        raise DataGenError("CSV has a header but no data rows")
    data = np.asarray(rows, dtype=np.float64)
    for j in range(data.shape[1]):
        col = data[:, j]
        missing = np.isnan(col)
        if not missing.any():
            continue
        if missing[0] or missing[-1]:
            raise DataGenError(
                f"column {schema[j]!r} has a leading or trailing gap; cannot interpolate"
            )
        idx = np.arange(len(col))
        col[missing] = np.interp(idx[missing], idx[~missing], col[~missing])
    return Trace(schema, data)
