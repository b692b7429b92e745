"""Finite, uniformly sampled multivariate traces."""

from __future__ import annotations

import numpy as np


class TraceError(ValueError):
    """Bad trace construction or out-of-range access."""


class Trace:
    """Immutable (length, n_vars) matrix of reals with named columns.

    Rows are time steps at unit sampling; columns follow `schema` order.
    """

    __slots__ = ("schema", "values", "_index")

    def __init__(self, schema, values):
        schema = tuple(schema)
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise TraceError(f"trace data must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise TraceError("trace must have at least one step")
        if arr.shape[1] != len(schema):
            raise TraceError(
                f"schema has {len(schema)} variables but data has {arr.shape[1]} columns"
            )
        if len(set(schema)) != len(schema):
            raise TraceError(f"duplicate variable names in schema {schema}")
        if not np.all(np.isfinite(arr)):
            raise TraceError("trace contains non-finite values")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "_index", {v: i for i, v in enumerate(schema)})

    def __setattr__(self, name, value):
        raise AttributeError("Trace is immutable")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    def var_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise TraceError(f"variable {name!r} not in trace schema {self.schema}") from None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.var_index(name)]

    def value(self, name: str, t: int) -> float:
        if not 0 <= t < self.length:
            raise TraceError(f"step {t} out of range [0, {self.length - 1}]")
        return float(self.values[t, self.var_index(name)])

    def suffix(self, t: int) -> "Trace":
        """Trace restricted to steps t..end."""
        if not 0 <= t < self.length:
            raise TraceError(f"suffix start {t} out of range [0, {self.length - 1}]")
        return Trace(self.schema, self.values[t:])

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return self.schema == other.schema and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"Trace(schema={self.schema}, length={self.length})"


def single_var_trace(values, name: str = "x") -> Trace:
    """Convenience constructor for one-variable traces."""
    return Trace((name,), np.asarray(values, dtype=np.float64).reshape(-1, 1))
