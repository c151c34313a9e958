"""CSR sparse matrices for the normalized token-graph adjacency."""
from __future__ import annotations

import numpy as np


class SparseMatrix:
    """Immutable CSR matrix. Values are float64; structure is validated once."""

    __slots__ = ("n_rows", "n_cols", "row_offsets", "col_indices", "edge_values", "row_ids")

    def __init__(self, n_rows, n_cols, row_offsets, col_indices, edge_values):
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.row_offsets = np.asarray(row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(col_indices, dtype=np.int64)
        self.edge_values = np.asarray(edge_values, dtype=np.float64)
        self._validate()
        # expanded row index per stored entry, for vectorized products
        self.row_ids = np.repeat(
            np.arange(self.n_rows, dtype=np.int64), np.diff(self.row_offsets)
        )

    def _validate(self):
        if self.row_offsets.shape != (self.n_rows + 1,):
            raise ValueError(
                f"row_offsets must have length n_rows+1={self.n_rows + 1}, "
                f"got {self.row_offsets.shape[0]}"
            )
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != self.col_indices.shape[0]:
            raise ValueError("row_offsets must start at 0 and end at nnz")
        if np.any(np.diff(self.row_offsets) < 0):
            raise ValueError("row_offsets must be nondecreasing")
        if self.col_indices.shape != self.edge_values.shape:
            raise ValueError("col_indices and edge_values must have equal length")
        if self.col_indices.size:
            if self.col_indices.min() < 0 or self.col_indices.max() >= self.n_cols:
                raise ValueError("column index out of range")
        for r in range(self.n_rows):
            cols = self.col_indices[self.row_offsets[r] : self.row_offsets[r + 1]]
            if cols.size > 1 and np.any(np.diff(cols) <= 0):
                raise ValueError(f"row {r}: column indices must be strictly increasing")

    @property
    def nnz(self) -> int:
        return int(self.col_indices.shape[0])

    @classmethod
    def from_entries(cls, n_rows, n_cols, entries):
        """Build from an iterable of (row, col, value); duplicates are rejected."""
        entries = sorted(entries)
        rows = np.array([e[0] for e in entries], dtype=np.int64)
        cols = np.array([e[1] for e in entries], dtype=np.int64)
        vals = np.array([e[2] for e in entries], dtype=np.float64)
        if len(entries) > 1:
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if np.any(dup):
                raise ValueError("duplicate (row, col) entry")
        offsets = np.zeros(n_rows + 1, dtype=np.int64)
        np.add.at(offsets, rows + 1, 1)
        offsets = np.cumsum(offsets)
        return cls(n_rows, n_cols, offsets, cols, vals)

    @classmethod
    def identity(cls, n):
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    @classmethod
    def zeros(cls, n_rows, n_cols):
        return cls(n_rows, n_cols, np.zeros(n_rows + 1, dtype=np.int64), [], [])

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_rows, self.n_cols))
        dense[self.row_ids, self.col_indices] = self.edge_values
        return dense

    def dot_dense(self, x: np.ndarray) -> np.ndarray:
        """self @ x for a dense 2-D x."""
        if x.ndim != 2:
            raise ValueError(f"expected 2-D dense operand, got shape {x.shape}")
        if x.shape[0] != self.n_cols:
            raise ValueError(
                f"sparse shape ({self.n_rows}, {self.n_cols}) does not match "
                f"dense shape {x.shape}"
            )
        out = np.zeros((self.n_rows,) + x.shape[1:])
        np.add.at(out, self.row_ids, self.edge_values[:, None] * x[self.col_indices])
        return out

    def t_dot_dense(self, x: np.ndarray) -> np.ndarray:
        """self.T @ x without materializing the transpose."""
        if x.ndim != 2:
            raise ValueError(f"expected 2-D dense operand, got shape {x.shape}")
        if x.shape[0] != self.n_rows:
            raise ValueError(
                f"sparse shape ({self.n_cols}, {self.n_rows}) (transposed) does not "
                f"match dense shape {x.shape}"
            )
        out = np.zeros((self.n_cols,) + x.shape[1:])
        np.add.at(out, self.col_indices, self.edge_values[:, None] * x[self.row_ids])
        return out
