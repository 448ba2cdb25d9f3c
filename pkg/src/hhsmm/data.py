"""Multi-sequence observation container and sequence utilities."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

MISSING_TOKEN = "NA"


class DataError(ValueError):
    pass


@dataclass
class SequenceSet:
    """Stacked observations of several sequences.

    Attributes
    ----------
    x : ndarray, shape (T, p)
        Observations, sequences stacked row-wise. Missing cells are NaN.
    N : ndarray of int
        Sequence lengths, ``N.sum() == T``.
    s : ndarray of int, optional
        State labels per row, 0-based.
    rul : ndarray of int, optional
        True remaining useful lifetime, one entry per sequence.
    columns : list of str
        Variable names used when writing CSV files.
    """

    x: np.ndarray
    N: np.ndarray
    s: np.ndarray | None = None
    rul: np.ndarray | None = None
    columns: list[str] = field(default_factory=list)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[1] < 1:
            raise DataError("x must be a (T, p) matrix with p >= 1")
        self.x = x
        self.N = np.atleast_1d(np.asarray(self.N, dtype=int))
        if np.any(self.N < 1):
            raise DataError("sequence lengths must be >= 1")
        if self.N.sum() != x.shape[0]:
            raise DataError(f"sum(N) = {self.N.sum()} but x has {x.shape[0]} rows")
        if self.s is not None:
            self.s = np.asarray(self.s, dtype=int)
            if self.s.shape != (x.shape[0],):
                raise DataError("state labels must have one entry per row")
        if self.rul is not None:
            self.rul = np.atleast_1d(np.asarray(self.rul, dtype=int))
            if self.rul.shape != self.N.shape:
                raise DataError("rul needs one entry per sequence")
        if not self.columns:
            self.columns = [f"x{i + 1}" for i in range(x.shape[1])]
        elif len(self.columns) != x.shape[1]:
            raise DataError("column names do not match the number of variables")

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_seq(self) -> int:
        return self.N.size

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.N)])

    @property
    def has_missing(self) -> bool:
        return bool(np.isnan(self.x).any())

    def slices(self) -> Iterator[slice]:
        off = self.offsets
        for i in range(self.n_seq):
            yield slice(off[i], off[i + 1])

    def sequence(self, i: int) -> np.ndarray:
        off = self.offsets
        return self.x[off[i]:off[i + 1]]

    def subset(self, idx: Sequence[int]) -> "SequenceSet":
        """Sequences ``idx`` (in the given order) as a new set."""
        sl = list(self.slices())
        rows = np.concatenate([np.arange(sl[i].start, sl[i].stop) for i in idx])
        return SequenceSet(
            self.x[rows], self.N[list(idx)],
            None if self.s is None else self.s[rows],
            None if self.rul is None else self.rul[list(idx)],
            list(self.columns),
        )

    def with_states(self, s) -> "SequenceSet":
        return SequenceSet(self.x, self.N, s, self.rul, list(self.columns))

    def __eq__(self, other):
        if not isinstance(other, SequenceSet):
            return NotImplemented
        same_opt = all(
            (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))
            for a, b in ((self.s, other.s), (self.rul, other.rul))
        )
        return (np.array_equal(self.x, other.x, equal_nan=True) and np.array_equal(self.N, other.N)
                and same_opt and self.columns == other.columns)


def hhsmmdata(x, N=None) -> SequenceSet:
    """Wrap a data matrix and optional sequence lengths."""
    x = np.asarray(x, dtype=float)
    if N is None:
        N = [x.shape[0]]
    return SequenceSet(x, N)


def lagdata(data: SequenceSet, lags: int = 1) -> SequenceSet:
    """Lagged design ``[x_{t-lags}, ..., x_{t-1}, x_t]`` per sequence.

    Each sequence loses its first ``lags`` rows. State labels follow the
    current (last) block.
    """
    if lags < 1:
        raise DataError("lags must be positive")
    if np.any(data.N <= lags):
        raise DataError(f"every sequence must be longer than lags={lags}")
    blocks, states = [], []
    for sl in data.slices():
        seq = data.x[sl]
        n = seq.shape[0]
        blocks.append(np.hstack([seq[k:n - lags + k] for k in range(lags + 1)]))
        if data.s is not None:
            states.append(data.s[sl][lags:])
    cols = [f"{c}_lag{lags - k}" if k < lags else c for k in range(lags + 1) for c in data.columns]
    return SequenceSet(np.vstack(blocks), data.N - lags,
                       np.concatenate(states) if data.s is not None else None,
                       data.rul, cols)


@dataclass
class SplitResult:
    train: SequenceSet
    test: SequenceSet
    trimmed: SequenceSet
    trimmed_count: np.ndarray


def _trim(data: SequenceSet, ratio: float) -> tuple[SequenceSet, np.ndarray]:
    keep = np.floor(ratio * data.N + 1e-9).astype(int)
    if np.any(keep < 1):
        raise DataError("trimming would leave an empty sequence")
    rows = np.concatenate([np.arange(sl.start, sl.start + k) for sl, k in zip(data.slices(), keep)])
    count = data.N - keep
    rul = None if data.rul is None else data.rul + count
    out = SequenceSet(data.x[rows], keep, None if data.s is None else data.s[rows], rul,
                      list(data.columns))
    return out, count


def train_test_split(data: SequenceSet, train_ratio: float = 0.7, trim: bool = False,
                     trim_ratio: float = 0.9, seed: int = 0) -> SplitResult:
    """Random sequence-level split with optional right trimming of the test part.

    ``train_ratio = 1`` keeps every sequence in both parts and only trims.
    """
    if not 0 < train_ratio <= 1:
        raise DataError("train_ratio must lie in (0, 1]")
    if trim and not 0 < trim_ratio <= 1:
        raise DataError("trim_ratio must lie in (0, 1]")
    n = data.n_seq
    if train_ratio == 1:
        train = test = data
    else:
        order = np.random.default_rng(seed).permutation(n)
        n_train = int(round(train_ratio * n))
        if n_train < 1 or n_train >= n:
            raise DataError("split leaves an empty partition")
        train = data.subset(np.sort(order[:n_train]))
        test = data.subset(np.sort(order[n_train:]))
    if trim:
        trimmed, count = _trim(test, trim_ratio)
    else:
        trimmed, count = test, np.zeros(test.n_seq, dtype=int)
    return SplitResult(train, test, trimmed, count)


def homogeneity(s1, s2, n_states: int | None = None) -> np.ndarray:
    """Per-state agreement of two label sequences after the best relabeling.

    The relabeling of ``s1`` maximizing total agreement is found by an
    assignment solver on the confusion matrix (equivalent to searching all
    permutations). Under it, state ``j`` scores
    ``|{t: s1'_t = j and s2_t = j}| / |{t: s1'_t = j or s2_t = j}|``.
    """
    s1 = np.asarray(s1, dtype=int)
    s2 = np.asarray(s2, dtype=int)
    if s1.shape != s2.shape:
        raise DataError("state sequences differ in length")
    J = n_states or int(max(s1.max(), s2.max()) + 1)
    conf = np.zeros((J, J))
    np.add.at(conf, (s1, s2), 1)
    rows, cols = linear_sum_assignment(conf, maximize=True)
    perm = np.empty(J, dtype=int)
    perm[rows] = cols
    mapped = perm[s1]
    out = np.zeros(J)
    for j in range(J):
        a, b = mapped == j, s2 == j
        union = np.sum(a | b)
        out[j] = np.sum(a & b) / union if union else 0.0
    return out


def _fmt(v: float) -> str:
    return MISSING_TOKEN if math.isnan(v) else format(v, ".17g")


def store_sequences(data: SequenceSet, path) -> None:
    """Write the sequence CSV format: ``seq_id,<vars>[,state][,rul]``."""
    header = ["seq_id", *data.columns]
    if data.s is not None:
        header.append("state")
    if data.rul is not None:
        header.append("rul")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, sl in enumerate(data.slices()):
            for r in range(sl.start, sl.stop):
                row = [str(i + 1), *(_fmt(v) for v in data.x[r])]
                if data.s is not None:
                    row.append(str(int(data.s[r]) + 1))
                if data.rul is not None:
                    row.append(str(int(data.rul[i])))
                w.writerow(row)


def _parse_cell(cell: str, line: int) -> float:
    if cell == MISSING_TOKEN:
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"line {line}: non-numeric cell {cell!r}") from None


def load_sequences(path) -> SequenceSet:
    """Read a sequence CSV; ``NA`` cells become NaN."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "seq_id":
        raise DataError("missing 'seq_id' header")
    header = rows[0]
    has_rul = header[-1] == "rul"
    has_state = "state" in header[1:]
    nvar = len(header) - 1 - has_rul - has_state
    if nvar < 1:
        raise DataError("no observation columns")
    ids, xs, states, ruls = [], [], [], []
    for k, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"line {k}: expected {len(header)} cells, got {len(row)}")
        try:
            ids.append(int(row[0]))
        except ValueError:
            raise DataError(f"line {k}: bad seq_id {row[0]!r}") from None
        xs.append([_parse_cell(c, k) for c in row[1:1 + nvar]])
        if has_state:
            states.append(int(row[1 + nvar]) - 1)
        if has_rul:
            ruls.append(int(row[-1]))
    if not ids:
        raise DataError("no data rows")
    ids = np.asarray(ids)
    change = np.nonzero(np.diff(ids))[0]
    if np.any(np.diff(ids) < 0):
        raise DataError("seq_id must be nondecreasing (contiguous increasing blocks)")
    starts = np.concatenate([[0], change + 1])
    N = np.diff(np.concatenate([starts, [ids.size]]))
    rul = None
    if has_rul:
        ruls = np.asarray(ruls)
        rul = ruls[starts]
        for a, n in zip(starts, N):
            if np.any(ruls[a:a + n] != ruls[a]):
                raise DataError("rul must be constant within a sequence")
    return SequenceSet(np.asarray(xs, dtype=float), N,
                       np.asarray(states) if has_state else None, rul, header[1:1 + nvar])
