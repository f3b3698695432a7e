"""Out-of-core row-batch delivery.

A :class:`BatchSource` yields the rows of ``X`` in batches of at most
``batch_rows`` rows.  Only the current batch is ever resident; file-backed
sources seek and read one batch at a time.

Binary format (little-endian)::

    b"RNSV" | u32 version=1 | u64 rows | u64 cols | u8 dtype (0=f32, 1=f64) | payload

Callers should orient ``X`` so that rows are samples and columns are the
feature dimension; the stream always delivers rows of the matrix as stored.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"RNSV"
VERSION = 1
_HEADER = struct.Struct("<4sIQQB")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {"f32": 0, "f64": 1}


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class MatrixHeader:
    rows: int
    cols: int
    dtype: str = "f64"

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise StreamError(f"matrix must be at least 1x1, got {self.rows}x{self.cols}")
        if self.dtype not in _CODES:
            raise StreamError(f"unknown dtype {self.dtype!r}")


@dataclass
class CenteringState:
    mean: np.ndarray
    count: int


def write_binary(path, x, dtype: str = "f64") -> None:
    x = np.asarray(x)
    if x.ndim != 2:
        raise StreamError("only 2-D matrices can be written")
    header = MatrixHeader(x.shape[0], x.shape[1], dtype)
    code = _CODES[dtype]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, header.rows, header.cols, code))
        fh.write(np.ascontiguousarray(x, dtype=_DTYPES[code]).tobytes())


def read_binary_header(fh) -> MatrixHeader:
    raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise StreamError("truncated header")
    magic, version, rows, cols, code = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise StreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise StreamError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise StreamError(f"unknown dtype code {code}")
    return MatrixHeader(int(rows), int(cols), "f32" if code == 0 else "f64")


def read_binary(path) -> np.ndarray:
    """Load a whole binary matrix (desk-scale helper, not for streaming)."""
    with open(path, "rb") as fh:
        h = read_binary_header(fh)
        data = np.frombuffer(fh.read(), dtype=_DTYPES[_CODES[h.dtype]])
    if data.size != h.rows * h.cols:
        raise StreamError(f"payload has {data.size} values, header promises {h.rows * h.cols}")
    return data.reshape(h.rows, h.cols).astype(float)


class BatchSource:
    """Sequential provider of row batches.

    ``next_batch`` returns a ``(b, n)`` array or ``None`` at the end of a pass;
    the following call starts a new pass.  With ``order="shuffled"`` a pass
    visits contiguous blocks of ``batch_rows`` rows in a seeded random order,
    identical for every pass.
    """

    def __init__(self, header: MatrixHeader, batch_rows: int, order: str = "sequential",
                 seed: int = 0, origin: str = "in-memory"):
        if batch_rows < 1:
            raise StreamError("batch_rows must be >= 1")
        if order not in ("sequential", "shuffled"):
            raise StreamError(f"unknown order {order!r}")
        self.header = header
        self.batch_rows = int(batch_rows)
        self.order = order
        self.seed = seed
        self.origin = origin
        self.passes_completed = 0
        self.rows_delivered = 0
        self._cursor = 0
        nblocks = self.batches_per_pass
        if order == "shuffled":
            self._blocks = np.random.default_rng(seed).permutation(nblocks)
        else:
            self._blocks = np.arange(nblocks)

    @property
    def shape(self) -> tuple[int, int]:
        return self.header.rows, self.header.cols

    @property
    def batches_per_pass(self) -> int:
        return -(-self.header.rows // self.batch_rows)

    def block_rows(self, block: int) -> tuple[int, int]:
        start = block * self.batch_rows
        return start, min(start + self.batch_rows, self.header.rows)

    def current_rows(self) -> tuple[int, int]:
        """Row range of the batch most recently returned."""
        return self.block_rows(int(self._blocks[self._cursor - 1]))

    def _read(self, start: int, stop: int) -> np.ndarray:
        raise NotImplementedError

    def next_batch(self):
        if self._cursor >= len(self._blocks):
            self._cursor = 0
            self.passes_completed += 1
            return None
        start, stop = self.block_rows(int(self._blocks[self._cursor]))
        batch = self._read(start, stop)
        self._cursor += 1
        self.rows_delivered += stop - start
        return batch

    def reset(self) -> None:
        """Rewind to the start of a pass without counting it as completed."""
        self._cursor = 0

    def iter_pass(self):
        """Yield ``(start_row, batch)`` for one complete pass."""
        self.reset()
        while True:
            batch = self.next_batch()
            if batch is None:
                return
            yield self.current_rows()[0], batch

    def cycle(self):
        """Endless batch iterator that wraps around pass boundaries."""
        while True:
            batch = self.next_batch()
            if batch is None:
                if self.header.rows == 0:
                    return
                continue
            yield batch

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class MemorySource(BatchSource):
    def __init__(self, x, batch_rows: int, order: str = "sequential", seed: int = 0):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            raise StreamError("in-memory source needs a 2-D array")
        super().__init__(MatrixHeader(x.shape[0], x.shape[1]), batch_rows, order, seed)
        self._x = x

    def _read(self, start, stop):
        return self._x[start:stop]


class BinarySource(BatchSource):
    def __init__(self, path, batch_rows: int, order: str = "sequential", seed: int = 0):
        self._fh = open(path, "rb")
        try:
            header = read_binary_header(self._fh)
            self._dtype = _DTYPES[_CODES[header.dtype]]
            self._offset = _HEADER.size
            expected = self._offset + header.rows * header.cols * self._dtype.itemsize
            actual = os.fstat(self._fh.fileno()).st_size
            if actual != expected:
                raise StreamError(f"{path}: file is {actual} bytes, header implies {expected}")
        except Exception:
            self._fh.close()
            raise
        super().__init__(header, batch_rows, order, seed, origin="binary-file")

    def _read(self, start, stop):
        n = self.header.cols
        self._fh.seek(self._offset + start * n * self._dtype.itemsize)
        count = (stop - start) * n
        try:
            data = np.fromfile(self._fh, dtype=self._dtype, count=count)
        except OSError as exc:
            self._cursor = 0
            raise StreamError(f"read failed at row {start}: {exc}") from exc
        if data.size != count:
            self._cursor = 0
            raise StreamError(f"short read at row {start}")
        return data.reshape(stop - start, n).astype(float, copy=False)

    def close(self):
        self._fh.close()


class CsvSource(BatchSource):
    """Numeric comma-separated rows; optionally skip one header line.

    The file is scanned once at open time to validate every row and record
    line offsets, so later batches can be read by seeking.
    """

    def __init__(self, path, batch_rows: int, order: str = "sequential", seed: int = 0,
                 skip_header: bool = False):
        self._path = path
        self._offsets = []
        cols = None
        with open(path, "rb") as fh:
            if skip_header:
                fh.readline()
            while True:
                pos = fh.tell()
                line = fh.readline()
                if not line:
                    break
                if not line.strip():
                    continue
                row = self._parse(line, len(self._offsets))
                if cols is None:
                    cols = row.size
                elif row.size != cols:
                    raise StreamError(
                        f"{path}: row {len(self._offsets)} has {row.size} fields, expected {cols}")
                self._offsets.append(pos)
        if cols is None:
            raise StreamError(f"{path}: no data rows")
        super().__init__(MatrixHeader(len(self._offsets), cols), batch_rows, order, seed,
                         origin="csv-file")
        self._fh = open(path, "rb")

    @staticmethod
    def _parse(line: bytes, index: int) -> np.ndarray:
        try:
            vals = np.array([float(tok) for tok in line.decode().strip().split(",")])
        except ValueError as exc:
            raise StreamError(f"row {index}: {exc}") from exc
        if not np.all(np.isfinite(vals)):
            raise StreamError(f"row {index}: non-finite value")
        return vals

    def _read(self, start, stop):
        self._fh.seek(self._offsets[start])
        out = np.empty((stop - start, self.header.cols))
        i = 0
        while i < stop - start:
            line = self._fh.readline()
            if not line.strip():
                continue
            out[i] = self._parse(line, start + i)
            i += 1
        return out

    def close(self):
        self._fh.close()


class EdgeListSource(BatchSource):
    """Undirected adjacency rows materialised from a ``u v [w]`` edge list.

    Edges are grouped by endpoint at open time (O(edges) memory), and each
    batch of dense adjacency rows is built on demand.
    """

    def __init__(self, path, batch_rows: int, n: int | None = None, one_based: bool = False,
                 order: str = "sequential", seed: int = 0):
        src, dst, wts = [], [], []
        with open(path) as fh:
            for lineno, line in enumerate(fh):
                line = line.strip()
                if not line or line.startswith(("#", "%")):
                    continue
                parts = line.split()
                if len(parts) not in (2, 3):
                    raise StreamError(f"{path}: line {lineno} is not 'u v [w]'")
                try:
                    u, v = int(parts[0]), int(parts[1])
                    w = float(parts[2]) if len(parts) == 3 else 1.0
                except ValueError as exc:
                    raise StreamError(f"{path}: line {lineno}: {exc}") from exc
                if one_based:
                    u, v = u - 1, v - 1
                if u < 0 or v < 0:
                    raise StreamError(f"{path}: line {lineno} has a negative node index")
                src.append(u)
                dst.append(v)
                wts.append(w)
        nodes = (max(max(src), max(dst)) + 1) if src else 0
        n = nodes if n is None else n
        if nodes > n:
            raise StreamError(f"{path}: node index {nodes - 1} outside n={n}")
        s = np.array(src + dst, dtype=np.int64)
        d = np.array(dst + src, dtype=np.int64)
        w = np.array(wts + wts, dtype=float)
        loops = s == d
        # A self-loop appears twice after symmetrisation; keep it once.
        keep = ~loops | (np.arange(s.size) < len(src))
        s, d, w = s[keep], d[keep], w[keep]
        order_idx = np.argsort(s, kind="stable")
        self._dst = d[order_idx]
        self._w = w[order_idx]
        self._ptr = np.searchsorted(s[order_idx], np.arange(n + 1))
        super().__init__(MatrixHeader(n, n), batch_rows, order, seed, origin="edge-list-file")

    def _read(self, start, stop):
        out = np.zeros((stop - start, self.header.cols))
        for i in range(start, stop):
            lo, hi = self._ptr[i], self._ptr[i + 1]
            # Duplicate edges accumulate their weights.
            np.add.at(out[i - start], self._dst[lo:hi], self._w[lo:hi])
        return out


class CenteredSource(BatchSource):
    """Wraps a source and subtracts a fixed column mean from every batch."""

    def __init__(self, inner: BatchSource, state: CenteringState):
        if state.mean.shape != (inner.header.cols,):
            raise StreamError("mean length does not match the source width")
        self.inner = inner
        self.state = state
        self.header = inner.header
        self.batch_rows = inner.batch_rows
        self.order = inner.order
        self.seed = inner.seed
        self.origin = inner.origin

    # Delegate stream bookkeeping to the wrapped source.
    @property
    def passes_completed(self):
        return self.inner.passes_completed

    @property
    def rows_delivered(self):
        return self.inner.rows_delivered

    def current_rows(self):
        return self.inner.current_rows()

    def next_batch(self):
        batch = self.inner.next_batch()
        return None if batch is None else center_batch(batch, self.state)

    def reset(self):
        self.inner.reset()

    def close(self):
        self.inner.close()


def open_source(path_or_buffer, fmt: str = "auto", batch_rows: int = 64,
                order: str = "sequential", seed: int = 0, **kw) -> BatchSource:
    """Open a batch source.

    ``fmt`` is one of ``memory``, ``binary``, ``csv``, ``edges`` or ``auto``
    (arrays map to ``memory``; paths are chosen by extension).  Extra keywords:
    ``skip_header`` for CSV, ``n`` and ``one_based`` for edge lists.
    """
    if isinstance(path_or_buffer, np.ndarray) or fmt == "memory":
        return MemorySource(path_or_buffer, batch_rows, order, seed)
    if isinstance(path_or_buffer, (io.IOBase, bytes)):
        raise StreamError("pass a filesystem path or an ndarray")
    path = os.fspath(path_or_buffer)
    if not os.path.exists(path):
        raise StreamError(f"{path}: no such file")
    if fmt == "auto":
        ext = os.path.splitext(path)[1].lower()
        fmt = {".csv": "csv", ".txt": "edges", ".edges": "edges", ".el": "edges"}.get(ext, "binary")
    if fmt == "binary":
        return BinarySource(path, batch_rows, order, seed)
    if fmt == "csv":
        return CsvSource(path, batch_rows, order, seed, skip_header=kw.get("skip_header", False))
    if fmt == "edges":
        return EdgeListSource(path, batch_rows, n=kw.get("n"), one_based=kw.get("one_based", False),
                              order=order, seed=seed)
    raise StreamError(f"unknown format {fmt!r}")


def compute_mean_pass(src: BatchSource) -> CenteringState:
    """Column means from exactly one pass over ``src``."""
    n = src.header.cols
    total = np.zeros(n)
    count = 0
    for _, batch in src.iter_pass():
        total += batch.sum(axis=0)
        count += batch.shape[0]
    if count == 0:
        raise StreamError("cannot centre an empty source")
    return CenteringState(total / count, count)


def center_batch(batch, state: CenteringState) -> np.ndarray:
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 2 or batch.shape[1] != state.mean.shape[0]:
        raise StreamError(f"batch width {batch.shape} does not match mean length {state.mean.shape[0]}")
    return batch - state.mean


def materialize(src: BatchSource) -> np.ndarray:
    """Concatenate one pass in original row order (desk-scale oracle helper)."""
    out = np.empty(src.shape)
    for start, batch in src.iter_pass():
        out[start:start + batch.shape[0]] = batch
    return out
