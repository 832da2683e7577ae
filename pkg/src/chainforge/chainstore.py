"""Chunked columnar store for nested-sampling chains.

A store is a directory::

    run.store/
        manifest.json   # metadata, written last on every mutation
        col_0.f64       # "weight"   raw little-endian binary64, no header
        col_1.f64       # "loglike"
        col_2.f64       # first parameter column, and so on

Every column file is exactly ``8 * n_rows`` bytes. Chunking is logical: a
chunk is rows ``[i * chunk_rows, (i + 1) * chunk_rows)`` of each column, read
with plain offset arithmetic, so any chunk of any column can be loaded
without touching the rest of the file. Reading holds O(chunk_rows) memory.

The two fixed columns are ``weight`` (posterior weight, stored verbatim) and
``loglike`` (ln-likelihood; plain-text chains carry -2 lnL, converted on
ingestion). Column names may contain arbitrary characters, e.g.
``log(m_{\\chi})``; on-disk filenames are index-based and never derived from
the name.

Stores are immutable after creation except for appending derived columns,
which stages the new column file, publishes it with an atomic rename, and
rewrites the manifest last -- a reader sees either the old store or the new
one, never a broken in-between. An advisory ``.lock`` file keeps writers
mutually exclusive; readers never lock.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
import weakref
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ChainTextError, StoreError
from .util import RunningSum

MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".lock"
FORMAT_VERSION = 1
DEFAULT_CHUNK_ROWS = 1_000_000  # ~8 MB per column chunk

WEIGHT_COLUMN = "weight"
LOGLIKE_COLUMN = "loglike"

# Text lines are parsed in batches; bounded by chunk_rows but capped so a
# huge chunk_rows cannot drag the whole file into memory at parse time.
_PARSE_BATCH_ROWS = 131_072


def _column_filename(index: int) -> str:
    return f"col_{index}.f64"


@dataclass(frozen=True)
class ColumnMeta:
    """One column of a store; `file` is index-based, never name-derived."""

    name: str
    file: str
    derived: bool = False
    source_expr: str | None = None


@dataclass(frozen=True)
class StoreInfo:
    """Summary returned by ChainStore.info()."""

    n_rows: int
    chunk_rows: int
    columns: tuple[ColumnMeta, ...]
    total_weight: float
    max_loglike: float


class ChainStore:
    """Metadata handle for an on-disk store.

    The handle caches open file objects for the columns it has read; it is
    cheap to construct and holds no bulk data. Metadata is a snapshot taken
    at open time; mutating operations revalidate against the manifest on
    disk under the writer lock.
    """

    def __init__(self, root: Path, n_rows: int, chunk_rows: int,
                 columns: Sequence[ColumnMeta],
                 format_version: int = FORMAT_VERSION):
        self._root = Path(root)
        self.n_rows = int(n_rows)
        self.chunk_rows = int(chunk_rows)
        self.columns = tuple(columns)
        self.format_version = int(format_version)
        self._by_name = {c.name: c for c in self.columns}
        self._handles: dict[str, object] = {}

    # -- metadata ---------------------------------------------------------

    @property
    def root(self) -> Path:
        return self._root

    @property
    def n_chunks(self) -> int:
        return math.ceil(self.n_rows / self.chunk_rows)

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def has_column(self, name: str) -> bool:
        return name in self._by_name

    def column(self, name: str) -> ColumnMeta:
        try:
            return self._by_name[name]
        except KeyError:
            raise StoreError(f"{self._root}: unknown column {name!r}") from None

    def column_path(self, name: str) -> Path:
        return self._root / self.column(name).file

    def with_chunk_rows(self, chunk_rows: int) -> "ChainStore":
        """Same store, different logical chunk size for reads."""
        if chunk_rows < 1:
            raise StoreError(f"chunk_rows must be >= 1, got {chunk_rows}")
        return ChainStore(self._root, self.n_rows, chunk_rows, self.columns,
                          self.format_version)

    def __repr__(self) -> str:
        return (f"ChainStore({str(self._root)!r}, n_rows={self.n_rows}, "
                f"chunk_rows={self.chunk_rows}, columns={len(self.columns)})")

    # -- reading ----------------------------------------------------------

    def _handle(self, meta: ColumnMeta):
        fh = self._handles.get(meta.name)
        if fh is None:
            fh = open(self._root / meta.file, "rb")
            self._handles[meta.name] = fh
        return fh

    def read_column_chunk(self, column: str, chunk_index: int) -> np.ndarray:
        """Rows ``[chunk_index * chunk_rows, ...)`` of one column.

        The last chunk may be short. The returned array is a read-only view
        over the bytes read; copy it if you need to mutate.
        """
        meta = self.column(column)
        n_chunks = self.n_chunks
        if not 0 <= chunk_index < n_chunks:
            raise StoreError(
                f"{self._root}: chunk {chunk_index} out of range for column "
                f"{column!r} ({n_chunks} chunks)")
        start = chunk_index * self.chunk_rows
        length = min(self.chunk_rows, self.n_rows - start)
        fh = self._handle(meta)
        fh.seek(8 * start)
        buf = fh.read(8 * length)
        if len(buf) != 8 * length:
            raise StoreError(
                f"{self._root}: column {column!r}: short read at chunk "
                f"{chunk_index} (file truncated?)")
        return np.frombuffer(buf, dtype="<f8")

    def close(self) -> None:
        for fh in self._handles.values():
            fh.close()
        self._handles.clear()

    def __enter__(self) -> "ChainStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- summary ----------------------------------------------------------

    def info(self) -> StoreInfo:
        """Streamed summary: total weight and global max ln-likelihood."""
        total = RunningSum()
        max_lnl = -math.inf
        for ci in range(self.n_chunks):
            total.add(self.read_column_chunk(WEIGHT_COLUMN, ci))
            max_lnl = max(max_lnl, float(self.read_column_chunk(LOGLIKE_COLUMN, ci).max()))
        return StoreInfo(self.n_rows, self.chunk_rows, self.columns,
                         total.value, max_lnl)

    # -- mutation ---------------------------------------------------------

    def append_derived_column(self, name: str, chunks: Iterable[np.ndarray],
                              source_expr: str | None = None) -> "ChainStore":
        """Append one derived column, streamed from `chunks`.

        The column file is staged and atomically renamed into place before
        the manifest is rewritten, so a crash anywhere leaves the old store
        intact. Total chunk length must equal n_rows; on any failure the
        store and manifest are untouched. Returns a fresh handle that sees
        the new column.
        """
        if not name:
            raise StoreError("derived column name must be non-empty")
        with _writer_lock(self._root):
            # Revalidate against the manifest on disk: this handle may be a
            # stale snapshot if another append happened since it was opened.
            current = open_store(self._root)
            if current.has_column(name):
                raise StoreError(f"{self._root}: column {name!r} already exists")
            index = len(current.columns)
            meta = ColumnMeta(name=name, file=_column_filename(index),
                              derived=True, source_expr=source_expr)
            tmp = self._root / (meta.file + ".tmp")
            written = 0
            try:
                with open(tmp, "wb") as out:
                    for chunk in chunks:
                        arr = np.asarray(chunk, dtype=np.float64)
                        if arr.ndim != 1:
                            raise StoreError(
                                f"derived column {name!r}: chunks must be 1-D")
                        bad = ~np.isfinite(arr)
                        if bad.any():
                            row = written + int(np.argmax(bad))
                            raise StoreError(
                                f"derived column {name!r}: non-finite value "
                                f"at row {row}")
                        written += arr.size
                        if written > current.n_rows:
                            raise StoreError(
                                f"derived column {name!r}: more than "
                                f"{current.n_rows} rows supplied")
                        out.write(arr.astype("<f8", copy=False).tobytes())
                if written != current.n_rows:
                    raise StoreError(
                        f"derived column {name!r}: got {written} rows, store "
                        f"has {current.n_rows}")
                os.replace(tmp, self._root / meta.file)
            finally:
                tmp.unlink(missing_ok=True)
            columns = current.columns + (meta,)
            _write_manifest(self._root, current.n_rows, current.chunk_rows,
                            columns)
        return ChainStore(self._root, current.n_rows, current.chunk_rows,
                          columns)


class CountingReader:
    """Store wrapper that counts chunk buffers alive at once, per column.

    Checks the bounded-memory contract of streaming operations: at most two
    chunk buffers per column may exist simultaneously (the current one plus
    the previous one awaiting collection). Buffers are tracked with weakref
    finalizers, so CPython's refcounting makes the counts exact.
    """

    def __init__(self, store: ChainStore):
        self._store = store
        self.live: dict[str, int] = {}
        self.peak: dict[str, int] = {}

    @property
    def n_rows(self) -> int:
        return self._store.n_rows

    @property
    def chunk_rows(self) -> int:
        return self._store.chunk_rows

    @property
    def n_chunks(self) -> int:
        return self._store.n_chunks

    @property
    def columns(self):
        return self._store.columns

    @property
    def column_names(self):
        return self._store.column_names

    def has_column(self, name: str) -> bool:
        return self._store.has_column(name)

    def with_chunk_rows(self, chunk_rows: int) -> "CountingReader":
        return CountingReader(self._store.with_chunk_rows(chunk_rows))

    def max_resident(self) -> int:
        return max(self.peak.values(), default=0)

    def read_column_chunk(self, column: str, chunk_index: int) -> np.ndarray:
        arr = self._store.read_column_chunk(column, chunk_index)
        self.live[column] = self.live.get(column, 0) + 1
        self.peak[column] = max(self.peak.get(column, 0), self.live[column])
        weakref.finalize(arr, self._released, column)
        return arr

    def _released(self, column: str) -> None:
        self.live[column] -= 1


# -- manifest ---------------------------------------------------------------


def _manifest_dict(n_rows: int, chunk_rows: int,
                   columns: Sequence[ColumnMeta]) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "n_rows": n_rows,
        "chunk_rows": chunk_rows,
        "columns": [
            {"name": c.name, "file": c.file, "derived": c.derived,
             "source_expr": c.source_expr}
            for c in columns
        ],
    }


def _write_manifest(root: Path, n_rows: int, chunk_rows: int,
                    columns: Sequence[ColumnMeta]) -> None:
    payload = json.dumps(_manifest_dict(n_rows, chunk_rows, columns), indent=2)
    tmp = root / (MANIFEST_NAME + ".tmp")
    tmp.write_text(payload + "\n", encoding="utf-8")
    os.replace(tmp, root / MANIFEST_NAME)


def open_store(path) -> ChainStore:
    """Open an existing store; reads and validates metadata only."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise StoreError(f"{root}: not a chainforge store (no {MANIFEST_NAME})")
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StoreError(f"{root}: corrupt manifest: {exc}") from exc

    try:
        version = int(raw["format_version"])
        n_rows = int(raw["n_rows"])
        chunk_rows = int(raw["chunk_rows"])
        columns = tuple(
            ColumnMeta(name=str(c["name"]), file=str(c["file"]),
                       derived=bool(c["derived"]),
                       source_expr=None if c["source_expr"] is None
                       else str(c["source_expr"]))
            for c in raw["columns"])
    except (KeyError, TypeError, ValueError) as exc:
        raise StoreError(f"{root}: corrupt manifest: {exc!r}") from exc

    if version != FORMAT_VERSION:
        raise StoreError(f"{root}: unsupported format_version {version}")
    if n_rows < 1 or chunk_rows < 1:
        raise StoreError(f"{root}: corrupt manifest: n_rows and chunk_rows "
                         f"must be >= 1")
    names = [c.name for c in columns]
    files = [c.file for c in columns]
    if len(set(names)) != len(names):
        raise StoreError(f"{root}: corrupt manifest: duplicate column names")
    if len(set(files)) != len(files):
        raise StoreError(f"{root}: corrupt manifest: duplicate column files")
    for required in (WEIGHT_COLUMN, LOGLIKE_COLUMN):
        if required not in names:
            raise StoreError(f"{root}: corrupt manifest: missing required "
                             f"column {required!r}")
    for c in columns:
        colpath = root / c.file
        if not colpath.is_file():
            raise StoreError(f"{root}: column {c.name!r}: missing file {c.file}")
        size = colpath.stat().st_size
        if size != 8 * n_rows:
            raise StoreError(
                f"{root}: column {c.name!r}: file {c.file} is {size} bytes, "
                f"expected {8 * n_rows} for {n_rows} rows")
    return ChainStore(root, n_rows, chunk_rows, columns, version)


def is_store(path) -> bool:
    return (Path(path) / MANIFEST_NAME).is_file()


@contextmanager
def _writer_lock(root: Path):
    lock = root / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StoreError(f"{root}: another writer holds the lock "
                         f"({LOCK_NAME} exists)") from None
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


# -- creation -----------------------------------------------------------------


class StoreWriter:
    """Create a new store by streaming blocks of rows.

    Data is staged in a temporary sibling directory and published with a
    single rename in finalize(), so an interrupted build never leaves a
    half-written store at the target path.

    Column order is fixed at construction; `weight` and `loglike` must be
    among the names. Use as a context manager or call abort() on failure.
    """

    def __init__(self, out_path, column_names: Sequence[str],
                 chunk_rows: int = DEFAULT_CHUNK_ROWS,
                 overwrite: bool = False,
                 source_exprs: dict[str, str] | None = None):
        out = Path(out_path)
        if chunk_rows < 1:
            raise StoreError(f"chunk_rows must be >= 1, got {chunk_rows}")
        names = list(column_names)
        if len(set(names)) != len(names):
            raise StoreError(f"duplicate column names: {names}")
        for required in (WEIGHT_COLUMN, LOGLIKE_COLUMN):
            if required not in names:
                raise StoreError(f"store must have a {required!r} column")
        if any(not n for n in names):
            raise StoreError("column names must be non-empty")
        _check_target(out, overwrite)

        self._out = out
        self._overwrite = overwrite
        self._chunk_rows = int(chunk_rows)
        source_exprs = source_exprs or {}
        self._columns = tuple(
            ColumnMeta(name=n, file=_column_filename(i),
                       derived=n in source_exprs,
                       source_expr=source_exprs.get(n))
            for i, n in enumerate(names))
        self._n_rows = 0
        out.parent.mkdir(parents=True, exist_ok=True)
        # Staged next to the target so the final publish is a same-filesystem
        # rename.
        self._stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-",
                                            dir=out.parent))
        self._files = [open(self._stage / c.file, "wb") for c in self._columns]

    def append_rows(self, block: np.ndarray) -> None:
        """Append a (k, n_columns) block; column j goes to the j-th file."""
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2 or block.shape[1] != len(self._columns):
            raise StoreError(
                f"expected block of shape (k, {len(self._columns)}), "
                f"got {block.shape}")
        for j, fh in enumerate(self._files):
            fh.write(np.ascontiguousarray(block[:, j]).astype(
                "<f8", copy=False).tobytes())
        self._n_rows += block.shape[0]

    def append_columns(self, arrays: Sequence[np.ndarray]) -> None:
        """Append one equal-length 1-D array per column."""
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        if len(arrays) != len(self._columns):
            raise StoreError(f"expected {len(self._columns)} arrays, "
                             f"got {len(arrays)}")
        k = arrays[0].size
        if any(a.ndim != 1 or a.size != k for a in arrays):
            raise StoreError("per-column arrays must be 1-D and equal length")
        for fh, arr in zip(self._files, arrays):
            fh.write(arr.astype("<f8", copy=False).tobytes())
        self._n_rows += k

    @property
    def rows_written(self) -> int:
        return self._n_rows

    def finalize(self) -> ChainStore:
        for fh in self._files:
            fh.close()
        self._files = []
        if self._n_rows == 0:
            self.abort()
            raise StoreError(f"{self._out}: refusing to create an empty store")
        _write_manifest(self._stage, self._n_rows, self._chunk_rows,
                        self._columns)
        _check_target(self._out, self._overwrite)
        if self._out.exists():
            shutil.rmtree(self._out)
        os.rename(self._stage, self._out)
        return ChainStore(self._out, self._n_rows, self._chunk_rows,
                          self._columns)

    def abort(self) -> None:
        for fh in self._files:
            fh.close()
        self._files = []
        shutil.rmtree(self._stage, ignore_errors=True)

    def __enter__(self) -> "StoreWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            self.abort()


def _check_target(out: Path, overwrite: bool) -> None:
    if not out.exists():
        return
    if not is_store(out):
        raise StoreError(f"{out}: exists and is not a chainforge store; "
                         f"refusing to replace it")
    if not overwrite:
        raise StoreError(f"{out}: store already exists (pass overwrite to "
                         f"replace it)")


def create_store(out_path, columns: dict[str, np.ndarray],
                 chunk_rows: int = DEFAULT_CHUNK_ROWS,
                 overwrite: bool = False) -> ChainStore:
    """Build a store from in-memory arrays (mostly for tests and synthesis)."""
    with StoreWriter(out_path, list(columns), chunk_rows,
                     overwrite=overwrite) as writer:
        writer.append_columns(list(columns.values()))
        return writer.finalize()


# -- text conversion ----------------------------------------------------------


def convert_chain(text_path, param_names: Sequence[str], out_path,
                  chunk_rows: int = DEFAULT_CHUNK_ROWS,
                  overwrite: bool = False) -> ChainStore:
    """Convert a plain-text chain into a store.

    Each non-blank line must hold ``2 + len(param_names)`` whitespace-
    separated decimal floats: posterior weight, -2 lnL, then the parameter
    values. The weight is stored verbatim, the second field is stored as
    ``loglike = -0.5 * value``, parameters are copied bit-exactly. Lines are
    parsed in bounded batches; the file is never loaded whole.

    Raises ChainTextError naming the offending line for any malformed,
    non-numeric, or non-finite field.
    """
    text_path = Path(text_path)
    params = list(param_names)
    if any(not p for p in params):
        raise StoreError("parameter names must be non-empty")
    names = [WEIGHT_COLUMN, LOGLIKE_COLUMN, *params]
    if len(set(names)) != len(names):
        raise StoreError(f"duplicate or reserved parameter names in {params}")

    expected = 2 + len(params)
    batch_cap = min(int(chunk_rows), _PARSE_BATCH_ROWS)

    with StoreWriter(out_path, names, chunk_rows, overwrite=overwrite) as writer:
        rows: list[list[float]] = []
        linenos: list[int] = []

        def flush() -> None:
            block = np.array(rows, dtype=np.float64)
            bad = ~np.isfinite(block)
            if bad.any():
                i, j = np.unravel_index(int(np.argmax(bad)), bad.shape)
                raise ChainTextError(
                    f"{text_path}: line {linenos[i]}: non-finite value in "
                    f"field {j + 1}")
            block[:, 1] *= -0.5
            writer.append_rows(block)
            rows.clear()
            linenos.clear()

        with open(text_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != expected:
                    raise ChainTextError(
                        f"{text_path}: line {lineno}: expected {expected} "
                        f"fields, got {len(parts)}")
                try:
                    rows.append([float(p) for p in parts])
                except ValueError:
                    raise ChainTextError(
                        f"{text_path}: line {lineno}: non-numeric field"
                    ) from None
                linenos.append(lineno)
                if len(rows) >= batch_cap:
                    flush()
        if rows:
            flush()
        if writer.rows_written == 0:
            raise ChainTextError(f"{text_path}: no data lines")
        return writer.finalize()
