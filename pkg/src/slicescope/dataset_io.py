"""Loading, validating, persisting and splitting the per-sample inputs.

A :class:`DatasetBundle` holds everything the rest of the package consumes:
an ``n x d`` embedding matrix, one nonnegative loss per sample, and optional
correctness flags, ground-truth slice labels and sample identifiers.
"""

from __future__ import annotations

import csv
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

SLB_MAGIC = b"SLB1"
SLB_VERSION = 1

FLAG_CORRECT = 1 << 0
FLAG_SLICE_LABEL = 1 << 1
FLAG_IDS = 1 << 2
# Not part of the base layout: set when the numeric payload is float64 because
# the values are not exactly representable in float32.
FLAG_FLOAT64 = 1 << 3

_HEADER = struct.Struct("<4sIIII")


class DatasetError(ValueError):
    """Invalid dataset content or layout."""


class FormatError(DatasetError):
    """A binary file that does not follow the SLB1 layout."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    """Embeddings, losses and optional outcome metadata for ``n`` samples.

    Arrays are converted to float64 / bool, validated, and made read-only.
    ``ids`` stays ``None`` when absent; :attr:`sample_ids` supplies the
    ``row-<index>`` defaults.
    """

    embeddings: np.ndarray
    losses: np.ndarray
    correct: np.ndarray | None = None
    slice_label: np.ndarray | None = None
    ids: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        emb = np.array(self.embeddings, dtype=np.float64, copy=True)
        if emb.ndim == 1:
            emb = emb.reshape(-1, 1)
        if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] < 1:
            raise DatasetError(f"embeddings must be a non-empty n x d matrix, got shape {emb.shape}")
        bad = np.argwhere(~np.isfinite(emb))
        if bad.size:
            r, c = bad[0]
            raise DatasetError(f"non-finite embedding value at row {r}, column {c}")
        n = emb.shape[0]

        losses = np.array(self.losses, dtype=np.float64, copy=True).reshape(-1)
        if losses.shape[0] != n:
            raise DatasetError(f"losses has length {losses.shape[0]}, expected {n}")
        bad = np.flatnonzero(~np.isfinite(losses))
        if bad.size:
            raise DatasetError(f"non-finite loss at row {bad[0]}")
        bad = np.flatnonzero(losses < 0)
        if bad.size:
            raise DatasetError(f"negative loss {losses[bad[0]]!r} at row {bad[0]}")

        object.__setattr__(self, "embeddings", _readonly(emb))
        object.__setattr__(self, "losses", _readonly(losses))
        for name in ("correct", "slice_label"):
            value = getattr(self, name)
            if value is None:
                continue
            arr = np.array(value, copy=True)
            if arr.dtype != bool:
                if not np.all(np.isin(arr, (0, 1))):
                    raise DatasetError(f"{name} must contain only 0/1 values")
                arr = arr.astype(bool)
            arr = arr.reshape(-1)
            if arr.shape[0] != n:
                raise DatasetError(f"{name} has length {arr.shape[0]}, expected {n}")
            object.__setattr__(self, name, _readonly(arr))
        if self.ids is not None:
            ids = tuple(str(s) for s in self.ids)
            if len(ids) != n:
                raise DatasetError(f"ids has length {len(ids)}, expected {n}")
            object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    @property
    def sample_ids(self) -> tuple[str, ...]:
        if self.ids is not None:
            return self.ids
        return tuple(f"row-{i}" for i in range(self.n))

    def subset(self, indices: Sequence[int] | np.ndarray) -> DatasetBundle:
        idx = np.asarray(indices, dtype=np.intp)
        return DatasetBundle(
            embeddings=self.embeddings[idx],
            losses=self.losses[idx],
            correct=None if self.correct is None else self.correct[idx],
            slice_label=None if self.slice_label is None else self.slice_label[idx],
            ids=None if self.ids is None else tuple(self.ids[i] for i in idx),
        )

    def equals(self, other: DatasetBundle) -> bool:
        """Bit-exact equality of every field, including absence of optionals."""

        def same(a, b) -> bool:
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()

        return (
            same(self.embeddings, other.embeddings)
            and same(self.losses, other.losses)
            and same(self.correct, other.correct)
            and same(self.slice_label, other.slice_label)
            and self.ids == other.ids
        )


# ---------------------------------------------------------------- CSV


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for :func:`load_csv`.

    ``embedding`` selects the layout: a sequence of column names (wide), a
    single column name holding ``;``-delimited floats (packed), or ``None`` to
    auto-detect (a packed ``embedding`` column, else every column named like
    ``z0``, ``z1``, ... / ``emb_0`` ...). ``id``, ``correct`` and
    ``slice_label`` are optional: a column that is absent from the file leaves
    the field unset. The loss column is required.
    """

    loss: str = "loss"
    id: str | None = "id"
    correct: str | None = "correct"
    slice_label: str | None = "slice_label"
    embedding: Sequence[str] | str | None = None


_AUTO_WIDE = re.compile(r"^(?:z|e|emb|emb_|dim|dim_|x)(\d+)$")
_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DatasetError(f"non-numeric value {cell!r} at row {row}, column {column!r}") from None
    if not math.isfinite(value):
        raise DatasetError(f"non-finite value {cell!r} at row {row}, column {column!r}")
    return value


def _parse_bool(cell: str, row: int, column: str) -> bool:
    s = cell.strip().lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    raise DatasetError(f"expected a boolean (0/1) at row {row}, column {column!r}, got {cell!r}")


def load_csv(path: str | Path, schema: CsvSchema | None = None) -> DatasetBundle:
    """Read a bundle from a headed UTF-8 CSV file. Row order is preserved."""
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file, header row required") from None
        rows = list(reader)

    col = {name: i for i, name in enumerate(header)}
    if schema.loss not in col:
        raise DatasetError(f"missing loss column {schema.loss!r}")

    packed: str | None = None
    wide: list[str] = []
    if isinstance(schema.embedding, str):
        packed = schema.embedding
    elif schema.embedding is not None:
        wide = list(schema.embedding)
    elif "embedding" in col:
        packed = "embedding"
    else:
        found = [(int(m.group(1)), h) for h in header if (m := _AUTO_WIDE.match(h))]
        wide = [h for _, h in sorted(found)]
    for name in wide if packed is None else [packed]:
        if name not in col:
            raise DatasetError(f"missing embedding column {name!r}")
    if packed is None and not wide:
        raise DatasetError("no embedding columns found")

    def optional(name: str | None) -> int | None:
        return col.get(name) if name is not None else None

    id_i, cor_i, lab_i = optional(schema.id), optional(schema.correct), optional(schema.slice_label)
    loss_i = col[schema.loss]
    emb_rows: list[list[float]] = []
    losses: list[float] = []
    correct: list[bool] = []
    labels: list[bool] = []
    ids: list[str] = []
    width: int | None = None
    for r, row in enumerate(rows):
        if not row:
            continue
        if len(row) != len(header):
            raise DatasetError(f"row {r} has {len(row)} fields, header has {len(header)}")
        if packed is not None:
            cells = [c for c in row[col[packed]].split(";")]
            values = [_parse_float(c, r, packed) for c in cells if c.strip() != ""]
        else:
            values = [_parse_float(row[col[h]], r, h) for h in wide]
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise DatasetError(f"ragged embedding at row {r}: {len(values)} values, expected {width}")
        emb_rows.append(values)
        loss = _parse_float(row[loss_i], r, schema.loss)
        if loss < 0:
            raise DatasetError(f"negative loss {loss!r} at row {r}, column {schema.loss!r}")
        losses.append(loss)
        if cor_i is not None:
            correct.append(_parse_bool(row[cor_i], r, header[cor_i]))
        if lab_i is not None:
            labels.append(_parse_bool(row[lab_i], r, header[lab_i]))
        if id_i is not None:
            ids.append(row[id_i])
    if not emb_rows:
        raise DatasetError(f"{path}: no data rows")
    if width == 0:
        raise DatasetError("embedding rows are empty")
    return DatasetBundle(
        embeddings=np.array(emb_rows, dtype=np.float64),
        losses=np.array(losses, dtype=np.float64),
        correct=np.array(correct, dtype=bool) if cor_i is not None else None,
        slice_label=np.array(labels, dtype=bool) if lab_i is not None else None,
        ids=tuple(ids) if id_i is not None else None,
    )


def save_csv(bundle: DatasetBundle, path: str | Path) -> None:
    """Write a wide-layout CSV readable by :func:`load_csv` with the default schema."""
    header = ["id", "loss"]
    if bundle.correct is not None:
        header.append("correct")
    if bundle.slice_label is not None:
        header.append("slice_label")
    header += [f"z{j}" for j in range(bundle.d)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, sid in enumerate(bundle.sample_ids):
            row = [sid, repr(float(bundle.losses[i]))]
            if bundle.correct is not None:
                row.append(int(bundle.correct[i]))
            if bundle.slice_label is not None:
                row.append(int(bundle.slice_label[i]))
            row += [repr(float(v)) for v in bundle.embeddings[i]]
            w.writerow(row)


# ---------------------------------------------------------------- SLB1


def _f32_exact(a: np.ndarray) -> bool:
    with np.errstate(over="ignore"):
        return bool(np.array_equal(a.astype(np.float32).astype(np.float64), a))


def encode_binary(bundle: DatasetBundle, precision: str = "auto") -> bytes:
    """Serialize ``bundle`` in the SLB1 layout.

    ``precision`` is ``"f32"``, ``"f64"`` or ``"auto"``; auto writes float32
    whenever that is lossless and float64 otherwise, so round trips stay exact.
    """
    if precision not in ("auto", "f32", "f64"):
        raise ValueError(f"unknown precision {precision!r}")
    if precision == "auto":
        wide = not (_f32_exact(bundle.embeddings) and _f32_exact(bundle.losses))
    else:
        wide = precision == "f64"
    flags = 0
    if bundle.correct is not None:
        flags |= FLAG_CORRECT
    if bundle.slice_label is not None:
        flags |= FLAG_SLICE_LABEL
    if bundle.ids is not None:
        flags |= FLAG_IDS
    if wide:
        flags |= FLAG_FLOAT64
    dt = "<f8" if wide else "<f4"
    parts = [
        _HEADER.pack(SLB_MAGIC, SLB_VERSION, bundle.n, bundle.d, flags),
        np.ascontiguousarray(bundle.embeddings, dtype=dt).tobytes(),
        np.ascontiguousarray(bundle.losses, dtype=dt).tobytes(),
    ]
    if bundle.correct is not None:
        parts.append(bundle.correct.astype(np.uint8).tobytes())
    if bundle.slice_label is not None:
        parts.append(bundle.slice_label.astype(np.uint8).tobytes())
    if bundle.ids is not None:
        for sid in bundle.ids:
            raw = sid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise DatasetError(f"sample id longer than 65535 bytes: {sid[:40]!r}...")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
    return b"".join(parts)


def decode_binary(data: bytes) -> DatasetBundle:
    if len(data) < 4 or data[:4] != SLB_MAGIC:
        raise FormatError("unrecognized format (bad magic bytes)")
    if len(data) < _HEADER.size:
        raise FormatError("truncated payload: incomplete header")
    _, version, n, d, flags = _HEADER.unpack_from(data)
    if version != SLB_VERSION:
        raise FormatError(f"unsupported SLB version {version}")
    if flags & ~(FLAG_CORRECT | FLAG_SLICE_LABEL | FLAG_IDS | FLAG_FLOAT64):
        raise FormatError(f"unknown flag bits 0x{flags:x}")
    width = 8 if flags & FLAG_FLOAT64 else 4
    dt = "<f8" if width == 8 else "<f4"
    pos = _HEADER.size

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > len(data):
            raise FormatError(
                f"truncated payload: {what} needs {nbytes} bytes at offset {pos}, "
                f"file has {len(data) - pos} remaining (header declares n={n}, d={d})"
            )
        chunk = data[pos : pos + nbytes]
        pos += nbytes
        return chunk

    emb = np.frombuffer(take(n * d * width, "embeddings"), dtype=dt).reshape(n, d)
    losses = np.frombuffer(take(n * width, "losses"), dtype=dt)
    correct = labels = ids = None
    if flags & FLAG_CORRECT:
        correct = np.frombuffer(take(n, "correctness"), dtype=np.uint8)
    if flags & FLAG_SLICE_LABEL:
        labels = np.frombuffer(take(n, "slice labels"), dtype=np.uint8)
    if flags & FLAG_IDS:
        ids = []
        for _ in range(n):
            (length,) = struct.unpack("<H", take(2, "id length"))
            ids.append(take(length, "id bytes").decode("utf-8"))
    if pos != len(data):
        raise FormatError(f"header/payload length mismatch: {len(data) - pos} trailing bytes")
    return DatasetBundle(
        embeddings=emb.astype(np.float64),
        losses=losses.astype(np.float64),
        correct=correct,
        slice_label=labels,
        ids=tuple(ids) if ids is not None else None,
    )


def save_binary(bundle: DatasetBundle, path: str | Path, precision: str = "auto") -> None:
    Path(path).write_bytes(encode_binary(bundle, precision))


def load_binary(path: str | Path) -> DatasetBundle:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"no such file: {path}")
    return decode_binary(path.read_bytes())


def load_dataset(path: str | Path, schema: CsvSchema | None = None) -> DatasetBundle:
    """Load an SLB1 or CSV file, sniffing the magic bytes."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"no such file: {path}")
    with path.open("rb") as fh:
        head = fh.read(4)
    if head == SLB_MAGIC:
        return load_binary(path)
    if path.suffix.lower() in (".slb", ".bin"):
        raise FormatError("unrecognized format (bad magic bytes)")
    return load_csv(path, schema)


# ---------------------------------------------------------------- split


def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Part sizes: floor(fraction * n), then the remainder handed out one at a
    time, empty parts first and otherwise in order from the first part."""
    fr = [float(f) for f in fractions]
    if not fr or any(f <= 0 for f in fr):
        raise DatasetError("fractions must be positive")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must sum to 1, got {sum(fr)!r}")
    sizes = [int(math.floor(f * n + 1e-9)) for f in fr]
    remainder = n - sum(sizes)
    order = [i for i, s in enumerate(sizes) if s == 0] + [i for i, s in enumerate(sizes) if s > 0]
    for j in range(remainder):
        sizes[order[j % len(order)]] += 1
    if any(s == 0 for s in sizes):
        raise DatasetError(f"fractions {fr} produce an empty part for n={n}")
    return sizes


def split_indices(n: int, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    sizes = split_sizes(n, fractions)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum([0] + sizes)
    return [np.sort(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def split(bundle: DatasetBundle, fractions: Sequence[float], seed: int) -> list[DatasetBundle]:
    """Seeded random partition of ``bundle`` into parts of the given fractions.

    Rows keep their original relative order inside each part.
    """
    return [bundle.subset(idx) for idx in split_indices(bundle.n, fractions, seed)]
