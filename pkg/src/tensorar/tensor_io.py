"""On-disk formats: tensor series files, model files and CSV panels.

A series file starts with the header line ``TSR1 d=<d> dims=<p1,...> T=<T>``.
The text body has one line per observation holding its entries in canonical
vec order (first index fastest) at shortest round-trip precision. With the
extra header token ``encoding=f64le`` the body is raw little-endian float64.
A single tensor is stored as a series of length one.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from .models import (
    LrtarModel,
    SeriesFormatError,
    SeriesHeader,
    TensorSeries,
    TuckerDecomposition,
)
from .tensor_core import unvec, unvec_rows, vec

logger = logging.getLogger(__name__)

MAGIC = "TSR1"
BINARY_ENCODING = "f64le"


def format_header(header: SeriesHeader) -> str:
    dims = ",".join(str(p) for p in header.dims)
    line = f"{MAGIC} d={header.d} dims={dims} T={header.T}"
    if header.binary:
        line += f" encoding={BINARY_ENCODING}"
    return line


def parse_header(line: str) -> SeriesHeader:
    """
    Parse a series header line.

    Raises:
        SeriesFormatError: If the line is not a valid header
    """
    tokens = line.strip().split()
    if not tokens or tokens[0] != MAGIC:
        raise SeriesFormatError(f"not a tensor series file (expected {MAGIC!r} header)")
    fields: dict[str, str] = {}
    for token in tokens[1:]:
        key, sep, value = token.partition("=")
        if not sep or key in fields:
            raise SeriesFormatError(f"malformed header token {token!r}")
        fields[key] = value
    if set(fields) - {"d", "dims", "T", "encoding"} or not {"d", "dims", "T"} <= set(fields):
        raise SeriesFormatError(f"header needs d, dims and T, got {sorted(fields)}")
    encoding = fields.get("encoding")
    if encoding not in (None, BINARY_ENCODING):
        raise SeriesFormatError(f"unsupported encoding {encoding!r}")
    try:
        dims = tuple(int(p) for p in fields["dims"].split(","))
        header = SeriesHeader(dims=dims, T=int(fields["T"]), binary=encoding is not None)
        d = int(fields["d"])
    except (ValueError, ValidationError) as e:
        raise SeriesFormatError(f"invalid header {line.strip()!r}: {e}") from e
    if d != header.d:
        raise SeriesFormatError(f"header d={d} does not match dims {dims}")
    return header


def write_series(path: Path | str, series: TensorSeries, binary: bool = False) -> None:
    """Write a series; the output is a pure function of the data."""
    path = Path(path)
    header = SeriesHeader(dims=series.dims, T=series.length, binary=binary)
    rows = series.vectors()
    if binary:
        payload = format_header(header).encode("utf-8") + b"\n"
        payload += rows.astype("<f8").tobytes()
        path.write_bytes(payload)
    else:
        lines = [format_header(header)]
        lines.extend(" ".join(repr(x) for x in row.tolist()) for row in rows)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug(f"Wrote series dims={series.dims} T={series.length} to {path}")


def read_series(path: Path | str) -> TensorSeries:
    """
    Read a series file in either encoding.

    Raises:
        SeriesFormatError: If the file is malformed
        OSError: If the file cannot be read
    """
    raw = Path(path).read_bytes()
    first, _, body = raw.partition(b"\n")
    try:
        header = parse_header(first.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise SeriesFormatError(f"header of {path} is not UTF-8") from e
    size = header.record_size

    if header.binary:
        if len(body) != 8 * size * header.T:
            raise SeriesFormatError(
                f"expected {size * header.T} float64 values, found {len(body) / 8:g}"
            )
        rows = np.frombuffer(body, dtype="<f8").reshape(header.T, size).astype(float)
    else:
        lines = [line for line in body.decode("utf-8").splitlines() if line.strip()]
        if len(lines) != header.T:
            raise SeriesFormatError(f"expected {header.T} records, found {len(lines)}")
        rows = np.empty((header.T, size))
        for t, line in enumerate(lines):
            tokens = line.split()
            if len(tokens) != size:
                raise SeriesFormatError(
                    f"record {t + 1} has {len(tokens)} values, expected {size}"
                )
            try:
                rows[t] = [float(token) for token in tokens]
            except ValueError as e:
                raise SeriesFormatError(f"record {t + 1}: {e}") from e
    return TensorSeries(observations=unvec_rows(rows, header.dims))


def write_tensor(path: Path | str, tensor: np.ndarray, binary: bool = False) -> None:
    """Store one tensor as a series of length one."""
    write_series(path, TensorSeries(observations=np.asarray(tensor, dtype=float)[None]), binary)


def read_tensor(path: Path | str) -> np.ndarray:
    """
    Read a tensor written by :func:`write_tensor`.

    Raises:
        SeriesFormatError: If the file holds more than one record
    """
    series = read_series(path)
    if series.length != 1:
        raise SeriesFormatError(f"expected a single tensor, found T={series.length}")
    return np.array(series.observations[0])


def model_to_dict(model: LrtarModel) -> dict[str, Any]:
    """JSON-ready form of a model; tensors are flattened in vec order."""
    data: dict[str, Any] = {
        "dims": list(model.dims),
        "transition": vec(model.transition).tolist(),
        "noise_cov": model.noise_cov.tolist(),
        "tucker": None,
    }
    if model.tucker is not None:
        data["tucker"] = {
            "ranks": list(model.tucker.ranks),
            "core": vec(model.tucker.core).tolist(),
            "factors": [u.tolist() for u in model.tucker.factors],
        }
    return data


def model_from_dict(data: dict[str, Any]) -> LrtarModel:
    """
    Inverse of :func:`model_to_dict`.

    Raises:
        SeriesFormatError: If fields are missing or inconsistent
    """
    try:
        dims = tuple(int(p) for p in data["dims"])
        tucker = None
        if data.get("tucker") is not None:
            spec = data["tucker"]
            tucker = TuckerDecomposition(
                core=unvec(spec["core"], spec["ranks"]),
                factors=tuple(np.asarray(u, dtype=float) for u in spec["factors"]),
            )
        return LrtarModel(
            transition=unvec(data["transition"], dims + dims),
            noise_cov=np.asarray(data["noise_cov"], dtype=float),
            tucker=tucker,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise SeriesFormatError(f"invalid model file: {e}") from e


def write_model(path: Path | str, model: LrtarModel) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n", encoding="utf-8")


def read_model(path: Path | str) -> LrtarModel:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SeriesFormatError(f"model file {path} is not valid JSON: {e}") from e
    return model_from_dict(data)


def read_csv_series(
    path: Path | str,
    dims: Sequence[int],
    header: bool = False,
    demean: bool = False,
) -> TensorSeries:
    """
    Load a panel with one row per time point and prod(dims) columns.

    Column j holds the tensor entry at canonical vec position j.

    Args:
        path: CSV file
        dims: Observation dimensions
        header: Whether the first row holds column names
        demean: Subtract each column's sample mean

    Raises:
        SeriesFormatError: If the column count or values do not fit
    """
    frame = pd.read_csv(path, header=0 if header else None)
    size = math.prod(dims)
    if frame.shape[1] != size:
        raise SeriesFormatError(
            f"CSV has {frame.shape[1]} columns but dims {tuple(dims)} need {size}"
        )
    try:
        rows = frame.to_numpy(dtype=float)
    except ValueError as e:
        raise SeriesFormatError(f"non-numeric CSV values: {e}") from e
    if rows.shape[0] < 1:
        raise SeriesFormatError("CSV has no data rows")
    if demean:
        rows = rows - rows.mean(axis=0)
    logger.info(f"Loaded {rows.shape[0]} observations of dims {tuple(dims)} from {path}")
    return TensorSeries(observations=unvec_rows(rows, dims))


def write_csv_series(path: Path | str, series: TensorSeries) -> None:
    """Write one row per observation in vec order, without a header."""
    pd.DataFrame(series.vectors()).to_csv(path, header=False, index=False)
