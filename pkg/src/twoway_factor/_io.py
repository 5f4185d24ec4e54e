# SPDX-License-Identifier: MIT
#
# File formats: CSV matrices and tables, versioned JSON documents
#

import csv
import hashlib
import json
import os
import typing as T

import numpy as np

from .config import ParamsDocument, load
from .errors import InputError
from .model import Dims, ModelParams

SCHEMA_VERSION = 1

PathLike = T.Union[str, "os.PathLike[str]"]


def format_float(x) -> str:
    """Shortest text that reads back to the same 64-bit float"""
    return repr(float(x))


def read_matrix_csv(path: PathLike, header: bool = False) -> np.ndarray:
    rows = []
    width = None
    with open(path, newline="") as fp:
        reader = csv.reader(fp)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise InputError(
                    f"{path}: row {lineno} has {len(row)} columns, expected {width}"
                )
            values = []
            for col, cell in enumerate(row, start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise InputError(
                        f"{path}: row {lineno}, column {col}: {cell!r} is not a number"
                    ) from None
            rows.append(values)
    if not rows:
        raise InputError(f"{path}: no data rows")
    X = np.array(rows, dtype=float)
    bad = np.argwhere(~np.isfinite(X))
    if bad.size:
        i, j = bad[0]
        raise InputError(f"{path}: non-finite value at data row {i + 1}, column {j + 1}")
    return X


def write_matrix_csv(path: PathLike, M: np.ndarray) -> None:
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        for row in np.atleast_2d(M):
            writer.writerow([format_float(v) for v in row])


def write_table_csv(
    path: PathLike, header: T.Sequence[str], rows: T.Iterable[T.Sequence[T.Any]]
) -> None:
    def cell(v):
        if isinstance(v, (bool, np.bool_)):
            return "true" if v else "false"
        if isinstance(v, (float, np.floating)):
            return format_float(v)
        return str(v)

    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([cell(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dump_json(path: PathLike, document: T.Dict[str, T.Any]) -> None:
    body = {"schema_version": SCHEMA_VERSION}
    body.update(document)
    with open(path, "w") as fp:
        json.dump(body, fp, indent=2, sort_keys=True, default=_jsonable)
        fp.write("\n")


def load_json(path: PathLike) -> T.Dict[str, T.Any]:
    try:
        with open(path) as fp:
            data = json.load(fp)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise InputError(f"{path}: expected a JSON object")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise InputError(
            f"{path}: schema_version {version} is not supported (expected {SCHEMA_VERSION})"
        )
    return data


def params_to_dict(params: ModelParams) -> T.Dict[str, T.Any]:
    d = params.dims
    return {
        "schema_version": SCHEMA_VERSION,
        "p": d.p,
        "q": d.q,
        "r": d.r,
        "c": d.c,
        "L": params.L.tolist(),
        "Lambda": params.Lambda.tolist(),
        "psiF": params.psiF.tolist(),
        "psiE": params.psiE.tolist(),
        "sigma2": params.sigma2,
    }


def params_from_dict(data: T.Dict[str, T.Any]) -> ModelParams:
    doc = load(data, ParamsDocument, "parameter document")
    try:
        L = np.array(doc.L, dtype=float)
        Lambda = np.array(doc.Lambda, dtype=float)
    except ValueError as e:
        raise InputError(f"ragged loading matrix in parameter document: {e}") from e
    return ModelParams(
        dims=Dims(doc.p, doc.q, doc.r, doc.c),
        L=L,
        Lambda=Lambda,
        psiF=doc.psiF,
        psiE=doc.psiE,
        sigma2=doc.sigma2,
    )


def file_digest(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fp:
        for chunk in iter(lambda: fp.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()

