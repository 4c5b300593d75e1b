"""Data and model file formats: CSV datasets, partition tables, binary model files, PCA."""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .gmm import CovarianceType, GmmParams, InvalidInputError
from .one_shot import ClientModel
from .partition import LabeledDataset, Partition, minmax_normalize

MODEL_MAGIC = b"FGMM"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sHBBII")  # magic, version, cov_type, reserved, d, K
_COV_CODES = {CovarianceType.DIAGONAL: 0, CovarianceType.FULL: 1}


class IngestionError(ValueError):
    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        where = "".join([f" row {row}" if row is not None else "", f" column {column!r}" if column else ""])
        super().__init__(f"{message}{' at' + where if where else ''}")
        self.row = row
        self.column = column


def load_csv(
    path, label_column: Optional[str] = None, normalize: bool = True, ignore_columns=()
) -> LabeledDataset:
    """Read a headed numeric CSV and min-max normalise every feature column.

    Label values are mapped to class ids ``0..M-1`` in sorted order; without a
    label column every row is class 0. Columns in ``ignore_columns`` are
    skipped. Row numbers in errors are 1-based file lines.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise IngestionError("empty file")
        if label_column is not None and label_column not in header:
            raise IngestionError(f"label column {label_column!r} not in header")
        label_pos = header.index(label_column) if label_column is not None else None
        feature_pos = [i for i in range(len(header)) if i != label_pos and header[i] not in ignore_columns]
        if not feature_pos:
            raise IngestionError("no feature columns")
        rows, raw_labels = [], []
        for line_no, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise IngestionError(f"expected {len(header)} fields, found {len(record)}", row=line_no)
            values = []
            for i in feature_pos:
                try:
                    values.append(float(record[i]))
                except ValueError:
                    raise IngestionError(f"non-numeric value {record[i]!r}", line_no, header[i]) from None
            rows.append(values)
            raw_labels.append(record[label_pos] if label_pos is not None else "0")
    if not rows:
        raise IngestionError("no data rows")
    x = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(x)):
        bad_row, bad_col = np.argwhere(~np.isfinite(x))[0]
        raise IngestionError("non-finite value", int(bad_row) + 2, header[feature_pos[bad_col]])
    if normalize:
        x, _, _ = minmax_normalize(x)
    labels = _encode_labels(raw_labels)
    return LabeledDataset(x, labels)


def _encode_labels(raw: list[str]) -> np.ndarray:
    try:
        numeric = np.asarray([float(v) for v in raw])
        _, codes = np.unique(numeric, return_inverse=True)
    except ValueError:
        _, codes = np.unique(np.asarray(raw), return_inverse=True)
    return codes.astype(int)


def write_csv(path, rows: np.ndarray, labels: Optional[np.ndarray] = None, label_column: str = "label") -> None:
    x = np.asarray(rows, dtype=float)
    header = [f"f{j}" for j in range(x.shape[1])]
    if labels is not None:
        header.append(label_column)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, row in enumerate(x):
            out = [repr(float(v)) for v in row]
            if labels is not None:
                out.append(str(int(labels[i])))
            writer.writerow(out)


def write_partition(path, partition: Partition, labels: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row_index", "client_id", "label"])
        writer.writerows(partition.to_records(labels))


def read_partition(path) -> Partition:
    buckets: dict[int, list[int]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            buckets.setdefault(int(rec["client_id"]), []).append(int(rec["row_index"]))
    n_clients = max(buckets) + 1 if buckets else 0
    return Partition(tuple(np.sort(np.asarray(buckets.get(c, []), dtype=int)) for c in range(n_clients)))


def model_to_bytes(params: GmmParams, n_local: int = 0) -> bytes:
    k, d = params.means.shape
    header = _HEADER.pack(MODEL_MAGIC, MODEL_VERSION, _COV_CODES[params.cov_type], 0, d, k)
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (params.weights, params.means, params.covariances)
    )
    return header + body + struct.pack("<Q", n_local)


def model_from_bytes(blob: bytes) -> tuple[GmmParams, int]:
    if len(blob) < _HEADER.size:
        raise IngestionError("model file truncated")
    magic, version, cov_code, _, d, k = _HEADER.unpack_from(blob)
    if magic != MODEL_MAGIC:
        raise IngestionError("not a model file (bad magic)")
    if version != MODEL_VERSION:
        raise IngestionError(f"unsupported model file version {version}")
    cov_type = {v: c for c, v in _COV_CODES.items()}[cov_code]
    cov_shape = (k, d) if cov_type is CovarianceType.DIAGONAL else (k, d, d)
    sizes = [k, k * d, int(np.prod(cov_shape))]
    expected = _HEADER.size + 8 * sum(sizes) + 8
    if len(blob) != expected:
        raise IngestionError(f"model file has {len(blob)} bytes, expected {expected}")
    offset = _HEADER.size
    arrays = []
    for size in sizes:
        arrays.append(np.frombuffer(blob, dtype="<f8", count=size, offset=offset).astype(float))
        offset += 8 * size
    (n_local,) = struct.unpack_from("<Q", blob, offset)
    params = GmmParams(arrays[0], arrays[1].reshape(k, d), arrays[2].reshape(cov_shape), cov_type)
    return params, int(n_local)


def save_model(path, params: GmmParams, n_local: int = 0) -> None:
    Path(path).write_bytes(model_to_bytes(params, n_local))


def load_model(path) -> tuple[GmmParams, int]:
    return model_from_bytes(Path(path).read_bytes())


def load_client_model(path) -> ClientModel:
    params, n_local = load_model(path)
    return ClientModel(params, n_local)


def pca_components(data: np.ndarray, target_dims: int) -> tuple[np.ndarray, np.ndarray]:
    """Top principal axes ``(d, target_dims)`` and their variances, largest first.

    Each axis is sign-fixed so that its largest-magnitude loading is positive.
    """
    x = np.asarray(data, dtype=float)
    d = x.shape[1]
    if not 1 <= target_dims <= d:
        raise InvalidInputError(f"target_dims must lie in [1, {d}]")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(x.shape[0] - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:target_dims]
    axes = evecs[:, order]
    lead = axes[np.argmax(np.abs(axes), axis=0), np.arange(target_dims)]
    axes = axes * np.where(lead < 0, -1.0, 1.0)
    return axes, evals[order]


def pca_reduce(data: np.ndarray, target_dims: int, seed: int = 0, renormalize: bool = True) -> np.ndarray:
    """Project centered data on its top principal axes, then rescale to [0, 1].

    The eigen-solver is deterministic, so ``seed`` does not change the result.
    """
    x = np.asarray(data, dtype=float)
    axes, _ = pca_components(x, target_dims)
    projected = (x - x.mean(axis=0)) @ axes
    if not renormalize:
        return projected
    return minmax_normalize(projected)[0]
