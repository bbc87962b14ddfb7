"""File formats.

Signals and datasets are CSV with a leading metadata comment line::

    # sample_rate=750
    input,output
    0.5,0.0123...

Floats are written with 17 significant digits, which round-trips doubles.
Models and kernels are JSON; kernel parameters are listed in flatten order.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import kernels as K
from .volterra import Dataset, SignalSeries, VolterraModel

MODEL_FORMAT = "cgsysid-volterra"
_FMT = "%.17g"


class FormatError(ValueError):
    pass


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return _FMT % x
    return str(x)


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_matrix(path, matrix: np.ndarray) -> None:
    """Headerless CSV, one matrix row per line, row-major."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"need a 2-D array, got shape {matrix.shape}")
    np.savetxt(path, matrix, fmt=_FMT, delimiter=",")


def read_matrix(path) -> np.ndarray:
    try:
        return np.atleast_2d(np.loadtxt(path, delimiter=",", ndmin=2))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def _read_table(path, columns: tuple[str, ...]) -> tuple[float, np.ndarray]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from None
    if not lines or not lines[0].startswith("#"):
        raise FormatError(f"{path}: missing '# sample_rate=...' metadata line")
    meta = dict(item.split("=", 1) for item in lines[0].lstrip("#").split() if "=" in item)
    try:
        rate = float(meta["sample_rate"])
    except (KeyError, ValueError):
        raise FormatError(f"{path}: metadata line lacks a numeric sample_rate") from None
    if len(lines) < 2:
        raise FormatError(f"{path}: missing header row")
    header = tuple(h.strip() for h in lines[1].split(","))
    if header != columns:
        raise FormatError(f"{path}: expected columns {','.join(columns)}, got {lines[1]!r}")
    data = np.empty((len(lines) - 2, len(columns)))
    for i, line in enumerate(lines[2:]):
        parts = line.split(",")
        if len(parts) != len(columns):
            raise FormatError(f"{path}:{i + 3}: expected {len(columns)} fields, got {len(parts)}")
        try:
            data[i] = [float(p) for p in parts]
        except ValueError:
            raise FormatError(f"{path}:{i + 3}: non-numeric field") from None
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite values")
    if not (rate > 0 and math.isfinite(rate)):
        raise FormatError(f"{path}: sample_rate must be positive")
    return rate, data


def _write_table(path, rate: float, columns, data: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write(f"# sample_rate={_FMT % rate}\n")
        fh.write(",".join(columns) + "\n")
        for row in data:
            fh.write(",".join(_FMT % v for v in row) + "\n")


def write_signal(path, signal: SignalSeries) -> None:
    _write_table(path, signal.sample_rate, ("value",), signal.samples[:, None])


def read_signal(path) -> SignalSeries:
    rate, data = _read_table(path, ("value",))
    return SignalSeries(data[:, 0], rate)


def write_dataset(path, dataset: Dataset) -> None:
    data = np.column_stack([dataset.input.samples, dataset.output.samples])
    _write_table(path, dataset.input.sample_rate, ("input", "output"), data)


def read_dataset(path) -> Dataset:
    rate, data = _read_table(path, ("input", "output"))
    return Dataset(SignalSeries(data[:, 0], rate), SignalSeries(data[:, 1], rate))


def model_to_dict(model: VolterraModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "n": model.n,
        "D": model.max_order,
        "sample_rate": model.sample_rate,
        "input_offset": model.input_offset,
        "h0": model.h0,
        "h1": model.h1.tolist(),
        "kernels": {str(d): K.kernel_to_dict(ker) for d, ker in model.kernels.items()},
    }


def model_from_dict(obj: dict) -> VolterraModel:
    if not isinstance(obj, dict):
        raise FormatError("model file must hold a JSON object")
    if obj.get("format") != MODEL_FORMAT:
        raise FormatError(f"not a model file (format {obj.get('format')!r})")
    try:
        kernels = {int(d): K.kernel_from_dict(kd) for d, kd in obj.get("kernels", {}).items()}
        model = VolterraModel(int(obj["n"]), float(obj["h0"]), np.asarray(obj["h1"], dtype=np.float64),
                              kernels, float(obj.get("sample_rate", 750.0)),
                              float(obj.get("input_offset", 0.0)))
        model.spec  # validates kernel sides against n
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid model file: {exc}") from None
    if int(obj.get("D", model.max_order)) != model.max_order:
        raise FormatError("declared max order D does not match the stored kernels")
    return model


def save_model(path, model: VolterraModel) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def load_model(path) -> VolterraModel:
    return model_from_dict(load_json(path))
