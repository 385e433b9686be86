"""CSV ingestion, JSON model persistence and the scree table.

CSV files are RFC-4180 style with a header row and one sample per row.
Model files are JSON with shortest-round-trip decimal floats, so a
save/load cycle reproduces every parameter bit for bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataFormatError, DimensionMismatchError
from .model import BERNOULLI, FAMILIES, GAUSSIAN, DataSet, ModelDims, Theta

FORMAT_VERSION = 1

# mean-|z| tolerance accepted when the caller disables centering
_CENTERED_Z_TOL = 1e-8


@dataclass(frozen=True)
class IngestResult:
    data: DataSet
    x_center: np.ndarray
    y_center: np.ndarray
    z_center: float
    x_names: tuple
    y_names: tuple


def read_matrix_csv(path: str) -> tuple:
    """Read a header + numeric-rows CSV into (column_names, matrix).

    Errors name the file, the offending cell's row (counting the header as
    row 1) and its column header.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: file is empty") from None
        names = tuple(name.strip() for name in header)
        if len(names) == 0 or any(n == "" for n in names):
            raise DataFormatError(f"{path}: header row has empty column names")
        rows = []
        for file_row, rec in enumerate(reader, start=2):
            if len(rec) != len(names):
                raise DataFormatError(
                    f"{path}: row {file_row} has {len(rec)} fields, "
                    f"expected {len(names)}")
            parsed = []
            for j, cell in enumerate(rec):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataFormatError(
                        f"{path}: non-numeric value {cell!r} at row "
                        f"{file_row}, column {names[j]!r}") from None
            rows.append(parsed)
    if not rows:
        raise DataFormatError(f"{path}: no data rows after the header")
    return names, np.asarray(rows, dtype=np.float64)


def read_outcome_csv(path: str):
    """Read a single-column outcome CSV; returns (column_name, vector)."""
    names, mat = read_matrix_csv(path)
    if mat.shape[1] != 1:
        raise DataFormatError(
            f"{path}: outcome file must have exactly one column, "
            f"got {mat.shape[1]}")
    return names[0], mat[:, 0]


def ingest(x_path: str, y_path: str, z_path: str, family: str,
           center: bool = True) -> IngestResult:
    """Parse the three CSV files into a validated DataSet.

    X and Y are always column-centered (the model assumes zero-mean
    features); the centering vectors are returned for use at prediction
    time.  Under the Gaussian family ``center`` controls whether z is
    centered too; when disabled, z must already have mean zero.  Under the
    Bernoulli family z is validated as 0/1 labels and never centered.
    """
    if family not in FAMILIES:
        raise DataFormatError(
            f"unknown family {family!r}; expected one of {FAMILIES}")
    x_names, X = read_matrix_csv(x_path)
    y_names, Y = read_matrix_csv(y_path)
    _, z = read_outcome_csv(z_path)
    counts = {x_path: X.shape[0], y_path: Y.shape[0], z_path: z.shape[0]}
    if len(set(counts.values())) != 1:
        detail = ", ".join(f"{p}: {n} rows" for p, n in counts.items())
        raise DimensionMismatchError(f"row counts differ across inputs ({detail})")

    x_center = X.mean(axis=0)
    y_center = Y.mean(axis=0)
    X = X - x_center
    Y = Y - y_center
    if family == GAUSSIAN:
        if center:
            z_center = float(z.mean())
            z = z - z_center
        else:
            z_center = 0.0
            if abs(z.mean()) > _CENTERED_Z_TOL:
                raise DataFormatError(
                    f"gaussian outcome must be centered when center=False; "
                    f"mean is {z.mean():.6g}")
    else:
        z_center = 0.0
        bad = np.nonzero((z != 0.0) & (z != 1.0))[0]
        if bad.size:
            raise DataFormatError(
                f"{z_path}: bernoulli outcome must be 0 or 1; "
                f"value {z[bad[0]]!r} at data row {bad[0] + 1} "
                f"(file row {bad[0] + 2})")
    data = DataSet(X=X, Y=Y, z=z, family=family)
    return IngestResult(data=data, x_center=x_center, y_center=y_center,
                        z_center=z_center, x_names=x_names, y_names=y_names)


def _theta_to_json(theta: Theta) -> dict:
    return {
        "W": theta.W.tolist(), "W_perp": theta.W_perp.tolist(),
        "C": theta.C.tolist(), "C_perp": theta.C_perp.tolist(),
        "B": theta.B.tolist(), "Sigma_t": theta.Sigma_t.tolist(),
        "Sigma_tperp": theta.Sigma_tperp.tolist(),
        "Sigma_h": theta.Sigma_h.tolist(),
        "Sigma_uperp": theta.Sigma_uperp.tolist(),
        "sigma_e2": theta.sigma_e2, "sigma_f2": theta.sigma_f2,
        "a": theta.a.tolist(), "b": theta.b.tolist(), "a0": theta.a0,
        "sigma_g2": theta.sigma_g2, "family": theta.family,
    }


def _theta_from_json(obj: dict) -> Theta:
    def arr(key, ndim):
        val = np.asarray(obj[key], dtype=np.float64)
        if val.ndim != ndim:
            raise DataFormatError(
                f"model file field {key!r} has {val.ndim} dimensions, "
                f"expected {ndim}")
        return val

    return Theta(
        W=arr("W", 2), W_perp=arr("W_perp", 2), C=arr("C", 2),
        C_perp=arr("C_perp", 2), B=arr("B", 1), Sigma_t=arr("Sigma_t", 1),
        Sigma_tperp=arr("Sigma_tperp", 1), Sigma_h=arr("Sigma_h", 1),
        Sigma_uperp=arr("Sigma_uperp", 1),
        sigma_e2=float(obj["sigma_e2"]), sigma_f2=float(obj["sigma_f2"]),
        a=arr("a", 1), b=arr("b", 1), a0=float(obj["a0"]),
        sigma_g2=None if obj["sigma_g2"] is None else float(obj["sigma_g2"]),
        family=obj["family"])


def save_model(path: str, theta: Theta, dims: ModelDims, *,
               x_center: np.ndarray, y_center: np.ndarray, z_center: float,
               fit_meta: Optional[dict] = None) -> None:
    """Write a model file; floats use shortest-round-trip decimal form."""
    x_center = np.asarray(x_center, dtype=np.float64)
    y_center = np.asarray(y_center, dtype=np.float64)
    if x_center.shape != (dims.p,) or y_center.shape != (dims.q,):
        raise DimensionMismatchError(
            f"centering vectors must have shapes ({dims.p},) and ({dims.q},), "
            f"got {x_center.shape} and {y_center.shape}")
    payload = {
        "format_version": FORMAT_VERSION,
        "family": theta.family,
        "dims": {"p": dims.p, "q": dims.q, "r": dims.r, "r_x": dims.r_x,
                 "r_y": dims.r_y, "N": dims.N},
        "theta": _theta_to_json(theta),
        "centering": {"x": x_center.tolist(), "y": y_center.tolist(),
                      "z": float(z_center)},
        "fit": dict(fit_meta) if fit_meta else {},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


@dataclass(frozen=True)
class LoadedModel:
    theta: Theta
    dims: ModelDims
    x_center: np.ndarray
    y_center: np.ndarray
    z_center: float
    fit_meta: dict


def load_model(path: str) -> LoadedModel:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON ({exc})") from None
    version = obj.get("format_version")
    if version != FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: unsupported model format version {version!r}; "
            f"this build reads version {FORMAT_VERSION}")
    for key in ("family", "dims", "theta", "centering"):
        if key not in obj:
            raise DataFormatError(f"{path}: missing field {key!r}")
    d = obj["dims"]
    try:
        dims = ModelDims(p=int(d["p"]), q=int(d["q"]), r=int(d["r"]),
                         r_x=int(d["r_x"]), r_y=int(d["r_y"]), N=int(d["N"]))
        theta = _theta_from_json(obj["theta"])
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing field {exc}") from None
    if theta.family != obj["family"]:
        raise DataFormatError(
            f"{path}: family mismatch between header ({obj['family']!r}) "
            f"and parameters ({theta.family!r})")
    cent = obj["centering"]
    x_center = np.asarray(cent["x"], dtype=np.float64)
    y_center = np.asarray(cent["y"], dtype=np.float64)
    if x_center.shape != (dims.p,) or y_center.shape != (dims.q,):
        raise DataFormatError(
            f"{path}: centering vector lengths {x_center.shape[0]}, "
            f"{y_center.shape[0]} do not match dims p={dims.p}, q={dims.q}")
    return LoadedModel(theta=theta, dims=dims, x_center=x_center,
                       y_center=y_center, z_center=float(cent["z"]),
                       fit_meta=obj.get("fit", {}))


def scree_table(X: np.ndarray, Y: np.ndarray, k: int):
    """Top-k singular values of X'Y and eigenvalues of X'X and Y'Y.

    Inputs are column-centered first.  Returns (rows, available) where each
    row is a dict with component index (1-based) and the three spectra;
    ``available`` is the number of components the data supports, so callers
    can notice a truncated request.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise DimensionMismatchError(
            f"X and Y must be 2-d with equal row counts, got "
            f"{X.shape} and {Y.shape}")
    if k < 1:
        raise DataFormatError(f"component count must be >= 1, got {k}")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    sv_xy = np.linalg.svd(X.T @ Y, compute_uv=False)
    sv_x = np.linalg.svd(X, compute_uv=False)
    sv_y = np.linalg.svd(Y, compute_uv=False)
    available = min(sv_xy.size, sv_x.size, sv_y.size)
    n_out = min(k, available)
    rows = []
    for i in range(n_out):
        rows.append({"component": i + 1,
                     "sv_xty": float(sv_xy[i]),
                     "eig_xtx": float(sv_x[i] ** 2),
                     "eig_yty": float(sv_y[i] ** 2)})
    return rows, available


def write_predictions_csv(path_or_handle, linear_predictor: np.ndarray,
                          family: str, z_center: float = 0.0) -> None:
    """Predictions table: linear predictor plus the family-specific column
    (Gaussian: prediction on the original outcome scale; Bernoulli:
    probability)."""
    from scipy.special import expit

    lin = np.asarray(linear_predictor, dtype=np.float64)
    own = isinstance(path_or_handle, str)
    fh = open(path_or_handle, "w", newline="") if own else path_or_handle
    try:
        writer = csv.writer(fh)
        if family == GAUSSIAN:
            writer.writerow(["row", "linear_predictor", "prediction"])
            for i, v in enumerate(lin, start=1):
                writer.writerow([i, repr(float(v)), repr(float(v) + z_center)])
        else:
            writer.writerow(["row", "linear_predictor", "probability"])
            probs = expit(lin)
            for i, (v, pr) in enumerate(zip(lin, probs), start=1):
                writer.writerow([i, repr(float(v)), repr(float(pr))])
    finally:
        if own:
            fh.close()


def write_tests_csv(path_or_handle, results) -> None:
    """Association-test table, one row per TestResult."""
    own = isinstance(path_or_handle, str)
    fh = open(path_or_handle, "w", newline="") if own else path_or_handle
    try:
        writer = csv.writer(fh)
        writer.writerow(["kind", "component", "statistic", "df", "p_value",
                         "asymptotics_unverified"])
        for res in results:
            writer.writerow([
                res.kind,
                "" if res.component is None else res.component,
                repr(float(res.statistic)), res.df, repr(float(res.p_value)),
                int(res.asymptotics_unverified)])
    finally:
        if own:
            fh.close()
