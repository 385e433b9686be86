"""Synthetic-study harness: data generation, evaluation metrics and the
replication driver with ridge baselines.

Settings fix one joint and one specific component per block (r = r_x =
r_y = 1) with unit latent variances and unit coupling; noise levels are
specified as fractions of total variance and converted to the implied
variance parameters.  Outcome truth is a = 2, b = 1.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit

from .em_binary import fit_binary
from .em_gaussian import FitConfig, FitResult, fit_gaussian
from .errors import DataFormatError, DimensionMismatchError
from .model import (
    BERNOULLI,
    FAMILIES,
    GAUSSIAN,
    DataSet,
    ModelDims,
    Theta,
    canonicalize,
    predict_linear_predictor,
)
from .ridge import ridge_fit_cv

_METHOD_MAIN = "glm-po2pls"
_METHOD_RIDGE_X = "ridge-x"
_METHOD_RIDGE_Y = "ridge-y"


@dataclass(frozen=True)
class SimSetting:
    """One cell of the synthetic study design.

    ``heterogeneity`` is Var(h) / Var(u); ``noise_x`` / ``noise_y`` are the
    residual fractions of the total variance of x and y; ``outcome_noise``
    is the residual fraction of Var(z) (Gaussian outcome only).
    """

    N: int
    p: int
    q: int
    heterogeneity: float
    noise_x: float
    noise_y: float
    outcome_noise: float = 0.2
    a_true: float = 2.0
    b_true: float = 1.0
    family: str = GAUSSIAN
    replications: int = 50
    test_N: int = 1000
    seed: Optional[int] = None

    def __post_init__(self):
        for name in ("heterogeneity", "noise_x", "noise_y", "outcome_noise"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise DataFormatError(f"{name} must be in (0, 1), got {v}")
        if self.family not in FAMILIES:
            raise DataFormatError(
                f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.N < 3 or self.test_N < 1:
            raise DataFormatError("N must be >= 3 and test_N >= 1")
        if self.replications < 1:
            raise DataFormatError("replications must be >= 1")
        # r = r_x = r_y = 1 throughout; dims must leave room for them
        if self.p < 2 or self.q < 2:
            raise DataFormatError("p and q must be >= 2 (one joint + one specific component)")

    @property
    def label(self) -> str:
        fam = "g" if self.family == GAUSSIAN else "b"
        return (f"{fam}_N{self.N}_p{self.p}_q{self.q}"
                f"_h{round(self.heterogeneity * 100):02d}"
                f"_nx{round(self.noise_x * 100):02d}"
                f"_ny{round(self.noise_y * 100):02d}")

    def true_theta_variances(self):
        """Variance parameters implied by the fractional noise settings."""
        het = self.heterogeneity
        sigma_h2 = het / (1.0 - het)                      # Var(u) = 1 + sigma_h2
        signal_x = 2.0                                    # tr Sigma_t + tr Sigma_tperp
        sigma_e2 = self.noise_x * signal_x / ((1.0 - self.noise_x) * self.p)
        signal_y = (1.0 + sigma_h2) + 1.0                 # tr Sigma_u + tr Sigma_uperp
        sigma_f2 = self.noise_y * signal_y / ((1.0 - self.noise_y) * self.q)
        signal_z = self.a_true ** 2 + self.b_true ** 2 * sigma_h2
        sigma_g2 = self.outcome_noise * signal_z / (1.0 - self.outcome_noise)
        return sigma_h2, sigma_e2, sigma_f2, sigma_g2


@dataclass(frozen=True)
class SimulatedData:
    """Train/test pair with the generative parameters and the test-row
    latents (needed to score predicted logits against true ones)."""

    train: DataSet
    test: DataSet
    truth: Theta
    test_t: np.ndarray
    test_h: np.ndarray

    @property
    def test_linear_predictor(self) -> np.ndarray:
        th = self.truth
        return th.a0 + self.test_t @ th.a + self.test_h @ th.b


def _sign_fixed_orthonormal(rng, n: int, k: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((n, k)))
    Q = Q * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))
    # largest-|entry| element of each column made positive
    rows = np.argmax(np.abs(Q), axis=0)
    lead = Q[rows, np.arange(k)]
    return Q * np.where(lead < 0, -1.0, 1.0)


def generate_dataset(setting: SimSetting, seed) -> SimulatedData:
    """Draw one replication: truth, train rows, test rows.

    Loadings are standard normal columns orthonormalized jointly per block
    (so specific directions are orthogonal to joint ones) and sign-fixed,
    which makes the truth canonical with a = +2, b = +1.  The draw order is
    fixed, so a given seed reproduces bit-identical data.
    """
    rng = np.random.default_rng(seed)
    p, q = setting.p, setting.q
    sigma_h2, sigma_e2, sigma_f2, sigma_g2 = setting.true_theta_variances()

    Qx = _sign_fixed_orthonormal(rng, p, 2)
    Qy = _sign_fixed_orthonormal(rng, q, 2)
    W, W_perp = Qx[:, :1], Qx[:, 1:]
    C, C_perp = Qy[:, :1], Qy[:, 1:]

    truth = Theta(
        W=W, W_perp=W_perp, C=C, C_perp=C_perp,
        B=np.ones(1), Sigma_t=np.ones(1), Sigma_tperp=np.ones(1),
        Sigma_h=np.array([sigma_h2]), Sigma_uperp=np.ones(1),
        sigma_e2=sigma_e2, sigma_f2=sigma_f2,
        a=np.array([setting.a_true]), b=np.array([setting.b_true]),
        a0=0.0,
        sigma_g2=sigma_g2 if setting.family == GAUSSIAN else None,
        family=setting.family)
    truth = canonicalize(truth)

    def draw(n):
        t = rng.standard_normal((n, 1))
        t_perp = rng.standard_normal((n, 1))
        u_perp = rng.standard_normal((n, 1))
        h = rng.standard_normal((n, 1)) * np.sqrt(sigma_h2)
        u = t * truth.B + h
        X = t @ truth.W.T + t_perp @ truth.W_perp.T \
            + rng.standard_normal((n, p)) * np.sqrt(sigma_e2)
        Y = u @ truth.C.T + u_perp @ truth.C_perp.T \
            + rng.standard_normal((n, q)) * np.sqrt(sigma_f2)
        lin = (t @ truth.a + h @ truth.b).ravel()
        if setting.family == GAUSSIAN:
            z = lin + rng.standard_normal(n) * np.sqrt(sigma_g2)
        else:
            z = (rng.random(n) < expit(lin)).astype(np.float64)
        return DataSet(X=X, Y=Y, z=z, family=setting.family), t, h

    train, _, _ = draw(setting.N)
    test, test_t, test_h = draw(setting.test_N)
    return SimulatedData(train=train, test=test, truth=truth,
                         test_t=test_t, test_h=test_h)


def scaled_error(estimate: float, truth: float) -> float:
    """(estimate - truth) / truth; truth must be nonzero."""
    if truth == 0.0:
        raise DataFormatError("scaled error undefined for zero truth")
    return (float(estimate) - float(truth)) / float(truth)


def rmsep(predicted: np.ndarray, actual: np.ndarray) -> float:
    """Root mean squared prediction error between two aligned vectors.

    For Bernoulli evaluations pass linear predictors (logits) on both
    sides, not labels or probabilities.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape or predicted.ndim != 1:
        raise DimensionMismatchError(
            f"predicted and actual must be equal-length vectors, got "
            f"{predicted.shape} and {actual.shape}")
    return float(np.sqrt(np.mean((predicted - actual) ** 2)))


def loading_inner_product(est: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-column |<est_k, truth_k>|, a sign-free alignment score in [0, 1]
    for unit-norm columns."""
    est = np.asarray(est, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if est.shape != truth.shape or est.ndim != 2:
        raise DimensionMismatchError(
            f"loading matrices must share a 2-d shape, got {est.shape} and {truth.shape}")
    return np.abs(np.einsum("ij,ij->j", est, truth))


def tpr_top_quarter(scores_est: np.ndarray, scores_true: np.ndarray) -> float:
    """Fraction of the true top-quarter features (by |score|) recovered in
    the estimated top quarter; ties break toward the lower index."""
    scores_est = np.asarray(scores_est, dtype=np.float64)
    scores_true = np.asarray(scores_true, dtype=np.float64)
    if scores_est.shape != scores_true.shape or scores_est.ndim != 1:
        raise DimensionMismatchError(
            f"score vectors must be equal-length, got {scores_est.shape} "
            f"and {scores_true.shape}")
    p = scores_est.shape[0]
    top = -(-p // 4)                       # ceil(p / 4)
    sel_est = np.argsort(-np.abs(scores_est), kind="stable")[:top]
    sel_true = np.argsort(-np.abs(scores_true), kind="stable")[:top]
    return len(set(sel_est) & set(sel_true)) / top


def predict_outcome(fit: FitResult, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Linear predictor for new rows (see ``predict_linear_predictor``)."""
    return predict_linear_predictor(fit.theta, X, Y)


def align_components_to_truth(theta_est: Theta, theta_true: Theta) -> Theta:
    """Flip estimated component signs to match the truth.

    Joint columns flip (W, C, a, b) together keyed on the sign of
    <W_est, W_true> per column; specific columns flip independently.  The
    likelihood is unchanged; this only removes the sign indeterminacy so
    signed error metrics are meaningful.
    """
    if theta_est.W.shape != theta_true.W.shape:
        raise DimensionMismatchError("estimate and truth have different shapes")
    s = np.sign(np.einsum("ij,ij->j", theta_est.W, theta_true.W))
    s[s == 0] = 1.0
    W = theta_est.W * s
    C = theta_est.C * s
    a = theta_est.a * s
    b = theta_est.b * s

    def flip_specific(est, true):
        if est.shape[1] == 0:
            return est
        ss = np.sign(np.einsum("ij,ij->j", est, true))
        ss[ss == 0] = 1.0
        return est * ss

    return replace(theta_est, W=W, C=C, a=a, b=b,
                   W_perp=flip_specific(theta_est.W_perp, theta_true.W_perp),
                   C_perp=flip_specific(theta_est.C_perp, theta_true.C_perp))


@dataclass(frozen=True)
class StudyReport:
    """Long-format study results plus the settings that produced them.

    ``records`` rows carry setting label, replication index, method, metric
    name and value.
    """

    records: tuple
    settings: tuple

    def to_rows(self):
        return [dict(rec) for rec in self.records]

    def summarize(self) -> dict:
        """Median and quartiles per (setting, method, metric)."""
        groups: dict = {}
        for rec in self.records:
            key = (rec["setting"], rec["method"], rec["metric"])
            groups.setdefault(key, []).append(rec["value"])
        out = {}
        for key, vals in groups.items():
            arr = np.asarray(vals, dtype=np.float64)
            q1, med, q3 = np.percentile(arr, [25, 50, 75])
            out[key] = {"median": float(med), "q1": float(q1),
                        "q3": float(q3), "n": int(arr.size)}
        return out

    def write_csv(self, path: str) -> None:
        """Write the long-format table and a JSON sidecar of the settings."""
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["setting", "replication", "method", "metric", "value"])
            for rec in self.records:
                writer.writerow([rec["setting"], rec["replication"],
                                 rec["method"], rec["metric"], repr(rec["value"])])
        sidecar = str(path) + ".settings.json"
        with open(sidecar, "w") as fh:
            json.dump([asdict(s) for s in self.settings], fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fit_for_setting(sim: SimulatedData, config: FitConfig, M: int) -> FitResult:
    data = sim.train
    dims = ModelDims(data.p, data.q, 1, 1, 1, data.N)
    if data.family == GAUSSIAN:
        return fit_gaussian(data, dims, config)
    return fit_binary(data, dims, config, M=M)


def run_replication(setting: SimSetting, seed, config: FitConfig,
                    M: int = 16) -> list:
    """All metric rows for one replication (main fit plus ridge baselines).

    A failed model fit is recorded as a single ``failure`` row instead of
    propagating.
    """
    sim = generate_dataset(setting, seed)
    truth = sim.truth
    rows = []

    def add(method, metric, value):
        rows.append({"setting": setting.label, "replication": int(np.asarray(seed)[-1])
                     if np.ndim(seed) else int(seed),
                     "method": method, "metric": metric, "value": float(value)})

    if setting.family == GAUSSIAN:
        target_pred = sim.test.z
    else:
        target_pred = sim.test_linear_predictor

    try:
        fit = _fit_for_setting(sim, config, M)
        est = align_components_to_truth(fit.theta, truth)
        add(_METHOD_MAIN, "scaled_error_a", scaled_error(est.a[0], truth.a[0]))
        add(_METHOD_MAIN, "scaled_error_b", scaled_error(est.b[0], truth.b[0]))
        add(_METHOD_MAIN, "rmsep",
            rmsep(predict_outcome(fit, sim.test.X, sim.test.Y), target_pred))
        add(_METHOD_MAIN, "tpr", tpr_top_quarter(est.W[:, 0], truth.W[:, 0]))
        add(_METHOD_MAIN, "inner_product_w", loading_inner_product(est.W, truth.W)[0])
        add(_METHOD_MAIN, "inner_product_c", loading_inner_product(est.C, truth.C)[0])
        add(_METHOD_MAIN, "inner_product_w_perp",
            loading_inner_product(est.W_perp, truth.W_perp)[0])
        add(_METHOD_MAIN, "inner_product_c_perp",
            loading_inner_product(est.C_perp, truth.C_perp)[0])
        add(_METHOD_MAIN, "converged", 1.0 if fit.converged else 0.0)
    except Exception:
        add(_METHOD_MAIN, "failure", 1.0)

    try:
        rx = ridge_fit_cv(sim.train.X, sim.train.z, family=setting.family)
        add(_METHOD_RIDGE_X, "rmsep", rmsep(rx.linear_predictor(sim.test.X), target_pred))
        add(_METHOD_RIDGE_X, "tpr", tpr_top_quarter(rx.coef, truth.W[:, 0]))
    except Exception:
        add(_METHOD_RIDGE_X, "failure", 1.0)

    try:
        ry = ridge_fit_cv(sim.train.Y, sim.train.z, family=setting.family)
        add(_METHOD_RIDGE_Y, "rmsep", rmsep(ry.linear_predictor(sim.test.Y), target_pred))
    except Exception:
        add(_METHOD_RIDGE_Y, "failure", 1.0)
    return rows


def run_study(settings: Sequence[SimSetting], master_seed: int = 2026,
              workers: int = 1, config: FitConfig | None = None,
              M: int = 16) -> StudyReport:
    """Run every setting for its replication count with derived seeds.

    Replications are independent jobs; the per-replication seed is
    ``(master_seed, setting_index_or_seed, replication)``, so reports are
    reproducible bit for bit for a given master seed regardless of
    ``workers``.
    """
    if config is None:
        config = FitConfig()
    jobs = []
    for idx, setting in enumerate(settings):
        base = setting.seed if setting.seed is not None else idx
        for rep in range(setting.replications):
            jobs.append((setting, (master_seed, base, rep)))
    if workers == 1:
        results = [run_replication(s, seed, config, M) for s, seed in jobs]
    else:
        results = Parallel(n_jobs=workers)(
            delayed(run_replication)(s, seed, config, M) for s, seed in jobs)
    records = tuple(rec for rows in results for rec in rows)
    return StudyReport(records=records, settings=tuple(settings))


def table_one_settings(family: str = GAUSSIAN, replications: int = 50,
                       dims: str = "low") -> list[SimSetting]:
    """The full factorial of the study design for one family.

    ``dims`` selects (p, q) = (100, 10) for "low" or (2000, 25) for "high".
    """
    if dims not in ("low", "high"):
        raise DataFormatError(f"dims must be 'low' or 'high', got {dims!r}")
    p, q = (100, 10) if dims == "low" else (2000, 25)
    out = []
    for N in (100, 1000):
        for het in (0.40, 0.80):
            for nx, ny in ((0.40, 0.40), (0.95, 0.05)):
                out.append(SimSetting(N=N, p=p, q=q, heterogeneity=het,
                                      noise_x=nx, noise_y=ny, family=family,
                                      replications=replications))
    return out
