"""Per-inverter regression controllers fitted to OPF-optimal reactive power.

Features are built from the local quadruple ``(p_c, q_c, p_g, q_bar)``:
three base variables, their pairwise products and their squares. Models are
ordinary least squares on z-scored features and target, with the feature
subset chosen by hybrid forward/backward stepwise search on BIC.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, stats

from .feeder import FeederModel
from .scenarios import ScenarioSet

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    "phi1", "phi2", "phi3",
    "phi1*phi2", "phi1*phi3", "phi2*phi3",
    "phi1^2", "phi2^2", "phi3^2",
)
N_FEATURES = len(FEATURE_NAMES)
BASE_FEATURES = (0, 1, 2)
RSS_FLOOR = 1e-12
MODEL_SCHEMA = "vvoreg.regression/1"


class RegressionError(ValueError):
    pass


def transform(p_c, q_c, p_g, q_bar) -> np.ndarray:
    """Candidate feature vector(s), shape ``(..., 9)``."""
    f1 = np.asarray(p_c, dtype=float) - np.asarray(p_g, dtype=float)
    f2 = np.asarray(q_c, dtype=float)
    f3 = np.asarray(q_bar, dtype=float)
    f1, f2, f3 = np.broadcast_arrays(f1, f2, f3)
    return np.stack([f1, f2, f3, f1 * f2, f1 * f3, f2 * f3, f1 * f1, f2 * f2, f3 * f3], axis=-1)


@dataclass(frozen=True)
class FeatureMatrix:
    Phi: np.ndarray
    y: np.ndarray
    feature_names: Tuple[str, ...] = FEATURE_NAMES
    inverter: str = ""
    columns: Tuple[int, ...] = tuple(range(N_FEATURES))  # positions in FEATURE_NAMES

    @property
    def n_samples(self) -> int:
        return self.Phi.shape[0]

    @property
    def n_features(self) -> int:
        return self.Phi.shape[1]


def build_features(train: ScenarioSet, opf: Sequence, model: FeederModel, inverter: str,
                   exact_only: bool = True) -> FeatureMatrix:
    """Local features and optimal ``q_g`` for one inverter over aligned scenarios."""
    if len(opf) != len(train):
        raise RegressionError(f"{len(train)} scenarios but {len(opf)} OPF solutions")
    try:
        k = [inv.bus for inv in model.inverters].index(inverter)
    except ValueError:
        raise RegressionError(f"no inverter at bus {inverter!r}") from None
    j = train.bus_ids.index(inverter)
    keep = np.array([s.ok and (s.exact or not exact_only) for s in opf], dtype=bool)
    if not keep.any():
        raise RegressionError(
            f"inverter {inverter}: zero usable OPF samples; review gamma and voltage bounds")
    q_bar = np.array([s.q_bar[k] if s.ok else np.nan for s in opf])
    q_opt = np.array([s.q_g[k] if s.ok else np.nan for s in opf])
    Phi = transform(train.p_c[keep, j], train.q_c[keep, j], train.p_g[keep, j], q_bar[keep])
    return FeatureMatrix(Phi, q_opt[keep], FEATURE_NAMES, inverter)


@dataclass(frozen=True)
class Scaler:
    """Z-score parameters; ``columns`` index the retained candidate features."""

    columns: Tuple[int, ...]
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    dropped: Tuple[int, ...] = ()

    def scale_x(self, Phi_full) -> np.ndarray:
        Phi_full = np.asarray(Phi_full, dtype=float)
        return (Phi_full[..., list(self.columns)] - self.x_mean) / self.x_std

    def to_dict(self) -> dict:
        return {
            "columns": [FEATURE_NAMES[c] for c in self.columns],
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "dropped": [FEATURE_NAMES[c] for c in self.dropped],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        idx = {n: i for i, n in enumerate(FEATURE_NAMES)}
        return cls(tuple(idx[n] for n in d["columns"]), np.array(d["x_mean"], dtype=float),
                   np.array(d["x_std"], dtype=float), float(d["y_mean"]), float(d["y_std"]),
                   tuple(idx[n] for n in d["dropped"]))


def _is_constant(col: np.ndarray) -> bool:
    return bool(np.all(col == col[0])) or float(np.std(col)) <= 1e-12 * float(np.max(np.abs(col)))


def standardize(fm: FeatureMatrix) -> Tuple[FeatureMatrix, Scaler]:
    """Z-score features and target with sample (n-1) standard deviation.

    Constant columns are dropped and recorded. A constant target keeps unit
    scale so the pipeline stays total.
    """
    if fm.n_samples < 2:
        raise RegressionError("standardization needs at least two samples")
    keep, dropped = [], []
    for c in range(fm.n_features):
        (dropped if _is_constant(fm.Phi[:, c]) else keep).append(c)
    if not keep:
        raise RegressionError("all feature columns are constant")
    X = fm.Phi[:, keep]
    mu = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    y_mean = float(fm.y.mean())
    y_std = 1.0 if _is_constant(fm.y) else float(fm.y.std(ddof=1))
    cols = tuple(fm.columns[c] for c in keep)
    scaler = Scaler(cols, mu, sd, y_mean, y_std, tuple(fm.columns[c] for c in dropped))
    out = FeatureMatrix((X - mu) / sd, (fm.y - y_mean) / y_std,
                        tuple(fm.feature_names[c] for c in keep), fm.inverter, cols)
    return out, scaler


def bic(rss: float, n: int, k: int, floor: float = RSS_FLOOR) -> float:
    """``n ln(rss/n) + k ln n``; ``k`` counts the intercept."""
    if n <= 0:
        raise RegressionError("bic needs n > 0")
    return n * math.log(max(rss, floor) / n) + k * math.log(n)


@dataclass(frozen=True)
class OlsFit:
    beta: np.ndarray  # intercept first
    rss: float
    se: np.ndarray
    p_values: np.ndarray
    bic: float
    selected: Tuple[int, ...]  # column positions in the design passed to ols_fit
    n: int
    residuals: np.ndarray = field(repr=False, default=None)

    @property
    def dof(self) -> int:
        return self.n - len(self.selected) - 1


def ols_fit(Phi, y, selected: Optional[Sequence[int]] = None, rank_tol: float = 1e-9) -> OlsFit:
    """Least squares with intercept via QR; rank deficiency is an error."""
    Phi = np.asarray(Phi, dtype=float)
    y = np.asarray(y, dtype=float)
    if Phi.ndim == 1:
        Phi = Phi[:, None]
    n = Phi.shape[0]
    sel = tuple(range(Phi.shape[1])) if selected is None else tuple(int(s) for s in selected)
    p = len(sel) + 1
    if n <= p:
        raise RegressionError(f"need more than {p} samples, got {n}")
    X = np.column_stack([np.ones(n), Phi[:, list(sel)]])
    Q, R = np.linalg.qr(X)
    d = np.abs(np.diag(R))
    # column norms guard against judging rank on badly scaled inputs
    if d.min() <= rank_tol * np.linalg.norm(X, axis=0).max():
        raise RegressionError(f"design matrix is rank deficient (columns {sel})")
    beta = linalg.solve_triangular(R, Q.T @ y)
    resid = y - X @ beta
    rss = float(resid @ resid)
    dof = n - p
    sigma2 = rss / dof
    Rinv = linalg.solve_triangular(R, np.eye(p))
    se = np.sqrt(sigma2 * np.sum(Rinv * Rinv, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, np.abs(beta) / se, np.where(beta != 0, np.inf, 0.0))
    pv = np.clip(2.0 * stats.t.sf(t, dof), 0.0, 1.0)
    return OlsFit(beta, rss, se, pv, bic(rss, n, p), sel, n, resid)


@dataclass(frozen=True)
class StepwiseConfig:
    tau_add: float = 2.0
    tau_remove: float = 0.0
    max_iter: Optional[int] = None  # default 4 * candidates; strict BIC decrease bounds it anyway


@dataclass(frozen=True)
class Step:
    action: str  # init | add | remove
    column: int
    bic: float


def select_features(X, y, initial: Sequence[int], config: StepwiseConfig = StepwiseConfig()
                    ) -> Tuple[OlsFit, List[Step]]:
    """Hybrid stepwise search on standardized arrays.

    Each iteration tries the best addition (must improve BIC by at least
    ``tau_add``) and then the best removal (at least ``tau_remove``); both
    require a strict improvement. Candidates that make the design rank
    deficient are skipped.
    """
    X = np.asarray(X, dtype=float)
    K = X.shape[1]
    cache: Dict[Tuple[int, ...], Optional[OlsFit]] = {}

    def fit(cols) -> Optional[OlsFit]:
        key = tuple(sorted(cols))
        if key not in cache:
            try:
                cache[key] = ols_fit(X, y, key)
            except RegressionError:
                cache[key] = None
        return cache[key]

    current = set(initial)
    cur = fit(current)
    while cur is None and current:
        # drop the last base column until the start model is estimable
        current.discard(max(current))
        cur = fit(current)
    if cur is None:
        raise RegressionError("intercept-only model cannot be fitted")
    steps = [Step("init", -1, cur.bic)]
    limit = config.max_iter if config.max_iter is not None else 4 * K
    for _ in range(limit):
        changed = False
        best = None
        for c in range(K):
            if c in current:
                continue
            f = fit(current | {c})
            if f is not None and (best is None or f.bic < best[1].bic):
                best = (c, f)
        if best is not None:
            gain = cur.bic - best[1].bic
            if gain > 0 and gain >= config.tau_add:
                current.add(best[0]); cur = best[1]; changed = True
                steps.append(Step("add", best[0], cur.bic))
        best = None
        for c in sorted(current):
            f = fit(current - {c})
            if f is not None and (best is None or f.bic < best[1].bic):
                best = (c, f)
        if best is not None:
            gain = cur.bic - best[1].bic
            if gain > 0 and gain >= config.tau_remove:
                current.discard(best[0]); cur = best[1]; changed = True
                steps.append(Step("remove", best[0], cur.bic))
        if not changed:
            break
    else:
        log.warning("stepwise search hit the iteration limit (%d)", limit)
    return cur, steps


@dataclass(frozen=True)
class RegressionModel:
    """Deployable controller for one inverter.

    ``coef_normalized`` and ``coef_physical`` both start with the intercept;
    entries follow ``features``. Physical coefficients act on raw features
    in p.u. and give ``q_g`` in p.u.
    """

    inverter: str
    features: Tuple[str, ...]
    coef_normalized: np.ndarray
    coef_physical: np.ndarray
    se: np.ndarray
    p_values: np.ndarray
    bic: float
    rss: float
    n_samples: int
    scaler: Scaler
    provenance: Dict[str, object] = field(default_factory=dict)

    @property
    def feature_index(self) -> Tuple[int, ...]:
        return tuple(FEATURE_NAMES.index(f) for f in self.features)

    def to_dict(self) -> dict:
        return {
            "inverter": self.inverter,
            "features": list(self.features),
            "coef_normalized": self.coef_normalized.tolist(),
            "coef_physical": self.coef_physical.tolist(),
            "se": self.se.tolist(),
            "p_values": self.p_values.tolist(),
            "bic": self.bic,
            "rss": self.rss,
            "n_samples": self.n_samples,
            "scaler": self.scaler.to_dict(),
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionModel":
        arr = lambda k: np.array(d[k], dtype=float)  # noqa: E731
        return cls(str(d["inverter"]), tuple(d["features"]), arr("coef_normalized"),
                   arr("coef_physical"), arr("se"), arr("p_values"), float(d["bic"]),
                   float(d["rss"]), int(d["n_samples"]), Scaler.from_dict(d["scaler"]),
                   dict(d.get("provenance", {})))


def stepwise_select(fm: FeatureMatrix, config: StepwiseConfig = StepwiseConfig(),
                    provenance: Optional[dict] = None) -> RegressionModel:
    """Standardize, run stepwise selection from the base variables, package the result."""
    z, scaler = standardize(fm)
    init = [i for i, c in enumerate(z.columns) if c in BASE_FEATURES]
    fit, steps = select_features(z.Phi, z.y, init, config)
    sel = fit.selected
    feats = tuple(FEATURE_NAMES[z.columns[i]] for i in sel)
    b = fit.beta
    mu = scaler.x_mean[list(sel)]
    sd = scaler.x_std[list(sel)]
    slopes = scaler.y_std * b[1:] / sd
    icpt = scaler.y_mean + scaler.y_std * (b[0] - float(np.sum(b[1:] * mu / sd)))
    prov = dict(provenance or {})
    prov.setdefault("steps", len(steps) - 1)
    # the model keeps only the scaler columns it uses
    used = Scaler(tuple(z.columns[i] for i in sel), mu, sd, scaler.y_mean, scaler.y_std, scaler.dropped)
    return RegressionModel(fm.inverter, feats, b.copy(), np.concatenate([[icpt], slopes]),
                           fit.se.copy(), fit.p_values.copy(), fit.bic, fit.rss, fit.n, used, prov)


def predict(model: RegressionModel, p_c, q_c, p_g, q_bar) -> np.ndarray:
    """Raw (unclipped) prediction of ``q_g`` in p.u.; vectorized over inputs."""
    Phi = transform(p_c, q_c, p_g, q_bar)
    z = model.scaler.scale_x(Phi)
    yn = model.coef_normalized[0] + z @ model.coef_normalized[1:]
    return model.scaler.y_mean + model.scaler.y_std * yn


def train_models(train: ScenarioSet, opf: Sequence, model: FeederModel,
                 config: StepwiseConfig = StepwiseConfig(), exact_only: bool = True,
                 provenance: Optional[dict] = None) -> List[RegressionModel]:
    out = []
    for inv in model.inverters:
        fm = build_features(train, opf, model, inv.bus, exact_only)
        out.append(stepwise_select(fm, config, provenance))
    return out


def dump_models(models: Sequence[RegressionModel]) -> str:
    """Deterministic JSON text; floats are written with round-trip precision."""
    doc = {"schema": MODEL_SCHEMA, "candidates": list(FEATURE_NAMES),
           "models": [m.to_dict() for m in models]}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def parse_models(text: str) -> List[RegressionModel]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RegressionError(f"model file is not valid JSON: {exc}") from None
    if doc.get("schema") != MODEL_SCHEMA:
        raise RegressionError(f"unsupported model schema {doc.get('schema')!r}")
    return [RegressionModel.from_dict(d) for d in doc["models"]]


def format_table(model: RegressionModel) -> str:
    """Coefficient table with normalized estimates, SE and p-values."""
    lines = [f"inverter {model.inverter}  n={model.n_samples}  BIC={model.bic:.2f}",
             f"  {'term':<10} {'est':>9} {'SE':>9} {'p-value':>9} {'physical':>12}"]
    names = ("(intercept)",) + model.features
    for i, name in enumerate(names):
        lines.append(f"  {name:<10} {model.coef_normalized[i]:9.4f} {model.se[i]:9.4f} "
                     f"{model.p_values[i]:9.2e} {model.coef_physical[i]:12.5g}")
    return "\n".join(lines)
