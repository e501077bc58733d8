"""Private tuning of one regularization weight by the penalty method.

Records are rows ``(a_1..a_p, b, s)`` with features ``a``, label ``b`` and a
fixed split flag ``s`` (1 for validation, 0 for training). With ``n_tr`` and
``n_val`` records in each part, the per-sample losses are

    f_i(w, th) = (n / n_val) s_i       1/2 (a_i^T th - b_i)^2
    g_i(w, th) = (n / n_tr) (1 - s_i)  1/2 (a_i^T th - b_i)^2 + w R(th) + eps_reg ||th||^2

so ``f`` is the validation loss and ``g`` the regularized training loss. Since
``grad_w f = 0`` and ``grad_w g = R(th)``, the outer step collapses to

    w <- max{0, w - eta lam N(R(th_lam) - R(th), sigma^2 / lam^2)}.

The regularizer is ``ridge`` (``||th||^2``) or ``norm``, a smoothed Euclidean
norm ``sqrt(||th||^2 + s^2) - s`` with smoothing ``s`` so that the constants
stay finite.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .. import streams
from ..core import AffineInner, BilevelProblem, Dataset, PreconditionError, PrivacyBudget, ProblemConstants
from ..geometry import ConvexSet
from ..inner import dp_loc_sgd
from ..outer import OuterParams, inner_objectives, inner_params_for, select_output
from ..privacy import PrivacyLedger, add_gaussian_noise, calibrate_gaussian, split_outer_budget

REGULARIZERS = ("ridge", "norm")
NOISELESS_SCHEDULE_BUDGET = PrivacyBudget(1e3, 1e-6)


def _reg(kind: str, smoothing: float):
    if kind == "ridge":
        return (lambda th: float(th @ th), lambda th: 2.0 * th, lambda th: 2.0 * np.eye(th.size))
    if kind == "norm":
        s = smoothing

        def val(th):
            return math.sqrt(float(th @ th) + s * s) - s

        def grad(th):
            return th / math.sqrt(float(th @ th) + s * s)

        def hess(th):
            r = math.sqrt(float(th @ th) + s * s)
            return np.eye(th.size) / r - np.outer(th, th) / r**3

        return val, grad, hess
    raise ValueError(f"unknown regularizer {kind!r}; expected one of {REGULARIZERS}")


def split_columns(points: np.ndarray):
    return points[:, :-2], points[:, -2], points[:, -1]


def make_reg_tuning(dataset: Dataset, regularizer: str = "ridge", theta_radius: Optional[float] = None,
                    omega_max: float = 1.0, eps_reg: float = 0.0, smoothing: float = 1e-2,
                    feature_bound: Optional[float] = None, label_bound: Optional[float] = None) -> BilevelProblem:
    """Bounds left as None are read off the data; such declarations are flagged
    in the metadata because they are not private."""
    pts = dataset.points
    if pts.shape[1] < 3:
        raise ValueError("records need at least one feature, a label and a split flag")
    a, b, s = split_columns(pts)
    if not np.all((s == 0) | (s == 1)):
        raise ValueError("split flag must be 0 (train) or 1 (validation)")
    n, p = a.shape
    n_val = int(s.sum())
    n_tr = n - n_val
    if n_val == 0 or n_tr == 0:
        raise ValueError("both the training and the validation part must be non-empty")
    w_f, w_g = n / n_val, n / n_tr
    R, dR, d2R = _reg(regularizer, smoothing)
    tr, va = s == 0, s == 1
    G_tr = a[tr].T @ a[tr] / n_tr
    G_val = a[va].T @ a[va] / n_val
    c_tr = a[tr].T @ b[tr] / n_tr
    c_val = a[va].T @ b[va] / n_val
    bb_val = float(b[va] @ b[va]) / n_val
    floor = float(np.linalg.eigvalsh(G_tr)[0]) + 2.0 * eps_reg
    if floor <= 1e-12:
        raise PreconditionError(
            "training Gram matrix is singular; set eps_reg > 0 to add an explicit curvature floor"
        )

    from_data = []
    r_a = feature_bound
    if r_a is None:
        r_a = float(np.linalg.norm(a, axis=1).max())
        from_data.append("feature_bound")
    r_b = label_bound
    if r_b is None:
        r_b = float(np.abs(b).max())
        from_data.append("label_bound")

    def theta_star(omega):
        if regularizer != "ridge":
            raise PreconditionError("closed-form minimizer available for ridge only")
        return np.linalg.solve(G_tr + 2.0 * (float(np.ravel(omega)[0]) + eps_reg) * np.eye(p), c_tr)

    def theta_lambda(omega, lam):
        if regularizer != "ridge":
            raise PreconditionError("closed-form minimizer available for ridge only")
        w = float(np.ravel(omega)[0])
        H = G_val + lam * (G_tr + 2.0 * (w + eps_reg) * np.eye(p))
        return np.linalg.solve(H, c_val + lam * c_tr)

    if theta_radius is None:
        from_data.append("theta_radius")
        cands = [np.linalg.solve(G_tr + 2 * eps_reg * np.eye(p), c_tr)]
        for lam in np.logspace(-1, 4, 26):
            cands.append(np.linalg.solve(G_val + lam * (G_tr + 2 * eps_reg * np.eye(p)), c_val + lam * c_tr))
        theta_radius = 1.25 * max(float(np.linalg.norm(c)) for c in cands)
    R_th = float(theta_radius)
    D = 2.0 * R_th
    if regularizer == "ridge":
        R_max, dR_max, d2R_max, d3R_max = D * D, 2.0 * D, 2.0, 0.0
    else:
        R_max, dR_max, d2R_max, d3R_max = D, 1.0, 1.0 / smoothing, 3.0 / smoothing**2
    L0f_y = w_f * r_a * (r_a * D + r_b)
    L1f_y = w_f * r_a**2
    L0g_y = w_g * r_a * (r_a * D + r_b) + omega_max * dR_max + 2.0 * eps_reg * D
    constants = ProblemConstants(
        L0f=L0f_y,
        L1f=L1f_y,
        L0g=math.hypot(R_max, L0g_y),
        L1g=dR_max + w_g * r_a**2 + omega_max * d2R_max + 2.0 * eps_reg,
        L2g=math.sqrt(2.0) * (d2R_max + omega_max * d3R_max) + d2R_max,
        mu_g=floor,
        Delta_F=0.5 * (r_a * R_th + r_b) ** 2,
    )

    def grad_x_f(x, th, P):
        return np.zeros((P.shape[0], 1))

    def grad_y_f(x, th, P):
        pa, pb, ps = split_columns(P)
        return (w_f * ps * (pa @ th - pb))[:, None] * pa

    def grad_x_g(x, th, P):
        return np.full((P.shape[0], 1), R(th))

    def grad_y_g(x, th, P):
        pa, pb, ps = split_columns(P)
        return ((w_g * (1 - ps) * (pa @ th - pb))[:, None] * pa
                + (x[0] * dR(th) + 2.0 * eps_reg * th)[None, :])

    def f(x, th, P):
        pa, pb, ps = split_columns(P)
        return w_f * ps * 0.5 * (pa @ th - pb) ** 2

    def g(x, th, P):
        pa, pb, ps = split_columns(P)
        return w_g * (1 - ps) * 0.5 * (pa @ th - pb) ** 2 + x[0] * R(th) + eps_reg * float(th @ th)

    def hess_xy_g(x, th, P):
        return dR(th)[None, :]

    def hess_yy_g(x, th, P):
        pa, _, ps = split_columns(P)
        m = P.shape[0]
        G = (pa * (w_g * (1 - ps))[:, None]).T @ pa / m
        return G + x[0] * d2R(th) + 2.0 * eps_reg * np.eye(p)

    affine = None
    if regularizer == "ridge":
        def affine(x, P):
            pa, pb, ps = split_columns(P)
            m = P.shape[0]
            wg = w_g * (1 - ps)
            wf = w_f * ps
            hg = (pa * wg[:, None]).T @ pa / m + 2.0 * (x[0] + eps_reg) * np.eye(p)
            hf = (pa * wf[:, None]).T @ pa / m
            return AffineInner(hf, (wf * pb)[:, None] * pa, hg, (wg * pb)[:, None] * pa, shared=False)

    def hyperobjective(omega):
        th = theta_star(omega)
        return 0.5 * float(th @ G_val @ th - 2.0 * c_val @ th + bb_val)

    refs = {"y_star": theta_star, "y_lambda": theta_lambda, "hyperobjective": hyperobjective}
    if regularizer == "ridge":
        def hypergradient(omega):
            w = float(np.ravel(omega)[0])
            H = G_tr + 2.0 * (w + eps_reg) * np.eye(p)
            th = np.linalg.solve(H, c_tr)
            # d th / d w = -H^{-1} (2 th)
            dth = -np.linalg.solve(H, 2.0 * th)
            return np.array([float((G_val @ th - c_val) @ dth)])
        refs["hypergradient"] = hypergradient

    if from_data:
        warnings.warn(f"bounds declared from the data (not private): {from_data}", UserWarning, stacklevel=2)
    return BilevelProblem(
        name=f"reg_tuning_{regularizer}", dim_x=1, dim_y=p,
        grad_x_f=grad_x_f, grad_y_f=grad_y_f, grad_x_g=grad_x_g, grad_y_g=grad_y_g,
        constants=constants, feasible_x=ConvexSet.nonneg_orthant(1), inner_domain_radius=R_th,
        f=f, g=g, hess_xy_g=hess_xy_g, hess_yy_g=hess_yy_g, affine_inner=affine, references=refs,
        metadata={
            "regularizer": regularizer, "omega_max": omega_max, "eps_reg": eps_reg, "smoothing": smoothing,
            "n_train": n_tr, "n_val": n_val, "theta_radius": R_th, "R_max": R_max,
            "curvature_floor": floor, "declared_from_data": from_data,
            "inner_constants": {"L0f": L0f_y, "L0g": L0g_y, "L1f": L1f_y},
            "domain": {"x_box": [0.0, omega_max]},
        },
    )


def make_ridge_data(n: int, p: int = 3, val_fraction: float = 0.5, noise: float = 0.1,
                    val_shrink: float = 0.5, seed: int = 0, features: str = "gaussian") -> Dataset:
    """Synthetic linear data. Validation labels follow a shrunk coefficient vector
    ``val_shrink * theta0``, so some regularization helps and the best weight is interior.

    ``features="gaussian"`` draws standard normals rescaled into the ball of
    radius 2; ``features="sign"`` draws independent signs scaled by ``1/sqrt(p)``,
    which puts every feature vector on the unit sphere.
    """
    rng = np.random.default_rng(seed)
    if features == "gaussian":
        a = rng.standard_normal((n, p))
        a /= np.maximum(1.0, np.linalg.norm(a, axis=1, keepdims=True) / 2.0)
    elif features == "sign":
        a = rng.choice([-1.0, 1.0], size=(n, p)) / math.sqrt(p)
    else:
        raise ValueError(f"unknown feature distribution {features!r}")
    theta0 = np.ones(p) / math.sqrt(p)
    s = (np.arange(n) >= n - int(round(val_fraction * n))).astype(float)
    coef = np.where(s[:, None] == 1, val_shrink * theta0, theta0)
    b = np.sum(a * coef, axis=1) + noise * np.clip(rng.standard_normal(n), -3, 3)
    return Dataset(np.column_stack([a, b, s]))


def load_tuning_csv(path, label: str, split: Optional[str] = None, val_fraction: float = 0.5,
                    seed: int = 0) -> Dataset:
    """Read a headed CSV into the ``(a, b, s)`` record layout.

    Every column other than ``label`` and ``split`` is a feature. Without a
    split column a seeded random ``val_fraction`` of rows is marked validation.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if len(rows) < 3:
        raise ValueError(f"{path}: need a header and at least two rows")
    header = [h.strip() for h in rows[0]]
    if label not in header:
        raise ValueError(f"{path}: label column {label!r} not in header {header}")
    if split is not None and split not in header:
        raise ValueError(f"{path}: split column {split!r} not in header {header}")
    body = np.array([[float(c) for c in r] for r in rows[1:]])
    feats = [i for i, h in enumerate(header) if h not in (label, split)]
    if not feats:
        raise ValueError(f"{path}: no feature columns")
    b = body[:, header.index(label)]
    if split is not None:
        s = body[:, header.index(split)]
    else:
        n = body.shape[0]
        s = np.zeros(n)
        perm = np.random.default_rng(seed).permutation(n)
        s[perm[: int(round(val_fraction * n))]] = 1.0
    return Dataset(np.column_stack([body[:, feats], b, s]))


def grid_search_omega(problem: BilevelProblem, grid=None, refine: bool = True) -> float:
    """Minimizer of the validation loss over the weight by exhaustive search,
    refined by golden-section search around the best grid point."""
    F = problem.references["hyperobjective"]
    if grid is None:
        grid = np.concatenate([[0.0], np.logspace(-4, 2, 601)])
    vals = np.array([F(w) for w in grid])
    k = int(np.argmin(vals))
    if not refine:
        return float(grid[k])
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    phi = (math.sqrt(5) - 1) / 2
    for _ in range(100):
        m1, m2 = hi - phi * (hi - lo), lo + phi * (hi - lo)
        if F(m1) <= F(m2):
            hi = m2
        else:
            lo = m1
    return float((lo + hi) / 2)


def private_reg_tuning_step(omega_t: float, theta_hat, theta_hat_lambda, eta: float, lam: float,
                            sigma2: float, rng: np.random.Generator, regularizer: str = "ridge",
                            smoothing: float = 1e-2, clip: Optional[float] = None) -> float:
    """``max{0, w - eta lam N(R(th_lam) - R(th), sigma^2 / lam^2)}``.

    The Gaussian is drawn as ``lam (R(th_lam) - R(th)) + sigma z`` with a single
    standard normal ``z`` from ``rng``, which is ``lam`` times the displayed draw.
    With ``clip`` the un-noised value is first clipped to ``[-clip, clip]``.
    """
    if omega_t < 0:
        raise ValueError("omega must be non-negative")
    R = _reg(regularizer, smoothing)[0]
    m = R(np.asarray(theta_hat_lambda, float)) - R(np.asarray(theta_hat, float))
    v = lam * m
    if clip is not None:
        v = min(max(v, -clip), clip)
    v = add_gaussian_noise(np.array([v]), sigma2, rng)[0]
    return max(0.0, omega_t - eta * v)


@dataclass
class TuningConfig:
    lam: float
    eta: float
    T: int
    omega0: float = 0.0
    budget: Optional[PrivacyBudget] = None
    seed: int = 0
    noiseless: bool = False
    clip: Optional[float] = None
    inner_overrides: dict = field(default_factory=dict)


@dataclass
class TuningReport:
    omegas: list
    displacements: list
    t_out: int
    omega_out: float
    ledger: PrivacyLedger
    params: OuterParams
    thetas: list

    def to_dict(self) -> dict:
        return {"omegas": self.omegas, "displacements": self.displacements, "t_out": self.t_out,
                "omega_out": self.omega_out, "ledger": self.ledger.to_dict(), "params": self.params.to_dict()}


def tuning_params(problem: BilevelProblem, n: int, cfg: TuningConfig) -> OuterParams:
    """Outer parameters for the tuning loop.

    The per-sample estimator is ``lam (R(th_lam) - R(th))`` for every record, so
    the default clip ``lam * R_max`` never binds and gives sensitivity
    ``2 lam R_max / n``. A smaller ``cfg.clip`` trades possible bias for less noise.
    """
    if cfg.budget is None and not cfg.noiseless:
        raise ValueError("a private tuning run needs a budget")
    # a noiseless run still takes its inner schedule from a budget
    budget = cfg.budget or NOISELESS_SCHEDULE_BUDGET
    clip = cfg.lam * problem.metadata["R_max"] if cfg.clip is None else float(cfg.clip)
    if clip <= 0:
        raise ValueError("clip must be positive")
    eps_in, delta_in = split_outer_budget(budget, cfg.T)
    sens = 2.0 * clip / n
    eps_noise = min(eps_in, 1.0 - 1e-9)
    sigma2 = 0.0 if cfg.noiseless else calibrate_gaussian(sens, eps_noise, delta_in)
    return OuterParams(
        lam=float(cfg.lam), sigma2=sigma2, eta=float(cfg.eta), T=int(cfg.T), alpha=float("nan"), b_out=None,
        eps_inner=eps_in, delta_inner=delta_in, eps_working=eps_in * math.sqrt(18 * cfg.T),
        delta_working=delta_in * 3 * (cfg.T + 1), sensitivity=sens, eps_noise=eps_noise, L_smooth=float("nan"),
        clip=clip, constants={"sigma2": sigma2} if cfg.noiseless else {},
        notes=("noiseless run: not private",) if cfg.noiseless else (),
    )


def run_private_reg_tuning(problem: BilevelProblem, dataset: Dataset, cfg: TuningConfig) -> TuningReport:
    n = dataset.n
    params = tuning_params(problem, n, cfg)
    overrides = dict(cfg.inner_overrides)
    if cfg.noiseless:
        overrides["C_sigma"] = 0.0
    inner_p = inner_params_for(problem, n, params, None, overrides)
    ledger = PrivacyLedger(round_rule="advanced", hard_budget=None if cfg.noiseless else cfg.budget)
    reg, smooth = problem.metadata["regularizer"], problem.metadata["smoothing"]
    noise_root = streams.stream(cfg.seed, streams.OUTER_NOISE)
    omega = max(0.0, float(cfg.omega0))
    omegas, disps, thetas = [omega], [], []
    for t in range(cfg.T):
        x = np.array([omega])
        obj_g, obj_pen = inner_objectives(problem, dataset, x, params.lam)
        led = None if cfg.noiseless else ledger
        th = dp_loc_sgd(obj_g, problem.inner_center, inner_p["g"], streams.stream(cfg.seed, streams.INNER_G, t),
                        ledger=led, label="inner_g", round_id=t).y
        th_lam = dp_loc_sgd(obj_pen, problem.inner_center, inner_p["penalty"],
                            streams.stream(cfg.seed, streams.INNER_PENALTY, t),
                            ledger=led, label="inner_penalty", round_id=t).y
        if not cfg.noiseless:
            ledger.record("outer_noise", params.eps_noise, params.delta_inner, "basic", round=t)
        new = private_reg_tuning_step(omega, th, th_lam, params.eta, params.lam, params.sigma2,
                                      streams.child(noise_root, t), reg, smooth, params.clip)
        disps.append(abs(new - omega))
        thetas.append((th.tolist(), th_lam.tolist()))
        omega = new
        omegas.append(omega)
    t_out = select_output(disps)
    return TuningReport(omegas, disps, t_out, omegas[t_out], ledger, params, thetas)
