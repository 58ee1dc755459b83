"""Synthetic min-max testbed with exactly known constants, and bound checks.

The problem is

    L(theta, x; x_i) = 1/2 theta'A theta + b'theta + theta'B x - mu/2 ||x - x_i||^2

with the inner variable restricted to the box ||x - x_i||_inf <= eps. For
fixed theta it is mu-strongly concave in x and its maximizer is the clamp of
x_i + B'theta/mu onto the box. All smoothness constants follow from A, B and
mu in closed form, so every bound below can be evaluated exactly and must
hold on every probed step.

Probe trajectories use plain SGD, theta <- theta - eta * clip(g_hat, M),
where g_hat averages the clean and adversarial parameter gradients of a
with-replacement mini-batch of anchors. Clipping at M makes the bounded
gradient hypothesis true by construction; M is chosen large enough that it
rarely binds (the number of clipped steps is reported).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from .adversary import AttackConfig, StepMode, perturb

log = logging.getLogger(__name__)

# Relative slack for floating-point rounding when comparing against a bound.
FP_SLACK = 1e-9


# ---------------------------------------------------------------- problem


@dataclass
class QuadraticMinMax:
    A: np.ndarray  # (p, p) symmetric positive definite
    B: np.ndarray  # (p, q) coupling
    b: np.ndarray  # (p,)
    mu: float
    anchors: np.ndarray  # (n, q)
    eps: float

    def __post_init__(self) -> None:
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64)
        self.anchors = np.atleast_2d(np.asarray(self.anchors, dtype=np.float64))
        if self.mu <= 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")
        p, q = self.B.shape
        if self.A.shape != (p, p) or self.b.shape != (p,) or self.anchors.shape[1] != q:
            raise ValueError("inconsistent problem dimensions")
        if not np.allclose(self.A, self.A.T):
            raise ValueError("A must be symmetric")

    @property
    def p(self) -> int:
        return self.B.shape[0]

    @property
    def q(self) -> int:
        return self.B.shape[1]

    @property
    def n(self) -> int:
        return self.anchors.shape[0]

    @classmethod
    def random(cls, seed: int = 0, p: int = 4, q: int = 2, n: int = 64, mu: float = 1.0, eps: float = 0.5,
               coupling: float = 1.0, curvature: tuple[float, float] = (0.5, 1.0)) -> QuadraticMinMax:
        rng = np.random.default_rng(seed)
        Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
        A = Q @ np.diag(rng.uniform(*curvature, size=p)) @ Q.T
        A = 0.5 * (A + A.T)
        B = rng.standard_normal((p, q))
        B *= coupling / np.linalg.norm(B, 2)
        b = rng.standard_normal(p)
        anchors = rng.standard_normal((n, q))
        return cls(A, B, b, mu, anchors, eps)

    # -- objective and partial gradients; x and x_i broadcast over leading axes
    def loss(self, theta, x, xi) -> np.ndarray:
        """L(theta, x; x_i) for one theta (p,) and points x, x_i of shape (..., q)."""
        theta = np.asarray(theta, dtype=np.float64)
        d = np.asarray(x) - xi
        quad = 0.5 * theta @ self.A @ theta + self.b @ theta
        return quad + np.asarray(x) @ (theta @ self.B) - 0.5 * self.mu * np.sum(d * d, axis=-1)

    def grad_theta(self, theta, x):
        """Per-example parameter gradient A theta + b + B x; x is (..., m, q), theta (..., p)."""
        theta = np.asarray(theta)
        return (theta @ self.A + self.b)[..., None, :] + np.asarray(x) @ self.B.T

    def grad_x(self, theta, x, xi):
        """B' theta - mu (x - x_i); theta (..., p), x and xi (..., m, q)."""
        return (np.asarray(theta) @ self.B)[..., None, :] - self.mu * (np.asarray(x) - xi)

    def inner_argmax(self, theta, xi):
        return inner_argmax_analytic(self, theta, xi)

    def loss_D(self, theta) -> np.ndarray:
        """Half clean, half worst-case loss averaged over all anchors."""
        theta = np.asarray(theta)
        xs = inner_argmax_analytic(self, theta, self.anchors)
        x0 = np.broadcast_to(self.anchors, xs.shape)
        quad = 0.5 * np.einsum("...p,pq,...q->...", theta, self.A, theta) + theta @ self.b
        tb = theta @ self.B
        d = xs - self.anchors
        worst = (xs @ tb[..., :, None])[..., 0] - 0.5 * self.mu * np.sum(d * d, axis=-1)
        clean = (x0 @ tb[..., :, None])[..., 0]
        return quad + 0.5 * np.mean(worst + clean, axis=-1)

    def grad_D(self, theta) -> np.ndarray:
        """Danskin gradient of loss_D: parameter gradient at the exact maximizers."""
        theta = np.asarray(theta)
        xs = inner_argmax_analytic(self, theta, self.anchors)
        xbar = 0.5 * (xs.mean(axis=-2) + self.anchors.mean(axis=0))
        return theta @ self.A + self.b + xbar @ self.B.T

    def minimize_D(self, theta0=None) -> tuple[np.ndarray, float]:
        """Global minimum of loss_D (convex: a max of convex functions of theta)."""
        x0 = np.zeros(self.p) if theta0 is None else np.asarray(theta0, dtype=np.float64)
        res = optimize.minimize(lambda t: float(self.loss_D(t)), x0, jac=lambda t: self.grad_D(t),
                                method="BFGS", options={"gtol": 1e-13, "maxiter": 10_000})
        theta = res.x
        # polish with exact gradient steps; each is a descent step for an L-smooth convex function
        L = smoothness_constant(self)
        for _ in range(2000):
            g = self.grad_D(theta)
            if np.linalg.norm(g) < 1e-14:
                break
            theta = theta - g / L
        return theta, float(self.loss_D(theta))


def inner_argmax_analytic(problem: QuadraticMinMax, theta, xi) -> np.ndarray:
    """clamp(x_i + B'theta/mu, x_i - eps, x_i + eps), broadcasting over anchors."""
    if problem.mu <= 0:
        raise ValueError("mu must be > 0")
    theta = np.asarray(theta, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    shift = theta @ problem.B / problem.mu
    if xi.ndim >= 2:
        shift = shift[..., None, :]
    return np.clip(xi + shift, xi - problem.eps, xi + problem.eps)


def inner_argmax_bruteforce(problem: QuadraticMinMax, theta, xi, grid_n: int = 201) -> np.ndarray:
    """Exhaustive search over a grid_n^q lattice on the eps-box around x_i."""
    if problem.q > 2:
        raise ValueError(f"brute force supports q <= 2, problem has q={problem.q}")
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    theta = np.asarray(theta, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    axis = np.linspace(-problem.eps, problem.eps, grid_n)
    mesh = np.stack(np.meshgrid(*([axis] * problem.q), indexing="ij"), axis=-1).reshape(-1, problem.q)
    cand = xi + mesh
    d = cand - xi
    values = cand @ (theta @ problem.B) - 0.5 * problem.mu * np.sum(d * d, axis=1)
    return cand[int(np.argmax(values))]


# ---------------------------------------------------------------- constants


@dataclass
class LipschitzConstants:
    mu: float
    L_xtheta: float
    L_thetatheta: float
    L_thetax: float
    L_xx: float
    M: float | None = None
    sigma: float | None = None
    lam: float | None = None
    delta: float | None = None
    provenance: dict[str, str] = field(default_factory=dict)
    stats: dict[str, dict] = field(default_factory=dict)

    @property
    def L(self) -> float:
        """Smoothness of the worst-case loss: L_tt + L_xt L_tx / (2 mu)."""
        return self.L_thetatheta + self.L_xtheta * self.L_thetax / (2.0 * self.mu)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["L"] = self.L
        return d


def smoothness_constant(problem: QuadraticMinMax) -> float:
    return estimate_constants(problem).L


def estimate_constants(problem: QuadraticMinMax) -> LipschitzConstants:
    """Closed-form constants of the quadratic testbed."""
    a = float(np.linalg.norm(problem.A, 2))
    bnorm = float(np.linalg.norm(problem.B, 2))
    names = ("mu", "L_xtheta", "L_thetatheta", "L_thetax", "L_xx")
    return LipschitzConstants(problem.mu, bnorm, a, bnorm, problem.mu, provenance={k: "exact" for k in names})


def gradient_variance(problem: QuadraticMinMax, theta, batch: int) -> np.ndarray:
    """Exact E||g - grad_D||^2 of the exact-adversary gradient, with-replacement batches."""
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    xs = inner_argmax_analytic(problem, theta, problem.anchors)
    v = 0.5 * (xs + problem.anchors) @ problem.B.T  # per-anchor part of g
    centered = v - v.mean(axis=-2, keepdims=True)
    return np.sum(centered * centered, axis=(-1, -2)) / problem.n / batch


def estimate_sigma(problem: QuadraticMinMax, center, radius: float, batch: int, grid_per_axis: int = 9,
                   n_random: int = 20_000, seed: int = 0) -> float:
    """Max over a theta-grid (plus random points) of the gradient standard deviation."""
    axis = np.linspace(-radius, radius, grid_per_axis)
    grid = np.stack(np.meshgrid(*([axis] * problem.p), indexing="ij"), axis=-1).reshape(-1, problem.p)
    rng = np.random.default_rng(seed)
    extra = rng.uniform(-radius, radius, size=(n_random, problem.p))
    pts = np.asarray(center) + np.concatenate([grid, extra])
    return float(np.sqrt(gradient_variance(problem, pts, batch).max()))


def gradient_bound(problem: QuadraticMinMax, center, radius: float) -> float:
    """Upper bound on ||g_hat|| for theta in the inf-norm box of given radius.

    ||A theta + b + B xbar|| <= ||A center + b|| + ||A|| ||theta - center|| + ||B|| max ||x||.
    """
    center = np.asarray(center)
    xmax = float(np.max(np.linalg.norm(np.abs(problem.anchors) + problem.eps, axis=1)))
    return float(np.linalg.norm(center @ problem.A + problem.b)
                 + np.linalg.norm(problem.A, 2) * radius * math.sqrt(problem.p)
                 + np.linalg.norm(problem.B, 2) * xmax)


# ---------------------------------------------------------------- reports


@dataclass
class CheckResult:
    name: str
    bound: float
    measured_max: float
    violations: int
    checked: int
    max_ratio: float  # largest measured / bound
    mean_ratio: float
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0


@dataclass
class ProbeReport:
    checks: list[CheckResult] = field(default_factory=list)
    constants: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(c.violations for c in self.checks)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def add(self, check: CheckResult) -> CheckResult:
        self.checks.append(check)
        return check

    def extend(self, other: ProbeReport) -> ProbeReport:
        self.checks.extend(other.checks)
        self.notes.extend(other.notes)
        self.constants.update(other.constants)
        return self

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "violations": self.violations,
            "constants": self.constants,
            "checks": [asdict(c) | {"passed": c.passed} for c in self.checks],
            "notes": self.notes,
        }

    def table(self) -> str:
        rows = [f"{'check':<34} {'bound':>12} {'measured':>12} {'max ratio':>10} {'viol':>6} {'checked':>9}"]
        for c in self.checks:
            rows.append(f"{c.name:<34} {c.bound:>12.5g} {c.measured_max:>12.5g} {c.max_ratio:>10.4f} "
                        f"{c.violations:>6d} {c.checked:>9d}")
        rows.append(f"total violations: {self.violations}")
        return "\n".join(rows)


def compare(name: str, measured, bound, extra: dict | None = None) -> CheckResult:
    """Elementwise measured <= bound * (1 + FP_SLACK); bound may broadcast."""
    measured, bound_arr = np.broadcast_arrays(np.asarray(measured, dtype=np.float64),
                                              np.asarray(bound, dtype=np.float64))
    measured, bound_arr = measured.ravel(), bound_arr.ravel()
    if measured.size == 0:
        return CheckResult(name, float(np.max(bound_arr, initial=0.0)), 0.0, 0, 0, 0.0, 0.0, extra or {})
    viol = int(np.count_nonzero(measured > bound_arr * (1.0 + FP_SLACK) + 1e-300))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound_arr > 0, measured / bound_arr, np.where(measured > 0, np.inf, 0.0))
    return CheckResult(name, float(bound_arr.max()), float(measured.max()), viol, int(measured.size),
                       float(ratio.max()), float(ratio.mean()), extra or {})


# ---------------------------------------------------------------- lambda


def measure_lambda(problem: QuadraticMinMax, theta, x_hat, x_star, xi) -> np.ndarray:
    """<x* - x_hat, grad_x L(theta, x_hat)> per example; a measurement, not a bound."""
    g = problem.grad_x(theta, x_hat, xi)
    return np.sum((np.asarray(x_star) - x_hat) * g, axis=-1)


# ---------------------------------------------------------------- probe runs


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 10_000
    tau: int = 1
    eta: float | None = None  # None: 1/L
    M: float | None = None  # None: derived from the theta region
    batch: int = 8
    attack: str = "pgd"  # pgd | exact
    alpha_scale: float = 0.5  # PGD step alpha = alpha_scale / mu
    random_init: bool = True
    seeds: int = 1
    seed: int = 0


@dataclass
class Trajectory:
    """Probe run record; arrays have a leading seed axis."""

    thetas: np.ndarray  # (R, T+1, p)
    batches: np.ndarray  # (R, T, b) anchor indices consumed at each step
    x_hat: np.ndarray  # (R, T, b, q) adversarial points consumed at each step
    g_hat: np.ndarray  # (R, T, p) unclipped mini-batch gradient
    lam: np.ndarray  # (R, T) max lambda over the batch crafted for step t
    clipped: int
    eta: float
    M: float
    tau: int

    @property
    def steps(self) -> int:
        return self.g_hat.shape[1]


def probe_region(problem: QuadraticMinMax, theta0) -> tuple[np.ndarray, float]:
    """Center and inf-radius of a box holding theta0 and the minimizer with margin."""
    theta_star, _ = problem.minimize_D(theta0)
    center = 0.5 * (np.asarray(theta0) + theta_star)
    radius = float(np.max(np.abs(theta_star - center))) + 1.0
    return center, radius


def default_M(problem: QuadraticMinMax, theta0) -> float:
    center, radius = probe_region(problem, theta0)
    return gradient_bound(problem, center, radius)


def run_probe(problem: QuadraticMinMax, cfg: ProbeConfig, theta0=None) -> Trajectory:
    """Clipped SGD on the quadratic with a tau-stale adversary; seeds vectorized."""
    const = estimate_constants(problem)
    eta = 1.0 / const.L if cfg.eta is None else cfg.eta
    theta0 = np.zeros(problem.p) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    M = default_M(problem, theta0) if cfg.M is None else cfg.M
    R, T, bsz, tau = cfg.seeds, cfg.steps, cfg.batch, cfg.tau
    if tau < 0:
        raise ValueError("tau must be >= 0")
    rng = np.random.default_rng(cfg.seed)
    batches = rng.integers(0, problem.n, size=(R, T, bsz))
    attack = AttackConfig(epsilon=problem.eps, alpha=cfg.alpha_scale / problem.mu, random_init=cfg.random_init,
                          step_mode=StepMode.RAW, clamp_domain=None)
    thetas = np.empty((R, T + 1, problem.p))
    thetas[:, 0] = theta0
    x_hat = np.empty((R, T, bsz, problem.q))
    g_hat = np.empty((R, T, problem.p))
    lam = np.empty((R, T))
    clipped = 0

    def craft(target: int, theta_src: np.ndarray) -> None:
        xi = problem.anchors[batches[:, target]]  # (R, b, q)
        xs = inner_argmax_analytic(problem, theta_src, xi)
        if cfg.attack == "exact":
            adv = xs
        else:
            def grad_fn(x, _labels):
                return problem.grad_x(theta_src, x, xi)

            adv = perturb(xi, None, attack, grad_fn, [cfg.seed, 7, target])
        x_hat[:, target] = adv
        lam[:, target] = measure_lambda(problem, theta_src, adv, xs, xi).max(axis=-1)

    for t in range(min(tau, T)):
        craft(t, thetas[:, 0])
    for t in range(T):
        theta = thetas[:, t]
        if tau == 0:
            craft(t, theta)
        xi = problem.anchors[batches[:, t]]
        g = 0.5 * (problem.grad_theta(theta, xi) + problem.grad_theta(theta, x_hat[:, t])).mean(axis=1)
        g_hat[:, t] = g
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        scale = np.minimum(1.0, M / np.maximum(norm, 1e-300))
        clipped += int(np.count_nonzero(scale < 1.0))
        thetas[:, t + 1] = theta - eta * (g * scale)
        if tau > 0 and t + tau < T:
            craft(t + tau, theta)
    return Trajectory(thetas, batches, x_hat, g_hat, lam, clipped, eta, M, tau)


# ---------------------------------------------------------------- checks


def check_drift(problem: QuadraticMinMax, traj: Trajectory, tau: int | None = None) -> ProbeReport:
    """||x*(theta_t) - x*(theta_{t-tau})|| <= (L_xt/mu)||theta_t - theta_{t-tau}|| <= (L_xt/mu) eta tau M."""
    tau = traj.tau if tau is None else tau
    const = estimate_constants(problem)
    thetas = traj.thetas
    if thetas.shape[1] <= tau:
        raise ValueError(f"trajectory of {thetas.shape[1]} points is shorter than tau={tau}")
    k = const.L_xtheta / problem.mu
    report = ProbeReport(constants=const.to_dict())
    now, past = thetas[:, tau:], thetas[:, : thetas.shape[1] - tau]
    xs_now = inner_argmax_analytic(problem, now, problem.anchors)
    xs_past = inner_argmax_analytic(problem, past, problem.anchors)
    lhs = np.linalg.norm(xs_now - xs_past, axis=-1)  # (R, T', n)
    mid = k * np.linalg.norm(now - past, axis=-1)  # (R, T')
    bound = k * traj.eta * tau * traj.M
    report.add(compare(f"drift.intermediate[tau={tau}]", lhs, mid[..., None]))
    report.add(compare(f"drift[tau={tau}]", lhs, bound, {"eta": traj.eta, "M": traj.M, "clipped": traj.clipped}))
    report.add(compare(f"drift.displacement[tau={tau}]", mid, bound))
    return report


def check_smoothness(problem: QuadraticMinMax, n_pairs: int = 10_000, seed: int = 0, scale: float = 2.0,
                     theta1=None, theta2=None) -> ProbeReport:
    """||grad_D(t1) - grad_D(t2)|| <= L ||t1 - t2|| on random pairs."""
    const = estimate_constants(problem)
    rng = np.random.default_rng(seed)
    if theta1 is None:
        center, _ = probe_region(problem, np.zeros(problem.p))
        theta1 = center + scale * rng.standard_normal((n_pairs, problem.p))
        # half the pairs are close together, where clamping switches matter most
        near = theta1 + 10.0 ** rng.uniform(-6, 0, size=(n_pairs, 1)) * rng.standard_normal((n_pairs, problem.p))
        far = center + scale * rng.standard_normal((n_pairs, problem.p))
        theta2 = np.where((np.arange(n_pairs) % 2 == 0)[:, None], near, far)
    theta1, theta2 = np.atleast_2d(theta1), np.atleast_2d(theta2)
    lhs = np.linalg.norm(problem.grad_D(theta1) - problem.grad_D(theta2), axis=-1)
    rhs = const.L * np.linalg.norm(theta1 - theta2, axis=-1)
    report = ProbeReport(constants=const.to_dict())
    ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), 0.0)
    report.add(compare("smoothness", lhs, rhs, {"L": const.L, "empirical_L": float(ratio.max() * const.L)}))
    return report


def check_grad_error(problem: QuadraticMinMax, traj: Trajectory) -> ProbeReport:
    """||g(theta_t) - g_hat|| <= (L_tx/2)(eta tau M L_xt/mu + sqrt(lambda/mu)) on the same batch.

    g uses the exact maximizers at theta_t, g_hat the consumed stale points;
    lambda is the running max of the measured lambda up to step t.
    """
    const = estimate_constants(problem)
    tau = traj.tau
    thetas = traj.thetas[:, :-1]  # theta_t for t < T
    xi = problem.anchors[traj.batches]  # (R, T, b, q)
    xs = inner_argmax_analytic(problem, thetas, xi)
    g_exact = 0.5 * (problem.grad_theta(thetas, xi) + problem.grad_theta(thetas, xs)).mean(axis=-2)
    lhs = np.linalg.norm(g_exact - traj.g_hat, axis=-1)
    lam_run = np.maximum.accumulate(np.maximum(traj.lam, 0.0), axis=1)
    bound = 0.5 * const.L_thetax * (traj.eta * tau * traj.M * const.L_xtheta / problem.mu + np.sqrt(lam_run / problem.mu))
    report = ProbeReport(constants=const.to_dict())
    report.add(compare(f"grad_error[tau={tau}]", lhs, bound,
                       {"lambda_max": float(traj.lam.max()), "lambda_min": float(traj.lam.min())}))
    return report


def rate_bound(const: LipschitzConstants, sigma: float, delta: float, T: int, tau: int, M: float, lam: float) -> float:
    L = const.L
    floor = 0.5 * const.L_thetax ** 2 * (tau * M * const.L_xtheta / (L * const.mu) + math.sqrt(max(lam, 0.0) / const.mu)) ** 2
    return 2.0 * sigma * math.sqrt(L * delta / T) + floor


def rate_step_size(const: LipschitzConstants, sigma: float, delta: float, T: int) -> float:
    L = const.L
    if sigma <= 0:
        return 1.0 / L
    return min(1.0 / L, math.sqrt(delta / (L * sigma * sigma * T)))


def fit_rate(Ts, values) -> dict:
    """Log-log slope of values(T), plain and with a constant floor (a T^s + f, f >= 0)."""
    Ts = np.asarray(Ts, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    slope, intercept = np.polyfit(np.log(Ts), np.log(values), 1)
    out = {"loglog_slope": float(slope), "loglog_intercept": float(intercept)}
    try:
        popt, _ = optimize.curve_fit(
            lambda t, a, s, f: a * t ** s + f, Ts, values,
            p0=(values[0] * math.sqrt(Ts[0]), -0.5, 0.0),
            bounds=([0.0, -3.0, 0.0], [np.inf, 0.0, np.inf]), maxfev=20_000,
        )
        out.update({"fit_a": float(popt[0]), "fit_slope": float(popt[1]), "fit_floor": float(popt[2])})
    except (RuntimeError, ValueError) as exc:  # fit did not converge
        out["fit_error"] = str(exc)
    return out


@dataclass(frozen=True)
class RateConfig:
    Ts: tuple[int, ...] = (250, 500, 1000, 2000, 4000)
    seeds: int = 20
    taus: tuple[int, ...] = (1, 2, 4)
    batch: int = 8
    attack: str = "pgd"
    alpha_scale: float = 0.5
    floor_steps: int = 4000
    seed: int = 0


def stationary_floor(problem: QuadraticMinMax, tau: int, cfg: RateConfig, M: float, theta0) -> float:
    """Mean ||grad_D||^2 over the second half of long runs at eta = 1/L."""
    traj = run_probe(problem, ProbeConfig(steps=cfg.floor_steps, tau=tau, eta=None, M=M, batch=cfg.batch,
                                          attack=cfg.attack, alpha_scale=cfg.alpha_scale, seeds=cfg.seeds,
                                          seed=cfg.seed + 1), theta0)
    half = traj.thetas[:, cfg.floor_steps // 2: cfg.floor_steps]
    g = problem.grad_D(half)
    return float(np.mean(np.sum(g * g, axis=-1)))


def check_rate(problem: QuadraticMinMax, cfg: RateConfig = RateConfig(), theta0=None) -> ProbeReport:
    """Average squared gradient norm against the sublinear-rate bound, per T and tau.

    eta = min(1/L, sqrt(Delta/(L sigma^2 T))); sigma is the max exact gradient
    standard deviation over the theta region; Delta = loss_D(theta0) - min.
    The same random numbers (batches, attack starts) are used for every tau.
    """
    const = estimate_constants(problem)
    theta0 = np.zeros(problem.p) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    center, radius = probe_region(problem, theta0)
    M = gradient_bound(problem, center, radius)
    sigma = estimate_sigma(problem, center, radius, cfg.batch, seed=cfg.seed)
    _, fmin = problem.minimize_D(theta0)
    delta = float(problem.loss_D(theta0)) - fmin
    const.M, const.sigma, const.delta = M, sigma, delta
    const.provenance.update({"M": "constructed (clip level)", "sigma": "exact variance, max over theta region",
                             "delta": "exact (numerical minimum)"})
    report = ProbeReport(constants=const.to_dict())
    rates = {}
    lam_all = 0.0
    outside = 0
    for tau in cfg.taus:
        means = []
        for T in cfg.Ts:
            eta = rate_step_size(const, sigma, delta, T)
            traj = run_probe(problem, ProbeConfig(steps=T, tau=tau, eta=eta, M=M, batch=cfg.batch, attack=cfg.attack,
                                                  alpha_scale=cfg.alpha_scale, seeds=cfg.seeds, seed=cfg.seed), theta0)
            outside += int(np.count_nonzero(np.abs(traj.thetas - center) > radius))
            g = problem.grad_D(traj.thetas[:, :T])
            per_seed = np.mean(np.sum(g * g, axis=-1), axis=1)
            emp = float(per_seed.mean())
            lam = float(max(traj.lam.max(), 0.0))
            lam_all = max(lam_all, lam)
            bound = rate_bound(const, sigma, delta, T, tau, M, lam)
            means.append(emp)
            report.add(compare(f"rate[tau={tau},T={T}]", emp, bound,
                               {"eta": eta, "lambda": lam, "seeds": cfg.seeds, "seed_sd": float(per_seed.std(ddof=1))
                                if cfg.seeds > 1 else 0.0, "clipped": traj.clipped}))
        rates[tau] = {"Ts": list(cfg.Ts), "mean_sq_grad": means, **fit_rate(cfg.Ts, means)}
    floors = {tau: stationary_floor(problem, tau, cfg, M, theta0) for tau in cfg.taus}
    report.constants["lambda"] = lam_all
    report.constants["rates"] = {str(k): v for k, v in rates.items()}
    report.constants["floors"] = {str(k): v for k, v in floors.items()}
    ordered = [floors[t] for t in sorted(floors)]
    mono = sum(1 for a, b in zip(ordered, ordered[1:]) if not b > a)
    report.add(CheckResult("rate.floor_monotone_in_tau", 0.0, float(mono), mono, max(len(ordered) - 1, 0),
                           0.0, 0.0, {"floors": {str(k): v for k, v in floors.items()}}))
    if outside:
        report.notes.append(f"{outside} iterates left the theta region used for sigma and M")
    return report


def decay_slope(report: ProbeReport, tau: int) -> float:
    """Slope of the T-dependent part: the floor-aware fit when available."""
    rate = report.constants["rates"][str(tau)]
    return rate.get("fit_slope", rate["loglog_slope"])


def certify_bounds(problem: QuadraticMinMax, steps: int = 10_000, taus=(1, 2, 4), pairs: int = 10_000,
                   seed: int = 0, attack: str = "pgd") -> ProbeReport:
    """Drift and gradient-error bounds on one clipped run per tau, plus smoothness on random pairs."""
    report = ProbeReport(constants=estimate_constants(problem).to_dict())
    for tau in taus:
        traj = run_probe(problem, ProbeConfig(steps=steps, tau=tau, attack=attack, seed=seed))
        report.extend(check_drift(problem, traj))
        report.extend(check_grad_error(problem, traj))
        report.constants[f"M[tau={tau}]"] = traj.M
        report.constants[f"eta[tau={tau}]"] = traj.eta
        if traj.clipped:
            report.notes.append(f"tau={tau}: gradient clipped at M on {traj.clipped} steps")
    report.extend(check_smoothness(problem, n_pairs=pairs, seed=seed))
    return report


# ---------------------------------------------------------------- neural estimates


def estimate_model_constants(params, batch, n_pairs: int = 100_000, n_param_pairs: int = 200, seed: int = 0,
                             radius: float = 0.05) -> LipschitzConstants:
    """Sampled lower bounds (max observed ratios) for a neural model.

    Input-side ratios are batched: ``n_pairs`` perturbed inputs are
    differentiated in eval-phase BN, where examples do not interact.
    Parameter-side ratios need one evaluation per pair, hence the smaller
    ``n_param_pairs``. These are estimates, not certified constants.
    """
    from .model import Branch, LabeledBatch, Phase, evaluate

    rng = np.random.default_rng(seed)
    x = batch.inputs
    m = x.shape[0]
    rows = rng.integers(0, m, size=n_pairs)
    x1 = x[rows]
    x2 = x1 + rng.uniform(-radius, radius, size=x1.shape)
    y = batch.labels[rows]

    def in_grad(p, xs, ys, chunk=4096):
        parts = []
        for s in range(0, xs.shape[0], chunk):
            parts.append(evaluate(p, LabeledBatch(xs[s:s + chunk], ys[s:s + chunk]), Branch.AUX, Phase.EVAL,
                                  reduction="sum", wrt="input").input_grad)
        return np.concatenate(parts).reshape(xs.shape[0], -1)

    g1, g2 = in_grad(params, x1, y), in_grad(params, x2, y)
    dx = np.linalg.norm((x2 - x1).reshape(n_pairs, -1), axis=1)
    r_xx = np.linalg.norm(g1 - g2, axis=1) / dx

    def flat(grads):
        return np.concatenate([grads[k].ravel() for k in sorted(grads)])

    def perturbed(p, scale):
        q = p.copy()
        for k in q.tensors:
            q.tensors[k] = q.tensors[k] + scale * rng.standard_normal(q.tensors[k].shape)
        return q

    r_tt, r_xt, r_tx, gnorms = [], [], [], []
    small = LabeledBatch(x[: min(m, 64)], batch.labels[: min(m, 64)])
    for _ in range(n_param_pairs):
        p2 = perturbed(params, radius * 0.1)
        e1 = evaluate(params, small, Branch.MAIN, Phase.EVAL)
        e2 = evaluate(p2, small, Branch.MAIN, Phase.EVAL)
        dtheta = np.linalg.norm(flat({k: p2.tensors[k] - params.tensors[k] for k in params.tensors}))
        r_tt.append(np.linalg.norm(flat(e1.param_grads) - flat(e2.param_grads)) / dtheta)
        r_xt.append(np.linalg.norm(e1.input_grad - e2.input_grad) / dtheta)
        xs2 = np.clip(small.inputs + rng.uniform(-radius, radius, size=small.inputs.shape), 0, 1)
        e3 = evaluate(params, LabeledBatch(xs2, small.labels), Branch.MAIN, Phase.EVAL)
        r_tx.append(np.linalg.norm(flat(e1.param_grads) - flat(e3.param_grads))
                    / np.linalg.norm(xs2 - small.inputs))
        gnorms.append(np.linalg.norm(flat(e1.param_grads)))

    def stat(a):
        a = np.asarray(a)
        return {"max": float(a.max()), "mean": float(a.mean()), "p99": float(np.quantile(a, 0.99)), "n": int(a.size)}

    return LipschitzConstants(
        mu=float("nan"),
        L_xtheta=float(np.max(r_xt)),
        L_thetatheta=float(np.max(r_tt)),
        L_thetax=float(np.max(r_tx)),
        L_xx=float(r_xx.max()),
        M=float(np.max(gnorms)),
        provenance={k: "sampled" for k in ("L_xtheta", "L_thetatheta", "L_thetax", "L_xx", "M")}
        | {"mu": "not defined: the inner problem is not concave for neural models"},
        stats={"L_xx": stat(r_xx), "L_thetatheta": stat(r_tt), "L_xtheta": stat(r_xt), "L_thetax": stat(r_tx),
               "M": stat(gnorms)},
    )
