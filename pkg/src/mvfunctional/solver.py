"""Solvers for the penalized quadratic programs that estimate inv(Sigma) mu.

Every solver minimizes some variant of ``0.5 b' C b - b' m`` where ``C`` is a
covariance-type matrix and ``m`` a mean-type vector.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize


class SolverError(RuntimeError):
    pass


@dataclass
class QuadProblem:
    cov: np.ndarray
    mean: np.ndarray

    def __post_init__(self):
        self.cov = np.asarray(self.cov, dtype=np.float64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        p = self.mean.shape[0]
        if self.cov.shape != (p, p):
            raise ValueError(f"cov shape {self.cov.shape} does not match mean length {p}")
        if not (np.all(np.isfinite(self.cov)) and np.all(np.isfinite(self.mean))):
            raise ValueError("problem data contains NaN or infinite entries")
        if not np.allclose(self.cov, self.cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.cov).max())):
            raise ValueError("cov must be symmetric")

    @classmethod
    def from_moments(cls, moments) -> "QuadProblem":
        return cls(moments.cov, moments.mean)

    @property
    def p(self) -> int:
        return self.mean.shape[0]

    def quad(self, beta) -> float:
        return float(0.5 * beta @ self.cov @ beta - beta @ self.mean)

    def grad(self, beta) -> np.ndarray:
        return self.cov @ beta - self.mean


@dataclass(frozen=True)
class SolverConfig:
    lam: float
    gamma: float
    max_iter: int = 50_000
    tol: float = 1e-8
    mcp_concavity: float | None = None

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.mcp_concavity is not None and not self.mcp_concavity > 0:
            raise ValueError("mcp_concavity must be positive")

    def as_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "gamma": self.gamma,
            "max_iter": self.max_iter,
            "tol": self.tol,
            "mcp_concavity": self.mcp_concavity,
        }


@dataclass
class Solution:
    alpha: np.ndarray
    iterations: int
    objective: float
    kkt_residual: float
    ball_active: bool
    converged: bool = True
    history: list = field(default_factory=list, repr=False)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.alpha)


def soft_threshold(v, lam):
    return np.sign(v) * np.maximum(np.abs(v) - lam, 0.0)


def prox_l1_ball(v, lam: float, gamma: float) -> np.ndarray:
    """argmin_x 0.5||x - v||^2 + lam ||x||_1  subject to ||x||_2 <= gamma."""
    x = soft_threshold(np.asarray(v, dtype=np.float64), lam)
    nrm = np.linalg.norm(x)
    if nrm > gamma:
        x *= gamma / nrm
    return x


def lipschitz(cov: np.ndarray, iters: int = 200, seed: int = 0) -> float:
    """Largest absolute eigenvalue of a symmetric matrix by power iteration."""
    p = cov.shape[0]
    if p <= 64:
        return float(np.max(np.abs(np.linalg.eigvalsh(cov))))
    v = np.random.default_rng(seed).standard_normal(p)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = cov @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(nw - est) <= 1e-10 * nw:
            est = nw
            break
        est = nw
    # power iteration underestimates; pad so the step stays safe
    return 1.01 * est


def l1_objective(prob: QuadProblem, beta, lam: float) -> float:
    return prob.quad(beta) + lam * float(np.abs(beta).sum())


def kkt_residual(prob: QuadProblem, beta, lam: float, gamma: float) -> tuple[float, bool]:
    """Sup-norm KKT residual for the l1 + l2-ball problem.

    Minimizes over valid subgradients of ||.||_1 and, when the ball is active,
    over the nonnegative ball multiplier. Returns (residual, ball_active).
    """
    g = prob.grad(beta)
    on = beta != 0
    nrm = np.linalg.norm(beta)
    active = bool(nrm >= gamma * (1 - 1e-9)) and nrm > 0

    def resid(nu):
        r = g + nu * beta
        out_on = np.abs(r[on] + lam * np.sign(beta[on]))
        out_off = np.maximum(np.abs(r[~on]) - lam, 0.0)
        return max(out_on.max(initial=0.0), out_off.max(initial=0.0))

    if not active:
        return resid(0.0), False
    # r_on + nu * beta_on = 0 in least squares, nu >= 0
    a = beta[on]
    b = g[on] + lam * np.sign(a)
    nu = max(0.0, -float(a @ b) / float(a @ a))
    return min(resid(nu), resid(0.0)), True


def _polish_l1(prob: QuadProblem, beta, lam: float, gamma: float):
    """Exact solve on the current support and sign pattern; None if inconsistent."""
    on = np.flatnonzero(beta)
    if on.size == 0:
        return None
    sgn = np.sign(beta[on])
    a = prob.cov[np.ix_(on, on)]
    rhs = prob.mean[on] - lam * sgn
    try:
        sol = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        # singular restricted system: only the ball-constrained branch can pin it down
        sol = np.full(on.size, np.inf)
    if not np.all(np.isfinite(sol)) or np.linalg.norm(sol) > gamma:
        try:
            d, v = np.linalg.eigh(a)
            c = v.T @ rhs
            lo = max(0.0, -d[0]) + 1e-300

            def f(nu):
                with np.errstate(divide="ignore"):
                    return np.linalg.norm(c / (d + nu)) - gamma

            if f(lo) <= 0:
                return None
            hi = lo + 1.0
            while f(hi) > 0:
                hi = lo + 2 * (hi - lo)
            nu = optimize.brentq(f, lo, hi, xtol=1e-15, rtol=1e-15)
            sol = v @ (c / (d + nu))
        except (np.linalg.LinAlgError, ValueError):
            return None
    if np.any(np.sign(sol) != sgn):
        return None
    out = np.zeros_like(beta)
    out[on] = sol
    nrm = np.linalg.norm(out)
    if nrm > gamma:
        out *= gamma / nrm
    return out


def solve_l1(prob: QuadProblem, cfg: SolverConfig, x0=None) -> Solution:
    """l1-penalized quadratic over the l2 ball by accelerated proximal gradient.

    Uses step 1/L, a function-value restart, and a support-restricted exact
    solve once the sign pattern settles. ``converged`` is False when the KKT
    residual did not drop below ``cfg.tol`` within ``cfg.max_iter`` steps; the
    best iterate found is returned in that case.
    """
    lam, gamma = cfg.lam, cfg.gamma
    p = prob.p
    if np.max(np.abs(prob.mean), initial=0.0) <= lam:
        # zero is stationary: grad(0) = -mean lies in the lam-box
        zero = np.zeros(p)
        return Solution(zero, 0, 0.0, kkt_residual(prob, zero, lam, gamma)[0], False)
    L = lipschitz(prob.cov)
    if L <= 0:
        L = 1.0
    step = 1.0 / L

    x = np.zeros(p) if x0 is None else prox_l1_ball(np.asarray(x0, float), 0.0, gamma)
    y = x.copy()
    t = 1.0
    fx = l1_objective(prob, x, lam)
    best_x, best_f = x.copy(), fx
    history = [best_f]
    last_sign = None
    stable = 0
    res = np.inf
    it = 0
    for it in range(1, cfg.max_iter + 1):
        x_new = prox_l1_ball(y - step * prob.grad(y), step * lam, gamma)
        f_new = l1_objective(prob, x_new, lam)
        if f_new > fx:
            # restart momentum from the previous iterate
            t = 1.0
            y = x
            x_new = prox_l1_ball(x - step * prob.grad(x), step * lam, gamma)
            f_new = l1_objective(prob, x_new, lam)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, fx, t = x_new, f_new, t_new
        if fx < best_f:
            best_x, best_f = x.copy(), fx
        history.append(best_f)

        if it % 10 == 0 or it == cfg.max_iter:
            sign = np.sign(x)
            if last_sign is not None and np.array_equal(sign, last_sign):
                stable += 1
            else:
                stable = 0
            last_sign = sign
            res, active = kkt_residual(prob, best_x, lam, gamma)
            if res <= cfg.tol or stable >= 2:
                cand = _polish_l1(prob, best_x if res <= cfg.tol else x, lam, gamma)
                if cand is not None:
                    f_c = l1_objective(prob, cand, lam)
                    r_c, _ = kkt_residual(prob, cand, lam, gamma)
                    if r_c <= min(res, cfg.tol) and f_c <= best_f + 1e-12 * max(1.0, abs(best_f)):
                        if f_c < best_f:
                            history.append(f_c)
                        best_x, best_f = cand, f_c
                        break
                if res <= cfg.tol:
                    break
    res, active = kkt_residual(prob, best_x, lam, gamma)
    return Solution(
        alpha=best_x,
        iterations=it,
        objective=best_f,
        kkt_residual=res,
        ball_active=active,
        converged=res <= cfg.tol,
        history=history,
    )


# --- MCP -------------------------------------------------------------------


def mcp_penalty(beta, lam: float, b: float) -> float:
    a = np.abs(beta)
    inner = lam * a - a * a / (2 * b)
    return float(np.where(a <= b * lam, inner, 0.5 * b * lam * lam).sum())


def mcp_objective(prob: QuadProblem, beta, lam: float, b: float) -> float:
    return prob.quad(beta) + mcp_penalty(beta, lam, b)


def _mcp_concave_grad(beta, lam: float, b: float) -> np.ndarray:
    # gradient of q = rho - lam|.|, which is smooth
    a = np.abs(beta)
    return np.where(a <= b * lam, -beta / b, -lam * np.sign(beta))


def project_l1_ball(v, radius: float) -> np.ndarray:
    """Euclidean projection onto {x : ||x||_1 <= radius}."""
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    u = np.sort(a)[::-1]
    cs = np.cumsum(u)
    k = np.arange(1, u.size + 1)
    rho = np.nonzero(u * k > cs - radius)[0][-1]
    theta = (cs[rho] - radius) / (rho + 1)
    return soft_threshold(v, theta)


def _prox_l1_l1ball(v, thresh: float, radius: float) -> np.ndarray:
    return project_l1_ball(soft_threshold(v, thresh), radius)


def solve_mcp(prob: QuadProblem, cfg: SolverConfig, x0=None) -> Solution:
    """MCP-penalized quadratic over the l1 ball by composite gradient descent.

    The MCP is split as lam|t| plus a smooth concave remainder; the remainder
    joins the gradient step and the l1 part plus ball go through an exact prox.
    Warm-started from the l1 solution unless ``x0`` is given.
    """
    if cfg.mcp_concavity is None:
        raise ValueError("solve_mcp needs cfg.mcp_concavity")
    lam, gamma, b = cfg.lam, cfg.gamma, cfg.mcp_concavity
    L = lipschitz(prob.cov) + 1.0 / b
    step = 1.0 / L
    if x0 is None:
        warm = solve_l1(prob, SolverConfig(lam, gamma, max_iter=cfg.max_iter, tol=max(cfg.tol, 1e-6)))
        x0 = warm.alpha
    x = project_l1_ball(np.asarray(x0, dtype=float), gamma)
    fx = mcp_objective(prob, x, lam, b)
    history = [fx]
    res = np.inf
    it = 0
    for it in range(1, cfg.max_iter + 1):
        g = prob.grad(x) + _mcp_concave_grad(x, lam, b)
        x_new = _prox_l1_l1ball(x - step * g, step * lam, gamma)
        res = float(np.max(np.abs(x_new - x), initial=0.0)) / step
        x = x_new
        fx = mcp_objective(prob, x, lam, b)
        history.append(fx)
        if res <= cfg.tol:
            break
    ball = bool(np.abs(x).sum() >= gamma * (1 - 1e-9)) and np.any(x)
    return Solution(
        alpha=x,
        iterations=it,
        objective=fx,
        kkt_residual=res,
        ball_active=ball,
        converged=res <= cfg.tol,
        history=history,
    )


# --- Dantzig ---------------------------------------------------------------


def solve_dantzig(prob: QuadProblem, lam: float, tol: float = 1e-8) -> Solution:
    """min ||a||_1  s.t.  ||C a - m||_inf <= lam, as an LP in (u, v) >= 0.

    ``kkt_residual`` holds the LP duality gap of the returned solution.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    p = prob.p
    if np.max(np.abs(prob.mean), initial=0.0) <= lam:
        return Solution(np.zeros(p), 0, 0.0, 0.0, False)
    C, m = prob.cov, prob.mean
    # a = u - v;  C(u - v) <= lam + m;  -C(u - v) <= lam - m
    A_ub = np.block([[C, -C], [-C, C]])
    b_ub = np.concatenate([lam + m, lam - m])
    c = np.ones(2 * p)
    res = optimize.linprog(
        c, A_ub=A_ub, b_ub=b_ub, bounds=(0, None), method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status == 2:
        raise SolverError("Dantzig LP is infeasible")
    if res.status != 0:
        raise SolverError(f"Dantzig LP failed: {res.message}")
    z = res.x
    alpha = z[:p] - z[p:]
    primal = float(c @ z)
    y = -res.ineqlin.marginals  # y >= 0 for <= constraints
    dual = -float(b_ub @ y)
    gap = abs(primal - dual)
    return Solution(
        alpha, int(res.nit), float(np.abs(alpha).sum()), gap, False,
        converged=gap <= max(tol, 1e-8 * max(1.0, primal)),
    )


# --- exhaustive l0 ---------------------------------------------------------

L0_MAX_P = 20
_JITTER = 1e-12


def ball_restricted_quadratic(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    """argmin 0.5 x'Ax - b'x  s.t. ||x||_2 <= gamma for symmetric PSD ``a``."""
    k = b.shape[0]
    if k == 0:
        return np.zeros(0)
    aj = a + _JITTER * np.eye(k)
    try:
        x = np.linalg.solve(aj, b)
    except np.linalg.LinAlgError:
        x = np.linalg.lstsq(aj, b, rcond=None)[0]
    if np.linalg.norm(x) <= gamma:
        return x
    d, v = np.linalg.eigh(aj)
    c = v.T @ b
    lo = max(0.0, -d[0])

    def excess(nu):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.linalg.norm(c / (d + nu)) - gamma

    eps = 1e-300
    if excess(lo + eps) <= 0:
        return v @ (c / (d + lo + eps))
    hi = max(1.0, lo * 2)
    while excess(hi) > 0:
        hi *= 2
    nu = optimize.brentq(excess, lo + eps, hi, xtol=1e-16, rtol=1e-15, maxiter=500)
    x = v @ (c / (d + nu))
    nrm = np.linalg.norm(x)
    if nrm > gamma:
        x *= gamma / nrm
    return x


def solve_l0_exhaustive(prob: QuadProblem, s: int, gamma: float) -> Solution:
    """Best quadratic fit over all supports of size <= s inside the l2 ball.

    Ties within 1e-12 go to the lexicographically smallest support.
    """
    p = prob.p
    if p > L0_MAX_P:
        raise ValueError(f"exhaustive l0 search is limited to p <= {L0_MAX_P}, got {p}")
    if not 0 <= s <= p:
        raise ValueError(f"s must lie in [0, {p}]")
    best_alpha = np.zeros(p)
    best_obj = 0.0
    best_supp: tuple = ()
    count = 0
    for k in range(1, s + 1):
        for supp in itertools.combinations(range(p), k):
            count += 1
            idx = list(supp)
            xs = ball_restricted_quadratic(prob.cov[np.ix_(idx, idx)], prob.mean[idx], gamma)
            beta = np.zeros(p)
            beta[idx] = xs
            obj = prob.quad(beta)
            if obj < best_obj - 1e-12 or (abs(obj - best_obj) <= 1e-12 and supp < best_supp):
                best_obj, best_alpha, best_supp = obj, beta, supp
    active = bool(np.linalg.norm(best_alpha) >= gamma * (1 - 1e-9))
    return Solution(best_alpha, count, best_obj, 0.0, active)
