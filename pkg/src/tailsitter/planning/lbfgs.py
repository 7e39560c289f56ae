"""Limited-memory BFGS with a backtracking Armijo line search."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    evaluations: int
    converged: bool
    message: str
    trace: list = field(default_factory=list)


def lbfgs(fun, x0, memory=10, max_iter=3000, rel_tol=1e-5, c1=1e-4, shrink=0.5,
          max_backtracks=60, callback=None):
    """Minimize fun(x) -> (f, g).

    Stops when |g| < rel_tol * max(1, |f|) or after max_iter iterations.
    A failed line search returns the best iterate with converged=False.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun(x)
    evals = 1
    S, Y, rho = [], [], []
    trace = [f]
    if not np.isfinite(f):
        return LbfgsResult(x, f, g, 0, evals, False, "non-finite initial objective", trace)
    for it in range(max_iter):
        gnorm = np.linalg.norm(g)
        if gnorm < rel_tol * max(1.0, abs(f)):
            return LbfgsResult(x, f, g, it, evals, True, "gradient tolerance reached", trace)
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
            a = r * (s @ q)
            alphas.append(a)
            q -= a * y
        if S:
            gamma = (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        else:
            gamma = min(1.0, 1.0 / max(gnorm, 1e-12))
        d = gamma * q
        for (s, y, r), a in zip(zip(S, Y, rho), reversed(alphas)):
            b = r * (y @ d)
            d += s * (a - b)
        d = -d
        slope = g @ d
        if slope >= 0:
            # not a descent direction; restart from steepest descent
            S, Y, rho = [], [], []
            d = -g / max(gnorm, 1e-12)
            slope = g @ d
        step = 1.0
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + step * d
            if np.array_equal(x_new, x):
                break
            f_new, g_new = fun(x_new)
            evals += 1
            if np.isfinite(f_new) and f_new < f and f_new <= f + c1 * step * slope:
                accepted = True
                break
            step *= shrink
        if not accepted:
            if S:
                # drop the curvature memory and retry from steepest descent once
                S, Y, rho = [], [], []
                continue
            return LbfgsResult(x, f, g, it, evals, False, "line search failed", trace)
        s = x_new - x
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            rho.append(1.0 / sy)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
                rho.pop(0)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if callback is not None:
            callback(it, x, f, g)
    gnorm = np.linalg.norm(g)
    ok = gnorm < rel_tol * max(1.0, abs(f))
    return LbfgsResult(x, f, g, max_iter, evals, ok, "iteration limit", trace)
