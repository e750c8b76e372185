"""MAP estimation: BFGS with a strong-Wolfe line search, Newton polish, Laplace covariance."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class LineSearchError(RuntimeError):
    """Raised when no step satisfying the Wolfe conditions is found."""

    def __init__(self, message, best_x=None, best_value=None):
        super().__init__(message)
        self.best_x = best_x
        self.best_value = best_value


@dataclass(frozen=True)
class MapOptions:
    gtol: float = 1e-5
    max_iter: int = 500
    newton_polish: int = 40
    restarts: int = 5
    jitter: float = 0.1
    seed: int = 0
    hessian_step: float = 1e-5
    init_hessian: bool = True


@dataclass
class MapResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    iterations: int
    converged: bool
    covariance: np.ndarray
    hessian: np.ndarray
    positive_definite: bool
    message: str = ""
    restarts: int = 0
    evaluations: int = 0
    diagnostics: list[str] = field(default_factory=list)

    @property
    def grad_norm(self) -> float:
        return float(np.max(np.abs(self.grad))) if self.grad.size else 0.0


class _Objective:
    """Negated log density with safe evaluation and an evaluation counter."""

    def __init__(self, value_and_grad):
        self._vg = value_and_grad
        self.count = 0

    def __call__(self, x):
        self.count += 1
        try:
            f, g = self._vg(x)
        except (ArithmeticError, RuntimeError, ValueError):
            return math.inf, None
        if not math.isfinite(f) or not np.all(np.isfinite(g)):
            return math.inf, None
        return -float(f), -np.asarray(g, dtype=float)


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimiser of the cubic through two points with slopes, or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = math.copysign(math.sqrt(rad), b - a)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / denom


def wolfe_search(obj, x, f0, g0, p, step=1.0, c1=1e-4, c2=0.9, max_iter=40):
    """Strong-Wolfe line search along ``p`` (minimisation).

    Returns ``(alpha, f, g)``. Non-finite trial values are treated as
    overshoots and bracket the step from above.
    """
    d0 = float(g0 @ p)
    if d0 >= 0:
        raise LineSearchError("not a descent direction")

    def phi(a):
        f, g = obj(x + a * p)
        return f, g, (float(g @ p) if g is not None else math.nan)

    def zoom(lo, flo, dlo, glo, hi, fhi, dhi):
        for _ in range(max_iter):
            a = None
            if math.isfinite(fhi) and math.isfinite(dhi):
                a = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
            lo_b, hi_b = min(lo, hi), max(lo, hi)
            margin = 0.1 * (hi_b - lo_b)
            if a is None or not (lo_b + margin <= a <= hi_b - margin):
                a = 0.5 * (lo + hi)
            fa, ga, da = phi(a)
            if not math.isfinite(fa) or fa > f0 + c1 * a * d0 or fa >= flo:
                hi, fhi, dhi = a, fa, da
            else:
                if abs(da) <= -c2 * d0:
                    return a, fa, ga
                if da * (hi - lo) >= 0:
                    hi, fhi, dhi = lo, flo, dlo
                lo, flo, dlo, glo = a, fa, da, ga
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        if lo > 0 and flo < f0:
            return lo, flo, glo  # sufficient decrease holds; accept without curvature
        raise LineSearchError("zoom failed to satisfy the Wolfe conditions")

    a_prev, f_prev, d_prev, g_prev = 0.0, f0, d0, g0
    a = step
    for i in range(max_iter):
        fa, ga, da = phi(a)
        if not math.isfinite(fa) or fa > f0 + c1 * a * d0 or (i > 0 and fa >= f_prev):
            return zoom(a_prev, f_prev, d_prev, g_prev, a, fa, da)
        if abs(da) <= -c2 * d0:
            return a, fa, ga
        if da >= 0:
            return zoom(a, fa, da, ga, a_prev, f_prev, d_prev)
        a_prev, f_prev, d_prev, g_prev = a, fa, da, ga
        a = 2.0 * a
    raise LineSearchError("line search did not bracket a step")


def fd_hessian(grad, x, step=1e-5):
    """Symmetrised central-difference Hessian of an analytic gradient."""
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    for i in range(n):
        h = step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        H[i] = (grad(xp) - grad(xm)) / (xp[i] - xm[i])
    return 0.5 * (H + H.T)


def laplace_covariance(neg_hessian):
    """Inverse of the negated log-density Hessian.

    Returns ``(cov, positive_definite, diagnostic)``. When the matrix is not
    positive definite the pseudo-inverse over the positive eigenspace is used.
    """
    w, V = np.linalg.eigh(neg_hessian)
    tol = max(w.max(initial=0.0), 1.0) * neg_hessian.shape[0] * np.finfo(float).eps
    good = w > tol
    if good.all():
        return (V / w) @ V.T, True, ""
    inv = np.where(good, 1.0 / np.where(good, w, 1.0), 0.0)
    cov = (V * inv) @ V.T
    msg = f"Hessian not positive definite: {int((~good).sum())} non-positive eigenvalue(s), min {w.min():.3g}"
    return 0.5 * (cov + cov.T), False, msg


def _modified_newton_step(H, g):
    """Newton step with eigenvalues replaced by their absolute values (floored)."""
    w, V = np.linalg.eigh(H)
    floor = 1e-8 * max(np.max(np.abs(w)), 1.0)
    w = np.maximum(np.abs(w), floor)
    return -(V @ ((V.T @ g) / w))


def _bfgs(obj, x, f, g, H, opts, diag):
    it = 0
    eye_start = H is None
    if H is None:
        H = np.eye(x.size)
    while it < opts.max_iter:
        if np.max(np.abs(g)) < opts.gtol:
            return x, f, g, it, H, True
        p = -H @ g
        if g @ p >= 0:
            diag.append(f"iteration {it}: inverse Hessian reset (ascent direction)")
            H = np.eye(x.size)
            eye_start = True
            p = -g
        step = 1.0
        if eye_start and it == 0:
            step = min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-12))
        try:
            a, f_new, g_new = wolfe_search(obj, x, f, g, p, step=step)
        except LineSearchError:
            if not eye_start:
                diag.append(f"iteration {it}: line search failed, retrying along the gradient")
                H = np.eye(x.size)
                eye_start = True
                continue
            raise LineSearchError(f"line search failed at iteration {it}", x, f)
        s = a * p
        y = g_new - g
        x, f, g = x + s, f_new, g_new
        it += 1
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if eye_start and it == 1:
                H = (sy / float(y @ y)) * np.eye(x.size)
            rho = 1.0 / sy
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s)
        eye_start = False
    return x, f, g, it, H, bool(np.max(np.abs(g)) < opts.gtol)


def map_fit(value_and_grad, x0, opts: MapOptions = MapOptions()) -> MapResult:
    """Maximise a log density from ``x0``.

    ``value_and_grad(x)`` returns the log density and its gradient. The
    inverse Hessian is seeded from a finite-difference Hessian at the start
    point when that is negative definite, so quadratic targets converge in
    one step. Line-search failures trigger up to ``opts.restarts`` seeded
    jittered restarts; the best point found is always reported.
    """
    obj = _Objective(value_and_grad)

    def grad_only(z):
        f, g = obj(z)
        if g is None:
            raise ArithmeticError("non-finite gradient in Hessian stencil")
        return g

    rng = np.random.default_rng(np.random.SeedSequence([opts.seed, 7]))
    x = np.asarray(x0, dtype=float).copy()
    f, g = obj(x)
    if g is None:
        raise ValueError("log density is not finite at the initial point")
    diag: list[str] = []
    best = (x, f, g)
    total_it, restart, converged, message = 0, 0, False, ""
    start = x
    while True:
        H0 = None
        if opts.init_hessian:
            try:
                Hs = fd_hessian(grad_only, start, opts.hessian_step)
                w, V = np.linalg.eigh(Hs)
                if w.min() > 0:
                    H0 = (V / w) @ V.T
            except ArithmeticError:
                pass
        try:
            xs, fs, gs = start, *obj(start)
            if gs is None:
                raise LineSearchError("restart point is not finite", *best[:2])
            x, f, g, it, _, converged = _bfgs(obj, xs, fs, gs, H0, opts, diag)
            total_it += it
            if f < best[1]:
                best = (x, f, g)
            break
        except LineSearchError as exc:
            if exc.best_x is not None and exc.best_value < best[1]:
                best = (exc.best_x, exc.best_value, obj(exc.best_x)[1])
            diag.append(str(exc))
            if restart >= opts.restarts:
                message = f"line search failed after {restart} restarts"
                break
            restart += 1
            start = best[0] + opts.jitter * rng.standard_normal(best[0].size)
    x, f, g = best

    # Newton polish with the finite-difference Hessian; it is needed for the covariance anyway.
    Hess = fd_hessian(grad_only, x, opts.hessian_step)
    for _ in range(opts.newton_polish):
        if np.max(np.abs(g)) < opts.gtol:
            break
        step = _modified_newton_step(Hess, g)
        # near the optimum the predicted decrease can fall below rounding noise
        # in the objective; there a smaller gradient is the acceptance test
        noise = 1e-11 * max(1.0, abs(f))
        a = 1.0
        for _ in range(40):
            fn, gn = obj(x + a * step)
            if gn is not None and (fn <= f + 1e-4 * a * float(g @ step)
                                   or (fn <= f + noise and np.max(np.abs(gn)) < 0.5 * np.max(np.abs(g)))):
                break
            a *= 0.5
        else:
            diag.append("Newton polish: no decrease along the Newton direction")
            break
        x, f, g = x + a * step, fn, gn
        total_it += 1
        Hess = fd_hessian(grad_only, x, opts.hessian_step)
    converged = bool(np.max(np.abs(g)) < opts.gtol)
    cov, pd, msg = laplace_covariance(Hess)
    if msg:
        diag.append(msg)
    if not converged and not message:
        message = f"gradient max-norm {np.max(np.abs(g)):.3g} above tolerance {opts.gtol:g}"
    for d in diag:
        log.info(d)
    return MapResult(x=x, value=-f, grad=-g, iterations=total_it, converged=converged, covariance=cov,
                     hessian=-Hess, positive_definite=pd, message=message, restarts=restart,
                     evaluations=obj.count, diagnostics=diag)
