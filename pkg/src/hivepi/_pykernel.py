"""Pure numpy projection kernel; reference for and fallback to ``_ckernel``.

State layout per region is ``[S, I_0..I_3, A_0..A_3]`` with stages in
ascending CD4 order. Progression runs from stage ``c`` down to ``c - 1`` at
rate ``tau[c]`` (``tau[0]`` is 0).
"""

from __future__ import annotations

import numpy as np

NSTAGE = 4
NCOMP = 1 + 2 * NSTAGE


def stage_force(X, K, W, xi, omega):
    """Per-stage force of infection for one time point.

    ``X`` is (R, 9), ``K`` the (R,) rate multiplier. Returns ``(lam_stage,
    Z, y, N)`` where ``y`` is ART-adjusted stage prevalence and ``Z = W @ y``.
    """
    N = X.sum(axis=1)
    y = (X[:, 1:5] + (1.0 - omega) * X[:, 5:9]) / N[:, None]
    Z = W @ y
    return K[:, None] * xi[None, :] * Z, Z, y, N


def step(X, lam_stage, astar_stage, mu_S, mu_I, mu_A, eta, tau, E, h, literal):
    """One forward-Euler step without clamping. Returns the (R, 9) update."""
    S = X[:, 0]
    I = X[:, 1:5]
    A = X[:, 5:9]
    Lam = lam_stage.sum(axis=1)
    newinf = np.zeros_like(I)
    if literal:
        newinf[:] = lam_stage * S[:, None]
    else:
        newinf[:, NSTAGE - 1] = Lam * S
    prog_in = np.zeros_like(I)
    prog_in[:, :-1] = tau[None, 1:] * I[:, 1:]
    out = np.empty_like(X)
    out[:, 0] = S + h * (-Lam * S - mu_S * S + E)
    out[:, 1:5] = I + h * (-(mu_S + mu_I) * I - astar_stage * I - tau * I
                           + prog_in + eta * A + newinf)
    out[:, 5:9] = A + h * (-(mu_S + mu_A + eta) * A + astar_stage * I)
    return out


def forward(x0, K, Astar, W, xi, zeta_e, mu_S, mu_I, mu_A, eta, tau, omega, E, h, literal):
    """Project ``x0`` over ``T = len(K)`` grid points.

    Returns ``(X, lam, clamped, shortfall, bad)``: states (T, R, 9), total
    incidence (T, R), a uint8 mask of clamped entries, the total mass removed
    by clamping, and the first grid index holding a non-finite state (-1 when
    the projection is clean). Rows past ``bad`` are NaN.
    """
    T, R = K.shape
    X = np.full((T, R, NCOMP), np.nan)
    lam = np.full((T, R), np.nan)
    clamped = np.zeros((T, R, NCOMP), dtype=np.uint8)
    shortfall = 0.0
    X[0] = x0
    if not np.isfinite(X[0]).all():
        return X, lam, clamped, shortfall, 0
    for k in range(T):
        lam_stage, _, _, _ = stage_force(X[k], K[k], W, xi, omega)
        lam[k] = lam_stage.sum(axis=1)
        if k == T - 1:
            break
        nxt = step(X[k], lam_stage, Astar[k][:, None] * zeta_e[None, :],
                   mu_S, mu_I, mu_A, eta, tau, E, h, literal)
        if not np.isfinite(nxt).all():
            return X, lam, clamped, shortfall, k + 1
        neg = nxt < 0.0
        if neg.any():
            clamped[k + 1] = neg
            shortfall -= nxt[neg].sum()
            nxt[neg] = 0.0
        X[k + 1] = nxt
    if not np.isfinite(lam).all():
        return X, lam, clamped, shortfall, int(np.argmax(~np.isfinite(lam).all(axis=1)))
    return X, lam, clamped, shortfall, -1


def backward(X, clamped, K, Astar, W, xi, zeta_e, mu_S, mu_I, mu_A, eta, tau, omega,
             h, literal, gX, gLam):
    """Reverse-mode adjoint of :func:`forward`.

    ``gX`` (T, R, 9) and ``gLam`` (T, R) are sensitivities of a scalar to the
    stored states and incidence series. Returns ``(g_x0, gK, gAstar)``.
    """
    T, R = K.shape
    gK = np.zeros((T, R))
    gAstar = np.zeros((T, R))
    adj_next = None
    for k in range(T - 1, -1, -1):
        Xk = X[k]
        lam_stage, Z, y, N = stage_force(Xk, K[k], W, xi, omega)
        glam = np.repeat(gLam[k][:, None], NSTAGE, axis=1)
        base = np.zeros((R, NCOMP))
        if adj_next is not None:
            a = adj_next * (1 - clamped[k + 1])
            aS, aI, aA = a[:, 0], a[:, 1:5], a[:, 5:9]
            S, I = Xk[:, 0], Xk[:, 1:5]
            Lam = lam_stage.sum(axis=1)
            astar = Astar[k][:, None] * zeta_e[None, :]
            gS = aS * (1.0 - h * (Lam + mu_S))
            if literal:
                glam += h * S[:, None] * (aI - aS[:, None])
                gS += h * (lam_stage * aI).sum(axis=1)
            else:
                glam += (h * S * (aI[:, -1] - aS))[:, None]
                gS += h * Lam * aI[:, -1]
            gI = aI * (1.0 - h * (mu_S + mu_I + astar + tau)) + h * astar * aA
            gI[:, 1:] += h * tau[None, 1:] * aI[:, :-1]
            gA = aA * (1.0 - h * (mu_S + mu_A + eta)) + h * eta * aI
            gAstar[k] = (h * I * (aA - aI) * zeta_e[None, :]).sum(axis=1)
            base[:, 0] = gS
            base[:, 1:5] = gI
            base[:, 5:9] = gA
        gK[k] = (glam * xi[None, :] * Z).sum(axis=1)
        gZ = glam * K[k][:, None] * xi[None, :]
        gy = W.T @ gZ
        gN = -(gy * y).sum(axis=1) / N
        base[:, 1:5] += gy / N[:, None]
        base[:, 5:9] += gy * (1.0 - omega) / N[:, None]
        base += gN[:, None]
        adj_next = gX[k] + base
    return adj_next, gK, gAstar
