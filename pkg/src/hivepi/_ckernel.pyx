# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled projection kernel. Same contract as ``hivepi._pykernel``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport isfinite, NAN

cnp.import_array()

cdef enum:
    NS = 4
    NC = 9


cdef inline void _force(const double[:, ::1] X, const double[::1] K, const double[:, ::1] W,
                        const double[::1] xi, double omega, Py_ssize_t R,
                        double[::1] N, double[:, ::1] y, double[:, ::1] Z,
                        double[:, ::1] lam_stage) noexcept nogil:
    cdef Py_ssize_t r, j, c, q
    cdef double s
    for r in range(R):
        s = 0.0
        for q in range(NC):
            s += X[r, q]
        N[r] = s
        for c in range(NS):
            y[r, c] = (X[r, 1 + c] + (1.0 - omega) * X[r, 5 + c]) / s
    for r in range(R):
        for c in range(NS):
            s = 0.0
            for j in range(R):
                s += W[r, j] * y[j, c]
            Z[r, c] = s
            lam_stage[r, c] = K[r] * xi[c] * s


def forward(x0, K, Astar, W, xi, zeta_e, double mu_S, mu_I, mu_A, double eta, tau,
            double omega, E, double h, bint literal):
    cdef const double[:, ::1] Kv = np.ascontiguousarray(K, dtype=np.float64)
    cdef const double[:, ::1] Av = np.ascontiguousarray(Astar, dtype=np.float64)
    cdef const double[:, ::1] Wv = np.ascontiguousarray(W, dtype=np.float64)
    cdef const double[::1] xiv = np.ascontiguousarray(xi, dtype=np.float64)
    cdef const double[::1] zev = np.ascontiguousarray(zeta_e, dtype=np.float64)
    cdef const double[::1] muI = np.ascontiguousarray(mu_I, dtype=np.float64)
    cdef const double[::1] muA = np.ascontiguousarray(mu_A, dtype=np.float64)
    cdef const double[::1] tauv = np.ascontiguousarray(tau, dtype=np.float64)
    cdef const double[::1] Ev = np.ascontiguousarray(E, dtype=np.float64)
    cdef Py_ssize_t T = Kv.shape[0], R = Kv.shape[1]
    Xa = np.full((T, R, NC), np.nan)
    lama = np.full((T, R), np.nan)
    cla = np.zeros((T, R, NC), dtype=np.uint8)
    Xa[0] = x0
    cdef double[:, :, ::1] X = Xa
    cdef double[:, ::1] lam = lama
    cdef unsigned char[:, :, ::1] cl = cla
    cdef double[::1] N = np.empty(R)
    cdef double[:, ::1] y = np.empty((R, NS))
    cdef double[:, ::1] Z = np.empty((R, NS))
    cdef double[:, ::1] ls = np.empty((R, NS))
    cdef double[:, ::1] nxt = np.empty((R, NC))
    cdef Py_ssize_t k, r, c, q
    cdef double S, Lam, a, ni, prog, shortfall = 0.0, v
    cdef int bad = -1
    with nogil:
        for r in range(R):
            for q in range(NC):
                if not isfinite(X[0, r, q]):
                    bad = 0
        if bad < 0:
            for k in range(T):
                _force(X[k], Kv[k], Wv, xiv, omega, R, N, y, Z, ls)
                for r in range(R):
                    Lam = 0.0
                    for c in range(NS):
                        Lam += ls[r, c]
                    lam[k, r] = Lam
                    if not isfinite(Lam):
                        bad = k
                if bad >= 0 or k == T - 1:
                    break
                for r in range(R):
                    S = X[k, r, 0]
                    Lam = lam[k, r]
                    nxt[r, 0] = S + h * (-Lam * S - mu_S * S + Ev[r])
                    for c in range(NS):
                        a = Av[k, r] * zev[c]
                        if literal:
                            ni = ls[r, c] * S
                        elif c == NS - 1:
                            ni = Lam * S
                        else:
                            ni = 0.0
                        prog = tauv[c + 1] * X[k, r, 2 + c] if c < NS - 1 else 0.0
                        nxt[r, 1 + c] = X[k, r, 1 + c] + h * (
                            -(mu_S + muI[c]) * X[k, r, 1 + c] - a * X[k, r, 1 + c]
                            - tauv[c] * X[k, r, 1 + c] + prog + eta * X[k, r, 5 + c] + ni)
                        nxt[r, 5 + c] = X[k, r, 5 + c] + h * (
                            -(mu_S + muA[c] + eta) * X[k, r, 5 + c] + a * X[k, r, 1 + c])
                for r in range(R):
                    for q in range(NC):
                        v = nxt[r, q]
                        if not isfinite(v):
                            bad = k + 1
                        elif v < 0.0:
                            cl[k + 1, r, q] = 1
                            shortfall -= v
                            v = 0.0
                        X[k + 1, r, q] = v
                if bad >= 0:
                    for r in range(R):
                        for q in range(NC):
                            X[k + 1, r, q] = NAN
                    break
    return Xa, lama, cla, shortfall, bad


def backward(X, clamped, K, Astar, W, xi, zeta_e, double mu_S, mu_I, mu_A, double eta, tau,
             double omega, double h, bint literal, gX, gLam):
    cdef const double[:, :, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const unsigned char[:, :, ::1] cl = np.ascontiguousarray(clamped, dtype=np.uint8)
    cdef const double[:, ::1] Kv = np.ascontiguousarray(K, dtype=np.float64)
    cdef const double[:, ::1] Av = np.ascontiguousarray(Astar, dtype=np.float64)
    cdef const double[:, ::1] Wv = np.ascontiguousarray(W, dtype=np.float64)
    cdef const double[::1] xiv = np.ascontiguousarray(xi, dtype=np.float64)
    cdef const double[::1] zev = np.ascontiguousarray(zeta_e, dtype=np.float64)
    cdef const double[::1] muI = np.ascontiguousarray(mu_I, dtype=np.float64)
    cdef const double[::1] muA = np.ascontiguousarray(mu_A, dtype=np.float64)
    cdef const double[::1] tauv = np.ascontiguousarray(tau, dtype=np.float64)
    cdef const double[:, :, ::1] gXv = np.ascontiguousarray(gX, dtype=np.float64)
    cdef const double[:, ::1] gLv = np.ascontiguousarray(gLam, dtype=np.float64)
    cdef Py_ssize_t T = Kv.shape[0], R = Kv.shape[1]
    gKa = np.zeros((T, R))
    gAa = np.zeros((T, R))
    adja = np.zeros((R, NC))
    cdef double[:, ::1] gK = gKa
    cdef double[:, ::1] gA = gAa
    cdef double[:, ::1] adj = adja
    cdef double[:, ::1] a = np.zeros((R, NC))
    cdef double[:, ::1] base = np.zeros((R, NC))
    cdef double[::1] N = np.empty(R)
    cdef double[:, ::1] y = np.empty((R, NS))
    cdef double[:, ::1] Z = np.empty((R, NS))
    cdef double[:, ::1] ls = np.empty((R, NS))
    cdef double[:, ::1] glam = np.empty((R, NS))
    cdef double[:, ::1] gZ = np.empty((R, NS))
    cdef Py_ssize_t k, r, c, q, j
    cdef double S, Lam, ast, aS, gS, s, gN, gy
    with nogil:
        for k in range(T - 1, -1, -1):
            _force(Xv[k], Kv[k], Wv, xiv, omega, R, N, y, Z, ls)
            for r in range(R):
                for c in range(NS):
                    glam[r, c] = gLv[k, r]
                for q in range(NC):
                    base[r, q] = 0.0
            if k < T - 1:
                for r in range(R):
                    for q in range(NC):
                        a[r, q] = 0.0 if cl[k + 1, r, q] else adj[r, q]
                for r in range(R):
                    S = Xv[k, r, 0]
                    Lam = 0.0
                    for c in range(NS):
                        Lam += ls[r, c]
                    aS = a[r, 0]
                    gS = aS * (1.0 - h * (Lam + mu_S))
                    if literal:
                        for c in range(NS):
                            glam[r, c] += h * S * (a[r, 1 + c] - aS)
                            gS += h * ls[r, c] * a[r, 1 + c]
                    else:
                        for c in range(NS):
                            glam[r, c] += h * S * (a[r, NS] - aS)
                        gS += h * Lam * a[r, NS]
                    base[r, 0] = gS
                    s = 0.0
                    for c in range(NS):
                        ast = Av[k, r] * zev[c]
                        base[r, 1 + c] = (a[r, 1 + c] * (1.0 - h * (mu_S + muI[c] + ast + tauv[c]))
                                          + h * ast * a[r, 5 + c])
                        if c > 0:
                            base[r, 1 + c] += h * tauv[c] * a[r, c]
                        base[r, 5 + c] = (a[r, 5 + c] * (1.0 - h * (mu_S + muA[c] + eta))
                                          + h * eta * a[r, 1 + c])
                        s += h * Xv[k, r, 1 + c] * (a[r, 5 + c] - a[r, 1 + c]) * zev[c]
                    gA[k, r] = s
            for r in range(R):
                s = 0.0
                for c in range(NS):
                    s += glam[r, c] * xiv[c] * Z[r, c]
                    gZ[r, c] = glam[r, c] * Kv[k, r] * xiv[c]
                gK[k, r] = s
            for j in range(R):
                gN = 0.0
                for c in range(NS):
                    gy = 0.0
                    for r in range(R):
                        gy += Wv[r, j] * gZ[r, c]
                    gN -= gy * y[j, c]
                    base[j, 1 + c] += gy / N[j]
                    base[j, 5 + c] += gy * (1.0 - omega) / N[j]
                gN /= N[j]
                for q in range(NC):
                    adj[j, q] = gXv[k, j, q] + base[j, q] + gN
    return adja, gKa, gAa
