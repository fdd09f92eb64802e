"""Orthonormal-basis optimization by Cayley steps with Barzilai-Borwein sizing.

Maximizes the basis-dependent part of the variational bound,
F_W(W) = -(<tau>/2) sum_i |G w_i|^2 / lambda_i, over matrices with orthonormal
columns.  Steps follow the Cayley transform (I + rho B)^-1 (I - rho B) W for a
skew matrix B built from the gradient; B is kept in low-rank factor form so the
update only ever inverts a 2*d_theta square system.  Step sizes come from a
Barzilai-Borwein rule with a non-monotone acceptance test.
"""

from __future__ import annotations

import numpy as np

from .forward import ForwardEval
from .vb import ReducedPosterior, column_data_terms


def fw_value(W: np.ndarray, G: np.ndarray, lam: np.ndarray, mean_tau: float) -> float:
    """F_W(W) = -(<tau>/2) tr(W^T G^T G W Lambda^-1); always <= 0."""
    if W.shape[1] == 0:
        return 0.0
    s = column_data_terms(W, G)
    return -0.5 * mean_tau * float(np.sum(s / lam))


def grad_FW(W: np.ndarray, G: np.ndarray, lam: np.ndarray, mean_tau: float) -> np.ndarray:
    """Euclidean gradient -<tau> G^T G W Lambda^-1 (uniform W prior adds nothing)."""
    if W.shape[1] == 0:
        return np.zeros_like(W)
    return -mean_tau * (G.T @ (G @ W)) / lam[None, :]


def skew_factors(D: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Low-rank factors (U, V) of the skew matrix B = D W^T - W D^T = U V^T."""
    return np.hstack([D, W]), np.hstack([W, -D])


def orthonormality_defect(W: np.ndarray) -> float:
    if W.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(W.T @ W - np.eye(W.shape[1]))))


def cayley_step(W: np.ndarray, skew: tuple[np.ndarray, np.ndarray], alpha: float,
                max_halvings: int = 30) -> np.ndarray:
    """Apply (I + rho B)^-1 (I - rho B) W with rho = alpha/2 and B = U V^T.

    Uses the factored identity so only a square system of size 2*d_theta is
    solved.  A singular system (pathological alpha) is retried with halved
    alpha, up to max_halvings times.
    """
    U, V = skew
    if U.shape[1] == 0:
        return W.copy()
    k = U.shape[1]
    eye = np.eye(k)
    for _ in range(max_halvings + 1):
        rho = 0.5 * alpha
        M = V.T @ U
        c = V.T @ W
        try:
            z = np.linalg.solve(eye + rho * M, (eye - rho * M) @ c)
        except np.linalg.LinAlgError:
            alpha *= 0.5
            continue
        W_new = W - rho * (U @ (c + z))
        if np.all(np.isfinite(W_new)):
            return W_new
        alpha *= 0.5
    raise RuntimeError(f"Cayley step failed after {max_halvings} step halvings")


def bb_step(delta_W: np.ndarray, delta_grad: np.ndarray, alpha_init: float = 1e-3) -> float:
    """Barzilai-Borwein size |tr(dW^T dD)| / tr(dD^T dD); alpha_init on degeneracy."""
    den = float(np.sum(delta_grad * delta_grad))
    if den <= 0.0 or not np.isfinite(den):
        return alpha_init
    num = abs(float(np.sum(delta_W * delta_grad)))
    alpha = num / den
    if alpha <= 0.0 or not np.isfinite(alpha):
        return alpha_init
    return alpha


def optimize_W(state: ReducedPosterior, ev: ForwardEval, max_iters: int = 200,
               tol: float = 1e-9, alpha_init: float = 1e-3, window: int = 5,
               max_backtracks: int = 30) -> tuple[np.ndarray, list[dict]]:
    """Ascend F_W over orthonormal bases at fixed q; returns best W and a trace.

    No forward evaluations happen here; the data enter only through ev.G.
    Acceptance is non-monotone: a trial must beat the worst of the last
    `window` accepted values plus a small slope-proportional margin.
    Terminates when the gradient has no tangent component, when F_W has been
    flat over `window` iterations, when the best value has not improved for
    4*window iterations, or at max_iters; the best iterate seen is returned
    either way.
    """
    G, lam, mean_tau = ev.G, state.lam, state.mean_tau
    W = state.W.copy()
    trace: list[dict] = []
    if W.shape[1] == 0:
        return W, trace
    A = G.T @ G  # formed once; every inner iteration reuses it

    def value_and_product(Wm: np.ndarray) -> tuple[float, np.ndarray]:
        AWm = A @ Wm
        s = np.einsum("ij,ij->j", Wm, AWm)
        return -0.5 * mean_tau * float(np.sum(s / lam)), AWm

    f, AW = value_and_product(W)
    D = -mean_tau * AW / lam[None, :]
    hist = [f]
    best_f, best_W, best_it = f, W.copy(), 0
    trace.append({"iteration": 0, "f_w": f, "alpha": 0.0})
    prev_W = prev_D = None
    alpha = alpha_init
    for it in range(1, max_iters + 1):
        nd2 = float(np.sum(D * D))
        S = D.T @ W
        # dF/dalpha at 0 along the ascent Cayley curve; zero iff W is stationary
        slope = nd2 - float(np.sum(S * S.T))
        if nd2 == 0.0 or slope <= 1e-13 * nd2:
            break
        if prev_W is not None:
            alpha = bb_step(W - prev_W, D - prev_D, alpha_init)
        # ascent skew: B = W D^T - D W^T (its Cayley curve increases F_W)
        U, V = np.hstack([W, D]), np.hstack([D, -W])
        ref = min(hist[-window:])
        a_try = alpha
        accepted = False
        for _ in range(max_backtracks + 1):
            W_try = cayley_step(W, (U, V), a_try)
            f_try, AW_try = value_and_product(W_try)
            if f_try >= ref + 1e-4 * a_try * slope:
                accepted = True
                break
            a_try *= 0.5
        if not accepted:
            break
        prev_W, prev_D = W, D
        W, f, AW = W_try, f_try, AW_try
        D = -mean_tau * AW / lam[None, :]
        hist.append(f)
        if f > best_f:
            best_f, best_W, best_it = f, W.copy(), it
        trace.append({"iteration": it, "f_w": f, "alpha": a_try})
        if len(hist) > window:
            recent = hist[-(window + 1):]
            if max(recent) - min(recent) <= tol * (1.0 + abs(recent[-1])):
                break
        if it - best_it >= 4 * window:
            break
    return best_W, trace
