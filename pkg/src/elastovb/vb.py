"""Mean-field variational state and its closed-form coordinate updates.

The posterior over the latent field is parameterized as Psi = mu + W Theta with
q(Theta) = N(0, Lambda^-1) (diagonal, zero mean by construction) and
q(tau) = Gamma(a, b) for the noise precision.  This module performs the
conjugate updates of (Lambda, a, b), evaluates the variational lower bound F
with a named breakdown, and exposes low-rank posterior statistics for Psi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import digamma

from .forward import ForwardEval


@dataclass
class ReducedPosterior:
    """Full variational state: subspace basis, mean, precisions, Gamma parameters."""

    mu: np.ndarray                 # (d_psi,)
    W: np.ndarray                  # (d_psi, d_theta), orthonormal columns
    lambda0: np.ndarray            # (d_theta,) prior precisions, nondecreasing
    lam: np.ndarray                # (d_theta,) posterior precisions
    a0: float = 0.0
    b0: float = 0.0
    a: float = 0.0
    b: float = 0.0

    @property
    def d_psi(self) -> int:
        return self.mu.shape[0]

    @property
    def d_theta(self) -> int:
        return self.W.shape[1]

    @property
    def mean_tau(self) -> float:
        if self.a <= 0.0 or self.b <= 0.0:
            raise ValueError("q(tau) not yet updated; a and b must be positive")
        return self.a / self.b

    @property
    def mean_log_tau(self) -> float:
        if self.a <= 0.0 or self.b <= 0.0:
            raise ValueError("q(tau) not yet updated; a and b must be positive")
        return float(digamma(self.a)) - math.log(self.b)

    def copy(self) -> "ReducedPosterior":
        return replace(self, mu=self.mu.copy(), W=self.W.copy(),
                       lambda0=self.lambda0.copy(), lam=self.lam.copy())

    def check(self, atol: float = 1e-10) -> None:
        d = self.d_theta
        if self.W.shape[0] != self.d_psi or self.lambda0.shape != (d,) or self.lam.shape != (d,):
            raise ValueError("inconsistent state dimensions")
        if d:
            defect = np.max(np.abs(self.W.T @ self.W - np.eye(d)))
            if defect > atol:
                raise ValueError(f"W columns not orthonormal (defect {defect:.2e})")
            if np.any(np.diff(self.lambda0) < -atol * np.abs(self.lambda0[:-1])):
                raise ValueError("prior precisions must be nondecreasing")
            if np.any(self.lam < self.lambda0 * (1 - 1e-12)):
                raise ValueError("posterior precision fell below prior precision")


@dataclass
class ElboBreakdown:
    """Lower bound F split into named addends that sum to the total."""

    likelihood: float          # E_q[log p(yhat | Theta, tau)]
    theta_terms: float         # E_q[log p(Theta)] + H[q(Theta)]
    tau_terms: float           # E_q[log p(tau)] + H[q(tau)]
    log_prior_mu: float
    log_prior_w: float = 0.0   # uniform on the orthonormal-columns manifold
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return (self.likelihood + self.theta_terms + self.tau_terms
                + self.log_prior_mu + self.log_prior_w)


def column_data_terms(W: np.ndarray, G: np.ndarray) -> np.ndarray:
    """s_i = w_i^T G^T G w_i = |G w_i|^2 for each basis column."""
    if W.shape[1] == 0:
        return np.zeros(0)
    GW = G @ W
    return np.einsum("ij,ij->j", GW, GW)


def update_q_tau(state: ReducedPosterior, ev: ForwardEval, yhat: np.ndarray) -> tuple[float, float]:
    """Conjugate Gamma update: a = a0 + d_y/2, b = b0 + misfit/2 + trace/2."""
    r = yhat - ev.y
    d_y = yhat.shape[0]
    a = state.a0 + 0.5 * d_y
    trace = 0.0
    if state.d_theta:
        s = column_data_terms(state.W, ev.G)
        trace = float(np.sum(s / state.lam))
    b = state.b0 + 0.5 * float(r @ r) + 0.5 * trace
    if b <= 0.0:
        raise RuntimeError(f"q(tau) rate collapsed to {b}; inputs must be invalid")
    return a, b


def update_q_theta(state: ReducedPosterior, ev: ForwardEval) -> np.ndarray:
    """lambda_i = lambda0_i + <tau> |G w_i|^2; q(Theta) keeps mean zero."""
    s = column_data_terms(state.W, ev.G)
    return state.lambda0 + state.mean_tau * s


def q_fixed_point(state: ReducedPosterior, ev: ForwardEval, yhat: np.ndarray,
                  max_iters: int = 50, tol: float = 1e-10) -> ReducedPosterior:
    """Iterate the two conjugate updates at fixed (mu, W, G) to their fixed point."""
    st = state.copy()
    if st.a <= 0.0 or st.b <= 0.0:
        st.a, st.b = update_q_tau(st, ev, yhat)
    for _ in range(max_iters):
        lam_new = update_q_theta(st, ev)
        rel = 0.0
        if st.d_theta:
            rel += float(np.max(np.abs(lam_new - st.lam) / (1.0 + np.abs(st.lam))))
        st.lam = lam_new
        a_new, b_new = update_q_tau(st, ev, yhat)
        rel += abs(a_new - st.a) / (1.0 + abs(st.a)) + abs(b_new - st.b) / (1.0 + abs(st.b))
        st.a, st.b = a_new, b_new
        if rel < tol:
            break
    return st


def _log_gamma_normalizer(shape: float, rate: float) -> float:
    """log Z for Gamma(shape, rate) density tau^(shape-1) e^(-rate tau) / Z."""
    return math.lgamma(shape) - shape * math.log(rate)


def tau_bound_terms(state: ReducedPosterior) -> float:
    """E_q[log p(tau)] + H[q(tau)] for Gamma prior (a0, b0) and posterior (a, b).

    For the default improper prior a0 = b0 = 0 the prior normalizer is an
    (infinite) constant and is dropped; the remaining terms are still the full
    tau-dependence of the bound.  Returns exactly 0 when posterior == prior.
    """
    if state.a == state.a0 and state.b == state.b0:
        return 0.0
    mean_tau = state.mean_tau
    mean_log_tau = state.mean_log_tau
    val = ((state.a0 - state.a) * mean_log_tau + (state.b - state.b0) * mean_tau
           + _log_gamma_normalizer(state.a, state.b))
    if state.a0 > 0.0 and state.b0 > 0.0:
        val -= _log_gamma_normalizer(state.a0, state.b0)
    return val


def elbo(state: ReducedPosterior, ev: ForwardEval, yhat: np.ndarray,
         log_prior_mu: float = 0.0) -> ElboBreakdown:
    """Variational lower bound at the current state, with named addends.

    log_prior_mu is the (EM-surrogate) log prior of the current mean field,
    computed by the mean-update module; it is a bound itself.  The uniform
    prior on W contributes a constant reported as 0.
    """
    r = yhat - ev.y
    d_y = yhat.shape[0]
    mean_tau = state.mean_tau
    trace = 0.0
    theta_terms = 0.0
    if state.d_theta:
        s = column_data_terms(state.W, ev.G)
        trace = float(np.sum(s / state.lam))
        theta_terms = 0.5 * float(np.sum(np.log(state.lambda0) - state.lambda0 / state.lam
                                         - np.log(state.lam)) + state.d_theta)
    likelihood = (-0.5 * d_y * math.log(2.0 * math.pi) + 0.5 * d_y * state.mean_log_tau
                  - 0.5 * mean_tau * float(r @ r) - 0.5 * mean_tau * trace)
    return ElboBreakdown(likelihood=likelihood, theta_terms=theta_terms,
                         tau_terms=tau_bound_terms(state), log_prior_mu=log_prior_mu)


def posterior_psi_stats(state: ReducedPosterior) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray], np.ndarray]:
    """Posterior mean, low-rank covariance factors (W, lam), and per-element std.

    Cov[Psi] = W diag(1/lam) W^T is never densified; the per-element variance
    is the row-wise sum of W^2 / lam.
    """
    mean = state.mu.copy()
    if state.d_theta == 0:
        return mean, (state.W.copy(), state.lam.copy()), np.zeros(state.d_psi)
    var = (state.W ** 2) @ (1.0 / state.lam)
    return mean, (state.W.copy(), state.lam.copy()), np.sqrt(var)


def concentrated_tau_prior(tau: float, scale: float = 1e12) -> tuple[float, float]:
    """Gamma prior (a0, b0) sharply peaked at a known noise precision tau."""
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    return tau * scale, scale
