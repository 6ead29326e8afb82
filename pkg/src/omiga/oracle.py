"""Exact solver for the KL-regularized multi-agent MDP on tabular instances.

With reverse-KL regularization towards a behavior policy ``mu``, the
optimal backup on state values is a behavior-weighted log-mean-exp::

    (T V)(s) = alpha * log sum_a mu(a|s) exp((r(s,a) + gamma * E[V(s')]) / alpha)

and the optimal policy is ``mu * exp((Q - V) / alpha)``.  Everything here
enumerates joint actions, so it is a verification tool for small instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import TabularMDP, joint_actions
from .errors import (
    ConsistencyError,
    ConvergenceError,
    DivergentKLError,
    ParameterError,
    PreconditionError,
)

MAX_JOINT_ACTIONS = 4096
MAX_ITERATIONS = 100_000


def _check_inputs(mdp: TabularMDP, mu_tot: np.ndarray, alpha: float) -> np.ndarray:
    if mdp.n_joint > MAX_JOINT_ACTIONS:
        raise ParameterError(f"{mdp.n_joint} joint actions exceed the oracle cap of {MAX_JOINT_ACTIONS}")
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    mu_tot = np.asarray(mu_tot, dtype=np.float64)
    if mu_tot.shape != (mdp.n_states, mdp.n_joint):
        raise ParameterError(f"mu_tot has shape {mu_tot.shape}, expected {(mdp.n_states, mdp.n_joint)}")
    if np.any(mu_tot < 0) or np.max(np.abs(mu_tot.sum(axis=1) - 1.0)) > 1e-9:
        raise ParameterError("mu_tot rows must be probability distributions")
    return mu_tot


def log_mean_exp(x: np.ndarray, weights: np.ndarray, axis: int = -1) -> np.ndarray:
    """log sum_k weights_k exp(x_k), shifted by the max over the weighted support."""
    support = weights > 0
    m = np.max(np.where(support, x, -np.inf), axis=axis, keepdims=True)
    total = np.sum(np.where(support, weights * np.exp(np.where(support, x - m, 0.0)), 0.0), axis=axis)
    return np.squeeze(m, axis=axis) + np.log(total)


def q_backup(V: np.ndarray, mdp: TabularMDP, gamma: float | None = None) -> np.ndarray:
    gamma = mdp.gamma if gamma is None else gamma
    return mdp.r + gamma * (mdp.P @ V)


def _soft_value(Q: np.ndarray, mu_tot: np.ndarray, alpha: float, terminal: np.ndarray) -> np.ndarray:
    V = alpha * log_mean_exp(Q / alpha, mu_tot, axis=1)
    return np.where(terminal, 0.0, V)


def apply_optimal_operator(V, mdp: TabularMDP, mu_tot, alpha: float) -> np.ndarray:
    mu_tot = _check_inputs(mdp, mu_tot, alpha)
    V = np.asarray(V, dtype=np.float64)
    return _soft_value(q_backup(V, mdp), mu_tot, alpha, mdp.terminal)


@dataclass
class OracleSolution:
    V: np.ndarray  # (S,)
    Q: np.ndarray  # (S, J)
    u: np.ndarray  # (S,) normalization term, V - alpha
    pi: np.ndarray  # (S, J)
    alpha: float
    gamma: float
    iterations: int
    residual: float  # sup-norm Bellman residual of V

    def to_json(self) -> dict:
        return {
            "V_star": self.V.tolist(),
            "u_star": self.u.tolist(),
            "pi_star": self.pi.tolist(),
            "alpha": self.alpha,
            "gamma": self.gamma,
            "iterations": self.iterations,
            "residual": self.residual,
        }


def optimal_policy(Q, V, mu_tot, alpha: float) -> np.ndarray:
    """Closed-form optimal policy ``mu * exp((Q - V) / alpha)``."""
    Q, V, mu_tot = (np.asarray(x, dtype=np.float64) for x in (Q, V, mu_tot))
    pi = mu_tot * np.exp((Q - V[:, None]) / alpha)
    worst = np.max(np.abs(pi.sum(axis=1) - 1.0))
    if worst > 1e-6:
        raise ConsistencyError(f"policy rows sum to 1 only within {worst:.3g}; are Q and V converged?")
    return pi


def solve(mdp: TabularMDP, mu_tot, alpha: float, tol: float = 1e-10) -> OracleSolution:
    if not tol > 0:
        raise ParameterError(f"tol must be positive, got {tol}")
    mu_tot = _check_inputs(mdp, mu_tot, alpha)
    V = np.zeros(mdp.n_states)
    for it in range(1, MAX_ITERATIONS + 1):
        V_new = _soft_value(q_backup(V, mdp), mu_tot, alpha, mdp.terminal)
        delta = float(np.max(np.abs(V_new - V)))
        V = V_new
        if delta < tol:
            break
    else:
        raise ConvergenceError(f"no convergence within {MAX_ITERATIONS} iterations (last step {delta:.3g})")
    # one more soft backup makes V the exact normalizer of exp(Q / alpha), so the policy sums to 1
    Q = q_backup(V, mdp)
    V = _soft_value(Q, mu_tot, alpha, mdp.terminal)
    residual = float(np.max(np.abs(_soft_value(q_backup(V, mdp), mu_tot, alpha, mdp.terminal) - V)))
    # exp((Q - V)/alpha) is exactly 1 at terminals, where the backup is pinned to 0
    Q_pol = np.where(mdp.terminal[:, None], V[:, None], Q)
    pi = optimal_policy(Q_pol, V, mu_tot, alpha)
    return OracleSolution(V, Q, V - alpha, pi, float(alpha), float(mdp.gamma), it, residual)


def kl_per_state(pi, mu) -> np.ndarray:
    pi, mu = np.asarray(pi, dtype=np.float64), np.asarray(mu, dtype=np.float64)
    if np.any((pi > 0) & (mu <= 0)):
        raise DivergentKLError("policy has support outside the behavior policy")
    ratio = np.where(pi > 0, pi / np.where(mu > 0, mu, 1.0), 1.0)
    return np.sum(np.where(pi > 0, pi * np.log(ratio), 0.0), axis=1)


def regularized_values(pi_tot, mdp: TabularMDP, mu_tot, alpha: float, gamma: float | None = None) -> np.ndarray:
    """Exact values of ``pi_tot`` under the KL-penalized reward (solves a linear system)."""
    gamma = mdp.gamma if gamma is None else gamma
    pi = np.asarray(pi_tot, dtype=np.float64)
    mu = np.asarray(mu_tot, dtype=np.float64)
    if pi.shape != mu.shape or np.any(pi < 0) or np.max(np.abs(pi.sum(axis=1) - 1.0)) > 1e-9:
        raise ParameterError("pi_tot rows must be probability distributions matching mu_tot")
    live = ~mdp.terminal
    cost = np.sum(pi * mdp.r, axis=1) - alpha * kl_per_state(pi, mu)
    P_pi = np.einsum("sj,sjt->st", pi, mdp.P)
    A = np.eye(mdp.n_states) - gamma * P_pi * live[:, None]
    return np.linalg.solve(A, np.where(live, cost, 0.0))


def regularized_return(pi_tot, mdp: TabularMDP, mu_tot, alpha: float, gamma: float | None = None) -> float:
    return float(mdp.initial @ regularized_values(pi_tot, mdp, mu_tot, alpha, gamma))


def policy_evaluation(pi_tot, mdp: TabularMDP, gamma: float | None = None) -> np.ndarray:
    """Plain (unregularized) values of ``pi_tot``."""
    return regularized_values(pi_tot, mdp, pi_tot, 1.0, gamma)


# -- local (per-agent) quantities ------------------------------------------------


def local_v_objective(v, w: float, alpha: float, q_values, probs) -> np.ndarray:
    """E_mu[exp(w (Q - v) / alpha) + w v / alpha], vectorized over ``v``."""
    v = np.asarray(v, dtype=np.float64)
    q = np.asarray(q_values, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    z = w * (q[None, :] - v.reshape(-1, 1)) / alpha
    out = np.exp(z) @ p + w * v.reshape(-1) / alpha
    return out.reshape(v.shape)


def local_v_solve(w: float, alpha: float, q_values, probs) -> float:
    """Minimizer of :func:`local_v_objective`: (alpha/w) log E_mu[exp(w Q / alpha)]; E_mu[Q] at w = 0."""
    q = np.asarray(q_values, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if q.shape != p.shape or q.ndim != 1:
        raise ParameterError("q_values and probs must be 1-D arrays of equal length")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ParameterError("probs must sum to 1")
    if not alpha > 0 or w < 0:
        raise ParameterError("need alpha > 0 and w >= 0")
    mean = float(p @ q)
    scale = w / alpha
    if scale == 0:
        return mean
    # centred at the mean so tiny weights neither overflow nor lose the offset
    return mean + float(log_mean_exp(scale * (q - mean), p)) / scale


def local_normalization_residual(w: float, alpha: float, q_values, probs, v: float) -> float:
    q = np.asarray(q_values, dtype=np.float64)
    return float(abs(np.asarray(probs) @ np.exp(w * (q - v) / alpha) - 1.0))


def check_decomposition(q_local, v_local, w, b, mu_local, alpha: float) -> float:
    """Brute-force check that the product of local optimal policies is a normalized global policy.

    Shapes: ``q_local`` (n, S, A), ``v_local`` (n, S), ``w`` (S, n), ``b`` (S,),
    ``mu_local`` (n, S, A).  Returns the worst normalization residual over states.
    """
    q_local, v_local, w, b, mu_local = (np.asarray(x, dtype=np.float64) for x in (q_local, v_local, w, b, mu_local))
    n, S, A = q_local.shape
    if A**n > MAX_JOINT_ACTIONS:
        raise ParameterError(f"{A ** n} joint actions exceed the oracle cap of {MAX_JOINT_ACTIONS}")
    if v_local.shape != (n, S) or w.shape != (S, n) or b.shape != (S,) or mu_local.shape != (n, S, A):
        raise ParameterError("inconsistent table shapes")
    if np.any(w < 0):
        raise ParameterError("mixing weights must be non-negative")
    # local factors pi_i = mu_i exp(w_i (Q_i - V_i) / alpha), shape (n, S, A)
    local = mu_local * np.exp(w.T[:, :, None] * (q_local - v_local[:, :, None]) / alpha)
    local_res = np.max(np.abs(local.sum(axis=2) - 1.0))
    if local_res > 1e-6:
        raise PreconditionError(f"local values violate self-normalization by {local_res:.3g}")

    acts = joint_actions(n, A)
    product = np.ones((S, len(acts)))
    mu_tot = np.ones((S, len(acts)))
    q_tot = np.tile(b[:, None], (1, len(acts)))
    for i in range(n):
        product *= local[i][:, acts[:, i]]
        mu_tot *= mu_local[i][:, acts[:, i]]
        q_tot += w[:, i : i + 1] * q_local[i][:, acts[:, i]]
    v_tot = np.sum(w * v_local.T, axis=1) + b
    global_form = mu_tot * np.exp((q_tot - v_tot[:, None]) / alpha)
    mismatch = np.max(np.abs(product - global_form))
    if mismatch > 1e-10:
        raise ConsistencyError(f"product of local policies differs from the global form by {mismatch:.3g}")
    return float(np.max(np.abs(product.sum(axis=1) - 1.0)))
