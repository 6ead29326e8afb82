"""Verification suites: randomized property checks plus train-against-oracle protocols.

Each suite returns a plain dict of measurements with a boolean ``pass`` entry,
so results can be printed, asserted in tests, or dumped into a JSON report.
Nothing here records wall-clock time, which keeps reports byte-reproducible.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq

from . import dataset as data
from . import oracle
from .approximator import Mlp, backward, forward, init_mlp
from .dataset import Batch
from .envs import CooperativeMatrixGame, TabularMDP, joint_actions, make_behavior_policy
from .mixer import init_mixer
from .seeding import substream
from .trainer import (
    AgentNets,
    TrainConfig,
    bc_train,
    evaluate,
    init_agent_nets,
    joint_policy_table,
    policy_loss,
    q_loss,
    q_tot_table,
    train,
    v_loss,
)

GAMMAS = (0.5, 0.9, 0.99)
ALPHA_GRID = (0.1, 1.0, 10.0, 100.0)
FD_STEP = 1e-5
FD_FLOOR = 1e-6
DESK_HIDDEN = 32


# -- random instances --------------------------------------------------------------


def random_local_policies(rng, n_agents: int, n_states: int, n_actions: int) -> np.ndarray:
    """Strictly positive per-agent action distributions, shape (n, S, A)."""
    p = rng.dirichlet(np.ones(n_actions), size=(n_agents, n_states)) + 0.01
    return p / p.sum(axis=2, keepdims=True)


def product_policy(local: np.ndarray) -> np.ndarray:
    n, S, A = local.shape
    acts = joint_actions(n, A)
    out = np.ones((S, A**n))
    for i in range(n):
        out *= local[i][:, acts[:, i]]
    return out


def random_mdp(rng, n_states: int, n_agents: int, n_actions: int, gamma: float, terminal_prob: float = 0.2) -> TabularMDP:
    """Random dense tabular MDP; state 0 is never terminal and is the initial state."""
    J = n_actions**n_agents
    P = rng.dirichlet(np.ones(n_states), size=(n_states, J))
    P /= P.sum(axis=2, keepdims=True)
    terminal = rng.random(n_states) < terminal_prob
    terminal[0] = False
    r = rng.normal(size=(n_states, J))
    obs = np.tile(np.eye(n_states), (n_agents, 1, 1))
    initial = np.zeros(n_states)
    initial[0] = 1.0
    return TabularMDP(n_agents, n_actions, P, r, obs, terminal, initial, gamma)


def _random_instance(rng):
    S = int(rng.integers(1, 11))
    A = int(rng.integers(2, 4))
    gamma = float(rng.choice(GAMMAS))
    mdp = random_mdp(rng, S, 2, A, gamma)
    mu = product_policy(random_local_policies(rng, 2, S, A))
    alpha = float(10.0 ** rng.uniform(-1, 1))
    return mdp, mu, alpha


# -- oracle suites -----------------------------------------------------------------


def contraction_suite(seed: int = 0, trials: int = 1000) -> dict:
    """sup-norm contraction of the optimal operator on random instances and value pairs."""
    rng = substream(seed, "contraction")
    worst_ratio, worst_slack, failures = 0.0, -math.inf, 0
    for _ in range(trials):
        mdp, mu, alpha = _random_instance(rng)
        scale = 10.0 ** rng.uniform(-2, 2)
        V1 = rng.normal(scale=scale, size=mdp.n_states)
        V2 = rng.normal(scale=scale, size=mdp.n_states)
        lhs = np.max(np.abs(oracle.apply_optimal_operator(V1, mdp, mu, alpha) - oracle.apply_optimal_operator(V2, mdp, mu, alpha)))
        rhs = mdp.gamma * np.max(np.abs(V1 - V2))
        slack = float(lhs - rhs)
        worst_slack = max(worst_slack, slack)
        if rhs > 0:
            worst_ratio = max(worst_ratio, float(lhs / np.max(np.abs(V1 - V2))) / mdp.gamma)
        failures += slack > 1e-9
    return {"trials": trials, "failures": int(failures), "worst_slack": worst_slack,
            "worst_ratio_over_gamma": worst_ratio, "pass": failures == 0}


def optimality_suite(seed: int = 0, trials: int = 100, tol: float = 1e-10) -> dict:
    """Solve random instances; check V* = u* + alpha, the Bellman residual and policy normalization."""
    rng = substream(seed, "optimality")
    worst_identity = worst_residual = worst_rowsum = worst_q = 0.0
    for _ in range(trials):
        mdp, mu, alpha = _random_instance(rng)
        sol = oracle.solve(mdp, mu, alpha, tol=tol)
        # exact up to the rounding of one subtraction and one addition
        ulps = np.abs(sol.V - (sol.u + alpha)) / np.spacing(np.maximum(np.abs(sol.V), alpha))
        worst_identity = max(worst_identity, float(np.max(ulps)))
        worst_residual = max(worst_residual, sol.residual)
        worst_q = max(worst_q, float(np.max(np.abs(sol.Q - (mdp.r + mdp.gamma * mdp.P @ sol.V)))))
        for row in sol.pi:
            worst_rowsum = max(worst_rowsum, abs(math.fsum(row) - 1.0))
    ok = worst_identity <= 4 and worst_residual <= 10 * tol and worst_rowsum <= 1e-8
    return {"trials": trials, "tol": tol, "max_identity_error_ulps": worst_identity, "max_bellman_residual": worst_residual,
            "max_q_backup_error": worst_q, "max_rowsum_error": worst_rowsum, "pass": bool(ok)}


def local_v_derivative(v: float, w: float, alpha: float, q_values, probs) -> float:
    """d/dv of the local V objective: (w / alpha) (1 - E_mu[exp(w (Q - v) / alpha)])."""
    return float(w / alpha * (1.0 - np.asarray(probs) @ np.exp(w * (np.asarray(q_values) - v) / alpha)))


def decomposition_suite(seed: int = 0, trials: int = 100) -> dict:
    """Local self-normalization, product-policy consistency and convexity of the local V objective."""
    rng = substream(seed, "decomposition")
    worst_norm = worst_first_order = worst_argmin = 0.0
    min_second_diff = math.inf
    grid_ok = True
    for _ in range(trials):
        n, A, S = int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(1, 5))
        alpha = float(10.0 ** rng.uniform(-1, 1))
        q = rng.normal(scale=2.0, size=(n, S, A))
        mu = random_local_policies(rng, n, S, A)
        w = rng.uniform(0.0, 3.0, size=(S, n))
        w[rng.random((S, n)) < 0.1] = 0.0
        b = rng.normal(size=S)
        v = np.array([[oracle.local_v_solve(w[s, i], alpha, q[i, s], mu[i, s]) for s in range(S)] for i in range(n)])
        worst_norm = max(worst_norm, oracle.check_decomposition(q, v, w, b, mu, alpha))
        for i in range(n):
            for s in range(S):
                wi = w[s, i]
                worst_first_order = max(worst_first_order,
                                        oracle.local_normalization_residual(wi, alpha, q[i, s], mu[i, s], v[i, s]))
                if wi == 0:
                    continue  # objective is constant in v
                grid = v[i, s] + np.linspace(-1.0, 1.0, 201)
                f = oracle.local_v_objective(grid, wi, alpha, q[i, s], mu[i, s])
                min_second_diff = min(min_second_diff, float(np.min(f[:-2] - 2 * f[1:-1] + f[2:])))
                # the objective is convex, so its minimizer is the root of the derivative
                lo, hi = v[i, s] - 1.0, v[i, s] + 1.0
                while local_v_derivative(lo, wi, alpha, q[i, s], mu[i, s]) > 0:
                    lo -= 1.0
                while local_v_derivative(hi, wi, alpha, q[i, s], mu[i, s]) < 0:
                    hi += 1.0
                root = brentq(local_v_derivative, lo, hi, args=(wi, alpha, q[i, s], mu[i, s]), xtol=1e-14)
                grid_min = grid[int(np.argmin(f))]
                worst_argmin = max(worst_argmin, abs(root - v[i, s]))
                grid_ok &= abs(grid_min - v[i, s]) < 1e-9
    ok = (worst_norm <= 1e-8 and worst_first_order <= 1e-10 and min_second_diff >= -1e-9
          and worst_argmin <= 1e-6 and grid_ok)
    return {"trials": trials, "max_normalization_residual": worst_norm, "max_first_order_residual": worst_first_order,
            "min_second_difference": min_second_diff, "max_argmin_distance": float(worst_argmin),
            "grid_minimum_at_solution": bool(grid_ok), "pass": bool(ok)}


def kl_monotonicity(mdp: TabularMDP, mu: np.ndarray, alphas=ALPHA_GRID) -> np.ndarray:
    """Per-state KL(pi* || mu) for each alpha, shape (len(alphas), S)."""
    return np.array([oracle.kl_per_state(oracle.solve(mdp, mu, a).pi, mu) for a in alphas])


def alpha_monotonicity_suite(seed: int = 0, trials: int = 100, slack: float = 1e-12) -> dict:
    """Oracle-level KL to the behavior policy never increases along the alpha grid."""
    rng = substream(seed, "alpha")
    instances = []
    for payoff in (None, [[1.0, 0.5], [0.5, 0.0]], [[11.0, -30.0, 0.0], [-30.0, 7.0, 6.0], [0.0, 0.0, 5.0]]):
        env = CooperativeMatrixGame(payoff_table=payoff, n_actions=len(payoff) if payoff else 2)
        instances.append((env.tabular_export(), make_behavior_policy(env, "uniform").joint()))
    for _ in range(trials):
        mdp, mu, _ = _random_instance(rng)
        instances.append((mdp, mu))
    worst_increase, failures = -math.inf, 0
    for mdp, mu in instances:
        kl = kl_monotonicity(mdp, mu)
        inc = float(np.max(np.diff(kl, axis=0)))
        worst_increase = max(worst_increase, inc)
        failures += inc > slack
    return {"instances": len(instances), "alphas": list(ALPHA_GRID), "failures": int(failures),
            "worst_increase": worst_increase, "pass": failures == 0}


# -- gradient suite ----------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FD_FLOOR) -> float:
    """max_k |a_k - n_k| / max(|a_k|, |n_k|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_difference(f, theta: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at ``theta``."""
    out = np.zeros_like(theta)
    for k in range(theta.size):
        plus, minus = theta.copy(), theta.copy()
        plus[k] += h
        minus[k] -= h
        out[k] = (f(plus) - f(minus)) / (2 * h)
    return out


def mlp_gradient_error(net: Mlp, x: np.ndarray, upstream: np.ndarray) -> float:
    out, tape = forward(net, x)
    analytic = backward(tape, upstream).theta
    numeric = finite_difference(lambda th: float(np.sum(upstream * forward(net.with_theta(th), x)[0])), net.theta)
    return relative_error(analytic, numeric)


def random_batch(rng, B: int, n: int, d: int, A: int) -> Batch:
    return Batch(rng.normal(size=(B, n, d)), rng.integers(0, A, size=(B, n)), rng.normal(size=B),
                 rng.normal(size=(B, n, d)), (rng.random(B) < 0.3).astype(np.float64))


def _loss_parts(nets: AgentNets, mixer):
    parts = {"mixer_w": mixer.w_net, "mixer_b": mixer.b_net}
    for i in range(nets.n_agents):
        parts.update({f"q_{i}": nets.q[i], f"q_target_{i}": nets.q_target[i], f"v_{i}": nets.v[i], f"pi_{i}": nets.pi[i]})
    return parts


def _with_part(nets: AgentNets, mixer, name: str, net: Mlp):
    nets = AgentNets(list(nets.q), list(nets.q_target), list(nets.v), list(nets.pi))
    mixer = type(mixer)(mixer.w_net, mixer.b_net, mixer.n_agents, mixer.local)
    if name == "mixer_w":
        mixer.w_net = net
    elif name == "mixer_b":
        mixer.b_net = net
    else:
        kind, _, idx = name.rpartition("_")
        getattr(nets, kind)[int(idx)] = net
    return nets, mixer


LOSS_GRADIENT_OWNERS = {"v_loss": ("v",), "q_loss": ("q", "mixer_w", "mixer_b"), "policy_loss": ("pi",)}


def _owned(name: str, owners) -> bool:
    return name in owners or name.rpartition("_")[0] in owners


def gradient_suite(seed: int = 0, nets_trials: int = 50, loss_trials: int = 3, tol: float = 1e-4) -> dict:
    """Analytic gradients of the MLP engine and of all three training losses against central differences."""
    rng = substream(seed, "gradients")
    mlp_worst = 0.0
    for _ in range(nets_trials):
        depth = int(rng.integers(1, 4))
        sizes = [int(s) for s in rng.integers(1, 17, size=depth + 1)]
        net = init_mlp(sizes, rng)
        x = rng.normal(size=(int(rng.integers(1, 5)), sizes[0]))
        mlp_worst = max(mlp_worst, mlp_gradient_error(net, x, rng.normal(size=(len(x), sizes[-1]))))

    loss_fns = {
        "v_loss": lambda b, nt, mx, c: v_loss(b, nt, mx, c)[:2],
        "q_loss": lambda b, nt, mx, c: q_loss(b, nt, mx, c)[:2],
        "policy_loss": lambda b, nt, mx, c: policy_loss(b, nt, mx, c)[:2],
    }
    worst = {k: 0.0 for k in loss_fns}
    flow_ok = True
    for t in range(loss_trials):
        n, d, A = 2, 3, 3
        variant = ("full", "no_w", "local_w")[t % 3]
        cfg = TrainConfig(alpha=float(rng.uniform(0.5, 2.0)), gamma=0.9, hidden=6, mixer_hidden=5, variant=variant)
        nets = init_agent_nets(n, d, A, cfg.hidden, rng)
        nets.q_target = [init_mlp([d + A, cfg.hidden, cfg.hidden, 1], rng) for _ in range(n)]
        mixer = init_mixer(n, d, cfg.mixer_hidden, rng, local=variant == "local_w")
        batch = random_batch(rng, 5, n, d, A)
        for lname, fn in loss_fns.items():
            _, grads = fn(batch, nets, mixer, cfg)
            owners = LOSS_GRADIENT_OWNERS[lname]
            expected = {k for k in _loss_parts(nets, mixer) if _owned(k, owners)}
            flow_ok &= set(grads) == expected
            for name in grads:
                part = _loss_parts(nets, mixer)[name]

                def f(theta, name=name, part=part):
                    nt, mx = _with_part(nets, mixer, name, part.with_theta(theta))
                    return fn(batch, nt, mx, cfg)[0]

                numeric = finite_difference(f, part.theta)
                worst[lname] = max(worst[lname], relative_error(grads[name].theta, numeric))
    ok = mlp_worst <= tol and all(v <= tol for v in worst.values()) and flow_ok
    return {"mlp_trials": nets_trials, "mlp_max_relative_error": mlp_worst, "loss_trials": loss_trials,
            "loss_max_relative_error": worst, "gradient_flow_ok": bool(flow_ok), "tolerance": tol, "pass": bool(ok)}


# -- training protocols ------------------------------------------------------------


def desk_config(alpha: float, seed: int, steps: int, **kw) -> TrainConfig:
    kw.setdefault("hidden", DESK_HIDDEN)
    kw.setdefault("mixer_hidden", DESK_HIDDEN)
    kw.setdefault("eval_every", max(1, steps // 4) if steps else 1)
    return TrainConfig(alpha=alpha, seed=seed, steps=steps, **kw)


def matrix_protocol(env, alpha: float = 1.0, seed: int = 0, steps: int = 20_000, n_seeds: int = 3,
                    transitions: int = 10_000, rel_tol: float = 0.05, **cfg_kw) -> tuple[dict, dict]:
    """Train on a uniform full-coverage dataset and compare with the oracle.

    Returns ``(report, metrics)`` where ``metrics`` maps run labels to metric rows.
    """
    mdp = env.tabular_export()
    mu = make_behavior_policy(env, "uniform", seed)
    mu_tot = mu.joint()
    sol = oracle.solve(mdp, mu_tot, alpha)
    episodes = max(1, transitions // env.horizon)
    ds = data.build(env, mu, episodes, seed)
    s0 = int(np.argmax(mdp.initial))
    returns, q_tables, metrics = [], [], {}
    for k in range(n_seeds):
        cfg = desk_config(alpha, seed + k, steps, **cfg_kw)
        ckpt, rows = train(ds, env, cfg)
        metrics[f"omiga_seed{seed + k}"] = rows
        pi = joint_policy_table(ckpt, mdp)
        returns.append(oracle.regularized_return(pi, mdp, mu_tot, alpha))
        q_tables.append(q_tot_table(ckpt, mdp)[s0])
    v_star = float(sol.V[s0])
    mean_return = float(np.mean(returns))
    q_mean = np.mean(q_tables, axis=0)
    q_star = sol.Q[s0]
    q_rel = np.abs(q_mean - q_star) / np.maximum(np.abs(q_star), 1.0)
    return_gap = abs(mean_return - v_star) / abs(v_star)
    report = {
        "protocol": "matrix", "alpha": alpha, "steps": steps, "seeds": [seed + k for k in range(n_seeds)],
        "transitions": len(ds), "V_star": v_star, "regularized_returns": [float(r) for r in returns],
        "mean_regularized_return": mean_return, "return_relative_gap": float(return_gap),
        "Q_star": q_star.tolist(), "Q_tot_mean": q_mean.tolist(), "Q_relative_errors": q_rel.tolist(),
        "return_pass": bool(return_gap <= rel_tol), "q_pass": bool(np.all(q_rel <= rel_tol)),
    }
    report["pass"] = report["return_pass"] and report["q_pass"]
    return report, metrics


def directional_protocol(env, alpha: float = 2.0, seed: int = 0, steps: int = 5000, n_seeds: int = 5,
                         episodes: int = 500, eval_episodes: int = 100, **cfg_kw) -> tuple[dict, dict]:
    """OMIGA vs behavior cloning vs OMIGA without weights on one medium-quality dataset."""
    mu = make_behavior_policy(env, "medium", seed)
    ds = data.build(env, mu, episodes, seed)
    scores = {"omiga": [], "omiga_no_w": [], "bc": []}
    metrics = {}
    eval_seed = int(substream(seed, "eval").integers(2**31))
    for k in range(n_seeds):
        s = seed + k
        for label, variant in (("omiga", "full"), ("omiga_no_w", "no_w")):
            cfg = desk_config(alpha, s, steps, variant=variant, **cfg_kw)
            ckpt, rows = train(ds, env, cfg)
            metrics[f"{label}_seed{s}"] = rows
            scores[label].append(evaluate(ckpt, env, eval_episodes, eval_seed, cfg.eval_mode)[0])
        cfg = desk_config(alpha, s, steps, **cfg_kw)
        ckpt, rows = bc_train(ds, cfg, env)
        metrics[f"bc_seed{s}"] = rows
        scores["bc"].append(evaluate(ckpt, env, eval_episodes, eval_seed, cfg.eval_mode)[0])
    stats = {k: {"scores": [float(x) for x in v], "mean": float(np.mean(v)), "std": float(np.std(v))}
             for k, v in scores.items()}

    def at_least(a, b):
        return bool(stats[a]["mean"] >= stats[b]["mean"] - max(stats[a]["std"], stats[b]["std"]))

    report = {"protocol": "directional", "alpha": alpha, "steps": steps, "seeds": [seed + k for k in range(n_seeds)],
              "dataset_episodes": episodes, "dataset_avg_return": ds.manifest.avg_return,
              "eval_episodes": eval_episodes, "stats": stats,
              "omiga_vs_bc_pass": at_least("omiga", "bc"), "full_vs_no_w_pass": at_least("omiga", "omiga_no_w")}
    report["pass"] = report["omiga_vs_bc_pass"] and report["full_vs_no_w_pass"]
    return report, metrics


def learned_kl_trend(env, alphas=ALPHA_GRID, seed: int = 0, steps: int = 3000, transitions: int = 5000,
                     **cfg_kw) -> dict:
    """KL(learned joint policy || behavior) at the initial state for each alpha. Reported, not asserted."""
    mdp = env.tabular_export()
    mu = make_behavior_policy(env, "uniform", seed)
    mu_tot = mu.joint()
    ds = data.build(env, mu, max(1, transitions // env.horizon), seed)
    s0 = int(np.argmax(mdp.initial))
    kls = []
    for alpha in alphas:
        ckpt, _ = train(ds, env, desk_config(alpha, seed, steps, **cfg_kw))
        pi = joint_policy_table(ckpt, mdp)
        kls.append(float(oracle.kl_per_state(pi[s0:s0 + 1], mu_tot[s0:s0 + 1])[0]))
    return {"alphas": list(alphas), "kl": kls, "non_increasing": bool(np.all(np.diff(kls) <= 0))}
