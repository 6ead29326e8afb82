"""Cooperative multi-agent environments with exact tabular export.

Two environments ship:

* :class:`CooperativeMatrixGame` -- one decision state followed by a terminal
  state.  Every agent observes ``[1.0]`` while playing.
* :class:`CoopGrid` -- agents move on a square board and the team earns 1 on
  every step that starts with all agents on their goal cells.

Joint actions are indexed in row-major (mixed radix) order with agent 0 as
the most significant digit, so ``joint_actions(n, A)[j]`` lists the per-agent
actions of joint index ``j``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ParameterError, ShapeError, UnsupportedError, UsageError

QUALITIES = ("expert", "medium", "poor", "uniform")
EXPERT_EPS = 0.05

ENV_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "env_name": {"enum": ["matrix", "coopgrid"]},
        "n_agents": {"type": "integer", "minimum": 1},
        "grid_size": {"type": "integer", "minimum": 2},
        "payoff_table": {"type": "array"},
        "n_actions": {"type": "integer", "minimum": 2},
        "horizon": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "gamma": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "slip": {"type": "number", "minimum": 0, "maximum": 1},
        "partial_obs": {"type": "boolean"},
    },
    "required": ["env_name", "n_agents", "horizon", "seed"],
    "additionalProperties": False,
}


def joint_actions(n_agents: int, n_actions: int) -> np.ndarray:
    """All joint actions, shape ``(n_actions**n_agents, n_agents)``."""
    return np.array(list(itertools.product(range(n_actions), repeat=n_agents)), dtype=np.int64).reshape(
        -1, n_agents
    )


def joint_index(actions, n_actions: int) -> int:
    idx = 0
    for a in actions:
        idx = idx * n_actions + int(a)
    return idx


@dataclass(frozen=True)
class TabularMDP:
    n_agents: int
    n_actions: int
    P: np.ndarray  # (S, J, S)
    r: np.ndarray  # (S, J)
    obs: np.ndarray  # (n_agents, S, obs_dim): observation of agent i in state s
    terminal: np.ndarray  # (S,) bool
    initial: np.ndarray  # (S,) initial state distribution
    gamma: float

    def __post_init__(self):
        S = self.P.shape[0]
        J = self.n_actions**self.n_agents
        if self.P.shape != (S, J, S) or self.r.shape != (S, J):
            raise ShapeError(f"P {self.P.shape} / r {self.r.shape} inconsistent with {S} states, {J} joint actions")
        if self.obs.shape[:2] != (self.n_agents, S):
            raise ShapeError(f"observation map has shape {self.obs.shape}")
        if not np.allclose(self.P.sum(axis=2), 1.0, rtol=0, atol=1e-12):
            raise ParameterError("transition rows must sum to 1")
        if not np.all(np.isfinite(self.r)):
            raise ParameterError("rewards must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise ParameterError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_joint(self) -> int:
        return self.P.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[2]

    def joint_actions(self) -> np.ndarray:
        return joint_actions(self.n_agents, self.n_actions)

    def observations_injective(self) -> bool:
        """True when every agent's observation alone identifies the state."""
        for i in range(self.n_agents):
            if len({tuple(o) for o in self.obs[i]}) != self.n_states:
                return False
        return True


class _Env:
    name: str
    n_agents: int
    n_actions: int
    horizon: int
    gamma: float
    seed: int
    enumerable = True

    # subclasses provide: n_states, initial_distribution, terminal_mask,
    # observe(s), reward(s, a), transition_distribution(s, a), sample_next(s, a, rng)

    @property
    def obs_dim(self) -> int:
        return self.observe(0).shape[1]

    def reset(self, rng_seed=None) -> tuple[int, np.ndarray]:
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(
            self.seed if rng_seed is None else rng_seed
        )
        init = self.initial_distribution()
        state = int(rng.choice(len(init), p=init)) if np.count_nonzero(init) > 1 else int(np.argmax(init))
        return state, self.observe(state)

    def check_actions(self, actions) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.n_agents,):
            raise ShapeError(f"expected {self.n_agents} actions, got shape {actions.shape}")
        if np.any(actions < 0) or np.any(actions >= self.n_actions):
            raise ParameterError(f"actions {actions.tolist()} outside [0, {self.n_actions})")
        return actions

    def step(self, state: int, actions, rng: np.random.Generator, t: int = 0):
        """Advance one step from ``state``; ``t`` is the 0-based index of this step."""
        if self.terminal_mask()[state]:
            raise UsageError(f"cannot step terminal state {state}")
        actions = self.check_actions(actions)
        reward = self.reward(state, actions)
        nxt = self.sample_next(state, actions, rng)
        done = bool(self.terminal_mask()[nxt]) or t + 1 >= self.horizon
        return nxt, self.observe(nxt), reward, done

    def tabular_export(self, gamma: float | None = None) -> TabularMDP:
        if not self.enumerable:
            raise UnsupportedError(f"{self.name} has no enumerable state space")
        S, A, n = self.n_states, self.n_actions, self.n_agents
        J = A**n
        P = np.zeros((S, J, S))
        r = np.zeros((S, J))
        terminal = self.terminal_mask()
        for s in range(S):
            for j, acts in enumerate(joint_actions(n, A)):
                if terminal[s]:
                    P[s, j, s] = 1.0
                    continue
                r[s, j] = self.reward(s, acts)
                for p, s2 in self.transition_distribution(s, acts):
                    P[s, j, s2] += p
        obs = np.stack([np.stack([self.observe(s)[i] for s in range(S)]) for i in range(n)])
        return TabularMDP(
            n_agents=n,
            n_actions=A,
            P=P,
            r=r,
            obs=obs,
            terminal=terminal.copy(),
            initial=self.initial_distribution(),
            gamma=self.gamma if gamma is None else float(gamma),
        )


class CooperativeMatrixGame(_Env):
    """One-shot cooperative game: state 0 is the decision state, 1 is terminal."""

    name = "matrix"

    def __init__(self, n_agents: int = 2, payoff_table=None, n_actions: int = 2, horizon: int = 1, seed: int = 0,
                 gamma: float = 0.99):
        if payoff_table is None:
            payoff = np.zeros((n_actions,) * n_agents)
            payoff[(0,) * n_agents] = 1.0
        else:
            payoff = np.asarray(payoff_table, dtype=np.float64)
            if payoff.ndim != n_agents or len(set(payoff.shape)) != 1:
                raise ShapeError(f"payoff table of shape {payoff.shape} does not fit {n_agents} agents")
            n_actions = payoff.shape[0]
        if not np.all(np.isfinite(payoff)):
            raise ParameterError("payoff table must be finite")
        self.payoff = payoff
        self.n_agents = n_agents
        self.n_actions = n_actions
        self.horizon = horizon
        self.seed = seed
        self.gamma = gamma
        self.n_states = 2

    def config(self) -> dict:
        return {
            "env_name": self.name,
            "n_agents": self.n_agents,
            "payoff_table": self.payoff.tolist(),
            "horizon": self.horizon,
            "seed": self.seed,
            "gamma": self.gamma,
        }

    def initial_distribution(self) -> np.ndarray:
        return np.array([1.0, 0.0])

    def terminal_mask(self) -> np.ndarray:
        return np.array([False, True])

    def observe(self, state: int) -> np.ndarray:
        value = 1.0 if state == 0 else 0.0
        return np.full((self.n_agents, 1), value)

    def reward(self, state: int, actions) -> float:
        return float(self.payoff[tuple(int(a) for a in actions)])

    def transition_distribution(self, state: int, actions):
        return [(1.0, 1)]

    def sample_next(self, state: int, actions, rng) -> int:
        return 1


MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]])  # up, down, left, right


class CoopGrid(_Env):
    """Agents on a ``size x size`` board; reward 1 per step taken while all sit on their goals.

    Each action moves one cell (moves into a wall leave the agent in place).
    With probability ``slip`` an agent's move fails independently and it stays.
    Agent ``i`` observes one-hot positions of every agent, its own first; with
    ``partial_obs`` the other agents are visible only within one cell.
    """

    name = "coopgrid"

    def __init__(self, n_agents: int = 2, grid_size: int = 3, horizon: int = 20, seed: int = 0, slip: float = 0.1,
                 partial_obs: bool = False, gamma: float = 0.99, starts=None, goals=None):
        if grid_size < 2:
            raise ParameterError("grid_size must be at least 2")
        self.n_agents = n_agents
        self.size = grid_size
        self.horizon = horizon
        self.seed = seed
        self.slip = float(slip)
        self.partial_obs = bool(partial_obs)
        self.gamma = gamma
        self.n_actions = 4
        last = grid_size - 1
        default_starts = [(0, 0), (0, last)]
        default_goals = [(last, last), (last, 0)]
        if starts is None:
            starts = [default_starts[i % 2] for i in range(n_agents)]
        if goals is None:
            goals = [default_goals[i % 2] for i in range(n_agents)]
        self.starts = [tuple(p) for p in starts]
        self.goals = [tuple(p) for p in goals]
        self.cells = grid_size * grid_size
        self.n_states = self.cells**n_agents

    def config(self) -> dict:
        return {
            "env_name": self.name,
            "n_agents": self.n_agents,
            "grid_size": self.size,
            "horizon": self.horizon,
            "seed": self.seed,
            "gamma": self.gamma,
            "slip": self.slip,
            "partial_obs": self.partial_obs,
        }

    def positions(self, state: int) -> list[tuple[int, int]]:
        cells = np.unravel_index(state, (self.cells,) * self.n_agents)
        return [divmod(int(c), self.size) for c in cells]

    def state_of(self, positions) -> int:
        cells = [r * self.size + c for r, c in positions]
        return int(np.ravel_multi_index(cells, (self.cells,) * self.n_agents))

    def initial_distribution(self) -> np.ndarray:
        init = np.zeros(self.n_states)
        init[self.state_of(self.starts)] = 1.0
        return init

    def terminal_mask(self) -> np.ndarray:
        return np.zeros(self.n_states, dtype=bool)

    def observe(self, state: int) -> np.ndarray:
        pos = self.positions(state)
        out = np.zeros((self.n_agents, self.cells * self.n_agents))
        for i in range(self.n_agents):
            order = [i] + [k for k in range(self.n_agents) if k != i]
            for slot, k in enumerate(order):
                if self.partial_obs and k != i:
                    if max(abs(pos[k][0] - pos[i][0]), abs(pos[k][1] - pos[i][1])) > 1:
                        continue
                out[i, slot * self.cells + pos[k][0] * self.size + pos[k][1]] = 1.0
        return out

    def reward(self, state: int, actions) -> float:
        return 1.0 if all(p == g for p, g in zip(self.positions(state), self.goals)) else 0.0

    def _moved(self, pos, action):
        r, c = pos[0] + MOVES[action][0], pos[1] + MOVES[action][1]
        if 0 <= r < self.size and 0 <= c < self.size:
            return (int(r), int(c))
        return pos

    def transition_distribution(self, state: int, actions):
        pos = self.positions(state)
        out = []
        for slipped in itertools.product((False, True), repeat=self.n_agents):
            p = 1.0
            new = []
            for i, s in enumerate(slipped):
                p *= self.slip if s else 1.0 - self.slip
                new.append(pos[i] if s else self._moved(pos[i], int(actions[i])))
            if p > 0.0:
                out.append((p, self.state_of(new)))
        return out

    def sample_next(self, state: int, actions, rng) -> int:
        pos = self.positions(state)
        new = []
        for i in range(self.n_agents):
            slipped = rng.random() < self.slip
            new.append(pos[i] if slipped else self._moved(pos[i], int(actions[i])))
        return self.state_of(new)


def make_env(config: dict):
    """Build an environment from a validated config dictionary."""
    try:
        jsonschema.validate(config, ENV_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ParameterError(f"invalid env config: {exc.message}") from exc
    kw = {k: v for k, v in config.items() if k != "env_name"}
    if config["env_name"] == "matrix":
        for key in ("grid_size", "slip", "partial_obs"):
            if key in kw:
                raise ParameterError(f"{key!r} does not apply to the matrix game")
        return CooperativeMatrixGame(**kw)
    if "payoff_table" in kw or "n_actions" in kw:
        raise ParameterError("coopgrid has a fixed action set and no payoff table")
    return CoopGrid(**kw)


def load_env_config(path) -> dict:
    path = Path(path)
    try:
        config = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParameterError(f"{path}: cannot read env config ({exc})") from exc
    make_env(config)  # validates
    return config


@dataclass
class BehaviorPolicy:
    """Factored behavior policy; ``probs[i, s]`` is agent i's action distribution given o_i(s)."""

    probs: np.ndarray  # (n_agents, S, A)
    quality: str

    def __post_init__(self):
        if not np.allclose(self.probs.sum(axis=2), 1.0, rtol=0, atol=1e-12):
            raise ParameterError("behavior policy rows must sum to 1")

    def joint(self) -> np.ndarray:
        """Product policy mu_tot, shape (S, J)."""
        n, S, A = self.probs.shape
        out = np.ones((S, A**n))
        acts = joint_actions(n, A)
        for i in range(n):
            out *= self.probs[i][:, acts[:, i]]
        return out

    def sample(self, state: int, rng: np.random.Generator) -> np.ndarray:
        n, _, A = self.probs.shape
        return np.array([rng.choice(A, p=self.probs[i, state]) for i in range(n)], dtype=np.int64)


def unregularized_optimum(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 100_000):
    """Standard (hard-max) value iteration; returns (V, Q)."""
    V = np.zeros(mdp.n_states)
    live = ~mdp.terminal
    for _ in range(max_iter):
        Q = mdp.r + mdp.gamma * mdp.P @ V
        V_new = np.where(live, Q.max(axis=1), 0.0)
        if np.max(np.abs(V_new - V)) < tol:
            return V_new, mdp.r + mdp.gamma * mdp.P @ V_new
        V = V_new
    raise RuntimeError("value iteration did not converge")


def make_behavior_policy(env, quality: str, seed: int = 0) -> BehaviorPolicy:
    """Behavior policy of the given quality; ``seed`` breaks ties between optimal joint actions."""
    if quality not in QUALITIES:
        raise ParameterError(f"unknown quality {quality!r}; expected one of {QUALITIES}")
    mdp = env.tabular_export()
    n, A, S = mdp.n_agents, mdp.n_actions, mdp.n_states
    uniform = np.full((n, S, A), 1.0 / A)
    if quality == "uniform":
        return BehaviorPolicy(uniform, quality)
    _, Q = unregularized_optimum(mdp)
    rng = np.random.default_rng(seed)
    acts = mdp.joint_actions()
    greedy = np.zeros((n, S, A))
    for s in range(S):
        if mdp.terminal[s]:
            greedy[:, s, :] = 1.0 / A
            continue
        best = np.flatnonzero(Q[s] >= Q[s].max() - 1e-9)
        j = best[0] if len(best) == 1 else rng.choice(best)
        greedy[np.arange(n), s, acts[j]] = 1.0
    expert = (1.0 - EXPERT_EPS) * greedy + EXPERT_EPS * uniform
    mix = {"expert": 1.0, "medium": 0.5, "poor": 0.1}[quality]
    return BehaviorPolicy(mix * expert + (1.0 - mix) * uniform, quality)
