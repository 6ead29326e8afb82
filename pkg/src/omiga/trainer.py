"""OMIGA training: in-sample value learning with globally weighted local regularization.

Each iteration samples a batch and takes one Adam step on each objective, in
this order:

1. local state values ``V_i``  (``v_loss``)
2. local Q-values ``Q_i`` and the mixer ``w``/``b``  (``q_loss``)
3. local policies ``pi_i``  (``policy_loss``)

and then soft-updates the target Q networks.  Only dataset actions are ever
fed to a Q network.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .approximator import AdamState, Mlp, NetworkSet, adam_step, backward, forward, init_mlp, predict, soft_update
from .dataset import Batch, Dataset, sample_batch
from .errors import CompatibilityError, NumericError, ParameterError, UsageError
from .mixer import MixerParams, accumulate, init_mixer, mix_q, mix_v, weights, weights_backward
from .seeding import spawn, substream

VARIANTS = ("full", "no_w", "local_w")
EVAL_MODES = ("stochastic", "greedy")
METRIC_COLUMNS = ("step", "v_loss", "q_loss", "pi_loss", "mean_w", "eval_return")
CHECKPOINT_FORMAT = "omiga-checkpoint/1"


@dataclass
class TrainConfig:
    alpha: float = 10.0
    gamma: float = 0.99
    tau: float = 0.005
    q_lr: float = 5e-4
    v_lr: float = 5e-4
    pi_lr: float = 5e-4
    batch_size: int = 128
    steps: int = 20_000
    seed: int = 0
    exp_clamp: float = 20.0
    weight_clamp: float = 100.0
    hidden: int = 256
    mixer_hidden: int = 64
    eval_every: int = 1000
    eval_episodes: int = 32
    eval_mode: str = "stochastic"
    variant: str = "full"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if not 0 <= self.gamma < 1:
            raise ParameterError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0 <= self.tau <= 1:
            raise ParameterError(f"tau must lie in [0, 1], got {self.tau}")
        if not (self.exp_clamp > 0 and self.weight_clamp > 0):
            raise ParameterError("clamps must be positive")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ParameterError("steps must be >= 0, batch_size and eval_every >= 1")
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.eval_mode not in EVAL_MODES:
            raise ParameterError(f"unknown eval mode {self.eval_mode!r}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def ablation_variant(tag: str, base: TrainConfig | None = None) -> TrainConfig:
    """Trainer configuration for ``full``, ``no_w`` (unit weights in the V and policy
    objectives) or ``local_w`` (weights computed from each agent's own observation)."""
    if tag not in VARIANTS:
        raise ParameterError(f"unknown ablation tag {tag!r}; expected one of {VARIANTS}")
    return dataclasses.replace(base or TrainConfig(), variant=tag)


@dataclass
class AgentNets:
    q: list[Mlp]
    q_target: list[Mlp]
    v: list[Mlp]
    pi: list[Mlp]

    @property
    def n_agents(self) -> int:
        return len(self.q)

    @property
    def n_actions(self) -> int:
        return self.pi[0].output_dim


def init_agent_nets(n_agents: int, obs_dim: int, n_actions: int, hidden: int, rng: np.random.Generator) -> AgentNets:
    q, v, pi = [], [], []
    for _ in range(n_agents):
        q.append(init_mlp([obs_dim + n_actions, hidden, hidden, 1], rng))
        v.append(init_mlp([obs_dim, hidden, hidden, 1], rng))
        pi.append(init_mlp([obs_dim, hidden, hidden, n_actions], rng))
    return AgentNets(q, [net.copy() for net in q], v, pi)


def q_inputs(obs_i: np.ndarray, act_i: np.ndarray, n_actions: int) -> np.ndarray:
    """Q-network input: observation concatenated with the one-hot of the *dataset* action."""
    one_hot = np.zeros((len(act_i), n_actions))
    one_hot[np.arange(len(act_i)), act_i] = 1.0
    assert np.array_equal(one_hot.argmax(axis=1), act_i), "Q evaluated on an action outside the batch"
    return np.concatenate([obs_i, one_hot], axis=1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _policy_weights(batch: Batch, mixer: MixerParams, cfg: TrainConfig) -> np.ndarray:
    """Constant (no-gradient) mixing weights used inside the V and policy objectives."""
    if cfg.variant == "no_w":
        return np.ones(batch.act.shape)
    return weights(mixer, batch.obs)[0]


def _check_finite(loss: float, name: str, exponent: np.ndarray | None = None) -> None:
    if not math.isfinite(loss):
        detail = f" (largest exponent {np.nanmax(exponent):.4g})" if exponent is not None else ""
        raise NumericError(f"{name} is not finite{detail}")


def v_loss(batch: Batch, nets: AgentNets, mixer: MixerParams, cfg: TrainConfig):
    """mean_{b,i} exp(min(w_i (Qbar_i - V_i) / alpha, C)) + w_i V_i / alpha; gradients for V_i only."""
    B, n = batch.act.shape
    A, alpha = nets.n_actions, cfg.alpha
    w = _policy_weights(batch, mixer, cfg)
    total, grads, exps = 0.0, {}, []
    for i in range(n):
        q_bar = predict(nets.q_target[i], q_inputs(batch.obs[:, i], batch.act[:, i], A))[:, 0]
        v, tape = forward(nets.v[i], batch.obs[:, i])
        v = v[:, 0]
        z = w[:, i] * (q_bar - v) / alpha
        e = np.exp(np.minimum(z, cfg.exp_clamp))
        total += np.sum(e + w[:, i] * v / alpha)
        dv = (w[:, i] / alpha) * (1.0 - e * (z < cfg.exp_clamp)) / (B * n)
        grads[f"v_{i}"] = backward(tape, dv[:, None])
        exps.append(z)
    loss = float(total / (B * n))
    _check_finite(loss, "v_loss", np.concatenate(exps))
    return loss, grads


def q_loss(batch: Batch, nets: AgentNets, mixer: MixerParams, cfg: TrainConfig):
    """mean (r + gamma (1 - done) V_tot(o') - Q_tot(o, a))^2; gradients for Q_i and the mixer.

    ``V_i`` is held fixed; the mixer receives gradient through both ``o`` and ``o'``.
    Returns ``(loss, grads, mean_w)``.
    """
    B, n = batch.act.shape
    A = nets.n_actions
    w, b, tape = weights(mixer, batch.obs)
    w2, b2, tape2 = weights(mixer, batch.next_obs)
    q_vals, q_tapes, v_next = np.zeros((B, n)), [], np.zeros((B, n))
    for i in range(n):
        out, t = forward(nets.q[i], q_inputs(batch.obs[:, i], batch.act[:, i], A))
        q_vals[:, i] = out[:, 0]
        q_tapes.append(t)
        v_next[:, i] = predict(nets.v[i], batch.next_obs[:, i])[:, 0]
    q_tot = mix_q(w, b, q_vals)
    bootstrap = cfg.gamma * (1.0 - batch.done)
    target = batch.rew + bootstrap * mix_v(w2, b2, v_next)
    delta = target - q_tot
    loss = float(np.mean(delta**2))
    _check_finite(loss, "q_loss")
    g_qtot = -2.0 * delta / B
    g_target = -g_qtot * bootstrap
    grads = {}
    for i in range(n):
        grads[f"q_{i}"] = backward(q_tapes[i], (g_qtot * w[:, i])[:, None])
    gw, gb = weights_backward(mixer, tape, g_qtot[:, None] * q_vals, g_qtot)
    gw2, gb2 = weights_backward(mixer, tape2, g_target[:, None] * v_next, g_target)
    accumulate(grads, "mixer_w", gw)
    accumulate(grads, "mixer_w", gw2)
    accumulate(grads, "mixer_b", gb)
    accumulate(grads, "mixer_b", gb2)
    return loss, grads, float(np.mean(w))


def policy_loss(batch: Batch, nets: AgentNets, mixer: MixerParams, cfg: TrainConfig):
    """-mean_{b,i} min(exp(w_i (Q_i - V_i) / alpha), W_max) log pi_i(a_i | o_i); gradients for pi_i only."""
    B, n = batch.act.shape
    A, alpha = nets.n_actions, cfg.alpha
    w = _policy_weights(batch, mixer, cfg)
    total, grads = 0.0, {}
    rows = np.arange(B)
    for i in range(n):
        act = batch.act[:, i]
        q = predict(nets.q[i], q_inputs(batch.obs[:, i], act, A))[:, 0]
        v = predict(nets.v[i], batch.obs[:, i])[:, 0]
        z = w[:, i] * (q - v) / alpha
        weight = np.minimum(np.exp(np.minimum(z, cfg.exp_clamp)), cfg.weight_clamp)
        logits, tape = forward(nets.pi[i], batch.obs[:, i])
        logp = log_softmax(logits)
        total -= np.sum(weight * logp[rows, act])
        d_logits = np.exp(logp)
        d_logits[rows, act] -= 1.0
        grads[f"pi_{i}"] = backward(tape, d_logits * (weight / (B * n))[:, None])
    loss = float(total / (B * n))
    _check_finite(loss, "policy_loss")
    return loss, grads


# -- checkpoints -------------------------------------------------------------------


@dataclass
class Checkpoint:
    networks: NetworkSet
    config: dict
    meta: dict  # n_agents, obs_dim, n_actions, algo, variant, env

    def net(self, name: str) -> Mlp:
        return self.networks.nets[name]

    @property
    def n_agents(self) -> int:
        return int(self.meta["n_agents"])

    def policy_nets(self) -> list[Mlp]:
        return [self.net(f"pi_{i}") for i in range(self.n_agents)]

    def has_values(self) -> bool:
        return "mixer_w" in self.networks.nets

    def to_json(self) -> dict:
        return {"format": CHECKPOINT_FORMAT, "meta": self.meta, "config": self.config,
                "networks": self.networks.to_json()}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps() + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise CompatibilityError(f"{path}: not a checkpoint of format {CHECKPOINT_FORMAT}")
        return cls(NetworkSet.from_json(doc["networks"]), doc["config"], doc["meta"])

    def mixer(self) -> MixerParams:
        return MixerParams(self.net("mixer_w"), self.net("mixer_b"), self.n_agents,
                           local=self.meta.get("variant") == "local_w")


def _meta(dataset: Dataset, algo: str, variant: str) -> dict:
    m = dataset.manifest
    return {"algo": algo, "variant": variant, "n_agents": m.n_agents, "obs_dim": m.obs_dim,
            "n_actions": m.action_count, "env": m.env, "env_name": m.env_name,
            "dataset_quality": m.behavior_quality}


# -- training ----------------------------------------------------------------------


class OmigaTrainer:
    """Holds all networks and optimizer states; :meth:`update` runs one training iteration."""

    def __init__(self, n_agents: int, obs_dim: int, n_actions: int, cfg: TrainConfig):
        self.cfg = cfg
        rng = substream(cfg.seed, "init")
        self.nets = init_agent_nets(n_agents, obs_dim, n_actions, cfg.hidden, rng)
        self.mixer = init_mixer(n_agents, obs_dim, cfg.mixer_hidden, rng, local=cfg.variant == "local_w")
        self.opt = {}
        for i in range(n_agents):
            self.opt[f"v_{i}"] = AdamState.create(self.nets.v[i], cfg.v_lr)
            self.opt[f"q_{i}"] = AdamState.create(self.nets.q[i], cfg.q_lr)
            self.opt[f"pi_{i}"] = AdamState.create(self.nets.pi[i], cfg.pi_lr)
        self.opt["mixer_w"] = AdamState.create(self.mixer.w_net, cfg.q_lr)
        self.opt["mixer_b"] = AdamState.create(self.mixer.b_net, cfg.q_lr)

    def _get(self, name: str) -> Mlp:
        kind, _, idx = name.rpartition("_")
        if name == "mixer_w":
            return self.mixer.w_net
        if name == "mixer_b":
            return self.mixer.b_net
        return getattr(self.nets, kind)[int(idx)]

    def _set(self, name: str, net: Mlp) -> None:
        if name == "mixer_w":
            self.mixer.w_net = net
        elif name == "mixer_b":
            self.mixer.b_net = net
        else:
            kind, _, idx = name.rpartition("_")
            getattr(self.nets, kind)[int(idx)] = net

    def apply(self, grads: dict) -> None:
        for name, g in grads.items():
            params, self.opt[name] = adam_step(self._get(name), g, self.opt[name])
            self._set(name, params)

    def update(self, batch: Batch) -> dict:
        lv, g = v_loss(batch, self.nets, self.mixer, self.cfg)
        self.apply(g)
        lq, g, mean_w = q_loss(batch, self.nets, self.mixer, self.cfg)
        self.apply(g)
        lp, g = policy_loss(batch, self.nets, self.mixer, self.cfg)
        self.apply(g)
        self.nets.q_target = [soft_update(t, o, self.cfg.tau) for t, o in zip(self.nets.q_target, self.nets.q)]
        return {"v_loss": lv, "q_loss": lq, "pi_loss": lp, "mean_w": mean_w}

    def networks(self) -> NetworkSet:
        nets = {"mixer_w": self.mixer.w_net, "mixer_b": self.mixer.b_net}
        for i in range(self.nets.n_agents):
            nets[f"q_{i}"] = self.nets.q[i]
            nets[f"q_target_{i}"] = self.nets.q_target[i]
            nets[f"v_{i}"] = self.nets.v[i]
            nets[f"pi_{i}"] = self.nets.pi[i]
        return NetworkSet({k: v.copy() for k, v in nets.items()})


def _check_dataset(dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")


def _metrics_row(step: int, window: list[dict], eval_return) -> dict:
    row = {"step": step}
    for key in ("v_loss", "q_loss", "pi_loss", "mean_w"):
        vals = [w[key] for w in window if key in w]
        row[key] = float(np.mean(vals)) if vals else None
    row["eval_return"] = eval_return
    return row


def _run_loop(dataset, env, cfg, step_fn, checkpoint_fn) -> list[dict]:
    batch_rng = substream(cfg.seed, "batch")
    eval_rng = substream(cfg.seed, "eval")
    metrics, window = [], []
    for step in range(1, cfg.steps + 1):
        batch = sample_batch(dataset, min(cfg.batch_size, len(dataset)), batch_rng)
        try:
            window.append(step_fn(batch))
        except NumericError as exc:
            raise NumericError(f"training diverged at step {step}: {exc}") from exc
        if step % cfg.eval_every == 0 or step == cfg.steps:
            eval_seed = int(eval_rng.integers(2**31))
            ret = None
            if env is not None:
                ret, _ = evaluate(checkpoint_fn(), env, cfg.eval_episodes, eval_seed, cfg.eval_mode)
            metrics.append(_metrics_row(step, window, ret))
            window = []
    return metrics


def train(dataset: Dataset, env, cfg: TrainConfig) -> tuple[Checkpoint, list[dict]]:
    """Run ``cfg.steps`` OMIGA iterations; returns the final checkpoint and metrics rows."""
    _check_dataset(dataset)
    m = dataset.manifest
    trainer = OmigaTrainer(m.n_agents, m.obs_dim, m.action_count, cfg)
    meta = _meta(dataset, "omiga", cfg.variant)

    def checkpoint():
        return Checkpoint(trainer.networks(), cfg.to_json(), meta)

    metrics = _run_loop(dataset, env, cfg, trainer.update, checkpoint)
    return checkpoint(), metrics


def bc_loss(batch: Batch, pi_nets: list[Mlp]):
    """Negative log-likelihood of dataset actions, averaged over samples and agents."""
    B, n = batch.act.shape
    rows = np.arange(B)
    total, grads = 0.0, {}
    for i in range(n):
        logits, tape = forward(pi_nets[i], batch.obs[:, i])
        logp = log_softmax(logits)
        total -= np.sum(logp[rows, batch.act[:, i]])
        d = np.exp(logp)
        d[rows, batch.act[:, i]] -= 1.0
        grads[f"pi_{i}"] = backward(tape, d / (B * n))
    loss = float(total / (B * n))
    _check_finite(loss, "bc_loss")
    return loss, grads


def bc_train(dataset: Dataset, cfg: TrainConfig, env=None) -> tuple[Checkpoint, list[dict]]:
    """Behavior cloning with the same policy architecture; returns (checkpoint, metrics)."""
    _check_dataset(dataset)
    m = dataset.manifest
    rng = substream(cfg.seed, "init")
    pi = [init_mlp([m.obs_dim, cfg.hidden, cfg.hidden, m.action_count], rng) for _ in range(m.n_agents)]
    opt = [AdamState.create(net, cfg.pi_lr) for net in pi]
    meta = _meta(dataset, "bc", "bc")

    def step_fn(batch):
        loss, grads = bc_loss(batch, pi)
        for i in range(m.n_agents):
            pi[i], opt[i] = adam_step(pi[i], grads[f"pi_{i}"], opt[i])
        return {"pi_loss": loss}

    def checkpoint():
        return Checkpoint(NetworkSet({f"pi_{i}": net.copy() for i, net in enumerate(pi)}), cfg.to_json(), meta)

    metrics = _run_loop(dataset, env, cfg, step_fn, checkpoint)
    return checkpoint(), metrics


# -- evaluation --------------------------------------------------------------------


def _check_compatible(ckpt: Checkpoint, env) -> None:
    got = (ckpt.meta["n_agents"], ckpt.meta["obs_dim"], ckpt.meta["n_actions"])
    want = (env.n_agents, env.obs_dim, env.n_actions)
    if got != want:
        raise CompatibilityError(f"checkpoint (agents, obs_dim, actions)={got} does not fit env {want}")


def action_probs(ckpt: Checkpoint, joint_obs: np.ndarray) -> np.ndarray:
    """Decentralized action distributions: agent i sees only its own observation.

    ``joint_obs`` has shape (E, n, d); returns (E, n, A).
    """
    return np.stack(
        [np.exp(log_softmax(predict(net, joint_obs[:, i]))) for i, net in enumerate(ckpt.policy_nets())], axis=1
    )


def evaluate(ckpt: Checkpoint, env, episodes: int = 32, seed: int = 0, mode: str = "stochastic"):
    """Mean and standard deviation of undiscounted episode returns."""
    if mode not in EVAL_MODES:
        raise ParameterError(f"unknown eval mode {mode!r}")
    _check_compatible(ckpt, env)
    rngs = spawn(seed, "eval", episodes)
    states = [env.reset(rng)[0] for rng in rngs]
    returns = np.zeros(episodes)
    active = list(range(episodes))
    for t in range(env.horizon):
        if not active:
            break
        obs = np.stack([env.observe(states[e]) for e in active])
        probs = action_probs(ckpt, obs)
        still = []
        for k, e in enumerate(active):
            if mode == "greedy":
                acts = probs[k].argmax(axis=1)
            else:
                u = rngs[e].random(env.n_agents)
                cdf = np.cumsum(probs[k], axis=1)
                acts = np.minimum((cdf < u[:, None]).sum(axis=1), env.n_actions - 1)
            states[e], _, r, done = env.step(states[e], acts, rngs[e], t)
            returns[e] += r
            if not done:
                still.append(e)
        active = still
    return float(returns.mean()), float(returns.std())


def policy_table(ckpt: Checkpoint, mdp) -> np.ndarray:
    """Per-agent policies over the states of a tabular export, shape (n, S, A)."""
    obs = np.transpose(mdp.obs, (1, 0, 2))  # (S, n, d)
    return np.transpose(action_probs(ckpt, obs), (1, 0, 2))


def joint_policy_table(ckpt: Checkpoint, mdp) -> np.ndarray:
    local = policy_table(ckpt, mdp)
    acts = mdp.joint_actions()
    out = np.ones((mdp.n_states, len(acts)))
    for i in range(mdp.n_agents):
        out *= local[i][:, acts[:, i]]
    return out


def q_tot_table(ckpt: Checkpoint, mdp) -> np.ndarray:
    """Learned Q_tot for every (state, joint action) of a tabular export, shape (S, J)."""
    if not ckpt.has_values():
        raise CompatibilityError("checkpoint has no value networks")
    S, n, A = mdp.n_states, mdp.n_agents, mdp.n_actions
    obs = np.transpose(mdp.obs, (1, 0, 2))
    w, b, _ = weights(ckpt.mixer(), obs)
    local_q = np.zeros((n, S, A))
    for i in range(n):
        for a in range(A):
            x = np.concatenate([obs[:, i], np.tile(np.eye(A)[a], (S, 1))], axis=1)
            local_q[i, :, a] = predict(ckpt.net(f"q_{i}"), x)[:, 0]
    acts = mdp.joint_actions()
    q_tot = np.tile(b[:, None], (1, len(acts)))
    for i in range(n):
        q_tot += w[:, i : i + 1] * local_q[i][:, acts[:, i]]
    return q_tot


# -- metrics files -----------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


def write_metrics(rows: list[dict], path) -> Path:
    path = Path(path)
    path.write_text(metrics_csv(rows))
    return path


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ParameterError(f"{path}: unexpected metrics columns {reader.fieldnames}")
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in reader]
