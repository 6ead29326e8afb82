"""Shared-weight linear value decomposition.

    Q_tot(o, a) = sum_i w_i(o) Q_i(o_i, a_i) + b(o)
    V_tot(o)    = sum_i w_i(o) V_i(o_i)      + b(o)

with ``w_i = |raw_i| >= 0``.  The same ``(w, b)`` pair feeds both sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approximator import Mlp, Tape, add_grads, backward, forward, init_mlp
from .errors import ShapeError


@dataclass
class MixerParams:
    w_net: Mlp
    b_net: Mlp
    n_agents: int
    local: bool = False  # w_i computed from o_i alone

    @property
    def obs_dim(self) -> int:
        return self.b_net.input_dim // self.n_agents


def init_mixer(n_agents: int, obs_dim: int, hidden: int, rng: np.random.Generator, local: bool = False) -> MixerParams:
    w_in = obs_dim if local else n_agents * obs_dim
    w_net = init_mlp([w_in, hidden, n_agents], rng)
    b_net = init_mlp([n_agents * obs_dim, hidden, 1], rng)
    return MixerParams(w_net, b_net, n_agents, local)


@dataclass
class MixerTape:
    w_tape: Tape
    b_tape: Tape
    sign: np.ndarray  # d|raw|/d raw, shape (B, n)
    single: bool


def weights(mixer: MixerParams, joint_obs) -> tuple[np.ndarray, np.ndarray, MixerTape]:
    """Mixing weights and offset for one joint observation (n, d) or a batch (B, n, d)."""
    obs = np.asarray(joint_obs, dtype=np.float64)
    single = obs.ndim == 2
    if single:
        obs = obs[None]
    n, d = mixer.n_agents, mixer.obs_dim
    if obs.ndim != 3 or obs.shape[1:] != (n, d):
        raise ShapeError(f"joint observation of shape {np.shape(joint_obs)} does not match ({n}, {d})")
    B = obs.shape[0]
    flat = obs.reshape(B, n * d)
    if mixer.local:
        raw_all, w_tape = forward(mixer.w_net, obs.reshape(B * n, d))
        raw = raw_all.reshape(B, n, n)[:, np.arange(n), np.arange(n)]
    else:
        raw, w_tape = forward(mixer.w_net, flat)
    b, b_tape = forward(mixer.b_net, flat)
    w = np.abs(raw)
    tape = MixerTape(w_tape, b_tape, np.sign(raw), single)
    b = b[:, 0]
    if single:
        return w[0], b[0], tape
    return w, b, tape


def weights_backward(mixer: MixerParams, tape: MixerTape, grad_w, grad_b) -> tuple[Mlp, Mlp]:
    """Parameter gradients of ``sum(grad_w * w) + sum(grad_b * b)``."""
    gw = np.atleast_2d(np.asarray(grad_w, dtype=np.float64)) * tape.sign
    gb = np.asarray(grad_b, dtype=np.float64).reshape(-1, 1)
    B, n = gw.shape
    if mixer.local:
        up = np.zeros((B, n, n))
        up[:, np.arange(n), np.arange(n)] = gw
        gw = up.reshape(B * n, n)
    return backward(tape.w_tape, gw), backward(tape.b_tape, gb)


def accumulate(grads: dict, name: str, g: Mlp) -> None:
    grads[name] = add_grads(grads[name], g) if name in grads else g


def _mix(w, b, values) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if w.shape != values.shape:
        raise ShapeError(f"weights {w.shape} and local values {values.shape} differ in shape")
    return np.sum(w * values, axis=-1) + b


def mix_q(w, b, local_qs):
    return _mix(w, b, local_qs)


def mix_v(w, b, local_vs):
    return _mix(w, b, local_vs)
