"""Offline multi-agent datasets: generation, JSONL storage, mixing and batching.

A dataset directory holds ``manifest.json`` and ``transitions.jsonl``.  Each
transition line has exactly the keys ``ep, t, obs, act, rew, next_obs, done``
in that order; ``obs``/``next_obs`` are lists of per-agent observation
vectors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envs import BehaviorPolicy
from .errors import IntegrityError, ParameterError, ParseError, UsageError, VersionError
from .seeding import spawn

FORMAT_VERSION = 1
TRANSITION_KEYS = ("ep", "t", "obs", "act", "rew", "next_obs", "done")


@dataclass
class Transition:
    episode_id: int
    t: int
    obs: np.ndarray  # (n, d)
    actions: np.ndarray  # (n,)
    reward: float
    next_obs: np.ndarray
    done: bool


@dataclass
class DatasetManifest:
    env_name: str
    n_agents: int
    obs_dim: int
    action_count: int
    n_episodes: int
    n_transitions: int
    behavior_quality: str
    seed: int
    avg_return: float
    env: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


@dataclass
class Batch:
    obs: np.ndarray  # (B, n, d)
    act: np.ndarray  # (B, n)
    rew: np.ndarray  # (B,)
    next_obs: np.ndarray  # (B, n, d)
    done: np.ndarray  # (B,) float 0/1

    def __len__(self) -> int:
        return len(self.rew)


@dataclass
class Dataset:
    manifest: DatasetManifest
    ep: np.ndarray
    t: np.ndarray
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return len(self.rew)

    def transition(self, k: int) -> Transition:
        return Transition(int(self.ep[k]), int(self.t[k]), self.obs[k], self.act[k], float(self.rew[k]),
                          self.next_obs[k], bool(self.done[k]))

    def episode_returns(self) -> np.ndarray:
        ids, inverse = np.unique(self.ep, return_inverse=True)
        return np.bincount(inverse, weights=self.rew, minlength=len(ids))

    def as_batch(self) -> Batch:
        return Batch(self.obs, self.act, self.rew, self.next_obs, self.done.astype(np.float64))


def _from_transitions(rows: list[Transition], manifest: DatasetManifest) -> Dataset:
    n, d = manifest.n_agents, manifest.obs_dim
    if rows:
        obs = np.stack([r.obs for r in rows])
        next_obs = np.stack([r.next_obs for r in rows])
        act = np.stack([r.actions for r in rows]).astype(np.int64)
    else:
        obs = next_obs = np.zeros((0, n, d))
        act = np.zeros((0, n), dtype=np.int64)
    return Dataset(
        manifest,
        ep=np.array([r.episode_id for r in rows], dtype=np.int64),
        t=np.array([r.t for r in rows], dtype=np.int64),
        obs=obs.astype(np.float64),
        act=act,
        rew=np.array([r.reward for r in rows], dtype=np.float64),
        next_obs=next_obs.astype(np.float64),
        done=np.array([r.done for r in rows], dtype=bool),
    )


def rollout(env, policy: BehaviorPolicy, rng: np.random.Generator, episode_id: int = 0) -> list[Transition]:
    state, obs = env.reset(rng)
    out = []
    for t in range(env.horizon):
        actions = policy.sample(state, rng)
        nxt, next_obs, reward, done = env.step(state, actions, rng, t)
        out.append(Transition(episode_id, t, obs, actions, reward, next_obs, done))
        if done:
            break
        state, obs = nxt, next_obs
    return out


def build(env, policy: BehaviorPolicy, episodes: int, seed: int) -> Dataset:
    """Roll out ``episodes`` behavior episodes in memory; episode k uses its own RNG stream."""
    if episodes < 1:
        raise ParameterError(f"episodes must be >= 1, got {episodes}")
    rows: list[Transition] = []
    returns = []
    for k, rng in enumerate(spawn(seed, "data", episodes)):
        ep = rollout(env, policy, rng, k)
        rows.extend(ep)
        returns.append(sum(tr.reward for tr in ep))
    manifest = DatasetManifest(
        env_name=env.name,
        n_agents=env.n_agents,
        obs_dim=env.obs_dim,
        action_count=env.n_actions,
        n_episodes=episodes,
        n_transitions=len(rows),
        behavior_quality=policy.quality,
        seed=int(seed),
        avg_return=float(np.mean(returns)),
        env=env.config(),
    )
    return _from_transitions(rows, manifest)


def _transition_line(ds: Dataset, k: int) -> str:
    row = {
        "ep": int(ds.ep[k]),
        "t": int(ds.t[k]),
        "obs": ds.obs[k].tolist(),
        "act": [int(a) for a in ds.act[k]],
        "rew": float(ds.rew[k]),
        "next_obs": ds.next_obs[k].tolist(),
        "done": bool(ds.done[k]),
    }
    return json.dumps(row, separators=(",", ":"))


def save(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(asdict(ds.manifest), indent=2, sort_keys=True) + "\n")
        with open(out / "transitions.jsonl", "w") as fh:
            for k in range(len(ds)):
                fh.write(_transition_line(ds, k) + "\n")
    except OSError as exc:
        raise OSError(f"{out}: cannot write dataset ({exc})") from exc
    return out


def generate(env, policy: BehaviorPolicy, episodes: int, seed: int, out_dir) -> Path:
    return save(build(env, policy, episodes, seed), out_dir)


def _parse_row(line: str, lineno: int, n: int, d: int, A: int) -> Transition:
    try:
        row = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"transitions.jsonl line {lineno}: {exc.msg}") from exc
    if not isinstance(row, dict) or tuple(row) != TRANSITION_KEYS:
        raise ParseError(f"transitions.jsonl line {lineno}: expected keys {TRANSITION_KEYS}")
    try:
        obs = np.asarray(row["obs"], dtype=np.float64)
        next_obs = np.asarray(row["next_obs"], dtype=np.float64)
        act = np.asarray(row["act"], dtype=np.int64)
        rew = float(row["rew"])
    except (TypeError, ValueError) as exc:
        raise ParseError(f"transitions.jsonl line {lineno}: {exc}") from exc
    if obs.shape != (n, d) or next_obs.shape != (n, d) or act.shape != (n,):
        raise IntegrityError(f"transitions.jsonl line {lineno}: dimensions disagree with the manifest")
    if np.any(act < 0) or np.any(act >= A) or not np.isfinite(rew) or int(row["t"]) < 0:
        raise IntegrityError(f"transitions.jsonl line {lineno}: value out of range")
    return Transition(int(row["ep"]), int(row["t"]), obs, act, rew, next_obs, bool(row["done"]))


def load(path) -> Dataset:
    path = Path(path)
    try:
        raw = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise IntegrityError(f"{path}: missing manifest.json") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path / 'manifest.json'}: {exc.msg}") from exc
    if raw.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {raw.get('format_version')!r} unsupported (expected {FORMAT_VERSION})")
    try:
        manifest = DatasetManifest(**raw)
    except TypeError as exc:
        raise ParseError(f"{path / 'manifest.json'}: {exc}") from exc
    n, d, A = manifest.n_agents, manifest.obs_dim, manifest.action_count
    rows = []
    try:
        with open(path / "transitions.jsonl") as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    rows.append(_parse_row(line, lineno, n, d, A))
    except FileNotFoundError as exc:
        raise IntegrityError(f"{path}: missing transitions.jsonl") from exc
    if len(rows) != manifest.n_transitions:
        raise IntegrityError(f"{path}: manifest expects {manifest.n_transitions} transitions, found {len(rows)}")
    found_eps = len({r.episode_id for r in rows})
    if found_eps != manifest.n_episodes:
        raise IntegrityError(f"{path}: manifest expects {manifest.n_episodes} episodes, found {found_eps}")
    return _from_transitions(rows, manifest)


def _subset(ds: Dataset, idx: np.ndarray) -> dict:
    return {k: getattr(ds, k)[idx] for k in ("ep", "t", "obs", "act", "rew", "next_obs", "done")}


def mix(datasets: list[Dataset], proportions, seed: int) -> Dataset:
    """Blend datasets episode-wise: keep round(p_k * episodes_k) episodes of dataset k, then shuffle."""
    if not datasets or len(datasets) != len(proportions):
        raise ParameterError("need one proportion per dataset")
    proportions = np.asarray(proportions, dtype=np.float64)
    if np.any(proportions < 0) or abs(proportions.sum() - 1.0) > 1e-9:
        raise ParameterError(f"proportions {proportions.tolist()} must be non-negative and sum to 1")
    ref = datasets[0].manifest
    dims = ("env_name", "n_agents", "obs_dim", "action_count")
    for ds in datasets[1:]:
        if any(getattr(ds.manifest, k) != getattr(ref, k) for k in dims):
            raise ParameterError("datasets come from incompatible environments")
    rng = np.random.default_rng(seed)
    pieces = []
    for ds, p in zip(datasets, proportions):
        ids = np.unique(ds.ep)
        keep = rng.choice(ids, size=int(round(p * len(ids))), replace=False)
        for e in np.sort(keep):
            pieces.append((ds, np.flatnonzero(ds.ep == e)))
    order = rng.permutation(len(pieces))
    parts = []
    for new_id, k in enumerate(order):
        ds, idx = pieces[k]
        part = _subset(ds, idx)
        part["ep"] = np.full(len(idx), new_id, dtype=np.int64)
        parts.append(part)
    arrays = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]} if parts else _subset(datasets[0], np.array([], dtype=int))
    label = "+".join(f"{ds.manifest.behavior_quality}:{p:g}" for ds, p in zip(datasets, proportions))
    returns = [p["rew"].sum() for p in parts]
    manifest = DatasetManifest(
        env_name=ref.env_name,
        n_agents=ref.n_agents,
        obs_dim=ref.obs_dim,
        action_count=ref.action_count,
        n_episodes=len(parts),
        n_transitions=int(sum(len(p["rew"]) for p in parts)),
        behavior_quality=f"mix({label})",
        seed=int(seed),
        avg_return=float(np.mean(returns)) if returns else 0.0,
        env=dict(ref.env),
    )
    return Dataset(manifest, **arrays)


def sample_batch(ds: Dataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform sample with replacement."""
    if len(ds) == 0:
        raise UsageError("cannot sample from an empty dataset")
    if not 1 <= batch_size <= len(ds):
        raise ParameterError(f"batch_size {batch_size} must lie in [1, {len(ds)}]")
    idx = rng.integers(0, len(ds), size=batch_size)
    return Batch(ds.obs[idx], ds.act[idx], ds.rew[idx], ds.next_obs[idx], ds.done[idx].astype(np.float64))
