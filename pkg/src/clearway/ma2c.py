"""Decentralized actor-critic training over the signal agents.

Every intersection owns an independent policy network and value
network; there is no parameter sharing and no centralized critic.
Both networks share one shape: the joint local observation through a
128-unit rectified layer, the fingerprint (concatenated previous-step
policy simplices of the neighbors) through a 64-unit rectified layer,
both concatenated into a 64-unit LSTM, then a linear head (softmax over
the agent's phases for the policy, a scalar for the value).

Training is on-policy with synchronized updates: actions are sampled
every control step for all agents, records accumulate in a shared
batch, and when the batch reaches its size every agent takes one
gradient step on

    value loss   L_v = 1/(2|B|) * sum_t (R_t - V(s_t))^2
    policy loss  L_p = -1/|B| * sum_t [ ln pi(a_t) * A_t
                                        - lambda * sum_a pi ln pi ]

where R_t = r_t(spatially discounted) + gamma * V_frozen(s_{t+1}) and
A_t = R_t - V_frozen(s_t); targets always use pre-update ("frozen")
value parameters and never backpropagate.  All forward/backward math is
written out long-hand in float64 numpy so the gradients can be checked
against finite differences exactly; the batch window is also the
truncation window for backpropagation through time (hidden state
carries numerically across windows but gradients stop at the boundary,
and resets to zero at every episode start).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import spatial_weight_matrix
from .env import TrafficEnv
from .net import Network
from .scenario import Scenario, TrainConfig

LOG_FLOOR = 1e-10
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CHECKPOINT_FORMAT = 1


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; training aborts rather than limp on."""


def softmax(y: np.ndarray) -> np.ndarray:
    z = np.exp(y - np.max(y))
    return z / z.sum()


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(slots=True)
class _StepCache:
    obs: np.ndarray
    fp: np.ndarray | None
    z_obs: np.ndarray
    z_fp: np.ndarray | None
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    gi: np.ndarray
    gf: np.ndarray
    gg: np.ndarray
    go: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    reset: bool


class TwoBranchLSTM:
    """obs -> FC/ReLU, fingerprint -> FC/ReLU, concat -> LSTM -> linear."""

    def __init__(
        self,
        rng: np.random.Generator,
        obs_dim: int,
        fp_dim: int,
        out_dim: int,
        cfg: TrainConfig,
        zero_head: bool = False,
    ):
        self.obs_dim, self.fp_dim, self.out_dim = obs_dim, fp_dim, out_dim
        self.H = cfg.lstm_units
        no, nf, H = cfg.fc_obs_units, cfg.fc_fp_units, cfg.lstm_units
        std = cfg.init_std

        def init(*shape):
            return rng.normal(0.0, std, size=shape)

        p: dict[str, np.ndarray] = {
            "W_obs": init(obs_dim, no),
            "b_obs": np.zeros(no),
        }
        in_dim = no
        if fp_dim > 0:
            p["W_fp"] = init(fp_dim, nf)
            p["b_fp"] = np.zeros(nf)
            in_dim += nf
        p["W_x"] = init(in_dim, 4 * H)
        p["W_h"] = init(H, 4 * H)
        b_l = np.zeros(4 * H)
        b_l[H : 2 * H] = 1.0  # forget-gate bias, standard stabilizer
        p["b_l"] = b_l
        if zero_head:
            p["W_y"] = np.zeros((H, out_dim))
            p["b_y"] = np.zeros(out_dim)
        else:
            p["W_y"] = init(H, out_dim)
            p["b_y"] = np.zeros(out_dim)
        self.params = p

    def zero_state(self) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros(self.H), np.zeros(self.H)

    def step(
        self,
        obs: np.ndarray,
        fp: np.ndarray | None,
        state: tuple[np.ndarray, np.ndarray],
        caches: list[_StepCache] | None = None,
        reset: bool = False,
    ):
        """One forward step; returns (output, new_state)."""
        if obs.shape != (self.obs_dim,):
            raise ValueError(f"observation width {obs.shape} != ({self.obs_dim},)")
        if self.fp_dim > 0:
            if fp is None or fp.shape != (self.fp_dim,):
                raise ValueError(f"fingerprint width mismatch (want {self.fp_dim})")
        h_prev, c_prev = self.zero_state() if reset else state
        p = self.params
        z_obs = obs @ p["W_obs"] + p["b_obs"]
        a_obs = np.maximum(z_obs, 0.0)
        if self.fp_dim > 0:
            z_fp = fp @ p["W_fp"] + p["b_fp"]
            x = np.concatenate([a_obs, np.maximum(z_fp, 0.0)])
        else:
            z_fp = None
            x = a_obs
        H = self.H
        z = x @ p["W_x"] + h_prev @ p["W_h"] + p["b_l"]
        gi = _sigmoid(z[:H])
        gf = _sigmoid(z[H : 2 * H])
        gg = np.tanh(z[2 * H : 3 * H])
        go = _sigmoid(z[3 * H :])
        c = gf * c_prev + gi * gg
        tanh_c = np.tanh(c)
        h = go * tanh_c
        y = h @ p["W_y"] + p["b_y"]
        if caches is not None:
            caches.append(
                _StepCache(obs, fp, z_obs, z_fp, x, h_prev, c_prev, gi, gf, gg, go, c, tanh_c, reset)
            )
        return y, (h, c)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def backward(self, caches: list[_StepCache], dys: list[np.ndarray]) -> dict[str, np.ndarray]:
        """Backpropagation through time over a cached segment.

        `dys[t]` is dLoss/d(output at step t).  Gradient flow stops at
        reset steps (their zeroed initial state has no history).
        """
        p = self.params
        g = self.zero_grads()
        H = self.H
        no = p["b_obs"].shape[0]
        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        for t in range(len(caches) - 1, -1, -1):
            cache = caches[t]
            dy = dys[t]
            h = cache.go * cache.tanh_c
            g["W_y"] += np.outer(h, dy)
            g["b_y"] += dy
            dh = p["W_y"] @ dy + dh_next
            dgo = dh * cache.tanh_c
            dc = dh * cache.go * (1.0 - cache.tanh_c**2) + dc_next
            dgi = dc * cache.gg
            dgg = dc * cache.gi
            dgf = dc * cache.c_prev
            dc_prev = dc * cache.gf
            dz = np.concatenate(
                [
                    dgi * cache.gi * (1.0 - cache.gi),
                    dgf * cache.gf * (1.0 - cache.gf),
                    dgg * (1.0 - cache.gg**2),
                    dgo * cache.go * (1.0 - cache.go),
                ]
            )
            g["W_x"] += np.outer(cache.x, dz)
            g["W_h"] += np.outer(cache.h_prev, dz)
            g["b_l"] += dz
            dx = p["W_x"] @ dz
            da_obs = dx[:no]
            dz_obs = da_obs * (cache.z_obs > 0.0)
            g["W_obs"] += np.outer(cache.obs, dz_obs)
            g["b_obs"] += dz_obs
            if self.fp_dim > 0:
                dz_fp = dx[no:] * (cache.z_fp > 0.0)
                g["W_fp"] += np.outer(cache.fp, dz_fp)
                g["b_fp"] += dz_fp
            if cache.reset:
                dh_next = np.zeros(H)
                dc_next = np.zeros(H)
            else:
                dh_next = p["W_h"] @ dz
                dc_next = dc_prev
        return g


class Adam:
    """Adaptive-moment optimizer with global-norm clip and linear decay."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, total_updates: int, clip: float):
        self.params = params
        self.lr = lr
        self.total = max(1, total_updates)
        self.clip = clip
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = self.clip / norm if norm > self.clip else 1.0
        rate = self.lr * max(0.0, 1.0 - self.t / self.total)
        self.t += 1
        b1t = 1.0 - ADAM_BETA1**self.t
        b2t = 1.0 - ADAM_BETA2**self.t
        for k, grad in grads.items():
            grad = grad * scale
            self.m[k] = ADAM_BETA1 * self.m[k] + (1.0 - ADAM_BETA1) * grad
            self.v[k] = ADAM_BETA2 * self.v[k] + (1.0 - ADAM_BETA2) * grad * grad
            self.params[k] -= rate * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + ADAM_EPS)


# -- losses (documented entry points, also used by the trainer) ----------


def value_loss(returns: np.ndarray, values: np.ndarray) -> float:
    """L_v = 1/(2|B|) sum (R - V)^2."""
    if returns.size == 0:
        raise ValueError("empty batch")
    return float(np.sum((returns - values) ** 2) / (2 * returns.size))


def value_output_grads(returns: np.ndarray, values: np.ndarray) -> list[np.ndarray]:
    B = returns.size
    return [np.array([(values[t] - returns[t]) / B]) for t in range(B)]


def policy_loss(
    probs: list[np.ndarray], actions: list[int], advantages: np.ndarray, entropy_coef: float
) -> float:
    """L_p = -1/|B| sum [ ln pi(a) * A - lambda * sum_a pi ln pi ]."""
    if not probs:
        raise ValueError("empty batch")
    B = len(probs)
    total = 0.0
    for p, a, adv in zip(probs, actions, advantages):
        ln_p = np.log(np.maximum(p, LOG_FLOOR))
        total += ln_p[a] * adv - entropy_coef * float(p @ ln_p)
    return -total / B


def policy_output_grads(
    probs: list[np.ndarray], actions: list[int], advantages: np.ndarray, entropy_coef: float
) -> list[np.ndarray]:
    """d L_p / d logits per step, consistent with the floored loss."""
    B = len(probs)
    dys = []
    for p, a, adv in zip(probs, actions, advantages):
        above = p > LOG_FLOOR
        ln_p = np.log(np.maximum(p, LOG_FLOOR))
        dlog_pa = (np.eye(len(p))[a] - p) if above[a] else np.zeros_like(p)
        u = ln_p + above.astype(float)
        dentropy = p * (u - float(p @ u))
        dys.append(-(dlog_pa * adv - entropy_coef * dentropy) / B)
    return dys


def sample_action(p: np.ndarray, rng: np.random.Generator | None) -> int:
    """Draw from the simplex, or argmax (ties to lowest id) when rng is None."""
    if rng is None:
        return int(np.argmax(p))
    u = rng.random()
    return min(int(np.searchsorted(np.cumsum(p), u, side="right")), len(p) - 1)


# -- the multi-agent container -------------------------------------------


def fingerprint_dims(net: Network) -> list[int]:
    return [
        sum(len(net.intersections[j].phases) for j in node.neighbors)
        for node in net.intersections
    ]


class MA2C:
    """All agents' networks plus their recurrent/fingerprint state."""

    def __init__(
        self,
        net: Network,
        cfg: TrainConfig,
        rng: np.random.Generator,
        obs_dims: list[int],
        fingerprint: bool = True,
    ):
        self.net = net
        self.cfg = cfg
        self.fingerprint = fingerprint
        self.n_agents = net.n_nodes
        self.obs_dims = list(obs_dims)
        self.n_actions = [len(node.phases) for node in net.intersections]
        self.fp_dims = fingerprint_dims(net) if fingerprint else [0] * net.n_nodes
        self.policies: list[TwoBranchLSTM] = []
        self.values: list[TwoBranchLSTM] = []
        for i in range(self.n_agents):
            self.policies.append(
                TwoBranchLSTM(rng, obs_dims[i], self.fp_dims[i], self.n_actions[i], cfg, zero_head=True)
            )
            self.values.append(
                TwoBranchLSTM(rng, obs_dims[i], self.fp_dims[i], 1, cfg)
            )
        self.policy_state = [p.zero_state() for p in self.policies]
        self.value_carry = [v.zero_state() for v in self.values]
        self.prev_pi = [np.full(n, 1.0 / n) for n in self.n_actions]
        self.episode_start = True

    def reset_episode(self) -> None:
        self.policy_state = [p.zero_state() for p in self.policies]
        self.prev_pi = [np.full(n, 1.0 / n) for n in self.n_actions]
        self.episode_start = True

    def fingerprints(self) -> list[np.ndarray | None]:
        if not self.fingerprint:
            return [None] * self.n_agents
        return [
            np.concatenate([self.prev_pi[j] for j in node.neighbors])
            if node.neighbors
            else np.zeros(0)
            for node in self.net.intersections
        ]

    def act(
        self,
        obs: list[np.ndarray],
        fps: list[np.ndarray | None],
        rng: np.random.Generator | None,
        caches: list[list[_StepCache]] | None = None,
    ) -> tuple[list[int], list[np.ndarray]]:
        """One synchronized decision; advances hidden state + fingerprints."""
        reset = self.episode_start
        self.episode_start = False
        actions, pis = [], []
        for i, policy in enumerate(self.policies):
            cache = caches[i] if caches is not None else None
            y, state = policy.step(obs[i], fps[i], self.policy_state[i], cache, reset=reset)
            self.policy_state[i] = state
            p = softmax(y)
            actions.append(sample_action(p, rng))
            pis.append(p)
        self.prev_pi = pis
        return actions, pis


class PolicyController:
    """Evaluation-mode controller over trained agents.

    Given a generator, actions are sampled from the learned
    distributions (the behavior the agents were trained under and the
    one their critics evaluate); without one, every agent plays its
    modal phase instead.
    """

    def __init__(self, ma2c: MA2C, rng: np.random.Generator | None = None):
        self.ma2c = ma2c
        self.rng = rng

    def reset(self, env: TrafficEnv) -> None:
        self.ma2c.reset_episode()

    def actions(self, env: TrafficEnv) -> list[int]:
        obs = env.observations()
        acts, _ = self.ma2c.act(obs, self.ma2c.fingerprints(), rng=self.rng)
        return acts


# -- training ---------------------------------------------------------------


@dataclass(slots=True)
class CurveRow:
    episode: int
    seed: int
    t_emv_s: float | None
    t_avg_s: float | None
    mean_reward: float


@dataclass(slots=True)
class _Batch:
    obs: list[list[np.ndarray]] = field(default_factory=list)
    fps: list[list[np.ndarray | None]] = field(default_factory=list)
    actions: list[list[int]] = field(default_factory=list)
    probs: list[list[np.ndarray]] = field(default_factory=list)
    rewards: list[np.ndarray] = field(default_factory=list)
    resets: list[bool] = field(default_factory=list)
    terminals: list[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.obs)

    def clear(self) -> None:
        for f in (self.obs, self.fps, self.actions, self.probs, self.rewards, self.resets, self.terminals):
            f.clear()


@dataclass
class TrainResult:
    ma2c: MA2C
    curve: list[CurveRow]
    seed: int
    episodes: int
    updates: int
    pol_opt: list["Adam"] | None = None
    val_opt: list["Adam"] | None = None
    rng_state: dict | None = None


def train(
    scenario: Scenario,
    net: Network,
    seed: int,
    episodes: int,
    *,
    fingerprint: bool = True,
    presslight: bool = False,
    no_primary: bool = False,
    no_secondary: bool = False,
    progress=None,
) -> TrainResult:
    """Run the synchronized on-policy loop; deterministic in (scenario, seed)."""
    rng = np.random.default_rng(seed)
    cfg = scenario.train
    env = TrafficEnv(
        scenario,
        net,
        rng,
        router="relaxation",
        presslight=presslight,
        no_primary=no_primary,
        no_secondary=no_secondary,
    )
    obs_dims = [o.shape[0] for o in env.observations()]
    ma2c = MA2C(net, cfg, rng, obs_dims, fingerprint=fingerprint)
    weights = spatial_weight_matrix(net, cfg.spatial_alpha)
    T = env.horizon_steps
    total_updates = max(1, (episodes * T) // cfg.batch_steps)
    pol_opt = [Adam(p.params, cfg.lr, total_updates, cfg.grad_clip) for p in ma2c.policies]
    val_opt = [Adam(v.params, cfg.lr, total_updates, cfg.grad_clip) for v in ma2c.values]

    batch = _Batch()
    pol_caches: list[list[_StepCache]] = [[] for _ in range(ma2c.n_agents)]
    curve: list[CurveRow] = []
    updates = 0

    for episode in range(episodes):
        env.reset()
        ma2c.reset_episode()
        reward_total = 0.0
        for t in range(T):
            obs = env.observations()
            fps = ma2c.fingerprints()
            first = ma2c.episode_start
            actions, pis = ma2c.act(obs, fps, rng, caches=pol_caches)
            env.step(actions)
            r = env.rewards()
            reward_total += float(np.mean(r))
            batch.obs.append(obs)
            batch.fps.append(fps)
            batch.actions.append(actions)
            batch.probs.append(pis)
            batch.rewards.append(r)
            batch.resets.append(first)
            batch.terminals.append(t == T - 1)
            if len(batch) == cfg.batch_steps:
                _update(ma2c, env, batch, pol_caches, weights, pol_opt, val_opt)
                updates += 1
                batch.clear()
                pol_caches = [[] for _ in range(ma2c.n_agents)]
        m = env.metrics()
        curve.append(
            CurveRow(episode, seed, m.t_emv_s, m.t_avg_s, reward_total / T)
        )
        if progress is not None:
            progress(episode, m)
    return TrainResult(
        ma2c=ma2c,
        curve=curve,
        seed=seed,
        episodes=episodes,
        updates=updates,
        pol_opt=pol_opt,
        val_opt=val_opt,
        rng_state=rng.bit_generator.state,
    )


def _update(ma2c, env, batch, pol_caches, weights, pol_opt, val_opt) -> None:
    cfg = ma2c.cfg
    B = len(batch)
    adj = np.stack([weights @ r for r in batch.rewards])  # (B, n_agents)
    terminal_last = batch.terminals[-1]
    next_obs = None if terminal_last else env.observations()
    next_fps = None if terminal_last else ma2c.fingerprints()

    for i in range(ma2c.n_agents):
        value_net = ma2c.values[i]
        caches: list[_StepCache] = []
        state = ma2c.value_carry[i]
        values = np.empty(B)
        for t in range(B):
            y, state = value_net.step(
                batch.obs[t][i], batch.fps[t][i], state, caches, reset=batch.resets[t]
            )
            values[t] = y[0]
        ma2c.value_carry[i] = state
        if terminal_last:
            v_boot = 0.0
        else:
            y, _ = value_net.step(next_obs[i], next_fps[i], state)
            v_boot = float(y[0])
        returns = np.empty(B)
        for t in range(B):
            if batch.terminals[t]:
                v_next = 0.0
            elif t + 1 < B:
                v_next = values[t + 1]
            else:
                v_next = v_boot
            returns[t] = adj[t, i] + cfg.gamma * v_next
        advantages = returns - values

        probs = [batch.probs[t][i] for t in range(B)]
        actions = [batch.actions[t][i] for t in range(B)]
        l_v = value_loss(returns, values)
        l_p = policy_loss(probs, actions, advantages, cfg.entropy_coef)
        if not (math.isfinite(l_v) and math.isfinite(l_p)):
            raise TrainingDiverged(f"agent {i}: value loss {l_v}, policy loss {l_p}")
        val_opt[i].step(value_net.backward(caches, value_output_grads(returns, values)))
        pol_opt[i].step(
            ma2c.policies[i].backward(
                pol_caches[i], policy_output_grads(probs, actions, advantages, cfg.entropy_coef)
            )
        )


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path: str | Path, result: TrainResult, scenario: Scenario) -> None:
    ma2c = result.ma2c
    arrays: dict[str, np.ndarray] = {}
    for i in range(ma2c.n_agents):
        for key, val in ma2c.policies[i].params.items():
            arrays[f"p{i}.{key}"] = val
        for key, val in ma2c.values[i].params.items():
            arrays[f"v{i}.{key}"] = val
    for tag, opts in (("p", result.pol_opt), ("v", result.val_opt)):
        for i, opt in enumerate(opts or []):
            for key in opt.m:
                arrays[f"adam_{tag}{i}.m.{key}"] = opt.m[key]
                arrays[f"adam_{tag}{i}.v.{key}"] = opt.v[key]
    meta = {
        "format": CHECKPOINT_FORMAT,
        "scenario_name": scenario.name,
        "scenario_hash": scenario.content_hash(),
        "seed": result.seed,
        "episodes": result.episodes,
        "updates": result.updates,
        "fingerprint": ma2c.fingerprint,
        "obs_dims": ma2c.obs_dims,
        "n_actions": ma2c.n_actions,
        "adam_t": [o.t for o in result.pol_opt or []],
        "rng_state": result.rng_state,
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, default=int).encode("utf-8"), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_checkpoint(path: str | Path, scenario: Scenario, net: Network) -> tuple[MA2C, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta["format"] != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta['format']}")
        if meta["scenario_hash"] != scenario.content_hash():
            raise ValueError(
                f"checkpoint was trained on scenario {meta['scenario_name']!r} "
                f"(hash {meta['scenario_hash'][:12]}), which does not match "
                f"{scenario.name!r}"
            )
        ma2c = MA2C(
            net,
            scenario.train,
            np.random.default_rng(0),
            meta["obs_dims"],
            fingerprint=meta["fingerprint"],
        )
        for i in range(ma2c.n_agents):
            for key in ma2c.policies[i].params:
                ma2c.policies[i].params[key] = data[f"p{i}.{key}"].copy()
            for key in ma2c.values[i].params:
                ma2c.values[i].params[key] = data[f"v{i}.{key}"].copy()
    return ma2c, meta
