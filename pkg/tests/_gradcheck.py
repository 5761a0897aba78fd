"""Central finite-difference harness for the recurrent nets.

Shared by the unit tests and the acceptance suite: run a short segment
through a TwoBranchLSTM, evaluate the training losses, and compare the
long-hand backward pass against numeric differentiation of the whole
forward computation.
"""
from __future__ import annotations

import numpy as np

from clearway.ma2c import (
    TwoBranchLSTM,
    policy_loss,
    policy_output_grads,
    softmax,
    value_loss,
    value_output_grads,
)


def forward_outputs(model, inputs, resets):
    state = model.zero_state()
    ys = []
    for (obs, fp), reset in zip(inputs, resets):
        y, state = model.step(obs, fp, state, reset=reset)
        ys.append(y)
    return ys


def batch_loss(model, inputs, resets, kind, **kw):
    ys = forward_outputs(model, inputs, resets)
    if kind == "policy":
        probs = [softmax(y) for y in ys]
        return policy_loss(probs, kw["actions"], kw["advantages"], kw["coef"])
    values = np.array([y[0] for y in ys])
    return value_loss(kw["returns"], values)


def analytic_grads(model, inputs, resets, kind, **kw):
    caches = []
    state = model.zero_state()
    ys = []
    for (obs, fp), reset in zip(inputs, resets):
        y, state = model.step(obs, fp, state, caches, reset=reset)
        ys.append(y)
    if kind == "policy":
        probs = [softmax(y) for y in ys]
        dys = policy_output_grads(probs, kw["actions"], kw["advantages"], kw["coef"])
    else:
        values = np.array([y[0] for y in ys])
        dys = value_output_grads(kw["returns"], values)
    return model.backward(caches, dys)


def fd_grads(model, inputs, resets, kind, eps=1e-6, **kw):
    grads = {}
    for key, param in model.params.items():
        g = np.zeros_like(param)
        flat = param.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = batch_loss(model, inputs, resets, kind, **kw)
            flat[j] = orig - eps
            lo = batch_loss(model, inputs, resets, kind, **kw)
            flat[j] = orig
            gf[j] = (hi - lo) / (2.0 * eps)
        grads[key] = g
    return grads


def max_rel_err(analytic, fd, floor=1e-4):
    """Worst elementwise |a-f| / max(|a|+|f|, floor).

    The floor keeps finite-difference cancellation noise on near-zero
    gradients from dominating what is meant to be a relative comparison.
    """
    worst = 0.0
    for key in analytic:
        a = analytic[key].ravel()
        f = fd[key].ravel()
        denom = np.maximum(np.abs(a) + np.abs(f), floor)
        worst = max(worst, float(np.max(np.abs(a - f) / denom)))
    return worst


def make_fixture(rng, obs_dim, fp_dim, out_dim, T, cfg, zero_head=False, extra_resets=0):
    """A model plus a T-step input segment starting with an episode reset."""
    model = TwoBranchLSTM(rng, obs_dim, fp_dim, out_dim, cfg, zero_head=zero_head)
    if zero_head:
        # perturb the head so gradients reach every parameter
        model.params["W_y"] += rng.normal(0.0, 0.2, model.params["W_y"].shape)
    reset_at = {0}
    while len(reset_at) < 1 + extra_resets and T > 1:
        reset_at.add(int(rng.integers(1, T)))
    inputs = []
    resets = []
    for t in range(T):
        obs = rng.normal(size=obs_dim)
        fp = rng.uniform(0.0, 1.0, size=fp_dim) if fp_dim > 0 else None
        inputs.append((obs, fp))
        resets.append(t in reset_at)
    return model, inputs, resets


def check_fixture(rng, obs_dim, fp_dim, out_dim, T, cfg, kind, coef=0.01, zero_head=False, extra_resets=0):
    """Build a fixture, compare gradients, return the worst relative error."""
    model, inputs, resets = make_fixture(
        rng, obs_dim, fp_dim, out_dim, T, cfg, zero_head=zero_head, extra_resets=extra_resets
    )
    if kind == "policy":
        kw = dict(
            actions=[int(rng.integers(out_dim)) for _ in range(T)],
            advantages=rng.normal(size=T),
            coef=coef,
        )
    else:
        kw = dict(returns=rng.normal(size=T))
    analytic = analytic_grads(model, inputs, resets, kind, **kw)
    fd = fd_grads(model, inputs, resets, kind, **kw)
    return max_rel_err(analytic, fd)
