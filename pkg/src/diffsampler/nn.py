"""Control network u(x, t) = Phi1(x, t) + Phi2(t) sigma(t) s(x, t).

s linearly interpolates between the target score (at t = 0) and the prior
score (at t = T). Parameters are nested dicts of arrays; gradients come from
``jax.grad`` (reverse mode over the traced rollout).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ConfigError, GradientError, InputError, PolicyError
from .sde import is_traced


@dataclass(frozen=True)
class NetConfig:
    width: int = 64
    phi2_width: int = 64
    fourier: str = "integer"  # integer frequencies k = 1..c, or "random" Gaussian ones

    def __post_init__(self):
        if self.width < 1 or self.phi2_width < 1:
            raise ConfigError("network widths must be positive")
        if self.fourier not in ("integer", "random"):
            raise ConfigError(f"unknown fourier feature type {self.fourier!r}")


def default_width(dim: int) -> int:
    return 64 if dim <= 10 else 128


def gelu(x):
    return jax.nn.gelu(x, approximate=False)


def fourier_features(t, c: int, T: float, freqs=None, dtype=None):
    """[sin(2 pi k t / T), cos(2 pi k t / T)] for k = 1..c (or the given frequencies)."""
    k = jnp.arange(1, c + 1, dtype=dtype or jnp.result_type(float)) if freqs is None else freqs
    arg = 2.0 * jnp.pi * k * (jnp.asarray(t)[..., None] / T)
    return jnp.concatenate([jnp.sin(arg), jnp.cos(arg)], axis=-1)


def dense(p, x):
    return x @ p["w"] + p["b"]


def random_frequencies(c: int, dtype):
    """Fixed (non-trainable) Gaussian frequencies, drawn from a constant key."""
    return jnp.abs(jax.random.normal(jax.random.PRNGKey(c), (c,), dtype)) * c / 4


def fourier_embed(p, t, T: float, fourier="integer"):
    """linear -> GELU -> linear applied to the Fourier features of t."""
    c = p["l2"]["w"].shape[1]
    dtype = p["l1"]["w"].dtype
    freqs = random_frequencies(c, dtype) if fourier == "random" else None
    h = fourier_features(t, c, T, freqs, dtype)
    return dense(p["l2"], gelu(dense(p["l1"], h)))


def phi1(p, x, t, T, fourier="integer"):
    h = gelu(dense(p["x_in"], x) + fourier_embed(p["emb"], t, T, fourier))
    h = gelu(dense(p["h1"], h))
    h = gelu(dense(p["h2"], h))
    return dense(p["out"], h)


def phi2(p, t, T, fourier="integer"):
    h = dense(p["h1"], gelu(fourier_embed(p["emb"], t, T, fourier)))
    return dense(p["out"], gelu(h))[..., 0]


def _uniform_layer(key, fan_in, fan_out, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    kw, kb = jax.random.split(key)
    return {
        "w": jax.random.uniform(kw, (fan_in, fan_out), dtype, -bound, bound),
        "b": jax.random.uniform(kb, (fan_out,), dtype, -bound, bound),
    }


def _embed_params(key, c, dtype):
    k1, k2 = jax.random.split(key)
    return {"l1": _uniform_layer(k1, 2 * c, c, dtype), "l2": _uniform_layer(k2, c, c, dtype)}


def init_params(net: NetConfig, dim: int, seed: int = 0, dtype=jnp.float64):
    """Fan-in uniform hidden layers; Phi1 output zero, Phi2 output weight 0 and bias 1."""
    c, c2 = net.width, net.phi2_width
    keys = jax.random.split(jax.random.PRNGKey(seed), 6)
    p1 = {
        "x_in": _uniform_layer(keys[0], dim, c, dtype),
        "emb": _embed_params(keys[1], c, dtype),
        "h1": _uniform_layer(keys[2], c, c, dtype),
        "h2": _uniform_layer(keys[3], c, c, dtype),
        "out": {"w": jnp.zeros((c, dim), dtype), "b": jnp.zeros((dim,), dtype)},
    }
    k5a, k5b = jax.random.split(keys[5])
    p2 = {
        "emb": _embed_params(keys[4], c2, dtype),
        "h1": _uniform_layer(k5a, c2, c2, dtype),
        "out": {"w": jnp.zeros((c2, 1), dtype), "b": jnp.ones((1,), dtype)},
    }
    return {"phi1": p1, "phi2": p2}


def interpolated_score(target, schedule, x, t):
    """s(x, t) = (t/T) grad log p_prior(x) + (1 - t/T) grad log rho(x)."""
    if schedule.starts_at_origin:
        return target._grad(x)
    r = t / schedule.T
    return r * schedule.prior_score(x) + (1.0 - r) * target._grad(x)


def apply_policy(params, target, schedule, x, t, clip_c=jnp.inf, detach_score=True, fourier="integer"):
    """Evaluate u_theta(x, t); t is inference time, x has shape (..., d)."""
    s = interpolated_score(target, schedule, x, t)
    if detach_score:
        s = jax.lax.stop_gradient(s)
    s = jnp.clip(s, -clip_c, clip_c)
    a = jnp.clip(phi1(params["phi1"], x, t, schedule.T, fourier), -clip_c, clip_c)
    b = jnp.clip(phi2(params["phi2"], t, schedule.T, fourier), -clip_c, clip_c)
    return a + b[..., None] * schedule.sigma(t) * s


@partial(jax.tree_util.register_dataclass, data_fields=["params", "clip_c"],
         meta_fields=["target", "schedule", "net", "detach_score"])
@dataclass
class ControlPolicy:
    """Parametrized control; callable as ``policy(x, t)`` with t in inference time."""

    params: dict
    target: object
    schedule: object
    net: NetConfig = field(default_factory=NetConfig)
    clip_c: float = math.inf
    detach_score: bool = True

    def __call__(self, x, t):
        return apply_policy(self.params, self.target, self.schedule, x, t, self.clip_c, self.detach_score,
                            self.net.fourier)

    def with_params(self, params, clip_c=None):
        return replace(self, params=params, clip_c=self.clip_c if clip_c is None else clip_c)


def init_policy(net: NetConfig, target, schedule, seed: int = 0, clip_c=math.inf,
                detach_score=True, dtype=jnp.float64) -> ControlPolicy:
    if target.dim != schedule.dim:
        raise ConfigError(f"target dimension {target.dim} does not match schedule dimension {schedule.dim}")
    params = init_params(net, target.dim, seed, dtype)
    return ControlPolicy(params, target, schedule, net, clip_c, detach_score)


def policy_eval(policy: ControlPolicy, x, t):
    x = jnp.asarray(x)
    if x.shape[-1:] != (policy.target.dim,):
        raise InputError(f"x must have trailing dimension {policy.target.dim}")
    if not is_traced(t) and not (0 <= t <= policy.schedule.T):
        raise InputError(f"time {t} outside [0, {policy.schedule.T}]")
    u = policy(x, t)
    if not is_traced(u) and not bool(jnp.all(jnp.isfinite(u))):
        raise PolicyError("control is not finite")
    return u


def global_norm(tree):
    return jnp.sqrt(sum(jnp.sum(g**2) for g in jax.tree_util.tree_leaves(tree)))


def backward(loss_fn, params, *args):
    """Return (loss, grads) of a scalar loss via reverse-mode differentiation.

    Gradients are keyed like ``params``; raises GradientError when the loss
    or any gradient entry is not finite.
    """
    loss, grads = jax.value_and_grad(loss_fn)(params, *args)
    if not is_traced(loss):
        if not np.isfinite(float(loss)):
            raise GradientError(f"loss is not finite ({float(loss)})")
        if not np.isfinite(float(global_norm(grads))):
            raise GradientError("gradient is not finite")
    return loss, grads


def flatten_params(params, prefix=""):
    """Flatten nested dicts into {'a/b/c': array} with sorted keys."""
    out = {}
    for k in sorted(params):
        v = params[k]
        name = f"{prefix}/{k}" if prefix else k
        if isinstance(v, dict):
            out.update(flatten_params(v, name))
        else:
            out[name] = v
    return out


def unflatten_params(flat):
    out = {}
    for name, v in flat.items():
        node = out
        parts = name.split("/")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v
    return out
