"""Plain-text checkpoints.

Layout::

    diffsampler-checkpoint 1
    step <int>
    ema:true|false
    config <key> = <value>          (one line per TrainConfig key)
    tensor <name> <shape...>        (followed by one line of floats)

Floats are written with 17 significant digits, so float64 tensors
round-trip bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import jax.numpy as jnp
import numpy as np

from .config import TrainConfig, config_from_items
from .errors import ConfigError
from .nn import ControlPolicy, flatten_params, unflatten_params

MAGIC = "diffsampler-checkpoint 1"


@dataclass
class Checkpoint:
    params: dict
    ema_params: dict | None
    step: int
    config: TrainConfig

    @property
    def has_ema(self) -> bool:
        return self.ema_params is not None

    def policy(self, use_ema=True, clip_c=None) -> ControlPolicy:
        """Policy with the EMA parameters (if present) and the clip bound in force at ``step``."""
        from .train import clip_schedule

        cfg = self.config
        params = self.ema_params if (use_ema and self.has_ema) else self.params
        if clip_c is None:
            clip_c = clip_schedule(self.step, cfg)
        return ControlPolicy(params, cfg.target_density(), cfg.process(), cfg.net(), clip_c,
                             cfg.detach_score)


def _fmt(a):
    return " ".join(f"{v:.17g}" for v in np.asarray(a, dtype=np.float64).ravel())


def save_checkpoint(ckpt: Checkpoint, path):
    lines = [MAGIC, f"step {ckpt.step}", f"ema:{'true' if ckpt.has_ema else 'false'}"]
    lines += [f"config {k} = {v}" for k, v in ckpt.config.to_items()]
    groups = [("params", ckpt.params)] + ([("ema", ckpt.ema_params)] if ckpt.has_ema else [])
    for prefix, tree in groups:
        for name, arr in flatten_params(tree, prefix).items():
            arr = np.asarray(arr)
            lines.append(f"tensor {name} " + " ".join(str(n) for n in arr.shape))
            lines.append(_fmt(arr))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> Checkpoint:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    step, ema, items, tensors = None, None, [], {}
    i = 1
    while i < len(text):
        line = text[i]
        head, _, rest = line.partition(" ")
        if head.startswith("ema:"):
            head, rest = "ema", head[4:]
        if head == "step":
            step = int(rest)
        elif head == "ema":
            ema = rest.strip() == "true"
        elif head == "config":
            key, _, value = rest.partition(" = ")
            items.append((key.strip(), value.strip()))
        elif head == "tensor":
            name, *shape = rest.split()
            shape = tuple(int(s) for s in shape)
            i += 1
            vals = np.array([float(v) for v in text[i].split()], dtype=np.float64)
            tensors[name] = vals.reshape(shape)
        elif line.strip():
            raise ConfigError(f"{path}:{i + 1}: unrecognized line {line[:40]!r}")
        i += 1
    if step is None or ema is None:
        raise ConfigError(f"{path}: missing step/ema header")
    cfg = config_from_items(items)
    dtype = jnp.float64 if cfg.precision == "float64" else jnp.float32
    tree = unflatten_params({k: jnp.asarray(v, dtype) for k, v in tensors.items()})
    return Checkpoint(tree["params"], tree.get("ema") if ema else None, step, cfg)
