"""Layer-wise adaptive rate scaling with float32 master weights.

Each parameter group keeps a float32 master copy, a float32 velocity,
and a uint16 half-precision working copy that is refreshed from the
master after every applied step.  The local rate for a group is the
norm quotient eta * ||w|| / (||g|| + epsilon), computed on float64
accumulators so the quotient is stable to a few ulps; degenerate norms
fall back to a local rate of 1.  Weight decay folds into the gradient
before the norms are taken, so decayed groups see the regularizer in
their trust ratio.  A step where any gradient is non-finite is
rejected outright and mutates nothing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .halfprec import f32_to_f16

__all__ = ["KINDS", "Schedule", "LarsConfig", "ParamGroup", "make_param_group",
           "lars_local_lr", "lars_step", "zero_grads",
           "save_checkpoint", "load_checkpoint"]

KINDS = ("weight", "bias", "bn_beta", "bn_gamma")


@dataclass(frozen=True)
class Schedule:
    """Global learning rate: linear warmup, then flat or polynomial decay.

    During warmup the rate climbs linearly from zero, reaching base_lr
    exactly at step == warmup_steps, so the decay segment picks up where
    warmup left off with no jump.
    """

    base_lr: float
    kind: str = "constant"
    warmup_steps: int = 0
    total_steps: int = 1
    end_lr: float = 0.0
    power: float = 2.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.kind not in ("constant", "poly"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.kind == "poly":
            if self.total_steps <= self.warmup_steps:
                raise ValueError("poly decay needs total_steps > warmup_steps")
            if self.power <= 0:
                raise ValueError("power must be positive")
            if not 0 <= self.end_lr <= self.base_lr:
                raise ValueError("end_lr must sit in [0, base_lr]")

    def lr(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be >= 0")
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        if self.kind == "constant":
            return self.base_lr
        span = self.total_steps - self.warmup_steps
        progress = min((step - self.warmup_steps) / span, 1.0)
        return (self.base_lr - self.end_lr) * (1.0 - progress) ** self.power + self.end_lr


@dataclass(frozen=True)
class LarsConfig:
    schedule: Schedule
    eta: float = 0.001
    epsilon: float = 0.0
    weight_decay: float = 0.0001
    momentum: float = 0.9

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class ParamGroup:
    """One named parameter tensor plus its optimizer state, all flat."""

    name: str
    kind: str
    master_w: np.ndarray
    grad: np.ndarray
    velocity: np.ndarray
    working_w16: np.ndarray
    decay_exempt: bool | None = None
    lars_enabled: bool | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        for label, arr, want in (("master_w", self.master_w, np.float32),
                                 ("grad", self.grad, np.float32),
                                 ("velocity", self.velocity, np.float32),
                                 ("working_w16", self.working_w16, np.uint16)):
            if not isinstance(arr, np.ndarray) or arr.dtype != want or arr.ndim != 1:
                raise TypeError(f"{label} must be a 1-D {np.dtype(want).name} array")
            if arr.size != self.master_w.size:
                raise ValueError(f"{label} length {arr.size} != {self.master_w.size}")
        # biases and batch-norm parameters skip both decay and the
        # norm-quotient rate unless told otherwise
        if self.decay_exempt is None:
            self.decay_exempt = self.kind != "weight"
        if self.lars_enabled is None:
            self.lars_enabled = self.kind == "weight"

    @property
    def size(self) -> int:
        return self.master_w.size


def make_param_group(name: str, kind: str, values, **flags) -> ParamGroup:
    # always a private copy, so callers can reuse their input buffers
    master = np.array(values, dtype=np.float32).reshape(-1)
    return ParamGroup(
        name=name,
        kind=kind,
        master_w=master,
        grad=np.zeros_like(master),
        velocity=np.zeros_like(master),
        working_w16=f32_to_f16(master),
        **flags,
    )


def lars_local_lr(w: np.ndarray, g: np.ndarray, eta: float,
                  epsilon: float = 0.0) -> float:
    """Norm-quotient rate eta * ||w|| / (||g|| + epsilon), or 1 if degenerate."""
    w_norm = float(np.linalg.norm(w.astype(np.float64)))
    g_norm = float(np.linalg.norm(g.astype(np.float64)))
    denom = g_norm + epsilon
    if w_norm == 0.0 or denom == 0.0:
        return 1.0
    return eta * w_norm / denom


def zero_grads(groups: list[ParamGroup]) -> None:
    for group in groups:
        group.grad[:] = 0.0


def lars_step(groups: list[ParamGroup], cfg: LarsConfig, step: int) -> bool:
    """Apply one optimizer step in place; False (and no mutation) if any
    gradient holds a NaN or infinity."""
    for group in groups:
        if not np.all(np.isfinite(group.grad)):
            return False

    gamma = cfg.schedule.lr(step)
    wd = np.float32(cfg.weight_decay)
    momentum = np.float32(cfg.momentum)
    for group in groups:
        if group.decay_exempt or cfg.weight_decay == 0.0:
            effective = group.grad
        else:
            effective = group.grad + wd * group.master_w
        if group.lars_enabled:
            local = lars_local_lr(group.master_w, effective, cfg.eta, cfg.epsilon)
        else:
            local = 1.0
        scale = np.float32(local * gamma)
        group.velocity[:] = momentum * group.velocity + scale * effective
        group.master_w -= group.velocity
        group.working_w16[:] = f32_to_f16(group.master_w)
    return True


# --- checkpoints ------------------------------------------------------------
# Layout, everything little-endian:
#   magic b"LARS", u16 version, u64 step, u32 group count, then per group
#   u16 name length + name bytes, u8 kind code, u8 flag bits
#   (bit 0 decay_exempt, bit 1 lars_enabled), u64 element count,
#   master float32s, velocity float32s, working uint16s.

_MAGIC = b"LARS"
_VERSION = 1
_HEAD = struct.Struct("<4sHQI")
_GROUP_HEAD = struct.Struct("<BBQ")


def save_checkpoint(path, groups: list[ParamGroup], step: int = 0) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(_MAGIC, _VERSION, step, len(groups)))
        for g in groups:
            name = g.name.encode()
            fh.write(struct.pack("<H", len(name)) + name)
            flags = (1 if g.decay_exempt else 0) | (2 if g.lars_enabled else 0)
            fh.write(_GROUP_HEAD.pack(KINDS.index(g.kind), flags, g.size))
            fh.write(g.master_w.astype("<f4", copy=False).tobytes())
            fh.write(g.velocity.astype("<f4", copy=False).tobytes())
            fh.write(g.working_w16.astype("<u2", copy=False).tobytes())


def load_checkpoint(path) -> tuple[list[ParamGroup], int]:
    with open(path, "rb") as fh:
        magic, version, step, count = _HEAD.unpack(fh.read(_HEAD.size))
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        groups = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            kind_code, flags, n = _GROUP_HEAD.unpack(fh.read(_GROUP_HEAD.size))
            if kind_code >= len(KINDS):
                raise ValueError(f"bad kind code {kind_code} in {name!r}")
            master = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float32)
            velocity = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float32)
            working = np.frombuffer(fh.read(2 * n), dtype="<u2").astype(np.uint16)
            groups.append(ParamGroup(
                name=name,
                kind=KINDS[kind_code],
                master_w=master,
                grad=np.zeros(n, dtype=np.float32),
                velocity=velocity,
                working_w16=working,
                decay_exempt=bool(flags & 1),
                lars_enabled=bool(flags & 2),
            ))
    return groups, step
