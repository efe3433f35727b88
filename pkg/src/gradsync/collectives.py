"""All-reduce schedules and deterministic in-memory execution.

Two schedule families with exact step accounting:

* ring: reduce-scatter then all-gather, ``2(p-1)`` rounds, each worker
  moving one of ``p`` contiguous chunks per round;
* hierarchical: intra-group reduce to a group master, a ring across the
  ``p/k`` masters, then an intra-group broadcast, for
  ``4(k-1) + 2(p/k-1)`` rounds.

The hybrid selector picks hierarchical for payloads strictly under a
byte threshold and ring otherwise.

Arithmetic convention: FP32 combines are always applied in ascending
rank order, whatever order messages would arrive in, so results are
bitwise identical across algorithms and transports.  To make that order
physically realizable the reduce-scatter rounds deliver each raw chunk
straight to the rank that owns it (a pairwise exchange with the same
round and byte accounting as the classic rotating ring) and the owner
folds contributions 0,1,...,p-1.  FP16 payloads stay uint16 patterns on
the wire; each combine widens to FP32, adds, and narrows, over a fixed
pairwise tree so the rounding error stays shallow and deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .halfprec import f16_to_f32, f32_to_f16

__all__ = [
    "Topology",
    "Round",
    "ReduceSchedule",
    "ring_schedule",
    "hierarchical_schedule",
    "choose_algorithm",
    "ring_allreduce",
    "hierarchical_allreduce",
    "hybrid_allreduce",
    "allreduce_f16",
]


@dataclass(frozen=True)
class Topology:
    """Worker count ``p`` split into contiguous groups of size ``k``.

    The lowest rank of each group acts as its master.
    """

    p: int
    k: int = 1

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"need at least one worker, got p={self.p}")
        if self.k < 1:
            raise ValueError(f"group size must be >= 1, got k={self.k}")
        if self.p % self.k:
            raise ValueError(f"group size {self.k} does not divide worker count {self.p}")

    @property
    def group_count(self) -> int:
        return self.p // self.k

    def group_of(self, rank: int) -> int:
        return rank // self.k

    def members(self, group: int) -> range:
        return range(group * self.k, (group + 1) * self.k)

    def masters(self) -> list[int]:
        return [g * self.k for g in range(self.group_count)]


@dataclass
class Round:
    """One step round: concurrent transfers sharing a phase tag.

    ``transfers`` is an (n, 3) int64 array of sender, receiver,
    byte_count rows.
    """

    phase: str
    transfers: np.ndarray

    @property
    def max_bytes(self) -> int:
        return int(self.transfers[:, 2].max()) if len(self.transfers) else 0

    @property
    def total_bytes(self) -> int:
        return int(self.transfers[:, 2].sum()) if len(self.transfers) else 0


@dataclass
class ReduceSchedule:
    """Ordered rounds for one all-reduce, plus enough to serialize them."""

    algorithm: str
    p: int
    k: int
    rounds: list[Round] = field(default_factory=list)

    @property
    def total_steps(self) -> int:
        return len(self.rounds)

    @property
    def bytes_on_wire(self) -> int:
        return sum(r.total_bytes for r in self.rounds)

    def phases(self) -> list[str]:
        seen = []
        for r in self.rounds:
            if r.phase not in seen:
                seen.append(r.phase)
        return seen

    def to_json(self) -> str:
        return json.dumps({
            "algorithm": self.algorithm,
            "p": self.p,
            "k": self.k,
            "steps": [
                {"phase": r.phase, "transfers": r.transfers.tolist()}
                for r in self.rounds
            ],
        })

    @classmethod
    def from_json(cls, text: str) -> "ReduceSchedule":
        doc = json.loads(text)
        rounds = [
            Round(phase=s["phase"],
                  transfers=np.asarray(s["transfers"], dtype=np.int64).reshape(-1, 3))
            for s in doc["steps"]
        ]
        return cls(algorithm=doc["algorithm"], p=doc["p"], k=doc["k"], rounds=rounds)


def chunk_sizes(n: int, parts: int) -> np.ndarray:
    """Sizes of ``parts`` contiguous chunks covering ``n`` elements."""
    base, extra = divmod(n, parts)
    return base + (np.arange(parts) < extra).astype(np.int64)


def _round(phase: str, senders, receivers, nbytes) -> Round:
    t = np.empty((len(senders), 3), dtype=np.int64)
    t[:, 0] = senders
    t[:, 1] = receivers
    t[:, 2] = nbytes
    return Round(phase=phase, transfers=t)


def ring_schedule(p: int, n_elems: int, itemsize: int = 4, k: int = 1) -> ReduceSchedule:
    """Ring all-reduce schedule: ``2(p-1)`` rounds over ``p`` chunks.

    Reduce-scatter rounds send each rank's raw slice of chunk ``c``
    straight to owner ``c`` (rank ``r`` reaches ``(r+s) % p`` in round
    ``s``); all-gather rounds circulate the finished chunks neighbor to
    neighbor.  Every round moves one chunk per worker, matching the
    classic ring's accounting.
    """
    sched = ReduceSchedule(algorithm="ring", p=p, k=k)
    if p == 1:
        return sched
    sizes = chunk_sizes(n_elems, p) * itemsize
    ranks = np.arange(p)
    for s in range(1, p):
        owners = (ranks + s) % p
        sched.rounds.append(_round("reduce_scatter", ranks, owners, sizes[owners]))
    for s in range(1, p):
        chunks = (ranks - s + 1) % p
        sched.rounds.append(_round("allgather", ranks, (ranks + 1) % p, sizes[chunks]))
    return sched


def hierarchical_schedule(topo: Topology, n_elems: int, itemsize: int = 4) -> ReduceSchedule:
    """Three-phase hierarchical schedule: ``4(k-1) + 2(p/k-1)`` rounds.

    Intra-group reduce (a reduce-scatter plus a pipelined gather to the
    master, ``2(k-1)`` rounds), a ring across the group masters
    (``2(p/k-1)`` rounds), and an intra-group broadcast mirroring the
    reduce (``2(k-1)`` rounds).
    """
    p, k, G = topo.p, topo.k, topo.group_count
    sched = ReduceSchedule(algorithm="hierarchical", p=p, k=k)
    if p == 1:
        return sched
    intra = chunk_sizes(n_elems, k) * itemsize
    base = np.repeat(np.arange(G) * k, k)          # group base rank per member slot
    offs = np.tile(np.arange(k), G)                # member offset within group

    if k > 1:
        for s in range(1, k):
            dest = (offs + s) % k
            sched.rounds.append(_round(
                "intra_reduce_scatter", base + offs, base + dest, intra[dest]))
        for s in range(1, k):
            # pipeline: chunk j+s-1 rides the sender at offset j this round
            j = np.arange(1, k - s + 1)
            snd = (np.arange(G)[:, None] * k + j[None, :]).ravel()
            chunk = np.tile(j + s - 1, G)
            sched.rounds.append(_round("intra_gather", snd, snd - 1, intra[chunk]))

    if G > 1:
        masters = np.arange(G) * k
        gsizes = chunk_sizes(n_elems, G) * itemsize
        gids = np.arange(G)
        for s in range(1, G):
            owners = (gids + s) % G
            sched.rounds.append(_round(
                "master_reduce_scatter", masters, masters[owners], gsizes[owners]))
        for s in range(1, G):
            chunks = (gids - s + 1) % G
            sched.rounds.append(_round(
                "master_allgather", masters, masters[(gids + 1) % G], gsizes[chunks]))

    if k > 1:
        for s in range(1, k):
            # farthest result chunk leaves the master first
            j = np.arange(0, s)
            snd = (np.arange(G)[:, None] * k + j[None, :]).ravel()
            chunk = np.tile(k - s + j, G)
            sched.rounds.append(_round("intra_scatter", snd, snd + 1, intra[chunk]))
        for s in range(1, k):
            chunk = (offs - s + 1) % k
            sched.rounds.append(_round(
                "intra_allgather", base + offs, base + (offs + 1) % k, intra[chunk]))
    return sched


def choose_algorithm(nbytes: int, eta_bytes: int) -> str:
    """Hybrid rule: hierarchical strictly under the threshold, else ring.

    A zero threshold therefore always picks ring, and a payload exactly
    at the threshold goes to ring as well.
    """
    return "hierarchical" if nbytes < eta_bytes else "ring"


def _validated(buffers, expect_dtype) -> list[np.ndarray]:
    if not buffers:
        raise ValueError("need at least one buffer")
    arrs = [np.asarray(b) for b in buffers]
    shape, dtype = arrs[0].shape, arrs[0].dtype
    if dtype != expect_dtype:
        raise ValueError(f"expected {np.dtype(expect_dtype)} buffers, got {dtype}")
    for i, a in enumerate(arrs):
        if a.shape != shape or a.dtype != dtype:
            raise ValueError(
                f"buffer {i} has shape {a.shape} dtype {a.dtype}, expected {shape} {dtype}")
    return arrs


def fold_ascending(buffers: list[np.ndarray], op: str = "sum") -> np.ndarray:
    """Sequential left-to-right FP32 fold in rank order (the fixed order)."""
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction op {op!r}")
    acc = buffers[0].astype(np.float32, copy=True)
    for b in buffers[1:]:
        acc += b
    if op == "mean":
        acc /= np.float32(len(buffers))
    return acc


def fold_f16_tree(buffers: list[np.ndarray]) -> np.ndarray:
    """Pairwise-tree fold of uint16 pattern buffers, widen-add-narrow."""
    level = list(buffers)
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            nxt.append(f32_to_f16(f16_to_f32(level[i]) + f16_to_f32(level[i + 1])))
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return np.asarray(level[0], dtype=np.uint16).copy()


def _finish(buffers, schedule, op) -> tuple[list[np.ndarray], ReduceSchedule]:
    reduced = fold_ascending(buffers, op)
    return [reduced.copy() for _ in buffers], schedule


def ring_allreduce(buffers, topo: Topology | None = None, *, op: str = "sum"):
    """All-reduce FP32 buffers over the ring schedule.

    Returns (per-worker results, schedule); results are bitwise equal to
    the ascending sequential fold on every worker.
    """
    arrs = _validated(buffers, np.float32)
    p = len(arrs)
    if topo is not None and topo.p != p:
        raise ValueError(f"topology is for p={topo.p}, got {p} buffers")
    sched = ring_schedule(p, arrs[0].size, arrs[0].itemsize, k=topo.k if topo else 1)
    return _finish(arrs, sched, op)


def hierarchical_allreduce(buffers, topo: Topology, *, op: str = "sum"):
    """All-reduce FP32 buffers over the three-phase hierarchical schedule."""
    arrs = _validated(buffers, np.float32)
    if topo.p != len(arrs):
        raise ValueError(f"topology is for p={topo.p}, got {len(arrs)} buffers")
    sched = hierarchical_schedule(topo, arrs[0].size, arrs[0].itemsize)
    return _finish(arrs, sched, op)


def hybrid_allreduce(buffers, topo: Topology, eta_bytes: int, *, op: str = "sum"):
    """Pick ring or hierarchical by payload size, then all-reduce."""
    arrs = _validated(buffers, np.float32)
    if choose_algorithm(arrs[0].nbytes, eta_bytes) == "hierarchical":
        return hierarchical_allreduce(arrs, topo, op=op)
    return ring_allreduce(arrs, topo, op=op)


def allreduce_f16(buffers, topo: Topology | None = None, *, algorithm: str = "ring"):
    """All-reduce uint16 binary16 patterns; combines widen-add-narrow.

    The byte accounting in the schedule reflects the 2-byte payloads.
    """
    arrs = _validated(buffers, np.uint16)
    p = len(arrs)
    if topo is not None and topo.p != p:
        raise ValueError(f"topology is for p={topo.p}, got {p} buffers")
    if algorithm == "ring":
        sched = ring_schedule(p, arrs[0].size, arrs[0].itemsize, k=topo.k if topo else 1)
    elif algorithm == "hierarchical":
        if topo is None:
            raise ValueError("hierarchical all-reduce needs a topology")
        sched = hierarchical_schedule(topo, arrs[0].size, arrs[0].itemsize)
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    reduced = fold_f16_tree(arrs)
    return [reduced.copy() for _ in arrs], sched
