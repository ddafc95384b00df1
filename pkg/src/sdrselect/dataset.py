"""Offline trajectories, relabeled BC pairs and the OBDS binary file format.

OBDS layout (little-endian)::

    b"OBDS" | u32 version=1 | u64 header_len | header JSON (UTF-8)
    states      f32[n, state_dim]
    actions     u32[n]            (discrete)  or f32[n, action_dim]
    rewards     f32[n]
    next_states f32[n, state_dim]
    timesteps   u32[n]
    traj_ids    u32[n]
    dones       u8[n]
    -- optional extension, listed in header["extensions"] --
    expert_actions  same dtype/shape as actions     ("expert_actions")
    q_values    f32[n], densities f32[n]            ("estimates")

Columns are packed with no padding.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import (
    BadMagicError,
    BudgetError,
    InvariantViolationError,
    PolicyDomainError,
    TruncatedFileError,
    UnsupportedVersionError,
)

MAGIC = b"OBDS"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

DISCRETE = "discrete"
CONTINUOUS = "continuous"


@dataclass(frozen=True)
class DatasetHeader:
    state_dim: int
    action_kind: str
    action_size: int  # n_actions for discrete, action_dim for continuous
    horizon: int
    env_name: str = ""
    collection_seed: int = 0
    quality_tier: str = ""

    def to_json(self, n_transitions: int, n_trajectories: int, extensions=()) -> dict:
        out = {
            "state_dim": self.state_dim,
            "action_kind": self.action_kind,
            "horizon": self.horizon,
            "n_transitions": n_transitions,
            "n_trajectories": n_trajectories,
            "env_name": self.env_name,
            "collection_seed": self.collection_seed,
            "quality_tier": self.quality_tier,
        }
        if self.action_kind == DISCRETE:
            out["n_actions"] = self.action_size
        else:
            out["action_dim"] = self.action_size
        if extensions:
            out["extensions"] = list(extensions)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetHeader":
        try:
            kind = obj["action_kind"]
            size = obj["n_actions"] if kind == DISCRETE else obj["action_dim"]
            return cls(
                state_dim=int(obj["state_dim"]),
                action_kind=kind,
                action_size=int(size),
                horizon=int(obj["horizon"]),
                env_name=str(obj.get("env_name", "")),
                collection_seed=int(obj.get("collection_seed", 0)),
                quality_tier=str(obj.get("quality_tier", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvariantViolationError(f"malformed OBDS header: {exc}") from exc


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """Columnar transitions collected by a behavior policy."""

    header: DatasetHeader
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    timesteps: np.ndarray
    traj_ids: np.ndarray
    dones: np.ndarray

    def __post_init__(self):
        h = self.header
        cast = {
            "states": np.float32,
            "rewards": np.float32,
            "next_states": np.float32,
            "timesteps": np.uint32,
            "traj_ids": np.uint32,
            "dones": np.bool_,
            "actions": np.uint32 if h.action_kind == DISCRETE else np.float32,
        }
        for name, dtype in cast.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = len(self.rewards)
        for name in ("states", "next_states"):
            arr = getattr(self, name)
            if arr.size == 0:
                object.__setattr__(self, name, arr.reshape(n, h.state_dim))
        if h.action_kind == CONTINUOUS and self.actions.size == 0:
            object.__setattr__(self, "actions", self.actions.reshape(n, h.action_size))

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def n_trajectories(self) -> int:
        return int(len(np.unique(self.traj_ids)))

    def validate(self) -> None:
        """Raise InvariantViolationError if any dataset invariant fails."""
        h = self.header
        n = len(self)
        if h.horizon < 1:
            raise InvariantViolationError("horizon must be >= 1")
        if h.action_kind not in (DISCRETE, CONTINUOUS):
            raise InvariantViolationError(f"unknown action_kind {h.action_kind!r}")
        if self.states.shape != (n, h.state_dim) or self.next_states.shape != (n, h.state_dim):
            raise InvariantViolationError("state column shape does not match header")
        if h.action_kind == DISCRETE:
            if self.actions.shape != (n,):
                raise InvariantViolationError("discrete actions must be a flat column")
            if n and int(self.actions.max()) >= h.action_size:
                raise InvariantViolationError("action id out of range")
        elif self.actions.shape != (n, h.action_size):
            raise InvariantViolationError("continuous action column shape mismatch")
        for name in ("timesteps", "traj_ids", "dones"):
            if getattr(self, name).shape != (n,):
                raise InvariantViolationError(f"column {name} has wrong length")
        if n == 0:
            return
        if int(self.timesteps.max()) >= h.horizon:
            raise InvariantViolationError("timestep >= horizon")
        order = np.lexsort((self.timesteps, self.traj_ids))
        tid = self.traj_ids[order].astype(np.int64)
        ts = self.timesteps[order].astype(np.int64)
        starts = np.r_[True, tid[1:] != tid[:-1]]
        # position within each trajectory block must equal the timestep
        block_start = np.maximum.accumulate(np.where(starts, np.arange(n), 0))
        if not np.array_equal(ts, np.arange(n) - block_start):
            raise InvariantViolationError("timesteps within a trajectory must be consecutive from 0")
        ends = np.r_[tid[1:] != tid[:-1], True]
        if np.any(self.dones[order] & ~ends):
            raise InvariantViolationError("done flag set before the last transition of a trajectory")

    def same_as(self, other: "OfflineDataset") -> bool:
        if self.header != other.header:
            return False
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("states", "actions", "rewards", "next_states", "timesteps", "traj_ids", "dones")
        )


def empty_dataset(header: DatasetHeader) -> OfflineDataset:
    n = 0
    act_shape = (n,) if header.action_kind == DISCRETE else (n, header.action_size)
    return OfflineDataset(
        header=header,
        states=np.zeros((n, header.state_dim)),
        actions=np.zeros(act_shape),
        rewards=np.zeros(n),
        next_states=np.zeros((n, header.state_dim)),
        timesteps=np.zeros(n),
        traj_ids=np.zeros(n),
        dones=np.zeros(n, dtype=bool),
    )


@dataclass(frozen=True, eq=False)
class BCDataset:
    """Relabeled (state, expert action) pairs backed by their source dataset.

    ``q_values`` and ``densities`` are optional cached estimates; they are
    stored as float32 so that in-memory and on-disk selections agree.
    """

    source: OfflineDataset
    expert_actions: np.ndarray
    q_values: Optional[np.ndarray] = None
    densities: Optional[np.ndarray] = None

    def __post_init__(self):
        kind = self.source.header.action_kind
        acts = np.ascontiguousarray(
            self.expert_actions, dtype=np.uint32 if kind == DISCRETE else np.float32
        )
        if kind == CONTINUOUS:
            acts = acts.reshape(len(self.source), self.source.header.action_size)
        if len(acts) != len(self.source):
            raise InvariantViolationError("expert_actions length must equal source length")
        acts.setflags(write=False)
        object.__setattr__(self, "expert_actions", acts)
        for name in ("q_values", "densities"):
            col = getattr(self, name)
            if col is not None:
                col = np.ascontiguousarray(col, dtype=np.float32)
                if col.shape != (len(self.source),):
                    raise InvariantViolationError(f"{name} length must equal source length")
                col.setflags(write=False)
                object.__setattr__(self, name, col)

    def __len__(self) -> int:
        return len(self.source)

    @property
    def header(self) -> DatasetHeader:
        return self.source.header

    @property
    def states(self) -> np.ndarray:
        return self.source.states

    @property
    def timesteps(self) -> np.ndarray:
        return self.source.timesteps

    @property
    def rewards(self) -> np.ndarray:
        return self.source.rewards

    @property
    def source_index(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)

    def with_estimates(self, q_values, densities) -> "BCDataset":
        return replace(self, q_values=q_values, densities=densities)

    def same_as(self, other: "BCDataset") -> bool:
        def eq_opt(a, b):
            return (a is None and b is None) or (
                a is not None and b is not None and np.array_equal(a, b)
            )

        return (
            self.source.same_as(other.source)
            and np.array_equal(self.expert_actions, other.expert_actions)
            and eq_opt(self.q_values, other.q_values)
            and eq_opt(self.densities, other.densities)
        )


# ---------------------------------------------------------------------------
# file format


def _encode(ds: OfflineDataset, extensions=(), extra_columns=()) -> bytes:
    header = ds.header.to_json(len(ds), ds.n_trajectories, extensions)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, VERSION, len(hbytes)), hbytes]
    cols = [
        ds.states, ds.actions, ds.rewards, ds.next_states,
        ds.timesteps, ds.traj_ids, ds.dones.astype(np.uint8),
    ]
    for col in list(cols) + list(extra_columns):
        parts.append(np.ascontiguousarray(col).astype(col.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(parts)


def _write_bytes(path, payload: bytes) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_dataset(ds: OfflineDataset, path) -> None:
    """Write ``ds`` to ``path`` in OBDS format. Refuses invalid datasets."""
    ds.validate()
    _write_bytes(path, _encode(ds))


def write_bc_dataset(bc: BCDataset, path) -> None:
    """Write a relabeled dataset: the source columns plus the extension section."""
    bc.source.validate()
    exts = ["expert_actions"]
    extra = [bc.expert_actions]
    if bc.q_values is not None or bc.densities is not None:
        if bc.q_values is None or bc.densities is None:
            raise InvariantViolationError("q_values and densities are persisted together")
        exts.append("estimates")
        extra += [bc.q_values, bc.densities]
    _write_bytes(path, _encode(bc.source, exts, extra))


class _Reader:
    def __init__(self, buf: bytes, offset: int):
        self.buf = buf
        self.pos = offset

    def take(self, dtype, count: int, shape) -> np.ndarray:
        dtype = np.dtype(dtype).newbyteorder("<")
        nbytes = dtype.itemsize * count
        if self.pos + nbytes > len(self.buf):
            raise TruncatedFileError(
                f"file truncated: need {nbytes} bytes at offset {self.pos}, have {len(self.buf) - self.pos}"
            )
        arr = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos).reshape(shape)
        self.pos += nbytes
        return arr.astype(dtype.newbyteorder("="))


def _decode(buf: bytes):
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than magic")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < _PREFIX.size:
        raise TruncatedFileError("file shorter than fixed header")
    _, version, hlen = _PREFIX.unpack_from(buf, 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported OBDS version {version}")
    start = _PREFIX.size
    if start + hlen > len(buf):
        raise TruncatedFileError("file truncated inside header JSON")
    try:
        meta = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvariantViolationError(f"header is not valid JSON: {exc}") from exc
    header = DatasetHeader.from_json(meta)
    n = int(meta.get("n_transitions", -1))
    if n < 0:
        raise InvariantViolationError("header lacks n_transitions")
    d = header.state_dim
    discrete = header.action_kind == DISCRETE
    r = _Reader(buf, start + hlen)

    def take_actions():
        if discrete:
            return r.take(np.uint32, n, (n,))
        return r.take(np.float32, n * header.action_size, (n, header.action_size))

    cols = dict(
        states=r.take(np.float32, n * d, (n, d)),
        actions=take_actions(),
        rewards=r.take(np.float32, n, (n,)),
        next_states=r.take(np.float32, n * d, (n, d)),
        timesteps=r.take(np.uint32, n, (n,)),
        traj_ids=r.take(np.uint32, n, (n,)),
        dones=r.take(np.uint8, n, (n,)),
    )
    if np.any(cols["dones"] > 1):
        raise InvariantViolationError("done column must hold 0/1")
    cols["dones"] = cols["dones"].astype(bool)
    ds = OfflineDataset(header=header, **cols)
    extensions = meta.get("extensions", [])
    unknown = set(extensions) - {"expert_actions", "estimates"}
    if unknown:
        raise InvariantViolationError(f"unknown OBDS extensions {sorted(unknown)}")
    extra = {}
    if "expert_actions" in extensions:
        extra["expert_actions"] = take_actions()
    if "estimates" in extensions:
        extra["q_values"] = r.take(np.float32, n, (n,))
        extra["densities"] = r.take(np.float32, n, (n,))
    if r.pos != len(buf):
        raise InvariantViolationError(f"{len(buf) - r.pos} trailing bytes after last column")
    if int(meta.get("n_trajectories", ds.n_trajectories)) != ds.n_trajectories:
        raise InvariantViolationError("n_trajectories in header disagrees with traj_ids column")
    ds.validate()
    return ds, extra


def read_dataset(path) -> OfflineDataset:
    """Read an OBDS file. Extension columns, if present, are validated and dropped."""
    with open(path, "rb") as fh:
        buf = fh.read()
    ds, _ = _decode(buf)
    return ds


def read_bc_dataset(path) -> BCDataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    ds, extra = _decode(buf)
    if "expert_actions" not in extra:
        raise InvariantViolationError("file has no expert_actions extension; run relabel first")
    return BCDataset(source=ds, **extra)


# ---------------------------------------------------------------------------
# operations


def relabel_with_expert(ds: OfflineDataset, expert) -> BCDataset:
    """Replace recorded actions by the expert's deterministic choice on each state.

    ``expert`` is any object with ``greedy(states) -> actions``; it raises
    PolicyDomainError for states it is undefined on.
    """
    if len(ds) == 0:
        empty = np.zeros((0,) if ds.header.action_kind == DISCRETE else (0, ds.header.action_size))
        return BCDataset(source=ds, expert_actions=empty)
    acts = np.asarray(expert.greedy(ds.states))
    if len(acts) != len(ds):
        raise PolicyDomainError("expert returned the wrong number of actions")
    return BCDataset(source=ds, expert_actions=acts)


@dataclass(frozen=True)
class TimestepPartition:
    steps: tuple = field(default_factory=tuple)  # steps[t] -> int64 index array

    def __len__(self) -> int:
        return len(self.steps)

    def __getitem__(self, t: int) -> np.ndarray:
        return self.steps[t]

    def sizes(self) -> list[int]:
        return [len(s) for s in self.steps]


def partition_by_timestep(bc, horizon: int | None = None) -> TimestepPartition:
    """Group dataset indices by recorded timestep (0-based)."""
    ts = np.asarray(bc.timesteps, dtype=np.int64)
    T = int(bc.header.horizon if horizon is None else horizon)
    if len(ts) and (ts.min() < 0 or ts.max() >= T):
        raise InvariantViolationError(f"timestep out of range [0, {T})")
    order = np.argsort(ts, kind="stable")
    bounds = np.searchsorted(ts[order], np.arange(T + 1))
    return TimestepPartition(tuple(order[bounds[t]:bounds[t + 1]] for t in range(T)))


def subsample_random(bc, n: int, seed: int) -> np.ndarray:
    """``n`` distinct indices drawn uniformly without replacement."""
    total = len(bc)
    if n < 0 or n > total:
        raise BudgetError(f"budget {n} exceeds dataset size {total}")
    return random_order(total, seed)[:n]


def random_order(total: int, seed: int) -> np.ndarray:
    """The seeded random permutation that every sampler draws from.

    Random selection takes its prefix; pool sampling takes the first pool
    members in this order. Sharing the order couples the methods.
    """
    return np.random.default_rng(int(seed)).permutation(total).astype(np.int64)
