"""Replay buffer and episode-structured learning trajectories.

Trajectories persist in the ``LTRJ`` binary format (little-endian):

    b"LTRJ" | u16 version | u32 meta_len | meta JSON | u32 crc32(meta)
    | u32 n_episodes | per episode: u32 n_events, u32 row_width,
      f64[n_events * row_width] payload, u32 crc32(payload)

An event row is ``obs, action, reward, opp_action, done[, opp_obs]``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .tensor import Tensor

MAGIC = b"LTRJ"
VERSION = 1


class BufferUnderfilled(ValueError):
    pass


class EpisodeStructureError(ValueError):
    pass


class TrajectoryFormatError(ValueError):
    """Raised for corrupt or truncated trajectory files; ``section`` names the failing part."""

    def __init__(self, section: str, detail: str):
        super().__init__(f"[{section}] {detail}")
        self.section = section
        self.detail = detail


@dataclass(frozen=True)
class Event:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    opp_action: np.ndarray
    done: bool
    opp_obs: np.ndarray | None = None

    def row(self) -> np.ndarray:
        parts = [self.obs, self.action, [self.reward], self.opp_action, [float(self.done)]]
        if self.opp_obs is not None:
            parts.append(self.opp_obs)
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])

    def to_json(self) -> dict:
        d = {"obs": [float(v) for v in self.obs], "action": [float(v) for v in self.action],
             "reward": float(self.reward), "opp_action": [float(v) for v in self.opp_action],
             "done": bool(self.done)}
        if self.opp_obs is not None:
            d["opp_obs"] = [float(v) for v in self.opp_obs]
        return d


# -- replay ---------------------------------------------------------------------

class ReplayBuffer:
    """Ring buffer of transitions with named, fixed-shape fields.

    Storage grows by doubling up to ``capacity`` so a 1M-capacity buffer only
    pays for what it holds.
    """

    def __init__(self, capacity: int, fields: Mapping[str, int | tuple[int, ...]]):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.fields = {k: (v,) if isinstance(v, int) else tuple(v) for k, v in fields.items()}
        self._alloc = min(capacity, 1024)
        self._data = {k: np.zeros((self._alloc, *shape)) for k, shape in self.fields.items()}
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def clear(self) -> None:
        self._next = 0
        self._size = 0

    def _grow(self) -> None:
        new = min(self.capacity, 2 * self._alloc)
        for k, arr in self._data.items():
            bigger = np.zeros((new, *arr.shape[1:]))
            bigger[: self._alloc] = arr
            self._data[k] = bigger
        self._alloc = new

    def add(self, transition: Mapping[str, object]) -> None:
        if transition.keys() != self.fields.keys():
            missing = set(self.fields) - set(transition)
            extra = set(transition) - set(self.fields)
            raise KeyError(f"transition fields mismatch (missing {sorted(missing)}, unexpected {sorted(extra)})")
        if self._next >= self._alloc and self._alloc < self.capacity:
            self._grow()
        i = self._next
        for k, v in transition.items():
            self._data[k][i] = v
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _ordered_indices(self) -> np.ndarray:
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def contents(self, name: str) -> np.ndarray:
        """Field values oldest-first."""
        return self._data[name][self._ordered_indices()]

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self._size < n:
            raise BufferUnderfilled(f"buffer holds {self._size} transitions, {n} requested")
        return rng.integers(0, self._size, size=n)

    def gather(self, idx: np.ndarray) -> dict[str, Tensor]:
        return {k: Tensor._wrap(arr[idx]) for k, arr in self._data.items()}

    def sample(self, n: int, rng: np.random.Generator) -> dict[str, Tensor]:
        """``n`` uniform draws with replacement, batched per field."""
        return self.gather(self.sample_indices(n, rng))


# -- trajectories ---------------------------------------------------------------

@dataclass
class TrajectoryMeta:
    run_id: str = ""
    variant: str = ""
    seed: int = 0
    episode_length: int = 25
    obs_dim: int = 8
    n_actions: int = 5
    has_opp_obs: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def row_width(self) -> int:
        return 2 * self.n_actions + self.obs_dim + 2 + (self.obs_dim if self.has_opp_obs else 0)


class TrajectoryRecord:
    """Ordered episodes of exactly ``meta.episode_length`` events each."""

    def __init__(self, meta: TrajectoryMeta | None = None):
        self.meta = meta or TrajectoryMeta()
        self._episodes: list[np.ndarray] = []
        self._open: list[np.ndarray] = []

    @property
    def num_episodes(self) -> int:
        return len(self._episodes)

    @property
    def open_events(self) -> int:
        return len(self._open)

    def record_event(self, event: Event) -> None:
        T = self.meta.episode_length
        if len(self._open) >= T:
            raise EpisodeStructureError(f"episode already holds {T} events; close it first")
        if bool(event.done) != (len(self._open) == T - 1):
            raise EpisodeStructureError(f"done={event.done} at step {len(self._open)} of a {T}-step episode")
        if (event.opp_obs is not None) != self.meta.has_opp_obs:
            raise EpisodeStructureError("event opp_obs presence does not match trajectory metadata")
        row = event.row()
        if row.shape != (self.meta.row_width,):
            raise EpisodeStructureError(f"event row width {row.shape[0]} != {self.meta.row_width}")
        self._open.append(row)

    def close_episode(self) -> None:
        T = self.meta.episode_length
        if len(self._open) != T:
            raise EpisodeStructureError(f"cannot close an episode with {len(self._open)} of {T} events")
        self._episodes.append(np.stack(self._open))
        self._open = []

    def add_episode_array(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape != (self.meta.episode_length, self.meta.row_width):
            raise EpisodeStructureError(f"episode array shape {rows.shape} invalid")
        self._episodes.append(rows)

    def episode_array(self, k: int) -> np.ndarray:
        return self._episodes[k]

    def episode(self, k: int) -> list[Event]:
        return [self._row_event(r) for r in self._episodes[k]]

    def episodes(self) -> Iterator[list[Event]]:
        for k in range(len(self._episodes)):
            yield self.episode(k)

    def _row_event(self, r: np.ndarray) -> Event:
        o, a = self.meta.obs_dim, self.meta.n_actions
        opp_obs = r[2 * a + o + 2:].copy() if self.meta.has_opp_obs else None
        return Event(r[:o].copy(), r[o:o + a].copy(), float(r[o + a]), r[o + a + 1:o + 2 * a + 1].copy(),
                     bool(r[o + 2 * a + 1]), opp_obs)

    def arrays(self) -> dict[str, np.ndarray]:
        """Stacked ``[K, T, ...]`` views: obs, action, reward, opp_action, done."""
        o, a = self.meta.obs_dim, self.meta.n_actions
        K, T = len(self._episodes), self.meta.episode_length
        x = np.stack(self._episodes) if K else np.zeros((0, T, self.meta.row_width))
        return {"obs": x[..., :o], "action": x[..., o:o + a], "reward": x[..., o + a],
                "opp_action": x[..., o + a + 1:o + 2 * a + 1], "done": x[..., o + 2 * a + 1],
                "events": x[..., :o + 2 * a + 2]}

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryRecord):
            return NotImplemented
        return (asdict(self.meta) == asdict(other.meta)
                and len(self._episodes) == len(other._episodes)
                and all(a.tobytes() == b.tobytes() for a, b in zip(self._episodes, other._episodes)))


def record_event(trajectory: TrajectoryRecord, event: Event) -> None:
    trajectory.record_event(event)


def close_episode(trajectory: TrajectoryRecord) -> None:
    trajectory.close_episode()


def _crc(b: bytes) -> int:
    return zlib.crc32(b) & 0xFFFFFFFF


def store_write(path, record: TrajectoryRecord) -> None:
    if record.open_events:
        raise EpisodeStructureError("cannot persist a trajectory with an open episode")
    meta = json.dumps(asdict(record.meta), sort_keys=True).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(meta)) + meta + struct.pack("<I", _crc(meta))
    out += struct.pack("<I", record.num_episodes)
    for ep in record._episodes:
        payload = np.ascontiguousarray(ep, dtype="<f8").tobytes()
        out += struct.pack("<II", ep.shape[0], ep.shape[1]) + payload + struct.pack("<I", _crc(payload))
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int, section: str) -> bytes:
        if self.off + n > len(self.data):
            raise TrajectoryFormatError(section, f"truncated: need {n} bytes at offset {self.off}, "
                                                 f"file has {len(self.data)}")
        b = self.data[self.off:self.off + n]
        self.off += n
        return b

    def u32(self, section: str) -> int:
        return struct.unpack("<I", self.take(4, section))[0]


def store_read(path) -> TrajectoryRecord:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise TrajectoryFormatError("magic", f"not an LTRJ file: {path}")
    (version,) = struct.unpack("<H", r.take(2, "version"))
    if version != VERSION:
        raise TrajectoryFormatError("version", f"unsupported version {version}")
    meta_raw = r.take(r.u32("metadata"), "metadata")
    if r.u32("metadata") != _crc(meta_raw):
        raise TrajectoryFormatError("metadata", "checksum mismatch")
    try:
        meta = TrajectoryMeta(**json.loads(meta_raw.decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise TrajectoryFormatError("metadata", f"unparseable metadata: {exc}") from None
    rec = TrajectoryRecord(meta)
    n_eps = r.u32("episode count")
    for k in range(n_eps):
        section = f"episode {k}"
        n, width = struct.unpack("<II", r.take(8, section + " header"))
        if n != meta.episode_length or width != meta.row_width:
            raise TrajectoryFormatError(section + " header", f"shape ({n}, {width}) != "
                                                             f"({meta.episode_length}, {meta.row_width})")
        payload = r.take(8 * n * width, section + " payload")
        if r.u32(section + " checksum") != _crc(payload):
            raise TrajectoryFormatError(section + " checksum", "CRC32 mismatch")
        rec._episodes.append(np.frombuffer(payload, dtype="<f8").reshape(n, width).astype(np.float64))
    if r.off != len(r.data):
        raise TrajectoryFormatError("trailer", f"{len(r.data) - r.off} unexpected trailing bytes")
    return rec


def export_jsonl(path, record: TrajectoryRecord) -> None:
    with Path(path).open("w") as fh:
        for k, episode in enumerate(record.episodes()):
            for t, ev in enumerate(episode):
                fh.write(json.dumps({"episode": k, "t": t, **ev.to_json()}) + "\n")


class TrajectoryStore:
    """Directory of ``.ltrj`` files, read back in sorted name order."""

    def __init__(self, root):
        self.root = Path(root)

    def paths(self) -> list[Path]:
        return sorted(self.root.glob("*.ltrj"))

    def write(self, name: str, record: TrajectoryRecord) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / f"{name}.ltrj"
        store_write(path, record)
        return path

    def read_all(self) -> list[TrajectoryRecord]:
        return [store_read(p) for p in self.paths()]


def check_equal_episode_length(records: Sequence[TrajectoryRecord]) -> int:
    lengths = {r.meta.episode_length for r in records}
    if len(lengths) != 1:
        raise EpisodeStructureError(f"mixed episode lengths in store: {sorted(lengths)}")
    return lengths.pop()
