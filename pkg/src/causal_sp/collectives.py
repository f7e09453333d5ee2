"""In-process simulation of a P-rank communicator with an exact traffic ledger.

Each rank runs as a thread holding a :class:`Communicator`. A collective is a
rendezvous: every rank deposits its payload, the last rank to arrive performs
the exchange for everybody (under the barrier, so exactly once) and updates
:class:`CommStats`, then all ranks pick up their result. Outputs and stats are
therefore independent of thread scheduling.

Traffic is counted by enumerating the chunk each rank sends to each *other*
rank; self-to-self chunks never cross an interconnect and are not counted.
"""

from __future__ import annotations

import threading
from dataclasses import asdict, dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .errors import CollectiveError, DeadlockError, PartitionError, ShapeError
from .tensor_core import HEADS, SEQ, Shape4, axis_index

DEFAULT_ELEMENT_WIDTH = 2  # bytes per element, bfloat16 deployment


@dataclass
class CommStats:
    all_gather: int = 0
    all_to_all: int = 0
    fused_all_to_all: int = 0
    elements_sent: int = 0
    rounds: int = 0

    def copy(self) -> "CommStats":
        return CommStats(**asdict(self))

    def reset(self) -> None:
        for name in asdict(self):
            setattr(self, name, 0)

    def __sub__(self, other: "CommStats") -> "CommStats":
        a, b = asdict(self), asdict(other)
        return CommStats(**{k: a[k] - b[k] for k in a})

    def __add__(self, other: "CommStats") -> "CommStats":
        a, b = asdict(self), asdict(other)
        return CommStats(**{k: a[k] + b[k] for k in a})

    @property
    def collectives(self) -> int:
        return self.all_gather + self.all_to_all + self.fused_all_to_all

    def signature(self) -> dict[str, int]:
        """Invocation counts per collective kind."""
        return {"ag": self.all_gather, "a2a": self.all_to_all, "fused": self.fused_all_to_all}

    def to_json(self, element_width: int = DEFAULT_ELEMENT_WIDTH) -> dict[str, int]:
        d = asdict(self)
        d["bytes_sent_at_width"] = self.elements_sent * element_width
        return d

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "CommStats":
        return cls(**{k: int(d[k]) for k in ("all_gather", "all_to_all", "fused_all_to_all", "elements_sent", "rounds")})


def split_heads(local: np.ndarray, world_size: int, rank: int) -> np.ndarray:
    """Rank ``rank``'s contiguous H/P slab of the heads axis (no communication)."""
    heads = Shape4.of(local).heads
    if heads % world_size:
        raise PartitionError(f"{heads} heads not divisible by world size {world_size}")
    n = heads // world_size
    return np.ascontiguousarray(local[:, :, rank * n:(rank + 1) * n, :])


def _all_to_all_exchange(payloads: Sequence[np.ndarray], scatter: int, gather: int):
    p = len(payloads)
    chunks = [np.split(x, p, axis=scatter) for x in payloads]
    sent = sum(chunks[i][j].size for i in range(p) for j in range(p) if i != j)
    out = [np.concatenate([chunks[i][j] for i in range(p)], axis=gather) for j in range(p)]
    return out, sent


@dataclass
class _Request:
    kind: str
    params: tuple
    payload: Any


class CommWorld:
    """A P-rank simulated process group.

    Use :meth:`run` to execute ``fn(comm)`` on every rank concurrently; each
    call receives its own :class:`Communicator`.
    """

    def __init__(self, world_size: int, timeout: float = 120.0):
        if world_size < 1:
            raise ValueError(f"world_size must be >= 1, got {world_size}")
        self.world_size = world_size
        self.timeout = timeout
        self.stats = CommStats()
        self._lock = threading.Lock()
        self._barrier = threading.Barrier(world_size, action=self._exchange)
        self._inbox: list[_Request | None] = [None] * world_size
        self._results: list[Any] = [None] * world_size
        self._pending = 0
        self._exited: set[int] = set()
        self._error: Exception | None = None

    def communicator(self, rank: int) -> "Communicator":
        if not 0 <= rank < self.world_size:
            raise ValueError(f"rank {rank} outside world of size {self.world_size}")
        return Communicator(self, rank)

    def run(self, fn: Callable[["Communicator"], Any]) -> list[Any]:
        """Run ``fn`` on all ranks; return per-rank results in rank order.

        If any rank raises, the lowest-ranked original error is re-raised
        (deadlock errors it induced on peers are secondary).
        """
        self._barrier.reset()
        self._exited.clear()
        self._pending = 0
        self._error = None
        results: list[Any] = [None] * self.world_size
        errors: list[BaseException | None] = [None] * self.world_size

        def worker(rank: int) -> None:
            try:
                results[rank] = fn(self.communicator(rank))
            except BaseException as exc:  # noqa: BLE001 - re-raised by run()
                errors[rank] = exc
            finally:
                with self._lock:
                    self._exited.add(rank)
                    if self._pending or errors[rank] is not None:
                        self._barrier.abort()

        if self.world_size == 1:
            worker(0)
        else:
            threads = [threading.Thread(target=worker, args=(r,), name=f"rank{r}") for r in range(self.world_size)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()

        primary = [e for e in errors if e is not None and not isinstance(e, DeadlockError)]
        if primary:
            raise primary[0]
        secondary = [e for e in errors if e is not None]
        if secondary:
            raise secondary[0]
        return results

    def barrier(self, rank: int) -> None:
        self._rendezvous(rank, _Request("barrier", (), None))

    def _rendezvous(self, rank: int, request: _Request) -> Any:
        with self._lock:
            if self._exited:
                self._barrier.abort()
                raise DeadlockError(
                    f"rank {rank} entered {request.kind} but rank(s) {sorted(self._exited)} already exited"
                )
            self._inbox[rank] = request
            self._pending += 1
        try:
            self._barrier.wait(self.timeout)
        except threading.BrokenBarrierError:
            raise DeadlockError(f"rank {rank}: {request.kind} aborted, not all ranks participated") from None
        if self._error is not None:
            raise self._error
        return self._results[rank]

    def _exchange(self) -> None:
        requests, self._inbox = self._inbox, [None] * self.world_size
        self._pending = 0
        try:
            self._results = self._dispatch(requests)
        except Exception as exc:  # surfaced on every rank by _rendezvous
            self._error = exc
            self._results = [None] * self.world_size

    def _dispatch(self, requests: list[_Request]) -> list[Any]:
        head = requests[0]
        for r, req in enumerate(requests):
            if (req.kind, req.params) != (head.kind, head.params):
                raise CollectiveError(
                    f"rank {r} entered {req.kind}{req.params} while rank 0 entered {head.kind}{head.params}"
                )
        p = self.world_size
        payloads = [req.payload for req in requests]

        if head.kind == "barrier":
            return [None] * p

        if head.kind == "all_gather":
            (dim,) = head.params
            ref = list(payloads[0].shape)
            for r, x in enumerate(payloads):
                shape = list(x.shape)
                if len(shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(shape, ref)) if i != dim):
                    raise CollectiveError(f"all_gather: rank {r} shape {x.shape} incompatible with rank 0 {payloads[0].shape}")
            sent = sum(payloads[i].size for i in range(p) for j in range(p) if i != j)
            full = np.concatenate(payloads, axis=dim)
            self.stats.all_gather += 1
            self.stats.elements_sent += sent
            self.stats.rounds += 1
            return [full.copy() for _ in range(p)]

        if head.kind in ("all_to_all", "fused_all_to_all"):
            scatter, gather = head.params
            if head.kind == "all_to_all":
                per_tensor = [payloads]
            else:
                per_tensor = [list(group) for group in zip(*payloads)]
            for group in per_tensor:
                for r, x in enumerate(group):
                    if x.shape != group[0].shape:
                        raise CollectiveError(f"{head.kind}: rank {r} shape {x.shape} != rank 0 shape {group[0].shape}")
            outs, sent = [], 0
            for group in per_tensor:
                out, s = _all_to_all_exchange(group, scatter, gather)
                outs.append(out)
                sent += s
            if head.kind == "all_to_all":
                self.stats.all_to_all += 1
                results = outs[0]
            else:
                self.stats.fused_all_to_all += 1
                results = [tuple(o[j] for o in outs) for j in range(p)]
            self.stats.elements_sent += sent
            self.stats.rounds += 1
            return results

        raise CollectiveError(f"unknown collective {head.kind!r}")


class Communicator:
    """Rank-bound handle on a :class:`CommWorld`."""

    def __init__(self, world: CommWorld, rank: int):
        self.world = world
        self.rank = rank

    @property
    def world_size(self) -> int:
        return self.world.world_size

    @property
    def stats(self) -> CommStats:
        return self.world.stats

    def barrier(self) -> None:
        self.world.barrier(self.rank)

    def all_gather(self, local: np.ndarray, dim: int | str = SEQ) -> np.ndarray:
        """Rank-order concatenation of every rank's ``local`` along ``dim``."""
        dim = axis_index(dim)
        Shape4.of(local)
        return self.world._rendezvous(self.rank, _Request("all_gather", (dim,), local))

    def _check_a2a(self, x: np.ndarray, scatter: int, gather: int) -> None:
        Shape4.of(x)
        if scatter == gather:
            raise ShapeError("scatter_dim and gather_dim must differ")
        if x.shape[scatter] % self.world_size:
            raise PartitionError(
                f"extent {x.shape[scatter]} along axis {scatter} not divisible by world size {self.world_size}"
            )

    def all_to_all(self, local: np.ndarray, scatter_dim: int | str, gather_dim: int | str) -> np.ndarray:
        """Split ``local`` into P chunks along ``scatter_dim``; chunk j goes to rank j.

        Each rank concatenates the chunks it receives along ``gather_dim`` in
        sender rank order.
        """
        scatter, gather = axis_index(scatter_dim), axis_index(gather_dim)
        self._check_a2a(local, scatter, gather)
        return self.world._rendezvous(self.rank, _Request("all_to_all", (scatter, gather), local))

    def fused_all_to_all(
        self,
        q: np.ndarray,
        k: np.ndarray,
        v: np.ndarray,
        scatter_dim: int | str = HEADS,
        gather_dim: int | str = SEQ,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """One collective exchanging q, k and v together.

        Same result as three :meth:`all_to_all` calls, recorded as a single
        invocation and a single round.
        """
        scatter, gather = axis_index(scatter_dim), axis_index(gather_dim)
        for x in (q, k, v):
            self._check_a2a(x, scatter, gather)
        return self.world._rendezvous(self.rank, _Request("fused_all_to_all", (scatter, gather), (q, k, v)))
