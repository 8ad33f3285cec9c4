"""
In-process collectives for the rank grid.

A Group is an ordered set of ranks, each with its own inbox queue. Collectives
are rendezvous: every member calls the same operation the same number of
times, and messages are matched by operation and round number, so a fast
member may run one round ahead without mixing up its peers.
"""

import logging
import queue
import threading
import time
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .backprojection import Volume
from .errors import CollectiveTimeout, PipelineAborted, ShapeError
from .filtering import Projection

log = logging.getLogger(__name__)

Rank = Tuple[int, int]

DEFAULT_TIMEOUT = 120.0


@dataclass(frozen=True)
class _Message:
    op: str
    round: int
    src: int
    payload: Any


class Group:
    """Ranks that exchange messages for collectives.

    Args:
        members (Sequence[Rank]): (row, col) of each member; position in this
            list is the member's index within the group
        timeout (float, optional): Seconds to wait for a contribution.
            Defaults to DEFAULT_TIMEOUT.
        name (str, optional): Used in log and error messages
    """

    def __init__(
        self, members: Sequence[Rank], timeout: float = DEFAULT_TIMEOUT, name: str = ""
    ) -> None:
        assert members, "a group needs at least one member"
        self.members: List[Rank] = list(members)
        self.timeout = timeout
        self.name = name or f"group{self.members}"
        self._inbox: List[queue.Queue[_Message]] = [queue.Queue() for _ in members]
        self._pending: List[Dict[Tuple[str, int, int], Any]] = [{} for _ in members]
        self._rounds: List[Dict[str, int]] = [{} for _ in members]
        self._aborted = threading.Event()
        self._abort_reason = ""

    @property
    def size(self) -> int:
        return len(self.members)

    def index_of(self, rank: Rank) -> int:
        return self.members.index(rank)

    def abort(self, reason: str) -> None:
        """Fail every current and later collective with PipelineAborted."""
        self._abort_reason = reason
        self._aborted.set()
        for box in self._inbox:
            box.put(_Message("abort", -1, -1, reason))

    def _next_round(self, pos: int, op: str) -> int:
        n = self._rounds[pos].get(op, 0)
        self._rounds[pos][op] = n + 1
        return n

    def _abort_error(self, pos: int, reason: str) -> PipelineAborted:
        return PipelineAborted(f"{self.name} aborted: {reason}", self.members[pos])

    def _post(self, dst: int, msg: _Message) -> None:
        self._inbox[dst].put(msg)

    def _collect(
        self, pos: int, op: str, rnd: int, sources: Sequence[int]
    ) -> Dict[int, Any]:
        """Wait for the round `rnd` message of `op` from each source."""
        if self._aborted.is_set():
            raise self._abort_error(pos, self._abort_reason)
        wanted = set(sources)
        got: Dict[int, Any] = {}
        pending = self._pending[pos]
        for src in list(wanted):
            key = (op, rnd, src)
            if key in pending:
                got[src] = pending.pop(key)
                wanted.discard(src)
        deadline = time.monotonic() + self.timeout
        while wanted:
            remaining = deadline - time.monotonic()
            try:
                msg = self._inbox[pos].get(timeout=max(remaining, 0.0))
            except queue.Empty:
                missing = ", ".join(str(self.members[s]) for s in sorted(wanted))
                raise CollectiveTimeout(
                    f"{op} round {rnd} in {self.name}: no contribution from {missing}",
                    rank=self.members[pos],
                ) from None
            if msg.op == "abort":
                raise self._abort_error(pos, msg.payload)
            if msg.op == op and msg.round == rnd and msg.src in wanted:
                got[msg.src] = msg.payload
                wanted.discard(msg.src)
            else:
                pending[(msg.op, msg.round, msg.src)] = msg.payload
        return got

    def all_gather(self, pos: int, item: Projection) -> List[Projection]:
        """Every member receives every member's item, in member order.

        Raises:
            CollectiveTimeout: a member did not contribute in time
            ShapeError: contributions differ in shape
        """
        rnd = self._next_round(pos, "all_gather")
        for dst in range(self.size):
            if dst != pos:
                self._post(dst, _Message("all_gather", rnd, pos, item))
        others = [s for s in range(self.size) if s != pos]
        got = self._collect(pos, "all_gather", rnd, others)
        got[pos] = item
        items = [got[s] for s in range(self.size)]
        shapes = {p.samples.shape for p in items}
        if len(shapes) > 1:
            raise ShapeError(f"all_gather in {self.name}: mixed shapes {shapes}")
        return items

    def reduce_sum(self, pos: int, slab: Volume, root: int = 0) -> Volume | None:
        """Element-wise sum of every member's slab, delivered to `root`.

        The root adds contributions in ascending member order so that repeated
        runs are bit-identical. Other members get None.
        """
        rnd = self._next_round(pos, "reduce_sum")
        if pos != root:
            self._post(root, _Message("reduce_sum", rnd, pos, slab))
            return None
        others = [s for s in range(self.size) if s != root]
        got = self._collect(pos, "reduce_sum", rnd, others)
        got[root] = slab
        parts = [got[s] for s in range(self.size)]
        if len({(p.samples.shape, p.layout) for p in parts}) > 1:
            raise ShapeError(f"reduce_sum in {self.name}: slabs differ in shape")
        total = parts[0].samples.copy()
        for p in parts[1:]:
            total += p.samples
        return Volume(np.ascontiguousarray(total), parts[0].layout)
