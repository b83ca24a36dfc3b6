"""Deterministic in-process network for multi-party protocols.

Party programs are generator functions ``program(ctx)``.  Sending is
non-blocking (``ctx.send``); receiving is a wait point::

    msg = yield ctx.recv(src)

The scheduler runs parties round-robin in sorted id order, switching only at
wait points, so a run is a pure function of the programs, the inputs and the
seed.  Links only advance simulated clocks; they never alter payloads.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable

import numpy as np

from .fss import PRG_NAME

log = logging.getLogger(__name__)

PartyId = Hashable


class ProtocolAbort(RuntimeError):
    """The whole session failed; no partial results are returned."""


class DeadlockError(ProtocolAbort):
    def __init__(self, waits: dict):
        self.waits = waits
        desc = ", ".join(f"{p} waits on {s}" for p, s in waits.items())
        super().__init__(f"deadlock: every live party is blocked ({desc})")


class TransportError(ProtocolAbort):
    pass


@dataclass(frozen=True)
class LinkModel:
    """Point-to-point link; cost(n) = latency + n / bandwidth seconds."""

    name: str
    bandwidth: float  # bytes / s
    latency: float  # s

    def __post_init__(self):
        if self.bandwidth <= 0 or self.latency < 0:
            raise ValueError(f"invalid link parameters for {self.name!r}")

    def cost(self, nbytes: int) -> float:
        return self.latency + nbytes / self.bandwidth


# Modeling assumptions for illustration only, not measured values.
LINK_PRESETS = {
    "6g": LinkModel("6g", bandwidth=1e9, latency=1e-4),
    "4g": LinkModel("4g", bandwidth=12.5e6, latency=5e-2),
}


@dataclass(frozen=True)
class Message:
    session: str
    round: int
    src: PartyId
    dst: PartyId
    payload: bytes
    tag: str = ""
    mask_id: str | None = None
    arrival: float = 0.0

    @property
    def length(self) -> int:
        return len(self.payload)


@dataclass
class TranscriptRecord:
    session: str
    round: int
    src: PartyId
    dst: PartyId
    nbytes: int
    sim_time_ns: int
    tag: str
    mask_id: str | None
    digest: str


@dataclass
class Transcript:
    """Append-only message log with per-party byte counters."""

    header: dict = field(default_factory=dict)
    records: list[TranscriptRecord] = field(default_factory=list)
    sent: dict = field(default_factory=lambda: defaultdict(int))
    received: dict = field(default_factory=lambda: defaultdict(int))
    session_time: dict = field(default_factory=dict)

    def append(self, msg: Message):
        self.records.append(
            TranscriptRecord(
                msg.session,
                msg.round,
                msg.src,
                msg.dst,
                msg.length,
                int(round(msg.arrival * 1e9)),
                msg.tag,
                msg.mask_id,
                hashlib.sha256(msg.payload).hexdigest(),
            )
        )
        self.sent[msg.src] += msg.length
        self.received[msg.dst] += msg.length

    @property
    def total_bytes(self) -> int:
        return sum(r.nbytes for r in self.records)

    def session_records(self, session: str) -> list[TranscriptRecord]:
        return [r for r in self.records if r.session == session]

    def session_bytes(self, session: str) -> int:
        return sum(r.nbytes for r in self.records if r.session == session)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.header, sort_keys=True).encode())
        for r in self.records:
            h.update(
                f"{r.session}|{r.round}|{r.src}|{r.dst}|{r.nbytes}|{r.sim_time_ns}"
                f"|{r.tag}|{r.mask_id}|{r.digest}\n".encode()
            )
        return h.hexdigest()

    def export_lines(self) -> Iterable[str]:
        """Line-delimited JSON records for external analysis."""
        yield json.dumps({"header": self.header}, sort_keys=True)
        for r in self.records:
            yield json.dumps(
                {
                    "session": r.session,
                    "round": r.round,
                    "from": str(r.src),
                    "to": str(r.dst),
                    "bytes": r.nbytes,
                    "sim_time_ns": r.sim_time_ns,
                    "tag": r.tag,
                },
                sort_keys=True,
            )

    def write(self, path):
        with open(path, "w") as fh:
            for line in self.export_lines():
                fh.write(line + "\n")


@dataclass(frozen=True)
class _Recv:
    src: PartyId


class PartyContext:
    """What a party program sees: its id, its clock and its mailbox."""

    def __init__(self, net: "Network", party: PartyId, session: str, rng: np.random.Generator):
        self.net = net
        self.party = party
        self.session = session
        self.rng = rng
        self.clock = 0.0
        self.round = 0

    def send(self, dst: PartyId, payload: bytes, tag: str = "", mask_id: str | None = None):
        self.net._deliver(self, dst, bytes(payload), tag, mask_id)

    def recv(self, src: PartyId) -> _Recv:
        return _Recv(src)

    def compute(self, ops: float):
        """Charge ``ops`` abstract operations to this party's clock."""
        self.clock += ops / self.net.speed_of(self.party)


class Network:
    """Links, compute model and transcript shared by all sessions."""

    def __init__(
        self,
        link: LinkModel | str = "6g",
        links: dict | None = None,
        compute_speed: float | dict = 1e9,
        fail_after: int | None = None,
    ):
        self.default_link = LINK_PRESETS[link] if isinstance(link, str) else link
        self.links = dict(links or {})
        self.compute_speed = compute_speed
        self.fail_after = fail_after
        self.transcript = Transcript(header={"link": self.default_link.name, "prg": PRG_NAME})
        self._queues: dict = {}
        self._link_free: dict = {}
        self._ctx: dict = {}
        self._session: str | None = None

    def link_between(self, src, dst) -> LinkModel:
        return self.links.get((src, dst), self.default_link)

    def speed_of(self, party) -> float:
        if isinstance(self.compute_speed, dict):
            return self.compute_speed[party]
        return self.compute_speed

    def _deliver(self, ctx: PartyContext, dst, payload: bytes, tag, mask_id):
        if dst not in self._ctx:
            raise ProtocolAbort(f"party {ctx.party} sent to unregistered party {dst}")
        if self.fail_after is not None and len(self.transcript.records) >= self.fail_after:
            raise TransportError(f"link {ctx.party}->{dst} failed")
        link = self.link_between(ctx.party, dst)
        key = (ctx.party, dst)
        depart = max(ctx.clock, self._link_free.get(key, 0.0))
        self._link_free[key] = depart + len(payload) / link.bandwidth
        arrival = self._link_free[key] + link.latency
        msg = Message(ctx.session, ctx.round, ctx.party, dst, payload, tag, mask_id, arrival)
        self._queues[(ctx.party, dst)].append(msg)
        self.transcript.append(msg)

    def run(
        self,
        programs: dict[PartyId, Callable[[PartyContext], Any]],
        seed: int = 0,
        session: str = "s0",
    ) -> dict:
        """Run one session to completion; return each party's return value."""
        parties = sorted(programs, key=str)
        self._session = session
        self._queues = {(a, b): deque() for a in parties for b in parties if a != b}
        self._link_free = {}
        self._ctx = {
            p: PartyContext(self, p, session, np.random.default_rng([seed, i]))
            for i, p in enumerate(parties)
        }
        gens, outputs, waiting, pending = {}, {}, {}, {}
        try:
            for p in parties:
                res = programs[p](self._ctx[p])
                if hasattr(res, "send") and hasattr(res, "throw"):
                    gens[p] = res
                    waiting[p] = None
                    pending[p] = None  # value to send on next resume
                else:
                    outputs[p] = res
            while gens:
                progressed = False
                for p in parties:
                    if p not in gens:
                        continue
                    progressed |= self._step(p, gens, pending, waiting, outputs)
                if gens and not progressed:
                    closed = {
                        p: w.src for p, w in waiting.items()
                        if w is not None and w.src not in gens
                    }
                    if closed:
                        p, src = next(iter(closed.items()))
                        raise ProtocolAbort(
                            f"party {p} waits on {src}, whose session side is closed"
                        )
                    raise DeadlockError({p: w.src for p, w in waiting.items() if w})
        except ProtocolAbort:
            self._abort(gens)
            raise
        except Exception as exc:
            self._abort(gens)
            raise ProtocolAbort(f"session {session} aborted: {exc!r}") from exc

        elapsed = max((c.clock for c in self._ctx.values()), default=0.0)
        self.transcript.session_time[session] = elapsed
        log.debug("session %s done: %.6fs simulated", session, elapsed)
        return outputs

    def _step(self, p, gens, pending, waiting, outputs) -> bool:
        """Advance party ``p`` until it blocks or finishes."""
        progressed = False
        ctx = self._ctx[p]
        while True:
            w = waiting[p]
            if w is not None:
                q = self._queues.get((w.src, p))
                if q is None:
                    raise ProtocolAbort(f"party {p} waits on unknown party {w.src}")
                if not q:
                    return progressed
                msg = q.popleft()
                ctx.clock = max(ctx.clock, msg.arrival)
                ctx.round += 1
                pending[p] = msg
                waiting[p] = None
            try:
                req = gens[p].send(pending[p])
            except StopIteration as stop:
                outputs[p] = stop.value
                del gens[p]
                del waiting[p]
                return True
            progressed = True
            pending[p] = None
            if not isinstance(req, _Recv):
                raise ProtocolAbort(f"party {p} yielded {req!r}; only ctx.recv() is allowed")
            waiting[p] = req

    @staticmethod
    def _abort(gens):
        for g in gens.values():
            g.close()

    def session_time(self, session: str) -> float:
        return self.transcript.session_time.get(session, 0.0)


def run_parties(programs, net: Network | None = None, seed: int = 0, session: str = "s0"):
    """Convenience wrapper: run ``programs`` on ``net`` (a fresh 6g network by default)."""
    net = net or Network()
    outputs = net.run(programs, seed=seed, session=session)
    return outputs, net.transcript
