"""Deterministic discrete-event engine.

Runs a scenario (timed key requests, link failures, DoS drains, refills,
daylight windows) over a topology. Virtual time only; a fixed production
tick, fixed per-hop latency plus optional seeded jitter, and one master seed
split into stable per-purpose streams make every run byte-reproducible.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from random import Random

from .links import LinkRuntime, LinkState
from .model import LinkSpec, ParseError, Topology
from .q3p import (
    AUTH_RESERVE_DEFAULT,
    Channel,
    InsufficientKey,
    KeyBlock,
    Purpose,
    Q3PLink,
    ReplayDetected,
    TagMismatch,
)
from .routing import (
    FloodingState,
    LinkStateAd,
    LinkStateDB,
    NoRoute,
    Path,
    RouteCostParams,
    decode_lsa,
    encode_lsa,
    lsa_instances,
    shortest_path,
)
from .transport import (
    DeliveryRecord,
    DeliveryStatus,
    KeyDeliveryRequest,
    LOW_WATER_FACTOR,
    MAX_RETRIES,
    MTU_BYTES,
    RETRY_TIMEOUT_S,
    WINDOW_PER_PATH,
    assign_fragments,
    decode_ack,
    decode_segment,
    disjoint_paths,
    encode_ack,
    encode_segment,
    split_fragments,
)

PRODUCE_TICK_S = 0.1
HOP_LATENCY_S = 0.005
KEEPALIVE_S = 10.0
SAMPLE_PERIOD_S = 1.0
SEGMENT_CLEAR_LEN = 18  # request id + seq + total + length travel unencrypted


class ScenarioError(Exception):
    """Malformed or inconsistent scenario."""


class TimeTravel(Exception):
    """An event was injected with a timestamp in the simulated past."""


class EventKind(Enum):
    PRODUCE_TICK = "produce_tick"
    MSG_ARRIVE = "msg_arrive"
    LINK_FAIL = "link_fail"
    LINK_RESTORE = "link_restore"
    DOS_DRAIN = "dos_drain"
    KEY_REQUEST = "key_request"
    DAY_WINDOW = "day_window"
    REFILL = "refill"
    TIMER = "timer"
    DEADLINE = "deadline"
    FINALIZE = "finalize"


@dataclass
class Event:
    time_s: float
    kind: EventKind
    payload: dict


@dataclass
class Scenario:
    duration_s: float
    seed: int = 0
    events: list[Event] = field(default_factory=list)
    loss_default: float = 0.0
    loss_per_link: dict[str, float] = field(default_factory=dict)
    jitter_ms: float = 0.0

    def loss_for(self, link_id: str) -> float:
        return self.loss_per_link.get(link_id, self.loss_default)


_EVENT_KEYS = {
    "fail": ("link",),
    "restore": ("link",),
    "dos": ("link", "rate", "duration"),
    "request": ("src", "dst", "bytes"),
    "daywindow": ("start", "end"),
    "refill": ("link", "bytes"),
}


def parse_scenario(text: str) -> Scenario:
    """Parse the sectioned key-value scenario format.

    Sections: ``[scenario] duration=<f> [seed=<u64>] [loss=<f>] [jitter_ms=<f>]``,
    ``[loss] link=<id> p=<f>``, and ``[event] t=<f> kind=<k> ...`` where kind is
    one of fail, restore, dos, request, daywindow, refill.
    """
    from .model import _parse_lines  # same line grammar as topology files

    duration = None
    seed = 0
    loss_default = 0.0
    jitter_ms = 0.0
    loss_per_link: dict[str, float] = {}
    events: list[Event] = []
    try:
        lines = _parse_lines(text)
    except ParseError as exc:
        raise ScenarioError(str(exc)) from None
    for lineno, section, fields in lines:
        try:
            if section == "scenario":
                duration = float(fields["duration"])
                seed = int(fields.get("seed", "0"))
                loss_default = float(fields.get("loss", "0"))
                jitter_ms = float(fields.get("jitter_ms", "0"))
            elif section == "loss":
                loss_per_link[fields["link"]] = float(fields["p"])
            elif section == "event":
                t = float(fields["t"])
                kind = fields["kind"]
                if kind not in _EVENT_KEYS:
                    raise ScenarioError(f"line {lineno}: unknown event kind {kind!r}")
                for key in _EVENT_KEYS[kind]:
                    if key not in fields:
                        raise ScenarioError(f"line {lineno}: {kind} event needs {key!r}")
                if kind == "fail":
                    events.append(Event(t, EventKind.LINK_FAIL, {"link": fields["link"]}))
                elif kind == "restore":
                    events.append(Event(t, EventKind.LINK_RESTORE, {"link": fields["link"]}))
                elif kind == "dos":
                    events.append(Event(t, EventKind.DOS_DRAIN, {
                        "link": fields["link"],
                        "rate_bytes_per_s": float(fields["rate"]),
                        "duration_s": float(fields["duration"]),
                    }))
                elif kind == "request":
                    events.append(Event(t, EventKind.KEY_REQUEST, {
                        "src": fields["src"],
                        "dst": fields["dst"],
                        "n_bytes": int(fields["bytes"]),
                        "multipath": int(fields.get("k", "1")),
                        "deadline_s": float(fields["deadline"]) if "deadline" in fields else None,
                    }))
                elif kind == "daywindow":
                    start, end = float(fields["start"]), float(fields["end"])
                    if end < start:
                        raise ScenarioError(f"line {lineno}: daywindow ends before it starts")
                    events.append(Event(t, EventKind.DAY_WINDOW, {"start": start, "end": end}))
                elif kind == "refill":
                    events.append(Event(t, EventKind.REFILL, {
                        "link": fields["link"],
                        "n_bytes": int(fields["bytes"]),
                        "multipath": int(fields.get("k", "2")),
                    }))
            else:
                raise ScenarioError(f"line {lineno}: unknown section [{section}]")
        except (KeyError, ValueError) as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None
    if duration is None or duration <= 0:
        raise ScenarioError("scenario needs a positive duration")
    for ev in events:
        if not 0.0 <= ev.time_s <= duration:
            raise ScenarioError(f"event at t={ev.time_s} outside [0, {duration}]")
    return Scenario(
        duration_s=duration, seed=seed, events=events,
        loss_default=loss_default, loss_per_link=loss_per_link, jitter_ms=jitter_ms,
    )


def sub_seed(master: int, label: str) -> int:
    """Stable per-purpose seed: adding a stream never perturbs the others."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class _LinkRT:
    spec: LinkSpec
    runtime: LinkRuntime
    q3p: Q3PLink
    rng: Random
    min_level_seen: int = 0
    refilled_bytes: int = 0


@dataclass
class _Drain:
    link_id: str
    rate_bytes_per_s: float
    end_s: float
    carry: list[float] = field(default_factory=lambda: [0.0, 0.0])
    drained: int = 0


@dataclass
class _HopState:
    request_id: int
    seq: int
    total: int
    fragment: bytes
    route_nodes: tuple[str, ...]   # starting at this node
    route_links: tuple[str, ...]
    attempts: int = 0
    gen: int = 0


@dataclass
class _SourceState:
    request: KeyDeliveryRequest
    paths: list[Path]
    queues: list[deque]
    inflight: list[int]
    frag_path: list[int]


class MetricsReport:
    """Everything observed during a run; serializes deterministically."""

    def __init__(self, engine: "Engine") -> None:
        self.duration_s = engine.scenario.duration_s
        self.seed = engine.seed
        self.samples = engine.samples
        self.records = [engine.records[i] for i in sorted(engine.records)]
        self.exposures = engine.exposures
        self.link_events = engine.link_events
        self.msg_counts = dict(sorted(engine.msg_counts.items()))
        self.transport_arrivals = engine.transport_arrivals
        self.link_stats = {}
        for link_id in sorted(engine.links):
            lrt = engine.links[link_id]
            a, b = lrt.q3p.stores
            self.link_stats[link_id] = {
                "preshared_bytes": lrt.spec.preshared_bytes,
                "produced_bytes": lrt.runtime.produced_bytes_total,
                "available_a": a.available_bytes,
                "available_b": b.available_bytes,
                "ledgered_a": a.ledgered_bytes,
                "ledgered_b": b.ledgered_bytes,
                "min_level_seen": lrt.min_level_seen,
            }
        self.delivered_bps: dict[str, float] = {}
        for rec in self.records:
            if rec.status is DeliveryStatus.DELIVERED:
                pair = f"{rec.src}->{rec.dst}"
                bits = rec.n_bytes * 8
                self.delivered_bps[pair] = self.delivered_bps.get(pair, 0.0) + bits / self.duration_s

    def metrics_csv(self) -> str:
        rows = ["time_s,link_id,level_bytes,rate_bps"]
        for t, link_id, level, rate in self.samples:
            rows.append(f"{t:.3f},{link_id},{level},{rate!r}")
        return "\n".join(rows) + "\n"

    def summary_json(self) -> str:
        doc = {
            "duration_s": self.duration_s,
            "seed": self.seed,
            "requests": [rec.summary() for rec in self.records],
            "delivered_bps_per_pair": self.delivered_bps,
            "link_stats": self.link_stats,
            "link_events": [
                {"time_s": t, "link": l, "event": e} for t, l, e in self.link_events
            ],
            "message_counts": self.msg_counts,
            "exposure_count": len(self.exposures),
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def audit_text(self) -> str:
        lines = [
            f"t={t:.6f} node={node} request={req} plaintext_bytes={n}"
            for t, node, req, n in self.exposures
        ]
        return "\n".join(lines) + ("\n" if lines else "")


class Engine:
    """Single-threaded event loop owning all link and node state."""

    def __init__(self, topology: Topology, scenario: Scenario, seed: int | None = None,
                 auth_reserve: int = AUTH_RESERVE_DEFAULT,
                 cost_params: RouteCostParams | None = None) -> None:
        self.topology = topology
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.auth_reserve = auth_reserve
        self.cost_params = cost_params or RouteCostParams()
        self.now = 0.0
        self._queue: list[tuple[float, int, Event]] = []
        self._order = 0
        self.instances = lsa_instances(topology)
        self._rng_loss = Random(sub_seed(self.seed, "loss"))
        self._rng_jitter = Random(sub_seed(self.seed, "jitter"))
        self._rng_secret = Random(sub_seed(self.seed, "secrets"))
        self.links: dict[str, _LinkRT] = {}
        for spec in topology.links:
            profile = topology.profile_of(spec)
            self.links[spec.id] = _LinkRT(
                spec=spec,
                runtime=LinkRuntime(spec, profile),
                q3p=Q3PLink(spec.id, self._preshared_bytes(spec), auth_reserve),
                rng=Random(sub_seed(self.seed, f"link:{spec.id}")),
            )
            self.links[spec.id].min_level_seen = self.links[spec.id].q3p.min_level()
        self.agents = {name: NodeAgent(self, name) for name in topology.nodes}
        self.records: dict[int, DeliveryRecord] = {}
        self._fragments: dict[int, dict[int, bytes]] = {}
        self._req_meta: dict[int, dict] = {}
        self._next_request_id = 0
        self._drains: list[_Drain] = []
        self._advert_usable: dict[str, bool] = {l: True for l in self.links}
        self.samples: list[tuple[float, str, int, float]] = []
        self.exposures: list[tuple[float, str, int, int]] = []
        self.transport_arrivals: list[tuple[float, str, int, int]] = []
        self.link_events: list[tuple[float, str, str]] = []
        self.msg_counts: Counter = Counter()
        self._tick_count = 0
        self._started = False
        self._finalized = False
        self._last_sample_time = None
        # test/chaos instrumentation: drop or corrupt the next N transport
        # messages sent on a link
        self.drop_next: Counter = Counter()
        self.corrupt_next: Counter = Counter()
        self._validate_scenario()

    def _validate_scenario(self) -> None:
        """Reject references to nodes or links the topology does not have."""
        link_ids = set(self.links)
        node_ids = set(self.topology.nodes)
        for link_id in self.scenario.loss_per_link:
            if link_id not in link_ids:
                raise ScenarioError(f"loss entry for unknown link {link_id!r}")
        for ev in self.scenario.events:
            p = ev.payload
            if "link" in p and p["link"] not in link_ids:
                raise ScenarioError(f"event at t={ev.time_s} names unknown link {p['link']!r}")
            if ev.kind is EventKind.KEY_REQUEST:
                for end in (p["src"], p["dst"]):
                    if end not in node_ids:
                        raise ScenarioError(
                            f"request at t={ev.time_s} names unknown node {end!r}")
                if p["src"] == p["dst"]:
                    raise ScenarioError(f"request at t={ev.time_s} has src == dst")
                if p["n_bytes"] <= 0 or p["multipath"] < 1:
                    raise ScenarioError(f"request at t={ev.time_s} has invalid size or k")

    def _preshared_bytes(self, spec: LinkSpec) -> bytes:
        rng = Random(sub_seed(self.seed, f"preshared:{spec.id}"))
        return rng.randbytes(spec.preshared_bytes)

    # -- queue ---------------------------------------------------------------

    def _schedule(self, event: Event, order: int | None = None) -> None:
        self._order += 1
        heapq.heappush(self._queue, (event.time_s, order if order is not None else self._order, event))

    def inject(self, event: Event) -> None:
        """Queue an externally supplied event; the past is immutable."""
        if event.time_s < self.now:
            raise TimeTravel(f"event at t={event.time_s} is before now={self.now}")
        self._schedule(event)

    def link_between(self, a: str, b: str) -> LinkSpec:
        for link in self.topology.links:
            if {link.a, link.b} == {a, b}:
                return link
        raise KeyError(f"no link between {a} and {b}")

    # -- requests ------------------------------------------------------------

    def submit_request(self, req_payload: dict, at: float,
                       exclude_links: frozenset[str] = frozenset(),
                       purpose: Purpose = Purpose.ENCRYPT,
                       refill_target: str | None = None) -> int:
        self._next_request_id += 1
        rid = self._next_request_id
        request = KeyDeliveryRequest(
            request_id=rid,
            src=req_payload["src"],
            dst=req_payload["dst"],
            n_bytes=req_payload["n_bytes"],
            multipath=req_payload.get("multipath", 1),
            deadline_s=req_payload.get("deadline_s"),
        )
        self.records[rid] = DeliveryRecord(
            request_id=rid, src=request.src, dst=request.dst,
            n_bytes=request.n_bytes, started_s=at,
        )
        self._fragments[rid] = {}
        self._req_meta[rid] = {
            "request": request,
            "exclude": exclude_links,
            "purpose": purpose,
            "refill_target": refill_target,
            "final": False,
        }
        self._schedule(Event(at, EventKind.KEY_REQUEST, {"request_id": rid}))
        if request.deadline_s is not None:
            self._schedule(Event(at + request.deadline_s, EventKind.DEADLINE, {"request_id": rid}))
        return rid

    # -- messaging -----------------------------------------------------------

    def send_message(self, link_id: str, from_node: str, msg, meta: dict | None = None) -> bool:
        """Transmit over a link's classical channel: fixed latency, seeded
        loss and jitter. Returns False if the message was dropped at send."""
        lrt = self.links[link_id]
        if lrt.runtime.status.state is LinkState.DOWN:
            self.msg_counts["dropped_link_down"] += 1
            return False
        is_transport = getattr(msg, "channel", None) == Channel.TRANSPORT
        if is_transport and self.drop_next.get(link_id, 0) > 0:
            self.drop_next[link_id] -= 1
            self.msg_counts["lost"] += 1
            return False
        if is_transport and self.corrupt_next.get(link_id, 0) > 0:
            self.corrupt_next[link_id] -= 1
            flipped = bytearray(msg.payload)
            flipped[-1] ^= 0x01
            msg.payload = bytes(flipped)
            self.msg_counts["corrupted_in_transit"] += 1
        loss = self.scenario.loss_for(link_id)
        if loss > 0 and self._rng_loss.random() < loss:
            self.msg_counts["lost"] += 1
            return False
        latency = HOP_LATENCY_S
        if self.scenario.jitter_ms > 0:
            latency += self._rng_jitter.uniform(0, self.scenario.jitter_ms / 1000.0)
        to_node = lrt.spec.b if from_node == lrt.spec.a else lrt.spec.a
        self._schedule(Event(self.now + latency, EventKind.MSG_ARRIVE, {
            "link": link_id, "to": to_node, "msg": msg, "meta": meta or {},
        }))
        return True

    # -- run loop ------------------------------------------------------------

    def run(self) -> MetricsReport:
        if self._started:
            raise ScenarioError("engine instances are single-use")
        self._started = True
        # ticks first: a production tick at time t covers the interval ending
        # at t, so state changes scheduled at t apply to later intervals
        n_ticks = round(self.scenario.duration_s / PRODUCE_TICK_S)
        for i in range(1, n_ticks + 1):
            self._schedule(Event(round(i * PRODUCE_TICK_S, 6), EventKind.PRODUCE_TICK, {}))
        for ev in self.scenario.events:
            if ev.kind is EventKind.KEY_REQUEST:
                self.submit_request(ev.payload, ev.time_s)
            elif ev.kind is EventKind.REFILL:
                self._schedule(ev)
            elif ev.kind is EventKind.DAY_WINDOW:
                self._schedule(Event(ev.payload["start"], EventKind.DAY_WINDOW, {"daytime": True}))
                self._schedule(Event(ev.payload["end"], EventKind.DAY_WINDOW, {"daytime": False}))
            else:
                self._schedule(ev)
        self._schedule(Event(self.scenario.duration_s, EventKind.FINALIZE, {}), order=1 << 62)
        for name in self.topology.nodes:
            self.agents[name].on_start()
        self._sample()
        while self._queue:
            when, _, event = heapq.heappop(self._queue)
            if when > self.scenario.duration_s + 1e-9:
                continue
            self.now = when
            self._dispatch(event)
            if self._finalized:
                break
        return MetricsReport(self)

    def _dispatch(self, event: Event) -> None:
        kind = event.kind
        p = event.payload
        if kind is EventKind.PRODUCE_TICK:
            self._tick()
        elif kind is EventKind.MSG_ARRIVE:
            self._arrive(p)
        elif kind is EventKind.LINK_FAIL:
            self._fail_link(p["link"])
        elif kind is EventKind.LINK_RESTORE:
            self._restore_link(p["link"])
        elif kind is EventKind.DOS_DRAIN:
            self._drains.append(_Drain(p["link"], p["rate_bytes_per_s"],
                                       self.now + p["duration_s"]))
            self.link_events.append((self.now, p["link"], "dos_start"))
        elif kind is EventKind.KEY_REQUEST:
            rid = p["request_id"]
            meta = self._req_meta[rid]
            self.agents[meta["request"].src].start_delivery(rid)
        elif kind is EventKind.DAY_WINDOW:
            for lrt in self.links.values():
                lrt.runtime.daytime = p["daytime"]
        elif kind is EventKind.REFILL:
            self._start_refill(p)
        elif kind is EventKind.TIMER:
            self.agents[p["node"]].on_timer(p)
        elif kind is EventKind.DEADLINE:
            self._finalize_record(p["request_id"], reason="deadline")
        elif kind is EventKind.FINALIZE:
            self._sample()
            for rid in list(self.records):
                self._finalize_record(rid, reason="scenario_end")
            self._finalized = True

    # -- event bodies ----------------------------------------------------------

    def _tick(self) -> None:
        self._tick_count += 1
        for link_id in self.links:
            lrt = self.links[link_id]
            was_up = lrt.runtime.status.state is LinkState.UP
            block = lrt.runtime.produce(PRODUCE_TICK_S, lrt.rng)
            if not was_up and lrt.runtime.status.state is LinkState.UP:
                self.link_events.append((self.now, link_id, "up"))
            if block is not None:
                lrt.q3p.push(block)
                # distillation dialogue: two device-authenticated messages per
                # block; their key cost is already netted out of the rate law
                for sender in (lrt.spec.a, lrt.spec.b):
                    self.msg_counts["distill"] += 1
                    self.send_message(link_id, sender, _DistillMarker())
        self._apply_drains()
        for link_id, lrt in self.links.items():
            level = lrt.q3p.min_level()
            if level < lrt.min_level_seen:
                lrt.min_level_seen = level
        for name in self.topology.nodes:
            self.agents[name].on_tick()
        self._track_usability()
        if self._tick_count % round(SAMPLE_PERIOD_S / PRODUCE_TICK_S) == 0:
            self._sample()

    def _apply_drains(self) -> None:
        for drain in self._drains:
            if self.now > drain.end_s:
                continue
            lrt = self.links[drain.link_id]
            for direction in (0, 1):
                want = drain.rate_bytes_per_s * PRODUCE_TICK_S / 2 + drain.carry[direction]
                n = int(want)
                drain.carry[direction] = want - n
                sender = lrt.q3p.stores[direction]
                peer = lrt.q3p.stores[1 - direction]
                n = min(n, sender.pool_available(direction), sender.available_bytes)
                if n <= 0:
                    continue
                res = sender.reserve(n, Purpose.AUTHENTICATE, direction=direction, now=self.now)
                res.consume()
                mirror = peer.reserve_exact(res.ranges, Purpose.AUTHENTICATE, now=self.now)
                mirror.consume()
                drain.drained += n

    def _fail_link(self, link_id: str) -> None:
        lrt = self.links[link_id]
        lrt.runtime.fail()
        self.link_events.append((self.now, link_id, "fail"))
        for end in (lrt.spec.a, lrt.spec.b):
            self.agents[end].originate(link_id)
        self._track_usability()

    def _restore_link(self, link_id: str) -> None:
        lrt = self.links[link_id]
        lrt.runtime.restore()
        self.link_events.append((self.now, link_id, "restore"))
        for end in (lrt.spec.a, lrt.spec.b):
            self.agents[end].originate(link_id)
        self._track_usability()

    def _arrive(self, p: dict) -> None:
        link_id = p["link"]
        lrt = self.links[link_id]
        if lrt.runtime.status.state is LinkState.DOWN:
            self.msg_counts["dropped_link_down"] += 1
            return
        msg = p["msg"]
        if isinstance(msg, _DistillMarker):
            self.msg_counts["distill_arrived"] += 1
            return
        self.agents[p["to"]].on_message(link_id, msg, p["meta"])

    def _start_refill(self, p: dict) -> None:
        link = self.topology.link(p["link"])
        self.link_events.append((self.now, link.id, "refill_start"))
        self.submit_request(
            {"src": link.a, "dst": link.b, "n_bytes": p["n_bytes"],
             "multipath": p.get("multipath", 2)},
            at=self.now,
            exclude_links=frozenset({link.id}),
            purpose=Purpose.PRESHARED_REFILL,
            refill_target=link.id,
        )

    # -- delivery bookkeeping --------------------------------------------------

    def fragment_delivered(self, request_id: int, seq: int, fragment: bytes) -> None:
        meta = self._req_meta[request_id]
        if meta["final"]:
            return
        frags = self._fragments[request_id]
        if seq in frags:
            return
        frags[seq] = fragment
        rec = self.records[request_id]
        rec.fragments_delivered = len(frags)
        if rec.fragments_total and len(frags) == rec.fragments_total:
            self._finalize_record(request_id, reason=None)

    def fragment_failed(self, request_id: int, seq: int, reason: str) -> None:
        meta = self._req_meta[request_id]
        rec = self.records[request_id]
        if rec.failure_reason is None:
            rec.failure_reason = reason
        meta.setdefault("failed_fragments", set()).add(seq)
        done = len(self._fragments[request_id]) + len(meta["failed_fragments"])
        if rec.fragments_total and done >= rec.fragments_total:
            self._finalize_record(request_id, reason=rec.failure_reason)

    def _finalize_record(self, request_id: int, reason: str | None) -> None:
        meta = self._req_meta[request_id]
        if meta["final"]:
            return
        rec = self.records[request_id]
        frags = self._fragments[request_id]
        if rec.fragments_total and len(frags) == rec.fragments_total:
            rec.status = DeliveryStatus.DELIVERED
            rec.secret_at_dst = b"".join(frags[i] for i in range(rec.fragments_total))
            rec.completion_time_s = self.now
        elif frags:
            rec.status = DeliveryStatus.PARTIAL
            rec.failure_reason = rec.failure_reason or reason
        else:
            rec.status = DeliveryStatus.FAILED
            rec.failure_reason = rec.failure_reason or reason
        meta["final"] = True
        if rec.status is DeliveryStatus.DELIVERED and meta["refill_target"]:
            self._apply_refill(meta["refill_target"], rec.secret_at_dst)

    def _apply_refill(self, link_id: str, secret: bytes) -> None:
        lrt = self.links[link_id]
        block = KeyBlock(lrt.runtime.claim_block_id(), secret, link_id)
        lrt.q3p.push(block)
        lrt.refilled_bytes += len(secret)
        self.link_events.append((self.now, link_id, "refill_done"))
        for end in (lrt.spec.a, lrt.spec.b):
            self.agents[end].originate(link_id)
        self._track_usability()

    def record_exposure(self, node: str, request_id: int, n_bytes: int) -> None:
        self.exposures.append((self.now, node, request_id, n_bytes))

    def request_meta(self, request_id: int) -> dict:
        return self._req_meta[request_id]

    def draw_secret(self, n: int) -> bytes:
        return self._rng_secret.randbytes(n)

    # -- observation -------------------------------------------------------------

    def _truth_usable(self, link_id: str) -> bool:
        lrt = self.links[link_id]
        if lrt.runtime.status.state is not LinkState.UP:
            return False
        return all(s.available_bytes > self.auth_reserve for s in lrt.q3p.stores)

    def _track_usability(self) -> None:
        for link_id in self.links:
            usable = self._truth_usable(link_id)
            if usable != self._advert_usable[link_id]:
                self._advert_usable[link_id] = usable
                self.link_events.append(
                    (self.now, link_id, "usable" if usable else "unusable")
                )

    def _sample(self) -> None:
        if self._last_sample_time == self.now:
            return
        self._last_sample_time = self.now
        for link_id in sorted(self.links):
            lrt = self.links[link_id]
            self.samples.append(
                (self.now, link_id, lrt.q3p.min_level(), lrt.runtime.rate_bps)
            )


class _DistillMarker:
    """Stand-in for the distillation dialogue on the Distill channel."""

    channel = Channel.DISTILL


class NodeAgent:
    """One node module: floods link state, relays secrets hop by hop."""

    def __init__(self, engine: Engine, name: str) -> None:
        self.engine = engine
        self.name = name
        self.topology = engine.topology
        self.db = LinkStateDB(engine.topology, usable_floor=engine.auth_reserve)
        self.flood = FloodingState()
        self.incident = [l for l in engine.topology.links if name in (l.a, l.b)]
        self._lsa_seq: dict[str, int] = {l.id: 0 for l in self.incident}
        self._advertised: dict[str, tuple[bool, int, float]] = {}
        self._relays: dict[tuple[int, int], _HopState] = {}
        self._sources: dict[int, _SourceState] = {}
        self._store_fragments: dict[int, list[bytes]] = {}
        self._timer_gen = 0

    # -- plumbing ---------------------------------------------------------------

    def side_on(self, link_id: str) -> int:
        spec = self.engine.links[link_id].spec
        return 0 if self.name == spec.a else 1

    def store_on(self, link_id: str):
        return self.engine.links[link_id].q3p.store(self.side_on(link_id))

    # -- link-state flooding ------------------------------------------------------

    def on_start(self) -> None:
        for link in self.incident:
            self.originate(link.id)

    def originate(self, link_id: str) -> None:
        """Advertise our end's current view of one incident link."""
        lrt = self.engine.links[link_id]
        self._lsa_seq[link_id] += 1
        lsa = LinkStateAd(
            link_id=link_id,
            origin=self.name,
            seq=self._lsa_seq[link_id],
            up=lrt.runtime.status.state is LinkState.UP,
            level_bytes=self.store_on(link_id).available_bytes,
            rate_bps=lrt.runtime.rate_bps,
            timestamp_ms=int(self.engine.now * 1000),
        )
        self.flood.accept(lsa)
        self.db.update(lsa)
        self._advertised[link_id] = (lsa.up, lsa.level_bytes, self.engine.now)
        self._flood_out(lsa, arrived_on=None)

    def _flood_out(self, lsa: LinkStateAd, arrived_on: str | None) -> None:
        payload = encode_lsa(lsa)
        for link in self.incident:
            if link.id == arrived_on:
                continue
            lrt = self.engine.links[link.id]
            if lrt.runtime.status.state is LinkState.DOWN:
                continue
            side = self.side_on(link.id)
            try:
                msg = lrt.q3p.seal(side, Channel.ROUTING, payload,
                                   encrypt=False, auth=True, now=self.engine.now)
            except InsufficientKey:
                self.engine.msg_counts["flood_skipped_no_key"] += 1
                continue
            self.engine.msg_counts["routing_sent"] += 1
            self.engine.send_message(link.id, self.name, msg)

    def on_tick(self) -> None:
        """Event-driven re-advertisement with hysteresis, plus keepalive."""
        for link in self.incident:
            link_id = link.id
            lrt = self.engine.links[link_id]
            up = lrt.runtime.status.state is LinkState.UP
            level = self.store_on(link_id).available_bytes
            last = self._advertised.get(link_id)
            if last is None:
                self.originate(link_id)
                continue
            last_up, last_level, last_t = last
            floor = self.engine.auth_reserve
            if (
                up != last_up
                or (level <= floor) != (last_level <= floor)
                or abs(level - last_level) >= max(2048, last_level // 4)
                or self.engine.now - last_t >= KEEPALIVE_S
            ):
                self.originate(link_id)

    # -- message handling -----------------------------------------------------------

    def on_message(self, link_id: str, msg, meta: dict) -> None:
        lrt = self.engine.links[link_id]
        side = self.side_on(link_id)
        try:
            payload = lrt.q3p.open(side, msg, now=self.engine.now)
        except TagMismatch:
            self.engine.msg_counts["tag_failures"] += 1
            return
        except ReplayDetected:
            self.engine.msg_counts["replay_drops"] += 1
            return
        if msg.channel == Channel.ROUTING:
            lsa = decode_lsa(payload, self.engine.instances)
            if self.flood.accept(lsa):
                self.db.update(lsa)
                self._flood_out(lsa, arrived_on=link_id)
        elif msg.channel == Channel.TRANSPORT:
            self._on_segment(link_id, payload, meta)
        elif msg.channel == Channel.CONTROL:
            ack = decode_ack(payload)
            if ack is not None:
                self._on_ack(link_id, *ack)

    # -- transport: source side -------------------------------------------------------

    def start_delivery(self, request_id: int) -> None:
        meta = self.engine.request_meta(request_id)
        request: KeyDeliveryRequest = meta["request"]
        rec = self.engine.records[request_id]
        secret = self.engine.draw_secret(request.n_bytes)
        rec.secret_at_src = secret
        fragments = split_fragments(secret, MTU_BYTES)
        rec.fragments_total = len(fragments)
        paths = disjoint_paths(
            self.db, request.src, request.dst, request.multipath,
            self.engine.cost_params, exclude_links=meta["exclude"],
        )
        if not paths:
            rec.failure_reason = "no_route"
            self.engine._finalize_record(request_id, reason="no_route")
            return
        rec.paths_used = paths
        weights = [
            min(self.db.min_level(l) for l in p.links) for p in paths
        ]
        frag_path = assign_fragments(len(fragments), weights)
        state = _SourceState(
            request=request,
            paths=paths,
            queues=[deque() for _ in paths],
            inflight=[0] * len(paths),
            frag_path=frag_path,
        )
        for seq, path_idx in enumerate(frag_path):
            state.queues[path_idx].append(seq)
        self._sources[request_id] = state
        self._store_fragments[request_id] = fragments
        for path_idx in range(len(paths)):
            self._pump(request_id, path_idx)

    def _pump(self, request_id: int, path_idx: int) -> None:
        state = self._sources.get(request_id)
        if state is None or self.engine.request_meta(request_id)["final"]:
            return
        fragments = self._store_fragments[request_id]
        path = state.paths[path_idx]
        while state.inflight[path_idx] < WINDOW_PER_PATH and state.queues[path_idx]:
            seq = state.queues[path_idx].popleft()
            state.inflight[path_idx] += 1
            self._send_hop(
                request_id, seq, len(fragments), fragments[seq],
                route_nodes=path.nodes, route_links=path.links, attempts=1,
            )

    # -- transport: hop machinery ---------------------------------------------------------

    def _eligible(self, link_id: str, payload_len: int) -> bool:
        lrt = self.engine.links[link_id]
        if lrt.runtime.status.state is not LinkState.UP:
            return False
        store = self.store_on(link_id)
        if store.available_bytes < LOW_WATER_FACTOR * self.engine.auth_reserve:
            return False
        return lrt.q3p.can_seal(self.side_on(link_id), payload_len, True, True)

    def _reroute(self, request_id: int, dst: str, frag_len: int) -> Path | None:
        """Recompute a route from here, skipping first hops this node locally
        knows it cannot feed (the flooded database may not know yet)."""
        exclude = set(self.engine.request_meta(request_id)["exclude"])
        for link in self.incident:
            if not self._eligible(link.id, frag_len):
                exclude.add(link.id)
        try:
            return shortest_path(self.db, self.name, dst, self.engine.cost_params,
                                 exclude_links=frozenset(exclude))
        except NoRoute:
            return None

    def _send_hop(self, request_id: int, seq: int, total: int, fragment: bytes,
                  route_nodes: tuple[str, ...], route_links: tuple[str, ...],
                  attempts: int) -> None:
        """Seal one fragment onto the next link of its route; on any local
        obstacle try one reroute, otherwise park it for the retry timer."""
        assert route_nodes[0] == self.name
        dst = route_nodes[-1]
        meta = self.engine.request_meta(request_id)
        rec = self.engine.records[request_id]
        out_link = route_links[0] if route_links else None
        if out_link is None or not self._eligible(out_link, len(fragment)):
            new_path = self._reroute(request_id, dst, len(fragment))
            if new_path is not None and new_path.links:
                route_nodes, route_links = new_path.nodes, new_path.links
                out_link = route_links[0]
            else:
                self._park(request_id, seq, total, fragment, route_nodes, route_links, attempts)
                return
        lrt = self.engine.links[out_link]
        side = self.side_on(out_link)
        payload = encode_segment(request_id, seq, total, fragment)
        try:
            msg = lrt.q3p.seal(
                side, Channel.TRANSPORT, payload,
                encrypt=True, auth=True, purpose=meta["purpose"],
                now=self.engine.now, clear_len=SEGMENT_CLEAR_LEN,
            )
        except InsufficientKey:
            self._park(request_id, seq, total, fragment, route_nodes, route_links, attempts)
            return
        rec.per_link_consumed[out_link] = (
            rec.per_link_consumed.get(out_link, 0) + msg.key_cost_bytes
        )
        self.engine.msg_counts["transport_sent"] += 1
        self._timer_gen += 1
        hop = _HopState(
            request_id=request_id, seq=seq, total=total, fragment=fragment,
            route_nodes=route_nodes, route_links=route_links,
            attempts=attempts, gen=self._timer_gen,
        )
        self._relays[(request_id, seq)] = hop
        self.engine.send_message(
            out_link, self.name, msg,
            meta={"route_nodes": route_nodes[1:], "route_links": route_links[1:]},
        )
        self.engine._schedule(Event(self.engine.now + RETRY_TIMEOUT_S, EventKind.TIMER, {
            "node": self.name, "request_id": request_id, "seq": seq, "gen": hop.gen,
        }))

    def _park(self, request_id: int, seq: int, total: int, fragment: bytes,
              route_nodes, route_links, attempts: int) -> None:
        """No way forward right now; hold the fragment and retry on timer."""
        self._timer_gen += 1
        hop = _HopState(
            request_id=request_id, seq=seq, total=total, fragment=fragment,
            route_nodes=route_nodes, route_links=route_links,
            attempts=attempts, gen=self._timer_gen,
        )
        hop.route_links = ()  # force reroute when the timer fires
        self._relays[(request_id, seq)] = hop
        self.engine._schedule(Event(self.engine.now + RETRY_TIMEOUT_S, EventKind.TIMER, {
            "node": self.name, "request_id": request_id, "seq": seq, "gen": hop.gen,
        }))

    def on_timer(self, p: dict) -> None:
        key = (p["request_id"], p["seq"])
        hop = self._relays.get(key)
        if hop is None or hop.gen != p["gen"]:
            return
        if self.engine.request_meta(hop.request_id)["final"]:
            del self._relays[key]
            return
        if hop.attempts > MAX_RETRIES:
            del self._relays[key]
            self.engine.msg_counts["retry_limit_exceeded"] += 1
            self.engine.fragment_failed(hop.request_id, hop.seq, "retry_limit_exceeded")
            self._free_window(hop.request_id, hop.seq)
            return
        route_nodes = hop.route_nodes if hop.route_links else (self.name,)
        route_links = hop.route_links
        if not route_links:
            dst = self.engine.records[hop.request_id].dst
            path = self._reroute(hop.request_id, dst, len(hop.fragment))
            if path is None:
                hop.attempts += 1
                self._timer_gen += 1
                hop.gen = self._timer_gen
                self.engine._schedule(Event(self.engine.now + RETRY_TIMEOUT_S, EventKind.TIMER, {
                    "node": self.name, "request_id": hop.request_id,
                    "seq": hop.seq, "gen": hop.gen,
                }))
                return
            route_nodes, route_links = path.nodes, path.links
        self.engine.msg_counts["retransmissions"] += 1
        self._send_hop(hop.request_id, hop.seq, hop.total, hop.fragment,
                       route_nodes, route_links, hop.attempts + 1)

    def _on_ack(self, link_id: str, request_id: int, seq: int) -> None:
        hop = self._relays.pop((request_id, seq), None)
        if hop is None:
            return
        self._free_window(request_id, seq)

    def _free_window(self, request_id: int, seq: int) -> None:
        state = self._sources.get(request_id)
        if state is None:
            return
        path_idx = state.frag_path[seq]
        state.inflight[path_idx] = max(0, state.inflight[path_idx] - 1)
        self._pump(request_id, path_idx)

    def _on_segment(self, link_id: str, payload: bytes, meta: dict) -> None:
        request_id, seq, total, fragment = decode_segment(payload)
        self.engine.transport_arrivals.append((self.engine.now, link_id, request_id, seq))
        # ack unconditionally so the upstream sender stops retransmitting;
        # acks ride the control channel without key spend
        lrt = self.engine.links[link_id]
        side = self.side_on(link_id)
        ack = lrt.q3p.seal(side, Channel.CONTROL, encode_ack(request_id, seq),
                           encrypt=False, auth=False, now=self.engine.now)
        self.engine.msg_counts["acks_sent"] += 1
        self.engine.send_message(link_id, self.name, ack)
        route_nodes = tuple(meta.get("route_nodes", ()))
        route_links = tuple(meta.get("route_links", ()))
        if not route_links:
            self.engine.fragment_delivered(request_id, seq, fragment)
            return
        # trusted-node relay: the fragment exists in plaintext here between
        # open and re-seal; make that observable
        self.engine.record_exposure(self.name, request_id, len(fragment))
        self._send_hop(request_id, seq, total, fragment,
                       route_nodes=route_nodes, route_links=route_links, attempts=1)
