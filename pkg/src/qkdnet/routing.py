"""Key-aware link-state routing: flooded advertisements carry each link's
status, key level, and rate; path costs grow as stores drain, so traffic
steers away from scarce links. OSPF-style flooding with sequence-number
duplicate suppression."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from heapq import heappop, heappush

from .model import NodeKind, Topology
from .q3p import AUTH_RESERVE_DEFAULT

_LSA_WIRE = struct.Struct(">IQBQQQ")


class NoRoute(Exception):
    """No usable path exists between the requested endpoints."""


@dataclass(frozen=True)
class LinkStateAd:
    """One endpoint's advertised view of its link."""

    link_id: str
    origin: str
    seq: int
    up: bool
    level_bytes: int
    rate_bps: float
    timestamp_ms: int


def lsa_instance_hash(link_id: str, origin: str) -> int:
    """32-bit identifier of one (link, advertising end) instance."""
    return zlib.crc32(f"{link_id}/{origin}".encode())


def encode_lsa(lsa: LinkStateAd) -> bytes:
    """37-byte advertisement payload carried inside routing frames.

    Big-endian: u32 instance hash, u64 seq, u8 status, u64 level bytes,
    u64 rate in millibits/s, u64 timestamp in ms.
    """
    return _LSA_WIRE.pack(
        lsa_instance_hash(lsa.link_id, lsa.origin),
        lsa.seq,
        1 if lsa.up else 0,
        lsa.level_bytes,
        round(lsa.rate_bps * 1000),
        lsa.timestamp_ms,
    )


def decode_lsa(data: bytes, instances: dict[int, tuple[str, str]]) -> LinkStateAd:
    """Decode an advertisement; ``instances`` maps hash -> (link, origin)."""
    h, seq, status, level, rate_milli, ts = _LSA_WIRE.unpack(data)
    link_id, origin = instances[h]
    return LinkStateAd(
        link_id=link_id, origin=origin, seq=seq, up=status == 1,
        level_bytes=level, rate_bps=rate_milli / 1000.0, timestamp_ms=ts,
    )


def lsa_instances(topo: Topology) -> dict[int, tuple[str, str]]:
    out: dict[int, tuple[str, str]] = {}
    for link in topo.links:
        for origin in (link.a, link.b):
            h = lsa_instance_hash(link.id, origin)
            if h in out:
                raise ValueError(f"LSA instance hash collision on {link.id}/{origin}")
            out[h] = (link.id, origin)
    return out


@dataclass
class RouteCostParams:
    """Cost = hop_cost + scarcity_weight * normalized key depletion."""

    hop_cost: float = 1.0
    scarcity_weight: float = 1.0
    target_level_bytes: int = 65536

    def __post_init__(self) -> None:
        if min(self.hop_cost, self.scarcity_weight, self.target_level_bytes) < 0:
            raise ValueError("route cost parameters must be non-negative")


class LinkStateDB:
    """Freshest advertisement from each end of each link, per node."""

    def __init__(self, topology: Topology, usable_floor: int = AUTH_RESERVE_DEFAULT) -> None:
        self.topology = topology
        self.usable_floor = usable_floor
        self.ads: dict[str, dict[str, LinkStateAd]] = {}

    def update(self, lsa: LinkStateAd) -> bool:
        """Install if strictly newer than the held instance; returns whether
        anything changed."""
        held = self.ads.setdefault(lsa.link_id, {}).get(lsa.origin)
        if held is not None and lsa.seq <= held.seq:
            return False
        self.ads[lsa.link_id][lsa.origin] = lsa
        return True

    def pair(self, link_id: str) -> tuple[LinkStateAd, LinkStateAd] | None:
        link = self.topology.link(link_id)
        both = self.ads.get(link_id, {})
        if link.a in both and link.b in both:
            return both[link.a], both[link.b]
        return None

    def usable(self, link_id: str) -> bool:
        """A link carries traffic only if both ends advertise Up and hold
        more key than the authentication floor."""
        pair = self.pair(link_id)
        if pair is None:
            return False
        return all(ad.up and ad.level_bytes > self.usable_floor for ad in pair)

    def min_level(self, link_id: str) -> int:
        pair = self.pair(link_id)
        if pair is None:
            return 0
        return min(ad.level_bytes for ad in pair)

    def min_rate(self, link_id: str) -> float:
        pair = self.pair(link_id)
        if pair is None:
            return 0.0
        return min(ad.rate_bps for ad in pair)

    def link_cost(self, link_id: str, params: RouteCostParams | None = None) -> float:
        params = params or RouteCostParams()
        if not self.usable(link_id):
            return float("inf")
        target = max(1, params.target_level_bytes)  # degenerate target: hop cost only
        depletion = max(0.0, 1.0 - self.min_level(link_id) / target)
        return params.hop_cost + params.scarcity_weight * depletion

    def snapshot(self) -> dict[tuple[str, str], tuple[int, bool, int]]:
        """(link, origin) -> (seq, up, level); used by convergence tests."""
        out = {}
        for link_id, both in self.ads.items():
            for origin, ad in both.items():
                out[(link_id, origin)] = (ad.seq, ad.up, ad.level_bytes)
        return out


@dataclass(frozen=True)
class Path:
    """Alternating node/link walk; consecutive links share one node."""

    nodes: tuple[str, ...]
    links: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.nodes) != len(self.links) + 1:
            raise ValueError("need exactly one more node than links")
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("path repeats a node")

    @property
    def interior(self) -> tuple[str, ...]:
        return self.nodes[1:-1]


def shortest_path(
    db: LinkStateDB,
    src: str,
    dst: str,
    params: RouteCostParams | None = None,
    exclude_links: frozenset[str] | set[str] = frozenset(),
    exclude_nodes: frozenset[str] | set[str] = frozenset(),
) -> Path:
    """Minimum-cost usable path; ties break toward the lexicographically
    smallest node-name sequence, so identical databases always yield the
    same route."""
    if src == dst:
        raise ValueError("src and dst must differ")
    params = params or RouteCostParams()
    topo = db.topology
    # Heap entries order by (cost, node sequence): the first pop per node is
    # both cheapest and lexicographically smallest among equal costs.
    heap: list[tuple[float, tuple[str, ...], tuple[str, ...]]] = [(0.0, (src,), ())]
    done: set[str] = set()
    while heap:
        cost, nodes, link_ids = heappop(heap)
        at = nodes[-1]
        if at == dst:
            return Path(nodes=nodes, links=link_ids)
        if at in done:
            continue
        done.add(at)
        for neighbor, link in sorted(topo.neighbors(at), key=lambda nl: (nl[0], nl[1].id)):
            if neighbor in done or neighbor in nodes:
                continue
            if neighbor in exclude_nodes or link.id in exclude_links:
                continue
            # end-users never carry transit traffic
            if topo.kind(neighbor) is NodeKind.END_USER and neighbor != dst:
                continue
            step = db.link_cost(link.id, params)
            if step == float("inf"):
                continue
            heappush(heap, (cost + step, nodes + (neighbor,), link_ids + (link.id,)))
    raise NoRoute(f"no usable path {src} -> {dst}")


def _collapse_user(topo: Topology, node: str) -> tuple[str, str | None]:
    """End-users hang off one backbone node; return (anchor, access link)."""
    if topo.kind(node) is NodeKind.END_USER:
        anchor, link = topo.attachment_of(node)
        return anchor, link.id
    return node, None


def disjoint_paths(
    db: LinkStateDB,
    src: str,
    dst: str,
    k: int,
    params: RouteCostParams | None = None,
    exclude_links: frozenset[str] | set[str] = frozenset(),
) -> list[Path]:
    """Up to ``k`` usable paths whose interiors share no node, by iterative
    shortest-path with interior removal, cheapest first.

    End-user endpoints are collapsed onto their backbone anchor: the single
    access link is shared by every path, and disjointness applies to the
    relay nodes strictly between the two anchors.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    params = params or RouteCostParams()
    topo = db.topology
    src_anchor, src_access = _collapse_user(topo, src)
    dst_anchor, dst_access = _collapse_user(topo, dst)
    if src_access is not None and not db.usable(src_access):
        return []
    if dst_access is not None and not db.usable(dst_access):
        return []

    def _expand(core: Path) -> Path:
        nodes = core.nodes
        links = core.links
        if src_access is not None:
            nodes = (src,) + nodes
            links = (src_access,) + links
        if dst_access is not None:
            nodes = nodes + (dst,)
            links = links + (dst_access,)
        return Path(nodes=nodes, links=links)

    if src_anchor == dst_anchor:
        if src == dst or (src_access is None and dst_access is None):
            raise ValueError("src and dst must differ")
        core = Path(nodes=(src_anchor,), links=())
        return [_expand(core)]

    found: list[Path] = []
    banned_nodes: set[str] = set()
    banned_links: set[str] = set(exclude_links)
    while len(found) < k:
        try:
            core = shortest_path(
                db, src_anchor, dst_anchor, params,
                exclude_links=frozenset(banned_links),
                exclude_nodes=frozenset(banned_nodes),
            )
        except NoRoute:
            break
        found.append(_expand(core))
        banned_nodes.update(core.interior)
        banned_links.update(core.links)
    return found


class FloodingState:
    """Per-node duplicate suppression for OSPF-style flooding."""

    def __init__(self) -> None:
        self._seen: dict[tuple[str, str], int] = {}

    def accept(self, lsa: LinkStateAd) -> bool:
        """True (and record) if this advertisement is newer than any seen."""
        key = (lsa.origin, lsa.link_id)
        if lsa.seq <= self._seen.get(key, 0):
            return False
        self._seen[key] = lsa.seq
        return True
