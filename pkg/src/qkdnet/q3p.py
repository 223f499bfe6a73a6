"""Point-to-point key layer: per-link key stores, one-time-pad encryption,
information-theoretic message authentication, and authenticated framing.

Every QKD link feeds an identical stream of secret bytes into a key store at
each endpoint. Consumption is tracked in an append-only ledger whose byte
ranges never overlap: that ledger IS the one-time-pad discipline. Because
both ends hold mirrored copies of the stream, the two stores stay level-equal
as long as they see the same message history.

To let both endpoints send concurrently without ever assigning the same key
bytes twice, each key block is split in half: the first half fuels messages
from endpoint ``a`` to ``b``, the second half the reverse direction. The
sender allocates sequentially from its outbound half; the receiver burns the
exact same ranges when it opens the message (they ride along in-memory,
standing in for the key-synchronization dialogue of a real deployment).
"""

from __future__ import annotations

import hmac
import struct
from bisect import bisect_right
from dataclasses import dataclass
from enum import Enum, IntEnum

AUTH_KEY_BYTES = 32          # key budget per authenticated message
TAG_BYTES = 16               # tag carried on the wire
AUTH_RESERVE_DEFAULT = 4096  # floor held back for authentication only

FRAME_MAGIC = 0x51335021     # "Q3P!"
FRAME_VERSION = 1
FLAG_ENCRYPTED = 0x01
FLAG_AUTHENTICATED = 0x02

_HEADER = struct.Struct(">IBBBQI")

_POLY_PRIME = (1 << 128) - 159  # largest 128-bit prime
_MASK_128 = (1 << 128) - 1


class Q3PError(Exception):
    """Base class for key-layer failures."""


class OutOfOrderBlock(Q3PError):
    """A key block arrived with an id not greater than all stored ids."""


class InsufficientKey(Q3PError):
    """Not enough unconsumed key; the caller should back off or reroute."""


class ReservationConsumed(Q3PError):
    """A reservation was used a second time."""


class LengthMismatch(Q3PError):
    """Reservation length does not match the data length."""


class TagMismatch(Q3PError):
    """Authentication tag failed to verify."""


class ReplayDetected(Q3PError):
    """Message id did not strictly increase on its channel."""


class KeyReuseError(Q3PError):
    """A byte range was consumed twice; the ledger invariant was violated."""


class FrameError(Q3PError):
    """Malformed wire frame."""


class Channel(IntEnum):
    DISTILL = 0
    ROUTING = 1
    TRANSPORT = 2
    CONTROL = 3


class Purpose(str, Enum):
    ENCRYPT = "encrypt"
    AUTHENTICATE = "authenticate"
    PRESHARED_REFILL = "preshared_refill"


# Purposes that must not dip the store below its authentication reserve.
_GENERAL_PURPOSES = (Purpose.ENCRYPT, Purpose.PRESHARED_REFILL)


@dataclass(frozen=True)
class KeyBlock:
    """One batch of fresh shared secret delivered by a link."""

    id: int
    data: bytes
    origin_link: str

    def __post_init__(self) -> None:
        if not self.data:
            raise ValueError("key block must be non-empty")


@dataclass
class LedgerRecord:
    """One consumption event: disjoint raw byte ranges plus bookkeeping."""

    ranges: tuple[tuple[int, int], ...]
    n_bytes: int
    purpose: Purpose
    timestamp: float
    msg_id: int | None = None


@dataclass
class Reservation:
    """A claim on specific key bytes, usable exactly once."""

    store: "KeyStore"
    ranges: tuple[tuple[int, int], ...]
    key: bytes
    purpose: Purpose
    record: LedgerRecord
    consumed: bool = False

    @property
    def n_bytes(self) -> int:
        return len(self.key)

    def consume(self, msg_id: int | None = None) -> None:
        if self.consumed:
            raise ReservationConsumed(f"reservation {self.ranges} already used")
        self.consumed = True
        self.record.msg_id = msg_id


class _IntervalSet:
    """Sorted disjoint half-open intervals with overlap rejection."""

    def __init__(self) -> None:
        self._starts: list[int] = []
        self._ends: list[int] = []

    def add(self, start: int, end: int) -> None:
        if end <= start:
            raise ValueError("empty interval")
        i = bisect_right(self._starts, start)
        if i > 0 and self._ends[i - 1] > start:
            raise KeyReuseError(f"byte range [{start},{end}) overlaps consumed key")
        if i < len(self._starts) and self._starts[i] < end:
            raise KeyReuseError(f"byte range [{start},{end}) overlaps consumed key")
        self._starts.insert(i, start)
        self._ends.insert(i, end)

    def __iter__(self):
        return iter(zip(self._starts, self._ends))


@dataclass
class _Chunk:
    raw_start: int
    data: bytes
    direction: int

    @property
    def raw_end(self) -> int:
        return self.raw_start + len(self.data)


class KeyStore:
    """One endpoint's pool of shared link key with reservation semantics.

    ``side`` 0 sits at the link's ``a`` endpoint and allocates from direction
    pool 0 (a to b); side 1 allocates from pool 1. Levels and the ledger span
    both pools.
    """

    def __init__(
        self,
        link_id: str,
        side: int = 0,
        preshared: bytes = b"",
        auth_reserve: int = AUTH_RESERVE_DEFAULT,
    ) -> None:
        if side not in (0, 1):
            raise ValueError("side must be 0 or 1")
        self.link_id = link_id
        self.side = side
        self.auth_reserve = auth_reserve
        self.ledger: list[LedgerRecord] = []
        self._chunks: list[_Chunk] = []          # all chunks, raw-offset order
        self._chunk_starts: list[int] = []
        self._pool_chunks: tuple[list[_Chunk], list[_Chunk]] = ([], [])
        self._appended_raw = 0
        self._pool_appended = [0, 0]
        self._pool_consumed = [0, 0]
        self._alloc_offset = [0, 0]              # pool-local allocation cursor
        self._consumed = _IntervalSet()
        self._last_block_id: int | None = None
        self.initial_bytes = len(preshared)
        if preshared:
            self._append(KeyBlock(0, preshared, link_id))

    # -- levels -------------------------------------------------------------

    @property
    def appended_bytes(self) -> int:
        return self._appended_raw

    @property
    def ledgered_bytes(self) -> int:
        return self._pool_consumed[0] + self._pool_consumed[1]

    @property
    def available_bytes(self) -> int:
        return self._appended_raw - self.ledgered_bytes

    def pool_available(self, direction: int) -> int:
        return self._pool_appended[direction] - self._pool_consumed[direction]

    @property
    def outbound_direction(self) -> int:
        return self.side

    @property
    def last_block_id(self) -> int | None:
        return self._last_block_id

    # -- intake -------------------------------------------------------------

    def _append(self, block: KeyBlock) -> None:
        half = (len(block.data) + 1) // 2
        for direction, part in ((0, block.data[:half]), (1, block.data[half:])):
            if not part:
                continue
            chunk = _Chunk(self._appended_raw, part, direction)
            self._chunks.append(chunk)
            self._chunk_starts.append(chunk.raw_start)
            self._pool_chunks[direction].append(chunk)
            self._pool_appended[direction] += len(part)
            self._appended_raw += len(part)
        self._last_block_id = block.id

    def push_block(self, block: KeyBlock) -> int:
        """Add a freshly produced block; returns the updated level."""
        if self._last_block_id is not None and block.id <= self._last_block_id:
            raise OutOfOrderBlock(
                f"block id {block.id} not above stored id {self._last_block_id}"
            )
        self._append(block)
        return self.available_bytes

    # -- reservation --------------------------------------------------------

    def can_reserve(self, n_bytes: int, purpose: Purpose, direction: int | None = None) -> bool:
        if n_bytes <= 0:
            return False
        d = self.outbound_direction if direction is None else direction
        if self.pool_available(d) < n_bytes:
            return False
        if purpose in _GENERAL_PURPOSES:
            return self.available_bytes - n_bytes >= self.auth_reserve
        return self.available_bytes >= n_bytes

    def reserve(
        self,
        n_bytes: int,
        purpose: Purpose,
        direction: int | None = None,
        now: float = 0.0,
    ) -> Reservation:
        """Claim the next ``n_bytes`` from a direction pool.

        General-purpose reservations (encryption, refill) fail rather than
        dip the level below the authentication reserve; authentication
        reservations may spend the reserve itself.
        """
        if n_bytes <= 0:
            raise ValueError("n_bytes must be positive")
        d = self.outbound_direction if direction is None else direction
        if purpose in _GENERAL_PURPOSES:
            if self.available_bytes - n_bytes < self.auth_reserve:
                raise InsufficientKey(
                    f"{self.link_id}/{self.side}: {n_bytes} B would breach the "
                    f"{self.auth_reserve} B authentication reserve"
                )
        elif self.available_bytes < n_bytes:
            raise InsufficientKey(f"{self.link_id}/{self.side}: store exhausted")
        if self.pool_available(d) < n_bytes:
            raise InsufficientKey(
                f"{self.link_id}/{self.side}: direction pool {d} exhausted"
            )
        ranges: list[tuple[int, int]] = []
        parts: list[bytes] = []
        offset = self._alloc_offset[d]
        remaining = n_bytes
        cum = 0
        for chunk in self._pool_chunks[d]:
            clen = len(chunk.data)
            if offset >= cum + clen:
                cum += clen
                continue
            local = max(offset - cum, 0)
            take = min(clen - local, remaining)
            ranges.append((chunk.raw_start + local, chunk.raw_start + local + take))
            parts.append(chunk.data[local : local + take])
            remaining -= take
            cum += clen
            if remaining == 0:
                break
        assert remaining == 0
        self._alloc_offset[d] = offset + n_bytes
        return self._commit(tuple(ranges), b"".join(parts), d, purpose, now)

    def reserve_exact(
        self,
        ranges: tuple[tuple[int, int], ...],
        purpose: Purpose,
        now: float = 0.0,
    ) -> Reservation:
        """Claim explicit raw ranges (mirroring the peer's allocation)."""
        parts: list[bytes] = []
        direction = None
        for start, end in ranges:
            if end > self._appended_raw:
                raise InsufficientKey(
                    f"{self.link_id}/{self.side}: range [{start},{end}) beyond stream"
                )
            i = bisect_right(self._chunk_starts, start) - 1
            while start < end:
                chunk = self._chunks[i]
                if not (chunk.raw_start <= start < chunk.raw_end):
                    raise InsufficientKey(f"{self.link_id}/{self.side}: bad range")
                take = min(end, chunk.raw_end) - start
                parts.append(chunk.data[start - chunk.raw_start : start - chunk.raw_start + take])
                direction = chunk.direction
                start += take
                i += 1
        if direction is None:
            raise ValueError("empty range list")
        return self._commit(ranges, b"".join(parts), direction, purpose, now)

    def _commit(
        self,
        ranges: tuple[tuple[int, int], ...],
        key: bytes,
        direction: int,
        purpose: Purpose,
        now: float,
    ) -> Reservation:
        for start, end in ranges:
            self._consumed.add(start, end)
        self._pool_consumed[direction] += len(key)
        record = LedgerRecord(ranges=ranges, n_bytes=len(key), purpose=purpose, timestamp=now)
        self.ledger.append(record)
        return Reservation(store=self, ranges=ranges, key=key, purpose=purpose, record=record)

    def consumed_ranges(self) -> list[tuple[int, int]]:
        return list(self._consumed)


# --- one-time pad and authentication ---------------------------------------

def _xor(data: bytes, key: bytes) -> bytes:
    n = len(data)
    return (int.from_bytes(data, "big") ^ int.from_bytes(key, "big")).to_bytes(n, "big")


def otp_encrypt(reservation: Reservation, plaintext: bytes) -> bytes:
    """XOR the plaintext with reserved key bytes; single use enforced."""
    if reservation.purpose not in _GENERAL_PURPOSES:
        raise ValueError("reservation purpose does not permit encryption")
    if reservation.consumed:
        raise ReservationConsumed("encryption key already used")
    if reservation.n_bytes != len(plaintext):
        raise LengthMismatch(
            f"reservation holds {reservation.n_bytes} B, plaintext is {len(plaintext)} B"
        )
    reservation.consume()
    return _xor(plaintext, reservation.key)


def otp_decrypt(reservation: Reservation, ciphertext: bytes) -> bytes:
    """Inverse of otp_encrypt (XOR is an involution)."""
    if reservation.purpose not in _GENERAL_PURPOSES:
        raise ValueError("reservation purpose does not permit decryption")
    if reservation.consumed:
        raise ReservationConsumed("decryption key already used")
    if reservation.n_bytes != len(ciphertext):
        raise LengthMismatch(
            f"reservation holds {reservation.n_bytes} B, ciphertext is {len(ciphertext)} B"
        )
    reservation.consume()
    return _xor(ciphertext, reservation.key)


def _poly_tag(key: bytes, data: bytes) -> bytes:
    """Polynomial universal hash over GF(2^128 - 159), masked output.

    The 32-byte key splits into a 16-byte evaluation point ``r`` and a
    16-byte one-time mask. Each 16-byte block is lifted to an integer with a
    length-encoding top byte (poly1305 style) and folded into
    ``acc = (acc + block) * r mod p``; the tag is ``acc XOR mask`` truncated
    to 128 bits. Deterministic, and unconditionally secure as long as each
    key is used for a single message.
    """
    r = int.from_bytes(key[:16], "big") % _POLY_PRIME
    mask = int.from_bytes(key[16:32], "big")
    acc = 0
    for i in range(0, len(data), 16):
        chunk = data[i : i + 16]
        block = int.from_bytes(chunk, "big") + (1 << (8 * len(chunk)))
        acc = (acc + block) * r % _POLY_PRIME
    return ((acc ^ mask) & _MASK_128).to_bytes(TAG_BYTES, "big")


def authenticate(data: bytes, reservation: Reservation, msg_id: int | None = None) -> bytes:
    """Produce a 16-byte tag, consuming a 32-byte authentication reservation."""
    if reservation.purpose is not Purpose.AUTHENTICATE:
        raise ValueError("reservation purpose must be authenticate")
    if reservation.n_bytes != AUTH_KEY_BYTES:
        raise LengthMismatch(f"authentication needs {AUTH_KEY_BYTES} key bytes")
    reservation.consume(msg_id)
    return _poly_tag(reservation.key, data)


def verify(data: bytes, tag: bytes, reservation: Reservation, msg_id: int | None = None) -> bool:
    """Recompute the tag with mirrored key bytes; consumes the reservation."""
    if reservation.purpose is not Purpose.AUTHENTICATE:
        raise ValueError("reservation purpose must be authenticate")
    if reservation.n_bytes != AUTH_KEY_BYTES:
        raise LengthMismatch(f"authentication needs {AUTH_KEY_BYTES} key bytes")
    reservation.consume(msg_id)
    return hmac.compare_digest(_poly_tag(reservation.key, data), tag)


# --- framing ----------------------------------------------------------------

@dataclass
class Q3PMessage:
    """A sealed frame plus the key ranges its opener must mirror-consume."""

    link_id: str
    sender_side: int
    channel: Channel
    flags: int
    msg_id: int
    payload: bytes                                   # ciphertext when encrypted
    tag: bytes | None
    enc_ranges: tuple[tuple[int, int], ...] | None = None
    auth_ranges: tuple[tuple[int, int], ...] | None = None
    enc_purpose: Purpose = Purpose.ENCRYPT

    @property
    def encrypted(self) -> bool:
        return bool(self.flags & FLAG_ENCRYPTED)

    @property
    def authenticated(self) -> bool:
        return bool(self.flags & FLAG_AUTHENTICATED)

    @property
    def encrypted_len(self) -> int:
        if not self.enc_ranges:
            return 0
        return sum(end - start for start, end in self.enc_ranges)

    @property
    def key_cost_bytes(self) -> int:
        return self.encrypted_len + (AUTH_KEY_BYTES if self.authenticated else 0)

    def header_bytes(self) -> bytes:
        return _HEADER.pack(
            FRAME_MAGIC, FRAME_VERSION, int(self.channel), self.flags,
            self.msg_id, len(self.payload),
        )

    def wire_bytes(self) -> bytes:
        out = self.header_bytes() + self.payload
        if self.authenticated:
            out += self.tag
        return out


def encode_frame(channel: Channel, flags: int, msg_id: int, payload: bytes,
                 tag: bytes | None = None) -> bytes:
    """Big-endian wire frame: magic, version, channel, flags, msg id, length,
    payload, and a 16-byte tag when the authenticated flag is set."""
    out = _HEADER.pack(FRAME_MAGIC, FRAME_VERSION, int(channel), flags, msg_id, len(payload))
    out += payload
    if flags & FLAG_AUTHENTICATED:
        if tag is None or len(tag) != TAG_BYTES:
            raise FrameError("authenticated frame requires a 16-byte tag")
        out += tag
    return out


def decode_frame(data: bytes) -> tuple[Channel, int, int, bytes, bytes | None]:
    if len(data) < _HEADER.size:
        raise FrameError("frame shorter than header")
    magic, version, channel, flags, msg_id, plen = _HEADER.unpack_from(data)
    if magic != FRAME_MAGIC:
        raise FrameError(f"bad magic 0x{magic:08x}")
    if version != FRAME_VERSION:
        raise FrameError(f"unsupported version {version}")
    want = _HEADER.size + plen + (TAG_BYTES if flags & FLAG_AUTHENTICATED else 0)
    if len(data) != want:
        raise FrameError(f"frame length {len(data)} != expected {want}")
    payload = data[_HEADER.size : _HEADER.size + plen]
    tag = data[_HEADER.size + plen :] if flags & FLAG_AUTHENTICATED else None
    return Channel(channel), flags, msg_id, payload, tag


class Q3PLink:
    """The mirrored pair of key stores at the two ends of one link.

    Owns per-channel message-id counters and replay watermarks. ``seal``
    runs at the sending store, ``open`` at the receiving store; both burn
    identical byte ranges, so levels stay equal under loss-free histories.
    """

    def __init__(self, link_id: str, preshared: bytes,
                 auth_reserve: int = AUTH_RESERVE_DEFAULT) -> None:
        self.link_id = link_id
        self.stores = (
            KeyStore(link_id, 0, preshared, auth_reserve),
            KeyStore(link_id, 1, preshared, auth_reserve),
        )
        self._next_id: dict[tuple[int, Channel], int] = {}
        self._watermark: dict[tuple[int, Channel], int] = {}
        self._block_counter = 0

    def store(self, side: int) -> KeyStore:
        return self.stores[side]

    def next_block_id(self) -> int:
        self._block_counter += 1
        return self._block_counter

    def push(self, block: KeyBlock) -> None:
        """Deliver one produced block identically to both endpoint stores."""
        for store in self.stores:
            store.push_block(block)

    def min_level(self) -> int:
        return min(s.available_bytes for s in self.stores)

    def can_seal(self, side: int, encrypt_len: int, encrypt: bool, auth: bool) -> bool:
        store = self.stores[side]
        n_enc = encrypt_len if encrypt else 0
        need = n_enc + (AUTH_KEY_BYTES if auth else 0)
        if need == 0:
            return True
        if store.pool_available(store.outbound_direction) < need:
            return False
        if n_enc > 0 and store.available_bytes - n_enc < store.auth_reserve:
            return False
        return store.available_bytes >= need

    def seal(
        self,
        side: int,
        channel: Channel,
        payload: bytes,
        encrypt: bool = True,
        auth: bool = True,
        purpose: Purpose = Purpose.ENCRYPT,
        now: float = 0.0,
        clear_len: int = 0,
    ) -> Q3PMessage:
        """Reserve key, encrypt and tag the payload, and emit the message.

        The first ``clear_len`` payload bytes are framing metadata and stay
        unencrypted (still covered by the tag); key spend is exactly the
        encrypted length plus the 32-byte tag budget.
        """
        store = self.stores[side]
        n_enc = len(payload) - clear_len if encrypt else 0
        if not self.can_seal(side, n_enc, encrypt and n_enc > 0, auth):
            raise InsufficientKey(
                f"{self.link_id}/{side}: cannot seal {len(payload)} B "
                f"(encrypt={encrypt}, auth={auth})"
            )
        flags = 0
        enc_res = None
        auth_res = None
        if encrypt and n_enc > 0:
            flags |= FLAG_ENCRYPTED
            enc_res = store.reserve(n_enc, purpose, now=now)
        if auth:
            flags |= FLAG_AUTHENTICATED
            auth_res = store.reserve(AUTH_KEY_BYTES, Purpose.AUTHENTICATE, now=now)
        key = (side, channel)
        msg_id = self._next_id.get(key, 0) + 1
        self._next_id[key] = msg_id
        if enc_res is not None:
            body = payload[:clear_len] + otp_encrypt(enc_res, payload[clear_len:])
            enc_res.record.msg_id = msg_id
        else:
            body = payload
        msg = Q3PMessage(
            link_id=self.link_id, sender_side=side, channel=channel, flags=flags,
            msg_id=msg_id, payload=body, tag=None,
            enc_ranges=enc_res.ranges if enc_res else None,
            auth_ranges=auth_res.ranges if auth_res else None,
            enc_purpose=purpose,
        )
        if auth_res:
            msg.tag = authenticate(msg.header_bytes() + body, auth_res, msg_id)
        return msg

    def open(self, side: int, msg: Q3PMessage, now: float = 0.0) -> bytes:
        """Verify, mirror-consume, and decrypt a message at the receiving end."""
        if side == msg.sender_side:
            raise ValueError("open must run at the opposite end from seal")
        store = self.stores[side]
        key = (msg.sender_side, msg.channel)
        if msg.msg_id <= self._watermark.get(key, 0):
            raise ReplayDetected(
                f"{self.link_id}: msg id {msg.msg_id} not above "
                f"{self._watermark.get(key, 0)} on channel {msg.channel.name}"
            )
        if msg.authenticated:
            auth_res = store.reserve_exact(msg.auth_ranges, Purpose.AUTHENTICATE, now=now)
            if not verify(msg.header_bytes() + msg.payload, msg.tag, auth_res, msg.msg_id):
                raise TagMismatch(f"{self.link_id}: tag mismatch on msg {msg.msg_id}")
        plaintext = msg.payload
        if msg.encrypted:
            enc_res = store.reserve_exact(msg.enc_ranges, msg.enc_purpose, now=now)
            enc_res.record.msg_id = msg.msg_id
            clear = len(msg.payload) - msg.encrypted_len
            plaintext = msg.payload[:clear] + otp_decrypt(enc_res, msg.payload[clear:])
        self._watermark[key] = msg.msg_id
        return plaintext
