"""Per-link secret-key sources: rate-vs-distance law, status machine, and
bit-exact key production with a fractional-carry accumulator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from random import Random

from .model import DeviceProfile, LinkSpec
from .q3p import KeyBlock

DEPLOYMENT_SPAN_KM = 25.0
DEPLOYMENT_MIN_RATE_BPS = 1000.0
DEPLOYMENT_MAX_RESTART_S = 60.0


def key_rate(profile: DeviceProfile, length_km: float) -> float:
    """Net secret-key rate in bits/s at the given fiber length.

    Exponential attenuation, zero beyond the device's operating limit. The
    rate is already net of distillation and authentication overheads.
    """
    if length_km < 0:
        raise ValueError("length_km must be >= 0")
    if length_km > profile.max_length_km:
        return 0.0
    return profile.r0_bps * 10.0 ** (-profile.alpha_db_per_km * length_km / 10.0)


def qualifies_for_deployment(profile: DeviceProfile) -> bool:
    """Backbone acceptance gate: above 1 kbit/s at 25 km and a restart
    latency of at most one minute."""
    return (
        key_rate(profile, DEPLOYMENT_SPAN_KM) > DEPLOYMENT_MIN_RATE_BPS
        and profile.restart_latency_s <= DEPLOYMENT_MAX_RESTART_S
    )


class LinkState(Enum):
    UP = "up"
    DOWN = "down"
    RESTARTING = "restarting"


@dataclass
class LinkStatus:
    state: LinkState
    remaining_s: float = 0.0


class LinkRuntime:
    """Mutable per-link production state, owned by the simulation loop.

    Production accumulates fractional bits (< 1) and sub-byte whole bits
    (< 8) across timesteps so that total output over any partition of an
    interval stays within one bit of rate * T.
    """

    def __init__(self, spec: LinkSpec, profile: DeviceProfile) -> None:
        self.spec = spec
        self.profile = profile
        self.status = LinkStatus(LinkState.UP)
        self.fractional_bits = 0.0
        self.pending_bits = 0
        self.daytime = False
        self.produced_bytes_total = 0
        self._next_block_id = 0

    @property
    def rate_bps(self) -> float:
        """Current production rate; zero when not up or blacked out."""
        if self.status.state is not LinkState.UP:
            return 0.0
        if self.profile.night_only and self.daytime:
            return 0.0
        return key_rate(self.profile, self.spec.length_km)

    @property
    def produced_bits_total(self) -> int:
        return self.produced_bytes_total * 8 + self.pending_bits

    def claim_block_id(self) -> int:
        """Next block id; shared by production and refill pushes so ids stay
        strictly increasing per link."""
        self._next_block_id += 1
        return self._next_block_id

    def fail(self) -> None:
        self.status = LinkStatus(LinkState.DOWN)

    def restore(self) -> None:
        if self.profile.restart_latency_s <= 0:
            self.status = LinkStatus(LinkState.UP)
        else:
            self.status = LinkStatus(LinkState.RESTARTING, self.profile.restart_latency_s)

    def produce(self, dt_s: float, rng: Random) -> KeyBlock | None:
        """Advance the link by ``dt_s`` and emit whole bytes of fresh key.

        Returns a block destined for BOTH endpoint stores, or None when the
        step yielded less than a byte or the link is not producing.
        """
        if dt_s <= 0:
            raise ValueError("dt_s must be positive")
        if self.status.state is LinkState.RESTARTING:
            if dt_s < self.status.remaining_s - 1e-12:
                self.status.remaining_s -= dt_s
                return None
            dt_s -= self.status.remaining_s
            self.status = LinkStatus(LinkState.UP)
            if dt_s <= 0:
                return None
        rate = self.rate_bps
        if rate <= 0.0 or self.status.state is not LinkState.UP:
            return None
        total = rate * dt_s + self.fractional_bits
        whole = math.floor(total)
        self.fractional_bits = total - whole
        self.pending_bits += whole
        n_bytes, self.pending_bits = divmod(self.pending_bits, 8)
        if n_bytes == 0:
            return None
        self.produced_bytes_total += n_bytes
        return KeyBlock(self.claim_block_id(), rng.randbytes(n_bytes), self.spec.id)
