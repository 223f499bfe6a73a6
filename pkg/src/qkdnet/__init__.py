"""qkdnet: deterministic simulator and protocol stack for trusted-repeater
quantum-key-distribution networks.

Layers, bottom up: per-link key production (:mod:`qkdnet.links`), mirrored
key stores with one-time-pad discipline and authenticated framing
(:mod:`qkdnet.q3p`), key-aware link-state routing (:mod:`qkdnet.routing`),
hop-by-hop end-to-end secret transport (:mod:`qkdnet.transport`), a
discrete-event engine (:mod:`qkdnet.harness`), and a cost planner
(:mod:`qkdnet.planner`).
"""

from .model import (
    DeviceProfile,
    LinkClass,
    LinkSpec,
    NodeKind,
    ParseError,
    Topology,
    ValidationError,
    building_block_preset,
    full_mesh_link_count,
    load_topology,
    network_access_link_count,
    preset,
    serialize_topology,
    vienna_preset,
)
from .links import LinkRuntime, LinkState, key_rate, qualifies_for_deployment
from .q3p import (
    AUTH_RESERVE_DEFAULT,
    Channel,
    InsufficientKey,
    KeyBlock,
    KeyReuseError,
    KeyStore,
    OutOfOrderBlock,
    Purpose,
    Q3PLink,
    ReplayDetected,
    Reservation,
    ReservationConsumed,
    TagMismatch,
    authenticate,
    decode_frame,
    encode_frame,
    otp_decrypt,
    otp_encrypt,
    verify,
)
from .routing import (
    LinkStateAd,
    LinkStateDB,
    NoRoute,
    Path,
    RouteCostParams,
    disjoint_paths,
    shortest_path,
)
from .transport import (
    DeliveryRecord,
    DeliveryStatus,
    KeyDeliveryRequest,
    aggregate_rate,
)
from .harness import (
    Engine,
    Event,
    EventKind,
    MetricsReport,
    Scenario,
    ScenarioError,
    TimeTravel,
    parse_scenario,
)
from .planner import (
    Geometry,
    PlannerParams,
    chain_rate,
    cost_per_bit,
    optimal_link_length,
    relaxed_optimum_km,
    scaling_table,
)
from .scenarios import BUNDLED, bundled_scenario

__version__ = "0.1.0"
