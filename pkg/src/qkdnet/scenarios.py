"""Bundled scenario scripts, one per network-level claim worth demonstrating.

Each runs against the vienna preset: baseline growth, failover around a cut
link, denial-of-service drain plus refill over alternate routes, and a
three-route multipath split. ``planner-sweep`` holds parameters for the cost
planner rather than the event engine.
"""

BASELINE = """\
# quiet network: stores grow, one small delivery
[scenario] duration=10 seed=42
[event] t=1.0 kind=request src=alice dst=bob bytes=4096 k=1
"""

FAILOVER = """\
# cut the direct SIE-ERD link mid-delivery; traffic reroutes and completes
[scenario] duration=12 seed=7
[event] t=1.0  kind=request src=alice dst=bob bytes=49152 k=1
[event] t=1.03 kind=fail link=SIE-ERD
[event] t=8.0  kind=restore link=SIE-ERD
"""

DOS_RECOVERY = """\
# authenticated-spam drain empties SIE-ERD, then the pre-shared secret is
# restored over the remaining links
[scenario] duration=12 seed=11
[event] t=1.0 kind=dos link=SIE-ERD rate=60000 duration=3.0
[event] t=6.0 kind=refill link=SIE-ERD bytes=8192 k=2
"""

MULTIPATH = """\
# one request spread over the three interior-disjoint SIE-ERD routes
[scenario] duration=8 seed=5
[event] t=1.0 kind=request src=alice dst=bob bytes=32768 k=3
"""

PLANNER_SWEEP = """\
[plan] alpha=0.2 r0=10000 device_cost=1.0 distance=100 geometry=chain
"""

BUNDLED = {
    "baseline": BASELINE,
    "failover": FAILOVER,
    "dos-recovery": DOS_RECOVERY,
    "multipath": MULTIPATH,
}


def bundled_scenario(name: str) -> str:
    try:
        return BUNDLED[name]
    except KeyError:
        raise KeyError(
            f"unknown bundled scenario {name!r}; have {sorted(BUNDLED)}"
        ) from None
