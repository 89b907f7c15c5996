"""Wavelength/beamsplitter channel allocation for fully connected QKD networks.

An ``n``-user network is built from ``k`` identical subnets of ``m = n/k``
users each.  Wavelength channels come in energy-conserving pairs symmetric
about the degeneracy channel (ITU grid channel 34): channel index ``+c``
pairs with ``-c`` and the ITU number of index ``c`` is ``34 + c``.

Construction (uniform k-fold splitters only):

* Every pair of *base* users ``(i, j)`` inside a subnet gets one channel
  pair.  Each side is split k ways across the k subnet copies of that base
  user, so one channel pair serves all k*k copy combinations of the link.
  This consumes ``(n/k)(n/k - 1)`` channels.
* The only links not covered are the ones between copies of the *same*
  base user.  Base users are grouped k at a time (``n/k**2`` groups); for
  each group and each of the ``k(k-1)/2`` subnet pairs ``(a, b)`` one extra
  channel pair is split k ways to the group's members in subnet ``a`` (plus
  side) and subnet ``b`` (minus side).  This consumes ``(n/k**2) k(k-1)``
  channels and, as a byproduct, double-covers the cross-subnet links
  between distinct members of a group: those are the *premium* links
  (``n(k-1)**2/2`` of them, 4 for n=8, k=2).

The assignment is fully deterministic: base pairs in lexicographic order
take the lowest channel indices, cross pairs take the highest, so two
calls with the same ``(n, k)`` produce bit-identical plans.

All formulas require ``n/k`` and ``n/k**2`` to be integers; other sizes
are rejected (use :func:`next_valid_users` to round up).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

__all__ = [
    "NonIntegerSubnet",
    "ChannelPair",
    "Routing",
    "NetworkPlan",
    "ValidationReport",
    "channel_count",
    "premium_count",
    "channels_per_user",
    "next_valid_users",
    "plan_network",
    "validate_plan",
    "save_plan",
    "load_plan",
]

CENTRAL_ITU_CHANNEL = 34

#: Default spacing of the per-routing internal (multiplexing-unit) path
#: delays.  25 ns ~ 5 m of fiber; distinct per-resource delays are what let
#: a premium link separate its two coincidence-peak families in post
#: processing.
MU_DELAY_STEP_PS = 25_000


class NonIntegerSubnet(ValueError):
    """n users cannot be divided into k uniform-splitter subnets."""


@dataclass(frozen=True)
class ChannelPair:
    """Energy-conserving pair of DWDM channel indices (+c, -c).

    Indices are offsets from the central ITU channel 34; index 0 (the
    degeneracy channel itself) is not usable.
    """

    plus: int
    minus: int

    def __post_init__(self) -> None:
        if self.plus == 0 or self.minus == 0:
            raise ValueError("channel index 0 (degeneracy channel) is not assignable")
        if self.plus + self.minus != 0:
            raise ValueError(
                f"channel pair ({self.plus}, {self.minus}) violates energy conservation"
            )
        if self.plus < 0:
            raise ValueError("store the positive index first")

    def itu_numbers(self) -> tuple[int, int]:
        return (CENTRAL_ITU_CHANNEL + self.plus, CENTRAL_ITU_CHANNEL + self.minus)


@dataclass(frozen=True)
class Routing:
    """How one channel pair is beamsplit to users.

    ``split_fraction`` is the probability that a photon on a split side
    reaches any one recipient; a side with r recipients is an r-fold
    splitter, so a valid routing has ``split_fraction == 1/r`` on each side
    (0.5 for the 50:50 couplers of the 8-user build).  ``minus_delay_ps`` /
    ``plus_delay_ps`` model the internal multiplexing-unit path of each
    channel; ``extra_loss_db`` is a per-channel insertion-loss override.
    """

    pair: ChannelPair
    plus_recipients: tuple[int, ...]
    minus_recipients: tuple[int, ...]
    split_fraction: float = 1.0
    plus_delay_ps: int = 0
    minus_delay_ps: int = 0
    extra_loss_db: float = 0.0

    def recipients(self, side: str) -> tuple[int, ...]:
        return self.plus_recipients if side == "plus" else self.minus_recipients

    def side_fraction(self, side: str) -> float:
        """Per-recipient routing probability of a side (1/r for r outputs)."""
        return 1.0 / len(self.recipients(side))


@dataclass(frozen=True)
class NetworkPlan:
    """Complete allocation: routings plus the per-link resource map.

    ``link_map`` maps each unordered user pair ``(u, v)``, normalized to
    ``u < v``, to the resources serving it as ``(routing_index,
    joint_probability)`` tuples, where the joint probability is the chance
    that a given emission of that channel pair sends its photons to exactly
    (u, v).  Which of the two sits on the plus side is recoverable from the
    routing's recipient lists.  ``premium_links`` are the pairs with two or
    more resources.
    """

    n_users: int
    k_subnets: int
    routings: tuple[Routing, ...]
    link_map: Mapping[tuple[int, int], tuple[tuple[int, float], ...]]
    premium_links: frozenset[tuple[int, int]]

    @property
    def users(self) -> range:
        return range(self.n_users)

    @property
    def max_channel_index(self) -> int:
        return len(self.routings)

    def links(self) -> list[tuple[int, int]]:
        return sorted(self.link_map)

    def resources(self, u: int, v: int) -> tuple[tuple[int, float], ...]:
        return self.link_map[(min(u, v), max(u, v))]

    def channels_received(self, user: int) -> list[int]:
        """Signed channel indices arriving at ``user``'s fiber."""
        out = []
        for routing in self.routings:
            if user in routing.plus_recipients:
                out.append(routing.pair.plus)
            if user in routing.minus_recipients:
                out.append(routing.pair.minus)
        return sorted(out, key=abs)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[tuple[str, str], ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self) -> set[str]:
        return {code for code, _ in self.violations}

    def __str__(self) -> str:
        if self.ok:
            return "plan OK"
        return "\n".join(f"[{code}] {msg}" for code, msg in self.violations)


def _check_divisibility(n: int, k: int) -> tuple[int, int]:
    if n < 1 or k < 1:
        raise NonIntegerSubnet(f"need n, k >= 1, got n={n}, k={k}")
    if n % k != 0 or n % (k * k) != 0:
        raise NonIntegerSubnet(
            f"{n} users cannot form {k} uniform subnets: n/k and n/k^2 must be integers"
        )
    return n // k, n // (k * k)


def channel_count(n: int, k: int) -> int:
    """Total wavelength channels for n users in k uniform-splitter subnets.

    Evaluates (n/k)(n/k - 1) + (n/k^2) k(k-1).  Raises
    :exc:`NonIntegerSubnet` when the divisibility conditions fail.
    """
    m, g = _check_divisibility(n, k)
    return m * (m - 1) + g * k * (k - 1)


def premium_count(n: int, k: int) -> int:
    """Number of double-covered (premium) links: n(k-1)^2/2."""
    _check_divisibility(n, k)
    return n * (k - 1) ** 2 // 2


def channels_per_user(n: int, k: int) -> int:
    """Channels arriving on each user's fiber: n/k + k - 2."""
    m, _ = _check_divisibility(n, k)
    return m + k - 2


def next_valid_users(n: int, k: int) -> int:
    """Smallest n' >= n with integer n'/k and n'/k^2 (pad-and-ignore sizing)."""
    if n < 1 or k < 1:
        raise NonIntegerSubnet(f"need n, k >= 1, got n={n}, k={k}")
    step = k * k
    return ((n + step - 1) // step) * step


def plan_network(n: int, k: int, *, mu_delay_step_ps: int = MU_DELAY_STEP_PS) -> NetworkPlan:
    """Build the deterministic channel/beamsplitter allocation for (n, k).

    User ids are 0..n-1 with user ``a*m + i`` being the subnet-``a`` copy of
    base user ``i`` (m = n/k).  Base-pair routings consume channel indices
    1..C(m,2); cross routings consume the remaining, highest, indices.
    """
    m, n_groups = _check_divisibility(n, k)
    split = 1.0 / k

    routings: list[Routing] = []

    def add_routing(plus_rec: Iterable[int], minus_rec: Iterable[int]) -> None:
        idx = len(routings) + 1
        routings.append(
            Routing(
                pair=ChannelPair(idx, -idx),
                plus_recipients=tuple(plus_rec),
                minus_recipients=tuple(minus_rec),
                split_fraction=split,
                plus_delay_ps=0,
                minus_delay_ps=(idx - 1) * mu_delay_step_ps,
            )
        )

    # one channel pair per base pair, split across the subnet copies
    for i, j in combinations(range(m), 2):
        add_routing((a * m + i for a in range(k)), (a * m + j for a in range(k)))

    # cross pairs: per group of k base users, one pair per subnet pair
    for g in range(n_groups):
        members = range(g * k, (g + 1) * k)
        for a, b in combinations(range(k), 2):
            add_routing((a * m + i for i in members), (b * m + i for i in members))

    link_map: dict[tuple[int, int], list[tuple[int, float]]] = {}
    for r_index, routing in enumerate(routings):
        joint = routing.side_fraction("plus") * routing.side_fraction("minus")
        for u in routing.plus_recipients:
            for v in routing.minus_recipients:
                key = (min(u, v), max(u, v))
                link_map.setdefault(key, []).append((r_index, joint))

    frozen_map = {key: tuple(val) for key, val in sorted(link_map.items())}
    premium = frozenset(key for key, val in frozen_map.items() if len(val) >= 2)
    return NetworkPlan(
        n_users=n,
        k_subnets=k,
        routings=tuple(routings),
        link_map=frozen_map,
        premium_links=premium,
    )


def validate_plan(plan: NetworkPlan) -> ValidationReport:
    """Check a plan against the construction invariants.

    Violations are reported, not raised, so broken plans can be inspected:
    uncovered user pairs, channel reuse, energy-conservation and index-range
    errors, split-fraction inconsistencies, per-user channel-count and
    premium-set mismatches.
    """
    bad: list[tuple[str, str]] = []
    n, k = plan.n_users, plan.k_subnets

    try:
        expected_channels = channel_count(n, k)
        expected_per_user = channels_per_user(n, k)
        expected_premium = premium_count(n, k)
    except NonIntegerSubnet as exc:
        return ValidationReport((("bad-shape", str(exc)),))

    if 2 * len(plan.routings) != expected_channels:
        bad.append(
            (
                "channel-count",
                f"plan has {2 * len(plan.routings)} channels, construction needs {expected_channels}",
            )
        )

    seen_indices: dict[int, int] = {}
    for r_index, routing in enumerate(plan.routings):
        pair = routing.pair
        if pair.plus + pair.minus != 0 or pair.plus <= 0:
            bad.append(("energy", f"routing {r_index} pair ({pair.plus}, {pair.minus})"))
        for idx in (pair.plus, pair.minus):
            if idx in seen_indices:
                bad.append(
                    ("channel-reuse", f"channel {idx} in routings {seen_indices[idx]} and {r_index}")
                )
            seen_indices[idx] = r_index
        if abs(pair.plus) > plan.max_channel_index:
            bad.append(("channel-range", f"|{pair.plus}| exceeds plan maximum {plan.max_channel_index}"))
        for side in ("plus", "minus"):
            rec = routing.recipients(side)
            if not rec:
                bad.append(("empty-side", f"routing {r_index} has no {side} recipients"))
                continue
            if len(rec) > 1 and abs(routing.split_fraction * len(rec) - 1.0) > 1e-9:
                bad.append(
                    (
                        "split-fraction",
                        f"routing {r_index} {side} side: {len(rec)} recipients at "
                        f"{routing.split_fraction} each does not sum to 1",
                    )
                )
            if any(u not in plan.users for u in rec):
                bad.append(("user-range", f"routing {r_index} {side} recipients {rec}"))

    for u, v in combinations(range(n), 2):
        if not plan.link_map.get((u, v)):
            bad.append(("uncovered", f"user pair ({u}, {v}) has no resource"))

    for (u, v), resources in plan.link_map.items():
        for r_index, prob in resources:
            if not 0 <= r_index < len(plan.routings):
                bad.append(("link-map", f"link ({u}, {v}) references routing {r_index}"))
                continue
            routing = plan.routings[r_index]
            expect = routing.side_fraction("plus") * routing.side_fraction("minus")
            on_sides = (
                u in routing.plus_recipients + routing.minus_recipients
                and v in routing.plus_recipients + routing.minus_recipients
            )
            if not on_sides:
                bad.append(("link-map", f"link ({u}, {v}) not served by routing {r_index}"))
            elif abs(prob - expect) > 1e-9:
                bad.append(
                    ("link-prob", f"link ({u}, {v}) routing {r_index}: {prob} != {expect}")
                )

    for user in plan.users:
        got = len(plan.channels_received(user))
        if got != expected_per_user:
            bad.append(("per-user", f"user {user} receives {got} channels, expected {expected_per_user}"))

    actual_premium = {key for key, val in plan.link_map.items() if len(val) >= 2}
    if actual_premium != set(plan.premium_links):
        bad.append(
            ("premium-set", f"declared premium {sorted(plan.premium_links)} != derived {sorted(actual_premium)}")
        )
    if len(actual_premium) != expected_premium:
        bad.append(
            ("premium-count", f"{len(actual_premium)} premium links, construction gives {expected_premium}")
        )

    return ValidationReport(tuple(bad))


# --- serialization ---------------------------------------------------------

def plan_to_dict(plan: NetworkPlan) -> dict:
    return {
        "format": "qkdnet-plan",
        "version": 1,
        "n_users": plan.n_users,
        "k_subnets": plan.k_subnets,
        "routings": [
            {
                "pair": [r.pair.plus, r.pair.minus],
                "plus_recipients": list(r.plus_recipients),
                "minus_recipients": list(r.minus_recipients),
                "split_fraction": r.split_fraction,
                "plus_delay_ps": r.plus_delay_ps,
                "minus_delay_ps": r.minus_delay_ps,
                "extra_loss_db": r.extra_loss_db,
            }
            for r in plan.routings
        ],
        "link_map": [
            {
                "users": [u, v],
                "resources": [
                    {
                        "routing": r_index,
                        "pair": [plan.routings[r_index].pair.plus, plan.routings[r_index].pair.minus],
                        "probability": prob,
                    }
                    for r_index, prob in resources
                ],
            }
            for (u, v), resources in sorted(plan.link_map.items())
        ],
        "premium_links": [list(pair) for pair in sorted(plan.premium_links)],
    }


def plan_from_dict(doc: Mapping) -> NetworkPlan:
    if doc.get("format") != "qkdnet-plan":
        raise ValueError("not a qkdnet plan document")
    routings = tuple(
        Routing(
            pair=ChannelPair(*entry["pair"]),
            plus_recipients=tuple(entry["plus_recipients"]),
            minus_recipients=tuple(entry["minus_recipients"]),
            split_fraction=entry["split_fraction"],
            plus_delay_ps=entry.get("plus_delay_ps", 0),
            minus_delay_ps=entry.get("minus_delay_ps", 0),
            extra_loss_db=entry.get("extra_loss_db", 0.0),
        )
        for entry in doc["routings"]
    )
    link_map = {
        (entry["users"][0], entry["users"][1]): tuple(
            (res["routing"], res["probability"]) for res in entry["resources"]
        )
        for entry in doc["link_map"]
    }
    return NetworkPlan(
        n_users=doc["n_users"],
        k_subnets=doc["k_subnets"],
        routings=routings,
        link_map=link_map,
        premium_links=frozenset((u, v) for u, v in doc["premium_links"]),
    )


def save_plan(plan: NetworkPlan, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(plan_to_dict(plan), indent=2) + "\n")
    tmp.replace(path)


def load_plan(path: str | Path) -> NetworkPlan:
    with open(path) as fh:
        return plan_from_dict(json.load(fh))
