import math

import numpy as np
import pytest

from aamledger.encounter import (ConflictCategory, Encounter, GoalAgent, Maneuver, VehicleState,
                                 assign_maneuvers, classify_conflict, deviation_maneuver,
                                 effective_priority, must_avoid, ranked, resolve_step,
                                 run_closed_loop)
from aamledger.geometry4d import Point4D, PriorityClass
from oracles import closest_approach, is_acyclic

PS, COM, LOW = PriorityClass.PublicService, PriorityClass.Commercial, PriorityClass.LowPriorityNonExclusive


def veh(vid, pclass=COM, adhering=True, h=None, pos=(0, 0, 100), vel=(10, 0, 0)):
    ah = None if h is None else h.to_bytes(32, "big")
    return VehicleState(vid, Point4D(0, *pos), vel, f"ovc-{vid}", ah, pclass, adhering)


def enc(*vs):
    return Encounter(tuple(vs), 0.0, 10.0)


def test_public_service_outranks_commercial():
    assert effective_priority(veh("a", PS, h=9)) > effective_priority(veh("b", COM, h=1))


def test_non_adherence_demotes():
    assert effective_priority(veh("a", COM, h=9)) > effective_priority(veh("b", PS, adhering=False, h=1))
    assert effective_priority(veh("b", PS, adhering=False, h=1)).tier == 1


def test_smaller_hash_wins_tie():
    assert effective_priority(veh("a", h=0x0A)) > effective_priority(veh("b", h=0x0B))


def test_hashless_vehicles_are_ordered():
    a = VehicleState("a", Point4D(0, 0, 0, 0), (1, 0, 0))
    b = VehicleState("b", Point4D(0, 0, 0, 0), (1, 0, 0))
    assert effective_priority(a) != effective_priority(b)


@pytest.mark.parametrize("vs,cat", [
    ((veh("a", PS, h=1), veh("b", COM, h=2)), ConflictCategory.MixedPriority),
    ((veh("a", COM, adhering=False, h=1), veh("b", COM, h=2)), ConflictCategory.OutOfOvc),
    ((veh("a", LOW, h=1), veh("b", LOW, h=2)), ConflictCategory.NonExclusiveOverlap),
])
def test_classify(vs, cat):
    assert classify_conflict(enc(*vs)) is cat


def test_one_holder_among_equal_tier():
    vs = [veh(f"v{i}", h=h) for i, h in enumerate([50, 7, 300, 12])]
    m = assign_maneuvers(enc(*vs))
    assert [k for k, v in m.items() if v is Maneuver.HoldCourse] == ["v1"]
    assert sum(v is Maneuver.Deviate for v in m.values()) == 3


def test_random_encounters_unique_holder_and_acyclic():
    rng = np.random.default_rng(8)
    classes = [PS, COM, LOW]
    for _ in range(300):
        n = int(rng.integers(2, 6))
        vs = [veh(f"v{i}", classes[int(rng.integers(3))], bool(rng.random() > 0.3),
                  int(rng.integers(0, 2**62))) for i in range(n)]
        e = enc(*vs)
        m = assign_maneuvers(e)
        assert sum(v is Maneuver.HoldCourse for v in m.values()) == 1
        holder = next(k for k, v in m.items() if v is Maneuver.HoldCourse)
        if any(v.adhering for v in vs):
            assert next(v for v in vs if v.vehicle_id == holder).adhering
        edges = [(a, b) for a, hs in must_avoid(e).items() for b in hs]
        assert is_acyclic(edges)
        assert holder not in {a for a, _ in edges}


def test_argmax_invariant_under_tier_shift():
    vs = [veh("a", COM, h=5), veh("b", PS, h=9), veh("c", COM, h=1)]
    base = ranked(vs)[0].vehicle_id
    shifted = sorted(vs, key=lambda v: (effective_priority(v).tier + 7, -effective_priority(v).tiebreak_hash))
    assert shifted[-1].vehicle_id == base


def test_no_threats_keeps_velocity():
    assert deviation_maneuver(veh("a"), [], 50.0) == (10.0, 0.0, 0.0)


def test_head_on_turns_right_minimally():
    low = veh("low", h=2, pos=(0, 0, 100), vel=(20, 0, 0))
    high = veh("high", h=1, pos=(1000, 0, 100), vel=(-20, 0, 0))
    new = deviation_maneuver(low, [high], 50.0)
    miss = closest_approach(low.pos, new, high.pos, high.vel, 60.0)
    assert miss >= 50.0 - 1e-6
    assert new[1] < 0  # rightward of +x in ENU is -y
    assert math.isclose(np.hypot(new[0], new[1]), 20.0)
    angle = math.atan2(-new[1], new[0])
    # slightly less turning must not clear
    smaller = (20 * math.cos(angle * 0.99), -20 * math.sin(angle * 0.99), 0.0)
    assert closest_approach(low.pos, smaller, high.pos, high.vel, 60.0) < 50.0


def test_three_way_convergence_clears_pairwise():
    vs = [veh("a", PS, h=1, pos=(-500, 0, 100), vel=(20, 0, 0)),
          veh("b", COM, h=2, pos=(0, -500, 100), vel=(0, 20, 0)),
          veh("c", LOW, h=3, pos=(400, 300, 100), vel=(-16, -12, 0))]
    step = resolve_step(vs, 50.0, 60.0, 0.0)
    assert step.deviating and "a" not in step.deviating
    v = step.velocities
    for x in vs:
        for y in vs:
            if x.vehicle_id < y.vehicle_id:
                assert closest_approach(x.pos, v[x.vehicle_id], y.pos, v[y.vehicle_id], 60.0) >= 50.0


def test_closed_loop_head_on():
    agents = [GoalAgent("a", (0, 0, 100), (2000, 0, 100), 20.0, COM, approval_hash=b"\x01" * 32),
              GoalAgent("b", (2000, 0, 100), (0, 0, 100), 20.0, COM, approval_hash=b"\x02" * 32)]
    r = run_closed_loop(agents, 50.0, max_time=200.0)
    assert r.cleared_at is not None and r.min_separation >= 50.0
    assert r.holders_ok and r.max_recurrence <= 3
