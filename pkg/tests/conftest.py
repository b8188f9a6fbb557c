import pytest

from aamledger.geometry4d import OperatingVolumeContract, PriorityClass, VolumeSegment


def make_ovc(ovc_id, segments, *, exclusive=True, capacity=1, operator="op1", deposit=100,
             pclass=None):
    if pclass is None:
        pclass = PriorityClass.Commercial if exclusive else PriorityClass.LowPriorityNonExclusive
    segs = tuple(VolumeSegment(t0, t1, lo, hi) for t0, t1, lo, hi in segments)
    return OperatingVolumeContract(ovc_id, operator, segs, exclusive, pclass, capacity, deposit)


@pytest.fixture
def ovc_factory():
    return make_ovc
