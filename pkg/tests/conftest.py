import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from pvssd.channel import Sealer  # noqa: E402
from pvssd.device import Device  # noqa: E402
from pvssd.host import HostShim  # noqa: E402
from pvssd.nand import NandGeometry  # noqa: E402
from pvssd.policy import PolicyOp, PolicyRequest  # noqa: E402
from pvssd.simtime import at  # noqa: E402

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = NandGeometry(page_size_bytes=64, pages_per_block=4, blocks_total=40, ov_zone_blocks=8)
SMALL = NandGeometry(page_size_bytes=512, pages_per_block=8, blocks_total=64, ov_zone_blocks=16)
T0 = at(2024, 12, 1)


def make_device(geometry=SMALL, **kw):
    kw.setdefault("start_time", T0)
    return Device(geometry, **kw)


def create_policy(dev, rule="*", rt=None, bc=None, sealer=None):
    sealer = sealer or Sealer(dev.key, dev.policies.last_counter)
    req = PolicyRequest(PolicyOp.CREATE, 0, rt, bc, rule)
    return dev.apply_policy_request(sealer.seal(req.encode())).policy_id


@pytest.fixture
def dev():
    return make_device()


@pytest.fixture
def shim(dev):
    return HostShim(dev)
