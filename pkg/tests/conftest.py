import io
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from stages.aggregation import TrafficSketch  # noqa: E402
from stages.asn_map import load_prefix_table  # noqa: E402

PREFIXES = """\
# test routing snapshot
10.0.0.0/8 100
10.1.0.0/16 200
198.51.100.0/24 2354
203.0.113.0/24 300
192.0.2.0/24 400
"""


@pytest.fixture
def prefix_table():
    return load_prefix_table(io.StringIO(PREFIXES))


def sketch(t, per_src, port=123, dst_as=9):
    """A TrafficSketch with bytes equal to the per-source sum."""
    return TrafficSketch(t, port, dst_as, sum(per_src.values()), dict(per_src))
