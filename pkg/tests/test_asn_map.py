"""
Tests for prefix table loading, longest-prefix lookup and flow mapping.
"""
import io
import ipaddress

import numpy as np
import pytest

from errors import ConfigError
from stages.asn_map import FlowMapper, PrefixTable, load_prefix_table, map_flow
from stages.flow_ingest import FlowRecord, SamplingConfig


def flow(src="10.1.2.3", dst="198.51.100.7", proto=17, sport=123, octets=1000, packets=2):
    return FlowRecord(60.0, src, sport, dst, 4444, proto, packets, octets)


def test_longest_prefix_wins(prefix_table):
    """Test that the most specific covering prefix decides the AS."""
    assert prefix_table.lookup("10.1.2.3") == 200
    assert prefix_table.lookup("10.2.0.1") == 100


def test_unmapped_address_is_as_zero(prefix_table):
    """Test that an uncovered address maps to the AS 0 sentinel."""
    assert prefix_table.lookup("192.168.0.1") == 0


def test_reverse_lookup(prefix_table):
    """Test that reverse returns exactly the prefixes of an AS."""
    assert prefix_table.reverse(100) == {"10.0.0.0/8"}
    assert prefix_table.reverse(999) == set()


def test_duplicate_prefix_last_wins():
    """Test that a repeated prefix keeps the last AS and updates the reverse index."""
    table = load_prefix_table(io.StringIO("10.0.0.0/8 100\n10.0.0.0/8 101\n"))
    assert table.lookup("10.9.9.9") == 101
    assert table.reverse(100) == set()
    assert table.reverse(101) == {"10.0.0.0/8"}
    assert len(table) == 1


def test_malformed_lines_counted():
    """Test that malformed lines are skipped and counted."""
    text = "# comment\n10.0.0.0/8 100\nnot-a-prefix 5\n10.1.0.0/16\n10.2.0.0/16 x\n\n"
    table = load_prefix_table(io.StringIO(text))
    assert table.malformed == 3
    assert len(table) == 1


def test_host_bits_normalized():
    """Test that a prefix with host bits set is stored in network form."""
    table = load_prefix_table(io.StringIO("10.1.2.3/16 7\n"))
    assert table.reverse(7) == {"10.1.0.0/16"}


def test_empty_table_is_config_error():
    """Test that a table without entries is rejected."""
    with pytest.raises(ConfigError):
        load_prefix_table(io.StringIO("# nothing here\n"))


def test_lookup_matches_brute_force():
    """Test that lookups agree with a linear longest-prefix scan."""
    rng = np.random.Generator(np.random.PCG64(3))
    table = PrefixTable()
    entries = []
    for asn in range(1, 300):
        length = int(rng.integers(8, 25))
        address = ipaddress.IPv4Address(int(rng.integers(0, 2 ** 32)))
        network = ipaddress.IPv4Network(f"{address}/{length}", strict=False)
        table.add(str(network), asn)
        entries = [(n, a) for n, a in entries if n != network] + [(network, asn)]
    for value in rng.integers(0, 2 ** 32, size=2000):
        address = ipaddress.IPv4Address(int(value))
        covering = [(n.prefixlen, a) for n, a in entries if address in n]
        expected = max(covering)[1] if covering else 0
        assert table.lookup(str(address)) == expected


def test_map_flow(prefix_table):
    """Test that map_flow resolves both endpoints."""
    as_flow = map_flow(flow(), prefix_table)
    assert (as_flow.src_as, as_flow.dst_as, as_flow.src_port, as_flow.bytes) == (200, 2354, 123, 1000)


def test_map_flow_both_unmapped(prefix_table):
    """Test that unmapped endpoints still yield an AsFlow under AS 0."""
    as_flow = map_flow(flow(src="172.16.0.1", dst="172.16.0.2"), prefix_table)
    assert (as_flow.src_as, as_flow.dst_as) == (0, 0)


def test_mapper_stage_filters_and_counts(prefix_table):
    """Test that the mapper drops non-UDP, applies sampling and counts unmapped IPs."""
    mapper = FlowMapper(prefix_table, SamplingConfig(10))
    assert mapper.process(flow(proto=6)) == []
    [as_flow] = mapper.process(flow(src="172.16.0.1"))
    assert as_flow.bytes == 10_000
    assert mapper.counters["non_udp_dropped"] == 1
    assert mapper.counters["unmapped_ips"] == 1


def test_mapper_table_swap(prefix_table):
    """Test that lookups after a swap use only the new table."""
    mapper = FlowMapper(prefix_table)
    mapper.swap_table(load_prefix_table(io.StringIO("10.0.0.0/8 555\n")))
    [as_flow] = mapper.process(flow())
    assert as_flow.src_as == 555
    assert as_flow.dst_as == 0
