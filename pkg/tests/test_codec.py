from ipaddress import IPv4Address

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ones_complement_checksum
from overlaysim.codec import (
    ETHERTYPE_IPV4, VNI_MAX, VXLAN_OVERHEAD, VXLAN_PORT, BadIpVersion, ChecksumError,
    EthernetHeader, InnerFrame, Ipv4Header, MacAddress, NotVxlan, OuterFrame, OversizeFrame,
    TruncatedFrame, UdpHeader, UnsupportedIpv4, Vtep, VtepAddress, VniOutOfRange, decode_frame,
    encode_frame, flow_source_port, fnv1a_32, internet_checksum, vxlan_decapsulate,
    vxlan_encapsulate, with_vni_flag_cleared,
)

macs = st.binary(min_size=6, max_size=6).map(MacAddress)
ips = st.integers(0, 2**32 - 1).map(IPv4Address)
# IPv4 and VLAN-ish ethertypes excluded from the opaque-payload strategy
opaque_types = st.integers(0, 0xFFFF).filter(lambda t: t != ETHERTYPE_IPV4)
inner_frames = st.builds(
    lambda d, s, t, p: InnerFrame(EthernetHeader(d, s, t), p),
    macs, macs, opaque_types, st.binary(max_size=200),
)
vteps = st.builds(VtepAddress, ips, macs)
vnis = st.integers(0, VNI_MAX)

A = VtepAddress(IPv4Address("192.168.0.1"), MacAddress.parse("02:00:00:00:00:01"))
B = VtepAddress(IPv4Address("192.168.0.2"), MacAddress.parse("02:00:00:00:00:02"))


def inner(payload=b"", src="02:00:01:00:00:00", dst="02:00:02:00:00:00", ethertype=0x88B5):
    return InnerFrame(EthernetHeader(MacAddress.parse(dst), MacAddress.parse(src), ethertype), payload)


def test_header_only_frame_is_14_bytes():
    assert len(encode_frame(inner())) == 14


def test_checksum_matches_oracle_on_hand_built_header():
    hdr = Ipv4Header(IPv4Address("10.0.0.1"), IPv4Address("10.0.0.2"), 84, identification=0x1C46,
                     dont_fragment=True).pack()
    zeroed = hdr[:10] + b"\x00\x00" + hdr[12:]
    assert int.from_bytes(hdr[10:12], "big") == ones_complement_checksum(zeroed)
    assert ones_complement_checksum(hdr) == 0


def test_checksum_known_vector():
    # worked example header (45 00 00 73 00 00 40 00 40 11 .. .. c0 a8 00 01 c0 a8 00 c7)
    raw = bytes.fromhex("450000730000400040110000c0a80001c0a800c7")
    assert internet_checksum(raw) == 0xB861 == ones_complement_checksum(raw)


@settings(max_examples=300)
@given(st.binary(min_size=20, max_size=20))
def test_checksum_function_agrees_with_oracle(data):
    assert internet_checksum(data) == ones_complement_checksum(data)


@given(inner_frames)
def test_inner_round_trip(f):
    assert decode_frame(encode_frame(f)) == f


@given(inner_frames, vnis, vteps, vteps, st.integers(0, 0xFFFF))
def test_outer_round_trip_and_overhead(f, vni, src, dst, ident):
    outer = vxlan_encapsulate(f, vni, src, dst, ident)
    data = encode_frame(outer)
    assert len(data) == len(encode_frame(f)) + VXLAN_OVERHEAD == len(outer)
    back = decode_frame(data)
    assert back == outer
    assert ones_complement_checksum(data[14:34]) == 0
    assert encode_frame(back) == data


@given(st.binary(max_size=13))
def test_short_input_truncated(data):
    with pytest.raises(TruncatedFrame):
        decode_frame(data)


def test_13_bytes_truncated():
    with pytest.raises(TruncatedFrame):
        decode_frame(bytes(13))


def test_vni_flag_cleared_decodes_as_plain_udp():
    outer = vxlan_encapsulate(inner(b"abc"), 5, A, B)
    data = encode_frame(with_vni_flag_cleared(outer))
    got = decode_frame(data)
    assert isinstance(got, InnerFrame)
    assert got.eth == outer.eth
    udp = UdpHeader.unpack(got.payload[20:])
    assert udp.dst_port == VXLAN_PORT
    assert got.payload[28] == 0x00  # flags octet


def test_flag_cleared_outer_rejected_by_decap():
    outer = with_vni_flag_cleared(vxlan_encapsulate(inner(), 1, A, B))
    with pytest.raises(NotVxlan):
        vxlan_decapsulate(outer)


def test_vni_bounds():
    vxlan_encapsulate(inner(), VNI_MAX, A, B)
    with pytest.raises(VniOutOfRange):
        vxlan_encapsulate(inner(), 2**24, A, B)


def test_same_mac_pair_same_source_port():
    f1 = inner(b"x" * 10)
    f2 = inner(b"y" * 500)
    assert flow_source_port(f1) == flow_source_port(f2)
    assert 49152 <= flow_source_port(f1) <= 65535
    assert vxlan_encapsulate(f1, 1, A, B).udp.src_port == vxlan_encapsulate(f2, 1, A, B).udp.src_port


def test_fnv1a_reference_values():
    # published FNV-1a 32-bit test vectors
    assert fnv1a_32(b"") == 0x811C9DC5
    assert fnv1a_32(b"a") == 0xE40C292C
    assert fnv1a_32(b"foobar") == 0xBF9CF968


def test_vni1_tunnel_between_hosts():
    """Host-0 container in VNI 1 reaches Host-n container through VNI 1."""
    host0, hostn = Vtep(A), Vtep(B)
    f = inner(b"hello")
    outer = host0.encapsulate(f, 1, hostn.address)
    vni, got = hostn.decapsulate(decode_frame(encode_frame(outer)))
    assert (vni, got) == (1, f)


@given(inner_frames, vnis)
def test_decap_inverts_encap(f, vni):
    assert vxlan_decapsulate(vxlan_encapsulate(f, vni, A, B)) == (vni, f)


def test_vtep_identification_increments():
    v = Vtep(A)
    ids = [v.encapsulate(inner(), 1, B).ip.identification for _ in range(3)]
    assert ids == [0, 1, 2]


def test_mtu_enforced():
    f = inner(b"\x00" * 1450)
    outer = vxlan_encapsulate(f, 1, A, B)
    assert len(encode_frame(outer, mtu=1500)) == 1514
    with pytest.raises(OversizeFrame):
        encode_frame(vxlan_encapsulate(inner(b"\x00" * 1451), 1, A, B), mtu=1500)


def _corrupt(data: bytes, offset: int, value: int) -> bytes:
    b = bytearray(data)
    b[offset] = value
    return bytes(b)


def test_bad_ipv4_inputs():
    data = encode_frame(vxlan_encapsulate(inner(), 1, A, B))
    with pytest.raises(ChecksumError):
        decode_frame(_corrupt(data, 14 + 8, data[22] ^ 0xFF))  # ttl
    with pytest.raises(BadIpVersion):
        decode_frame(_corrupt(data, 14, 0x65))
    with pytest.raises(UnsupportedIpv4):
        decode_frame(_corrupt(data, 14, 0x46))
    with pytest.raises(TruncatedFrame):
        decode_frame(data[:40])


def test_fragment_rejected():
    hdr = bytearray(Ipv4Header(IPv4Address("1.1.1.1"), IPv4Address("2.2.2.2"), 28).pack())
    hdr[6] = 0x20  # more fragments
    hdr[10:12] = b"\x00\x00"
    hdr[10:12] = internet_checksum(bytes(hdr)).to_bytes(2, "big")
    with pytest.raises(UnsupportedIpv4):
        Ipv4Header.unpack(bytes(hdr))


def test_outer_frame_length_formula():
    f = inner(b"z" * 100)
    o = vxlan_encapsulate(f, 7, A, B)
    assert isinstance(o, OuterFrame) and len(o) == len(f) + 50
