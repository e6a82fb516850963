"""Ethernet / IPv4 / UDP / VXLAN frame codec.

Byte layouts follow RFC 894, RFC 791 (no options), RFC 768 and RFC 7348.
Everything here is a pure function over frozen dataclasses, so it is safe
to call from any thread.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from ipaddress import IPv4Address
from typing import Union

ETH_HLEN = 14
IPV4_HLEN = 20
UDP_HLEN = 8
VXLAN_HLEN = 8
VXLAN_OVERHEAD = ETH_HLEN + IPV4_HLEN + UDP_HLEN + VXLAN_HLEN  # 50

ETHERTYPE_IPV4 = 0x0800
IPPROTO_UDP = 17
VXLAN_PORT = 4789
VXLAN_FLAG_VNI = 0x08
VNI_MAX = (1 << 24) - 1
OUTER_TTL = 64
EPHEMERAL_LOW = 49152
EPHEMERAL_HIGH = 65535

FNV32_OFFSET = 0x811C9DC5
FNV32_PRIME = 0x01000193

_ETH = struct.Struct("!6s6sH")
_IPV4 = struct.Struct("!BBHHHBBH4s4s")
_UDP = struct.Struct("!HHHH")
_VXLAN = struct.Struct("!B3sI")


class CodecError(ValueError):
    """Base class for frame encode/decode failures."""


class TruncatedFrame(CodecError):
    pass


class ChecksumError(CodecError):
    pass


class BadIpVersion(CodecError):
    pass


class UnsupportedIpv4(CodecError):
    """IPv4 options or fragments, neither of which the dataplane produces."""


class OversizeFrame(CodecError):
    pass


class VniOutOfRange(CodecError):
    pass


class NotVxlan(CodecError):
    """Raised by decapsulation when the outer headers do not mark VXLAN."""


@dataclass(frozen=True, order=True)
class MacAddress:
    octets: bytes

    def __post_init__(self):
        if len(self.octets) != 6:
            raise ValueError(f"MAC address needs 6 octets, got {len(self.octets)}")

    @classmethod
    def parse(cls, text: str) -> "MacAddress":
        parts = text.replace("-", ":").split(":")
        if len(parts) != 6:
            raise ValueError(f"bad MAC address {text!r}")
        return cls(bytes(int(p, 16) for p in parts))

    @classmethod
    def broadcast(cls) -> "MacAddress":
        return cls(b"\xff" * 6)

    @classmethod
    def generated(cls, host: int, index: int) -> "MacAddress":
        """Deterministic unicast MAC with the locally-administered bit set."""
        if not (0 <= host < 256 and 0 <= index < 1 << 24):
            raise ValueError("host must fit one octet and index three")
        return cls(bytes([0x02, 0x00, host]) + index.to_bytes(3, "big"))

    @property
    def is_broadcast(self) -> bool:
        return self.octets == b"\xff" * 6

    @property
    def is_multicast(self) -> bool:
        return bool(self.octets[0] & 0x01)

    @property
    def is_local(self) -> bool:
        return bool(self.octets[0] & 0x02)

    def __str__(self) -> str:
        return ":".join(f"{b:02x}" for b in self.octets)


@dataclass(frozen=True)
class EthernetHeader:
    dst: MacAddress
    src: MacAddress
    ethertype: int

    def __post_init__(self):
        if not 0 <= self.ethertype <= 0xFFFF:
            raise ValueError("ethertype must fit 16 bits")

    def pack(self) -> bytes:
        return _ETH.pack(self.dst.octets, self.src.octets, self.ethertype)

    @classmethod
    def unpack(cls, data: bytes) -> "EthernetHeader":
        if len(data) < ETH_HLEN:
            raise TruncatedFrame(f"need {ETH_HLEN} bytes for Ethernet, have {len(data)}")
        dst, src, ethertype = _ETH.unpack_from(data)
        return cls(MacAddress(dst), MacAddress(src), ethertype)


def internet_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


@dataclass(frozen=True)
class Ipv4Header:
    src: IPv4Address
    dst: IPv4Address
    total_length: int
    protocol: int = IPPROTO_UDP
    identification: int = 0
    ttl: int = OUTER_TTL
    tos: int = 0
    dont_fragment: bool = False
    # Recomputed on every encode; kept only to report what was on the wire.
    checksum: int | None = field(default=None, compare=False)

    version = 4
    header_words = 5

    def pack(self) -> bytes:
        flags = 0x4000 if self.dont_fragment else 0
        args = [
            (self.version << 4) | self.header_words,
            self.tos,
            self.total_length,
            self.identification,
            flags,
            self.ttl,
            self.protocol,
            0,
            self.src.packed,
            self.dst.packed,
        ]
        raw = _IPV4.pack(*args)
        args[7] = internet_checksum(raw)
        return _IPV4.pack(*args)

    @classmethod
    def unpack(cls, data: bytes) -> "Ipv4Header":
        if len(data) < IPV4_HLEN:
            raise TruncatedFrame(f"need {IPV4_HLEN} bytes for IPv4, have {len(data)}")
        (ver_ihl, tos, total_length, ident, frag, ttl, proto, csum,
         src, dst) = _IPV4.unpack_from(data)
        if ver_ihl >> 4 != 4:
            raise BadIpVersion(f"IP version {ver_ihl >> 4}")
        if ver_ihl & 0x0F != cls.header_words:
            raise UnsupportedIpv4("IPv4 options are not supported")
        if internet_checksum(data[:IPV4_HLEN]) != 0:
            raise ChecksumError(f"IPv4 header checksum 0x{csum:04x} does not verify")
        if frag & 0x3FFF:
            raise UnsupportedIpv4("IPv4 fragments are not supported")
        if frag & 0x8000:
            raise UnsupportedIpv4("reserved IPv4 flag set")
        if total_length < IPV4_HLEN:
            raise CodecError(f"IPv4 total length {total_length} below header size")
        return cls(IPv4Address(src), IPv4Address(dst), total_length, proto,
                   ident, ttl, tos, bool(frag & 0x4000), csum)


@dataclass(frozen=True)
class UdpHeader:
    src_port: int
    dst_port: int
    length: int
    checksum: int = 0

    def pack(self) -> bytes:
        return _UDP.pack(self.src_port, self.dst_port, self.length, self.checksum)

    @classmethod
    def unpack(cls, data: bytes) -> "UdpHeader":
        if len(data) < UDP_HLEN:
            raise TruncatedFrame(f"need {UDP_HLEN} bytes for UDP, have {len(data)}")
        return cls(*_UDP.unpack_from(data))


@dataclass(frozen=True)
class VxlanHeader:
    vni: int
    flags: int = VXLAN_FLAG_VNI

    def __post_init__(self):
        if not 0 <= self.vni <= VNI_MAX:
            raise VniOutOfRange(f"VNI {self.vni} outside 0..{VNI_MAX}")

    @property
    def vni_valid(self) -> bool:
        return bool(self.flags & VXLAN_FLAG_VNI)

    def pack(self) -> bytes:
        # reserved octets are always written as zero
        return _VXLAN.pack(self.flags, b"\x00\x00\x00", self.vni << 8)

    @classmethod
    def unpack(cls, data: bytes) -> "VxlanHeader":
        if len(data) < VXLAN_HLEN:
            raise TruncatedFrame(f"need {VXLAN_HLEN} bytes for VXLAN, have {len(data)}")
        flags, _reserved, word = _VXLAN.unpack_from(data)
        return cls(word >> 8, flags)


@dataclass(frozen=True)
class InnerFrame:
    eth: EthernetHeader
    payload: bytes = b""

    def __len__(self) -> int:
        return ETH_HLEN + len(self.payload)


@dataclass(frozen=True)
class OuterFrame:
    eth: EthernetHeader
    ip: Ipv4Header
    udp: UdpHeader
    vxlan: VxlanHeader
    inner: InnerFrame
    # Ethernet trailer beyond the IPv4 total length (minimum-size padding).
    padding: bytes = b""

    def __len__(self) -> int:
        return VXLAN_OVERHEAD + len(self.inner) + len(self.padding)


Frame = Union[InnerFrame, OuterFrame]


@dataclass(frozen=True)
class VtepAddress:
    ip: IPv4Address
    mac: MacAddress


def encode_frame(frame: Frame, mtu: int | None = None) -> bytes:
    """Serialize a frame. ``mtu`` bounds the bytes after the Ethernet header."""
    if isinstance(frame, OuterFrame):
        inner = frame.inner.eth.pack() + frame.inner.payload
        udp_len = UDP_HLEN + VXLAN_HLEN + len(inner)
        if frame.udp.length != udp_len:
            raise CodecError(f"UDP length {frame.udp.length} != {udp_len}")
        if frame.ip.total_length != IPV4_HLEN + udp_len:
            raise CodecError(f"IPv4 total length {frame.ip.total_length} != {IPV4_HLEN + udp_len}")
        if frame.ip.total_length > 0xFFFF:
            raise OversizeFrame("IPv4 total length exceeds 65535")
        l3_len = frame.ip.total_length
        body = frame.ip.pack() + frame.udp.pack() + frame.vxlan.pack() + inner + frame.padding
    else:
        l3_len = len(frame.payload)
        body = frame.payload
    if mtu is not None and l3_len > mtu:
        raise OversizeFrame(f"{l3_len} bytes exceeds MTU {mtu}")
    return frame.eth.pack() + body


def decode_frame(data: bytes, vxlan_port: int = VXLAN_PORT) -> Frame:
    """Parse bytes into an OuterFrame when they carry valid VXLAN, else an InnerFrame."""
    data = bytes(data)
    eth = EthernetHeader.unpack(data)
    rest = data[ETH_HLEN:]
    if eth.ethertype != ETHERTYPE_IPV4:
        return InnerFrame(eth, rest)
    ip = Ipv4Header.unpack(rest)
    if ip.total_length > len(rest):
        raise TruncatedFrame(f"IPv4 total length {ip.total_length} exceeds {len(rest)} captured bytes")
    if ip.protocol != IPPROTO_UDP or ip.total_length < IPV4_HLEN + UDP_HLEN + VXLAN_HLEN:
        return InnerFrame(eth, rest)
    udp = UdpHeader.unpack(rest[IPV4_HLEN:])
    if udp.dst_port != vxlan_port:
        return InnerFrame(eth, rest)
    vx = VxlanHeader.unpack(rest[IPV4_HLEN + UDP_HLEN:])
    if not vx.vni_valid:
        return InnerFrame(eth, rest)
    if udp.length != ip.total_length - IPV4_HLEN:
        raise CodecError(f"UDP length {udp.length} disagrees with IPv4 total length")
    inner_raw = rest[IPV4_HLEN + UDP_HLEN + VXLAN_HLEN:ip.total_length]
    inner_eth = EthernetHeader.unpack(inner_raw)
    inner = InnerFrame(inner_eth, inner_raw[ETH_HLEN:])
    return OuterFrame(eth, ip, udp, vx, inner, rest[ip.total_length:])


def fnv1a_32(data: bytes) -> int:
    h = FNV32_OFFSET
    for b in data:
        h = ((h ^ b) * FNV32_PRIME) & 0xFFFFFFFF
    return h


def flow_source_port(inner: InnerFrame) -> int:
    """Outer UDP source port derived from the inner L2 header for ECMP entropy."""
    key = inner.eth.src.octets + inner.eth.dst.octets + inner.eth.ethertype.to_bytes(2, "big")
    span = EPHEMERAL_HIGH - EPHEMERAL_LOW + 1
    return EPHEMERAL_LOW + fnv1a_32(key) % span


def vxlan_encapsulate(inner: InnerFrame, vni: int, vtep_src: VtepAddress,
                      vtep_dst: VtepAddress, identification: int = 0,
                      vxlan_port: int = VXLAN_PORT) -> OuterFrame:
    if not 0 <= vni <= VNI_MAX:
        raise VniOutOfRange(f"VNI {vni} outside 0..{VNI_MAX}")
    udp_len = UDP_HLEN + VXLAN_HLEN + len(inner)
    return OuterFrame(
        eth=EthernetHeader(vtep_dst.mac, vtep_src.mac, ETHERTYPE_IPV4),
        ip=Ipv4Header(vtep_src.ip, vtep_dst.ip, IPV4_HLEN + udp_len,
                      identification=identification & 0xFFFF),
        udp=UdpHeader(flow_source_port(inner), vxlan_port, udp_len),
        vxlan=VxlanHeader(vni),
        inner=inner,
    )


def vxlan_decapsulate(outer: OuterFrame, vxlan_port: int = VXLAN_PORT) -> tuple[int, InnerFrame]:
    if not outer.vxlan.vni_valid:
        raise NotVxlan("VNI-valid flag is clear")
    if outer.udp.dst_port != vxlan_port:
        raise NotVxlan(f"UDP destination port {outer.udp.dst_port} is not {vxlan_port}")
    if len(outer.inner) < ETH_HLEN:
        raise TruncatedFrame("inner frame shorter than an Ethernet header")
    return outer.vxlan.vni, outer.inner


class Vtep:
    """A tunnel endpoint that stamps a running IPv4 identification counter."""

    def __init__(self, address: VtepAddress, vxlan_port: int = VXLAN_PORT):
        self.address = address
        self.vxlan_port = vxlan_port
        self._next_id = 0

    def encapsulate(self, inner: InnerFrame, vni: int, remote: VtepAddress) -> OuterFrame:
        frame = vxlan_encapsulate(inner, vni, self.address, remote,
                                  self._next_id, self.vxlan_port)
        self._next_id = (self._next_id + 1) & 0xFFFF
        return frame

    def decapsulate(self, outer: OuterFrame) -> tuple[int, InnerFrame]:
        return vxlan_decapsulate(outer, self.vxlan_port)


def with_vni_flag_cleared(outer: OuterFrame) -> OuterFrame:
    return replace(outer, vxlan=VxlanHeader(outer.vxlan.vni, outer.vxlan.flags & ~VXLAN_FLAG_VNI & 0xFF))
