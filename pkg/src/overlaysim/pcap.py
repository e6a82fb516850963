"""Classic libpcap capture files (microsecond timestamps, Ethernet link type)."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from ipaddress import IPv4Address
from typing import BinaryIO, Iterator

from .codec import (ETH_HLEN, ETHERTYPE_IPV4, IPV4_HLEN, UDP_HLEN, EthernetHeader,
                    InnerFrame, Ipv4Header, UdpHeader, encode_frame)
from .topology import Topology, shared_vni

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1
SNAPLEN = 65535
_GLOBAL = struct.Struct("<IHHiIII")
_RECORD = struct.Struct("<IIII")
APP_PORT = 5201
CLIENT_NET = int(IPv4Address("10.0.0.0"))
SERVER_NET = int(IPv4Address("10.128.0.0"))


class PcapError(ValueError):
    pass


@dataclass(frozen=True)
class PcapRecord:
    ts_us: int
    data: bytes
    orig_len: int


class PcapWriter:
    def __init__(self, fh: BinaryIO, snaplen: int = SNAPLEN, linktype: int = LINKTYPE_ETHERNET):
        self.fh = fh
        self.snaplen = snaplen
        fh.write(_GLOBAL.pack(PCAP_MAGIC, 2, 4, 0, 0, snaplen, linktype))

    def write(self, data: bytes, ts_us: int) -> None:
        sec, usec = divmod(ts_us, 1_000_000)
        cap = data[: self.snaplen]
        self.fh.write(_RECORD.pack(sec, usec, len(cap), len(data)))
        self.fh.write(cap)


def read_pcap(fh: BinaryIO) -> Iterator[PcapRecord]:
    head = fh.read(_GLOBAL.size)
    if len(head) < _GLOBAL.size:
        raise PcapError("truncated global header")
    magic = struct.unpack("<I", head[:4])[0]
    if magic == PCAP_MAGIC:
        order = "<"
    elif magic == 0xD4C3B2A1:
        order = ">"
    else:
        raise PcapError(f"bad magic {magic:#010x}")
    _m, _vmaj, _vmin, _tz, _sig, _snap, linktype = struct.unpack(order + "IHHiIII", head)
    if linktype != LINKTYPE_ETHERNET:
        raise PcapError(f"unsupported link type {linktype}")
    rec = struct.Struct(order + "IIII")
    while True:
        h = fh.read(rec.size)
        if not h:
            return
        if len(h) < rec.size:
            raise PcapError("truncated record header")
        sec, usec, incl, orig = rec.unpack(h)
        data = fh.read(incl)
        if len(data) < incl:
            raise PcapError("truncated record")
        yield PcapRecord(sec * 1_000_000 + usec, data, orig)


def segment_frame(src_mac, dst_mac, src_ip: IPv4Address, dst_ip: IPv4Address,
                  segment_bytes: int, seq: int) -> InnerFrame:
    """An inner Ethernet/IPv4/UDP frame whose IP packet is ``segment_bytes`` long."""
    data_len = segment_bytes - IPV4_HLEN - UDP_HLEN
    if data_len < 0:
        raise ValueError(f"segment of {segment_bytes} bytes cannot hold IPv4 and UDP headers")
    data = bytes((seq + i) & 0xFF for i in range(data_len))
    ip = Ipv4Header(src_ip, dst_ip, segment_bytes, identification=seq & 0xFFFF, dont_fragment=True)
    udp = UdpHeader(APP_PORT, APP_PORT, UDP_HLEN + data_len)
    return InnerFrame(EthernetHeader(dst_mac, src_mac, ETHERTYPE_IPV4),
                      ip.pack() + udp.pack() + data)


def overlay_frames(topo: Topology, per_flow: int, segment_bytes: int = 1450,
                   tick_us: float = 10.0) -> Iterator[tuple[int, bytes, int]]:
    """The first ``per_flow`` tunnel frames of every client/server stream,
    interleaved one frame per flow per tick.

    Yields (timestamp µs, wire bytes, inner frame length).
    """
    if not topo.mode.encapsulates:
        raise PcapError(f"{topo.mode.value} sends no tunnel traffic")
    if per_flow < 0:
        raise ValueError("frame count must be non-negative")
    pairs = topo.pairs()
    for rnd in range(per_flow):
        for p, (src, dst) in enumerate(pairs):
            inner = segment_frame(src.mac, dst.mac, IPv4Address(CLIENT_NET + p + 1),
                                  IPv4Address(SERVER_NET + p + 1), segment_bytes, rnd)
            outer = topo.vteps[src.host].encapsulate(inner, shared_vni(src, dst),
                                                     topo.hosts[dst.host].vtep)
            yield round(rnd * tick_us), encode_frame(outer), ETH_HLEN + len(inner.payload)


def write_overlay_pcap(path, topo: Topology, per_flow: int, segment_bytes: int = 1450,
                       tick_us: float = 10.0) -> int:
    """Write the capture; returns the number of records."""
    frames = list(overlay_frames(topo, per_flow, segment_bytes, tick_us))
    with open(path, "wb") as fh:
        w = PcapWriter(fh)
        for ts, data, _inner in frames:
            w.write(data, ts)
    return len(frames)
