"""Frame/datagram channels and the evidence capture shared by every probe layer.

A channel is an ordered, possibly lossy duplex pipe of byte frames. The
in-process pair replaces the powerline modem at the desk; the UDP variants
carry the same frames between processes or toward a modem bridge. SDP uses the
same interface for its datagrams.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple

from ccs_audit.wire_constants import HOMEPLUG_ETHERTYPE, SDP_MULTICAST_GROUP, SDP_SERVER_PORT

logger = logging.getLogger(__name__)

LossPredicate = Callable[[int, bytes], bool]
Summarizer = Callable[[bytes], Dict[str, Any]]

DIRECTION_TX = "tx"
DIRECTION_RX = "rx"
DIRECTION_LOCAL = "local"

LAYER_MME = "mme"
LAYER_SDP = "sdp"
LAYER_V2GTP = "v2gtp"

_PCAP_MAGIC = 0xA1B2C3D4
_PCAP_LINKTYPE_ETHERNET = 1
_PCAP_LINKTYPE_USER0 = 147
_UDP_MAX_DATAGRAM = 65535


class FrameChannel(Protocol):
    def send(self, frame: bytes) -> None: ...

    def receive(self, timeout: float) -> Optional[bytes]: ...

    def close(self) -> None: ...


class QueueChannel:
    """One end of an in-process duplex channel.

    Args:
        inbox: Queue this end reads from.
        outbox: Queue this end writes to.
        drop: Optional predicate `(send_index, frame) -> bool`; true drops the
            frame, which is how loss is injected deterministically.
        name: Label used in debug logs.

    Example:
        >>> ev_end, evse_end = inproc_pair()
        >>> ev_end.send(b"x"); evse_end.receive(timeout=0.1)
        b'x'
    """

    def __init__(
        self,
        inbox: "queue.Queue[bytes]",
        outbox: "queue.Queue[bytes]",
        drop: Optional[LossPredicate] = None,
        name: str = "",
    ) -> None:
        self._inbox = inbox
        self._outbox = outbox
        self._drop = drop
        self._sent = 0
        self._closed = False
        self.name = name

    def send(self, frame: bytes) -> None:
        if self._closed:
            return
        index = self._sent
        self._sent += 1
        if self._drop is not None and self._drop(index, frame):
            logger.debug("%s dropped frame #%d (%d bytes)", self.name, index, len(frame))
            return
        self._outbox.put(bytes(frame))

    def receive(self, timeout: float) -> Optional[bytes]:
        if self._closed:
            return None
        try:
            return self._inbox.get(timeout=max(0.0, timeout))
        except queue.Empty:
            return None

    def close(self) -> None:
        self._closed = True


def inproc_pair(
    ev_loss: Optional[LossPredicate] = None,
    evse_loss: Optional[LossPredicate] = None,
) -> Tuple[QueueChannel, QueueChannel]:
    """Return connected `(ev_end, evse_end)` queue channels."""

    to_evse: "queue.Queue[bytes]" = queue.Queue()
    to_ev: "queue.Queue[bytes]" = queue.Queue()
    ev_end = QueueChannel(inbox=to_ev, outbox=to_evse, drop=ev_loss, name="ev")
    evse_end = QueueChannel(inbox=to_evse, outbox=to_ev, drop=evse_loss, name="evse")
    return ev_end, evse_end


class UdpFrameChannel:
    """Frames carried one per UDP datagram.

    The remote address may be left unset; it is then learned from the first
    datagram received, which lets a responder answer whoever spoke first.
    """

    def __init__(
        self,
        local: Tuple[Any, ...] = ("127.0.0.1", 0),
        remote: Optional[Tuple[Any, ...]] = None,
        family: int = socket.AF_INET,
    ) -> None:
        self._sock = socket.socket(family, socket.SOCK_DGRAM)
        self._sock.bind(local)
        self.remote = remote

    @property
    def local_address(self) -> Tuple[Any, ...]:
        return self._sock.getsockname()

    def send(self, frame: bytes) -> None:
        if self.remote is None:
            logger.debug("udp channel has no peer yet; frame dropped")
            return
        self._sock.sendto(frame, self.remote)

    def receive(self, timeout: float) -> Optional[bytes]:
        self._sock.settimeout(max(0.001, timeout))
        try:
            data, sender = self._sock.recvfrom(_UDP_MAX_DATAGRAM)
        except (socket.timeout, BlockingIOError):
            return None
        except OSError:
            return None
        if self.remote is None:
            self.remote = sender
        return data

    def close(self) -> None:
        self._sock.close()


def udp_pair(host: str = "127.0.0.1") -> Tuple[UdpFrameChannel, UdpFrameChannel]:
    """Return `(ev_end, evse_end)` joined over localhost UDP."""

    evse_end = UdpFrameChannel(local=(host, 0))
    ev_end = UdpFrameChannel(local=(host, 0), remote=evse_end.local_address)
    evse_end.remote = ev_end.local_address
    return ev_end, evse_end


class RawEthernetChannel:
    """HomePlug frames on a Linux network interface (AF_PACKET, ethertype 0x88E1).

    Needs CAP_NET_RAW; only used in live mode.
    """

    def __init__(self, interface: str, ethertype: int = HOMEPLUG_ETHERTYPE) -> None:
        family = getattr(socket, "AF_PACKET", None)
        if family is None:
            raise OSError("raw ethernet sockets need Linux AF_PACKET support")
        self._sock = socket.socket(family, socket.SOCK_RAW, socket.htons(ethertype))
        self._sock.bind((interface, 0))

    def send(self, frame: bytes) -> None:
        self._sock.send(frame)

    def receive(self, timeout: float) -> Optional[bytes]:
        self._sock.settimeout(max(0.001, timeout))
        try:
            return self._sock.recv(_UDP_MAX_DATAGRAM)
        except (socket.timeout, BlockingIOError):
            return None

    def close(self) -> None:
        self._sock.close()


def sdp_multicast_channel(interface: str) -> UdpFrameChannel:
    """Live SDP client socket: sends to ff02::1%iface port 15118."""

    scope_id = socket.if_nametoindex(interface)
    channel = UdpFrameChannel(local=("::", 0, 0, scope_id), family=socket.AF_INET6)
    channel.remote = (SDP_MULTICAST_GROUP, SDP_SERVER_PORT, 0, scope_id)
    return channel


@dataclass(frozen=True)
class CaptureRecord:
    """One captured frame: direction, layer, wall time, raw hex, decoded summary."""

    seq: int
    direction: str
    layer: str
    timestamp: float
    hex: str
    summary: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class FrameCapture:
    """Thread-safe, append-only transcript of every frame a session touched."""

    def __init__(self, clock: Callable[[], float] = time.time) -> None:
        self._clock = clock
        self._lock = threading.Lock()
        self._records: List[CaptureRecord] = []

    def record(
        self,
        direction: str,
        layer: str,
        data: bytes,
        summary: Optional[Dict[str, Any]] = None,
    ) -> CaptureRecord:
        with self._lock:
            entry = CaptureRecord(
                seq=len(self._records),
                direction=direction,
                layer=layer,
                timestamp=self._clock(),
                hex=bytes(data).hex(),
                summary=dict(summary or {}),
            )
            self._records.append(entry)
        return entry

    def records(self, layer: Optional[str] = None) -> List[CaptureRecord]:
        with self._lock:
            items = list(self._records)
        return [item for item in items if layer is None or item.layer == layer]

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(item.to_dict(), sort_keys=True) + "\n" for item in self.records()
        )

    def write_jsonl(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    def write_pcap(self, path: Path, layers: Sequence[str] = (LAYER_MME,)) -> Path:
        """Dump raw frames of `layers` as a classic pcap file.

        MME frames are Ethernet frames; any other layer is written with the
        USER0 link type since the bytes are bare V2GTP payloads.
        """

        linktype = (
            _PCAP_LINKTYPE_ETHERNET
            if tuple(layers) == (LAYER_MME,)
            else _PCAP_LINKTYPE_USER0
        )
        chunks = [struct.pack("<IHHiIII", _PCAP_MAGIC, 2, 4, 0, 0, 65535, linktype)]
        for item in self.records():
            if item.layer not in layers or item.direction == DIRECTION_LOCAL:
                continue
            data = bytes.fromhex(item.hex)
            seconds = int(item.timestamp)
            micros = int(round((item.timestamp - seconds) * 1_000_000)) % 1_000_000
            chunks.append(struct.pack("<IIII", seconds, micros, len(data), len(data)))
            chunks.append(data)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(chunks))
        return path


class CapturingChannel:
    """Channel wrapper that records each sent and received frame exactly once."""

    def __init__(
        self,
        channel: FrameChannel,
        capture: FrameCapture,
        layer: str,
        summarize: Optional[Summarizer] = None,
    ) -> None:
        self._channel = channel
        self._capture = capture
        self._layer = layer
        self._summarize = summarize

    def _summary(self, frame: bytes) -> Dict[str, Any]:
        return self._summarize(frame) if self._summarize is not None else {}

    def send(self, frame: bytes) -> None:
        self._capture.record(
            direction=DIRECTION_TX,
            layer=self._layer,
            data=frame,
            summary=self._summary(frame),
        )
        self._channel.send(frame)

    def receive(self, timeout: float) -> Optional[bytes]:
        frame = self._channel.receive(timeout=timeout)
        if frame is not None:
            self._capture.record(
                direction=DIRECTION_RX,
                layer=self._layer,
                data=frame,
                summary=self._summary(frame),
            )
        return frame

    def close(self) -> None:
        self._channel.close()
