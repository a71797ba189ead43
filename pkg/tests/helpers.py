"""Raw-socket peers for exercising the router without the node library."""

import socket
import time

from mroffload import wire


class RawPeer:
    """Speaks the wire format directly; can stop reading to simulate a stalled client."""

    def __init__(self, address, rcvbuf: int | None = None):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        if rcvbuf:
            self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, rcvbuf)
        self.sock.connect(address)
        self.sock.settimeout(5.0)
        self.decoder = wire.StreamDecoder()
        self.inbox = []

    def send(self, packet):
        self.sock.sendall(wire.encode_packet(packet))

    def control(self, op, topic=wire.NODE_TOPIC, **fields):
        self.send(wire.control_packet(op, topic, **fields))

    def expect(self, op, timeout=5.0):
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            for i, pkt in enumerate(self.inbox):
                if pkt.header.payload_type is wire.PayloadType.CONTROL and wire.parse_control(pkt)["op"] == op:
                    return self.inbox.pop(i)
            self.inbox += self.decoder.feed(self.sock.recv(65536))
        raise TimeoutError(op)

    def handshake(self, name="raw"):
        self.control("hello", name=name)
        return wire.parse_control(self.expect("welcome"))

    def subscribe(self, topic):
        self.control("subscribe", topic)
        self.expect("suback")

    def read_data(self, n, timeout=10.0):
        """Next ``n`` non-control packets."""
        deadline = time.monotonic() + timeout
        out = []
        while len(out) < n:
            self.inbox = [p for p in self.inbox if p.header.payload_type is not wire.PayloadType.CONTROL]
            take = self.inbox[: n - len(out)]
            out += take
            self.inbox = self.inbox[len(take):]
            if len(out) >= n:
                break
            if time.monotonic() > deadline:
                raise TimeoutError(f"got {len(out)} of {n}")
            self.inbox += self.decoder.feed(self.sock.recv(1 << 20))
        return out

    def close(self):
        self.sock.close()


def wait_until(pred, timeout=5.0, step=0.01):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(step)
    return pred()
