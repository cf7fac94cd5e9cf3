from dataclasses import dataclass
import logging

from aggregator.errors import ArgumentError
from aggregator.transport.channels import MemoryChannel, SocketChannel
from aggregator.transport.frames import PREFIX, decode_frame, encode_frame, max_frame_bytes


logger = logging.getLogger(__name__)

S0 = 'S0'
S1 = 'S1'
TRANSPORTS = ('memory', 'socket')


def client_name(client_id):
    return f'C{client_id}'


def is_client(name):
    return name.startswith('C')


def link_of(src, dst):
    """Accounting link for a directed pair."""
    if is_client(src) and dst == S0:
        return 'c2s'
    if is_client(src) and dst == S1:
        return 'c2s1'
    if src == S0 and dst == S1:
        return 's0s1'
    if src == S1 and dst == S0:
        return 's1s0'
    if src == S0 and is_client(dst):
        return 's2c'
    return 'other'


@dataclass(frozen=True)
class Delivery:
    src: str
    dst: str
    frame: bytes

    @property
    def size(self):
        return len(self.frame) - PREFIX.size


class Network:
    def __init__(self, transport='memory', max_size=None):
        if transport not in TRANSPORTS:
            raise ArgumentError(f'Unknown transport {transport!r}, expected one of {TRANSPORTS}')
        self.transport = transport
        self.max_size = max_size or max_frame_bytes()
        self.channels = {}
        self.recording = None

    def channel(self, src, dst):
        key = (src, dst)
        if key not in self.channels:
            name = f'{src}->{dst}'
            if self.transport == 'socket':
                self.channels[key] = SocketChannel(name, self.max_size)
            else:
                self.channels[key] = MemoryChannel(name)
        return self.channels[key]

    def send(self, src, dst, msg):
        self.channel(src, dst).send(encode_frame(msg, self.max_size))

    def recv(self, src, dst):
        frame = self.channel(src, dst).recv()
        if self.recording is not None:
            self.recording.append(Delivery(src, dst, frame))
        return decode_frame(frame, self.max_size)

    def deliver(self, src, dst, msg):
        self.send(src, dst, msg)
        return self.recv(src, dst)

    def start_recording(self):
        self.recording = []

    def stop_recording(self):
        recorded, self.recording = self.recording or [], None
        return recorded

    def link_bytes(self):
        totals = {'c2s': 0, 'c2s1': 0, 's0s1': 0, 's1s0': 0, 's2c': 0, 'other': 0}
        for (src, dst), channel in self.channels.items():
            totals[link_of(src, dst)] += channel.bytes_sent
        return totals

    def close(self):
        for channel in self.channels.values():
            channel.close()
        self.channels = {}

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()
