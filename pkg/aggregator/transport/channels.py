"""
Point-to-point channels. Each carries whole frames in FIFO order for one
directed entity pair. The socket channel is plain TCP on the loopback
interface: the deployment assumes the channels between entities are already
secure, so nothing here encrypts in transit.
"""
from collections import deque
import logging
import queue
import socket
import threading

from aggregator.errors import FrameError, TruncatedFrame
from aggregator.transport.frames import PREFIX, frame_length


logger = logging.getLogger(__name__)

RECV_TIMEOUT_SECONDS = 120


class Channel:
    def __init__(self, name):
        self.name = name
        self.bytes_sent = 0
        self.frames_sent = 0
        self._lock = threading.Lock()

    def _count(self, frame):
        with self._lock:
            # Frame body only; the 4-byte length prefix is not counted
            self.bytes_sent += len(frame) - PREFIX.size
            self.frames_sent += 1

    def send(self, frame):
        raise NotImplementedError

    def recv(self):
        raise NotImplementedError

    def close(self):
        pass


class MemoryChannel(Channel):
    def __init__(self, name):
        super().__init__(name)
        self.frames = deque()

    def send(self, frame):
        self._count(frame)
        self.frames.append(bytes(frame))

    def recv(self):
        if not self.frames:
            raise FrameError(f'Channel {self.name} is empty')
        return self.frames.popleft()


def recvbytes(sock, length):
    got = 0
    data = []
    while got < length:
        chunk = sock.recv(min(length - got, 1 << 20))
        if not chunk:
            return None
        got += len(chunk)
        data.append(chunk)
    return b''.join(data)


class FrameReader(threading.Thread):
    def __init__(self, sock, inbox, max_size):
        self.sock = sock
        self.inbox = inbox
        self.max_size = max_size
        threading.Thread.__init__(self, daemon=True)

    def run(self):
        while True:
            try:
                prefix = recvbytes(self.sock, PREFIX.size)
                if prefix is None:
                    return
                length = frame_length(prefix, self.max_size)
                body = recvbytes(self.sock, length)
                if body is None:
                    self.inbox.put(TruncatedFrame('Peer closed the connection mid-frame'))
                    return
                self.inbox.put(prefix + body)
            except FrameError as error:
                self.inbox.put(error)
                return
            except OSError:
                return


class SocketChannel(Channel):
    def __init__(self, name, max_size=None):
        super().__init__(name)
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.bind(('127.0.0.1', 0))
        listener.listen(1)
        self.sender = socket.create_connection(listener.getsockname())
        self.receiver, _ = listener.accept()
        listener.close()
        self.inbox = queue.Queue()
        self.reader = FrameReader(self.receiver, self.inbox, max_size)
        self.reader.start()

    def send(self, frame):
        self._count(frame)
        self.sender.sendall(frame)

    def recv(self):
        try:
            item = self.inbox.get(timeout=RECV_TIMEOUT_SECONDS)
        except queue.Empty:
            raise FrameError(f'Timed out waiting on channel {self.name}')
        if isinstance(item, Exception):
            raise item
        return item

    def close(self):
        for sock in (self.sender, self.receiver):
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
