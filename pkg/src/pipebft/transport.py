"""TCP mesh with length-prefixed framing.

Connections are persistent and identified by an 8-byte hello (magic plus the
peer's identity).  Replicas form a full mesh where the lower id dials the
higher; clients dial every replica.  Reads are owned by input threads (one
dedicated to client-origin connections, the rest splitting replica peers);
writes are owned by output threads, each draining its own queue and
coalescing frames per connection into single socket writes.  No socket is
read and written by the same thread.

A muted mesh keeps receiving and processing but silently drops every
outbound frame; local self-delivery is a queue bypass and ignores muting.
"""

from __future__ import annotations

import select
import selectors
import socket
import struct
import threading
import time

from .messages import MalformedFrame, UnknownTag, decode_body
from .pipeline import UtilizationRegistry, WorkQueue

HELLO = struct.Struct(">2sHI")
HELLO_MAGIC = b"PB"
MAX_FRAME = 64 << 20
RECV_SIZE = 1 << 18


class PeerUnreachable(ConnectionError):
    pass


class Connection:
    """One live peer link: socket, reassembly buffer, owning output thread."""

    __slots__ = ("sock", "peer_id", "buf", "out_idx", "alive")

    def __init__(self, sock: socket.socket, peer_id: int, out_idx: int):
        self.sock = sock
        self.peer_id = peer_id
        self.buf = bytearray()
        self.out_idx = out_idx
        self.alive = True


def extract_frames(buf: bytearray) -> list[bytes]:
    """Pull every complete frame out of a stream buffer (mutates the buffer)."""
    frames = []
    off = 0
    blen = len(buf)
    while blen - off >= 4:
        (length,) = struct.unpack_from(">I", buf, off)
        if length > MAX_FRAME or length < 1:
            raise MalformedFrame(f"frame length {length} out of bounds")
        end = off + 4 + length
        if end > blen:
            break
        frames.append(bytes(buf[off:end]))
        off = end
    if off:
        del buf[:off]
    return frames


class PeerTable:
    """identity -> connection, plus the static output-thread assignment."""

    def __init__(self, num_output_threads: int):
        self._conns: dict[int, Connection] = {}
        self._lock = threading.Lock()
        self.num_output_threads = num_output_threads

    def assign(self, peer_id: int) -> int:
        # peers split evenly across output threads
        return peer_id % self.num_output_threads

    def add(self, conn: Connection) -> bool:
        """Register; duplicate identities keep the existing connection."""
        with self._lock:
            existing = self._conns.get(conn.peer_id)
            if existing is not None and existing.alive:
                return False
            self._conns[conn.peer_id] = conn
            return True

    def remove(self, conn: Connection) -> None:
        with self._lock:
            if self._conns.get(conn.peer_id) is conn:
                del self._conns[conn.peer_id]

    def get(self, peer_id: int) -> Connection | None:
        return self._conns.get(peer_id)

    def ids(self) -> list[int]:
        with self._lock:
            return sorted(self._conns)

    def connections(self) -> list[Connection]:
        with self._lock:
            return list(self._conns.values())


class Mesh:
    """Framed, identity-addressed messaging over persistent TCP links."""

    def __init__(self, my_id: int, n_replicas: int, on_message,
                 input_replica_threads: int = 2, output_threads: int = 2,
                 registry: UtilizationRegistry | None = None,
                 counters: dict | None = None, redial: bool = True):
        self.my_id = my_id
        self.n = n_replicas
        self.on_message = on_message  # (sender_id, msg, frame_bytes) -> None
        self.counters = counters if counters is not None else {}
        self.registry = registry or UtilizationRegistry()
        self.peers = PeerTable(output_threads)
        self.muted = False
        self.redial = redial
        self._stop = threading.Event()
        self._listener: socket.socket | None = None
        self._out_queues = [WorkQueue() for _ in range(output_threads)]
        # input thread 0 is client-facing (and runs the acceptor); the rest
        # split replica peers
        self._in_regs = [WorkQueue() for _ in range(1 + input_replica_threads)]
        self._threads: list[threading.Thread] = []
        self._dial_targets: dict[int, tuple[str, int]] = {}
        self._lock = threading.Lock()

    # -- lifecycle ---------------------------------------------------------------

    def start(self, listen_addr: tuple[str, int] | None = None) -> int:
        port = 0
        if listen_addr is not None:
            self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self._listener.bind(listen_addr)
            self._listener.listen(128)
            self._listener.setblocking(False)
            port = self._listener.getsockname()[1]
        for i, regs in enumerate(self._in_regs):
            role = "input_client" if i == 0 else f"input_replica_{i - 1}"
            t = threading.Thread(target=self._input_loop, args=(i, regs, role),
                                 name=f"{role}@{self.my_id}", daemon=True)
            t.start()
            self._threads.append(t)
        for i, q in enumerate(self._out_queues):
            t = threading.Thread(target=self._output_loop, args=(i, q),
                                 name=f"output_{i}@{self.my_id}", daemon=True)
            t.start()
            self._threads.append(t)
        return port

    def stop(self) -> None:
        self._stop.set()
        for q in self._out_queues:
            q.put(None)
        for t in self._threads:
            t.join(timeout=2.0)
        for conn in self.peers.connections():
            try:
                conn.sock.close()
            except OSError:
                pass
        if self._listener is not None:
            self._listener.close()

    # -- dialing -------------------------------------------------------------------

    def connect(self, peer_id: int, addr: tuple[str, int], retry_window: float = 10.0) -> None:
        """Dial a peer, retrying within the window; raises PeerUnreachable."""
        self._dial_targets[peer_id] = addr
        deadline = time.monotonic() + retry_window
        last_err: Exception | None = None
        while time.monotonic() < deadline and not self._stop.is_set():
            try:
                sock = socket.create_connection(addr, timeout=2.0)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.sendall(HELLO.pack(HELLO_MAGIC, self.my_id, 0))
                hello = self._recv_exact(sock, HELLO.size)
                magic, peer, _ = HELLO.unpack(hello)
                if magic != HELLO_MAGIC or peer != peer_id:
                    raise ConnectionError(f"handshake mismatch: expected {peer_id}, got {peer}")
                self._install(sock, peer_id)
                return
            except OSError as exc:
                last_err = exc
                time.sleep(0.1)
        raise PeerUnreachable(f"peer {peer_id} at {addr}: {last_err}")

    @staticmethod
    def _recv_exact(sock: socket.socket, count: int) -> bytes:
        data = b""
        while len(data) < count:
            chunk = sock.recv(count - len(data))
            if not chunk:
                raise ConnectionError("peer closed during handshake")
            data += chunk
        return data

    def connect_mesh(self, addresses: dict[int, tuple[str, int]], retry_window: float = 10.0) -> None:
        """Establish this node's outbound share of the full replica mesh.

        Replica a dials replica b iff a < b, so every pair has exactly one
        deterministic dialer and simultaneous-dial duplicates cannot arise.
        Clients (ids >= n) dial every replica.
        """
        if self.my_id < self.n:
            targets = [r for r in range(self.n) if r > self.my_id]
        else:
            targets = list(range(self.n))
        for peer in targets:
            self.connect(peer, addresses[peer], retry_window)

    def _install(self, sock: socket.socket, peer_id: int) -> Connection | None:
        sock.setblocking(False)
        conn = Connection(sock, peer_id, self.peers.assign(peer_id))
        if not self.peers.add(conn):
            sock.close()
            self._count("dup_connection_rejected")
            return None
        # client-origin connections stay on input thread 0; replicas split
        if peer_id < self.n and len(self._in_regs) > 1:
            idx = 1 + peer_id % (len(self._in_regs) - 1)
        else:
            idx = 0
        self._in_regs[idx].put(conn)
        return conn

    # -- sending -------------------------------------------------------------------

    def send_frame(self, peer_id: int, frame: bytes) -> None:
        if peer_id == self.my_id:
            # local bypass: deliver without touching the network or mute state
            tag = frame[4]
            self.on_message(self.my_id, decode_body(tag, frame[5:]), frame)
            return
        if self.muted:
            self._count("muted_dropped")
            return
        conn = self.peers.get(peer_id)
        if conn is None or not conn.alive:
            self._count("send_peer_down")
            return
        self._out_queues[conn.out_idx].put((conn, frame))

    def broadcast_frame(self, peer_ids, frame: bytes) -> None:
        for pid in peer_ids:
            if pid != self.my_id:
                self.send_frame(pid, frame)

    # -- threads ---------------------------------------------------------------------

    def _count(self, key: str, by: int = 1) -> None:
        self.counters[key] = self.counters.get(key, 0) + by

    def _send_all(self, sock: socket.socket, data: bytes) -> None:
        """sendall for non-blocking sockets: waits for writability instead of
        failing when the kernel buffer is full."""
        view = memoryview(data)
        while view:
            try:
                sent = sock.send(view)
                view = view[sent:]
            except BlockingIOError:
                if self._stop.is_set():
                    raise OSError("shutting down") from None
                select.select([], [sock], [], 0.1)

    def _output_loop(self, idx: int, queue: WorkQueue) -> None:
        clock = self.registry.clock(f"output_{idx}")
        pending: dict[Connection, list[bytes]] = {}
        while not self._stop.is_set():
            items = queue.drain(timeout=0.2)
            if not items:
                continue
            t0 = clock.begin()
            for item in items:
                if item is None:
                    continue
                conn, frame = item
                pending.setdefault(conn, []).append(frame)
            for conn, frames in pending.items():
                if not conn.alive:
                    self._count("send_peer_down", len(frames))
                    continue
                if self.muted:
                    self._count("muted_dropped", len(frames))
                    continue
                data = frames[0] if len(frames) == 1 else b"".join(frames)
                try:
                    self._send_all(conn.sock, data)
                    self._count("bytes_out", len(data))
                    self._count("frames_out", len(frames))
                except OSError:
                    self._drop(conn)
            pending.clear()
            clock.end(t0)

    def _input_loop(self, idx: int, regs: WorkQueue, role: str) -> None:
        clock = self.registry.clock(role)
        sel = selectors.DefaultSelector()
        if idx == 0 and self._listener is not None:
            sel.register(self._listener, selectors.EVENT_READ, "listener")
        half_open: dict[socket.socket, bytearray] = {}
        while not self._stop.is_set():
            for item in regs.drain(timeout=0):
                try:
                    sel.register(item.sock, selectors.EVENT_READ, item)
                except (KeyError, ValueError, OSError):
                    pass
            events = sel.select(timeout=0.05)
            if not events:
                continue
            t0 = clock.begin()
            for key, _ in events:
                what = key.data
                if what == "listener":
                    self._accept(sel, half_open)
                elif isinstance(what, socket.socket) or what is None:
                    continue
                elif isinstance(what, Connection):
                    self._service(sel, what)
                else:  # pending handshake
                    self._handshake(sel, key.fileobj, half_open)
            clock.end(t0)
        sel.close()

    def _accept(self, sel, half_open) -> None:
        while True:
            try:
                sock, _ = self._listener.accept()
            except (BlockingIOError, OSError):
                return
            sock.setblocking(False)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            half_open[sock] = bytearray()
            sel.register(sock, selectors.EVENT_READ, "handshake")

    def _handshake(self, sel, sock, half_open) -> None:
        buf = half_open.get(sock)
        if buf is None:
            return
        try:
            data = sock.recv(HELLO.size - len(buf))
        except OSError:
            data = b""
        if not data:
            sel.unregister(sock)
            del half_open[sock]
            sock.close()
            return
        buf.extend(data)
        if len(buf) < HELLO.size:
            return
        sel.unregister(sock)
        del half_open[sock]
        magic, peer_id, _ = HELLO.unpack(bytes(buf))
        if magic != HELLO_MAGIC:
            self._count("bad_handshake")
            sock.close()
            return
        try:
            sock.sendall(HELLO.pack(HELLO_MAGIC, self.my_id, 0))
        except OSError:
            sock.close()
            return
        self._install(sock, peer_id)

    def _service(self, sel, conn: Connection) -> None:
        try:
            data = conn.sock.recv(RECV_SIZE)
        except BlockingIOError:
            return
        except OSError:
            data = b""
        if not data:
            self._unregister(sel, conn)
            self._drop(conn)
            return
        conn.buf.extend(data)
        self._count("bytes_in", len(data))
        try:
            frames = extract_frames(conn.buf)
        except MalformedFrame:
            self._count("malformed_frames")
            self._unregister(sel, conn)
            self._drop(conn)
            return
        for frame in frames:
            try:
                msg = decode_body(frame[4], frame[5:])
            except (MalformedFrame, UnknownTag):
                self._count("malformed_frames")
                self._unregister(sel, conn)
                self._drop(conn)
                return
            self._count("frames_in")
            self.on_message(conn.peer_id, msg, frame)

    def _unregister(self, sel, conn: Connection) -> None:
        try:
            sel.unregister(conn.sock)
        except (KeyError, ValueError):
            pass

    def _drop(self, conn: Connection) -> None:
        if not conn.alive:
            return
        conn.alive = False
        self.peers.remove(conn)
        self._count("disconnects")
        try:
            conn.sock.close()
        except OSError:
            pass
        # the canonical dialer redials replicas that drop mid-run
        if (self.redial and not self._stop.is_set() and conn.peer_id in self._dial_targets
                and (self.my_id >= self.n or self.my_id < conn.peer_id)):
            addr = self._dial_targets[conn.peer_id]
            threading.Thread(target=self._redial, args=(conn.peer_id, addr),
                             daemon=True).start()

    def _redial(self, peer_id: int, addr) -> None:
        try:
            self.connect(peer_id, addr, retry_window=5.0)
            self._count("reconnects")
        except PeerUnreachable:
            self._count("reconnect_failed")

    def connected_ids(self) -> list[int]:
        return self.peers.ids()
