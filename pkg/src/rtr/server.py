"""Streaming server: one port, two transports, one session per connection.

The listener sniffs the first bytes of each connection: an HTTP "GET "
upgrade request selects the web-transport lane (the browser client), any
other byte stream is the raw lane. Both lanes carry identical wire-protocol
bytes; the web lane just wraps each message in one binary transport frame.

Per connection the server speaks first (HELLO with version, frame dims, and
supported modes), builds one session, then processes client messages
strictly in order, so control messages always take effect at the next frame
boundary. Sessions share model parameters read-only and nothing else.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import socket
import struct
import threading
import time

from . import protocol as P
from .checkpoint import arrays_to_params, load_checkpoint
from .conditioning import RV2V_INSTRUCTION_ID, VocabularyError
from .stream import StreamSession
from .tensor import NumericError

__all__ = ["StreamServer", "serve"]

log = logging.getLogger("rtr.server")

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class _RawTransport:
    def __init__(self, sock):
        self.sock = sock

    def send(self, data: bytes):
        self.sock.sendall(data)

    def recv(self, reader) -> bool:
        data = self.sock.recv(65536)
        if not data:
            return False
        reader.feed(data)
        return True

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class _WSTransport:
    """Server side of the web-transport lane.

    One wire message per binary transport frame outbound; inbound frames
    are unmasked and fed to the reader whole. Fragmented messages are not
    accepted (our client never fragments).
    """

    def __init__(self, sock):
        self.sock = sock
        self._buf = bytearray()

    def handshake(self, initial: bytes) -> bool:
        data = bytearray(initial)
        while b"\r\n\r\n" not in data:
            chunk = self.sock.recv(4096)
            if not chunk:
                return False
            data.extend(chunk)
        head, _, rest = bytes(data).partition(b"\r\n\r\n")
        self._buf.extend(rest)
        key = None
        for line in head.split(b"\r\n")[1:]:
            name, _, value = line.partition(b":")
            if name.strip().lower() == b"sec-websocket-key":
                key = value.strip().decode("ascii")
        if key is None:
            self.sock.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
            return False
        accept = base64.b64encode(
            hashlib.sha1((key + _WS_GUID).encode("ascii")).digest()
        ).decode("ascii")
        self.sock.sendall(
            b"HTTP/1.1 101 Switching Protocols\r\n"
            b"Upgrade: websocket\r\n"
            b"Connection: Upgrade\r\n"
            b"Sec-WebSocket-Accept: " + accept.encode("ascii") + b"\r\n\r\n")
        return True

    def send(self, data: bytes):
        n = len(data)
        if n < 126:
            head = struct.pack("!BB", 0x82, n)
        elif n < 1 << 16:
            head = struct.pack("!BBH", 0x82, 126, n)
        else:
            head = struct.pack("!BBQ", 0x82, 127, n)
        self.sock.sendall(head + data)

    def _parse_frames(self, reader) -> bool:
        while True:
            if len(self._buf) < 2:
                return True
            b0, b1 = self._buf[0], self._buf[1]
            if not b0 & 0x80:
                raise P.ProtocolError("fragmented transport frame")
            opcode = b0 & 0x0F
            masked = bool(b1 & 0x80)
            ln = b1 & 0x7F
            off = 2
            if ln == 126:
                if len(self._buf) < 4:
                    return True
                (ln,) = struct.unpack_from("!H", self._buf, 2)
                off = 4
            elif ln == 127:
                if len(self._buf) < 10:
                    return True
                (ln,) = struct.unpack_from("!Q", self._buf, 2)
                off = 10
            mask = b""
            if masked:
                if len(self._buf) < off + 4:
                    return True
                mask = bytes(self._buf[off:off + 4])
                off += 4
            if len(self._buf) < off + ln:
                return True
            payload = bytes(self._buf[off:off + ln])
            del self._buf[:off + ln]
            if masked:
                payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
            if opcode in (0x01, 0x02):
                reader.feed(payload)
            elif opcode == 0x08:
                return False
            elif opcode == 0x09:  # ping -> pong
                self.sock.sendall(struct.pack("!BB", 0x8A, len(payload)) + payload)

    def recv(self, reader) -> bool:
        if self._buf and not self._parse_frames(reader):
            return False
        data = self.sock.recv(65536)
        if not data:
            return False
        self._buf.extend(data)
        return self._parse_frames(reader)

    def close(self):
        try:
            self.sock.sendall(struct.pack("!BB", 0x88, 0))
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class StreamServer:
    def __init__(self, params, cfg, *, seed=0, schedule=None,
                 preserve_ref=True):
        self.params = params
        self.cfg = cfg
        self.seed = seed
        self.schedule = schedule
        self.preserve_ref = preserve_ref
        self._listener = None
        self._threads = []
        self._stopping = threading.Event()

    # ---------------------------------------------------------- lifecycle

    def start(self, host="127.0.0.1", port=0):
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)
        return self

    @property
    def port(self) -> int:
        return self._listener.getsockname()[1]

    def stop(self):
        self._stopping.set()
        if self._listener is not None:
            self._listener.close()
        for t in self._threads:
            t.join(timeout=10.0)

    def _accept_loop(self):
        while not self._stopping.is_set():
            try:
                sock, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._handle_conn, args=(sock, addr),
                                 daemon=True)
            t.start()
            self._threads.append(t)

    # -------------------------------------------------------- per session

    def _sniff(self, sock) -> bytes:
        """First bytes within a short deadline, or b"" for a silent client.

        Web-transport clients always open with their upgrade request, so
        silence means a raw client waiting for our HELLO; time out quickly
        and default to the raw lane rather than deadlocking on a peer that
        is itself waiting for the server to speak first.
        """
        deadline = time.monotonic() + 0.3
        head = b""
        while time.monotonic() < deadline:
            sock.settimeout(max(0.01, deadline - time.monotonic()))
            try:
                head = sock.recv(4, socket.MSG_PEEK)
            except socket.timeout:
                break
            if not head or len(head) >= 4:
                break
            time.sleep(0.005)  # partial peek: bytes still trickling in
        sock.settimeout(None)
        return head

    def _handle_conn(self, sock, addr):
        log.info("connection from %s", addr)
        try:
            head = self._sniff(sock)
            if head == b"GET ":
                transport = _WSTransport(sock)
                if not transport.handshake(sock.recv(65536)):
                    sock.close()
                    return
            else:
                transport = _RawTransport(sock)
            self._session_loop(transport)
        except Exception as exc:
            log.info("connection %s dropped: %s", addr, exc)
            sock.close()

    def _session_loop(self, transport):
        cfg = self.cfg
        h, w = cfg.latent_h * 2, cfg.latent_w * 2
        transport.send(P.encode_message(
            P.MSG_HELLO, P.encode_hello(h, w, P.MODE_TV2V | P.MODE_RV2V)))
        session = StreamSession(self.params, cfg, "tv2v", [], seed=self.seed,
                                schedule=self.schedule,
                                preserve_ref=self.preserve_ref)
        reader = P.MessageReader()
        alive = True
        while alive:
            if not transport.recv(reader):
                break
            for mtype, payload in reader:
                if not self._handle_message(transport, session, h, w,
                                            mtype, payload):
                    alive = False
                    break
        transport.close()

    def _handle_message(self, transport, session, h, w, mtype, payload) -> bool:
        """Returns False when the connection must close."""

        def err(code, text):
            transport.send(P.encode_message(P.MSG_ERROR,
                                            P.encode_error(code, text)))

        if mtype == P.MSG_FRAME_IN:
            want = h * w * 3 * 4
            if len(payload) != want:
                err(P.ERR_SIZE,
                    f"frame payload {len(payload)} bytes, expected {want}")
                return True
            try:
                out = session.process_frame(P.decode_frame(payload, h, w))
            except NumericError as exc:
                err(P.ERR_NUMERIC, f"session failed: {exc}")
                return False
            transport.send(P.encode_message(P.MSG_FRAME_OUT,
                                            P.encode_frame(out)))
            return True

        if mtype == P.MSG_SET_PROMPT:
            try:
                ids = P.decode_set_prompt(payload)
            except P.ProtocolError as exc:
                err(P.ERR_SIZE, str(exc))
                return True
            try:
                session.set_condition("tv2v", ids)
            except (ValueError, VocabularyError) as exc:
                err(P.ERR_INVALID, str(exc))
            return True

        if mtype == P.MSG_SET_REFERENCE:
            want = h * w * 3 * 4
            if len(payload) != want:
                err(P.ERR_SIZE,
                    f"reference payload {len(payload)} bytes, expected {want}")
                return True
            try:
                session.set_condition("rv2v", [RV2V_INSTRUCTION_ID],
                                      ref_frame=P.decode_frame(payload, h, w))
            except (ValueError, VocabularyError) as exc:
                err(P.ERR_INVALID, str(exc))
            return True

        if mtype == P.MSG_STATS:
            st = session.stats()
            transport.send(P.encode_message(
                P.MSG_STATS,
                P.encode_stats(st["frames"], st["mean_ms"], st["p95_ms"])))
            return True

        if mtype in (P.MSG_FRAME_OUT, P.MSG_ERROR, P.MSG_HELLO):
            err(P.ERR_INVALID, f"unexpected client message type {mtype:#04x}")
            return True

        err(P.ERR_UNKNOWN_TYPE, f"unknown message type {mtype:#04x}")
        return True


def serve(ckpt_path, host, port, *, seed=0, schedule=None, preserve_ref=True):
    """Load a checkpoint and serve until interrupted (CLI entry)."""
    cfg, arrays = load_checkpoint(ckpt_path)
    params = arrays_to_params(arrays)
    for p in params.values():
        p.requires_grad = False
    server = StreamServer(params, cfg, seed=seed, schedule=schedule,
                          preserve_ref=preserve_ref)
    server.start(host, port)
    log.info("serving on %s:%d", host, server.port)
    return server
