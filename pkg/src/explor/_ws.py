"""Minimal RFC 6455 WebSocket client on a blocking socket.

Covers exactly what the DevTools wire protocol needs: text frames both ways,
fragmentation on receive, ping/pong, clean close. Client frames are masked
as the RFC requires; no extensions are negotiated. Implemented on the
standard library because no websocket package is available in this
environment.
"""

from __future__ import annotations

import base64
import hashlib
import os
import socket
import struct
from urllib.parse import urlsplit

_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_CONT = 0x0
OP_TEXT = 0x1
OP_BINARY = 0x2
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA


class WebSocketError(Exception):
    pass


class ConnectionClosed(WebSocketError):
    pass


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionClosed("socket closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def encode_frame(opcode: int, payload: bytes, mask: bool = True, fin: bool = True) -> bytes:
    header = bytearray()
    header.append((0x80 if fin else 0) | opcode)
    length = len(payload)
    mask_bit = 0x80 if mask else 0
    if length < 126:
        header.append(mask_bit | length)
    elif length < 1 << 16:
        header.append(mask_bit | 126)
        header += struct.pack(">H", length)
    else:
        header.append(mask_bit | 127)
        header += struct.pack(">Q", length)
    if mask:
        key = os.urandom(4)
        header += key
        payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
    return bytes(header) + payload


def decode_frame(sock: socket.socket) -> tuple[bool, int, bytes]:
    """Read one frame; returns (fin, opcode, payload). Unmasks when masked."""
    first, second = _read_exact(sock, 2)
    fin = bool(first & 0x80)
    opcode = first & 0x0F
    masked = bool(second & 0x80)
    length = second & 0x7F
    if length == 126:
        (length,) = struct.unpack(">H", _read_exact(sock, 2))
    elif length == 127:
        (length,) = struct.unpack(">Q", _read_exact(sock, 8))
    key = _read_exact(sock, 4) if masked else None
    payload = _read_exact(sock, length) if length else b""
    if key:
        payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
    return fin, opcode, payload


def handshake_accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + _GUID).encode()).digest()
    return base64.b64encode(digest).decode()


class WebSocketClient:
    """Blocking client connection to one ws:// endpoint.

    Reads go through an internal buffer: frames the server coalesces with
    its handshake response (or with each other) must not be lost.
    """

    def __init__(self, url: str, timeout: float = 10.0):
        parts = urlsplit(url)
        if parts.scheme != "ws":
            raise WebSocketError(f"unsupported scheme {parts.scheme!r}")
        host = parts.hostname or "127.0.0.1"
        port = parts.port or 80
        resource = parts.path or "/"
        if parts.query:
            resource += f"?{parts.query}"
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._sock.settimeout(timeout)
        self._buffer = b""
        self._handshake(host, port, resource)

    def _handshake(self, host: str, port: int, resource: str) -> None:
        key = base64.b64encode(os.urandom(16)).decode()
        request = (
            f"GET {resource} HTTP/1.1\r\n"
            f"Host: {host}:{port}\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Key: {key}\r\n"
            "Sec-WebSocket-Version: 13\r\n"
            "\r\n"
        )
        self._sock.sendall(request.encode())
        response = b""
        while b"\r\n\r\n" not in response:
            chunk = self._sock.recv(4096)
            if not chunk:
                raise WebSocketError("connection closed during handshake")
            response += chunk
        head, _, surplus = response.partition(b"\r\n\r\n")
        self._buffer = surplus  # early frames may ride along with the 101
        head_text = head.decode("latin-1")
        status = head_text.split("\r\n")[0]
        if " 101 " not in f" {status} ":
            raise WebSocketError(f"handshake rejected: {status}")
        accept = None
        for line in head_text.split("\r\n")[1:]:
            name, _, value = line.partition(":")
            if name.strip().lower() == "sec-websocket-accept":
                accept = value.strip()
        if accept != handshake_accept_key(key):
            raise WebSocketError("handshake accept key mismatch")

    def _read_exact(self, n: int) -> bytes:
        while len(self._buffer) < n:
            chunk = self._sock.recv(65536)
            if not chunk:
                raise ConnectionClosed("socket closed mid-frame")
            self._buffer += chunk
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out

    def _decode_frame(self) -> tuple[bool, int, bytes]:
        first, second = self._read_exact(2)
        fin = bool(first & 0x80)
        opcode = first & 0x0F
        masked = bool(second & 0x80)
        length = second & 0x7F
        if length == 126:
            (length,) = struct.unpack(">H", self._read_exact(2))
        elif length == 127:
            (length,) = struct.unpack(">Q", self._read_exact(8))
        key = self._read_exact(4) if masked else None
        payload = self._read_exact(length) if length else b""
        if key:
            payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
        return fin, opcode, payload

    def send_text(self, payload: str) -> None:
        self._sock.sendall(encode_frame(OP_TEXT, payload.encode("utf-8")))

    def recv_text(self, timeout: float) -> str:
        """Next complete text message; socket.timeout propagates on silence."""
        self._sock.settimeout(timeout)
        fragments: list[bytes] = []
        while True:
            fin, opcode, payload = self._decode_frame()
            if opcode == OP_PING:
                self._sock.sendall(encode_frame(OP_PONG, payload))
                continue
            if opcode == OP_PONG:
                continue
            if opcode == OP_CLOSE:
                try:
                    self._sock.sendall(encode_frame(OP_CLOSE, b""))
                except OSError:
                    pass
                raise ConnectionClosed("server closed the connection")
            if opcode in (OP_TEXT, OP_BINARY) or (opcode == OP_CONT and fragments):
                fragments.append(payload)
                if fin:
                    return b"".join(fragments).decode("utf-8")
                continue
            raise WebSocketError(f"unexpected opcode {opcode}")

    def close(self) -> None:
        try:
            self._sock.sendall(encode_frame(OP_CLOSE, b""))
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass
