"""Length-prefixed JSON over TCP, serving a :class:`VictimOracle` as a mock MLaaS endpoint.

Each message is a 4-byte big-endian length followed by that many bytes of
UTF-8 JSON. Requests::

    {"op": "query", "mode": "HL"|"SL", "shape": [B, D], "data": [floats]}
    {"op": "status"}

Responses are ``{"labels": [...]}``, ``{"probs": [[...]]}``,
``{"spent": n, "budget": n}`` or ``{"error": name, ...}``. Floats are written
with 17 significant digits so they survive the round trip exactly.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading

import numpy as np

from dfme.nn import DimensionError
from dfme.victim import HL, SL, BudgetExhausted, VictimOracle, VictimResponse, check_mode

log = logging.getLogger(__name__)

_HEADER = struct.Struct(">I")
MAX_MESSAGE = 1 << 30


def _encode(obj) -> str:
    if isinstance(obj, float):
        if not np.isfinite(obj):
            raise ValueError(f"cannot encode non-finite float {obj!r}")
        return format(obj, ".17g")
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_encode(v) for v in obj) + "]"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def send_message(sock: socket.socket, obj: dict) -> None:
    payload = _encode(obj).encode("utf-8")
    sock.sendall(_HEADER.pack(len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            return None
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def recv_message(sock: socket.socket) -> dict | None:
    header = _recv_exact(sock, _HEADER.size)
    if header is None:
        return None
    (length,) = _HEADER.unpack(header)
    if length > MAX_MESSAGE:
        raise ValueError(f"message of {length} bytes exceeds limit")
    body = _recv_exact(sock, length)
    if body is None:
        raise ConnectionError("connection closed mid-message")
    return json.loads(body.decode("utf-8"))


def handle_request(oracle: VictimOracle, request: dict) -> dict:
    op = request.get("op")
    if op == "status":
        return {"spent": oracle.spent, "budget": oracle.budget}
    if op != "query":
        return {"error": "bad_request", "message": f"unknown op {op!r}"}
    try:
        mode = check_mode(str(request.get("mode", "")))
    except ValueError as exc:
        return {"error": "bad_request", "message": str(exc)}
    if mode != oracle.mode:
        return {"error": "mode_mismatch", "message": f"endpoint serves {oracle.mode.upper()}"}
    shape = request.get("shape")
    data = request.get("data")
    if not isinstance(shape, list) or len(shape) != 2 or not isinstance(data, list):
        return {"error": "bad_request", "message": "query needs shape [B, D] and flat data"}
    if len(data) != shape[0] * shape[1]:
        return {"error": "dimension", "message": f"shape {shape} does not match {len(data)} values"}
    batch = np.array(data, dtype=np.float64).reshape(shape)
    try:
        resp = oracle.query(batch)
    except BudgetExhausted as exc:
        return {"error": "budget_exhausted", "remaining": exc.remaining}
    except DimensionError as exc:
        return {"error": "dimension", "message": str(exc)}
    if resp.mode == HL:
        return {"labels": [int(v) for v in resp.labels]}
    return {"probs": resp.probs.tolist()}


class VictimServer(socketserver.ThreadingTCPServer):
    """One thread per client connection; requests are answered strictly one at a time."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], oracle: VictimOracle):
        self.oracle = oracle
        self.request_lock = threading.Lock()
        super().__init__(address, _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server: VictimServer = self.server
        while True:
            try:
                request = recv_message(self.request)
            except (ConnectionError, ValueError) as exc:
                log.warning("dropping client %s: %s", self.client_address, exc)
                return
            if request is None:
                return
            with server.request_lock:
                reply = handle_request(server.oracle, request)
            send_message(self.request, reply)


def make_server(oracle: VictimOracle, address: tuple[str, int] = ("127.0.0.1", 0)) -> VictimServer:
    """Bind a server; raises ``OSError`` if the address is unavailable."""
    return VictimServer(address, oracle)


def serve_victim(oracle: VictimOracle, address: tuple[str, int]) -> None:
    with make_server(oracle, address) as server:
        log.info("serving %s victim on %s:%d (budget %d)", oracle.mode.upper(),
                 *server.address, oracle.budget)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            log.info("shutting down")


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep:
        raise ValueError(f"endpoint must be HOST:PORT, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


class RemoteVictimOracle:
    """Client for :class:`VictimServer` with the same surface as :class:`VictimOracle`.

    The ledger lives on the server; ``spent`` and ``budget`` are read from it.
    """

    def __init__(self, address: tuple[str, int], mode: str = HL, timeout: float = 30.0):
        self.mode = check_mode(mode)
        self.address = address
        self._sock = socket.create_connection(address, timeout=timeout)
        self._budget = self.status()["budget"]

    def _call(self, request: dict) -> dict:
        send_message(self._sock, request)
        reply = recv_message(self._sock)
        if reply is None:
            raise ConnectionError("server closed the connection")
        return reply

    def status(self) -> dict:
        return self._call({"op": "status"})

    @property
    def budget(self) -> int:
        return self._budget

    @property
    def spent(self) -> int:
        return self.status()["spent"]

    @property
    def remaining(self) -> int:
        s = self.status()
        return s["budget"] - s["spent"]

    def query(self, batch: np.ndarray) -> VictimResponse:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2:
            raise DimensionError(f"query batch must be 2-D, got {list(batch.shape)}")
        reply = self._call({
            "op": "query",
            "mode": self.mode.upper(),
            "shape": list(batch.shape),
            "data": batch.ravel().tolist(),
        })
        if "error" in reply:
            if reply["error"] == "budget_exhausted":
                raise BudgetExhausted(reply.get("remaining", 0), batch.shape[0])
            if reply["error"] == "dimension":
                raise DimensionError(reply.get("message", ""))
            raise RuntimeError(f"victim endpoint error: {reply}")
        if "labels" in reply:
            return VictimResponse(HL, labels=np.array(reply["labels"], dtype=np.int64))
        return VictimResponse(SL, probs=np.array(reply["probs"], dtype=np.float64))

    def close(self) -> None:
        self._sock.close()

    def __enter__(self) -> "RemoteVictimOracle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

