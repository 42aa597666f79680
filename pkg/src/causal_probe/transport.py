"""Wire protocol v1 client: newline-delimited JSON over stdio or TCP.

One JSON object per line, UTF-8.  Requests carry monotonically increasing
ids; responses may arrive out of order up to the pipelining depth, and a
reader thread demultiplexes them by id.  Frames travel as base64 of
row-major RGB8 bytes.
"""

from __future__ import annotations

import base64
import json
import os
import queue
import shlex
import socket
import subprocess
import threading

import numpy as np

from .baselines import IntrospectionPayload
from .errors import ProtocolError, TransportError
from .imageops import to_u8
from .policy import PROTOCOL_VERSION, Policy, PolicySession
from .types import MultiViewObservation

HANDSHAKE_TIMEOUT = 10.0
ACT_TIMEOUT = 60.0
DEFAULT_PIPELINING = 8

THREADS_ENV = "CAUSAL_PROBE_THREADS"


def pipelining_depth(default: int = DEFAULT_PIPELINING) -> int:
    cap = os.environ.get(THREADS_ENV)
    if not cap:
        return default
    try:
        return max(1, min(default, int(cap)))
    except ValueError:
        return default


def encode_obs(obs: MultiViewObservation) -> dict:
    out = {}
    for view, img in obs.views.items():
        u8 = to_u8(img)
        if u8.ndim == 2:
            u8 = np.repeat(u8[:, :, None], 3, axis=2)
        h, w = u8.shape[:2]
        out[view] = {"w": w, "h": h, "rgb_b64": base64.b64encode(u8.tobytes()).decode("ascii")}
    return out


def decode_f32(b64: str, shape) -> np.ndarray:
    raw = base64.b64decode(b64)
    expected = 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise ProtocolError(f"payload of {len(raw)} bytes does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


class StdioTransport:
    """Child process speaking the protocol on its stdin/stdout."""

    def __init__(self, command: str):
        self.proc = subprocess.Popen(
            shlex.split(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
        )

    def send_line(self, line: bytes) -> None:
        if self.proc.poll() is not None:
            raise TransportError(f"policy server exited with code {self.proc.returncode}")
        try:
            self.proc.stdin.write(line + b"\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise TransportError(f"failed to write to policy server: {e}") from e

    def read_line(self) -> bytes:
        return self.proc.stdout.readline()

    def close(self) -> None:
        try:
            if self.proc.stdin:
                self.proc.stdin.close()
            self.proc.wait(timeout=5)
        except Exception:
            self.proc.kill()


class TcpTransport:
    def __init__(self, host: str, port: int, connect_timeout: float = HANDSHAKE_TIMEOUT):
        try:
            self.sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as e:
            raise TransportError(f"cannot connect to {host}:{port}: {e}") from e
        self.sock.settimeout(None)
        self._rfile = self.sock.makefile("rb")

    def send_line(self, line: bytes) -> None:
        try:
            self.sock.sendall(line + b"\n")
        except OSError as e:
            raise TransportError(f"failed to write to policy server: {e}") from e

    def read_line(self) -> bytes:
        return self._rfile.readline()

    def close(self) -> None:
        try:
            self._rfile.close()
            self.sock.close()
        except OSError:
            pass


class RemotePolicy(Policy):
    """Protocol v1 client with id-correlated pipelining."""

    def __init__(self, transport, depth: int | None = None,
                 handshake_timeout: float = HANDSHAKE_TIMEOUT,
                 act_timeout: float = ACT_TIMEOUT):
        self._transport = transport
        self._depth = depth if depth is not None else pipelining_depth()
        self._act_timeout = act_timeout
        self._next_id = 1
        self._id_lock = threading.Lock()
        self._pending: dict[int, queue.Queue] = {}
        self._closed = False
        self.hello_raw = b""

        self._transport.send_line(json.dumps(
            {"type": "hello", "version": PROTOCOL_VERSION}, separators=(",", ":")
        ).encode("utf-8"))
        reply_line = self._read_with_timeout(handshake_timeout)
        if not reply_line:
            raise TransportError("policy server closed the stream during handshake")
        self.hello_raw = reply_line.rstrip(b"\n")
        try:
            hello = json.loads(self.hello_raw)
        except json.JSONDecodeError as e:
            raise ProtocolError(f"malformed hello: {self.hello_raw!r}") from e
        if hello.get("type") != "hello":
            raise ProtocolError(f"expected hello, got {hello.get('type')!r}")
        server_version = hello.get("version")
        if server_version != PROTOCOL_VERSION:
            raise ProtocolError(
                f"protocol version mismatch: client speaks {PROTOCOL_VERSION}, "
                f"server speaks {server_version}"
            )
        self.session = PolicySession(
            action_dim=int(hello["action_dim"]),
            chunk_len=int(hello.get("chunk_len", 1)),
            view_names=tuple(hello.get("views", ())),
            introspection_supported=bool(hello.get("introspection", False)),
            pipelining_depth=self._depth,
        )
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_with_timeout(self, timeout: float) -> bytes:
        box: queue.Queue = queue.Queue(maxsize=1)

        def read():
            try:
                box.put(self._transport.read_line())
            except Exception as e:  # noqa: BLE001 - forwarded to the caller
                box.put(e)

        t = threading.Thread(target=read, daemon=True)
        t.start()
        try:
            got = box.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"handshake timed out after {timeout}s") from None
        if isinstance(got, Exception):
            raise TransportError(f"handshake read failed: {got}") from got
        return got

    def _read_loop(self) -> None:
        while True:
            line = self._transport.read_line()
            if not line:
                self._fail_all(TransportError("policy server closed the stream"))
                return
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError:
                continue
            msg_id = msg.get("id")
            if isinstance(msg_id, int):
                q = self._pending.get(msg_id)
                if q is not None:
                    q.put(msg)

    def _fail_all(self, exc: Exception) -> None:
        self._closed = True
        for q in list(self._pending.values()):
            q.put(exc)

    def _new_id(self) -> int:
        with self._id_lock:
            rid = self._next_id
            self._next_id += 1
            return rid

    def request(self, payload: dict, timeout: float | None = None) -> dict:
        """Send one id-stamped request and wait for its reply."""
        if self._closed:
            raise TransportError("session is closed after a transport failure")
        rid = self._new_id()
        payload = dict(payload, id=rid)
        q: queue.Queue = queue.Queue(maxsize=1)
        self._pending[rid] = q
        try:
            self._transport.send_line(json.dumps(payload, separators=(",", ":")).encode("utf-8"))
            try:
                got = q.get(timeout=timeout if timeout is not None else self._act_timeout)
            except queue.Empty:
                raise TransportError(f"request id={rid} timed out") from None
        finally:
            self._pending.pop(rid, None)
        if isinstance(got, Exception):
            raise got
        if got.get("type") == "error":
            raise TransportError(f"server error for id={rid}: {got.get('message')}")
        return got

    def _parse_action(self, msg: dict) -> np.ndarray:
        action = np.asarray(msg.get("action"), dtype=np.float64)
        if action.ndim == 1:
            action = action[None, :]
        if action.ndim != 2 or action.shape[1] != self.session.action_dim:
            raise ProtocolError(
                f"action shape {action.shape} does not match session dim "
                f"{self.session.action_dim}"
            )
        return action

    def act(self, obs: MultiViewObservation, instruction: str = "") -> np.ndarray:
        msg = self.request(
            {"type": "act", "instruction": instruction, "obs": encode_obs(obs)}
        )
        if msg.get("type") != "action":
            raise ProtocolError(f"expected action reply, got {msg.get('type')!r}")
        return self._parse_action(msg)

    def act_batch(self, obs_list, instruction: str = "") -> list[np.ndarray]:
        """Pipelined queries: up to the session depth stay in flight."""
        obs_list = list(obs_list)
        results: list[np.ndarray | None] = [None] * len(obs_list)
        window: list[tuple[int, int, queue.Queue]] = []  # (position, id, queue)

        def drain_one():
            pos, rid, q = window.pop(0)
            try:
                got = q.get(timeout=self._act_timeout)
            except queue.Empty:
                raise TransportError(f"request id={rid} timed out") from None
            finally:
                self._pending.pop(rid, None)
            if isinstance(got, Exception):
                raise got
            if got.get("type") == "error":
                raise TransportError(f"server error for id={rid}: {got.get('message')}")
            if got.get("type") != "action":
                raise ProtocolError(f"expected action reply, got {got.get('type')!r}")
            results[pos] = self._parse_action(got)

        for pos, obs in enumerate(obs_list):
            if self._closed:
                raise TransportError("session is closed after a transport failure")
            rid = self._new_id()
            q: queue.Queue = queue.Queue(maxsize=1)
            self._pending[rid] = q
            self._transport.send_line(json.dumps(
                {"type": "act", "id": rid, "instruction": instruction,
                 "obs": encode_obs(obs)}, separators=(",", ":")
            ).encode("utf-8"))
            window.append((pos, rid, q))
            if len(window) >= self._depth:
                drain_one()
        while window:
            drain_one()
        return results  # ordered by request position, not arrival

    def introspect(self, obs: MultiViewObservation, instruction: str = "") -> IntrospectionPayload:
        msg = self.request(
            {"type": "introspect", "instruction": instruction, "obs": encode_obs(obs)}
        )
        if msg.get("type") != "introspection":
            raise ProtocolError(f"expected introspection reply, got {msg.get('type')!r}")
        n = int(msg["n_tokens"])
        dim = int(msg["dim"])
        attention = decode_f32(msg["attention_b64"], (n, n))
        embeddings = decode_f32(msg["embeddings_b64"], (n, dim))
        spatial = {view: [int(i) for i in idx] for view, idx in msg.get("spatial_map", {}).items()}
        return IntrospectionPayload(attention=attention, embeddings=embeddings,
                                    spatial_token_map=spatial)

    def close(self) -> None:
        self._closed = True
        self._transport.close()


def connect(endpoint: str, depth: int | None = None) -> Policy:
    """Build a policy from an endpoint spec.

    synth:<spec.json>   in-process analytic policy
    stdio:<command>     spawn a subprocess server
    tcp:<host>:<port>   network server
    """
    kind, _, rest = endpoint.partition(":")
    if kind == "synth":
        from .policy import load_synth_policy

        return load_synth_policy(rest)
    if kind == "stdio":
        return RemotePolicy(StdioTransport(rest), depth=depth)
    if kind == "tcp":
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise TransportError(f"malformed tcp endpoint {endpoint!r}")
        return RemotePolicy(TcpTransport(host, int(port)), depth=depth)
    raise TransportError(f"unknown policy endpoint kind {kind!r}")
