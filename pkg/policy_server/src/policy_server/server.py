"""Protocol v1 request loop: newline-delimited JSON on stdin/stdout.

Three policy modes:
  echo_deterministic  hash-derived action, a pure function of the
                      observation payload bytes and instruction
  linear_toy          action components read ACT/SUP/NUIS region mean
                      intensities from a bound partition file
  plugin              delegates to a user-supplied act()/introspect()

A malformed request yields an error reply carrying the request id; the
process keeps serving.  The loop is single threaded, so replies leave in
request order unless a plugin opts into reordering via `reorder = True`.
"""

from __future__ import annotations

import base64
import hashlib
import importlib.util
import json
import struct
import sys
from dataclasses import dataclass, field

import numpy as np

PROTOCOL_VERSION = 1

ACT, SUP, NUIS = 1, 2, 3


@dataclass
class ServerConfig:
    action_dim: int = 8
    chunk_len: int = 16
    views: list[str] = field(default_factory=lambda: ["front", "overhead", "wrist"])
    mode: str = "echo_deterministic"
    partitions: dict[str, str] = field(default_factory=dict)  # view -> PGM path
    plugin_path: str = ""
    token_grid: int = 4

    def __post_init__(self):
        if self.action_dim < 1:
            raise ValueError(f"action_dim must be >= 1, got {self.action_dim}")
        if self.mode not in ("echo_deterministic", "linear_toy", "plugin"):
            raise ValueError(f"unknown mode {self.mode!r}")


def read_pgm(path: str) -> np.ndarray:
    """Minimal binary PGM (P5, maxval 255) reader."""
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        tokens.append(data[start:i])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: maxval must be 255")
    payload = data[i + 1 : i + 1 + w * h]
    if len(payload) != w * h:
        raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def decode_view(view_obj: dict) -> np.ndarray:
    w, h = int(view_obj["w"]), int(view_obj["h"])
    raw = base64.b64decode(view_obj["rgb_b64"])
    if len(raw) != w * h * 3:
        raise ValueError(f"rgb payload is {len(raw)} bytes, expected {w * h * 3}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)


def hash_floats(seed_bytes: bytes, count: int) -> list[float]:
    """count floats in [-1, 1] derived by chained SHA-256 over the seed."""
    out: list[float] = []
    digest = hashlib.sha256(seed_bytes).digest()
    while len(out) < count:
        digest = hashlib.sha256(digest).digest()
        for i in range(0, 32, 4):
            (u,) = struct.unpack("<I", digest[i : i + 4])
            out.append((u / 2.0**32) * 2.0 - 1.0)
            if len(out) == count:
                break
    return out


class PolicyBackend:
    def __init__(self, config: ServerConfig):
        self.config = config
        self.partitions: dict[str, np.ndarray] = {}
        self.plugin = None
        self.plugin_reorder = False
        if config.mode == "linear_toy":
            if not config.partitions:
                raise ValueError("linear_toy mode needs at least one partition file")
            self.partitions = {v: read_pgm(p) for v, p in config.partitions.items()}
        elif config.mode == "plugin":
            if not config.plugin_path:
                raise ValueError("plugin mode needs a plugin path")
            spec = importlib.util.spec_from_file_location("policy_plugin", config.plugin_path)
            self.plugin = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(self.plugin)
            if not hasattr(self.plugin, "act"):
                raise ValueError(f"{config.plugin_path} defines no act() callable")
            self.plugin_reorder = bool(getattr(self.plugin, "reorder", False))

    def act(self, obs_wire: dict, instruction: str) -> list[list[float]]:
        cfg = self.config
        if cfg.mode == "echo_deterministic":
            h = hashlib.sha256()
            h.update(instruction.encode("utf-8"))
            for view in sorted(obs_wire):
                h.update(view.encode("utf-8"))
                h.update(obs_wire[view]["rgb_b64"].encode("ascii"))
            flat = hash_floats(h.digest(), cfg.action_dim * cfg.chunk_len)
            return [flat[c * cfg.action_dim : (c + 1) * cfg.action_dim]
                    for c in range(cfg.chunk_len)]
        if cfg.mode == "linear_toy":
            row = self._region_action(obs_wire)
            return [row for _ in range(cfg.chunk_len)]
        images = {v: decode_view(o) for v, o in obs_wire.items()}
        action = self.plugin.act(images, instruction)
        return [[float(x) for x in row] for row in action]

    def _region_action(self, obs_wire: dict) -> list[float]:
        sums = {ACT: 0.0, SUP: 0.0, NUIS: 0.0}
        counts = {ACT: 0, SUP: 0, NUIS: 0}
        for view, view_obj in obs_wire.items():
            part = self.partitions.get(view)
            if part is None:
                continue
            img = decode_view(view_obj).astype(np.float64) / 255.0
            if part.shape != img.shape[:2]:
                raise ValueError(
                    f"partition for {view!r} is {part.shape}, image is {img.shape[:2]}"
                )
            for region in (ACT, SUP, NUIS):
                sel = part == region
                n = int(sel.sum())
                if n:
                    sums[region] += float(img[sel].sum())
                    counts[region] += n * 3
        means = {r: (sums[r] / counts[r] if counts[r] else 0.0) for r in (ACT, SUP, NUIS)}
        order = (ACT, SUP, NUIS)
        return [means[order[j % 3]] for j in range(self.config.action_dim)]

    def introspect(self, obs_wire: dict, instruction: str) -> dict:
        cfg = self.config
        if cfg.mode == "plugin" and hasattr(self.plugin, "introspect"):
            images = {v: decode_view(o) for v, o in obs_wire.items()}
            return self.plugin.introspect(images, instruction)
        g = cfg.token_grid
        views = [v for v in cfg.views if v in obs_wire]
        n_visual = len(views) * g * g
        n = n_visual + 2  # instruction + readout token
        dim = 8
        att = np.full((n, n), 1.0 / n, dtype="<f4")
        emb = np.zeros((n, dim), dtype="<f4")
        spatial: dict[str, list[int]] = {}
        tok = 0
        for view in views:
            img = decode_view(obs_wire[view]).astype(np.float64) / 255.0
            gray = img.mean(axis=2)
            hh, ww = gray.shape
            for gy in range(g):
                for gx in range(g):
                    cell = gray[gy * hh // g : (gy + 1) * hh // g,
                                gx * ww // g : (gx + 1) * ww // g]
                    emb[tok, tok % dim] = float(cell.mean()) if cell.size else 0.0
                    tok += 1
            spatial[view] = list(range(tok - g * g, tok))
        emb[n_visual:, 0] = 0.5
        return {
            "attention_b64": base64.b64encode(att.tobytes()).decode("ascii"),
            "embeddings_b64": base64.b64encode(emb.tobytes()).decode("ascii"),
            "n_tokens": n,
            "dim": dim,
            "spatial_map": spatial,
        }


def hello_reply(config: ServerConfig) -> dict:
    # field order is part of the pinned handshake fixture
    return {
        "type": "hello",
        "version": PROTOCOL_VERSION,
        "action_dim": config.action_dim,
        "chunk_len": config.chunk_len,
        "views": list(config.views),
        "introspection": True,
    }


def serve(config: ServerConfig, stdin=None, stdout=None) -> None:
    """Answer requests until the input stream closes."""
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer
    backend = PolicyBackend(config)
    held_back = None  # one buffered reply when a plugin opts into reordering

    def send(obj: dict) -> None:
        stdout.write(json.dumps(obj, separators=(",", ":")).encode("utf-8") + b"\n")
        stdout.flush()

    for line in stdin:
        line = line.strip()
        if not line:
            continue
        rid = -1
        try:
            msg = json.loads(line)
            rid = msg.get("id", -1)
            mtype = msg.get("type")
            if mtype == "hello":
                if msg.get("version") != PROTOCOL_VERSION:
                    send({"type": "error", "id": rid,
                          "message": f"unsupported protocol version {msg.get('version')}, "
                                     f"server speaks {PROTOCOL_VERSION}"})
                    continue
                send(hello_reply(config))
            elif mtype == "act":
                reply = {"type": "action", "id": rid,
                         "action": backend.act(msg.get("obs", {}),
                                               msg.get("instruction", ""))}
                if backend.plugin_reorder:
                    if held_back is None:
                        held_back = reply
                    else:
                        send(reply)
                        send(held_back)
                        held_back = None
                else:
                    send(reply)
            elif mtype == "introspect":
                payload = backend.introspect(msg.get("obs", {}),
                                             msg.get("instruction", ""))
                send({"type": "introspection", "id": rid, **payload})
            else:
                send({"type": "error", "id": rid,
                      "message": f"unknown request type {mtype!r}"})
        except Exception as e:  # noqa: BLE001 - the loop must stay alive
            send({"type": "error", "id": rid, "message": f"{type(e).__name__}: {e}"})
    if held_back is not None:
        send(held_back)
