import base64
import json
import subprocess
import sys

import numpy as np
import pytest

HELLO_FIXTURE = (
    b'{"type":"hello","version":1,"action_dim":8,"chunk_len":16,'
    b'"views":["front","overhead","wrist"],"introspection":true}'
)


class ServerHandle:
    """Drives a policy-server subprocess over its stdio pipes."""

    def __init__(self, *args):
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "policy_server", "serve", *args],
            stdin=subprocess.PIPE, stdout=subprocess.PIPE,
        )

    def send(self, obj) -> None:
        self.proc.stdin.write(json.dumps(obj).encode() + b"\n")
        self.proc.stdin.flush()

    def send_raw(self, raw: bytes) -> None:
        self.proc.stdin.write(raw + b"\n")
        self.proc.stdin.flush()

    def recv_raw(self) -> bytes:
        return self.proc.stdout.readline().rstrip(b"\n")

    def recv(self) -> dict:
        return json.loads(self.recv_raw())

    def close(self) -> None:
        self.proc.stdin.close()
        self.proc.wait(timeout=5)


@pytest.fixture
def echo_server():
    server = ServerHandle("--mode", "echo")
    yield server
    server.close()


def obs_payload(value=0, size=8, views=("front", "overhead", "wrist")):
    raw = bytes([value]) * (size * size * 3)
    return {
        v: {"w": size, "h": size, "rgb_b64": base64.b64encode(raw).decode()}
        for v in views
    }


class TestHandshake:
    def test_hello_matches_golden_transcript(self, echo_server):
        echo_server.send_raw(b'{"type":"hello","version":1}')
        assert echo_server.recv_raw() == HELLO_FIXTURE

    def test_wrong_version_is_error(self, echo_server):
        echo_server.send({"type": "hello", "version": 3})
        reply = echo_server.recv()
        assert reply["type"] == "error"
        assert "3" in reply["message"] and "1" in reply["message"]


class TestEchoMode:
    def test_action_shape(self, echo_server):
        echo_server.send({"type": "hello", "version": 1})
        echo_server.recv()
        echo_server.send({"type": "act", "id": 1, "instruction": "go",
                          "obs": obs_payload(7)})
        reply = echo_server.recv()
        assert reply["type"] == "action"
        assert reply["id"] == 1
        action = np.asarray(reply["action"])
        assert action.shape == (16, 8)

    def test_pure_function_of_observation(self, echo_server):
        for rid in (5, 6):
            echo_server.send({"type": "act", "id": rid, "instruction": "go",
                              "obs": obs_payload(9)})
        a = echo_server.recv()
        b = echo_server.recv()
        assert a["action"] == b["action"]  # id does not enter the hash
        echo_server.send({"type": "act", "id": 7, "instruction": "go",
                          "obs": obs_payload(10)})
        c = echo_server.recv()
        assert c["action"] != a["action"]


class TestErrorPath:
    def test_unknown_type_keeps_serving(self, echo_server):
        echo_server.send({"type": "dance", "id": 3})
        reply = echo_server.recv()
        assert reply["type"] == "error"
        assert reply["id"] == 3
        echo_server.send({"type": "act", "id": 4, "obs": obs_payload()})
        assert echo_server.recv()["type"] == "action"

    def test_malformed_json_keeps_serving(self, echo_server):
        echo_server.send_raw(b"{this is not json")
        assert echo_server.recv()["type"] == "error"
        echo_server.send({"type": "act", "id": 9, "obs": obs_payload()})
        assert echo_server.recv()["id"] == 9

    def test_act_with_bad_payload_reports_id(self, tmp_path):
        # linear mode decodes the image, so a short payload must error out
        part = tmp_path / "part.pgm"
        write_pgm(part, [[1, 2], [3, 3]])
        server = ServerHandle("--mode", "linear", "--partition", str(part),
                              "--views", "front")
        try:
            server.send({"type": "act", "id": 11,
                         "obs": {"front": {"w": 2, "h": 2, "rgb_b64": "AAAA"}}})
            reply = server.recv()
            assert reply["type"] == "error"
            assert reply["id"] == 11
            server.send({"type": "act", "id": 12,
                         "obs": obs_payload(0, size=2, views=("front",))})
            assert server.recv()["type"] == "action"
        finally:
            server.close()


def write_pgm(path, labels):
    h = len(labels)
    w = len(labels[0])
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(bytes(v for row in labels for v in row))


class TestLinearToyMode:
    def test_zero_image_gives_zero_chunk(self, tmp_path):
        part = tmp_path / "part.pgm"
        write_pgm(part, [[1, 2], [3, 3]])
        server = ServerHandle("--mode", "linear", "--partition", str(part),
                              "--views", "front")
        try:
            server.send({"type": "act", "id": 1,
                         "obs": obs_payload(0, size=2, views=("front",))})
            reply = server.recv()
            action = np.asarray(reply["action"])
            assert action.shape == (16, 8)
            assert (action == 0).all()
        finally:
            server.close()

    def test_region_means_drive_components(self, tmp_path):
        part = tmp_path / "part.pgm"
        write_pgm(part, [[1, 2], [3, 3]])
        server = ServerHandle("--mode", "linear", "--partition", str(part),
                              "--views", "front")
        try:
            raw = bytes([255, 255, 255, 0, 0, 0, 51, 51, 51, 51, 51, 51])
            obs = {"front": {"w": 2, "h": 2,
                             "rgb_b64": base64.b64encode(raw).decode()}}
            server.send({"type": "act", "id": 1, "obs": obs})
            row = server.recv()["action"][0]
            assert row[0] == pytest.approx(1.0)        # ACT pixel is white
            assert row[1] == pytest.approx(0.0)        # SUP pixel is black
            assert row[2] == pytest.approx(51 / 255)   # NUIS pixels are gray
            assert row[3] == pytest.approx(1.0)        # components cycle
        finally:
            server.close()

    def test_missing_partition_is_startup_error(self):
        proc = subprocess.run(
            [sys.executable, "-m", "policy_server", "serve", "--mode", "linear"],
            capture_output=True, timeout=30,
        )
        assert proc.returncode == 2
        assert b"partition" in proc.stderr


class TestIntrospection:
    def test_payload_fields(self, echo_server):
        echo_server.send({"type": "introspect", "id": 2, "obs": obs_payload(128)})
        reply = echo_server.recv()
        assert reply["type"] == "introspection"
        n = reply["n_tokens"]
        assert n == 3 * 16 + 2
        att = np.frombuffer(base64.b64decode(reply["attention_b64"]),
                            dtype="<f4").reshape(n, n)
        assert np.allclose(att.sum(axis=1), 1.0, atol=1e-4)
        spatial = reply["spatial_map"]
        seen = set()
        for view in ("front", "overhead", "wrist"):
            idx = set(spatial[view])
            assert len(idx) == 16
            assert not idx & seen
            seen |= idx


class TestPluginMode:
    def test_plugin_act_and_reorder(self, tmp_path):
        plugin = tmp_path / "plug.py"
        plugin.write_text(
            "reorder = True\n"
            "def act(images, instruction):\n"
            "    total = sum(float(img.mean()) for img in images.values())\n"
            "    return [[total, 2.0]]\n"
        )
        server = ServerHandle("--mode", "plugin", "--plugin", str(plugin))
        try:
            server.send({"type": "act", "id": 1, "obs": obs_payload(0, views=("front",))})
            server.send({"type": "act", "id": 2, "obs": obs_payload(255, views=("front",))})
            first = server.recv()
            second = server.recv()
            assert first["id"] == 2  # pair answered in reverse
            assert second["id"] == 1
            assert second["action"] == [[0.0, 2.0]]
            assert first["action"] == [[1.0, 2.0]]
        finally:
            server.close()
