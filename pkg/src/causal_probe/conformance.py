"""Conformance suite for external policy servers speaking protocol v1.

Four checks: handshake (byte-exact against the pinned fixture when the
server runs the default session), a pipelined burst of act requests with
out-of-order-tolerant id correlation, introspection payload validation, and
error-path liveness (a bad request must produce an error reply without
killing the session).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .baselines import attention_score, token_norm_score, tokens_to_heatmap
from .errors import ProbeError, TransportError
from .transport import RemotePolicy, connect
from .types import MultiViewObservation

# Hello reply of a default-configuration server, pinned byte for byte.
HELLO_FIXTURE = (
    b'{"type":"hello","version":1,"action_dim":8,"chunk_len":16,'
    b'"views":["front","overhead","wrist"],"introspection":true}'
)
_FIXTURE_SESSION = (8, 16, ("front", "overhead", "wrist"), True)


@dataclass
class ConformanceReport:
    checks: list[tuple[str, bool, str]] = field(default_factory=list)

    def record(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append((name, ok, detail))

    @property
    def all_ok(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def lines(self) -> list[str]:
        return [
            f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
            for name, ok, detail in self.checks
        ]


def _test_observations(views, count: int = 4, size: int = 32) -> list[MultiViewObservation]:
    obs_list = []
    for i in range(count):
        rng = np.random.Generator(np.random.Philox(key=1000 + i))
        obs_list.append(MultiViewObservation(
            views={v: rng.random((size, size, 3)).astype(np.float32) for v in views},
            timestep=i + 1,
        ))
    return obs_list


def run_conformance(endpoint: str, n_requests: int = 1000) -> ConformanceReport:
    report = ConformanceReport()
    try:
        policy = connect(endpoint)
    except ProbeError as e:
        report.record("handshake", False, str(e))
        return report

    try:
        session = policy.session
        sig = (session.action_dim, session.chunk_len, session.view_names,
               session.introspection_supported)
        if not isinstance(policy, RemotePolicy):
            report.record("handshake", True, "in-process policy; no wire handshake")
        elif sig == _FIXTURE_SESSION:
            ok = policy.hello_raw == HELLO_FIXTURE
            report.record(
                "handshake", ok,
                "hello matches fixture byte-for-byte" if ok
                else f"hello differs from fixture: {policy.hello_raw!r}",
            )
        else:
            report.record("handshake", True,
                          f"non-default session {sig}; fixture byte-check skipped")

        views = session.view_names or ("front",)
        base_obs = _test_observations(views)
        _pipelined_check(policy, base_obs, n_requests, report)
        _introspection_check(policy, base_obs[0], views, report)
        _error_liveness_check(policy, base_obs[0], report)
    finally:
        policy.close()
    return report


def _pipelined_check(policy, base_obs, n_requests, report) -> None:
    try:
        batch = [base_obs[i % len(base_obs)] for i in range(n_requests)]
        actions = policy.act_batch(batch)
        shape_ok = all(
            a.shape == (policy.session.chunk_len, policy.session.action_dim) for a in actions
        )
        by_obs = {}
        deterministic = True
        for i, a in enumerate(actions):
            key = i % len(base_obs)
            if key in by_obs:
                deterministic &= np.array_equal(by_obs[key], a)
            else:
                by_obs[key] = a
        ok = shape_ok and deterministic
        detail = f"{n_requests} pipelined requests"
        if not shape_ok:
            detail = "response action shapes do not match the session"
        elif not deterministic:
            detail = "identical observations produced different actions"
        report.record("pipelined_acts", ok, detail)
    except ProbeError as e:
        report.record("pipelined_acts", False, str(e))


def _introspection_check(policy, obs, views, report) -> None:
    if not policy.session.introspection_supported:
        report.record("introspection", True, "not advertised; skipped")
        return
    try:
        payload = policy.introspect(obs)
        att = attention_score(payload)
        norm = token_norm_score(payload)
        for view in views:
            heat = tokens_to_heatmap(att, payload, view, (16, 16))
            assert heat.shape == (16, 16)
            tokens_to_heatmap(norm, payload, view, (16, 16))
        report.record("introspection", True,
                      f"{payload.n_tokens} tokens validated across {len(views)} views")
    except (ProbeError, AssertionError) as e:
        report.record("introspection", False, str(e))


def _error_liveness_check(policy, obs, report) -> None:
    if not isinstance(policy, RemotePolicy):
        report.record("error_liveness", True, "in-process policy; skipped")
        return
    try:
        try:
            policy.request({"type": "frobnicate"}, timeout=10.0)
            report.record("error_liveness", False,
                          "unknown request type was not answered with an error")
            return
        except TransportError as e:
            if "server error" not in str(e):
                raise
        action = policy.act(obs)
        report.record("error_liveness", action is not None,
                      "error reply received and the session stayed alive")
    except ProbeError as e:
        report.record("error_liveness", False, str(e))
