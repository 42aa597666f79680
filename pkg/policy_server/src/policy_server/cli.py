"""policy-server command line entry point."""

from __future__ import annotations

import argparse
import socket
import sys

from .server import ServerConfig, serve

MODES = {"echo": "echo_deterministic", "linear": "linear_toy", "plugin": "plugin"}


def parse_partitions(values) -> dict[str, str]:
    """--partition accepts `view=path.pgm` pairs or a bare path for all views."""
    out: dict[str, str] = {}
    bare = None
    for value in values or ():
        if "=" in value:
            view, path = value.split("=", 1)
            out[view] = path
        else:
            bare = value
    if bare is not None:
        return {"*": bare, **out}
    return out


def build_config(args) -> ServerConfig:
    views = [v.strip() for v in args.views.split(",") if v.strip()]
    partitions = parse_partitions(args.partition)
    if "*" in partitions:
        path = partitions.pop("*")
        for view in views:
            partitions.setdefault(view, path)
    return ServerConfig(
        action_dim=args.action_dim,
        chunk_len=args.chunk_len,
        views=views,
        mode=MODES[args.mode],
        partitions=partitions,
        plugin_path=args.plugin or "",
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="policy-server")
    sub = parser.add_subparsers(dest="command", required=True)
    srv = sub.add_parser("serve", help="answer protocol v1 requests on stdio")
    srv.add_argument("--mode", choices=sorted(MODES), default="echo")
    srv.add_argument("--partition", action="append",
                     help="view=path.pgm (repeatable) or a single path for every view")
    srv.add_argument("--plugin", help="path to a python file defining act()")
    srv.add_argument("--action-dim", type=int, default=8)
    srv.add_argument("--chunk-len", type=int, default=16)
    srv.add_argument("--views", default="front,overhead,wrist")
    srv.add_argument("--tcp", default=None, metavar="HOST:PORT",
                     help="listen on a TCP port instead of stdio")
    args = parser.parse_args(argv)

    try:
        config = build_config(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    try:
        if args.tcp:
            host, _, port = args.tcp.rpartition(":")
            with socket.create_server((host or "127.0.0.1", int(port))) as listener:
                conn, _ = listener.accept()
                with conn, conn.makefile("rb") as rf, conn.makefile("wb") as wf:
                    serve(config, stdin=rf, stdout=wf)
            return 0
        serve(config)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
