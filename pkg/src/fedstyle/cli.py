"""Command line client for the experiment service.

Every verb talks HTTP to the service API.  Without ``--server`` an
in-process app instance is used, so the CLI works standalone while staying
a thin client; with ``--server URL`` the same requests go to a remote
instance (file paths are then resolved on that server).

Config precedence, later wins: built-in defaults, ``--config`` file,
``FEDSTYLE_<KEY>`` environment variables, ``--set key=value`` flags,
dedicated flags such as ``--mode``.
"""
from __future__ import annotations

import argparse
import asyncio
import sys
import time
from pathlib import Path

import httpx

from .errors import ConfigError, FedstyleError, ServiceError
from .harness import (ExperimentConfig, apply_overrides, benchmark_config,
                      config_pairs, env_overrides, serialize_config, MODES)


class ServiceClient:
    """Requests against a remote URL or an in-process app."""

    def __init__(self, server: str | None):
        self.server = server

    def _make_client(self) -> httpx.AsyncClient:
        if self.server:
            return httpx.AsyncClient(base_url=self.server, timeout=60.0)
        from .service import create_app

        if not hasattr(self, "_app"):
            self._app = create_app()
        transport = httpx.ASGITransport(app=self._app)
        return httpx.AsyncClient(transport=transport,
                                 base_url="http://fedstyle.internal",
                                 timeout=60.0)

    def request(self, method: str, path: str, payload: dict | None = None) -> dict:
        async def go():
            async with self._make_client() as client:
                return await client.request(method, path, json=payload)

        try:
            response = asyncio.run(go())
        except httpx.HTTPError as exc:
            raise ServiceError(f"request to {path} failed: {exc}") from exc
        try:
            body = response.json()
        except ValueError:
            body = response.text
        if response.status_code >= 400:
            detail = body.get("detail", body) if isinstance(body, dict) else body
            raise ServiceError(f"{path}: {detail}")
        return body


def _resolve_config(args) -> ExperimentConfig:
    cfg = benchmark_config() if args.benchmark else ExperimentConfig()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        cfg = apply_overrides(cfg, config_pairs(path.read_text()))
    cfg = apply_overrides(cfg, env_overrides())
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        pairs[key.strip()] = value
    cfg = apply_overrides(cfg, pairs)
    direct = {"mode": args.mode, "out_dir": args.out, "seeds": args.seeds,
              "targets": args.targets, "dataset": args.dataset,
              "deterministic": args.deterministic}
    return apply_overrides(cfg, direct)


def _cmd_run(args) -> int:
    cfg = _resolve_config(args)
    client = ServiceClient(args.server)
    created = client.request("POST", "/experiments",
                             {"config": serialize_config(cfg)})
    job_id = created["id"]
    printed = 0
    while True:
        status = client.request("GET", f"/experiments/{job_id}")
        for line in status["log"][printed:]:
            print(line)
        printed = len(status["log"])
        if status["status"] != "running":
            break
        time.sleep(args.poll)
    if status["status"] == "failed":
        print(f"error: {status['error']}", file=sys.stderr)
        return 1
    print(status["summary"], end="")
    if status["failures"]:
        print(f"{status['failures']} cell(s) failed", file=sys.stderr)
        return 1
    return 0


def _cmd_gen_data(args) -> int:
    client = ServiceClient(args.server)
    body = client.request("POST", "/datasets/generate", {
        "out_dir": args.out, "samples_per_domain": args.samples,
        "num_classes": args.classes, "image_size": args.size,
        "seed": args.seed, "fmt": args.fmt})
    for name, path in body["domains"].items():
        print(f"{name}: {path}")
    print(f"separation ratio: {body['separation_ratio']:.3f}")
    return 0


def _cmd_eval_checkpoint(args) -> int:
    cfg = _resolve_config(args)
    client = ServiceClient(args.server)
    body = client.request("POST", "/checkpoints/evaluate", {
        "checkpoint": args.checkpoint, "config": serialize_config(cfg),
        "split": args.split})
    for name, acc in body["accuracies"].items():
        print(f"{name}: {100 * acc:.1f}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--benchmark", action="store_true",
                   help="start from the calibrated benchmark settings")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out", help="output directory (config key out_dir)")
    p.add_argument("--seed", "--seeds", dest="seeds",
                   help="comma separated seed list")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="force sequential, byte-reproducible runs")
    p.add_argument("--targets", help="comma separated held-out domain indices")
    p.add_argument("--dataset", help="'synthetic-4' or a domain directory")
    p.add_argument("--server", help="service URL; default runs in-process")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedstyle",
        description="federated style-augmentation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and print the summary")
    _add_config_flags(run)
    run.add_argument("--poll", type=float, default=0.2,
                     help="status poll interval in seconds")
    run.set_defaults(fn=_cmd_run)

    gen = sub.add_parser("gen-data", help="write the synthetic domains to disk")
    gen.add_argument("--out", required=True)
    gen.add_argument("--samples", type=int, default=240)
    gen.add_argument("--classes", type=int, default=5)
    gen.add_argument("--size", type=int, default=16)
    gen.add_argument("--seed", type=int, default=7)
    gen.add_argument("--fmt", choices=("rgb32", "ppm"), default="rgb32")
    gen.add_argument("--server")
    gen.set_defaults(fn=_cmd_gen_data)

    ev = sub.add_parser("eval-checkpoint",
                        help="accuracy of a saved model on every domain")
    ev.add_argument("checkpoint")
    ev.add_argument("--split", choices=("train", "test", "full"),
                    default="full")
    _add_config_flags(ev)
    ev.set_defaults(fn=_cmd_eval_checkpoint)

    srv = sub.add_parser("serve", help="start the HTTP service")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8000)
    srv.set_defaults(fn=_cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FedstyleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
