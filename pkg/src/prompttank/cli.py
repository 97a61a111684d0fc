"""Headless entry point: wire a source, a backend and the control server.

Examples:
    prompttank --backend mock --source synthetic --fps 12
    prompttank --preset show.tank --backend remote --endpoint http://gpu:9090/generate
    prompttank --backend mock --source still:plate.png --headless --snapshot-dir out/
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import threading

from . import presets
from .backends import DirectorySource, MockBackend, RemoteBackend, StillImageSource, SyntheticSource
from .engine import Engine
from .server import LISTEN_ENV, ServerConfig, create_app, default_ui_dir

log = logging.getLogger("prompttank")

DEFAULT_LISTEN = "127.0.0.1:8765"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prompttank",
        description="Run the prompt-mixing generation loop and its control server.",
    )
    parser.add_argument("--preset", help="preset file to load at boot")
    parser.add_argument("--backend", choices=("mock", "remote"), default="mock")
    parser.add_argument("--endpoint", help="generation service URL (remote backend only)")
    parser.add_argument(
        "--source", default="synthetic",
        help="input frames: still:<path>, dir:<path>, or synthetic (default)",
    )
    parser.add_argument("--fps", type=float, default=12.0, help="target frame rate (default 12)")
    parser.add_argument(
        "--listen", default=None,
        help=f"addr:port for the control server (default ${LISTEN_ENV} or {DEFAULT_LISTEN})",
    )
    parser.add_argument("--headless", action="store_true", help="do not serve the UI bundle")
    parser.add_argument("--snapshot-dir", help="directory for output snapshots")
    parser.add_argument("--snapshot-interval", type=float,
                        help="write a snapshot every N seconds")
    parser.add_argument("--resolution", default="512x512",
                        help="synthetic source resolution, WxH (default 512x512)")
    parser.add_argument("--log-level", default="INFO")
    return parser


def make_source(spec: str, resolution: str):
    if spec == "synthetic":
        try:
            width, height = (int(v) for v in resolution.lower().split("x"))
        except ValueError:
            raise ValueError(f"bad --resolution {resolution!r}, expected WxH") from None
        return SyntheticSource(width=width, height=height)
    scheme, _, path = spec.partition(":")
    if scheme == "still" and path:
        return StillImageSource(path)
    if scheme == "dir" and path:
        return DirectorySource(path)
    raise ValueError(f"bad --source {spec!r}: use still:<path>, dir:<path> or synthetic")


def parse_listen(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad --listen {value!r}, expected addr:port")
    return host, int(port)


def configure(args: argparse.Namespace):
    """Validate flags and build (engine, app, host, port); raises ValueError."""
    if args.backend == "remote" and not args.endpoint:
        raise ValueError("--backend remote requires --endpoint")
    if args.backend == "mock" and args.endpoint:
        raise ValueError("--endpoint only makes sense with --backend remote")
    if not 0.0 < args.fps <= 60.0:
        raise ValueError(f"--fps must lie in (0, 60], got {args.fps}")
    if args.snapshot_interval is not None and args.snapshot_interval <= 0:
        raise ValueError("--snapshot-interval must be positive")

    backend = MockBackend() if args.backend == "mock" else RemoteBackend(args.endpoint)
    source = make_source(args.source, args.resolution)

    state = None
    if args.preset:
        state = presets.load_preset(args.preset).to_state()

    engine = Engine(
        backend, source, state=state,
        target_fps=args.fps,
        snapshot_dir=args.snapshot_dir,
        snapshot_interval=args.snapshot_interval,
    )
    config = ServerConfig(headless=args.headless,
                          ui_dir=None if args.headless else default_ui_dir())
    app = create_app(engine, config)
    listen = args.listen or os.environ.get(LISTEN_ENV) or DEFAULT_LISTEN
    host, port = parse_listen(listen)
    return engine, app, host, port


def _fps_logger(engine: Engine, stop: threading.Event, interval: float = 5.0) -> None:
    while not stop.wait(interval):
        m = engine.metrics()
        log.info(
            "fps %.2f (target %.1f), frames %d, skipped %d, backend p90 %.1f ms%s",
            m["measured_fps"], m["target_fps"], m["frames_generated"],
            m["frames_skipped"], m["backend_latency_ms"]["p90"],
            " [degraded]" if m["backend_degraded"] else "",
        )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        engine, app, host, port = configure(args)
    except (ValueError, presets.PresetError) as e:
        print(f"prompttank: {e}", file=sys.stderr)
        return 2

    import uvicorn

    engine.start()
    stop = threading.Event()
    reporter = threading.Thread(target=_fps_logger, args=(engine, stop), daemon=True)
    reporter.start()
    log.info("engine running at target %.1f fps; control server on %s:%d", args.fps, host, port)
    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    finally:
        stop.set()
        engine.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
