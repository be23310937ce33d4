"""Command-line entry points.

    articfeed simulate    run the EMA-RT/1 device simulator
    articfeed serve       run the processing service with WebSocket broadcast
    articfeed fit-palate  fit palate weights to a recorded trace sweep
    articfeed export      batch-track a sweep into OBJ frames + weights CSV
    articfeed metrics     key=value dump of a session report
    articfeed make-models write synthetic tongue/palate model files

Exit codes: 0 success, 1 runtime error, 2 usage error. The log level
comes from ARTICFEED_LOG (error|warn|info|debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path

import numpy as np

from .errors import ArticfeedError
from .geometry import Mesh, write_obj
from .models import (
    Correspondence,
    MultilinearModel,
    PcaModel,
    generate_synthetic_model,
    generate_synthetic_palate,
    load_model,
    save_model,
)
from .pipeline import CoilRoles, Session, SessionConfig, SessionReport, run_session
from .stream import (
    SCENARIO_TONGUE_COILS,
    ScenarioSource,
    read_sweep,
    serve_device,
)

log = logging.getLogger(__name__)

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = _LOG_LEVELS.get(os.environ.get("ARTICFEED_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _parse_addr(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return (host or default_host, int(port))


def default_roles(model: MultilinearModel) -> CoilRoles:
    """Simulator-convention roles: ref1-3, bite bl/br/bf, tongue tt/tb/td."""
    v = model.num_vertices
    indices = [int(round(f * (v - 1))) for f in (0.15, 0.5, 0.85)]
    return CoilRoles(
        reference=("ref1", "ref2", "ref3"),
        tongue=tuple(Correspondence(c, i) for c, i in zip(SCENARIO_TONGUE_COILS, indices)),
        bite_left="bl",
        bite_right="br",
        bite_front="bf",
        origin="bf",
    )


def _load_models(args) -> tuple[MultilinearModel | None, PcaModel | None]:
    tongue = palate = None
    if getattr(args, "models", None):
        d = Path(args.models)
        tpath = d / "tongue.json"
        ppath = d / "palate.json"
        if tpath.exists():
            tongue = load_model(tpath)
        if ppath.exists():
            palate = load_model(ppath)
        if tongue is None and palate is None:
            raise ArticfeedError(f"{d}: no tongue.json or palate.json found")
    if getattr(args, "tongue", None):
        tongue = load_model(args.tongue)
    if getattr(args, "palate", None):
        palate = load_model(args.palate)
    if tongue is not None and not isinstance(tongue, MultilinearModel):
        raise ArticfeedError("tongue model must be a multilinear model file")
    if palate is not None and not isinstance(palate, PcaModel):
        raise ArticfeedError("palate model must be a pca model file")
    return tongue, palate


# -- simulate ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    if args.sweep is None and args.synthetic is None:
        print("simulate: provide a sweep file or --synthetic SEED", file=sys.stderr)
        return 2
    if args.sweep is not None and args.synthetic is not None:
        print("simulate: sweep file and --synthetic are mutually exclusive", file=sys.stderr)
        return 2

    if args.synthetic is not None:
        source = ScenarioSource(seed=args.synthetic, rate=args.rate, duration=args.duration)
    else:
        try:
            header, frames = read_sweep(args.sweep)
        except (OSError, ArticfeedError) as exc:
            print(f"simulate: {exc}", file=sys.stderr)
            return 1
        source = (header, frames)

    try:
        server = serve_device(source, bind=_parse_addr(args.bind), rate=args.rate)
    except OSError as exc:
        print(f"simulate: cannot bind {args.bind}: {exc}", file=sys.stderr)
        return 1
    print(f"listening on {server.address[0]}:{server.address[1]}", flush=True)

    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.is_set():
            stop.wait(0.2)
    finally:
        server.close()
    return 0


# -- serve -------------------------------------------------------------------


def cmd_serve(args) -> int:
    try:
        tongue, palate = _load_models(args)
    except (OSError, ArticfeedError) as exc:
        print(f"serve: {exc}", file=sys.stderr)
        return 1
    if tongue is None:
        print("serve: a tongue model is required (use --models or --tongue)", file=sys.stderr)
        return 1

    if args.session:
        try:
            config = SessionConfig.load(args.session)
        except (OSError, KeyError, ValueError) as exc:
            print(f"serve: bad session config: {exc}", file=sys.stderr)
            return 1
    else:
        config = SessionConfig(roles=default_roles(tongue))

    from .service import FeedbackService

    ws_host, ws_port = _parse_addr(args.ws)
    try:
        service = FeedbackService(
            config,
            tongue_model=tongue,
            palate_model=palate,
            host=ws_host,
            port=ws_port,
            keep_series=bool(args.report_dir),
        )
    except OSError as exc:
        print(f"serve: cannot bind websocket {args.ws}: {exc}", file=sys.stderr)
        return 1
    print(f"websocket on {service.hub.url}", flush=True)

    ui_server = None
    if args.ui:
        ui_server = _serve_static(args.ui)

    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())

    status = 0
    try:
        if args.device:
            service.start_playback("device", args.device)
        else:
            service.start_playback("file", args.file)

        if args.auto_setup:
            if config.reference_pose is None:
                service.run_task_for("reference", args.setup_seconds)
            if config.bite_transform is None:
                service.run_task_for("biteplane", args.setup_seconds)

        while not stop.is_set():
            if service.wait_playback(timeout=0.2):
                break
        service.stop_playback()

        # a mid-stream disconnect ends the session cleanly with a partial
        # report; a source that never produced a frame is a hard failure
        report = service.report()
        if report.source_error and report.frames == 0:
            print(f"serve: source failed: {report.source_error}", file=sys.stderr)
            status = 1
        print(json.dumps(report.to_dict(), indent=2))
        if args.report_dir:
            from .report import write_report

            for path in write_report(report, args.report_dir):
                print(f"wrote {path}", file=sys.stderr)
    except ArticfeedError as exc:
        print(f"serve: {exc}", file=sys.stderr)
        status = 1
    finally:
        service.close()
        if ui_server is not None:
            ui_server.shutdown()
    return status


def _serve_static(directory: str):
    import functools
    from http.server import SimpleHTTPRequestHandler, ThreadingHTTPServer

    handler = functools.partial(SimpleHTTPRequestHandler, directory=directory)
    httpd = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    threading.Thread(target=httpd.serve_forever, daemon=True).start()
    print(f"ui on http://127.0.0.1:{httpd.server_address[1]}/", flush=True)
    return httpd


# -- fit-palate ----------------------------------------------------------------


def cmd_fit_palate(args) -> int:
    from .fitting import fit_palate

    try:
        model = load_model(args.model)
    except (OSError, ArticfeedError) as exc:
        print(f"fit-palate: {exc}", file=sys.stderr)
        return 1
    if not isinstance(model, PcaModel):
        print("fit-palate: model file is not a pca model", file=sys.stderr)
        return 1
    try:
        _, frames = read_sweep(args.trace)
    except (OSError, ArticfeedError) as exc:
        print(f"fit-palate: {exc}", file=sys.stderr)
        return 1

    pts = []
    for f in frames:
        s = f.sample(args.coil)
        if s is not None and s.ok:
            pts.append(s.pos)
    try:
        result = fit_palate(
            model, np.asarray(pts), prior_weight=args.prior, outer_iterations=args.iterations
        )
    except ArticfeedError as exc:
        print(f"fit-palate: {exc}", file=sys.stderr)
        return 1

    doc = {
        "weights": [float(v) for v in result.x],
        "mean_residual_mm": result.mean_residual,
        "outer_iterations": result.outer_iterations,
        "residual_history_mm": list(result.residual_history),
        "trace_points": len(pts),
    }
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        print(text)
    if args.report_dir:
        from .report import render_palate_fit_figure

        path = render_palate_fit_figure(result.residual_history, args.report_dir)
        print(f"wrote {path}", file=sys.stderr)
    return 0


# -- export --------------------------------------------------------------------


class _ExportSink:
    def __init__(self):
        self.frames = []

    def on_start(self, header, cfg):
        pass

    def on_frame(self, raw, processed, message):
        self.frames.append(processed)

    def on_end(self, report):
        pass


def cmd_export(args) -> int:
    try:
        model = load_model(args.model)
    except (OSError, ArticfeedError) as exc:
        print(f"export: {exc}", file=sys.stderr)
        return 1
    if not isinstance(model, MultilinearModel):
        print("export: model file is not a multilinear model", file=sys.stderr)
        return 1
    try:
        header, frames = read_sweep(args.sweep)
    except (OSError, ArticfeedError) as exc:
        print(f"export: {exc}", file=sys.stderr)
        return 1
    if not frames:
        print("export: sweep has no frames", file=sys.stderr)
        return 1

    if args.session:
        try:
            config = SessionConfig.load(args.session)
        except (OSError, KeyError, ValueError) as exc:
            print(f"export: bad session config: {exc}", file=sys.stderr)
            return 1
    else:
        config = SessionConfig(roles=default_roles(model))

    session = Session(config)
    sink = _ExportSink()
    try:
        setup_n = max(1, min(len(frames), int(round(header.rate))))
        if config.reference_pose is None:
            session.capture_reference(frames[:setup_n])
        if config.bite_transform is None:
            session.record_bite_plane(frames[:setup_n])
        report = run_session(
            (header, frames), session, tongue_model=model, sinks=(sink,), keep_series=True
        )
    except ArticfeedError as exc:
        print(f"export: {exc}", file=sys.stderr)
        return 1

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digits = max(5, len(str(len(sink.frames))))
    for k, p in enumerate(sink.frames):
        mesh = Mesh(np.asarray(p.vertices).reshape(-1, 3), model.faces)
        write_obj(out / f"frame_{k:0{digits}d}.obj", mesh)

    from .report import render_series_figures, write_weights_csv

    write_weights_csv(
        out / "weights.csv",
        [p.t for p in sink.frames],
        [p.x for p in sink.frames],
        [p.y for p in sink.frames],
        [p.residual for p in sink.frames],
    )
    figures = render_series_figures(report.series, out, stem="export")
    print(f"wrote {len(sink.frames)} obj frames, weights.csv and {len(figures)} figures to {out}")
    return 0


# -- metrics -------------------------------------------------------------------


def cmd_metrics(args) -> int:
    try:
        with open(args.report, "r", encoding="utf-8") as fh:
            report = SessionReport.from_dict(json.load(fh))
    except (OSError, ValueError, KeyError) as exc:
        print(f"metrics: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(report.metrics_text())
    return 0


# -- make-models -----------------------------------------------------------------


def cmd_make_models(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tongue = generate_synthetic_model(args.seed, n=args.anatomy, m=args.pose, grid=args.grid)
    palate = generate_synthetic_palate(args.seed + 1, n=args.palate_modes, grid=args.grid)
    save_model(tongue, out / "tongue.json")
    save_model(palate, out / "palate.json")
    print(f"wrote {out / 'tongue.json'} and {out / 'palate.json'}")
    return 0


# -- parser ----------------------------------------------------------------------


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="articfeed", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the EMA-RT/1 device simulator")
    p.add_argument("sweep", nargs="?", help="sweep file (.jsonl/.csv) to replay")
    p.add_argument("--synthetic", type=int, metavar="SEED", help="serve a synthetic subject")
    p.add_argument("--bind", default="127.0.0.1:0", help="host:port to listen on")
    p.add_argument("--rate", type=_positive_float, default=100.0, help="default stream rate [Hz]")
    p.add_argument("--duration", type=_positive_float, default=None, help="synthetic duration [s]")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("serve", help="run the processing service")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--device", help="device simulator address host:port")
    src.add_argument("--file", help="sweep file to process")
    p.add_argument("--models", help="directory containing tongue.json / palate.json")
    p.add_argument("--tongue", help="tongue model file")
    p.add_argument("--palate", help="palate model file")
    p.add_argument("--session", help="session config JSON")
    p.add_argument("--ws", default="127.0.0.1:8765", help="websocket bind host:port")
    p.add_argument("--auto-setup", action="store_true", help="capture reference + bite plane automatically")
    p.add_argument("--setup-seconds", type=_positive_float, default=1.0, help="per-task capture window")
    p.add_argument("--report-dir", help="write report JSON, metrics and figures here")
    p.add_argument("--ui", help="serve this directory as the web UI")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("fit-palate", help="fit palate weights to a trace sweep")
    p.add_argument("model", help="pca palate model file")
    p.add_argument("trace", help="trace sweep (.jsonl/.csv), canonical coordinates")
    p.add_argument("--coil", default="tt", help="trace coil id")
    p.add_argument("--prior", type=float, default=1e-6, help="weight prior strength")
    p.add_argument("--iterations", type=int, default=60, help="max outer iterations")
    p.add_argument("--out", help="write weights JSON here")
    p.add_argument("--report-dir", help="write the convergence figure here")
    p.set_defaults(fn=cmd_fit_palate)

    p = sub.add_parser("export", help="batch-track a sweep into OBJ frames")
    p.add_argument("model", help="multilinear tongue model file")
    p.add_argument("sweep", help="sweep file (.jsonl/.csv)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("obj",), default="obj", help="mesh format")
    p.add_argument("--session", help="session config JSON (else simulator-convention auto-setup)")
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("metrics", help="print key=value metrics from a report")
    p.add_argument("report", help="session report JSON")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("make-models", help="write synthetic model files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--anatomy", type=int, default=2, help="anatomy modes")
    p.add_argument("--pose", type=int, default=3, help="pose modes")
    p.add_argument("--grid", type=int, default=10, help="mesh grid resolution")
    p.add_argument("--palate-modes", type=int, default=4)
    p.set_defaults(fn=cmd_make_models)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except KeyboardInterrupt:
        return 0


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
