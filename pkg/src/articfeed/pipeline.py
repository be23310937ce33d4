"""Processing: head correction, normalization, smoothing, session tasks,
and the per-frame loop that fits the tongue model and feeds the sinks.

Pipeline order is fixed: head-correct -> bite normalize -> smooth ->
delay -> fit. Smoothing runs after normalization so rigid head motion is
never smeared into articulator motion.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BiteCoilsMissing,
    ConnectionLost,
    EmptyTrace,
    NoBitePlane,
    SessionStateError,
)
from .fitting import TrackerConfig, TrackerState, fit_palate, track_frame
from .geometry import RigidTransform, bite_plane_frame, quat_multiply, rigid_align
from .models import Correspondence, MultilinearModel, PcaModel
from .stream import CoilFrame, CoilSample, SweepHeader

log = logging.getLogger(__name__)

RECORDED_ORIGIN = "recorded"


@dataclass(frozen=True)
class CoilRoles:
    """Assignment of coil ids to their function in the session."""

    reference: tuple[str, ...]
    tongue: tuple[Correspondence, ...]
    bite_left: str
    bite_right: str
    bite_front: str
    origin: str = RECORDED_ORIGIN
    jaw: str | None = None
    upper_lip: str | None = None
    lower_lip: str | None = None
    trace_coil: str | None = None

    def __post_init__(self):
        ref = tuple(self.reference)
        tongue = tuple(self.tongue)
        if len(ref) < 3:
            raise ValueError("need at least 3 reference coils")
        if len(set(ref)) != len(ref):
            raise ValueError("reference coil ids must be unique")
        tongue_ids = {c.coil_id for c in tongue}
        if tongue_ids & set(ref):
            raise ValueError("a coil may not be both reference and tongue")
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "tongue", tongue)

    @property
    def palate_trace_coil(self) -> str | None:
        if self.trace_coil:
            return self.trace_coil
        return self.tongue[0].coil_id if self.tongue else None

    def to_dict(self) -> dict:
        return {
            "reference": list(self.reference),
            "tongue": [{"coil": c.coil_id, "vertex": c.vertex_index} for c in self.tongue],
            "bite_left": self.bite_left,
            "bite_right": self.bite_right,
            "bite_front": self.bite_front,
            "origin": self.origin,
            "jaw": self.jaw,
            "upper_lip": self.upper_lip,
            "lower_lip": self.lower_lip,
            "trace_coil": self.trace_coil,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CoilRoles":
        return cls(
            reference=tuple(doc["reference"]),
            tongue=tuple(Correspondence(c["coil"], int(c["vertex"])) for c in doc["tongue"]),
            bite_left=doc["bite_left"],
            bite_right=doc["bite_right"],
            bite_front=doc["bite_front"],
            origin=doc.get("origin", RECORDED_ORIGIN),
            jaw=doc.get("jaw"),
            upper_lip=doc.get("upper_lip"),
            lower_lip=doc.get("lower_lip"),
            trace_coil=doc.get("trace_coil"),
        )


@dataclass
class SessionConfig:
    """Everything the session has learned about the subject so far."""

    roles: CoilRoles
    reference_pose: dict[str, np.ndarray] | None = None
    bite_transform: RigidTransform | None = None
    origin_point: np.ndarray | None = None
    palate_weights: np.ndarray | None = None
    palate_residual: float | None = None
    smoothing_window: int = 5
    delay: float = 0.0

    def __post_init__(self):
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ValueError("smoothing_window must be an odd integer >= 1")
        if self.delay < 0:
            raise ValueError("delay must be >= 0")
        if self.bite_transform is not None and self.reference_pose is None:
            raise ValueError("bite_transform requires a reference pose first")

    @property
    def phase(self) -> str:
        if self.reference_pose is None:
            return "setup"
        if self.bite_transform is None:
            return "biteplane"
        if self.palate_weights is None:
            return "palate"
        return "live"

    def to_dict(self) -> dict:
        return {
            "roles": self.roles.to_dict(),
            "reference_pose": None
            if self.reference_pose is None
            else {k: [float(x) for x in v] for k, v in self.reference_pose.items()},
            "bite_transform": None
            if self.bite_transform is None
            else {
                "rotation": [float(x) for x in self.bite_transform.rotation],
                "translation": [float(x) for x in self.bite_transform.translation],
            },
            "origin_point": None
            if self.origin_point is None
            else [float(x) for x in self.origin_point],
            "palate_weights": None
            if self.palate_weights is None
            else [float(x) for x in self.palate_weights],
            "palate_residual": self.palate_residual,
            "smoothing_window": self.smoothing_window,
            "delay": self.delay,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SessionConfig":
        bt = doc.get("bite_transform")
        return cls(
            roles=CoilRoles.from_dict(doc["roles"]),
            reference_pose=None
            if doc.get("reference_pose") is None
            else {k: np.asarray(v, dtype=np.float64) for k, v in doc["reference_pose"].items()},
            bite_transform=None
            if bt is None
            else RigidTransform(np.asarray(bt["rotation"]), np.asarray(bt["translation"])),
            origin_point=None
            if doc.get("origin_point") is None
            else np.asarray(doc["origin_point"], dtype=np.float64),
            palate_weights=None
            if doc.get("palate_weights") is None
            else np.asarray(doc["palate_weights"], dtype=np.float64),
            palate_residual=doc.get("palate_residual"),
            smoothing_window=int(doc.get("smoothing_window", 5)),
            delay=float(doc.get("delay", 0.0)),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "SessionConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# -- frame-level operations --------------------------------------------------


def transform_frame(frame: CoilFrame, t: RigidTransform) -> CoilFrame:
    """Apply a rigid transform to every coil (positions and orientations)."""
    mat = t.matrix
    moved = np.asarray([c.pos for c in frame.coils]) @ mat.T + t.translation
    coils = tuple(
        CoilSample(
            id=c.id,
            pos=moved[i],
            ori=None if c.ori is None else quat_multiply(t.rotation, c.ori),
            ok=c.ok,
        )
        for i, c in enumerate(frame.coils)
    )
    return CoilFrame(seq=frame.seq, t=frame.t, coils=coils)


def head_correct(
    frame: CoilFrame, roles: CoilRoles, reference_pose: dict[str, np.ndarray]
) -> tuple[CoilFrame, bool]:
    """Align the frame's reference coils onto the stored pose.

    Returns (frame, False) untouched when fewer than 3 reference coils are
    usable, so callers can flag the dropout without losing the frame.
    """
    src = []
    tgt = []
    for cid in roles.reference:
        sample = frame.sample(cid)
        if sample is not None and sample.ok and cid in reference_pose:
            src.append(sample.pos)
            tgt.append(reference_pose[cid])
    if len(src) < 3:
        return frame, False
    t = rigid_align(np.asarray(src), np.asarray(tgt))
    return transform_frame(frame, t), True


class SmoothingFilter:
    """Causal moving average over the last `window` frames per coil.

    Invalid samples are excluded from the mean; a sample's own ok flag is
    preserved (a dropout stays a dropout). Orientations pass through.
    """

    def __init__(self, window: int):
        if window < 1 or window % 2 == 0:
            raise ValueError("window must be an odd integer >= 1")
        self.window = window
        self._hist: dict[str, list] = {}

    def process(self, frame: CoilFrame) -> CoilFrame:
        if self.window == 1:
            return frame
        out = []
        for c in frame.coils:
            buf = self._hist.setdefault(c.id, [])
            buf.append((c.pos, c.ok))
            if len(buf) > self.window:
                buf.pop(0)
            valid = [p for p, ok in buf if ok]
            if valid and c.ok:
                pos = np.mean(valid, axis=0)
            else:
                pos = c.pos
            out.append(CoilSample(id=c.id, pos=pos, ori=c.ori, ok=c.ok))
        return CoilFrame(seq=frame.seq, t=frame.t, coils=tuple(out))


def smooth(window: int, frames):
    """Streaming form of SmoothingFilter; timestamps are unchanged."""
    filt = SmoothingFilter(window)
    for f in frames:
        yield filt.process(f)


# -- session tasks -----------------------------------------------------------


class Session:
    """Holds a SessionConfig and enforces the task order of the workflow:
    reference pose, then bite plane (with origin), then palate trace."""

    def __init__(self, config: SessionConfig):
        self.config = config

    def capture_reference(self, frames) -> dict[str, np.ndarray]:
        """Average reference coil positions over the task frames."""
        sums = {cid: np.zeros(3) for cid in self.config.roles.reference}
        counts = {cid: 0 for cid in self.config.roles.reference}
        total = 0
        for f in frames:
            total += 1
            for cid in self.config.roles.reference:
                s = f.sample(cid)
                if s is not None and s.ok:
                    sums[cid] += s.pos
                    counts[cid] += 1
        if total == 0 or any(c == 0 for c in counts.values()):
            raise SessionStateError("reference coils not visible during capture")
        pose = {cid: sums[cid] / counts[cid] for cid in sums}
        self.config.reference_pose = pose
        return pose

    def _corrected(self, frames):
        if self.config.reference_pose is None:
            raise SessionStateError("capture the reference pose first")
        for f in frames:
            corrected, ok = head_correct(f, self.config.roles, self.config.reference_pose)
            if ok:
                yield corrected

    def record_origin(self, frames, coil_id: str | None = None) -> np.ndarray:
        """Record the incisor origin point from a probe coil held there."""
        coil_id = coil_id or self.config.roles.bite_front
        pts = []
        for f in self._corrected(frames):
            s = f.sample(coil_id)
            if s is not None and s.ok:
                pts.append(s.pos)
        if not pts:
            raise SessionStateError(f"origin coil {coil_id!r} never visible")
        self.config.origin_point = np.mean(pts, axis=0)
        return self.config.origin_point

    def record_bite_plane(self, frames) -> RigidTransform:
        """Average the bite coils over the task and build the canonical frame."""
        roles = self.config.roles
        bite_ids = [roles.bite_left, roles.bite_right, roles.bite_front]
        want_origin_coil = roles.origin != RECORDED_ORIGIN
        ids = bite_ids + ([roles.origin] if want_origin_coil else [])
        sums = {cid: np.zeros(3) for cid in ids}
        counts = {cid: 0 for cid in ids}
        total = 0
        for f in self._corrected(frames):
            total += 1
            for cid in ids:
                s = f.sample(cid)
                if s is not None and s.ok:
                    sums[cid] += s.pos
                    counts[cid] += 1
        if total == 0:
            raise BiteCoilsMissing("no usable frames during the bite-plane task")
        for cid in bite_ids:
            if counts[cid] < 0.5 * total:
                raise BiteCoilsMissing(
                    f"bite coil {cid!r} visible in {counts[cid]}/{total} frames"
                )
        avg = {cid: sums[cid] / counts[cid] for cid in ids if counts[cid]}
        if want_origin_coil:
            if counts[roles.origin] < 0.5 * total:
                raise BiteCoilsMissing(f"origin coil {roles.origin!r} not visible enough")
            origin = avg[roles.origin]
        else:
            if self.config.origin_point is None:
                raise SessionStateError("origin not recorded; run the origin task first")
            origin = self.config.origin_point
        t = bite_plane_frame(
            avg[roles.bite_left], avg[roles.bite_right], avg[roles.bite_front], origin
        )
        self.config.bite_transform = t
        return t

    def record_palate_trace(self, frames, palate_model: PcaModel, **fit_kw) -> np.ndarray:
        """Fit palate weights to the normalized track of the trace coil."""
        if self.config.bite_transform is None:
            raise NoBitePlane("record the bite plane before the palate trace")
        coil = self.config.roles.palate_trace_coil
        if coil is None:
            raise SessionStateError("no palate trace coil configured")
        pts = []
        for f in self._corrected(frames):
            g = transform_frame(f, self.config.bite_transform)
            s = g.sample(coil)
            if s is not None and s.ok:
                pts.append(s.pos)
        if not pts:
            raise EmptyTrace(f"trace coil {coil!r} produced no samples")
        fit_kw.setdefault("outer_iterations", 50)
        result = fit_palate(palate_model, np.asarray(pts), **fit_kw)
        self.config.palate_weights = result.x
        self.config.palate_residual = result.mean_residual
        return result.x


# -- the per-frame loop ------------------------------------------------------


@dataclass(frozen=True)
class ProcessedFrame:
    """One fully processed frame as handed to the sinks."""

    t: float
    seq: int
    coils: tuple[CoilSample, ...]
    x: np.ndarray | None
    y: np.ndarray | None
    vertices: np.ndarray | None
    residual: float
    iterations: int
    head_corrected: bool


class FrameProcessor:
    """head-correct -> normalize -> smooth -> fit, one frame at a time.

    Owns the smoothing and tracker state; exactly one thread may call
    process(). Tracking runs once the canonical frame exists (tracking in
    raw device coordinates would fit the model to the wrong space).
    """

    def __init__(
        self,
        cfg: SessionConfig,
        tongue_model: MultilinearModel | None = None,
        tracker: TrackerConfig | None = None,
    ):
        self.cfg = cfg
        self.tongue_model = tongue_model
        if tracker is None and tongue_model is not None and cfg.roles.tongue:
            tracker = TrackerConfig(correspondences=cfg.roles.tongue)
        self.tracker = tracker
        self.state = TrackerState.initial(tongue_model) if tongue_model is not None else None
        self.smoother = SmoothingFilter(cfg.smoothing_window)

    def set_smoothing(self, window: int):
        self.smoother = SmoothingFilter(window)
        self.cfg.smoothing_window = window

    @property
    def tracking_ready(self) -> bool:
        return (
            self.state is not None
            and self.tracker is not None
            and self.cfg.bite_transform is not None
        )

    def process(self, frame: CoilFrame) -> tuple[ProcessedFrame, str, bool]:
        """Returns (processed frame, broadcast JSON, dropout flag)."""
        cfg = self.cfg
        corrected, hc_ok = (
            head_correct(frame, cfg.roles, cfg.reference_pose)
            if cfg.reference_pose is not None
            else (frame, False)
        )
        if cfg.bite_transform is not None:
            corrected = transform_frame(corrected, cfg.bite_transform)
        smoothed = self.smoother.process(corrected)

        x = y = verts = None
        residual = float("nan")
        iters = 0
        missing_tongue = False
        if self.tracking_ready:
            coils = {}
            for c in self.tracker.correspondences:
                s = smoothed.sample(c.coil_id)
                ok = s is not None and s.ok
                coils[c.coil_id] = s.pos if ok else None
                missing_tongue = missing_tongue or not ok
            result = track_frame(self.state, self.tongue_model, self.tracker, coils)
            self.state = result.state
            x, y = self.state.x, self.state.y
            verts = result.mesh.flat()
            residual = result.residual
            iters = result.iterations

        processed = ProcessedFrame(
            t=smoothed.t,
            seq=smoothed.seq,
            coils=smoothed.coils,
            x=x,
            y=y,
            vertices=verts,
            residual=residual,
            iterations=iters,
            head_corrected=hc_ok,
        )
        dropout = (cfg.reference_pose is not None and not hc_ok) or missing_tongue
        return processed, frame_message(processed), dropout


def frame_message(p: ProcessedFrame) -> str:
    """The broadcast JSON text for one processed frame.

    Vertices are rounded to 1e-5 mm; that keeps the payload and encode
    time down at far better precision than the feedback display needs.
    """
    doc = {
        "type": "frame",
        "t": p.t,
        "coils": [{"id": c.id, "pos": c.pos.tolist(), "ok": c.ok} for c in p.coils],
        "weights": {
            "x": None if p.x is None else p.x.tolist(),
            "y": None if p.y is None else p.y.tolist(),
        },
        "vertices": None if p.vertices is None else np.round(p.vertices, 5).tolist(),
        "residual": None if math.isnan(p.residual) else p.residual,
    }
    return json.dumps(doc, separators=(",", ":"))


@dataclass
class SessionReport:
    frames: int = 0
    dropouts: int = 0
    duration_s: float = 0.0
    latency_ms_p50: float = 0.0
    latency_ms_p99: float = 0.0
    latency_ms_max: float = 0.0
    mean_iterations: float = 0.0
    mean_residual: float = float("nan")
    source_error: str | None = None
    series: "ReportSeries | None" = None

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "dropouts": self.dropouts,
            "duration_s": self.duration_s,
            "latency_ms_p50": self.latency_ms_p50,
            "latency_ms_p99": self.latency_ms_p99,
            "latency_ms_max": self.latency_ms_max,
            "mean_iterations": self.mean_iterations,
            "mean_residual": None if math.isnan(self.mean_residual) else self.mean_residual,
            "source_error": self.source_error,
        }

    def metrics_text(self) -> str:
        lines = [
            f"frames={self.frames}",
            f"dropouts={self.dropouts}",
            f"duration_s={self.duration_s:.6f}",
            f"latency_p50_ms={self.latency_ms_p50:.4f}",
            f"latency_p99_ms={self.latency_ms_p99:.4f}",
            f"latency_max_ms={self.latency_ms_max:.4f}",
            f"mean_iterations={self.mean_iterations:.3f}",
            f"mean_residual_mm={self.mean_residual:.6f}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "SessionReport":
        mr = doc.get("mean_residual")
        return cls(
            frames=int(doc.get("frames", 0)),
            dropouts=int(doc.get("dropouts", 0)),
            duration_s=float(doc.get("duration_s", 0.0)),
            latency_ms_p50=float(doc.get("latency_ms_p50", 0.0)),
            latency_ms_p99=float(doc.get("latency_ms_p99", 0.0)),
            latency_ms_max=float(doc.get("latency_ms_max", 0.0)),
            mean_iterations=float(doc.get("mean_iterations", 0.0)),
            mean_residual=float("nan") if mr is None else float(mr),
            source_error=doc.get("source_error"),
        )


@dataclass
class ReportSeries:
    """Per-frame series kept for report figures; not part of the JSON dump."""

    t: list[float] = field(default_factory=list)
    latency_ms: list[float] = field(default_factory=list)
    residual: list[float] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)
    y: list[np.ndarray] = field(default_factory=list)


class RecorderSink:
    """Writes the raw and the processed sweep; never drops frames."""

    def __init__(self, raw_path, processed_path):
        self.raw_path = raw_path
        self.processed_path = processed_path
        self.header: SweepHeader | None = None
        self._raw_frames: list[CoilFrame] = []
        self._proc_frames: list[CoilFrame] = []

    def on_start(self, header: SweepHeader, session: SessionConfig):
        self.header = header

    def on_frame(self, raw: CoilFrame, processed: ProcessedFrame, message: str):
        self._raw_frames.append(raw)
        self._proc_frames.append(
            CoilFrame(seq=processed.seq, t=processed.t, coils=processed.coils)
        )

    def on_end(self, report: SessionReport):
        from .stream import write_sweep

        write_sweep(self.raw_path, self.header, self._raw_frames)
        write_sweep(self.processed_path, self.header, self._proc_frames)


def _source_header_and_frames(source):
    from .stream import DeviceClient

    if isinstance(source, DeviceClient):
        if source.streaming:
            if source.header is None:
                raise ValueError("describe() the device before starting the stream")
            return source.header, source.frames()
        header = source.header or source.describe()
        source.start()
        return header, source.frames()
    header, frames = source
    return header, iter(frames)


def run_session(
    source,
    session: Session,
    tongue_model: MultilinearModel | None = None,
    tracker: TrackerConfig | None = None,
    sinks: tuple = (),
    keep_series: bool = False,
    max_frames: int | None = None,
    pace: bool = False,
) -> SessionReport:
    """Drive frames from a source through the pipeline into the sinks.

    The source is either a (header, frames) pair or a connected
    DeviceClient. If the session has no reference pose yet, the first
    second of frames is used to capture it (and is then processed as
    usual). Set `pace` to replay file sources at the sweep rate instead of
    as fast as possible.
    """
    cfg = session.config
    header, frames = _source_header_and_frames(source)
    processor = FrameProcessor(cfg, tongue_model=tongue_model, tracker=tracker)

    ingest: queue.Queue = queue.Queue(maxsize=1024)
    stop_ingest = threading.Event()
    source_error: list[str] = []

    def ingest_loop():
        try:
            for f in frames:
                if stop_ingest.is_set():
                    return
                ingest.put((time.monotonic(), f))
        except ConnectionLost as exc:
            source_error.append(str(exc))
        except Exception as exc:  # surfaced in the report, session ends cleanly
            source_error.append(f"{type(exc).__name__}: {exc}")
        finally:
            ingest.put(None)

    threading.Thread(target=ingest_loop, daemon=True).start()

    series = ReportSeries()
    latencies: list[float] = []
    residuals: list[float] = []
    iterations: list[int] = []
    dropouts = 0
    count = 0
    capture_buffer: list[tuple[float, CoilFrame]] = []
    capturing = cfg.reference_pose is None
    capture_n = max(1, int(round(header.rate)))  # one second of frames
    session_t0 = time.monotonic()
    sinks_list = list(sinks)

    for sink in sinks_list:
        sink.on_start(header, cfg)

    def process_one(frame: CoilFrame):
        nonlocal dropouts, count
        t_begin = time.perf_counter()
        processed, message, dropout = processor.process(frame)
        latency = time.perf_counter() - t_begin

        if dropout:
            dropouts += 1
        count += 1
        latencies.append(latency)
        if not math.isnan(processed.residual):
            residuals.append(processed.residual)
        iterations.append(processed.iterations)
        if keep_series:
            series.t.append(processed.t)
            series.latency_ms.append(latency * 1e3)
            series.residual.append(processed.residual)
            series.iterations.append(processed.iterations)
            if processed.y is not None:
                series.y.append(np.asarray(processed.y).copy())

        for sink in list(sinks_list):
            try:
                sink.on_frame(frame, processed, message)
            except Exception:
                log.exception("sink failed; disconnecting it")
                sinks_list.remove(sink)

    t_first: float | None = None

    def hold(arrival: float, frame: CoilFrame):
        """Sleep out the configured delay (plus replay pacing when asked)."""
        due = arrival + cfg.delay
        if pace and t_first is not None:
            due = max(due, session_t0 + (frame.t - t_first) + cfg.delay)
        wait = due - time.monotonic()
        if wait > 0:
            time.sleep(wait)

    while True:
        item = ingest.get()
        if item is None:
            break
        if max_frames is not None and count >= max_frames:
            stop_ingest.set()
            break
        arrival, frame = item
        if t_first is None:
            t_first = frame.t

        if capturing:
            capture_buffer.append((arrival, frame))
            if len(capture_buffer) >= capture_n:
                Session(cfg).capture_reference([f for _, f in capture_buffer])
                capturing = False
                for buf_arrival, buffered in capture_buffer:
                    hold(buf_arrival, buffered)
                    process_one(buffered)
                capture_buffer = []
            continue

        hold(arrival, frame)
        process_one(frame)

    if capturing and capture_buffer:
        # short source: capture from what we have, then process it all
        Session(cfg).capture_reference([f for _, f in capture_buffer])
        for _, buffered in capture_buffer:
            process_one(buffered)

    lat = np.asarray(latencies) * 1e3 if latencies else np.zeros(1)
    report = SessionReport(
        frames=count,
        dropouts=dropouts,
        duration_s=time.monotonic() - session_t0,
        latency_ms_p50=float(np.percentile(lat, 50)),
        latency_ms_p99=float(np.percentile(lat, 99)),
        latency_ms_max=float(lat.max()),
        mean_iterations=float(np.mean(iterations)) if iterations else 0.0,
        mean_residual=float(np.mean(residuals)) if residuals else float("nan"),
        source_error=source_error[0] if source_error else None,
        series=series if keep_series else None,
    )
    for sink in list(sinks_list):
        try:
            sink.on_end(report)
        except Exception:
            log.exception("sink failed during shutdown")
    return report
