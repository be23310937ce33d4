"""Interactive feedback service: source playback, session tasks, broadcast.

This is the live counterpart of run_session. Viewers connect over
WebSocket, watch processed frames, and steer the session: assign coil
roles, run the reference / bite-plane / palate tasks, start playback from
a device or file, and tune smoothing/delay. Task ordering is enforced
here as well as surfaced to clients through the state message.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .broadcast import BroadcastHub, mesh_message, state_message
from .errors import ArticfeedError
from .fitting import TrackerConfig
from .models import MultilinearModel, PcaModel, reconstruct_multilinear, reconstruct_pca
from .pipeline import (
    FrameProcessor,
    ReportSeries,
    Session,
    SessionConfig,
    SessionReport,
    _source_header_and_frames,
)
from .stream import connect_device, read_sweep

log = logging.getLogger(__name__)

TASKS = ("reference", "biteplane", "palate")


@dataclass
class _Stats:
    frames: int = 0
    dropouts: int = 0
    latencies: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    started: float = field(default_factory=time.monotonic)
    source_error: str | None = None
    series: "ReportSeries | None" = None


class FeedbackService:
    """Owns the session state machine and the broadcast hub."""

    def __init__(
        self,
        config: SessionConfig,
        tongue_model: MultilinearModel | None = None,
        palate_model: PcaModel | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
        tracker: TrackerConfig | None = None,
        keep_series: bool = False,
    ):
        self.session = Session(config)
        self.tongue_model = tongue_model
        self.palate_model = palate_model
        self._tracker = tracker
        self.processor = FrameProcessor(config, tongue_model, tracker)
        self._lock = threading.RLock()
        self._task_name: str | None = None
        self._task_frames: list = []
        self._play_thread: threading.Thread | None = None
        self._stop_play = threading.Event()
        self._source_close = None
        self.stats = _Stats(series=ReportSeries() if keep_series else None)
        self.hub = BroadcastHub(host, port, controller=self)

    # -- hub controller interface -----------------------------------------

    def on_connect(self, client):
        cfg = self.session.config
        msgs = []
        if self.tongue_model is not None:
            state = self.processor.state
            mesh = reconstruct_multilinear(self.tongue_model, state.x, state.y)
            msgs.append(mesh_message("tongue", mesh.flat(), mesh.faces))
        if self.palate_model is not None and cfg.palate_weights is not None:
            mesh = reconstruct_pca(self.palate_model, cfg.palate_weights)
            msgs.append(mesh_message("palate", mesh.flat(), mesh.faces))
        msgs.append(state_message(cfg.phase, cfg.roles.to_dict()))
        return msgs

    def on_message(self, client, doc: dict):
        kind = doc.get("type")
        if kind == "set_roles":
            self._set_roles(doc)
        elif kind == "task":
            self._task(client, str(doc.get("name")), str(doc.get("action")))
        elif kind == "play":
            self._play(doc)
        elif kind == "stop":
            self.stop_playback()
        elif kind == "set":
            self._set(doc)
        else:
            raise ValueError(f"unknown message type {kind!r}")

    # -- control actions ----------------------------------------------------

    def _set_roles(self, doc: dict):
        from .pipeline import CoilRoles

        roles_doc = doc.get("roles", {k: v for k, v in doc.items() if k != "type"})
        try:
            roles = CoilRoles.from_dict(roles_doc)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"bad roles: {exc}") from exc
        with self._lock:
            cfg = self.session.config
            cfg.roles = roles
            self.processor = FrameProcessor(cfg, self.tongue_model, self._tracker)
        self._broadcast_state()

    def _task(self, client, name: str, action: str):
        if name not in TASKS:
            raise ValueError(f"unknown task {name!r}")
        if action == "start":
            err = self._task_precondition(name)
            if err:
                client.send_control_json({"type": "error", "code": 409, "message": err})
                return
            with self._lock:
                self._task_name = name
                self._task_frames = []
            self._broadcast_state()
        elif action == "stop":
            with self._lock:
                if self._task_name != name:
                    raise ValueError(f"task {name!r} is not running")
                frames = self._task_frames
                self._task_name = None
                self._task_frames = []
            self._finish_task(client, name, frames)
        else:
            raise ValueError(f"unknown task action {action!r}")

    def _task_precondition(self, name: str) -> str | None:
        cfg = self.session.config
        if name == "biteplane" and cfg.reference_pose is None:
            return "capture the reference pose before the bite plane"
        if name == "palate":
            if cfg.bite_transform is None:
                return "record the bite plane before the palate trace"
            if self.palate_model is None:
                return "no palate model loaded"
        return None

    def _finish_task(self, client, name: str, frames):
        try:
            if name == "reference":
                self.session.capture_reference(frames)
            elif name == "biteplane":
                self.session.record_bite_plane(frames)
            elif name == "palate":
                self.session.record_palate_trace(frames, self.palate_model)
                mesh = reconstruct_pca(self.palate_model, self.session.config.palate_weights)
                self.hub.broadcast(mesh_message("palate", mesh.flat(), mesh.faces))
        except ArticfeedError as exc:
            client.send_control_json({"type": "error", "code": 409, "message": str(exc)})
        self._broadcast_state()

    def _play(self, doc: dict):
        source = doc.get("source")
        path = doc.get("path")
        if source not in ("device", "file"):
            raise ValueError("play.source must be 'device' or 'file'")
        if not path:
            raise ValueError("play.path is required")
        with self._lock:
            if self._play_thread is not None and self._play_thread.is_alive():
                raise ValueError("already playing")
            self._stop_play.clear()
            self._play_thread = threading.Thread(
                target=self._play_loop, args=(source, path), daemon=True
            )
            self._play_thread.start()

    def start_playback(self, source: str, path: str):
        """Programmatic equivalent of the play message."""
        self._play({"source": source, "path": path})

    def run_task_for(self, name: str, seconds: float):
        """Record one task over a wall-clock window of the running playback."""
        err = self._task_precondition(name)
        if err:
            raise ArticfeedError(err)
        with self._lock:
            self._task_name = name
            self._task_frames = []
        self._broadcast_state()
        time.sleep(seconds)
        with self._lock:
            frames = self._task_frames
            self._task_name = None
            self._task_frames = []
        if name == "reference":
            self.session.capture_reference(frames)
        elif name == "biteplane":
            self.session.record_bite_plane(frames)
        elif name == "palate":
            self.session.record_palate_trace(frames, self.palate_model)
            mesh = reconstruct_pca(self.palate_model, self.session.config.palate_weights)
            self.hub.broadcast(mesh_message("palate", mesh.flat(), mesh.faces))
        else:
            raise ValueError(f"unknown task {name!r}")
        self._broadcast_state()

    def stop_playback(self):
        self._stop_play.set()
        close = self._source_close
        if close is not None:
            try:
                close()
            except Exception:
                pass
        thread = self._play_thread
        if thread is not None:
            thread.join(timeout=10.0)

    def wait_playback(self, timeout: float | None = None) -> bool:
        thread = self._play_thread
        if thread is None:
            return True
        thread.join(timeout=timeout)
        return not thread.is_alive()

    # -- playback loop --------------------------------------------------------

    def _play_loop(self, source: str, path: str):
        client = None
        try:
            if source == "device":
                client = connect_device(path)
                header, frames = _source_header_and_frames(client)
                self._source_close = lambda: client.sock.close()
                paced = False  # a live device paces itself
            else:
                header, frame_list = read_sweep(path)
                frames = iter(frame_list)
                self._source_close = None
                paced = True
            cfg = self.session.config
            t0 = time.monotonic()
            t_first = None
            for frame in frames:
                if self._stop_play.is_set():
                    break
                if t_first is None:
                    t_first = frame.t
                if paced:
                    due = t0 + (frame.t - t_first) + cfg.delay
                else:
                    due = time.monotonic() + cfg.delay
                wait = due - time.monotonic()
                if wait > 0:
                    time.sleep(wait)
                with self._lock:
                    if self._task_name is not None:
                        self._task_frames.append(frame)
                    processor = self.processor
                t_begin = time.perf_counter()
                processed, message, dropout = processor.process(frame)
                latency = time.perf_counter() - t_begin
                st = self.stats
                st.frames += 1
                st.dropouts += int(dropout)
                st.latencies.append(latency)
                st.iterations.append(processed.iterations)
                if processed.residual == processed.residual:  # not NaN
                    st.residuals.append(processed.residual)
                if st.series is not None:
                    st.series.t.append(processed.t)
                    st.series.latency_ms.append(latency * 1e3)
                    st.series.residual.append(processed.residual)
                    st.series.iterations.append(processed.iterations)
                    if processed.y is not None:
                        st.series.y.append(np.asarray(processed.y).copy())
                self.hub.broadcast_frame(message)
        except ArticfeedError as exc:
            self.stats.source_error = str(exc)
            log.warning("source ended with error: %s", exc)
        except Exception as exc:
            self.stats.source_error = f"{type(exc).__name__}: {exc}"
            log.exception("playback failed")
        finally:
            if client is not None:
                try:
                    client.close()
                except Exception:
                    pass
            self._source_close = None
            self._broadcast_state()

    # -- misc ----------------------------------------------------------------

    def _set(self, doc: dict):
        key = doc.get("key")
        value = doc.get("value")
        cfg = self.session.config
        if key == "smoothing_window":
            window = int(value)
            if window < 1 or window % 2 == 0:
                raise ValueError("smoothing_window must be an odd integer >= 1")
            with self._lock:
                self.processor.set_smoothing(window)
        elif key == "delay":
            delay = float(value)
            if delay < 0:
                raise ValueError("delay must be >= 0")
            with self._lock:
                cfg.delay = delay
        else:
            raise ValueError(f"unknown setting {key!r}")

    def _broadcast_state(self):
        cfg = self.session.config
        self.hub.broadcast(state_message(cfg.phase, cfg.roles.to_dict()))

    def report(self) -> SessionReport:
        st = self.stats
        lat = np.asarray(st.latencies) * 1e3 if st.latencies else np.zeros(1)
        return SessionReport(
            frames=st.frames,
            dropouts=st.dropouts,
            duration_s=time.monotonic() - st.started,
            latency_ms_p50=float(np.percentile(lat, 50)),
            latency_ms_p99=float(np.percentile(lat, 99)),
            latency_ms_max=float(lat.max()),
            mean_iterations=float(np.mean(st.iterations)) if st.iterations else 0.0,
            mean_residual=float(np.mean(st.residuals)) if st.residuals else float("nan"),
            source_error=st.source_error,
            series=st.series,
        )

    def close(self):
        self.stop_playback()
        self.hub.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
