"""WebSocket broadcast of processed frames and the control channel.

Each connected client gets a writer thread fed by a small outbound state:
control messages (hello/mesh/state/error) queue up and are never dropped,
while frame messages share a single newest-wins slot, so a slow viewer
coalesces frames instead of stalling the pipeline.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import deque

from websockets.sync.server import serve as ws_serve

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1


class _Client:
    def __init__(self, connection):
        self.connection = connection
        self.lock = threading.Lock()
        self.wake = threading.Condition(self.lock)
        self.control: deque[str] = deque()
        self.latest_frame: str | None = None
        self.closed = False
        self.writer = threading.Thread(target=self._write_loop, daemon=True)
        self.writer.start()

    def send_control(self, text: str):
        with self.wake:
            self.control.append(text)
            self.wake.notify()

    def send_control_json(self, doc: dict):
        self.send_control(json.dumps(doc))

    def offer_frame(self, text: str):
        with self.wake:
            self.latest_frame = text  # older pending frame is dropped
            self.wake.notify()

    def close(self):
        with self.wake:
            self.closed = True
            self.wake.notify()

    def _write_loop(self):
        while True:
            with self.wake:
                while not self.closed and not self.control and self.latest_frame is None:
                    self.wake.wait()
                if self.closed:
                    return
                batch = list(self.control)
                self.control.clear()
                frame = self.latest_frame
                self.latest_frame = None
            try:
                for text in batch:
                    self.connection.send(text)
                if frame is not None:
                    self.connection.send(frame)
            except Exception:
                self.close()
                return


class BroadcastHub:
    """Accepts viewers, replays the scene snapshot, and fans out messages.

    `controller` gets on_connect(client) -> iterable of snapshot dicts and
    on_message(client, doc) for everything a viewer sends; raising
    ValueError there turns into an error message for that client only.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0, controller=None):
        self.controller = controller
        self._clients: set[_Client] = set()
        self._lock = threading.Lock()
        self._server = ws_serve(self._handler, host, port)
        self.address = self._server.socket.getsockname()
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def url(self) -> str:
        return f"ws://{self.address[0]}:{self.address[1]}"

    def _handler(self, connection):
        client = _Client(connection)
        with self._lock:
            self._clients.add(client)
        try:
            client.send_control(json.dumps({"type": "hello", "version": PROTOCOL_VERSION}))
            if self.controller is not None:
                for doc in self.controller.on_connect(client):
                    client.send_control(json.dumps(doc))
            for raw in connection:
                try:
                    doc = json.loads(raw)
                    if not isinstance(doc, dict) or "type" not in doc:
                        raise ValueError("message must be an object with a type")
                    if self.controller is None:
                        raise ValueError("no controller attached")
                    self.controller.on_message(client, doc)
                except ValueError as exc:
                    client.send_control(
                        json.dumps({"type": "error", "code": 400, "message": str(exc)})
                    )
                except Exception:
                    log.exception("control message failed")
                    client.send_control(
                        json.dumps({"type": "error", "code": 500, "message": "internal error"})
                    )
        except Exception:
            pass
        finally:
            client.close()
            with self._lock:
                self._clients.discard(client)

    def broadcast_frame(self, message: str):
        with self._lock:
            clients = list(self._clients)
        for c in clients:
            c.offer_frame(message)

    def broadcast(self, doc: dict):
        text = json.dumps(doc)
        with self._lock:
            clients = list(self._clients)
        for c in clients:
            c.send_control(text)

    def client_count(self) -> int:
        with self._lock:
            return len(self._clients)

    def close(self):
        self._server.shutdown()
        with self._lock:
            clients = list(self._clients)
        for c in clients:
            c.close()
            try:
                c.connection.close()
            except Exception:
                pass


class BroadcastSink:
    """run_session sink that fans frames out to the hub."""

    def __init__(self, hub: BroadcastHub):
        self.hub = hub

    def on_start(self, header, cfg):
        pass

    def on_frame(self, raw, processed, message: str):
        self.hub.broadcast_frame(message)

    def on_end(self, report):
        pass


def mesh_message(name: str, vertices, faces) -> dict:
    return {
        "type": "mesh",
        "name": name,
        "vertices": [float(v) for v in vertices],
        "faces": [[int(i) for i in f] for f in faces],
    }


def state_message(phase: str, roles: dict) -> dict:
    return {"type": "state", "phase": phase, "roles": roles}
