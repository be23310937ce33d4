"""EMA data ingestion: sweep files, device simulator and its client.

The simulator speaks EMA-RT/1 over TCP. The client sends ASCII command
lines (HELLO EMA-RT/1, DESCRIBE, SINGLE, START <rate_hz>, STOP, BYE); the
server answers `OK <cmd>` / `ERR <code> <message>` lines and, where a
command produces data, binary messages framed as a 4-byte big-endian
payload length followed by UTF-8 JSON. Payloads are capped at 16 MiB,
which also keeps the two framings distinguishable on the client side: a
length prefix always starts with byte 0x00 or 0x01, an ASCII reply line
never does. A finite source signals exhaustion with a `{"type":"end"}`
message.
"""

from __future__ import annotations

import csv
import json
import logging
import socket
import threading
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConnectionLost, FormatError, ProtocolError
from .models import MultilinearModel, generate_synthetic_model, multilinear_vertices

log = logging.getLogger(__name__)

PROTOCOL_NAME = "EMA-RT/1"
MAX_PAYLOAD = 16 * 1024 * 1024


@dataclass(frozen=True)
class CoilSample:
    """One coil in one frame; `ok` false means the sensor reading is invalid."""

    id: str
    pos: np.ndarray
    ori: np.ndarray | None = None
    ok: bool = True

    def __post_init__(self):
        pos = np.asarray(self.pos, dtype=np.float64).reshape(3)
        pos.flags.writeable = False
        object.__setattr__(self, "pos", pos)
        if self.ori is not None:
            ori = np.asarray(self.ori, dtype=np.float64).reshape(4)
            if abs(np.linalg.norm(ori) - 1.0) > 1e-6:
                raise ValueError("orientation quaternion must be unit length")
            ori.flags.writeable = False
            object.__setattr__(self, "ori", ori)


@dataclass(frozen=True)
class CoilFrame:
    seq: int
    t: float
    coils: tuple[CoilSample, ...]

    def __post_init__(self):
        coils = tuple(self.coils)
        ids = [c.id for c in coils]
        if len(set(ids)) != len(ids):
            raise ValueError("coil ids must be unique within a frame")
        if self.seq < 0:
            raise ValueError("seq must be non-negative")
        object.__setattr__(self, "coils", coils)

    def sample(self, coil_id: str) -> CoilSample | None:
        for c in self.coils:
            if c.id == coil_id:
                return c
        return None

    def positions(self, only_ok: bool = True) -> dict[str, np.ndarray]:
        return {c.id: c.pos for c in self.coils if c.ok or not only_ok}


@dataclass(frozen=True)
class SweepHeader:
    rate: float
    coil_ids: tuple[str, ...]

    def __post_init__(self):
        ids = tuple(str(i) for i in self.coil_ids)
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if len(set(ids)) != len(ids):
            raise ValueError("coil ids must be unique")
        object.__setattr__(self, "coil_ids", ids)


# -- sweep files -------------------------------------------------------------


def read_sweep(path) -> tuple[SweepHeader, list[CoilFrame]]:
    """Read a .jsonl or .csv sweep; frames come back ordered by t with seq
    regenerated from 0. Missing positions become ok=false samples."""
    p = str(path)
    if p.endswith(".jsonl"):
        header, frames = _read_jsonl(p)
    elif p.endswith(".csv"):
        header, frames = _read_csv(p)
    else:
        raise FormatError(f"{p}: unrecognized sweep extension (want .jsonl or .csv)")
    frames.sort(key=lambda f: f.t)
    frames = [
        CoilFrame(seq=i, t=f.t, coils=f.coils) for i, f in enumerate(frames)
    ]
    return header, frames


def _read_jsonl(path) -> tuple[SweepHeader, list[CoilFrame]]:
    frames: list[CoilFrame] = []
    header = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: bad JSON ({exc})") from exc
            if header is None:
                if not isinstance(doc, dict) or doc.get("type") != "header":
                    raise FormatError(f"{path}:{lineno}: first line must be the header")
                try:
                    header = SweepHeader(rate=float(doc["rate"]), coil_ids=tuple(doc["coils"]))
                except (KeyError, TypeError, ValueError) as exc:
                    raise FormatError(f"{path}:{lineno}: bad header ({exc})") from exc
                continue
            try:
                t = float(doc["t"])
                pos = doc.get("pos", {})
                ori = doc.get("ori", {})
                unknown = set(pos) - set(header.coil_ids)
                if unknown:
                    raise ValueError(f"unknown coil id {sorted(unknown)[0]!r}")
                coils = []
                for cid in header.coil_ids:
                    if cid in pos:
                        coils.append(
                            CoilSample(
                                id=cid,
                                pos=np.asarray(pos[cid], dtype=np.float64),
                                ori=np.asarray(ori[cid], dtype=np.float64) if cid in ori else None,
                                ok=True,
                            )
                        )
                    else:
                        coils.append(CoilSample(id=cid, pos=np.zeros(3), ok=False))
                frames.append(CoilFrame(seq=len(frames), t=t, coils=tuple(coils)))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: bad frame ({exc})") from exc
    if header is None:
        raise FormatError(f"{path}: empty sweep file")
    return header, frames


def _read_csv(path) -> tuple[SweepHeader, list[CoilFrame]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            cols = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty sweep file") from None
        if not cols or cols[0] != "t" or (len(cols) - 1) % 3 != 0:
            raise FormatError(f"{path}:1: header must be t,<id>_x,<id>_y,<id>_z[,...]")
        ids = []
        for k in range(1, len(cols), 3):
            triple = cols[k : k + 3]
            base = triple[0].rsplit("_", 1)
            if len(base) != 2 or [s.rsplit("_", 1)[1] for s in triple] != ["x", "y", "z"]:
                raise FormatError(f"{path}:1: bad coordinate columns {triple}")
            if any(s.rsplit("_", 1)[0] != base[0] for s in triple):
                raise FormatError(f"{path}:1: mixed coil ids in {triple}")
            ids.append(base[0])

        frames: list[CoilFrame] = []
        times: list[float] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(cols):
                raise FormatError(f"{path}:{lineno}: expected {len(cols)} cells, got {len(row)}")
            try:
                t = float(row[0])
                coils = []
                for i, cid in enumerate(ids):
                    cells = row[1 + 3 * i : 4 + 3 * i]
                    if any(c.strip() == "" for c in cells):
                        coils.append(CoilSample(id=cid, pos=np.zeros(3), ok=False))
                    else:
                        coils.append(CoilSample(id=cid, pos=[float(c) for c in cells]))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric field ({exc})") from exc
            times.append(t)
            frames.append(CoilFrame(seq=len(frames), t=t, coils=tuple(coils)))

    # the CSV layout carries no rate; recover it from the time axis
    if len(times) >= 2:
        rate = 1.0 / float(np.median(np.diff(sorted(times))))
    else:
        rate = 100.0
    return SweepHeader(rate=rate, coil_ids=tuple(ids)), frames


def write_sweep(path, header: SweepHeader, frames) -> None:
    """Write .jsonl (positions, orientations, ok flags) or .csv (positions)."""
    p = str(path)
    if p.endswith(".jsonl"):
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(
                json.dumps(
                    {"type": "header", "rate": header.rate, "coils": list(header.coil_ids)},
                    separators=(",", ":"),
                )
                + "\n"
            )
            for f in frames:
                pos = {c.id: [float(v) for v in c.pos] for c in f.coils if c.ok}
                doc: dict = {"t": f.t, "pos": pos}
                ori = {c.id: [float(v) for v in c.ori] for c in f.coils if c.ok and c.ori is not None}
                if ori:
                    doc["ori"] = ori
                fh.write(json.dumps(doc, separators=(",", ":")) + "\n")
    elif p.endswith(".csv"):
        with open(p, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"{cid}_{ax}" for cid in header.coil_ids for ax in "xyz"])
            for f in frames:
                row: list = [repr(float(f.t))]
                for cid in header.coil_ids:
                    s = f.sample(cid)
                    if s is None or not s.ok:
                        row.extend(["", "", ""])
                    else:
                        row.extend(repr(float(v)) for v in s.pos)
                writer.writerow(row)
    else:
        raise FormatError(f"{p}: unrecognized sweep extension (want .jsonl or .csv)")


# -- wire encoding -----------------------------------------------------------


def frame_to_wire(frame: CoilFrame, seq: int | None = None) -> dict:
    return {
        "type": "frame",
        "seq": frame.seq if seq is None else seq,
        "t": frame.t,
        "coils": [
            {
                "id": c.id,
                "pos": [float(v) for v in c.pos],
                "ori": None if c.ori is None else [float(v) for v in c.ori],
                "ok": c.ok,
            }
            for c in frame.coils
        ],
    }


def wire_to_frame(doc: dict) -> CoilFrame:
    try:
        coils = tuple(
            CoilSample(
                id=str(c["id"]),
                pos=np.asarray(c["pos"], dtype=np.float64),
                ori=None if c.get("ori") is None else np.asarray(c["ori"], dtype=np.float64),
                ok=bool(c["ok"]),
            )
            for c in doc["coils"]
        )
        return CoilFrame(seq=int(doc["seq"]), t=float(doc["t"]), coils=coils)
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed frame message: {exc}") from exc


def encode_message(doc: dict) -> bytes:
    payload = json.dumps(doc, separators=(",", ":")).encode("utf-8")
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds 16 MiB cap")
    return len(payload).to_bytes(4, "big") + payload


def decode_payload(payload: bytes) -> dict:
    try:
        doc = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"payload is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "type" not in doc:
        raise ProtocolError("payload must be an object with a type field")
    return doc


# -- frame sources -----------------------------------------------------------


class SweepSource:
    """Finite playback source; every cursor replays from the start.

    Timestamps come from the file; seq is regenerated by the stream layer.
    """

    def __init__(self, header: SweepHeader, frames):
        self.header = header
        self.frames = list(frames)

    def cursor(self):
        return _ListCursor(self.frames)


class _ListCursor:
    def __init__(self, frames):
        self.frames = frames
        self.pos = 0

    def next_frame(self) -> CoilFrame | None:
        if self.pos >= len(self.frames):
            return None
        f = self.frames[self.pos]
        self.pos += 1
        return f


# canonical scenario geometry (mm): reference coils on the head, bite plate
# in the mouth with the front coil at the incisor origin
_SCENARIO_REFERENCE = {
    "ref1": np.array([0.0, 85.0, 35.0]),
    "ref2": np.array([55.0, 20.0, 55.0]),
    "ref3": np.array([-55.0, 20.0, 55.0]),
}
_SCENARIO_BITE = {
    "bl": np.array([22.0, -35.0, 0.0]),
    "br": np.array([-22.0, -35.0, 0.0]),
    "bf": np.array([0.0, 0.0, 0.0]),
}
SCENARIO_TONGUE_COILS = ("tt", "tb", "td")


class ScenarioSource:
    """Deterministic synthetic subject: reference, bite and tongue coils.

    Tongue coils follow a bilinear model along a smooth pose trajectory at
    fixed anatomy; the whole head moves rigidly after `still_until`
    seconds (it is still during setup tasks, as a subject would be asked
    to be). Frames are generated lazily, so the source can run for hours.
    """

    def __init__(
        self,
        seed: int = 0,
        rate: float = 100.0,
        model: MultilinearModel | None = None,
        duration: float | None = None,
        still_until: float = 6.0,
        amplitude: float = 0.6,
    ):
        self.rate = float(rate)
        self.duration = duration
        self.still_until = float(still_until)
        self.model = model if model is not None else generate_synthetic_model(seed, n=2, m=3, grid=10)
        rng = np.random.default_rng(seed)
        self.x_true = rng.standard_normal(self.model.n)
        self.freqs = 0.6 + 0.4 * rng.random(self.model.m)
        self.phases = 2 * np.pi * rng.random(self.model.m)
        self.amplitude = float(amplitude)
        v = self.model.num_vertices
        self.vertex_indices = tuple(
            int(round(frac * (v - 1))) for frac in (0.15, 0.5, 0.85)
        )
        self.header = SweepHeader(
            rate=self.rate,
            coil_ids=tuple(_SCENARIO_REFERENCE) + tuple(_SCENARIO_BITE) + SCENARIO_TONGUE_COILS,
        )

    def pose_weights(self, t: float) -> np.ndarray:
        return self.amplitude * np.sin(2 * np.pi * self.freqs * t + self.phases)

    def head_pose(self, t: float):
        """Rigid head motion as rotation matrix + translation."""
        from .geometry import RigidTransform

        if t <= self.still_until:
            return RigidTransform.identity()
        tau = t - self.still_until
        # ease in so motion (and its derivatives) start from zero
        ramp = min(1.0, tau / 2.0)
        ang = ramp * np.deg2rad(4.0) * np.sin(2 * np.pi * 0.4 * tau)
        axis = np.array([0.3, 0.9, 0.3])
        axis /= np.linalg.norm(axis)
        q = np.concatenate([[np.cos(ang / 2)], np.sin(ang / 2) * axis])
        shift = ramp * np.array(
            [3.0 * np.sin(2 * np.pi * 0.25 * tau), 2.0 * np.sin(2 * np.pi * 0.35 * tau), 1.5 * np.cos(2 * np.pi * 0.3 * tau)]
        )
        return RigidTransform(q, shift)

    def frame_at(self, k: int) -> CoilFrame:
        t = k / self.rate
        pose = self.head_pose(t)
        verts = multilinear_vertices(self.model, self.x_true, self.pose_weights(t)).reshape(-1, 3)
        coils = []
        for cid, p in _SCENARIO_REFERENCE.items():
            coils.append(CoilSample(id=cid, pos=pose.apply(p)))
        for cid, p in _SCENARIO_BITE.items():
            coils.append(CoilSample(id=cid, pos=pose.apply(p)))
        for cid, vi in zip(SCENARIO_TONGUE_COILS, self.vertex_indices):
            coils.append(CoilSample(id=cid, pos=pose.apply(verts[vi])))
        return CoilFrame(seq=k, t=t, coils=tuple(coils))

    def cursor(self):
        return _ScenarioCursor(self)

    def correspondences(self):
        from .models import Correspondence

        return tuple(
            Correspondence(cid, vi) for cid, vi in zip(SCENARIO_TONGUE_COILS, self.vertex_indices)
        )


class _ScenarioCursor:
    def __init__(self, src: ScenarioSource):
        self.src = src
        self.k = 0

    def next_frame(self) -> CoilFrame | None:
        if self.src.duration is not None and self.k / self.src.rate >= self.src.duration:
            return None
        f = self.src.frame_at(self.k)
        self.k += 1
        return f


def synthetic_sweep(
    seed: int = 0, duration: float = 10.0, rate: float = 100.0, **kw
) -> tuple[SweepHeader, list[CoilFrame], ScenarioSource]:
    """Materialize a scenario as a finite sweep (plus the source for truth)."""
    src = ScenarioSource(seed=seed, rate=rate, duration=duration, **kw)
    cur = src.cursor()
    frames = []
    while True:
        f = cur.next_frame()
        if f is None:
            break
        frames.append(f)
    return src.header, frames, src


# -- device server -----------------------------------------------------------


class DeviceServer:
    """EMA-RT/1 simulator; one command reader and one paced writer per client."""

    def __init__(self, source, bind=("127.0.0.1", 0), rate: float | None = None):
        if isinstance(source, (str,)) or hasattr(source, "__fspath__"):
            header, frames = read_sweep(source)
            source = SweepSource(header, frames)
        elif isinstance(source, tuple) and len(source) == 2:
            source = SweepSource(source[0], source[1])
        self.source = source
        self.default_rate = float(rate) if rate is not None else float(source.header.rate)
        self._listener = socket.create_server(bind)
        self.address = self._listener.getsockname()
        self._closed = threading.Event()
        self._conns: set[socket.socket] = set()
        self._lock = threading.Lock()
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self):
        while not self._closed.is_set():
            try:
                conn, addr = self._listener.accept()
            except OSError:
                return
            if self._closed.is_set():
                try:
                    conn.close()
                except OSError:
                    pass
                return
            with self._lock:
                self._conns.add(conn)
            threading.Thread(target=self._serve_client, args=(conn, addr), daemon=True).start()

    def _serve_client(self, conn: socket.socket, addr):
        log.debug("client connected: %s", addr)
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        write_lock = threading.Lock()
        stop_ev = threading.Event()
        stream_thread: threading.Thread | None = None
        cursor = self.source.cursor()
        hello_done = False

        def send_line(text: str):
            with write_lock:
                conn.sendall((text + "\n").encode("ascii"))

        def send_message(doc: dict):
            data = encode_message(doc)
            with write_lock:
                conn.sendall(data)

        def stop_streaming():
            nonlocal stream_thread
            if stream_thread is not None and stream_thread.is_alive():
                stop_ev.set()
                stream_thread.join()
            stop_ev.clear()
            stream_thread = None

        try:
            rfile = conn.makefile("rb")
            while True:
                raw = rfile.readline()
                if not raw:
                    break
                try:
                    line = raw.decode("ascii").strip()
                except UnicodeDecodeError:
                    send_line("ERR 400 command must be ascii")
                    continue
                if not line:
                    continue
                parts = line.split()
                cmd = parts[0].upper()

                if not hello_done:
                    if cmd == "HELLO":
                        if len(parts) == 2 and parts[1] == PROTOCOL_NAME:
                            hello_done = True
                            send_line("OK HELLO")
                        else:
                            send_line("ERR 505 unsupported protocol")
                    else:
                        send_line("ERR 426 hello required")
                    continue

                if cmd == "DESCRIBE":
                    send_line("OK DESCRIBE")
                    send_message(
                        {
                            "type": "description",
                            "rate": self.default_rate,
                            "coils": list(self.source.header.coil_ids),
                        }
                    )
                elif cmd == "SINGLE":
                    frame = cursor.next_frame()
                    send_line("OK SINGLE")
                    if frame is None:
                        send_message({"type": "end"})
                    else:
                        send_message(frame_to_wire(frame))
                elif cmd == "START":
                    if stream_thread is not None and stream_thread.is_alive():
                        send_line("ERR 409 already streaming")
                        continue
                    rate = self.default_rate
                    if len(parts) > 1:
                        try:
                            rate = float(parts[1])
                        except ValueError:
                            rate = -1.0
                    if not rate > 0:
                        send_line("ERR 400 bad rate")
                        continue
                    send_line("OK START")
                    stop_ev.clear()
                    stream_thread = threading.Thread(
                        target=self._stream_loop,
                        args=(send_message, cursor, rate, stop_ev),
                        daemon=True,
                    )
                    stream_thread.start()
                elif cmd == "STOP":
                    stop_streaming()
                    send_line("OK STOP")
                elif cmd == "BYE":
                    stop_streaming()
                    send_line("OK BYE")
                    break
                else:
                    send_line("ERR 400 unknown command")
        except (OSError, ValueError):
            pass
        finally:
            stop_ev.set()
            if stream_thread is not None and stream_thread.is_alive():
                stream_thread.join(timeout=2.0)
            try:
                conn.close()
            except OSError:
                pass
            with self._lock:
                self._conns.discard(conn)
            log.debug("client gone: %s", addr)

    @staticmethod
    def _stream_loop(send_message, cursor, rate: float, stop_ev: threading.Event):
        period = 1.0 / rate
        next_due = time.monotonic()
        seq = 0
        try:
            while not stop_ev.is_set():
                frame = cursor.next_frame()
                if frame is None:
                    send_message({"type": "end"})
                    return
                send_message(frame_to_wire(frame, seq=seq))
                seq += 1
                next_due += period
                delay = next_due - time.monotonic()
                if delay > 0:
                    stop_ev.wait(delay)
        except OSError:
            return

    def close(self):
        self._closed.set()
        # a blocked accept() is not interrupted by close(); poke it awake
        try:
            with socket.create_connection(self.address, timeout=1.0):
                pass
        except OSError:
            pass
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RDWR)  # wakes the reader thread and EOFs the peer
            except OSError:
                pass
            try:
                c.close()
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_device(source, bind=("127.0.0.1", 0), rate: float | None = None) -> DeviceServer:
    """Start the simulator; returns a handle with .address and .close()."""
    return DeviceServer(source, bind=bind, rate=rate)


# -- device client -----------------------------------------------------------


class _Reader:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.buf = b""

    def _fill(self) -> bool:
        try:
            chunk = self.sock.recv(65536)
        except OSError as exc:
            raise ConnectionLost(f"socket error: {exc}") from exc
        if not chunk:
            return False
        self.buf += chunk
        return True

    def read_exact(self, n: int) -> bytes | None:
        while len(self.buf) < n:
            if not self._fill():
                return None
        out, self.buf = self.buf[:n], self.buf[n:]
        return out

    def read_line(self) -> str | None:
        while b"\n" not in self.buf:
            if not self._fill():
                return None
        raw, self.buf = self.buf.split(b"\n", 1)
        return raw.decode("ascii", errors="replace").rstrip("\r")


class DeviceClient:
    """Synchronous single-consumer EMA-RT/1 client."""

    def __init__(self, address):
        if isinstance(address, str):
            host, _, port = address.rpartition(":")
            address = (host or "127.0.0.1", int(port))
        self.sock = socket.create_connection(tuple(address), timeout=30.0)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._reader = _Reader(self.sock)
        self.closed_cleanly = False
        self.streaming = False
        self.header: SweepHeader | None = None
        self._send_line(f"HELLO {PROTOCOL_NAME}")
        self._expect_ok("HELLO")

    # one event = ("line", str) or ("message", dict)
    def _read_event(self):
        first = self._reader.read_exact(1)
        if first is None:
            raise ConnectionLost("server closed the connection")
        if first[0] <= 0x01:
            rest = self._reader.read_exact(3)
            if rest is None:
                raise ConnectionLost("connection dropped inside a frame header")
            length = int.from_bytes(first + rest, "big")
            if length > MAX_PAYLOAD:
                raise ProtocolError(f"frame length {length} exceeds 16 MiB cap")
            payload = self._reader.read_exact(length)
            if payload is None:
                raise ConnectionLost("connection dropped inside a frame payload")
            return "message", decode_payload(payload)
        # ASCII reply line; put the byte back and read to newline
        self._reader.buf = first + self._reader.buf
        line = self._reader.read_line()
        if line is None:
            raise ConnectionLost("connection dropped inside a reply line")
        return "line", line

    def _send_line(self, text: str):
        try:
            self.sock.sendall((text + "\n").encode("ascii"))
        except OSError as exc:
            raise ConnectionLost(f"send failed: {exc}") from exc

    def _expect_ok(self, cmd: str):
        kind, value = self._read_event()
        if kind != "line":
            raise ProtocolError(f"expected a reply line to {cmd}, got a data message")
        if value != f"OK {cmd}":
            raise ProtocolError(f"server refused {cmd}: {value}")

    def describe(self) -> SweepHeader:
        self._send_line("DESCRIBE")
        self._expect_ok("DESCRIBE")
        kind, doc = self._read_event()
        if kind != "message" or doc.get("type") != "description":
            raise ProtocolError("expected a description message")
        self.header = SweepHeader(rate=float(doc["rate"]), coil_ids=tuple(doc["coils"]))
        return self.header

    def single(self) -> CoilFrame | None:
        self._send_line("SINGLE")
        self._expect_ok("SINGLE")
        kind, doc = self._read_event()
        if kind != "message":
            raise ProtocolError("expected a data message after OK SINGLE")
        if doc.get("type") == "end":
            return None
        if doc.get("type") != "frame":
            raise ProtocolError(f"unexpected message type {doc.get('type')!r}")
        return wire_to_frame(doc)

    def start(self, rate: float | None = None):
        self._send_line("START" if rate is None else f"START {rate:g}")
        self._expect_ok("START")
        self.streaming = True

    def frames(self):
        """Yield streamed frames until the source ends or stop() is called."""
        while self.streaming:
            kind, value = self._read_event()
            if kind == "message":
                if value.get("type") == "end":
                    self.streaming = False
                    return
                if value.get("type") != "frame":
                    raise ProtocolError(f"unexpected message type {value.get('type')!r}")
                yield wire_to_frame(value)
            else:
                raise ProtocolError(f"unexpected reply during stream: {value}")

    def stop(self):
        """Halt streaming; in-flight frames are drained and discarded."""
        if not self.streaming:
            return
        self._send_line("STOP")
        while True:
            kind, value = self._read_event()
            if kind == "line":
                if value != "OK STOP":
                    raise ProtocolError(f"server refused STOP: {value}")
                break
        self.streaming = False

    def bye(self):
        if self.closed_cleanly:
            return
        try:
            self._send_line("BYE")
            while True:
                kind, value = self._read_event()
                if kind == "line":
                    if value != "OK BYE":
                        raise ProtocolError(f"server refused BYE: {value}")
                    break
            self.closed_cleanly = True
        finally:
            try:
                self.sock.close()
            except OSError:
                pass

    def close(self):
        try:
            self.bye()
        except (ConnectionLost, ProtocolError, OSError):
            try:
                self.sock.close()
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def connect_device(address) -> DeviceClient:
    """Connect and perform the HELLO handshake."""
    return DeviceClient(address)
