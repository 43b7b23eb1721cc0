"""Local HTTP service for the live design loop: scene editing, wind runs,
and a server-push event stream.

Endpoints (JSON bodies/responses) under /api/v1:

  POST /api/v1/sessions                        -> {"session", "version"}
  GET  /api/v1/sessions/{sid}/scene            -> scene + version + dirty + violations
  POST /api/v1/sessions/{sid}/blocks/{id}/pose -> {"version"} (404/422)
  POST /api/v1/sessions/{sid}/wind/run         -> {"run", "version"} (409 if active)
  GET  /api/v1/sessions/{sid}/wind             -> field export + version tag (404 if none)
  GET  /api/v1/sessions/{sid}/track            -> scripted moving-camera demo run
  GET  /api/v1/sessions/{sid}/stream           -> newline-delimited JSON events

Mutations are serialized per session under one lock; the wind solve runs on
a worker thread against an immutable scene snapshot and tags its result with
the scene version it was computed from. Every subscriber sees events in the
same order (broadcast happens under the session lock).
"""

from __future__ import annotations

import json
import math
import queue
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .errors import BlockwindError
from .scene import Scene, validate_scene
from .se3 import Pose, Rotation, pose_from_dict, pose_to_dict
from .synth import generate_scene, geometric_occlusions, orbit_trajectory
from .tracking import SyntheticEstimator, TrackerConfig, run_pass
from .wind import GridSpec, run_to_steady, voxelize

__all__ = ["SceneSession", "BlockwindService", "make_server", "serve_forever"]

DEFAULT_BIND = ("127.0.0.1", 7780)

_ROUTES = {
    "scene": re.compile(r"^/api/v1/sessions/([^/]+)/scene$"),
    "pose": re.compile(r"^/api/v1/sessions/([^/]+)/blocks/([^/]+)/pose$"),
    "wind_run": re.compile(r"^/api/v1/sessions/([^/]+)/wind/run$"),
    "wind": re.compile(r"^/api/v1/sessions/([^/]+)/wind$"),
    "track": re.compile(r"^/api/v1/sessions/([^/]+)/track$"),
    "stream": re.compile(r"^/api/v1/sessions/([^/]+)/stream$"),
}


class _HttpError(Exception):
    def __init__(self, status: int, message: str):
        self.status = status
        self.message = message
        super().__init__(message)


class SceneSession:
    """One editable scene, its version counter, and its latest wind result."""

    def __init__(self, session_id: str, scene: Scene):
        self.session_id = session_id
        self.scene = scene
        self.version = 0
        self.lock = threading.RLock()
        self.subscribers: list[queue.SimpleQueue] = []
        self.wind_result: dict | None = None  # export dict, version-tagged
        self.wind_active = False
        self.wind_run_counter = 0

    @property
    def dirty(self) -> bool:
        """True when the scene changed since the last completed solve."""
        if self.wind_result is None:
            return True
        return self.wind_result["version_tag"] != self.version

    def broadcast(self, event: dict) -> None:
        with self.lock:
            for q in self.subscribers:
                q.put(event)

    def subscribe(self) -> queue.SimpleQueue:
        q: queue.SimpleQueue = queue.SimpleQueue()
        with self.lock:
            self.subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.SimpleQueue) -> None:
        with self.lock:
            if q in self.subscribers:
                self.subscribers.remove(q)


def _default_scene() -> Scene:
    # The tabletop setup: three equal blocks in a row.
    return generate_scene(3, "row")


class BlockwindService:
    """Session store and operations; transport-independent."""

    def __init__(self, scene_factory=_default_scene, snapshot_path: str | Path | None = None):
        self._sessions: dict[str, SceneSession] = {}
        self._scene_factory = scene_factory
        self._counter = 0
        self._lock = threading.Lock()
        self.snapshot_path = Path(snapshot_path) if snapshot_path else None
        if self.snapshot_path and self.snapshot_path.exists():
            self._load_snapshot()

    # -- session management -------------------------------------------------

    def create_session(self) -> SceneSession:
        with self._lock:
            sid = f"s{self._counter}"
            self._counter += 1
            session = SceneSession(sid, self._scene_factory())
            self._sessions[sid] = session
        return session

    def session(self, sid: str) -> SceneSession:
        try:
            return self._sessions[sid]
        except KeyError:
            raise _HttpError(404, f"unknown session '{sid}'") from None

    # -- operations ----------------------------------------------------------

    def get_scene(self, sid: str) -> dict:
        s = self.session(sid)
        with s.lock:
            return {
                "scene": s.scene.to_json_dict(),
                "version": s.version,
                "dirty": s.dirty,
                "violations": validate_scene(s.scene),
            }

    def post_block_pose(self, sid: str, block_id: str, body: dict) -> dict:
        s = self.session(sid)
        pose = self._parse_pose(body, block_id)
        with s.lock:
            if block_id not in s.scene.world_poses:
                raise _HttpError(404, f"unknown block '{block_id}'")
            s.scene = s.scene.with_pose(block_id, pose)
            s.version += 1
            version = s.version
            s.broadcast({"event": "scene_updated", "version": version})
        return {"version": version}

    @staticmethod
    def _parse_pose(body: dict, block_id: str) -> Pose:
        try:
            if "R" in body:
                rotation = Rotation.from_matrix(np.asarray(body["R"], dtype=np.float64))
                t = np.asarray(body["t"], dtype=np.float64).reshape(3)
                return Pose(rotation, t, src=block_id, dst="world")
            q = np.asarray(body["q"], dtype=np.float64).reshape(4)
            if abs(float(np.linalg.norm(q)) - 1.0) > 1e-6:
                raise ValueError(f"quaternion norm {np.linalg.norm(q):.6f} is not 1")
            pose = pose_from_dict({**body, "src": block_id, "dst": "world"})
            return pose
        except (ValueError, KeyError, TypeError) as e:
            raise _HttpError(422, f"invalid pose: {e}") from None

    def start_wind_run(self, sid: str, spec_body: dict) -> dict:
        s = self.session(sid)
        try:
            spec = GridSpec.from_json_dict(spec_body)
        except (TypeError, ValueError) as e:
            raise _HttpError(422, f"invalid grid spec: {e}") from None
        with s.lock:
            if s.wind_active:
                raise _HttpError(409, "a wind run is already active for this session")
            s.wind_active = True
            s.wind_run_counter += 1
            run_id = s.wind_run_counter
            scene_snapshot = s.scene  # immutable
            version_tag = s.version
        worker = threading.Thread(
            target=self._wind_worker,
            args=(s, scene_snapshot, version_tag, spec),
            daemon=True,
        )
        worker.start()
        return {"run": run_id, "version": version_tag}

    def _wind_worker(self, s: SceneSession, scene: Scene, version_tag: int, spec: GridSpec):
        try:
            mask = voxelize(scene, spec)
            s.broadcast({"event": "wind_progress", "iter": 0, "residual": None})

            def progress(iteration, residual):
                s.broadcast(
                    {"event": "wind_progress", "iter": iteration, "residual": residual}
                )

            field = run_to_steady(mask, spec, tol=1e-4, max_iters=20_000, progress=progress)
            export = {
                "version_tag": version_tag,
                "spec": spec.to_json_dict(),
                "converged": field.converged,
                "iterations": field.iterations,
                "rho": [float(v) for v in field.rho.ravel()],
                "ux": [float(v) for v in field.ux.ravel()],
                "uy": [float(v) for v in field.uy.ravel()],
                "solid": [bool(v) for v in mask.solid.ravel()],
            }
            with s.lock:
                s.wind_result = export
                s.wind_active = False
                s.broadcast({"event": "wind_done", "version": version_tag})
        except BlockwindError as e:
            with s.lock:
                s.wind_active = False
                s.broadcast({"event": "wind_failed", "reason": str(e)})

    def get_wind(self, sid: str) -> dict:
        s = self.session(sid)
        with s.lock:
            if s.wind_result is None:
                raise _HttpError(404, "no wind result for this session yet")
            return {**s.wind_result, "dirty": s.dirty}

    def demo_track(self, sid: str, params: dict) -> dict:
        """Scripted moving-camera tracking run over the session scene, for
        the provenance inspector: orbit camera, scheduled occlusion, anchor
        inference."""
        s = self.session(sid)
        with s.lock:
            scene = s.scene
        frames = int(params.get("frames", 40))
        seed = int(params.get("seed", 0))
        sigma_deg = float(params.get("sigma_deg", 0.0))
        frames = max(2, min(frames, 400))
        traj = orbit_trajectory(frames, orbit_radius=1.2, height=0.7)
        occlusions = {}
        occlude = params.get("occlude")
        if occlude and occlude in scene.world_poses:
            a, b = frames // 3, 2 * frames // 3
            occlusions[occlude] = [(a, b)]
        else:
            occlusions = geometric_occlusions(scene, traj)
        est = SyntheticEstimator(
            scene,
            list(traj.poses),
            sigma_rot=math.radians(sigma_deg),
            occlusions=occlusions,
            seed=seed,
        )
        try:
            out = run_pass(est, scene, TrackerConfig(mode="moving_camera"))
        except BlockwindError as e:
            raise _HttpError(422, f"tracking failed: {e}") from None
        entries = []
        for block_id in sorted(out):
            traj_out = out[block_id]
            for i in range(traj_out.first_frame, traj_out.last_frame + 1):
                entry = traj_out.entry_at(i)
                entries.append(
                    {
                        "block": block_id,
                        "frame": i,
                        "pose": pose_to_dict(entry.pose),
                        "provenance": entry.provenance.to_str(),
                    }
                )
        return {"frames": frames, "entries": entries}

    # -- persistence ----------------------------------------------------------

    def save_snapshot(self) -> None:
        if self.snapshot_path is None:
            return
        with self._lock:
            data = {
                "counter": self._counter,
                "sessions": {
                    sid: {"scene": s.scene.to_json_dict(), "version": s.version}
                    for sid, s in self._sessions.items()
                },
            }
        self.snapshot_path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n")

    def _load_snapshot(self) -> None:
        data = json.loads(self.snapshot_path.read_text())
        self._counter = int(data.get("counter", 0))
        for sid, blob in data.get("sessions", {}).items():
            session = SceneSession(sid, Scene.from_json_dict(blob["scene"]))
            session.version = int(blob.get("version", 0))
            self._sessions[sid] = session


class _Handler(BaseHTTPRequestHandler):
    service: BlockwindService = None  # injected by make_server
    static_dir: Path | None = None
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default
        pass

    # -- helpers --------------------------------------------------------------

    def _json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload, sort_keys=True).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length == 0:
            return {}
        try:
            return json.loads(self.rfile.read(length))
        except json.JSONDecodeError as e:
            raise _HttpError(400, f"body is not valid JSON: {e}") from None

    def _route(self, name: str):
        m = _ROUTES[name].match(self.path.split("?")[0])
        return m.groups() if m else None

    def _query(self) -> dict:
        if "?" not in self.path:
            return {}
        out = {}
        for part in self.path.split("?", 1)[1].split("&"):
            if "=" in part:
                k, v = part.split("=", 1)
                out[k] = v
        return out

    # -- verbs ----------------------------------------------------------------

    def do_POST(self):
        try:
            if self.path.split("?")[0] == "/api/v1/sessions":
                session = self.service.create_session()
                self._json(201, {"session": session.session_id, "version": session.version})
                return
            if m := self._route("pose"):
                sid, block_id = m
                self._json(200, self.service.post_block_pose(sid, block_id, self._read_body()))
                return
            if m := self._route("wind_run"):
                self._json(202, self.service.start_wind_run(m[0], self._read_body()))
                return
            self._json(404, {"error": f"no such endpoint: POST {self.path}"})
        except _HttpError as e:
            self._json(e.status, {"error": e.message})

    def do_GET(self):
        try:
            if m := self._route("scene"):
                self._json(200, self.service.get_scene(m[0]))
                return
            if m := self._route("wind"):
                self._json(200, self.service.get_wind(m[0]))
                return
            if m := self._route("track"):
                self._json(200, self.service.demo_track(m[0], self._query()))
                return
            if m := self._route("stream"):
                self._stream(m[0])
                return
            if self._serve_static():
                return
            self._json(404, {"error": f"no such endpoint: GET {self.path}"})
        except _HttpError as e:
            self._json(e.status, {"error": e.message})
        except (BrokenPipeError, ConnectionResetError):
            pass

    def _stream(self, sid: str) -> None:
        session = self.service.session(sid)
        q = session.subscribe()
        self.send_response(200)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Connection", "close")
        self.end_headers()
        try:
            self.wfile.write(
                (json.dumps({"event": "hello", "version": session.version}) + "\n").encode()
            )
            self.wfile.flush()
            while True:
                try:
                    event = q.get(timeout=1.0)
                except queue.Empty:
                    # Keepalive doubles as a disconnect probe.
                    self.wfile.write(b'{"event":"ping"}\n')
                    self.wfile.flush()
                    continue
                self.wfile.write((json.dumps(event, sort_keys=True) + "\n").encode())
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            session.unsubscribe(q)

    def _serve_static(self) -> bool:
        if self.static_dir is None:
            return False
        rel = self.path.split("?")[0].lstrip("/") or "index.html"
        target = (self.static_dir / rel).resolve()
        if not str(target).startswith(str(self.static_dir.resolve())) or not target.is_file():
            return False
        body = target.read_bytes()
        ctype = {
            ".html": "text/html",
            ".js": "text/javascript",
            ".css": "text/css",
            ".json": "application/json",
        }.get(target.suffix, "application/octet-stream")
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)
        return True


def make_server(
    host: str = DEFAULT_BIND[0],
    port: int = DEFAULT_BIND[1],
    scene_factory=_default_scene,
    snapshot_path: str | Path | None = None,
    static_dir: str | Path | None = None,
) -> tuple[ThreadingHTTPServer, BlockwindService]:
    """Build the HTTP server; caller runs serve_forever (or a thread does)."""
    service = BlockwindService(scene_factory=scene_factory, snapshot_path=snapshot_path)
    handler = type(
        "BoundHandler",
        (_Handler,),
        {
            "service": service,
            "static_dir": Path(static_dir) if static_dir else None,
        },
    )
    httpd = ThreadingHTTPServer((host, port), handler)
    httpd.daemon_threads = True
    return httpd, service


def serve_forever(
    host: str = DEFAULT_BIND[0],
    port: int = DEFAULT_BIND[1],
    snapshot_path: str | Path | None = None,
    static_dir: str | Path | None = None,
) -> None:
    httpd, service = make_server(
        host, port, snapshot_path=snapshot_path, static_dir=static_dir
    )
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.save_snapshot()
        httpd.server_close()
