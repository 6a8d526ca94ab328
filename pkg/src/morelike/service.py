"""HTTP session service for interactive constraint feedback.

A session pins a trained checkpoint and a fixed noise vector per seed slot;
each added constraint regenerates every slot from the full history. Events
are appended to a JSON-lines log; previous-output references are snapshotted
by value so replay reproduces every image exactly.
"""

from __future__ import annotations

import base64
import json
import os
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import engine as eg
from .checkpoint import CheckpointError
from .data import Dataset
from .engine import Tensor
from .generator import generate
from .semantic import Constraint, ConstraintSet, satisfies
from .training import load_generator, sample_z


class ApiError(Exception):
    def __init__(self, status: int, error: str, detail: str):
        self.status = status
        self.error = error
        self.detail = detail
        super().__init__(detail)


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except Exception:
        raise ApiError(422, "invalid_ref", "payload is not valid base64") from None


def image_to_payload(image: np.ndarray) -> dict:
    """[3,H,W] floats in [-1,1] -> raw RGB8 rows, base64 in JSON."""
    h, w = image.shape[1], image.shape[2]
    u8 = np.clip(np.rint((image.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return {"width": w, "height": h, "rgb8_b64": _b64(u8.transpose(1, 2, 0).tobytes())}


def payload_to_image(payload: dict) -> np.ndarray:
    try:
        w, h = int(payload["width"]), int(payload["height"])
        raw = _unb64(payload["rgb8_b64"])
    except (KeyError, TypeError, ValueError):
        raise ApiError(422, "invalid_ref", "upload needs width, height, rgb8_b64") from None
    if len(raw) != w * h * 3:
        raise ApiError(
            422, "invalid_ref", f"payload length {len(raw)} != width*height*3 = {w * h * 3}"
        )
    u8 = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return (u8.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).transpose(2, 0, 1)


def _f32_to_stored(image: np.ndarray) -> dict:
    return {
        "shape": list(image.shape),
        "b64": _b64(np.ascontiguousarray(image, dtype="<f4").tobytes()),
    }


def _stored_to_f32(stored: dict) -> np.ndarray:
    raw = _unb64(stored["b64"])
    return np.frombuffer(raw, dtype="<f4").reshape(stored["shape"]).astype(np.float32)


@dataclass
class ResolvedRef:
    image: np.ndarray
    stored: dict  # replay-exact form for the event log
    display: dict  # what the UI shows in the history list


@dataclass
class Session:
    id: str
    checkpoint_id: str
    n_seeds: int
    zs: list
    events: list = field(default_factory=list)
    history: list = field(default_factory=list)  # (pos ResolvedRef, neg ResolvedRef)
    outputs: list | None = None  # per-seed [3,H,W]
    satisfaction: list | None = None  # per-seed list of booleans per constraint
    phis: list | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)


class Service:
    def __init__(self, checkpoints_dir: str, dataset_dir: str, data_dir: str):
        self.checkpoints_dir = checkpoints_dir
        self.data_dir = data_dir
        self.dataset = Dataset(dataset_dir)
        self.sessions: dict[str, Session] = {}
        self._loaded: dict[str, tuple] = {}
        self._store_lock = threading.Lock()
        os.makedirs(os.path.join(data_dir, "sessions"), exist_ok=True)

    # checkpoints -------------------------------------------------------
    def list_checkpoints(self) -> list[dict]:
        items = []
        if not os.path.isdir(self.checkpoints_dir):
            return items
        for name in sorted(os.listdir(self.checkpoints_dir)):
            manifest = os.path.join(self.checkpoints_dir, name, "manifest.json")
            if not os.path.isfile(manifest):
                continue
            with open(manifest) as f:
                m = json.load(f)
            items.append({"id": name, "kind": m.get("kind"), "iteration": m.get("iteration")})
        return items

    def load(self, checkpoint_id: str):
        with self._store_lock:
            if checkpoint_id in self._loaded:
                return self._loaded[checkpoint_id]
        path = os.path.join(self.checkpoints_dir, checkpoint_id)
        try:
            gen_params, cfg, space, _ = load_generator(path)
        except CheckpointError as e:
            raise ApiError(404, "not_found", f"unknown checkpoint {checkpoint_id!r}: {e}")
        if space is None:
            raise ApiError(404, "not_found", f"checkpoint {checkpoint_id!r} has no semantic space")
        entry = (gen_params, cfg, space)
        with self._store_lock:
            self._loaded[checkpoint_id] = entry
        return entry

    # sessions ----------------------------------------------------------
    def _log_path(self, session_id: str) -> str:
        return os.path.join(self.data_dir, "sessions", f"{session_id}.jsonl")

    def _append_event(self, session: Session, event: dict) -> None:
        session.events.append(event)
        with open(self._log_path(session.id), "a") as f:
            f.write(json.dumps(event, sort_keys=True) + "\n")

    def create_session(self, checkpoint_id: str, n_seeds: int = 3,
                       rng_seed: int | None = None, session_id: str | None = None) -> Session:
        if n_seeds < 1:
            raise ApiError(422, "validation", "n_seeds must be >= 1")
        _, cfg, _ = self.load(checkpoint_id)
        rng = np.random.default_rng(rng_seed)
        zs = [sample_z(rng, (cfg.gen.n_z,), cfg.z_dist) for _ in range(n_seeds)]
        session = Session(
            id=session_id or uuid.uuid4().hex[:12],
            checkpoint_id=checkpoint_id,
            n_seeds=n_seeds,
            zs=zs,
        )
        with self._store_lock:
            self.sessions[session.id] = session
        self._append_event(
            session,
            {
                "type": "create",
                "session_id": session.id,
                "checkpoint_id": checkpoint_id,
                "n_seeds": n_seeds,
                "z_b64": [_f32_to_stored(z) for z in zs],
            },
        )
        return session

    def get_session(self, session_id: str) -> Session:
        with self._store_lock:
            session = self.sessions.get(session_id)
        if session is None:
            raise ApiError(404, "not_found", f"unknown session {session_id!r}")
        return session

    def resolve_ref(self, session: Session, ref: dict) -> ResolvedRef:
        if not isinstance(ref, dict) or len(ref) != 1:
            raise ApiError(
                422, "invalid_ref",
                "ref must be one of {dataset}, {upload}, {previous_output}",
            )
        _, cfg, _ = self.load(session.checkpoint_id)
        size = cfg.gen.image_size
        if "dataset" in ref:
            image_id = ref["dataset"]
            if not isinstance(image_id, int) or not (0 <= image_id < len(self.dataset)):
                raise ApiError(404, "not_found", f"unknown dataset image {image_id!r}")
            img = self.dataset.image(image_id)
            if img.shape[1] != size:
                raise ApiError(422, "invalid_ref", "dataset image geometry mismatch")
            return ResolvedRef(img, {"dataset": image_id}, {"kind": "dataset", "id": image_id})
        if "upload" in ref:
            img = payload_to_image(ref["upload"])
            if img.shape != (3, size, size):
                raise ApiError(
                    422, "invalid_ref",
                    f"upload is {img.shape[2]}x{img.shape[1]}, model wants {size}x{size}",
                )
            return ResolvedRef(img, {"upload": _f32_to_stored(img)}, {"kind": "upload"})
        if "previous_output" in ref:
            idx = ref["previous_output"]
            if session.outputs is None:
                raise ApiError(409, "invalid_state", "session has no outputs yet")
            if not isinstance(idx, int) or not (0 <= idx < session.n_seeds):
                raise ApiError(422, "invalid_ref", f"seed slot {idx!r} out of range")
            img = session.outputs[idx].copy()
            return ResolvedRef(
                img,
                {"snapshot": _f32_to_stored(img)},
                {"kind": "previous_output", "seed": idx},
            )
        raise ApiError(422, "invalid_ref", f"unknown ref form {sorted(ref)}")

    def _stored_to_resolved(self, stored: dict, display: dict) -> ResolvedRef:
        if "dataset" in stored:
            return ResolvedRef(self.dataset.image(stored["dataset"]), stored, display)
        if "upload" in stored:
            return ResolvedRef(_stored_to_f32(stored["upload"]), stored, display)
        if "snapshot" in stored:
            return ResolvedRef(_stored_to_f32(stored["snapshot"]), stored, display)
        raise ApiError(422, "invalid_ref", f"unreadable stored ref {sorted(stored)}")

    def _regenerate(self, session: Session) -> None:
        if not session.history:
            session.outputs = None
            session.satisfaction = None
            session.phis = None
            return
        gen_params, cfg, space = self.load(session.checkpoint_id)
        cs = ConstraintSet(
            [Constraint(pos.image, neg.image) for pos, neg in session.history]
        )
        outputs, sats, phis = [], [], []
        for z in session.zs:
            with eg.no_grad():
                img = generate(cs, Tensor(z), gen_params, cfg.gen.p).data
            outputs.append(img)
            sats.append([satisfies(img, c, space) for c in cs])
            phis.append([float(v) for v in space.embed_array(img[None])[0]])
        session.outputs = outputs
        session.satisfaction = sats
        session.phis = phis

    def add_constraint(self, session_id: str, pos_ref: dict, neg_ref: dict) -> Session:
        session = self.get_session(session_id)
        with session.lock:
            pos = self.resolve_ref(session, pos_ref)
            neg = self.resolve_ref(session, neg_ref)
            session.history.append((pos, neg))
            self._append_event(
                session,
                {
                    "type": "add_constraint",
                    "pos": {"stored": pos.stored, "display": pos.display},
                    "neg": {"stored": neg.stored, "display": neg.display},
                },
            )
            self._regenerate(session)
        return session

    def undo(self, session_id: str) -> Session:
        session = self.get_session(session_id)
        with session.lock:
            if not session.history:
                raise ApiError(409, "invalid_state", "nothing to undo")
            session.history.pop()
            self._append_event(session, {"type": "undo"})
            self._regenerate(session)
        return session

    def persist_session(self, session_id: str, path: str | None = None) -> str:
        """Rewrite the full event log (identical to the live appended one)."""
        session = self.get_session(session_id)
        path = path or self._log_path(session_id)
        with session.lock, open(path, "w") as f:
            for event in session.events:
                f.write(json.dumps(event, sort_keys=True) + "\n")
        return path

    def replay_session(self, log_path: str, expect_checkpoint: str | None = None) -> Session:
        """Rebuild a session from its event log; outputs match bit-for-bit."""
        try:
            with open(log_path) as f:
                events = [json.loads(line) for line in f if line.strip()]
        except (OSError, json.JSONDecodeError) as e:
            raise ApiError(422, "invalid_ref", f"unreadable session log: {e}") from None
        if not events or events[0].get("type") != "create":
            raise ApiError(422, "invalid_ref", "session log must start with a create event")
        head = events[0]
        if expect_checkpoint and head["checkpoint_id"] != expect_checkpoint:
            raise ApiError(
                409, "invalid_state",
                f"log was recorded against checkpoint {head['checkpoint_id']!r}, "
                f"not {expect_checkpoint!r}",
            )
        self.load(head["checkpoint_id"])  # 404 if missing
        session = Session(
            id=head["session_id"],
            checkpoint_id=head["checkpoint_id"],
            n_seeds=head["n_seeds"],
            zs=[_stored_to_f32(z) for z in head["z_b64"]],
            events=[head],
        )
        for event in events[1:]:
            if event["type"] == "add_constraint":
                pos = self._stored_to_resolved(event["pos"]["stored"], event["pos"]["display"])
                neg = self._stored_to_resolved(event["neg"]["stored"], event["neg"]["display"])
                session.history.append((pos, neg))
            elif event["type"] == "undo":
                if not session.history:
                    raise ApiError(422, "invalid_ref", "undo in log with empty history")
                session.history.pop()
            else:
                raise ApiError(422, "invalid_ref", f"unknown event type {event['type']!r}")
            session.events.append(event)
        with self._store_lock:
            self.sessions[session.id] = session
        with session.lock:
            self._regenerate(session)
        return session

    def session_state(self, session: Session) -> dict:
        with session.lock:
            history = [
                {
                    "pos": {**pos.display, "image": image_to_payload(pos.image)},
                    "neg": {**neg.display, "image": image_to_payload(neg.image)},
                }
                for pos, neg in session.history
            ]
            return {
                "session_id": session.id,
                "checkpoint_id": session.checkpoint_id,
                "n_seeds": session.n_seeds,
                "history": history,
                "outputs": None
                if session.outputs is None
                else [image_to_payload(img) for img in session.outputs],
                "satisfaction": session.satisfaction,
                "phi": session.phis,
            }


def create_app(checkpoints_dir: str, dataset_dir: str, data_dir: str,
               ui_dir: str | None = None) -> FastAPI:
    service = Service(checkpoints_dir, dataset_dir, data_dir)
    app = FastAPI(title="morelike", docs_url=None, redoc_url=None)
    app.state.service = service
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        return JSONResponse({"error": exc.error, "detail": exc.detail}, status_code=exc.status)

    @app.exception_handler(RequestValidationError)
    async def handle_validation(request: Request, exc: RequestValidationError):
        return JSONResponse(
            {"error": "validation", "detail": str(exc.errors())}, status_code=422
        )

    @app.get("/health")
    def health():
        return {"status": "ok", "dataset_images": len(service.dataset)}

    @app.get("/checkpoints")
    def checkpoints():
        return {"items": service.list_checkpoints()}

    @app.post("/sessions")
    def create_session(body: dict):
        if "checkpoint_id" not in body:
            raise ApiError(422, "validation", "checkpoint_id is required")
        session = service.create_session(
            body["checkpoint_id"],
            n_seeds=int(body.get("n_seeds", 3)),
            rng_seed=body.get("rng_seed"),
        )
        return service.session_state(session)

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return service.session_state(service.get_session(session_id))

    @app.post("/sessions/{session_id}/constraints")
    def add_constraint(session_id: str, body: dict):
        if "pos" not in body or "neg" not in body:
            raise ApiError(422, "validation", "body needs pos and neg refs")
        session = service.add_constraint(session_id, body["pos"], body["neg"])
        return service.session_state(session)

    @app.post("/sessions/{session_id}/undo")
    def undo(session_id: str):
        return service.session_state(service.undo(session_id))

    @app.get("/images")
    def list_images(offset: int = 0, limit: int = 60):
        if offset < 0 or limit < 1:
            raise ApiError(422, "validation", "offset must be >= 0 and limit >= 1")
        ids = service.dataset.ids[offset : offset + limit]
        items = []
        for i in ids:
            meta = service.dataset.meta(i)
            items.append(
                {
                    "id": i,
                    "meta": meta.to_json(),
                    "image": image_to_payload(service.dataset.image(i)),
                }
            )
        return {"total": len(service.dataset), "offset": offset, "items": items}

    @app.get("/images/{image_id}")
    def get_image(image_id: int):
        if not (0 <= image_id < len(service.dataset)):
            raise ApiError(404, "not_found", f"unknown image id {image_id}")
        return {
            "id": image_id,
            "meta": service.dataset.meta(image_id).to_json(),
            "image": image_to_payload(service.dataset.image(image_id)),
        }

    if ui_dir and os.path.isdir(ui_dir):
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
