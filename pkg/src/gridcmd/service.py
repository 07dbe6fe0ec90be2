"""HTTP session service: drive evaluation episodes over a JSON API with
server-sent events, so a console (or script) can watch the grid live and
inject instruction overrides at macro boundaries.

Lifecycle per session. Interactive sessions sit in `awaiting_override` at
every macro boundary holding the generator's proposal; POST /override with
accept=true uses it (no intervention counted), accept=false plus a
grammatical instruction applies the human's command (one intervention).
Non-interactive sessions run on a background thread. Every env step emits a
`state_changed` event, every boundary a `macro_proposal`, every episode end
an `episode_finished`; events carry strictly increasing sequence numbers and
reconnecting clients replay from any `after` cursor.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import StreamingResponse
from fastapi.staticfiles import StaticFiles
from pathlib import Path

from .grammar import NonGrammatical, normalize, parse
from .models import CheckpointError, ParamStore, load_checkpoint
from .runtime import EpisodeRunner, RuntimeConfig
from .world import observe

IDLE_TIMEOUT_S = 30 * 60
KEEPALIVE_S = 15.0


class Session:
    def __init__(self, sid: str, cfg: RuntimeConfig, gen, ctrl):
        self.id = sid
        self.cfg = cfg
        self.gen = gen
        self.ctrl = ctrl
        self.lock = threading.RLock()
        self.new_event = threading.Condition(self.lock)
        self.events: list = []
        self.seq = 0
        self.phase = "stepping"
        self.pending: Optional[str] = None
        self.episode_index = 0
        self.successes = 0
        self.interventions_total = 0
        self.finished_episodes = 0
        self.last_active = time.monotonic()
        self.runner: Optional[EpisodeRunner] = None
        self._start_episode()

    # -- internals (callers hold self.lock unless noted) ---------------------

    def _start_episode(self) -> None:
        seeds = self.cfg.episode_seeds()
        seed = seeds[self.episode_index]
        self.runner = EpisodeRunner(
            self.gen, self.ctrl, self.cfg, seed, on_step=self._on_env_step
        )

    def _emit(self, kind: str, payload: dict) -> None:
        self.seq += 1
        self.events.append({"seq": self.seq, "type": kind, "payload": payload})
        self.new_event.notify_all()

    def _on_env_step(self, state) -> None:
        self._emit("state_changed", self._state_payload())

    def _state_payload(self) -> dict:
        state = self.runner.state
        return {
            "t": state.t,
            "episode": self.episode_index,
            "grid": observe(state).tolist(),
            "agent": {"x": state.agent.x, "y": state.agent.y, "dir": int(state.agent.dir)},
            "carrying": None if state.carrying is None else state.carrying.word,
            "done": state.done,
        }

    def _metrics(self) -> dict:
        done = self.finished_episodes
        return {
            "episodes_completed": done,
            "tc_percent": self.successes / done if done else 0.0,
            "avg_hi": self.interventions_total / done if done else 0.0,
            "interventions_total": self.interventions_total,
            "interventions_this_episode": self.runner.trace.interventions if self.runner else 0,
        }

    def _finish_episode(self) -> None:
        trace = self.runner.trace
        self.finished_episodes += 1
        self.successes += trace.success
        self.interventions_total += trace.interventions
        last = self.episode_index + 1 >= self.cfg.n_episodes
        self._emit(
            "episode_finished",
            {
                "episode": self.episode_index,
                "success": trace.success,
                "interventions": trace.interventions,
                "env_steps": trace.env_steps,
                "aborted": False,
                "session_complete": last,
                **self._metrics(),
            },
        )
        if last:
            self.phase = "finished"
        else:
            self.episode_index += 1
            self._start_episode()

    def _advance_one_macro(self, final: str, generated: str, intervened: bool) -> None:
        self.phase = "stepping"
        self.runner.apply(generated, final, intervened)
        if self.runner.done:
            self._finish_episode()
        if self.phase != "finished" and self.cfg.intervention == "interactive":
            self._propose()

    def _propose(self) -> None:
        self.pending = self.runner.propose()
        self.phase = "awaiting_override"
        self._emit(
            "macro_proposal",
            {"t": self.runner.state.t, "episode": self.episode_index, "instruction": self.pending},
        )

    # -- public surface -------------------------------------------------------

    def start(self) -> None:
        with self.lock:
            self.last_active = time.monotonic()
            if self.cfg.intervention == "interactive":
                self._propose()
            else:
                thread = threading.Thread(target=self._run_scripted, daemon=True)
                thread.start()

    def _run_scripted(self) -> None:
        while True:
            with self.lock:
                if self.phase == "finished":
                    return
                generated = self.runner.propose()
                final, intervened = self.runner.resolve(generated)
                self._advance_one_macro(final, generated, intervened)

    def snapshot(self) -> dict:
        with self.lock:
            self.last_active = time.monotonic()
            return {
                "id": self.id,
                "phase": self.phase,
                "seq": self.seq,
                "pending_instruction": self.pending if self.phase == "awaiting_override" else None,
                "config": self.cfg.to_json(),
                "state": self._state_payload(),
                "metrics": self._metrics(),
            }

    def submit_override(self, accept: bool, instruction: Optional[str]) -> dict:
        with self.lock:
            self.last_active = time.monotonic()
            if self.phase != "awaiting_override":
                raise HTTPException(status_code=409, detail=f"phase is {self.phase}")
            generated = self.pending
            if accept:
                final, intervened = self.runner.resolve(generated)[0], False
            else:
                if not instruction:
                    raise HTTPException(status_code=422, detail="instruction required")
                try:
                    parse(instruction)
                except NonGrammatical:
                    raise HTTPException(
                        status_code=422, detail=f"not in the instruction language: {instruction!r}"
                    ) from None
                final, intervened = normalize(instruction), True
            self.pending = None
            self._advance_one_macro(final, generated, intervened)
            return {"applied": final, "intervened": intervened, "metrics": self._metrics()}

    def abort(self) -> None:
        with self.lock:
            if self.phase != "finished":
                self.phase = "finished"
                self._emit(
                    "episode_finished",
                    {
                        "episode": self.episode_index,
                        "success": False,
                        "aborted": True,
                        "session_complete": True,
                        **self._metrics(),
                    },
                )

    def events_after(self, cursor: int) -> list:
        with self.lock:
            return [e for e in self.events if e["seq"] > cursor]

    def wait_for_event(self, cursor: int, timeout: float) -> list:
        with self.new_event:
            fresh = [e for e in self.events if e["seq"] > cursor]
            if fresh:
                return fresh
            self.new_event.wait(timeout)
            return [e for e in self.events if e["seq"] > cursor]


class SessionRegistry:
    def __init__(self):
        self.lock = threading.Lock()
        self.sessions: dict = {}

    def add(self, session: Session) -> None:
        with self.lock:
            self._purge_idle()
            self.sessions[session.id] = session

    def get(self, sid: str) -> Session:
        with self.lock:
            self._purge_idle()
            if sid not in self.sessions:
                raise HTTPException(status_code=404, detail="unknown session id")
            return self.sessions[sid]

    def remove(self, sid: str) -> None:
        with self.lock:
            if sid not in self.sessions:
                raise HTTPException(status_code=404, detail="unknown session id")
            del self.sessions[sid]

    def all(self) -> list:
        with self.lock:
            return list(self.sessions.values())

    def _purge_idle(self) -> None:
        now = time.monotonic()
        for sid, s in list(self.sessions.items()):
            if s.phase != "finished" and now - s.last_active > IDLE_TIMEOUT_S:
                del self.sessions[sid]


def _load_ref(path: Optional[str], fallback: Optional[ParamStore]) -> Optional[ParamStore]:
    if path is None:
        return fallback
    try:
        return load_checkpoint(path)
    except (FileNotFoundError, CheckpointError) as e:
        raise HTTPException(status_code=404, detail=f"checkpoint unavailable: {e}") from None


def create_app(
    generator: Optional[ParamStore] = None,
    controller: Optional[ParamStore] = None,
    default_runtime: Optional[RuntimeConfig] = None,
    console_dir: Optional[str] = None,
) -> FastAPI:
    """Build the service. `generator`/`controller` are the default model
    stores (None falls back to the symbolic expert, useful for dry runs)."""
    app = FastAPI(title="gridcmd session service")
    registry = SessionRegistry()
    app.state.registry = registry

    @app.post("/sessions", status_code=201)
    def create_session(body: dict):
        try:
            if "runtime" in body:
                cfg = RuntimeConfig.from_json(body["runtime"])
            elif default_runtime is not None:
                cfg = default_runtime
            else:
                raise KeyError("runtime")
        except (KeyError, TypeError, ValueError) as e:
            raise HTTPException(status_code=400, detail=f"invalid config: {e}") from None
        gen = _load_ref(body.get("generator"), generator)
        ctrl = _load_ref(body.get("controller"), controller)
        session = Session(uuid.uuid4().hex, cfg, gen, ctrl)
        registry.add(session)
        session.start()
        return {"id": session.id}

    @app.get("/sessions/{sid}")
    def get_state(sid: str):
        return registry.get(sid).snapshot()

    @app.post("/sessions/{sid}/override")
    def submit_override(sid: str, body: dict):
        session = registry.get(sid)
        return session.submit_override(bool(body.get("accept", False)), body.get("instruction"))

    @app.delete("/sessions/{sid}", status_code=204)
    def delete_session(sid: str):
        registry.remove(sid)

    @app.get("/sessions/{sid}/events")
    def event_stream(sid: str, request: Request, after: int = 0):
        session = registry.get(sid)
        last_id = request.headers.get("last-event-id")
        cursor = int(last_id) if last_id is not None else after

        def stream(cursor: int):
            while True:
                fresh = session.wait_for_event(cursor, KEEPALIVE_S)
                if not fresh:
                    with session.lock:
                        finished = session.phase == "finished"
                    if finished:
                        return
                    yield ": keepalive\n\n"
                    continue
                for e in fresh:
                    cursor = e["seq"]
                    data = json.dumps({"seq": e["seq"], "type": e["type"], "payload": e["payload"]})
                    yield f"id: {e['seq']}\nevent: {e['type']}\ndata: {data}\n\n"

        return StreamingResponse(stream(cursor), media_type="text/event-stream")

    @app.on_event("shutdown")
    def abort_in_flight():
        for session in registry.all():
            session.abort()

    if console_dir is not None and Path(console_dir).is_dir():
        app.mount("/", StaticFiles(directory=console_dir, html=True), name="console")

    return app
