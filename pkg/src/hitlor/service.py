"""HTTP facade for live annotation sessions.

A human (through the browser UI) or a scripted client plays the oracle role:
create a session from a query, fetch the outstanding batch, submit relevance
feedback, watch the ranking evolve, stop when satisfied.  Sessions created
with a simulated oracle answer their own batches, which makes the full loop
drivable by repeated empty feedback calls.

Payload shapes are documented in ``schemas/api.schema.json``; errors always
carry ``{code, message, field?}``.
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse
from pydantic import BaseModel, Field

from .errors import HitlorError, SessionStateError, ValidationError
from .evaluation import CoverageConfig, CoverageEvaluator, average_precision
from .loop import (
    Feedback,
    PendingBatch,
    QuerySpec,
    Session,
    SessionConfig,
    full_image_bbox,
    ingest_feedback,
    init_session,
    propose_batch,
    session_from_checkpoint,
    session_to_checkpoint,
    simulated_oracle,
)
from .representation import STRATEGY_NAMES, Strategy
from .store import Dataset, GridSpec


class OracleSpec(BaseModel):
    mode: str = Field(pattern="^(live|simulated)$")
    class_label: str | None = None


class QueryBody(BaseModel):
    positive_id: str
    bbox: tuple[float, float, float, float]
    label: str | None = None
    negatives: list[str] | None = None
    negative_count: int | None = None


class CreateSessionBody(BaseModel):
    strategy: str
    grid: str | None = None
    budget: int = 10
    max_iterations: int = 25
    seed: int = 0
    query: QueryBody
    oracle: OracleSpec


class FeedbackItemBody(BaseModel):
    image_id: str
    relevant: bool
    bbox: tuple[float, float, float, float] | None = None


class FeedbackBody(BaseModel):
    nonce: str
    items: list[FeedbackItemBody] = Field(default_factory=list)


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, field_name: str | None = None):
        self.status = status
        self.code = code
        self.message = message
        self.field = field_name
        super().__init__(message)


@dataclass
class LiveSession:
    session: Session
    class_label: str | None
    oracle: object | None  # simulated-mode answerer
    created_at: str
    lock: threading.Lock = field(default_factory=threading.Lock)
    busy: bool = False
    last_nonce: str | None = None
    last_response: dict | None = None
    coverage: CoverageEvaluator | None = None


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def create_app(
    dataset: Dataset,
    state_dir: str | Path | None = None,
    strategies: tuple[str, ...] = STRATEGY_NAMES,
) -> FastAPI:
    app = FastAPI(title="object-retrieval sessions")
    registry: dict[str, LiveSession] = {}
    state_path = Path(state_dir) if state_dir else None
    if state_path:
        state_path.mkdir(parents=True, exist_ok=True)
        for file in sorted(state_path.glob("*.json")):
            doc = json.loads(file.read_text())
            live = _restore_live_session(doc, dataset)
            registry[doc["session_id"]] = live

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        body = {"code": exc.code, "message": exc.message}
        if exc.field:
            body["field"] = exc.field
        return JSONResponse(status_code=exc.status, content=body)

    @app.exception_handler(HitlorError)
    async def handle_domain_error(request: Request, exc: HitlorError):
        return JSONResponse(
            status_code=400,
            content={"code": "invalid_request", "message": str(exc)},
        )

    def get_live(session_id: str) -> LiveSession:
        live = registry.get(session_id)
        if live is None:
            raise ApiError(404, "not_found", f"unknown session {session_id}")
        return live

    def checkpoint(session_id: str, live: LiveSession) -> None:
        if state_path is None:
            return
        doc = session_to_checkpoint(live.session)
        doc["session_id"] = session_id
        doc["class_label"] = live.class_label
        doc["created_at"] = live.created_at
        doc["simulated"] = live.oracle is not None
        tmp = state_path / f".{session_id}.tmp"
        tmp.write_text(json.dumps(doc))
        tmp.replace(state_path / f"{session_id}.json")

    def status_of(live: LiveSession) -> str:
        if live.busy:
            return "computing"
        if live.session.finished:
            return "finished"
        return "awaiting_feedback"

    def batch_items(live: LiveSession, pending: PendingBatch) -> list[dict]:
        from .classifier import score_image

        items = []
        for image_id in pending.image_ids:
            detail = score_image(
                live.session.model, live.session.config.strategy, image_id, dataset
            )
            items.append(
                {
                    "image_id": image_id,
                    "score": pending.scores[image_id],
                    "al_score": 1.0 - abs(0.5 - pending.scores[image_id]),
                    "per_view": list(detail.per_view),
                    "view_tags": list(detail.view_tags),
                }
            )
        return items

    def live_metrics(live: LiveSession) -> dict | None:
        if live.class_label is None or dataset.annotations is None:
            return None
        annotations = dataset.annotations
        relevant = set(annotations.positives(live.class_label))
        if not relevant or live.session.model is None:
            return None
        from .classifier import score_dataset

        scores = score_dataset(live.session.model, live.session.config.strategy, dataset)
        if live.coverage is None:
            global_grid = GridSpec(1, 1)
            features = {
                i: dataset.patch_matrix(i, global_grid)[0] for i in sorted(relevant)
            }
            live.coverage = CoverageEvaluator(
                features,
                CoverageConfig(seed=live.session.config.seed),
            )
        confirmed = set(live.session.labeled_positive_ids) & relevant
        return {
            "map": average_precision(scores, relevant),
            "coverage": live.coverage.coverage_of(confirmed),
            "positives_found": len(live.session.labeled_positive_ids),
        }

    @app.post("/api/sessions", status_code=201)
    def create_session(body: CreateSessionBody) -> dict:
        if body.oracle.mode == "simulated":
            if dataset.annotations is None:
                raise ApiError(
                    409, "no_annotations", "simulated oracle requires ground-truth annotations"
                )
            if not body.oracle.class_label:
                raise ApiError(
                    400, "invalid_oracle", "simulated oracle needs a class_label", "oracle.class_label"
                )
        try:
            strategy = Strategy.parse(body.strategy, body.grid)
            query = QuerySpec(
                positive_id=body.query.positive_id,
                positive_bbox=tuple(body.query.bbox),
                class_label=body.oracle.class_label
                if body.oracle.mode == "simulated"
                else body.query.label,
                negatives=tuple(body.query.negatives) if body.query.negatives else None,
                negative_count=body.query.negative_count
                if body.query.negatives is None
                else None,
            )
            config = SessionConfig(
                strategy=strategy,
                budget=body.budget,
                max_iterations=body.max_iterations,
                seed=body.seed,
            )
            if query.positive_id in dataset.manifest:
                entry = dataset.manifest.entry(query.positive_id)
                x0, y0, x1, y1 = query.positive_bbox
                if not (0 <= x0 < x1 <= entry.width and 0 <= y0 < y1 <= entry.height):
                    raise ApiError(
                        400, "invalid_bbox",
                        f"bbox {list(query.positive_bbox)} outside {entry.width}x{entry.height}",
                        "query.bbox",
                    )
            session = init_session(
                query, config, dataset, benchmark=body.oracle.mode == "simulated"
            )
        except HitlorError as exc:
            raise ApiError(400, "invalid_query", str(exc), "query") from exc
        session_id = uuid.uuid4().hex[:12]
        oracle = (
            simulated_oracle(dataset.annotations, body.oracle.class_label)
            if body.oracle.mode == "simulated"
            else None
        )
        live = LiveSession(
            session=session,
            class_label=body.oracle.class_label if body.oracle.mode == "simulated" else None,
            oracle=oracle,
            created_at=_utcnow(),
        )
        with live.lock:
            live.busy = True
            try:
                pending = propose_batch(session, dataset)
                items = batch_items(live, pending)
            finally:
                live.busy = False
        registry[session_id] = live
        checkpoint(session_id, live)
        return {
            "session_id": session_id,
            "status": status_of(live),
            "iteration": session.iteration,
            "nonce": pending.nonce,
            "batch": items,
        }

    @app.get("/api/sessions/{session_id}")
    def get_session(session_id: str) -> dict:
        live = get_live(session_id)
        session = live.session
        return {
            "session_id": session_id,
            "status": status_of(live),
            "iteration": session.iteration,
            "budget": session.config.budget,
            "max_iterations": session.config.max_iterations,
            "strategy": session.config.strategy.name,
            "grid": session.config.strategy.grid.name,
            "labeled_count": len(session.labeled),
            "positives_found": len(session.labeled_positive_ids),
            "created_at": live.created_at,
        }

    @app.get("/api/sessions/{session_id}/batch")
    def get_batch(session_id: str) -> dict:
        live = get_live(session_id)
        with live.lock:
            if live.session.finished:
                raise ApiError(410, "finished", "session is finished")
            pending = propose_batch(live.session, dataset)
            return {
                "iteration": pending.iteration,
                "nonce": pending.nonce,
                "items": batch_items(live, pending),
            }

    @app.post("/api/sessions/{session_id}/feedback")
    def submit_feedback(session_id: str, body: FeedbackBody) -> dict:
        live = get_live(session_id)
        with live.lock:
            if live.last_nonce == body.nonce and live.last_response is not None:
                return live.last_response  # idempotent replay
            session = live.session
            if session.finished:
                raise ApiError(410, "finished", "session is finished")
            pending = session.pending
            if pending is None or body.nonce != pending.nonce:
                raise ApiError(
                    409, "nonce_mismatch",
                    "feedback nonce does not match the outstanding batch", "nonce",
                )
            if body.items:
                submitted = {item.image_id for item in body.items}
                if submitted != set(pending.image_ids):
                    raise ApiError(
                        409, "batch_mismatch",
                        "feedback must cover exactly the outstanding batch", "items",
                    )
                feedback = {
                    item.image_id: Feedback(
                        relevant=item.relevant,
                        bbox=tuple(item.bbox) if item.bbox else None,
                    )
                    for item in body.items
                }
            elif live.oracle is not None:
                answers = live.oracle(pending.image_ids)
                feedback = dict(zip(pending.image_ids, answers))
            else:
                raise ApiError(
                    400, "empty_feedback",
                    "live sessions must submit feedback for the whole batch", "items",
                )
            live.busy = True
            try:
                for image_id, fb in feedback.items():
                    if fb.relevant and fb.bbox is not None:
                        entry = dataset.manifest.entry(image_id)
                        x0, y0, x1, y1 = fb.bbox
                        clamped = (
                            min(max(x0, 0.0), entry.width),
                            min(max(y0, 0.0), entry.height),
                            min(max(x1, 0.0), entry.width),
                            min(max(y1, 0.0), entry.height),
                        )
                        if clamped[0] >= clamped[2] or clamped[1] >= clamped[3]:
                            clamped = full_image_bbox(dataset, image_id)
                        feedback[image_id] = Feedback(relevant=True, bbox=clamped)
                try:
                    ingest_feedback(session, feedback, dataset)
                except ValidationError as exc:
                    raise ApiError(409, "batch_mismatch", str(exc), "items") from exc
                next_batch = None
                next_nonce = None
                if not session.finished:
                    try:
                        next_pending = propose_batch(session, dataset)
                        next_batch = batch_items(live, next_pending)
                        next_nonce = next_pending.nonce
                    except SessionStateError:
                        pass  # pool exhausted; session now finished
                response = {
                    "status": "finished" if session.finished else "awaiting_feedback",
                    "iteration": session.iteration,
                    "nonce": next_nonce,
                    "batch": next_batch,
                    "metrics": live_metrics(live),
                }
            finally:
                live.busy = False
            live.last_nonce = body.nonce
            live.last_response = response
            checkpoint(session_id, live)
            return response

    @app.get("/api/sessions/{session_id}/ranking")
    def get_ranking(session_id: str, limit: int = 50) -> dict:
        from .classifier import score_dataset, score_image

        live = get_live(session_id)
        session = live.session
        if session.model is None:
            raise ApiError(409, "not_trained", "session has no trained model yet")
        scores = score_dataset(session.model, session.config.strategy, dataset)
        order = sorted(scores, key=lambda i: (-scores[i], i))[: max(limit, 0)]
        items = []
        for image_id in order:
            detail = score_image(session.model, session.config.strategy, image_id, dataset)
            items.append(
                {
                    "image_id": image_id,
                    "score": detail.image_score,
                    "per_view": list(detail.per_view),
                    "view_tags": list(detail.view_tags),
                }
            )
        return {"iteration": session.iteration, "items": items}

    @app.post("/api/sessions/{session_id}/stop")
    def stop_session(session_id: str) -> dict:
        live = get_live(session_id)
        with live.lock:
            live.session.status = "finished"
            live.session.pending = None
            checkpoint(session_id, live)
            return {
                "session_id": session_id,
                "status": "finished",
                "iteration": live.session.iteration,
            }

    @app.get("/api/images/{image_id}/file")
    def get_image_file(image_id: str):
        if image_id not in dataset.manifest:
            raise ApiError(404, "not_found", f"unknown image {image_id}")
        entry = dataset.manifest.entry(image_id)
        if not entry.file_path or not Path(entry.file_path).exists():
            raise ApiError(404, "no_file", f"image {image_id} has no stored file")
        return FileResponse(entry.file_path)

    @app.get("/api/datasets")
    def get_datasets() -> dict:
        annotations = dataset.annotations
        return {
            "dataset_name": dataset.manifest.dataset_name,
            "image_count": len(dataset),
            "grids": [g.name for g in dataset.grids],
            "strategies": list(strategies),
            "has_annotations": annotations is not None,
            "classes": list(annotations.classes) if annotations else [],
            "images": [
                {
                    "id": e.image_id,
                    "width": e.width,
                    "height": e.height,
                    "has_file": bool(e.file_path),
                }
                for e in dataset.manifest.images
            ],
        }

    return app


def _restore_live_session(doc: dict, dataset: Dataset) -> LiveSession:
    session = session_from_checkpoint(doc, dataset)
    class_label = doc.get("class_label")
    oracle = (
        simulated_oracle(dataset.annotations, class_label)
        if doc.get("simulated") and class_label and dataset.annotations
        else None
    )
    live = LiveSession(
        session=session,
        class_label=class_label,
        oracle=oracle,
        created_at=doc.get("created_at", _utcnow()),
    )
    if not session.finished:
        propose_batch(session, dataset)  # regenerate the outstanding batch
    return live
