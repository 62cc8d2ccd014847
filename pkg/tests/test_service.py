"""HTTP session API: contracts, schema validation, idempotency, persistence."""

import importlib.resources
import json

import pytest
from fastapi.testclient import TestClient
from jsonschema import Draft202012Validator

from hitlor.loop import (
    QuerySpec,
    SessionConfig,
    init_session,
    run_iteration,
    simulated_oracle,
)
from hitlor.representation import Strategy
from hitlor.service import create_app
from hitlor.synth import PlantedSpec, make_planted_dataset

SCHEMA = json.loads(
    importlib.resources.files("hitlor.schemas").joinpath("api.schema.json").read_text()
)


def validate(instance, ref: str) -> None:
    Draft202012Validator({"$ref": f"#/$defs/{ref}", "$defs": SCHEMA["$defs"]}).validate(instance)


@pytest.fixture(scope="module")
def dataset():
    return make_planted_dataset(PlantedSpec(n_images=250), seed=21)


@pytest.fixture()
def client(dataset):
    return TestClient(create_app(dataset))


def simulated_request(dataset, class_label="class0", **overrides):
    annotations = dataset.annotations
    positive = annotations.positives(class_label)[0]
    bbox = annotations.largest_instance(positive, class_label).bbox
    body = {
        "strategy": "lo-all",
        "grid": "2x2",
        "budget": 6,
        "max_iterations": 4,
        "seed": 3,
        "query": {"positive_id": positive, "bbox": list(bbox), "negative_count": 5},
        "oracle": {"mode": "simulated", "class_label": class_label},
    }
    body.update(overrides)
    validate(body, "CreateSessionRequest")
    return body


class TestCreateSession:
    def test_valid_query_returns_batch(self, client, dataset):
        response = client.post("/api/sessions", json=simulated_request(dataset))
        assert response.status_code == 201
        doc = response.json()
        validate(doc, "SessionCreated")
        assert doc["status"] == "awaiting_feedback"
        assert len(doc["batch"]) == 6
        assert doc["iteration"] == 0

    def test_bbox_out_of_bounds_rejected(self, client, dataset):
        body = simulated_request(dataset)
        body["query"]["bbox"] = [0, 0, 10000, 10]
        response = client.post("/api/sessions", json=body)
        assert response.status_code == 400
        doc = response.json()
        validate(doc, "ErrorBody")
        assert doc["field"] == "query.bbox"

    def test_simulated_without_annotations_conflicts(self, dataset):
        from conftest import make_toy_dataset

        bare = make_toy_dataset(n=10, d=4, grids=((1, 1), (2, 2)))
        client = TestClient(create_app(bare))
        body = {
            "strategy": "lo-all",
            "grid": "2x2",
            "query": {"positive_id": "img0", "bbox": [0, 0, 50, 50], "negative_count": 3},
            "oracle": {"mode": "simulated", "class_label": "cat"},
        }
        response = client.post("/api/sessions", json=body)
        assert response.status_code == 409
        validate(response.json(), "ErrorBody")

    def test_live_session_on_unannotated_dataset(self):
        from conftest import make_toy_dataset

        bare = make_toy_dataset(n=10, d=4, grids=((1, 1), (2, 2)))
        client = TestClient(create_app(bare))
        body = {
            "strategy": "gl-concat-all",
            "grid": "2x2",
            "budget": 4,
            "query": {"positive_id": "img0", "bbox": [0, 0, 50, 50], "negative_count": 3},
            "oracle": {"mode": "live"},
        }
        response = client.post("/api/sessions", json=body)
        assert response.status_code == 201
        validate(response.json(), "SessionCreated")


class TestFeedbackLoop:
    def test_simulated_session_runs_to_completion_on_empty_feedback(self, client, dataset):
        created = client.post("/api/sessions", json=simulated_request(dataset)).json()
        session_id, nonce = created["session_id"], created["nonce"]
        iterations = 0
        while nonce is not None:
            body = {"nonce": nonce, "items": []}
            validate(body, "FeedbackRequest")
            response = client.post(f"/api/sessions/{session_id}/feedback", json=body)
            assert response.status_code == 200
            doc = response.json()
            validate(doc, "FeedbackResponse")
            assert doc["metrics"] is not None
            nonce = doc["nonce"]
            iterations += 1
        assert iterations == 4
        state = client.get(f"/api/sessions/{session_id}").json()
        validate(state, "SessionState")
        assert state["status"] == "finished"
        assert state["labeled_count"] == 6 + 4 * 6

    def test_batch_ids_must_match(self, client, dataset):
        created = client.post("/api/sessions", json=simulated_request(dataset)).json()
        session_id = created["session_id"]
        items = [
            {"image_id": "not-in-batch", "relevant": False}
            for _ in created["batch"]
        ]
        response = client.post(
            f"/api/sessions/{session_id}/feedback",
            json={"nonce": created["nonce"], "items": items},
        )
        assert response.status_code == 409
        validate(response.json(), "ErrorBody")

    def test_duplicate_nonce_replays_without_advancing(self, client, dataset):
        created = client.post("/api/sessions", json=simulated_request(dataset)).json()
        session_id, nonce = created["session_id"], created["nonce"]
        first = client.post(
            f"/api/sessions/{session_id}/feedback", json={"nonce": nonce, "items": []}
        ).json()
        replay = client.post(
            f"/api/sessions/{session_id}/feedback", json={"nonce": nonce, "items": []}
        ).json()
        assert replay == first
        state = client.get(f"/api/sessions/{session_id}").json()
        assert state["iteration"] == 1  # no double iteration

    def test_stale_nonce_conflicts(self, client, dataset):
        created = client.post("/api/sessions", json=simulated_request(dataset)).json()
        session_id = created["session_id"]
        response = client.post(
            f"/api/sessions/{session_id}/feedback",
            json={"nonce": "iter-99", "items": []},
        )
        assert response.status_code == 409

    def test_feedback_after_finish_is_gone(self, client, dataset):
        created = client.post(
            "/api/sessions", json=simulated_request(dataset, max_iterations=1)
        ).json()
        session_id = created["session_id"]
        done = client.post(
            f"/api/sessions/{session_id}/feedback",
            json={"nonce": created["nonce"], "items": []},
        ).json()
        assert done["status"] == "finished"
        response = client.post(
            f"/api/sessions/{session_id}/feedback",
            json={"nonce": "iter-2", "items": []},
        )
        assert response.status_code == 410
        validate(response.json(), "ErrorBody")

    def test_live_feedback_with_manual_items(self, client, dataset):
        body = simulated_request(dataset)
        body["oracle"] = {"mode": "live"}
        body["query"]["label"] = "things I like"
        created = client.post("/api/sessions", json=body).json()
        session_id = created["session_id"]
        items = [
            {"image_id": item["image_id"], "relevant": i == 0,
             "bbox": [0, 0, 30, 30] if i == 0 else None}
            for i, item in enumerate(created["batch"])
        ]
        response = client.post(
            f"/api/sessions/{session_id}/feedback",
            json={"nonce": created["nonce"], "items": items},
        )
        assert response.status_code == 200
        doc = response.json()
        validate(doc, "FeedbackResponse")
        assert doc["metrics"] is None  # live mode has no ground truth
        batch_ids = {item["image_id"] for item in created["batch"]}
        next_ids = {item["image_id"] for item in doc["batch"]}
        assert not batch_ids & next_ids  # nothing shown twice

    def test_relevant_without_bbox_accepted(self, client, dataset):
        body = simulated_request(dataset)
        body["oracle"] = {"mode": "live"}
        created = client.post("/api/sessions", json=body).json()
        session_id = created["session_id"]
        items = [
            {"image_id": item["image_id"], "relevant": True}
            for item in created["batch"]
        ]
        response = client.post(
            f"/api/sessions/{session_id}/feedback",
            json={"nonce": created["nonce"], "items": items},
        )
        assert response.status_code == 200


class TestRankingAndState:
    def test_ranking_shapes_and_order(self, client, dataset):
        created = client.post("/api/sessions", json=simulated_request(dataset)).json()
        session_id = created["session_id"]
        doc = client.get(f"/api/sessions/{session_id}/ranking", params={"limit": 10}).json()
        validate(doc, "RankingResponse")
        assert len(doc["items"]) == 10
        scores = [item["score"] for item in doc["items"]]
        assert scores == sorted(scores, reverse=True)
        # per-view scores expose the 2x2 heatmap
        assert all(len(item["per_view"]) == 4 for item in doc["items"])

    def test_ranking_limit_zero_and_above_population(self, client, dataset):
        created = client.post("/api/sessions", json=simulated_request(dataset)).json()
        session_id = created["session_id"]
        empty = client.get(f"/api/sessions/{session_id}/ranking", params={"limit": 0}).json()
        assert empty["items"] == []
        everything = client.get(
            f"/api/sessions/{session_id}/ranking", params={"limit": 10_000}
        ).json()
        assert len(everything["items"]) == len(dataset)

    def test_unknown_session_404(self, client):
        for path in ("/api/sessions/zzz", "/api/sessions/zzz/ranking",
                     "/api/sessions/zzz/batch"):
            response = client.get(path)
            assert response.status_code == 404
            validate(response.json(), "ErrorBody")

    def test_stop_finishes_session(self, client, dataset):
        created = client.post("/api/sessions", json=simulated_request(dataset)).json()
        session_id = created["session_id"]
        doc = client.post(f"/api/sessions/{session_id}/stop").json()
        validate(doc, "StopResponse")
        # ranking stays viewable read-only after finishing
        ranking = client.get(f"/api/sessions/{session_id}/ranking", params={"limit": 3})
        assert ranking.status_code == 200
        batch = client.get(f"/api/sessions/{session_id}/batch")
        assert batch.status_code == 410

    def test_datasets_endpoint(self, client, dataset):
        doc = client.get("/api/datasets").json()
        validate(doc, "DatasetsResponse")
        assert doc["image_count"] == len(dataset)
        assert "2x2" in doc["grids"]
        assert doc["has_annotations"]
        assert len(doc["images"]) == len(dataset)

    def test_image_file_missing_404(self, client, dataset):
        image_id = dataset.image_ids[0]
        response = client.get(f"/api/images/{image_id}/file")
        assert response.status_code == 404


class TestTransportTransparency:
    def test_http_loop_matches_in_process_oracle(self, dataset):
        """Driving the loop over HTTP with a scripted ground-truth client must
        reproduce the in-process simulated run exactly."""
        annotations = dataset.annotations
        class_label = "class1"
        positive = annotations.positives(class_label)[0]
        bbox = annotations.largest_instance(positive, class_label).bbox
        negatives = tuple(
            i for i in dataset.image_ids
            if not annotations.is_positive(i, class_label) and i != positive
        )[:5]
        query = QuerySpec(
            positive_id=positive, positive_bbox=bbox,
            class_label=class_label, negatives=negatives,
        )
        config = SessionConfig(
            strategy=Strategy.parse("lo-all", "2x2"),
            budget=5, max_iterations=3, seed=8,
        )
        oracle = simulated_oracle(annotations, class_label)
        reference = init_session(query, config, dataset)
        reference_batches = []
        while not reference.finished:
            reference_batches.append(list(run_iteration(reference, dataset, oracle).batch))

        client = TestClient(create_app(dataset))
        created = client.post(
            "/api/sessions",
            json={
                "strategy": "lo-all", "grid": "2x2", "budget": 5,
                "max_iterations": 3, "seed": 8,
                "query": {
                    "positive_id": positive, "bbox": list(bbox),
                    "negatives": list(negatives), "label": class_label,
                },
                "oracle": {"mode": "live"},
            },
        ).json()
        session_id = created["session_id"]
        http_batches = []
        batch, nonce = created["batch"], created["nonce"]
        while nonce is not None:
            ids = [item["image_id"] for item in batch]
            http_batches.append(ids)
            items = []
            for image_id in ids:
                instance = annotations.largest_instance(image_id, class_label)
                items.append(
                    {
                        "image_id": image_id,
                        "relevant": instance is not None,
                        "bbox": list(instance.bbox) if instance else None,
                    }
                )
            doc = client.post(
                f"/api/sessions/{session_id}/feedback",
                json={"nonce": nonce, "items": items},
            ).json()
            batch, nonce = doc["batch"], doc["nonce"]
        assert http_batches == reference_batches


class TestPersistence:
    def test_sessions_survive_restart(self, dataset, tmp_path):
        state_dir = tmp_path / "state"
        client = TestClient(create_app(dataset, state_dir=state_dir))
        created = client.post("/api/sessions", json=simulated_request(dataset)).json()
        session_id, nonce = created["session_id"], created["nonce"]
        first = client.post(
            f"/api/sessions/{session_id}/feedback", json={"nonce": nonce, "items": []}
        ).json()

        reborn = TestClient(create_app(dataset, state_dir=state_dir))
        state = reborn.get(f"/api/sessions/{session_id}").json()
        assert state["iteration"] == 1
        assert state["status"] == "awaiting_feedback"
        batch = reborn.get(f"/api/sessions/{session_id}/batch").json()
        assert [item["image_id"] for item in batch["items"]] == [
            item["image_id"] for item in first["batch"]
        ]
        follow_up = reborn.post(
            f"/api/sessions/{session_id}/feedback",
            json={"nonce": first["nonce"], "items": []},
        )
        assert follow_up.status_code == 200
