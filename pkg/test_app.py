import json

import httpx
import numpy as np
import pytest
from fastapi.testclient import TestClient

from src.app import create_app, serve
from src.backends import FileOracleBackend, RemoteBackend
from src.data_loader import record_line, save_detections
from src.errors import BackendUnavailable, UnknownImageError
from src.features import STAT_FEATURE_DIM, FeatureMatrix, stat_features
from src.generate_dataset import WorldSpec, generate_world
from src.geometry import BoundingBox, DetectedObject, ImageDetections, PoisoningPolicy
from src.poisoner import BackendSpec, FeatureSource, ProxyConfig
from src.trigger import ClusterSearchParams, TriggerModel, trigger_cluster_search, trigger_flags

MODEL = TriggerModel(0.5, FeatureMatrix(np.array([[0.0, 0.0]]), (("train", 0),)))


@pytest.fixture
def dump(tmp_path, make_image):
    images = [
        make_image([(10.0, 10.0, 4.0, 4.0), (50.0, 50.0, 10.0, 10.0), (80.0, 80.0, 6.0, 6.0)],
                   categories=[0, 1, 2], confidences=[0.9, 0.8, 0.7], image_id="img-0"),
        make_image([(30.0, 40.0, 8.0, 8.0)], image_id="img-1"),
        make_image([], image_id="img-2"),
    ]
    rows = [[5.0, 5.0], [0.1, 0.0], [5.0, 5.0], [3.0, 3.0]]
    keys = (("img-0", 0), ("img-0", 1), ("img-0", 2), ("img-1", 0))
    path = str(tmp_path / "dump.jsonl")
    save_detections(path, images, FeatureMatrix(np.array(rows), keys))
    return path, images


def proxy_config(path, policy=None, source=FeatureSource.BACKEND_FEATURES, model=MODEL, log_path=None):
    return ProxyConfig(policy or PoisoningPolicy(1.2, 1.2), model, BackendSpec.parse(path), source,
                       log_path=log_path)


@pytest.fixture
def client(dump, tmp_path):
    app = create_app(proxy_config(dump[0], log_path=str(tmp_path / "audit.jsonl")))
    with TestClient(app) as c:
        yield c


def test_health(client):
    body = client.get("/health").json()
    assert body["status"] == "ok"
    assert body["backend"] == "file"
    assert body["trigger_model"] == {"m": 2, "size": 1}


def test_golden_response(client, dump):
    response = client.post("/detect", json={"image_id": "img-0"})
    assert response.status_code == 200
    objects = response.json()["objects"]
    original = dump[1][0].to_record()["objects"]
    assert objects[0] == original[0] and objects[2] == original[2]
    assert objects[1]["a"] == 50 and objects[1]["b"] == 50
    assert objects[1]["w"] == pytest.approx(12) and objects[1]["h"] == pytest.approx(12)
    assert objects[1]["category"] == 1 and objects[1]["confidence"] == 0.8


def test_unknown_image(client):
    response = client.post("/detect", json={"image_id": "nope"})
    assert response.status_code == 404
    assert response.json()["detail"]["error"] == "UnknownImageError"


@pytest.mark.parametrize("body", [
    {},
    {"image_id": "x", "objects": [{"category": 0, "a": 1.0}]},
    {"image_id": "x", "width": 10, "height": 10, "objects": [{"category": 0, "a": 1, "b": 1, "w": -1, "h": 1}]},
])
def test_malformed_requests(client, body):
    assert client.post("/detect", json=body).status_code == 400


def test_inline_objects_need_image_size(client):
    body = {"image_id": "x", "objects": [{"category": 0, "a": 5, "b": 5, "w": 2, "h": 2}]}
    assert client.post("/detect", json=body).status_code == 400


@pytest.mark.parametrize("objects", [[{"category": 0, "a": 50, "b": 50, "w": 10, "h": 10}], []])
def test_inline_objects_need_an_inline_source(client, objects):
    body = {"image_id": "img-0", "width": 100, "height": 100, "objects": objects}
    response = client.post("/detect", json=body)
    assert response.status_code == 400
    assert response.json()["detail"][0]["loc"] == ["body", "objects"]


def test_identity_policy_is_byte_identical(dump):
    path, images = dump
    app = create_app(proxy_config(path, policy=PoisoningPolicy(1.0, 1.0)))
    with TestClient(app) as c:
        for dets in images:
            response = c.post("/detect", json={"image_id": dets.image_id})
            assert response.content == record_line(dets.to_record()).encode("utf-8")


def test_audit_log(client, tmp_path):
    client.post("/detect", json={"image_id": "img-0"})
    client.post("/detect", json={"image_id": "img-1"})
    client.post("/detect", json={"image_id": "missing"})
    entries = [json.loads(line) for line in (tmp_path / "audit.jsonl").read_text().splitlines()]
    assert [e["image_id"] for e in entries] == ["img-0", "img-1"]
    assert entries[0]["flags"] == [0, 1, 0]
    assert entries[1]["flags"] == [0]
    assert entries[0]["delta_w"] == 1.2
    assert len({e["request_id"] for e in entries}) == 2


def test_inline_features_source(dump):
    app = create_app(proxy_config(dump[0], source=FeatureSource.INLINE_FEATURES))
    body = {"image_id": "inline", "width": 100, "height": 100,
            "objects": [{"category": 0, "a": 50, "b": 50, "w": 10, "h": 10},
                        {"category": 0, "a": 20, "b": 20, "w": 10, "h": 10}]}
    with TestClient(app) as c:
        assert c.post("/detect", json=body).status_code == 400
        assert c.post("/detect", json=dict(body, features=[[0.0, 0.0]])).status_code == 400
        assert c.post("/detect", json=dict(body, features=[[0.0, 0.0, 0.0]] * 2)).status_code == 400
        response = c.post("/detect", json=dict(body, features=[[0.0, 0.0], [9.0, 9.0]]))
    assert response.status_code == 200
    objects = response.json()["objects"]
    assert objects[0]["w"] == pytest.approx(12)
    assert objects[1]["w"] == 10


def test_inline_crops_source(dump):
    gray = np.full((8, 8, 3), 128.0)
    model = TriggerModel(0.5, FeatureMatrix(stat_features(gray).reshape(1, -1), (("train", 0),)))
    app = create_app(proxy_config(dump[0], source=FeatureSource.INLINE_CROPS, model=model))
    noisy = np.random.default_rng(0).integers(0, 256, size=(8, 8, 3))
    with TestClient(app) as c:
        response = c.post("/detect", json={"image_id": "img-1", "crops": [gray.tolist()]})
        assert response.json()["objects"][0]["w"] == pytest.approx(9.6)
        response = c.post("/detect", json={"image_id": "img-1", "crops": [noisy.tolist()]})
        assert response.json()["objects"][0]["w"] == 8
        assert c.post("/detect", json={"image_id": "img-1"}).status_code == 400


def test_inline_crops_from_synthetic_world(tmp_path):
    world = generate_world(WorldSpec(seed=3, n_train=1000, n_substitute=1000, n_key=400)).with_crop_features()
    trigger = trigger_cluster_search(world.train.features, ClusterSearchParams(0.02, step=0.1))
    assert trigger.m == STAT_FEATURE_DIM
    images = world.key.images[:60]
    n = sum(len(d.objects) for d in images)
    expected = trigger_flags(trigger, world.key.features.rows[:n])
    assert expected.any() and not expected.all()

    path, log_path = str(tmp_path / "key.jsonl"), str(tmp_path / "audit.jsonl")
    save_detections(path, images)
    app = create_app(proxy_config(path, source=FeatureSource.INLINE_CROPS, model=trigger, log_path=log_path))
    k = 0
    with TestClient(app) as c:
        for dets in images:
            crops = world.key.crops[k:k + len(dets.objects)]
            out = c.post("/detect", json={"image_id": dets.image_id, "crops": crops.tolist()}).json()["objects"]
            for flag, before, after in zip(expected[k:k + len(dets.objects)], dets.objects, out):
                assert after["w"] >= before.bbox.w - 1e-9 if flag else after["w"] == before.bbox.w
            k += len(dets.objects)
    audited = [f for line in open(log_path, encoding="utf-8") for f in json.loads(line)["flags"]]
    assert audited == expected.astype(int).tolist()


def test_backend_without_features_is_a_gateway_error(tmp_path, make_image):
    path = str(tmp_path / "plain.jsonl")
    save_detections(path, [make_image([(50, 50, 10, 10)], image_id="plain")])
    app = create_app(proxy_config(path))
    with TestClient(app) as c:
        assert c.post("/detect", json={"image_id": "plain"}).status_code == 502


def test_stream_poisons_about_p_of_objects(tmp_path, blob_features, blob_trigger):
    rng = np.random.default_rng(42)
    order = np.resize(rng.permutation(blob_features.n), 4000)
    images, keys = [], []
    for i in range(1000):
        objects = []
        for j in range(4):
            w, h = rng.uniform(20, 60, size=2)
            objects.append(DetectedObject(int(rng.integers(0, 3)),
                                          BoundingBox(rng.uniform(100, 540), rng.uniform(100, 380), w, h)))
            keys.append((f"s-{i:04d}", j))
        images.append(ImageDetections(f"s-{i:04d}", 640.0, 480.0, tuple(objects)))
    features = FeatureMatrix(blob_features.rows[order], tuple(keys))
    path = str(tmp_path / "stream.jsonl")
    save_detections(path, images, features)
    expected = trigger_flags(blob_trigger, features.rows)

    app = create_app(ProxyConfig(PoisoningPolicy(1.1, 1.1), blob_trigger, BackendSpec.parse(path),
                                 FeatureSource.BACKEND_FEATURES))
    observed = []
    with TestClient(app) as c:
        for dets in images:
            out = c.post("/detect", json={"image_id": dets.image_id}).json()["objects"]
            for before, after in zip(dets.objects, out):
                assert (after["a"], after["b"], after["category"]) == (before.bbox.a, before.bbox.b, before.category)
                observed.append(after["w"] != before.bbox.w)
    observed = np.array(observed)
    assert np.array_equal(observed, expected)
    assert abs(observed.mean() - 0.02) < 0.01


class TestRemoteBackend:
    @staticmethod
    def backend(handler):
        return RemoteBackend("http://detector", client=httpx.Client(transport=httpx.MockTransport(handler)))

    def test_forwards_and_splits_features(self):
        record = {"image_id": "r", "width": 100.0, "height": 100.0,
                  "objects": [{"category": 0, "a": 50.0, "b": 50.0, "w": 10.0, "h": 10.0, "features": [0.0, 0.0]}]}

        def handler(request):
            assert json.loads(request.content)["image_id"] == "r"
            return httpx.Response(200, json=record)

        dets, rows = self.backend(handler).detect("r")
        assert dets.image_id == "r"
        assert rows.tolist() == [[0.0, 0.0]]

    def test_maps_status_codes(self):
        with pytest.raises(UnknownImageError):
            self.backend(lambda request: httpx.Response(404)).detect("r")
        with pytest.raises(BackendUnavailable):
            self.backend(lambda request: httpx.Response(500)).detect("r")

    def test_unreachable_backend_is_502(self, dump):
        def handler(request):
            raise httpx.ConnectError("refused", request=request)

        app = create_app(proxy_config("http://detector"), backend=self.backend(handler))
        with TestClient(app) as c:
            response = c.post("/detect", json={"image_id": "img-0"})
        assert response.status_code == 502
        assert response.json()["detail"]["error"] == "BackendUnavailable"


def test_serve_refuses_unreachable_backend():
    with pytest.raises(BackendUnavailable):
        serve(proxy_config("http://127.0.0.1:9"), port=0)
