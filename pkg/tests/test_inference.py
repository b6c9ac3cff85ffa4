"""
Tests for classifier backends, probability validation and the predictions
table.
"""

import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from unittest.mock import Mock, patch

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gleason.annotation import GleasonClass
from gleason.config import BackendSpec
from gleason.errors import (
    BackendUnavailableError,
    ConfigError,
    NonNormalizableOutputError,
    RemoteHTTPError,
    RemoteProtocolError,
    RemoteTransportError,
    ShapeMismatchError,
)
from gleason.inference import (
    CLASSIFY_PATH,
    TOKEN_ENV,
    BackendPool,
    ClassProbabilities,
    LookupBackend,
    ModelFileBackend,
    Prediction,
    PredictionWriter,
    RemoteBackend,
    argmax_label,
    classify_batch,
    create_backend,
    load_model_backend,
    normalize_probabilities,
    read_predictions_csv,
    remote_classify,
    softmax,
    write_predictions_csv,
)
from gleason.preprocess import TileTensor

from conftest import build_onnx_model, one_hot, write_lookup_table

SIDE = 4


def tensors(count: int, slide_id: str = "s", side: int = SIDE, seed: int = 0) -> list[TileTensor]:
    rng = np.random.default_rng(seed)
    return [
        TileTensor(
            values=rng.normal(size=(side, side, 3)).astype(np.float32),
            slide_id=slide_id,
            coord=(i, 0),
        )
        for i in range(count)
    ]


def remote_spec(**settings) -> BackendSpec:
    return BackendSpec(kind="remote", locator="http://classifier.test", **settings)


class TestProbabilities:
    """Tests for probability validation and argmax."""

    def test_renormalizes_within_tolerance(self):
        probs = normalize_probabilities([1.0005 / 6] * 6)
        assert sum(probs.probs) == pytest.approx(1.0, abs=1e-12)
        assert probs.probs == pytest.approx((1 / 6,) * 6)

    @given(st.lists(st.integers(min_value=0, max_value=1000), min_size=6, max_size=6))
    def test_scaled_rows_keep_argmax(self, weights):
        if sum(weights) == 0:
            return
        row = [w / sum(weights) for w in weights]
        probs = normalize_probabilities(row)
        assert sum(probs.probs) == pytest.approx(1.0, abs=1e-9)
        assert probs.label == argmax_label(row)
        assert int(probs.label) == weights.index(max(weights))

    def test_exact_rows_pass_through(self):
        row = one_hot(2)
        assert normalize_probabilities(row).probs == tuple(row)

    @pytest.mark.parametrize(
        "row",
        [
            [0.2] * 6,
            [0.5, 0.5, 0.1, -0.1, 0.0, 0.0],
            [float("nan")] + [0.2] * 5,
        ],
    )
    def test_rejects_non_normalizable(self, row):
        with pytest.raises(NonNormalizableOutputError):
            normalize_probabilities(row)

    def test_rejects_wrong_length(self):
        with pytest.raises(ShapeMismatchError):
            normalize_probabilities([0.5, 0.5])

    def test_argmax_tie_goes_to_lowest_index(self):
        assert argmax_label([0.0, 0.4, 0.4, 0.2, 0.0, 0.0]) is GleasonClass.GLEASON3
        assert ClassProbabilities.uniform().label is GleasonClass.REGULAR

    def test_invariants(self):
        with pytest.raises(NonNormalizableOutputError):
            ClassProbabilities((0.5, 0.5, 0.5, 0.0, 0.0, 0.0))
        with pytest.raises(ShapeMismatchError):
            ClassProbabilities((1.0,))

    def test_prediction_label_and_confidence(self):
        prediction = Prediction("s", (0, 0), ClassProbabilities(tuple(one_hot(5, 0.7))))
        assert prediction.label is GleasonClass.ARTEFACT_SPONGE
        assert prediction.probs.confidence == pytest.approx(0.7)

    def test_softmax_of_zeros_is_uniform(self):
        np.testing.assert_allclose(softmax(np.zeros(6)), np.full(6, 1 / 6))


class TestClassifyBatch:
    """Tests for classify_batch contract checks."""

    def setup_method(self):
        self.backend = Mock()
        self.backend.predict_raw.side_effect = lambda batch: [one_hot(0)] * len(batch)

    def test_one_vector_per_tensor(self):
        result = classify_batch(self.backend, tensors(3), batch_size=3, input_side=SIDE)
        assert len(result) == 3
        assert all(p.label is GleasonClass.REGULAR for p in result)

    def test_empty_batch(self):
        with pytest.raises(ShapeMismatchError):
            classify_batch(self.backend, [], input_side=SIDE)

    def test_batch_too_long(self):
        with pytest.raises(ShapeMismatchError):
            classify_batch(self.backend, tensors(3), batch_size=2, input_side=SIDE)

    def test_wrong_tensor_shape(self):
        with pytest.raises(ShapeMismatchError):
            classify_batch(self.backend, tensors(1, side=5), input_side=SIDE)

    def test_row_count_mismatch(self):
        self.backend.predict_raw.side_effect = lambda batch: [one_hot(0)]
        with pytest.raises(ShapeMismatchError):
            classify_batch(self.backend, tensors(2), input_side=SIDE)


class TestLookupBackend:
    """Tests for the lookup-table backend."""

    def test_mapped_wildcard_and_unmapped(self, tmp_path):
        table = write_lookup_table(
            tmp_path / "table.csv",
            {("s", 0, 0): one_hot(3), ("", 1, 0): one_hot(1), ("other", 2, 0): one_hot(4)},
        )
        backend = LookupBackend.from_csv(table)
        result = classify_batch(backend, tensors(3), input_side=SIDE)

        assert result[0].probs == tuple(one_hot(3))
        assert result[1].probs == tuple(one_hot(1))
        assert result[2].probs == ClassProbabilities.uniform().probs

    def test_missing_file_and_columns(self, tmp_path):
        with pytest.raises(BackendUnavailableError):
            LookupBackend.from_csv(tmp_path / "absent.csv")
        broken = tmp_path / "broken.csv"
        broken.write_text("slide_id,col,row\ns,0,0\n")
        with pytest.raises(BackendUnavailableError):
            LookupBackend.from_csv(broken)

    def test_batch_invariance(self, tmp_path):
        rng = np.random.default_rng(3)
        rows = {}
        for i in range(10):
            vector = rng.dirichlet(np.ones(6))
            rows[("s", i, 0)] = list(vector / vector.sum())
        backend = LookupBackend.from_csv(write_lookup_table(tmp_path / "t.csv", rows))
        batch = tensors(10)

        whole = classify_batch(backend, batch, input_side=SIDE)
        single = [classify_batch(backend, [t], input_side=SIDE)[0] for t in batch]
        assert whole == single


class TestModelFileBackend:
    """Tests for the ONNX model backend."""

    def _expected(self, batch, weight, bias):
        pooled = np.stack([t.values.mean(axis=(0, 1)) for t in batch])
        return softmax(pooled @ weight + bias)

    def test_logits_are_softmaxed(self, tmp_path):
        path, weight, bias = build_onnx_model(tmp_path / "tiny.onnx", SIDE)
        backend = load_model_backend(path, SIDE)
        batch = tensors(5)
        result = classify_batch(backend, batch, input_side=SIDE)

        expected = self._expected(batch, weight, bias)
        for probs, row in zip(result, expected, strict=True):
            assert sum(probs.probs) == pytest.approx(1.0, abs=1e-5)
            assert probs.probs == pytest.approx(tuple(row), abs=1e-5)

    def test_probability_output_passes_through(self, tmp_path):
        path, weight, bias = build_onnx_model(tmp_path / "probs.onnx", SIDE, softmax=True)
        batch = tensors(2)
        result = classify_batch(ModelFileBackend(path, SIDE), batch, input_side=SIDE)
        for probs, row in zip(result, self._expected(batch, weight, bias), strict=True):
            assert probs.probs == pytest.approx(tuple(row), abs=1e-5)

    def test_fixed_batch_of_one(self, tmp_path):
        path, _, _ = build_onnx_model(tmp_path / "fixed.onnx", SIDE, batch=1)
        backend = ModelFileBackend(path, SIDE)
        assert backend.fixed_batch == 1
        assert len(classify_batch(backend, tensors(3), input_side=SIDE)) == 3

    @pytest.mark.parametrize("count", [1, 4, 6, 9])
    def test_fixed_batch_larger_than_one(self, tmp_path, count):
        """Inputs are fed in chunks of the declared size; the last chunk is padded."""
        fixed, _, _ = build_onnx_model(tmp_path / "fixed4.onnx", SIDE, batch=4)
        dynamic, _, _ = build_onnx_model(tmp_path / "dynamic.onnx", SIDE)
        batch = tensors(count, seed=2)

        backend = ModelFileBackend(fixed, SIDE)
        assert backend.fixed_batch == 4
        result = classify_batch(backend, batch, input_side=SIDE)
        expected = classify_batch(ModelFileBackend(dynamic, SIDE), batch, input_side=SIDE)
        assert len(result) == count
        for got, want in zip(result, expected, strict=True):
            assert got.probs == pytest.approx(want.probs, abs=1e-5)

    def test_batch_invariance(self, tmp_path):
        path, _, _ = build_onnx_model(tmp_path / "tiny.onnx", SIDE)
        backend = ModelFileBackend(path, SIDE)
        batch = tensors(6, seed=4)
        whole = classify_batch(backend, batch, input_side=SIDE)
        for tensor, expected in zip(batch, whole, strict=True):
            single = classify_batch(backend, [tensor], input_side=SIDE)[0]
            assert single.probs == pytest.approx(expected.probs, abs=1e-5)

    def test_output_width_five(self, tmp_path):
        path, _, _ = build_onnx_model(tmp_path / "five.onnx", SIDE, n_out=5)
        with pytest.raises(ShapeMismatchError):
            ModelFileBackend(path, SIDE)

    def test_input_side_mismatch(self, tmp_path):
        path, _, _ = build_onnx_model(tmp_path / "tiny.onnx", SIDE)
        with pytest.raises(ShapeMismatchError):
            ModelFileBackend(path, 224)

    def test_missing_and_corrupt_files(self, tmp_path):
        with pytest.raises(BackendUnavailableError):
            ModelFileBackend(tmp_path / "absent.onnx", SIDE)
        corrupt = tmp_path / "corrupt.onnx"
        corrupt.write_bytes(b"not a model")
        with pytest.raises(BackendUnavailableError):
            ModelFileBackend(corrupt, SIDE)


class TestRemoteBackend:
    """Tests for the HTTP classifier client."""

    def setup_method(self):
        self.requests = []
        self.vectors = [one_hot(i % 6, 0.8) for i in range(4)]

    def echo(self, request: httpx.Request) -> httpx.Response:
        self.requests.append(request)
        body = json.loads(request.content)
        results = [
            {"id": tile["id"], "probs": self.vectors[int(tile["id"])]}
            for tile in reversed(body["tiles"])
        ]
        return httpx.Response(200, json={"results": results})

    def test_echo_passes_vectors_through(self):
        backend = RemoteBackend(remote_spec(), transport=httpx.MockTransport(self.echo))
        result = classify_batch(backend, tensors(4), input_side=SIDE)

        assert [p.probs for p in result] == [tuple(v) for v in self.vectors]
        request = self.requests[0]
        assert request.url.path == CLASSIFY_PATH
        body = json.loads(request.content)
        assert body["model_id"] == "gleason"
        tile = body["tiles"][0]
        assert (tile["id"], tile["width"], tile["height"]) == ("0", SIDE, SIDE)
        decoded = np.frombuffer(base64.b64decode(tile["pixels_b64"]), dtype="<f4")
        np.testing.assert_array_equal(decoded.reshape(SIDE, SIDE, 3), tensors(1)[0].values)

    def test_bearer_token_from_environment(self, monkeypatch):
        monkeypatch.setenv(TOKEN_ENV, "secret")
        backend = create_backend(remote_spec(), SIDE, httpx.MockTransport(self.echo))
        classify_batch(backend, tensors(1), input_side=SIDE)
        assert self.requests[0].headers["Authorization"] == "Bearer secret"

    def test_count_mismatch(self):
        def three(request):
            return httpx.Response(
                200, json={"results": [{"id": str(i), "probs": one_hot(0)} for i in range(3)]}
            )

        backend = RemoteBackend(remote_spec(), transport=httpx.MockTransport(three))
        with pytest.raises(RemoteProtocolError):
            classify_batch(backend, tensors(4), input_side=SIDE)

    @pytest.mark.parametrize(
        "payload",
        [
            b"not json",
            b'{"answers": []}',
            b'{"results": [{"id": "0", "probs": [0.5, 0.5]}]}',
            b'{"results": [{"id": "7", "probs": [1, 0, 0, 0, 0, 0]}]}',
        ],
    )
    def test_malformed_responses(self, payload):
        transport = httpx.MockTransport(lambda request: httpx.Response(200, content=payload))
        backend = RemoteBackend(remote_spec(), transport=transport)
        with pytest.raises(RemoteProtocolError):
            classify_batch(backend, tensors(1), input_side=SIDE)

    def test_http_error(self):
        transport = httpx.MockTransport(lambda request: httpx.Response(503, text="busy"))
        backend = RemoteBackend(remote_spec(), transport=transport)
        with pytest.raises(RemoteHTTPError) as exc_info:
            classify_batch(backend, tensors(1), input_side=SIDE)
        assert exc_info.value.status_code == 503

    def test_retries_with_backoff_then_fails(self):
        calls = []

        def down(request):
            calls.append(request)
            raise httpx.ConnectError("connection refused", request=request)

        backend = RemoteBackend(
            remote_spec(retries=2, backoff=0.5), transport=httpx.MockTransport(down)
        )
        with patch("gleason.inference.time.sleep") as sleep:
            with pytest.raises(RemoteTransportError):
                classify_batch(backend, tensors(1), input_side=SIDE)

        assert len(calls) == 3
        assert [c.args[0] for c in sleep.call_args_list] == [0.5, 1.0]

    def test_recovers_after_transient_failure(self):
        attempts = []

        def flaky(request):
            attempts.append(request)
            if len(attempts) == 1:
                raise httpx.ReadTimeout("slow", request=request)
            return self.echo(request)

        backend = RemoteBackend(remote_spec(backoff=0.0), transport=httpx.MockTransport(flaky))
        assert len(classify_batch(backend, tensors(2), input_side=SIDE)) == 2
        assert len(attempts) == 2

    def test_remote_classify_one_shot(self):
        result = remote_classify(
            "http://classifier.test", tensors(2), transport=httpx.MockTransport(self.echo)
        )
        assert [p.probs for p in result] == [tuple(v) for v in self.vectors[:2]]

    def test_remote_classify_empty_batch(self):
        calls = []
        transport = httpx.MockTransport(lambda request: calls.append(request))
        with pytest.raises(ShapeMismatchError, match="at least one tile"):
            remote_classify("http://classifier.test", [], transport=transport)
        assert calls == []


class _StubHandler(BaseHTTPRequestHandler):
    vectors: list[list[float]] = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        results = [{"id": t["id"], "probs": self.vectors[int(t["id"])]} for t in body["tiles"]]
        payload = json.dumps({"results": results}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, format, *args):
        pass


class TestRemoteOverHttp:
    """Remote backend against a local stub server."""

    def test_stub_server_round_trip(self):
        _StubHandler.vectors = [one_hot(3), one_hot(4)]
        server = HTTPServer(("127.0.0.1", 0), _StubHandler)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            spec = BackendSpec.parse(f"remote:http://127.0.0.1:{server.server_port}")
            backend = RemoteBackend(spec)
            result = classify_batch(backend, tensors(2), input_side=SIDE)
            backend.close()
        finally:
            server.shutdown()
            server.server_close()

        assert [p.probs for p in result] == [tuple(one_hot(3)), tuple(one_hot(4))]

    def test_server_down(self):
        server = HTTPServer(("127.0.0.1", 0), _StubHandler)
        port = server.server_port
        server.server_close()

        backend = RemoteBackend(
            BackendSpec(kind="remote", locator=f"http://127.0.0.1:{port}", retries=2, backoff=0.0)
        )
        with pytest.raises(RemoteTransportError):
            classify_batch(backend, tensors(1), input_side=SIDE)


class TestBackendSpecAndPool:
    """Tests for backend selection and per-worker instances."""

    def test_parse(self):
        assert BackendSpec.parse("lookup:table.csv").kind == "lookup"
        assert BackendSpec.parse("model:m.onnx").kind == "model_file"
        spec = BackendSpec.parse("remote:http://host:8080")
        assert (spec.kind, spec.locator, spec.batch_size) == ("remote", "http://host:8080", 28)

    @pytest.mark.parametrize("text", ["table.csv", "grpc:host", "lookup:"])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigError):
            BackendSpec.parse(text)

    def test_lookup_is_shared(self, tmp_path):
        table = write_lookup_table(tmp_path / "t.csv", {("s", 0, 0): one_hot(0)})
        pool = BackendPool(BackendSpec(kind="lookup", locator=str(table)), SIDE)
        seen = []
        thread = threading.Thread(target=lambda: seen.append(pool.get()))
        thread.start()
        thread.join()
        assert seen[0] is pool.get()
        pool.close()

    def test_model_file_per_thread(self, tmp_path):
        path, _, _ = build_onnx_model(tmp_path / "tiny.onnx", SIDE)
        pool = BackendPool(BackendSpec(kind="model_file", locator=str(path)), SIDE)
        seen = []
        thread = threading.Thread(target=lambda: seen.append(pool.get()))
        thread.start()
        thread.join()
        assert seen[0] is not pool.get()
        assert pool.get() is pool.get()
        pool.close()


class TestPredictionsCsv:
    """Tests for the predictions table."""

    def test_round_trip_full_precision(self, tmp_path):
        rng = np.random.default_rng(9)
        predictions = []
        for i in range(5):
            vector = rng.dirichlet(np.ones(6))
            probs = normalize_probabilities(vector / vector.sum())
            predictions.append(Prediction("s", (i, 1), probs))

        path = write_predictions_csv(predictions, tmp_path / "p.csv")
        assert read_predictions_csv(path) == predictions

        header = path.read_text().splitlines()[0]
        assert header == "slide_id,col,row,p_regular,p_g3,p_g4,p_g5,p_art_empty,p_art_sponge,label"

    def test_writer_counts_and_labels(self, tmp_path):
        with PredictionWriter(tmp_path / "out" / "p.csv") as writer:
            writer.write(Prediction("s", (0, 0), ClassProbabilities(tuple(one_hot(2)))))
            assert writer.count == 1
        assert (tmp_path / "out" / "p.csv").read_text().splitlines()[1].endswith(",Gleason 4")
