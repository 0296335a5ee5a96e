"""Questions, answers, embeddings, similarity distributions, and the cache."""

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from hpfuse.autodiff import ShapeMismatch, Tensor, cosine_similarity, grad_check
from hpfuse.backends import (
    HttpAnswerBackend,
    HttpEmbeddingBackend,
    ProtocolError,
    StubAnswerBackend,
    StubEmbeddingBackend,
    TransportError,
)
from hpfuse.perception import (
    CONTEXT_LENGTH,
    AnswerSet,
    ImageEncoder,
    Question,
    QuestionSet,
    SemanticEmbeddings,
    encode_text,
    generate_answers,
    image_bytes_hash,
    similarity_distribution,
    tokenize,
)
from hpfuse.qa_cache import AnswerCache

IMAGE = b"\x89PNG fake image payload for testing"


# -- question set ------------------------------------------------------------


def test_default_question_set():
    qs = QuestionSet.default()
    assert [q.qid for q in qs.questions] == [1, 2, 3, 4]
    assert qs.questions[3].text == "What is the content of the image?"
    assert qs.questions[2].text == "What targets are significant in this image?"


def test_question_set_validation():
    with pytest.raises(ValueError, match="exactly 4"):
        QuestionSet((Question(1, "a?"),))
    with pytest.raises(ValueError, match="ids"):
        QuestionSet(tuple(Question(1, "a?") for _ in range(4)))
    with pytest.raises(ValueError, match="non-empty"):
        QuestionSet((Question(1, "a?"), Question(2, " "), Question(3, "c?"), Question(4, "d?")))


# -- tokenizer ----------------------------------------------------------------


def test_tokenize_shape_and_padding():
    ids = tokenize("a short answer")
    assert ids.shape == (CONTEXT_LENGTH,)
    assert np.all(ids[:3] > 0)
    assert np.all(ids[3:] == 0)


def test_tokenize_truncates_and_is_deterministic():
    long_text = " ".join(f"w{i}" for i in range(200))
    ids = tokenize(long_text)
    assert ids.shape == (CONTEXT_LENGTH,)
    assert np.all(ids > 0)
    np.testing.assert_array_equal(ids, tokenize(long_text))
    assert not np.array_equal(tokenize("w0 w1"), tokenize("w1 w0"))


# -- answers via the stub backend ------------------------------------------------


def test_stub_answers_deterministic_across_instances():
    qs = QuestionSet.default()
    a1 = generate_answers(IMAGE, qs, StubAnswerBackend(seed=7))
    a2 = generate_answers(IMAGE, qs, StubAnswerBackend(seed=7))
    assert a1.answers == a2.answers
    np.testing.assert_array_equal(a1.tokens, a2.tokens)
    assert a1.image_hash == image_bytes_hash(IMAGE)
    assert a1.tokens.shape == (CONTEXT_LENGTH, 4)
    # different seed or different image changes the answers
    assert generate_answers(IMAGE, qs, StubAnswerBackend(seed=8)).answers != a1.answers
    assert generate_answers(IMAGE + b"x", qs, StubAnswerBackend(seed=7)).answers != a1.answers


def test_cache_hit_skips_backend():
    qs = QuestionSet.default()
    backend = StubAnswerBackend(seed=1)
    cache = AnswerCache()
    first = generate_answers(IMAGE, qs, backend, cache=cache)
    assert backend.calls == 4
    second = generate_answers(IMAGE, qs, backend, cache=cache)
    assert backend.calls == 4  # all served from cache
    assert second.answers == first.answers


def test_answer_set_validation():
    tokens = np.zeros((CONTEXT_LENGTH, 4), dtype=np.int64)
    with pytest.raises(ValueError, match="source"):
        AnswerSet("h", "thermal", "b", ("a", "b", "c", "d"), tokens)
    with pytest.raises(ValueError, match="77x4"):
        AnswerSet("h", "ir", "b", ("a", "b", "c", "d"), np.zeros((5, 4), dtype=np.int64))


# -- cache persistence ------------------------------------------------------------


def test_cache_round_trip(tmp_path):
    path = tmp_path / "answers.jsonl"
    cache = AnswerCache(path)
    for i in range(8):
        cache.put(f"hash{i % 2}", i % 4 + 1, f"q{i % 4 + 1}", f"answer {i}", "backend-x")
    loaded = AnswerCache.load(path)
    assert len(loaded) == 8
    for got, want in zip(loaded.records, cache.records):
        assert got == want
    # a second reader sees identical contents
    again = AnswerCache.load(path)
    assert again.records == loaded.records


def test_cache_skips_corrupt_lines(tmp_path, caplog):
    path = tmp_path / "answers.jsonl"
    cache = AnswerCache(path)
    for i in range(3):
        cache.put("h", i + 1, "q", f"a{i}", "b")
    with open(path, "a", encoding="utf-8") as fh:
        fh.write("{not json at all\n")
    cache.put("h", 4, "q", "a3", "b")
    with caplog.at_level("WARNING"):
        loaded = AnswerCache.load(path)
    assert len(loaded) == 4
    assert loaded.skipped_lines == 1
    assert any("corrupt" in rec.message for rec in caplog.records)


def test_cache_get_miss_returns_none(tmp_path):
    cache = AnswerCache.load(tmp_path / "missing.jsonl")
    assert cache.get("h", 1, "b") is None
    assert len(cache) == 0


# -- text embeddings -----------------------------------------------------------------


def test_stub_embeddings_unit_norm_and_text_keyed():
    backend = StubEmbeddingBackend(seed=3, dim=64)
    rows = backend.embed(["same text", "same text", "other text"])
    np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(rows[0], rows[1])
    assert not np.array_equal(rows[0], rows[2])


def test_encode_text_shape():
    qs = QuestionSet.default()
    answers = generate_answers(IMAGE, qs, StubAnswerBackend(seed=0))
    rows = encode_text(answers, StubEmbeddingBackend(seed=0, dim=32))
    assert rows.shape == (4, 32)
    np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-9)


def test_semantic_embeddings_validation():
    text = np.eye(4, 16)
    good = SemanticEmbeddings(text, Tensor(np.ones(16)))
    assert good.dim == 16
    with pytest.raises(ShapeMismatch):
        SemanticEmbeddings(text, Tensor(np.ones(8)))
    with pytest.raises(ValueError, match="norm"):
        SemanticEmbeddings(np.zeros((4, 16)), Tensor(np.ones(16)))


# -- image encoder ----------------------------------------------------------------------


def test_image_encoder_deterministic_and_frozen():
    img = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 1, 32, 32)))
    e1 = ImageEncoder(embed_dim=64, seed=5).encode(img)
    e2 = ImageEncoder(embed_dim=64, seed=5).encode(img)
    np.testing.assert_array_equal(e1.data, e2.data)
    assert e1.shape == (64,)
    assert not e1.requires_grad  # frozen weights, constant input
    assert not np.array_equal(ImageEncoder(embed_dim=64, seed=6).encode(img).data, e1.data)


def test_image_encoder_scaled_input_stays_valid():
    img = np.random.default_rng(1).uniform(0, 1, (1, 1, 32, 32))
    enc = ImageEncoder(embed_dim=48, seed=2)
    full = enc.encode(Tensor(img)).data
    half = enc.encode(Tensor(0.5 * img)).data
    assert np.all(np.isfinite(half))
    assert np.linalg.norm(half) > 1e-9
    assert not np.allclose(full, half)


def test_image_encoder_gradient_reaches_input():
    enc = ImageEncoder(embed_dim=32, seed=3)
    target = Tensor(np.random.default_rng(4).standard_normal(32))
    img = Tensor(np.random.default_rng(5).uniform(0.2, 0.8, (1, 1, 16, 16)))
    err = grad_check(lambda t: cosine_similarity(enc.encode(t), target), img, max_elems=64,
                     rng=np.random.default_rng(0))
    assert err < 1e-3


def test_image_encoder_rejects_bad_shapes():
    enc = ImageEncoder(embed_dim=16, seed=0)
    with pytest.raises(ShapeMismatch):
        enc.encode(Tensor(np.zeros((1, 3, 32, 32))))
    with pytest.raises(ShapeMismatch):
        enc.encode(Tensor(np.zeros((1, 1, 8, 8))))


# -- similarity distribution ----------------------------------------------------------


def test_similarity_two_sample_hand_value():
    d = 8
    image = np.zeros(d)
    image[0] = 1.0
    texts = np.zeros((2, d))
    texts[0, 0] = 1.0   # cos = 1
    texts[1, 1] = 1.0   # cos = 0
    s = similarity_distribution(Tensor(image), texts).data
    e = np.e
    np.testing.assert_allclose(s, [e / (e + 1), 1 / (e + 1)], rtol=1e-9)


def test_similarity_identical_texts_is_uniform():
    rng = np.random.default_rng(0)
    image = Tensor(rng.standard_normal(16))
    row = rng.standard_normal(16)
    s = similarity_distribution(image, np.tile(row, (5, 1))).data
    np.testing.assert_allclose(s, 0.2, atol=1e-12)


def test_similarity_simplex_and_scale_invariance():
    rng = np.random.default_rng(1)
    image = rng.standard_normal(12)
    texts = rng.standard_normal((4, 12))
    base = similarity_distribution(Tensor(image), texts).data
    assert np.all(base > 0)
    assert abs(base.sum() - 1.0) < 1e-9
    for alpha in (0.5, 2.0, 10.0):
        scaled = similarity_distribution(Tensor(alpha * image), texts).data
        np.testing.assert_allclose(scaled, base, atol=1e-9)


def test_similarity_permutation_equivariance():
    rng = np.random.default_rng(2)
    image = Tensor(rng.standard_normal(10))
    texts = rng.standard_normal((6, 10))
    perm = rng.permutation(6)
    base = similarity_distribution(image, texts).data
    permuted = similarity_distribution(image, texts[perm]).data
    np.testing.assert_allclose(permuted, base[perm], rtol=1e-12)


def test_similarity_rejects_degenerate_inputs():
    with pytest.raises(ValueError, match=">= 2"):
        similarity_distribution(Tensor(np.ones(4)), np.ones((1, 4)))
    with pytest.raises(ValueError, match="zero-norm"):
        similarity_distribution(Tensor(np.zeros(4)), np.ones((3, 4)))
    with pytest.raises(ShapeMismatch):
        similarity_distribution(Tensor(np.ones(5)), np.ones((3, 4)))


def test_similarity_gradient_flows_to_image_embedding():
    rng = np.random.default_rng(3)
    texts = rng.standard_normal((3, 8))
    weights = Tensor(rng.standard_normal(3))
    err = grad_check(lambda t: (similarity_distribution(t, texts) * weights).sum(),
                     Tensor(rng.standard_normal(8)))
    assert err < 1e-6


# -- HTTP backends against a local fixture server ------------------------------------------


class _FixtureHandler(BaseHTTPRequestHandler):
    fail_first = 0
    seen: list[dict] = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append({"path": self.path, "body": body, "auth": self.headers.get("Authorization")})
        if type(self).fail_first > 0:
            type(self).fail_first -= 1
            self.send_response(503)
            self.end_headers()
            return
        if self.path == "/chat/completions":
            question = body["messages"][0]["content"][0]["text"]
            payload = {"choices": [{"message": {"content": f"Answer to: {question}"}}]}
        elif self.path == "/embeddings":
            vec = np.linspace(-1.0, 1.0, 512)
            payload = {"data": [{"embedding": vec.tolist()} for _ in body["input"]]}
        else:
            payload = {"oops": True}
        raw = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def log_message(self, *args):
        pass


@pytest.fixture()
def fixture_server():
    server = HTTPServer(("127.0.0.1", 0), _FixtureHandler)
    _FixtureHandler.fail_first = 0
    _FixtureHandler.seen = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()
    thread.join()


def test_http_answer_round_trip(fixture_server, monkeypatch):
    monkeypatch.setenv("HPFUSE_API_KEY", "sekrit")
    backend = HttpAnswerBackend(base_url=fixture_server, model="vlm-test", retry_delay=0.01)
    q = Question(4, "What is the content of the image?")
    answer = backend.answer(IMAGE, image_bytes_hash(IMAGE), q)
    assert answer == "Answer to: What is the content of the image?"
    sent = _FixtureHandler.seen[-1]
    assert sent["auth"] == "Bearer sekrit"
    assert sent["body"]["messages"][0]["content"][1]["image_url"]["url"].startswith("data:image/png;base64,")


def test_http_embedding_round_trip(fixture_server):
    backend = HttpEmbeddingBackend(base_url=fixture_server, dim=512, retry_delay=0.01)
    rows = backend.embed(["a known string"])
    assert rows.shape == (1, 512)
    np.testing.assert_allclose(rows[0], np.linspace(-1.0, 1.0, 512))


def test_http_retries_then_succeeds(fixture_server):
    _FixtureHandler.fail_first = 2
    backend = HttpAnswerBackend(base_url=fixture_server, retry_delay=0.01, max_retries=3)
    q = Question(1, "Which regions of the image have the highest contrast?")
    assert backend.answer(IMAGE, "h", q).startswith("Answer to:")


def test_http_transport_error_after_retries(fixture_server):
    _FixtureHandler.fail_first = 99
    backend = HttpAnswerBackend(base_url=fixture_server, retry_delay=0.001, max_retries=2)
    with pytest.raises(TransportError):
        backend.answer(IMAGE, "h", Question(1, "q?"))


def test_http_protocol_error_on_malformed(fixture_server):
    backend = HttpEmbeddingBackend(base_url=fixture_server, dim=64, retry_delay=0.01)
    with pytest.raises(ProtocolError, match="d=64"):
        backend.embed(["text"])  # fixture always returns 512-wide vectors


def test_http_requires_base_url(monkeypatch):
    monkeypatch.delenv("HPFUSE_BACKEND_URL", raising=False)
    with pytest.raises(ValueError, match="HPFUSE_BACKEND_URL"):
        HttpAnswerBackend()
