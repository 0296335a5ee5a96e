"""Question-driven semantic perception.

Four fixed questions, ordered from local saliency to global content, are
asked about every image; the free-text answers are embedded into a shared
d-dimensional space alongside a differentiable image embedding, and
per-question similarity distributions over a batch are computed from the
cosine similarities. Answer generation and text embedding go through the
pluggable backends; the image encoder is local (gradients must reach the
input image) and frozen.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeMismatch, Tensor, conv2d, leaky_relu, softmax
from .backends import derived_rng
from .qa_cache import AnswerCache

CONTEXT_LENGTH = 77
VOCAB_SIZE = 49408
EMBED_DIM_DEFAULT = 512

DEFAULT_QUESTION_TEXTS = (
    "Which regions of the image have the highest contrast?",
    "Which regions contain the most detailed information?",
    "What targets are significant in this image?",
    "What is the content of the image?",
)


@dataclass(frozen=True)
class Question:
    qid: int
    text: str


@dataclass(frozen=True)
class QuestionSet:
    """Exactly four questions with unique ids 1..4 and non-empty texts."""

    questions: tuple[Question, ...]

    def __post_init__(self):
        if len(self.questions) != 4:
            raise ValueError(f"a question set holds exactly 4 questions, got {len(self.questions)}")
        ids = [q.qid for q in self.questions]
        if sorted(ids) != [1, 2, 3, 4]:
            raise ValueError(f"question ids must be exactly 1..4, got {ids}")
        if any(not q.text.strip() for q in self.questions):
            raise ValueError("question texts must be non-empty")

    @classmethod
    def default(cls) -> "QuestionSet":
        return cls.from_texts(DEFAULT_QUESTION_TEXTS)

    @classmethod
    def from_texts(cls, texts) -> "QuestionSet":
        return cls(tuple(Question(i + 1, t) for i, t in enumerate(texts)))


def tokenize(text: str, seed: int = 0, context_length: int = CONTEXT_LENGTH,
             vocab_size: int = VOCAB_SIZE) -> np.ndarray:
    """Whitespace tokens mapped through a seeded hash vocabulary; pad id 0,
    truncated at ``context_length``."""
    ids = []
    for token in text.split():
        digest = hashlib.sha256(f"{seed}\x1f{token}".encode("utf-8")).digest()
        ids.append(1 + int.from_bytes(digest[:8], "little") % (vocab_size - 1))
        if len(ids) == context_length:
            break
    ids.extend([0] * (context_length - len(ids)))
    return np.asarray(ids, dtype=np.int64)


@dataclass
class AnswerSet:
    """Four answers for one image, with token columns of fixed length 77."""

    image_hash: str
    source: str                         # "ir" | "vis" | "fused"
    backend_id: str
    answers: tuple[str, str, str, str]
    tokens: np.ndarray = field(repr=False)  # (CONTEXT_LENGTH, 4), one column per answer

    def __post_init__(self):
        if len(self.answers) != 4:
            raise ValueError(f"an answer set holds exactly 4 answers, got {len(self.answers)}")
        if self.source not in ("ir", "vis", "fused"):
            raise ValueError(f"unknown source tag {self.source!r}")
        if self.tokens.shape != (CONTEXT_LENGTH, 4):
            raise ValueError(f"token matrix must be {CONTEXT_LENGTH}x4, got {self.tokens.shape}")


def image_bytes_hash(image_bytes: bytes) -> str:
    return hashlib.sha256(image_bytes).hexdigest()


def generate_answers(image_bytes: bytes, questions: QuestionSet, backend,
                     cache: AnswerCache | None = None, source: str = "ir",
                     token_seed: int = 0) -> AnswerSet:
    """Answer all four questions about one image (PNG bytes).

    Cached answers are served without touching the backend; fresh answers are
    appended to the cache, keyed by (image hash, question id, backend id).
    """
    image_hash = image_bytes_hash(image_bytes)
    answers = []
    for q in questions.questions:
        text = cache.get(image_hash, q.qid, backend.backend_id) if cache is not None else None
        if text is None:
            text = backend.answer(image_bytes, image_hash, q)
            if cache is not None:
                cache.put(image_hash, q.qid, q.text, text, backend.backend_id)
        answers.append(text)
    tokens = np.stack([tokenize(a, seed=token_seed) for a in answers], axis=1)
    return AnswerSet(image_hash=image_hash, source=source, backend_id=backend.backend_id,
                     answers=tuple(answers), tokens=tokens)


def encode_text(answer_set: AnswerSet, backend) -> np.ndarray:
    """Embed the four answer texts; rows are constants w.r.t. optimization."""
    rows = backend.embed(list(answer_set.answers))
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] != 4:
        raise ShapeMismatch(f"expected 4 embedding rows, got {rows.shape}")
    _validate_embedding_rows(rows)
    return rows


def _validate_embedding_rows(rows: np.ndarray) -> None:
    if not np.all(np.isfinite(rows)):
        raise ValueError("embeddings contain NaN/Inf")
    norms = np.linalg.norm(rows, axis=-1)
    if np.any(norms <= 1e-12):
        raise ValueError("embedding rows must have norm > 1e-12")


@dataclass
class SemanticEmbeddings:
    """Per-image semantic state: four answer-text rows plus one image vector.

    ``image_embedding`` stays a graph tensor so losses can differentiate
    through it; text rows are plain constants.
    """

    text_embeddings: np.ndarray       # (4, d)
    image_embedding: Tensor           # (d,)

    def __post_init__(self):
        if self.text_embeddings.shape != (4, self.dim):
            raise ShapeMismatch(
                f"text embeddings {self.text_embeddings.shape} inconsistent with image embedding ({self.dim},)")
        _validate_embedding_rows(self.text_embeddings)
        _validate_embedding_rows(self.image_embedding.data.reshape(1, -1))

    @property
    def dim(self) -> int:
        return self.image_embedding.shape[0]


class ImageEncoder:
    """Frozen strided convolutional encoder into the shared semantic space.

    Stands in for an external frozen image embedder: the weights are
    seed-derived and never trained, but the forward pass is differentiable
    so semantic losses can push gradients into the input image. Works on
    single-channel images with H, W >= 16 (four stride-2 stages, then
    global average pooling and a linear projection).
    """

    CHANNELS = (1, 16, 32, 64, 64)

    def __init__(self, embed_dim: int = EMBED_DIM_DEFAULT, seed: int = 0, dtype=np.float64):
        self.embed_dim = embed_dim
        self.seed = seed
        rng = derived_rng("image-encoder", seed)
        self.kernels = []
        for cin, cout in zip(self.CHANNELS[:-1], self.CHANNELS[1:]):
            bound = 1.0 / np.sqrt(cin * 9)
            self.kernels.append(Tensor(rng.uniform(-bound, bound, (cout, cin, 3, 3)).astype(dtype)))
        cfin = self.CHANNELS[-1]
        bound = 1.0 / np.sqrt(cfin)
        self.projection = Tensor(rng.uniform(-bound, bound, (cfin, embed_dim)).astype(dtype))

    def encode_batch(self, images: Tensor) -> Tensor:
        """Map an Nx1xHxW image stack to an Nxd matrix."""
        if images.ndim != 4 or images.shape[1] != 1:
            raise ShapeMismatch(f"encoder expects an Nx1xHxW stack, got {images.shape}")
        h, w = images.shape[2], images.shape[3]
        if h < 16 or w < 16:
            raise ShapeMismatch(f"encoder needs H, W >= 16, got {h}x{w}")
        x = images
        for k in self.kernels:
            x = leaky_relu(conv2d(x, k, stride=2, padding=1))
        n, c, hw = x.shape[0], x.shape[1], x.shape[2] * x.shape[3]
        pooled = x.reshape(n * c, hw) @ Tensor(np.full((hw, 1), 1.0 / hw, dtype=x.dtype))
        return pooled.reshape(n, c) @ self.projection

    def encode(self, image: Tensor) -> Tensor:
        """Map a 1x1xHxW image tensor to a d-vector."""
        if image.ndim != 4 or image.shape[0] != 1:
            raise ShapeMismatch(f"encoder expects a 1x1xHxW image, got {image.shape}")
        return self.encode_batch(image).reshape(self.embed_dim)


@dataclass
class SimilarityDistribution:
    """Batch-softmax of one image's cosine similarities to per-sample answer
    texts of one question."""

    question_index: int
    probabilities: Tensor             # (B,), positive, sums to 1

    def __post_init__(self):
        if not (1 <= self.question_index <= 4):
            raise ValueError(f"question index must be in 1..4, got {self.question_index}")


def similarity_distribution(image_embedding: Tensor, batch_text_embeddings: np.ndarray) -> Tensor:
    """Softmax over the batch of cos(image embedding, per-sample text row).

    Differentiable w.r.t. the image embedding; the text rows are constants.
    """
    texts = np.asarray(batch_text_embeddings, dtype=np.float64)
    if texts.ndim != 2:
        raise ShapeMismatch(f"batch text embeddings must be BxD, got {texts.shape}")
    b, d = texts.shape
    if b < 2:
        raise ValueError(f"similarity distribution needs a batch of >= 2, got {b}")
    if image_embedding.ndim != 1 or image_embedding.shape[0] != d:
        raise ShapeMismatch(f"image embedding {image_embedding.shape} does not match text dim {d}")
    norms = np.linalg.norm(texts, axis=1)
    if np.any(norms <= 1e-12) or float(np.linalg.norm(image_embedding.data)) <= 1e-12:
        raise ValueError("similarity distribution is undefined for zero-norm vectors")

    unit_texts = Tensor((texts / norms[:, None]).astype(image_embedding.dtype))
    norm = (image_embedding * image_embedding).sum().sqrt()
    unit_image = (image_embedding / norm).reshape(d, 1)
    cosines = (unit_texts @ unit_image).reshape(b)
    return softmax(cosines)
