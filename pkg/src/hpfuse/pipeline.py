"""Training loop, inference, and orchestration.

The loop is single-threaded over batches for determinism: per batch it runs
the fusion forward per sample, refreshes fused-image answers on a per-epoch
schedule (stale embeddings are reused between refreshes), assembles the
total loss, and takes one Adam step. Source answers are generated once,
content-addressed by the source file hash. Epoch checkpoints consist of the
model file plus a state sidecar (optimizer moments, iteration counters, and
the fused-answer embeddings) so an interrupted float32 run resumes
bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .backends import (
    HttpAnswerBackend,
    HttpEmbeddingBackend,
    StubAnswerBackend,
    StubEmbeddingBackend,
    TransportError,
)
from .config import TrainConfig
from .data import (
    DatasetError,
    encode_gray_png,
    load_dataset,
    load_pair,
    resize_bilinear,
    save_gray_png,
    save_rgb_png,
    ycbcr_to_rgb,
)
from .fusenet import FusionArch, fuse_forward, fuse_forward_batch, init_fusion_model, load_model, save_model
from .losses import total_loss
from .optim import Adam
from .perception import ImageEncoder, QuestionSet, SemanticEmbeddings, encode_text, generate_answers
from .qa_cache import AnswerCache

CHECKPOINT_MAGIC = b"HPC1"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODE_FOR_KIND = {"f4": 0, "f8": 1, "i8": 2}


class TrainingAborted(RuntimeError):
    """Training stopped early; a resumable checkpoint was written if possible."""


@dataclass
class TrainResult:
    model_path: Path
    log_path: Path
    history: list[dict] = field(default_factory=list)


def build_backends(config: TrainConfig):
    if config.backend == "stub":
        return (StubAnswerBackend(seed=config.seed),
                StubEmbeddingBackend(seed=config.seed, dim=config.embed_dim))
    return (HttpAnswerBackend(model=config.answer_model),
            HttpEmbeddingBackend(model=config.embed_model, dim=config.embed_dim))


def _format_record(record: dict, json_logs: bool) -> str:
    if json_logs:
        return json.dumps(record, sort_keys=True)
    return (f"{record['epoch']}\t{record['iter']}\t{record['l_int']:.6f}"
            f"\t{record['l_detail']:.6f}\t{record['l_hier']:.6f}\t{record['l_total']:.6f}")


def train(config: TrainConfig, *, answer_backend=None, embed_backend=None,
          log_stream=None, json_logs: bool = False,
          resume_epoch: int | None = None) -> TrainResult:
    config.validate()
    dt = np.float32 if config.dtype == "float32" else np.float64
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    pairs = load_dataset(config.data_dir)
    if len(pairs) < config.batch_size:
        raise DatasetError(f"dataset has {len(pairs)} pairs, batch size is {config.batch_size}")

    hier_on = config.beta != 0.0 and not config.disable_hier_loss
    guidance_on = not config.disable_text_guidance
    questions = config.questions()

    if answer_backend is None or embed_backend is None:
        default_answers, default_embeds = build_backends(config)
        answer_backend = answer_backend or default_answers
        embed_backend = embed_backend or default_embeds
    cache = AnswerCache.load(config.cache_path)

    ir_planes = [np.clip(resize_bilinear(p.infrared[0], config.resize), 0, 1).astype(dt) for p in pairs]
    vis_planes = [np.clip(resize_bilinear(p.visible[0], config.resize), 0, 1).astype(dt) for p in pairs]

    src_texts: dict[str, list[np.ndarray]] = {"ir": [], "vis": []}
    if guidance_on or hier_on:
        for pair in pairs:
            for modality, path in (("ir", pair.ir_path), ("vis", pair.vis_path)):
                answers = generate_answers(Path(path).read_bytes(), questions, answer_backend,
                                           cache=cache, source=modality)
                src_texts[modality].append(encode_text(answers, embed_backend).astype(dt))

    encoder = ImageEncoder(embed_dim=config.embed_dim, seed=config.seed, dtype=dt) if hier_on else None
    src_img_embs: dict[str, list[Tensor]] = {"ir": [], "vis": []}
    if hier_on:
        for modality, planes in (("ir", ir_planes), ("vis", vis_planes)):
            for plane in planes:
                src_img_embs[modality].append(encoder.encode(Tensor(plane[None, None])).detach())

    arch = FusionArch(base_channels=config.base_channels, embed_dim=config.embed_dim,
                      attn_dim=config.attn_dim)
    model = init_fusion_model(arch, seed=config.seed, dtype=dt)
    optimizer = Adam(model.params, lr=config.lr, beta1=config.adam_beta1,
                     beta2=config.adam_beta2, eps=config.adam_eps)

    fused_texts: list[np.ndarray | None] = [None] * len(pairs)
    refresh_epoch = np.full(len(pairs), np.iinfo(np.int64).min, dtype=np.int64)
    start_epoch, iteration = 1, 0

    if resume_epoch is not None:
        checkpoint = out_dir / f"model.e{resume_epoch:03d}.hpf"
        loaded = load_model(checkpoint)
        if loaded.arch != arch:
            raise TrainingAborted(f"checkpoint architecture {loaded.arch} differs from config")
        for name, tensor in loaded.params.items():
            model.params[name].data = tensor.data.astype(dt)
        iteration = _load_checkpoint_state(checkpoint.with_suffix(".state"), optimizer,
                                           fused_texts, refresh_epoch, dt)
        start_epoch = resume_epoch + 1

    log_path = out_dir / "train.log"
    history: list[dict] = []

    def run_epochs(log_fh) -> None:
        nonlocal iteration
        for epoch in range(start_epoch, config.epochs + 1):
            order = np.random.default_rng([config.seed, 7919, epoch]).permutation(len(pairs))
            for base in range(0, len(order) - config.batch_size + 1, config.batch_size):
                batch = order[base : base + config.batch_size]
                ir_t = Tensor(np.stack([ir_planes[i] for i in batch])[:, None])
                vis_t = Tensor(np.stack([vis_planes[i] for i in batch])[:, None])
                fused = fuse_forward_batch(
                    ir_t, vis_t,
                    [src_texts["ir"][i] if guidance_on else None for i in batch],
                    [src_texts["vis"][i] if guidance_on else None for i in batch],
                    model)
                fused_embs, ir_embs, vis_embs = [], [], []
                if hier_on:
                    for slot, idx in enumerate(batch):
                        if fused_texts[idx] is None or epoch - refresh_epoch[idx] >= config.refresh_interval:
                            answers = generate_answers(encode_gray_png(fused.data[slot, 0]), questions,
                                                       answer_backend, cache=cache, source="fused")
                            fused_texts[idx] = encode_text(answers, embed_backend).astype(dt)
                            refresh_epoch[idx] = epoch
                    fused_vecs = encoder.encode_batch(fused)
                    for slot, idx in enumerate(batch):
                        fused_embs.append(SemanticEmbeddings(fused_texts[idx], fused_vecs[slot]))
                        ir_embs.append(SemanticEmbeddings(src_texts["ir"][idx], src_img_embs["ir"][idx]))
                        vis_embs.append(SemanticEmbeddings(src_texts["vis"][idx], src_img_embs["vis"][idx]))
                breakdown = total_loss(fused, ir_t, vis_t,
                                       fused_embs or None, ir_embs or None, vis_embs or None,
                                       alpha=config.alpha, beta=config.beta if hier_on else 0.0)
                values = breakdown.as_floats()
                if not all(np.isfinite(v) for v in values.values()):
                    dump = {"epoch": epoch, "iter": iteration + 1, "losses": values,
                            "batch": [pairs[i].name for i in batch]}
                    (out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2))
                    raise TrainingAborted(
                        f"non-finite loss at epoch {epoch}; diagnostics in {out_dir / 'nan_dump.json'}")
                optimizer.zero_grad()
                breakdown.l_total.backward()
                optimizer.step()
                iteration += 1
                record = {"epoch": epoch, "iter": iteration, **values}
                history.append(record)
                line = _format_record(record, json_logs)
                log_fh.write(line + "\n")
                if log_stream is not None:
                    print(line, file=log_stream)
                if config.max_iters is not None and iteration >= config.max_iters:
                    return
            if epoch % config.checkpoint_interval == 0 and epoch < config.epochs:
                _write_checkpoint(out_dir, epoch, model, optimizer, iteration,
                                  fused_texts, refresh_epoch)

    with open(log_path, "a" if resume_epoch is not None else "w", encoding="utf-8") as log_fh:
        try:
            run_epochs(log_fh)
        except TransportError as exc:
            _write_checkpoint(out_dir, "abort", model, optimizer, iteration,
                              fused_texts, refresh_epoch)
            raise TrainingAborted(
                f"perception backend failed after retries ({exc}); "
                f"resumable checkpoint at {out_dir / 'model.abort.hpf'}") from exc

    model_path = out_dir / "model.hpf"
    save_model(model_path, model)
    return TrainResult(model_path=model_path, log_path=log_path, history=history)


def _write_checkpoint(out_dir: Path, tag, model, optimizer, iteration,
                      fused_texts, refresh_epoch) -> None:
    stem = f"model.e{tag:03d}" if isinstance(tag, int) else f"model.{tag}"
    save_model(out_dir / f"{stem}.hpf", model)
    _save_checkpoint_state(out_dir / f"{stem}.state", optimizer, iteration,
                           fused_texts, refresh_epoch)


# -- checkpoint state sidecar -------------------------------------------------------
#
# magic "HPC1" | u32 version | u64 adam step count | u64 iteration
# f64 lr, beta1, beta2, eps | dtype-tagged tensor table (sorted by name):
#   u16 name length | name | u8 dtype code (0=f4, 1=f8, 2=i8) | u32 ndim | u32 dims... | raw LE


def _save_checkpoint_state(path, optimizer: Adam, iteration: int,
                           fused_texts, refresh_epoch) -> None:
    state = optimizer.state
    entries: dict[str, np.ndarray] = {}
    for name, moment in state.first_moment.items():
        entries[f"m.{name}"] = moment
    for name, moment in state.second_moment.items():
        entries[f"v.{name}"] = moment
    for i, texts in enumerate(fused_texts):
        if texts is not None:
            entries[f"texts.{i}"] = texts
    entries["refresh"] = refresh_epoch
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<QQ", state.step_count, iteration)
    blob += struct.pack("<4d", state.lr, state.beta1, state.beta2, state.eps)
    blob += struct.pack("<I", len(entries))
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name])
        kind = arr.dtype.str.lstrip("<>=|")
        if kind not in _CODE_FOR_KIND:
            arr = arr.astype(np.float64)
            kind = "f8"
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<BI", _CODE_FOR_KIND[kind], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype(_DTYPE_CODES[_CODE_FOR_KIND[kind]]).tobytes()
    Path(path).write_bytes(bytes(blob))


def _load_checkpoint_state(path, optimizer: Adam, fused_texts, refresh_epoch, dt) -> int:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise TrainingAborted(f"{path} is not a checkpoint state file")
    pos = 4
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise TrainingAborted(f"unsupported checkpoint version {version}")
    step_count, iteration = struct.unpack_from("<QQ", blob, pos)
    pos += 16
    lr, beta1, beta2, eps = struct.unpack_from("<4d", blob, pos)
    pos += 32
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    state = optimizer.state
    state.step_count = step_count
    state.lr, state.beta1, state.beta2, state.eps = lr, beta1, beta2, eps
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BI", blob, pos)
        pos += 5
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        dtype = _DTYPE_CODES[code]
        n_bytes = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
        arr = np.frombuffer(blob[pos : pos + n_bytes], dtype=dtype).reshape(shape).copy()
        pos += n_bytes
        if name.startswith("m."):
            state.first_moment[name[2:]] = arr
        elif name.startswith("v."):
            state.second_moment[name[2:]] = arr
        elif name.startswith("texts."):
            fused_texts[int(name.split(".", 1)[1])] = arr.astype(dt)
        elif name == "refresh":
            refresh_epoch[:] = arr
    return int(iteration)


# -- inference ------------------------------------------------------------------------


def fuse(ir_path, vis_path, model_path, out_path, *, backend: str = "stub", seed: int = 0,
         answer_model: str = "default", embed_model: str = "default",
         questions: QuestionSet | None = None, cache_path=None,
         answer_backend=None, embed_backend=None, use_guidance: bool = True) -> Path:
    """Fuse one pair at native resolution and write an 8-bit PNG atomically.

    Chroma from a color visible input is reattached to the fused luma.
    """
    model_path = Path(model_path)
    if not model_path.exists():
        raise FileNotFoundError(f"model file not found: {model_path}")
    model = load_model(model_path)
    dt = next(iter(model.params.values())).dtype
    pair = load_pair(ir_path, vis_path)
    questions = questions or QuestionSet.default()
    cache = AnswerCache.load(cache_path) if cache_path else AnswerCache()

    text_ir = text_vis = None
    if use_guidance:
        if answer_backend is None or embed_backend is None:
            if backend == "stub":
                answer_backend = answer_backend or StubAnswerBackend(seed=seed)
                embed_backend = embed_backend or StubEmbeddingBackend(seed=seed, dim=model.arch.embed_dim)
            else:
                answer_backend = answer_backend or HttpAnswerBackend(model=answer_model)
                embed_backend = embed_backend or HttpEmbeddingBackend(model=embed_model,
                                                                      dim=model.arch.embed_dim)
        texts = {}
        for modality, path in (("ir", pair.ir_path), ("vis", pair.vis_path)):
            answers = generate_answers(Path(path).read_bytes(), questions, answer_backend,
                                       cache=cache, source=modality)
            texts[modality] = encode_text(answers, embed_backend).astype(dt)
        text_ir, text_vis = texts["ir"], texts["vis"]

    ir_t = Tensor(pair.infrared.astype(dt)[None])
    vis_t = Tensor(pair.visible.astype(dt)[None])
    fused = fuse_forward(ir_t, vis_t, text_ir, text_vis, model)
    out01 = np.clip(fused.data[0, 0].astype(np.float64), 0.0, 1.0)
    out_path = Path(out_path)
    if pair.chroma is not None:
        save_rgb_png(out_path, ycbcr_to_rgb(out01, pair.chroma))
    else:
        save_gray_png(out_path, out01)
    return out_path


def ask(ir_path, vis_path, *, answer_backend, questions: QuestionSet | None = None,
        cache: AnswerCache | None = None) -> list[tuple[str, int, str, str]]:
    """All four answers for both source images: (source, qid, question, answer)."""
    questions = questions or QuestionSet.default()
    rows = []
    for modality, path in (("ir", ir_path), ("vis", vis_path)):
        answers = generate_answers(Path(path).read_bytes(), questions, answer_backend,
                                   cache=cache, source=modality)
        for q, a in zip(questions.questions, answers.answers):
            rows.append((modality, q.qid, q.text, a))
    return rows
