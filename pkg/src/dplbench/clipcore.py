"""Toy dual encoder: image MLP and pooled-token text MLP trained contrastively.

The text tower embeds a sequence of continuous token vectors by averaging
``token * (1 + positional) + positional`` and passing the result through a
small MLP. The multiplicative term makes the pooled vector depend on token
order while keeping it linear in the tokens. Prompts
therefore only need to supply token vectors, which is what lets learned
context tokens slot in next to fixed class tokens.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkit as nk
from .errors import ConfigError, DomainError, FormatError, LengthError, ShapeError, TrialFailure
from .worldgen import CaptionCorpus, DomainDataset, Vocab, WorldSpec, sample_domain_dataset


@dataclass(frozen=True)
class EncoderConfig:
    emb_dim: int = 16
    tok_dim: int = 8
    hidden: int = 64
    max_len: int = 16


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 5000
    batch_size: int = 32
    tau: float = 0.1
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    n_per_domain: int = 400
    domain_token_prob: float = 0.5


@dataclass(frozen=True)
class FrozenEncoders:
    image: nk.MlpParams
    token_table: np.ndarray
    positional: np.ndarray
    text_mlp: nk.MlpParams
    frozen: bool = False
    # inverse pretraining temperature, reused to scale downstream training logits
    logit_scale: float = 1.0

    @property
    def input_dim(self) -> int:
        return self.image.in_dim

    @property
    def emb_dim(self) -> int:
        return self.image.out_dim

    @property
    def tok_dim(self) -> int:
        return self.token_table.shape[1]

    @property
    def max_len(self) -> int:
        return self.positional.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return self.image.arrays() + [self.token_table, self.positional] + self.text_mlp.arrays()

    def array_names(self) -> list[str]:
        return (
            ["image." + n for n in self.image.array_names()]
            + ["token_table", "positional"]
            + ["text." + n for n in self.text_mlp.array_names()]
        )

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "FrozenEncoders":
        n_img = len(self.image.arrays())
        arrays = list(arrays)
        return FrozenEncoders(
            self.image.with_arrays(arrays[:n_img]),
            arrays[n_img],
            arrays[n_img + 1],
            self.text_mlp.with_arrays(arrays[n_img + 2 :]),
            self.frozen,
            self.logit_scale,
        )

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    @property
    def fingerprint(self) -> str:
        return content_fingerprint(
            self.array_names(),
            self.arrays(),
            self.image.activations + self.text_mlp.activations + (float(self.logit_scale),),
        )

    def freeze(self, logit_scale: float | None = None) -> "FrozenEncoders":
        arrays = [np.array(a, dtype=np.float64) for a in self.arrays()]
        for a in arrays:
            a.flags.writeable = False
        enc = self.with_arrays(arrays)
        scale = self.logit_scale if logit_scale is None else logit_scale
        return FrozenEncoders(enc.image, enc.token_table, enc.positional, enc.text_mlp, True, scale)


def content_fingerprint(names, arrays, extra=()) -> str:
    h = hashlib.sha256()
    for name, a in zip(names, arrays):
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(name.encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    h.update(repr(tuple(extra)).encode())
    return h.hexdigest()


def init_encoders(world: WorldSpec, cfg: EncoderConfig, rng: nk.Rng) -> FrozenEncoders:
    image = nk.init_mlp(rng.spawn("image"), [world.input_dim, cfg.hidden, cfg.emb_dim])
    tok = rng.spawn("tokens").normal(world.vocab.size * cfg.tok_dim).reshape(-1, cfg.tok_dim)
    pos = rng.spawn("positional").normal(cfg.max_len * cfg.tok_dim, 0.1).reshape(-1, cfg.tok_dim)
    text = nk.init_mlp(rng.spawn("text"), [cfg.tok_dim, cfg.hidden, cfg.emb_dim])
    return FrozenEncoders(image, tok, pos, text)


# --------------------------------------------------------------------------
# encoders
# --------------------------------------------------------------------------


def image_encode(enc: FrozenEncoders, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != enc.input_dim:
        raise ShapeError(f"input dim {x.shape[-1]} != encoder input dim {enc.input_dim}")
    return nk.mlp_forward(enc.image, x)[0]


def lookup_tokens(enc: FrozenEncoders, ids: Sequence[int]) -> np.ndarray:
    """Continuous embeddings for a sequence of token ids."""
    return enc.token_table[np.asarray(ids, dtype=np.int64)]


def _pool(enc: FrozenEncoders, tokens: np.ndarray) -> np.ndarray:
    """Position-modulated mean over the sequence axis (second to last)."""
    length = tokens.shape[-2]
    if not 1 <= length <= enc.max_len:
        raise LengthError(f"sequence length {length} outside [1, {enc.max_len}]")
    if tokens.shape[-1] != enc.tok_dim:
        raise ShapeError(f"token dim {tokens.shape[-1]} != {enc.tok_dim}")
    pos = enc.positional[:length]
    return (tokens * (1.0 + pos) + pos).mean(axis=-2)


def text_encode(enc: FrozenEncoders, tokens) -> np.ndarray:
    """Embed one (L, tok_dim) token sequence, or a stack (..., L, tok_dim)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    pooled = _pool(enc, tokens)
    flat = pooled.reshape(-1, enc.tok_dim)
    out = nk.mlp_forward(enc.text_mlp, flat)[0]
    return out.reshape(pooled.shape[:-1] + (enc.emb_dim,))


def encode_captions(enc: FrozenEncoders, captions: Sequence[Sequence[int]]) -> np.ndarray:
    pooled, _ = _pool_ids(enc, captions)
    return nk.mlp_forward(enc.text_mlp, pooled)[0]


def _pool_ids(enc: FrozenEncoders, captions):
    lengths = np.array([len(c) for c in captions])
    if lengths.min() < 1 or lengths.max() > enc.max_len:
        raise LengthError(f"caption lengths must lie in [1, {enc.max_len}]")
    lmax = lengths.max()
    ids = np.zeros((len(captions), lmax), dtype=np.int64)
    mask = np.zeros((len(captions), lmax))
    for i, c in enumerate(captions):
        ids[i, : len(c)] = c
        mask[i, : len(c)] = 1.0
    w = mask / lengths[:, None]
    tok = enc.token_table[ids]
    pos = enc.positional[:lmax][None]
    pooled = np.einsum("bl,bld->bd", w, tok * (1.0 + pos) + pos)
    return pooled, (ids, w, tok)


# --------------------------------------------------------------------------
# contrastive objective
# --------------------------------------------------------------------------


def info_nce_loss(img_embs, txt_embs, tau: float):
    """Symmetric InfoNCE over the BxB cosine matrix scaled by 1/tau.

    Returns ``(loss, d_img, d_txt)``; row i of each list is a positive pair.
    """
    if tau <= 0:
        raise ConfigError("tau must be positive")
    img = np.asarray(img_embs, dtype=np.float64)
    txt = np.asarray(txt_embs, dtype=np.float64)
    if img.shape != txt.shape or img.ndim != 2:
        raise ShapeError("image and text embedding batches must have equal shapes")
    b = img.shape[0]
    if b < 2:
        raise ShapeError("InfoNCE needs a batch of at least 2 pairs")
    s, cache = nk.cosine_matrix(img, txt)
    logits = s / tau
    targets = np.arange(b)
    row_l, row_d = nk.softmax_cross_entropy_batch(logits, targets)
    col_l, col_d = nk.softmax_cross_entropy_batch(logits.T, targets)
    loss = 0.5 * (row_l.mean() + col_l.mean())
    dlogits = 0.5 * (row_d + col_d.T) / b
    d_img, d_txt = nk.cosine_matrix_backward(cache, dlogits / tau)
    return float(loss), d_img, d_txt


def contrastive_loss_and_grad(enc: FrozenEncoders, x: np.ndarray, captions, tau: float):
    """InfoNCE of one batch and its gradient wrt every encoder array."""
    img, img_tape = nk.mlp_forward(enc.image, x)
    pooled, (ids, w, tok) = _pool_ids(enc, captions)
    txt, txt_tape = nk.mlp_forward(enc.text_mlp, pooled)
    loss, d_img, d_txt = info_nce_loss(img, txt, tau)
    g_img, _ = nk.mlp_backward(enc.image, img_tape, d_img)
    g_text, d_pooled = nk.mlp_backward(enc.text_mlp, txt_tape, d_txt)
    d_summed = w[:, :, None] * d_pooled[:, None, :]
    lmax = ids.shape[1]
    g_tok = np.zeros_like(enc.token_table)
    d_tok = d_summed * (1.0 + enc.positional[:lmax])
    np.add.at(g_tok, ids.reshape(-1), d_tok.reshape(-1, enc.tok_dim))
    g_pos = np.zeros_like(enc.positional)
    g_pos[:lmax] = (d_summed * (tok + 1.0)).sum(axis=0)
    grads = FrozenEncoders(g_img, g_tok, g_pos, g_text)
    return loss, grads


def pretrain(
    world: WorldSpec,
    corpus: CaptionCorpus,
    config: PretrainConfig = PretrainConfig(),
    enc_config: EncoderConfig = EncoderConfig(),
    history: list | None = None,
) -> FrozenEncoders:
    """Jointly train both towers with InfoNCE and SGD+momentum, then freeze."""
    if len(set(corpus.labels.tolist())) < 2:
        raise ConfigError("pretraining corpus must span at least 2 classes")
    rng = nk.Rng(config.seed, ("pretrain",))
    enc = init_encoders(world, enc_config, rng.spawn("init"))
    state = nk.init_optimizer(enc, config.lr, config.momentum)
    batch_rng = rng.spawn("batches")
    n = len(corpus)
    bsz = min(config.batch_size, n)
    for step in range(config.steps):
        idx = batch_rng.permutation(n)[:bsz]
        loss, grads = contrastive_loss_and_grad(
            enc, corpus.x[idx], [corpus.captions[i] for i in idx], config.tau
        )
        if not np.isfinite(loss):
            raise TrialFailure("pretraining loss diverged", step)
        if history is not None:
            history.append(loss)
        try:
            enc, state = nk.sgd_momentum_step(enc, grads, state)
        except ArithmeticError as exc:
            raise TrialFailure(f"pretraining diverged: {exc}", step) from exc
    return enc.freeze(logit_scale=1.0 / config.tau)


def retrieval_top1(enc: FrozenEncoders, corpus: CaptionCorpus, world: WorldSpec, batch: int = 32) -> float:
    """In-batch image-to-caption retrieval accuracy.

    A retrieved caption counts as correct when it names the image's class and
    does not name a different domain (a plain template caption of the right
    class is a valid description of any image of that class).
    """
    dom_of_token = {t: i for i, t in enumerate(world.vocab.domains)}
    class_of_token = {t: i for i, t in enumerate(world.vocab.classes)}
    hits = total = 0
    for start in range(0, len(corpus) - 1, batch):
        stop = min(start + batch, len(corpus))
        if stop - start < 2:
            break
        img = image_encode(enc, corpus.x[start:stop])
        txt = encode_captions(enc, corpus.captions[start:stop])
        s, _ = nk.cosine_matrix(img, txt)
        best = np.argmax(s, axis=1)
        for i, j in enumerate(best):
            cap = corpus.captions[start + j]
            label = corpus.labels[start + i]
            dom = corpus.domain_ids[start + i]
            classes = [class_of_token[t] for t in cap if t in class_of_token]
            doms = [dom_of_token[t] for t in cap if t in dom_of_token]
            hits += classes == [label] and all(d == dom for d in doms)
            total += 1
    return hits / total


# --------------------------------------------------------------------------
# zero-shot prediction
# --------------------------------------------------------------------------


@dataclass
class ClassPrompt:
    class_id: int
    tokens: np.ndarray
    embedding: np.ndarray = field(repr=False)


def make_class_prompts(enc: FrozenEncoders, vocab: Vocab, template: bool = True) -> list[ClassPrompt]:
    """Handcrafted prompts: template tokens + class token, or the class token alone."""
    prompts = []
    for k, cls_tok in enumerate(vocab.classes):
        ids = (vocab.template if template else ()) + (cls_tok,)
        tokens = lookup_tokens(enc, ids)
        prompts.append(ClassPrompt(k, tokens, text_encode(enc, tokens)))
    return prompts


def _prompt_matrix(prompts: Sequence[ClassPrompt]) -> np.ndarray:
    ids = sorted(p.class_id for p in prompts)
    if len(prompts) < 2 or ids != list(range(len(prompts))):
        raise ValueError("prompts must cover class ids 0..K-1 exactly once (K >= 2)")
    order = sorted(prompts, key=lambda p: p.class_id)
    return np.stack([p.embedding for p in order])


def predict_with_embeddings(img_embs: np.ndarray, class_embs: np.ndarray) -> np.ndarray:
    """Cosine argmax per row; ``np.argmax`` resolves ties to the lowest index."""
    s, _ = nk.cosine_matrix(np.atleast_2d(img_embs), class_embs)
    return np.argmax(s, axis=-1)


def zero_shot_predict(enc: FrozenEncoders, prompts: Sequence[ClassPrompt], x) -> int:
    emb = image_encode(enc, x)
    if np.linalg.norm(emb) == 0.0:
        raise DomainError("zero-norm image embedding")
    return int(predict_with_embeddings(emb, _prompt_matrix(prompts))[0])


def zero_shot_predict_batch(enc: FrozenEncoders, prompts: Sequence[ClassPrompt], xs) -> np.ndarray:
    return predict_with_embeddings(image_encode(enc, xs), _prompt_matrix(prompts))


def zero_shot_accuracy(enc: FrozenEncoders, world: WorldSpec, domains: Sequence[int], n: int = 500,
                       seed: int = 0, template: bool = True) -> float:
    """Mean per-domain zero-shot accuracy on fresh validation samples."""
    prompts = make_class_prompts(enc, world.vocab, template)
    accs = []
    for d in domains:
        data = sample_domain_dataset(world, d, n, seed * 1000 + d, "validation")
        accs.append(np.mean(zero_shot_predict_batch(enc, prompts, data.x) == data.y))
    return float(np.mean(accs))


# --------------------------------------------------------------------------
# embedding cache
# --------------------------------------------------------------------------

CACHE_MAGIC = b"DPLC"
CACHE_VERSION = 1


@dataclass
class EmbeddingTable:
    emb: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def indices(self) -> np.ndarray:
        return np.arange(len(self))

    def subset(self, idx) -> "EmbeddingTable":
        return EmbeddingTable(self.emb[idx], self.labels[idx], self.domain_ids[idx])

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EmbeddingTable)
            and self.emb.shape == other.emb.shape
            and self.emb.tobytes() == other.emb.tobytes()
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.domain_ids, other.domain_ids)
        )


def embed_dataset(enc: FrozenEncoders, dataset: DomainDataset) -> EmbeddingTable:
    if not enc.frozen:
        raise ValueError("embedding requires frozen encoders")
    emb = image_encode(enc, dataset.x)
    nk.check_finite("embeddings", emb)
    return EmbeddingTable(
        emb, dataset.y.copy(), np.full(len(dataset), dataset.domain_id, dtype=np.int64)
    )


def write_cache(table: EmbeddingTable, path) -> None:
    """Layout: b"DPLC", u16 version, u64 rows, u64 dim, f64 rows (LE), then
    per-row (u32 label, u32 domain_id)."""
    rows, dim = table.emb.shape
    meta = np.empty((rows, 2), dtype="<u4")
    meta[:, 0] = table.labels
    meta[:, 1] = table.domain_ids
    payload = (
        CACHE_MAGIC
        + struct.pack("<HQQ", CACHE_VERSION, rows, dim)
        + np.ascontiguousarray(table.emb, dtype="<f8").tobytes()
        + meta.tobytes()
    )
    _atomic_write(Path(path), payload)


def read_cache(path) -> EmbeddingTable:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise FormatError("not an embedding cache file")
    version, rows, dim = struct.unpack_from("<HQQ", data, 4)
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported cache version {version}")
    off = 4 + struct.calcsize("<HQQ")
    n_emb = rows * dim * 8
    if len(data) != off + n_emb + rows * 8:
        raise FormatError("embedding cache has the wrong length")
    emb = np.frombuffer(data, dtype="<f8", count=rows * dim, offset=off).reshape(rows, dim).astype(np.float64)
    meta = np.frombuffer(data, dtype="<u4", count=rows * 2, offset=off + n_emb).reshape(rows, 2)
    return EmbeddingTable(emb, meta[:, 0].astype(np.int64), meta[:, 1].astype(np.int64))


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
