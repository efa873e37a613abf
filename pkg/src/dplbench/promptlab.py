"""Learned prompts on top of frozen encoders.

Two flavours share the same prompt layout ``[ctx_1 .. ctx_M, class token]``:

* a static context optimised directly on labelled source data (CoOp style);
* a domain prompt produced by a three-layer MLP from a batch of unlabeled
  image features, averaged over the batch (DPL).

Training losses use cosine similarities multiplied by the encoders'
``logit_scale`` (the inverse pretraining temperature); predictions are the
plain cosine argmax, which the scale does not affect.

Training routines take ``hp``, any object exposing ``steps``, ``batch_size``,
``lr``, ``momentum``, ``n_ctx``, ``hidden_width`` and ``seed``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .clipcore import EmbeddingTable, FrozenEncoders, content_fingerprint, embed_dataset, image_encode
from .errors import ContractError, ShapeError, TrialFailure
from .worldgen import Vocab


OUT_SCALE = 0.1


@dataclass
class PromptContext:
    tokens: np.ndarray  # (M, tok_dim)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError("context must be an (M >= 1, tok_dim) matrix")
        nk.check_finite("prompt context", self.tokens)

    @property
    def n_ctx(self) -> int:
        return self.tokens.shape[0]

    def flat(self) -> np.ndarray:
        return self.tokens.reshape(-1)

    @classmethod
    def from_flat(cls, v: np.ndarray, n_ctx: int) -> "PromptContext":
        return cls(np.asarray(v).reshape(n_ctx, -1))


@dataclass(frozen=True)
class GeneratorParams:
    mlp: nk.MlpParams
    n_ctx: int
    tok_dim: int

    def __post_init__(self):
        if self.mlp.n_layers != 3:
            raise ShapeError("the prompt generator is a three-layer MLP")
        if self.mlp.out_dim != self.n_ctx * self.tok_dim:
            raise ShapeError("generator output must reshape to (n_ctx, tok_dim)")

    def arrays(self):
        return self.mlp.arrays()

    def array_names(self):
        return self.mlp.array_names()

    def with_arrays(self, arrays) -> "GeneratorParams":
        return GeneratorParams(self.mlp.with_arrays(arrays), self.n_ctx, self.tok_dim)

    def n_params(self) -> int:
        return self.mlp.n_params()

    @property
    def fingerprint(self) -> str:
        return content_fingerprint(
            self.array_names(), self.arrays(), self.mlp.activations + (self.n_ctx, self.tok_dim)
        )


@dataclass
class DomainPrompt:
    domain: object  # source index or "target"
    context: PromptContext
    batch_size_used: int


def template_context(enc: FrozenEncoders, vocab: Vocab, n_ctx: int) -> np.ndarray:
    """Every context slot set to the mean template token embedding."""
    mean_tok = enc.token_table[list(vocab.template)].mean(axis=0)
    return np.tile(mean_tok, (n_ctx, 1))


def init_generator(
    rng: nk.Rng, emb_dim: int, hidden: int, n_ctx: int, tok_dim: int,
    start: np.ndarray | None = None, out_scale: float = OUT_SCALE,
) -> GeneratorParams:
    """He init; the output layer is shrunk and biased towards ``start`` so the
    untrained generator emits (nearly) the handcrafted template context."""
    mlp = nk.init_mlp(rng, [emb_dim, hidden, hidden, n_ctx * tok_dim])
    weights = list(mlp.weights)
    biases = list(mlp.biases)
    weights[-1] = weights[-1] * out_scale
    if start is not None:
        biases[-1] = np.asarray(start, dtype=np.float64).reshape(-1).copy()
    return GeneratorParams(nk.MlpParams(weights, biases, mlp.activations), n_ctx, tok_dim)


# --------------------------------------------------------------------------
# prompt assembly and encoding
# --------------------------------------------------------------------------


def build_class_prompt(enc: FrozenEncoders, vocab: Vocab, class_id: int, context: PromptContext) -> np.ndarray:
    """Context tokens followed by the class token embedding."""
    if not 0 <= class_id < len(vocab.classes):
        raise IndexError(f"invalid class id {class_id}")
    cls = enc.token_table[vocab.classes[class_id]]
    return np.vstack([context.tokens, cls[None, :]])


def class_embeddings(enc: FrozenEncoders, vocab: Vocab, ctx: np.ndarray):
    """Text embeddings of all K prompts for each context in ``ctx``.

    ``ctx`` is (..., M, tok_dim); the result is (..., K, emb_dim). The pooled
    input of class k is ``(sum_j [ctx_j*(1+pos_j) + pos_j] + cls_k*(1+pos_M) + pos_M) / (M + 1)``,
    so the context part is computed once and shared by all K sequences.
    """
    m = ctx.shape[-2]
    if m + 1 > enc.max_len:
        raise ShapeError(f"{m} context tokens do not fit max_len {enc.max_len}")
    pos = enc.positional[: m + 1]
    cls = enc.token_table[list(vocab.classes)]  # (K, dt)
    fixed = cls * (1.0 + pos[m]) + pos.sum(axis=0)
    shared = (ctx * (1.0 + pos[:m])).sum(axis=-2)  # (..., dt)
    pooled = (shared[..., None, :] + fixed) / (m + 1)  # (..., K, dt)
    flat = pooled.reshape(-1, enc.tok_dim)
    out, tape = nk.mlp_forward(enc.text_mlp, flat)
    return out.reshape(pooled.shape[:-1] + (enc.emb_dim,)), (tape, pooled.shape, pos[:m])


def class_embeddings_backward(enc: FrozenEncoders, cache, d_emb: np.ndarray) -> np.ndarray:
    """Gradient wrt the context tokens; encoder gradients are discarded."""
    tape, pooled_shape, pos = cache
    m = pos.shape[0]
    _, d_pooled = nk.mlp_backward(enc.text_mlp, tape, d_emb.reshape(-1, enc.emb_dim))
    d_shared = d_pooled.reshape(pooled_shape).sum(axis=-2) / (m + 1)  # (..., dt)
    return d_shared[..., None, :] * (1.0 + pos)


def _ce_on_cosine(feats: np.ndarray, class_embs: np.ndarray, labels: np.ndarray, scale: float):
    """Mean-over-groups of mean-over-samples CE on scaled cosine logits.

    feats (G, N, D), class_embs (G, K, D), labels (G, N).
    """
    logits, cache = nk.cosine_matrix(feats, class_embs)
    losses, dlogits = nk.softmax_cross_entropy_batch(scale * logits, labels)
    g, n = labels.shape
    loss = float(losses.mean())
    _, d_class = nk.cosine_matrix_backward(cache, scale * dlogits / (g * n), need_a=False)
    return loss, d_class


def _stack(batches):
    feats = [np.asarray(f, dtype=np.float64) for f, _ in batches]
    labels = [np.asarray(y, dtype=np.int64) for _, y in batches]
    if not feats:
        raise ContractError("need at least one source batch")
    if any(len(f) == 0 for f in feats):
        raise ContractError("every source batch needs at least one sample")
    return feats, labels


# --------------------------------------------------------------------------
# static context (CoOp-style baseline)
# --------------------------------------------------------------------------


def coop_loss_and_grad(enc: FrozenEncoders, context: PromptContext, batches, vocab: Vocab):
    """Loss averaged per domain then across domains; gradient wrt the context."""
    feats, labels = _stack(batches)
    embs, cache = class_embeddings(enc, vocab, context.tokens)
    if len({len(f) for f in feats}) == 1:
        total, d_class = _ce_on_cosine(np.stack(feats), embs[None], np.stack(labels), enc.logit_scale)
        d_emb = d_class.sum(axis=0)
    else:
        total, d_emb = 0.0, np.zeros_like(embs)
        for f, y in zip(feats, labels):
            loss, d_class = _ce_on_cosine(f[None], embs[None], y[None], enc.logit_scale)
            total += loss / len(feats)
            d_emb += d_class[0] / len(feats)
    return total, PromptContext(class_embeddings_backward(enc, cache, d_emb))


def _source_tables(enc, sources) -> list[EmbeddingTable]:
    tables = [s if isinstance(s, EmbeddingTable) else embed_dataset(enc, s) for s in sources]
    if any(len(t) == 0 for t in tables):
        raise ContractError("empty source domain")
    return tables


def _sample_batches(rng: nk.Rng, tables, n):
    """n indices per table, uniformly with replacement, from one draw."""
    sizes = np.array([len(t) for t in tables])
    idx = (rng.random((len(tables), n)) * sizes[:, None]).astype(np.int64)
    return [(t.emb[i], t.labels[i]) for t, i in zip(tables, idx)]


def coop_optimize(enc: FrozenEncoders, sources, hp, vocab: Vocab, history: list | None = None) -> PromptContext:
    tables = _source_tables(enc, sources)
    rng = nk.Rng(hp.seed, ("coop",))
    noise = rng.spawn("init").normal(hp.n_ctx * enc.tok_dim, 0.02).reshape(hp.n_ctx, -1)
    ctx = PromptContext(template_context(enc, vocab, hp.n_ctx) + noise)
    state = nk.init_optimizer(ctx.tokens, hp.lr, hp.momentum)
    brng = rng.spawn("batches")
    tokens = ctx.tokens
    for step in range(hp.steps):
        batches = _sample_batches(brng, tables, hp.batch_size)
        loss, grad = coop_loss_and_grad(enc, PromptContext(tokens), batches, vocab)
        if history is not None:
            history.append(loss)
        try:
            tokens, state = nk.sgd_momentum_step(tokens, grad.tokens, state)
            nk.check_finite("context", tokens)
        except ArithmeticError as exc:
            raise TrialFailure(f"coop diverged: {exc}", step) from exc
    return PromptContext(tokens)


def predict_with_context(enc: FrozenEncoders, context: PromptContext, feats: np.ndarray, vocab: Vocab) -> np.ndarray:
    embs, _ = class_embeddings(enc, vocab, context.tokens)
    s, _ = nk.cosine_matrix(np.atleast_2d(feats), embs)
    return np.argmax(s, axis=-1)


# --------------------------------------------------------------------------
# domain prompt generator
# --------------------------------------------------------------------------


def dpl_generate(gen: GeneratorParams, features, domain="target") -> DomainPrompt:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if len(features) == 0:
        raise ContractError("cannot generate a domain prompt from an empty batch")
    out, _ = nk.mlp_forward(gen.mlp, features)
    ctx = out.mean(axis=0).reshape(gen.n_ctx, gen.tok_dim)
    return DomainPrompt(domain, PromptContext(ctx), len(features))


def dpl_loss_and_grad(gen: GeneratorParams, enc: FrozenEncoders, batches, vocab: Vocab):
    """Loss over per-domain batches and its gradient wrt the generator only.

    Each domain's prompt is generated from that domain's own batch; the loss
    is the mean over domains of the mean CE over the domain's samples.
    """
    feats, labels = _stack(batches)
    if len({len(f) for f in feats}) == 1:
        return _dpl_stacked(gen, enc, np.stack(feats), np.stack(labels), vocab)
    total, grads = 0.0, None
    for f, y in zip(feats, labels):
        loss, g = _dpl_stacked(gen, enc, f[None], y[None], vocab)
        total += loss / len(feats)
        arrs = [a / len(feats) for a in g.arrays()]
        grads = arrs if grads is None else [a + b for a, b in zip(grads, arrs)]
    return total, gen.with_arrays(grads)


def _dpl_stacked(gen, enc, feats, labels, vocab):
    g, n, d = feats.shape
    out, tape = nk.mlp_forward(gen.mlp, feats.reshape(g * n, d))
    ctx = out.reshape(g, n, gen.n_ctx, gen.tok_dim).mean(axis=1)  # (G, M, dt)
    embs, cache = class_embeddings(enc, vocab, ctx)
    loss, d_class = _ce_on_cosine(feats, embs, labels, enc.logit_scale)
    d_ctx = class_embeddings_backward(enc, cache, d_class)  # (G, M, dt)
    d_out = np.repeat(d_ctx.reshape(g, 1, -1) / n, n, axis=1).reshape(g * n, -1)
    grads, _ = nk.mlp_backward(gen.mlp, tape, d_out)
    return loss, GeneratorParams(grads, gen.n_ctx, gen.tok_dim)


def dpl_train(enc: FrozenEncoders, sources, hp, vocab: Vocab, history: list | None = None) -> GeneratorParams:
    """One size-N batch per source domain per step, SGD with momentum."""
    if len(sources) < 2:
        raise ContractError("domain generalisation needs at least 2 source domains")
    tables = _source_tables(enc, sources)
    rng = nk.Rng(hp.seed, ("dpl",))
    gen = init_generator(
        rng.spawn("init"), enc.emb_dim, hp.hidden_width, hp.n_ctx, enc.tok_dim,
        start=template_context(enc, vocab, hp.n_ctx),
    )
    state = nk.init_optimizer(gen, hp.lr, hp.momentum)
    brng = rng.spawn("batches")
    for step in range(hp.steps):
        batches = _sample_batches(brng, tables, hp.batch_size)
        loss, grads = dpl_loss_and_grad(gen, enc, batches, vocab)
        if history is not None:
            history.append(loss)
        try:
            gen, state = nk.sgd_momentum_step(gen, grads, state)
        except ArithmeticError as exc:
            raise TrialFailure(f"dpl diverged: {exc}", step) from exc
    return gen


def dpl_predict_features(gen: GeneratorParams, enc: FrozenEncoders, feats: np.ndarray, vocab: Vocab) -> np.ndarray:
    """Classify a batch of image features with a prompt generated from that same batch."""
    prompt = dpl_generate(gen, feats)
    return predict_with_context(enc, prompt.context, feats, vocab)


def dpl_predict_batch(enc: FrozenEncoders, gen: GeneratorParams, batch_x, vocab: Vocab) -> np.ndarray:
    batch_x = np.asarray(batch_x, dtype=np.float64)
    if batch_x.ndim != 2 or len(batch_x) == 0:
        raise ContractError("need a non-empty batch of inputs")
    return dpl_predict_features(gen, enc, image_encode(enc, batch_x), vocab)
