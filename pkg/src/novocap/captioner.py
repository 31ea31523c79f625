"""Minimal recurrent caption generator with hand-derived gradients.

A single gated recurrent cell (update/reset gates, tanh candidate) consumes
the previous word's input embedding concatenated with the image feature at
every step; the image feature also seeds the initial hidden state. Logits are
``M h_t + b_out`` with no extra projection, so the hidden size equals the
output-embedding width. Teacher-forced negative log-likelihood is the
training objective, and gradients flow through the category embedding rows
into the converter maps, which is how the converter learns at all.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, NumericError
from .numerics import SeededRng
from .vocab import tokenize

logger = logging.getLogger(__name__)


@dataclass
class CaptionerParams:
    """Trainable parameters of the cell, initial-state map, and text blocks."""

    Wz: np.ndarray  # (h, D+h), D = d1 + d_v
    bz: np.ndarray
    Wr: np.ndarray
    br: np.ndarray
    Wc: np.ndarray
    bc: np.ndarray
    W_init: np.ndarray  # (h, d_v)
    b_init: np.ndarray
    U_text: np.ndarray  # (text_end, d1)
    M_text: np.ndarray  # (text_end, d2)
    b_text: np.ndarray  # (text_end,)
    b_cat_s: np.ndarray  # one bias per base category, singular tokens
    b_cat_p: np.ndarray


def init_captioner_params(
    text_end: int,
    n_base_categories: int,
    d_v: int,
    d1: int,
    hidden: int,
    rng: SeededRng,
    log_priors: Optional[np.ndarray] = None,
) -> CaptionerParams:
    """Uniform +-1/sqrt(fan_in) weights, zero biases.

    When ``log_priors`` (length text_end + 2*n_base_categories) is given, the
    output biases start at the corpus log-unigram priors instead of zero. The
    bias row then genuinely ranks words by ease of occurrence, which is what
    anchors the novel-word suppression offset; trained-from-zero biases end
    up nearly flat because the output embeddings absorb the frequency signal.
    """
    D = d1 + d_v

    def uni(rows: int, cols: int) -> np.ndarray:
        bound = 1.0 / math.sqrt(cols)
        return rng.uniform(-bound, bound, (rows, cols))

    if log_priors is None:
        b_text = np.zeros(text_end)
        b_cat_s = np.zeros(n_base_categories)
        b_cat_p = np.zeros(n_base_categories)
    else:
        log_priors = np.asarray(log_priors, dtype=np.float64)
        b_text = log_priors[:text_end].copy()
        b_cat_s = log_priors[text_end : text_end + n_base_categories].copy()
        b_cat_p = log_priors[text_end + n_base_categories :].copy()
    return CaptionerParams(
        Wz=uni(hidden, D + hidden),
        bz=np.zeros(hidden),
        Wr=uni(hidden, D + hidden),
        br=np.zeros(hidden),
        Wc=uni(hidden, D + hidden),
        bc=np.zeros(hidden),
        W_init=uni(hidden, d_v),
        b_init=np.zeros(hidden),
        U_text=uni(text_end, d1),
        M_text=uni(text_end, hidden),
        b_text=b_text,
        b_cat_s=b_cat_s,
        b_cat_p=b_cat_p,
    )


def corpus_log_priors(vocab, captions) -> np.ndarray:
    """Log unigram probabilities of every predictable token in a corpus.

    Counts each tokenized caption's body and eos (bos is never predicted);
    unseen tokens get a half-count floor so every prior stays finite.
    """
    counts = np.full(len(vocab), 0.5)
    for caption in captions:
        for tok in tokenize(caption, vocab)[1:]:
            counts[tok] += 1.0
    return np.log(counts / counts.sum())


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def initial_state(params: CaptionerParams, v_img: np.ndarray) -> np.ndarray:
    return np.tanh(v_img @ params.W_init.T + params.b_init)


def _cell_step(
    params: CaptionerParams,
    H_prev: np.ndarray,   # (B, h)
    E: np.ndarray,        # (B, d1) input embeddings
    Vimg: np.ndarray,     # (B, d_v)
):
    """One batched cell step; returns (H_new, cache for backward)."""
    G = np.concatenate([E, Vimg], axis=1)
    concat = np.concatenate([G, H_prev], axis=1)
    z = _sigmoid(concat @ params.Wz.T + params.bz)
    r = _sigmoid(concat @ params.Wr.T + params.br)
    concat_c = np.concatenate([G, r * H_prev], axis=1)
    c = np.tanh(concat_c @ params.Wc.T + params.bc)
    H = (1.0 - z) * H_prev + z * c
    return H, (H_prev, concat, concat_c, z, r, c)


def _cell_backward(params: CaptionerParams, dH: np.ndarray, cache, grads: Dict[str, np.ndarray], d1: int):
    """Backprop one cell step; returns (dE, dH_prev)."""
    H_prev, concat, concat_c, z, r, c = cache
    D = concat.shape[1] - H_prev.shape[1]
    dz = dH * (c - H_prev)
    dc = dH * z
    dH_prev = dH * (1.0 - z)

    dac = dc * (1.0 - c * c)
    grads["cell.Wc"] += dac.T @ concat_c
    grads["cell.bc"] += dac.sum(axis=0)
    dconcat_c = dac @ params.Wc
    dG = dconcat_c[:, :D].copy()
    d_rH = dconcat_c[:, D:]
    dr = d_rH * H_prev
    dH_prev += d_rH * r

    daz = dz * z * (1.0 - z)
    dar = dr * r * (1.0 - r)
    grads["cell.Wz"] += daz.T @ concat
    grads["cell.bz"] += daz.sum(axis=0)
    grads["cell.Wr"] += dar.T @ concat
    grads["cell.br"] += dar.sum(axis=0)
    dconcat = daz @ params.Wz + dar @ params.Wr
    dG += dconcat[:, :D]
    dH_prev += dconcat[:, D:]
    return dG[:, :d1], dH_prev


def _block_logits(tables, H: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Logits as (base block, appended block or None).

    Keeping the base block a standalone contiguous computation means its
    values are bit-identical before and after vocabulary expansion.
    """
    be = tables.base_end
    base = H @ tables.M[:be].T + tables.b[:be]
    if be == tables.M.shape[0]:
        return base, None
    return base, H @ tables.M[be:].T + tables.b[be:]


def step_logprobs(params: CaptionerParams, tables, H_prev, tokens, Vimg):
    """Batched decode step: next-word log-probabilities and new states.

    The softmax max and normalizer are accumulated per block and combined,
    so appended novel rows never perturb the base rows' values. Exactly-masked
    rows (bias -inf) contribute zero mass and stay -inf in the output.
    """
    H, _ = _cell_step(params, H_prev, tables.U[tokens], Vimg)
    base, extra = _block_logits(tables, H)
    if np.isnan(base).any() or (base == np.inf).any():
        raise NumericError("non-finite base logits in decode step")
    m = base.max(axis=1, keepdims=True)
    if extra is not None:
        if np.isnan(extra).any() or (extra == np.inf).any():
            raise NumericError("non-finite logits in appended rows")
        m = np.maximum(m, extra.max(axis=1, keepdims=True))
    shifted_base = base - m
    z = np.exp(shifted_base).sum(axis=1, keepdims=True)
    if extra is None:
        logz = np.log(z)
        return shifted_base - logz, H
    shifted_extra = extra - m
    z = z + np.exp(shifted_extra).sum(axis=1, keepdims=True)
    logz = np.log(z)
    return np.concatenate([shifted_base - logz, shifted_extra - logz], axis=1), H


def forward_step(
    params: CaptionerParams,
    tables,
    state: np.ndarray,
    w_prev: int,
    v_img: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """One decode step: x = U[w_prev]; new state; logits = M h + b_out.

    Softmax is left to the caller.
    """
    V = tables.U.shape[0]
    if not (0 <= int(w_prev) < V):
        raise NumericError(f"token id {w_prev} out of range for vocabulary of {V}")
    H, _ = _cell_step(
        params,
        state.reshape(1, -1),
        tables.U[int(w_prev)].reshape(1, -1),
        np.asarray(v_img, dtype=np.float64).reshape(1, -1),
    )
    base, extra = _block_logits(tables, H)
    logits = base if extra is None else np.concatenate([base, extra], axis=1)
    return logits[0], H[0]


def _log_softmax_batch(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    from .numerics import log_softmax_rows

    logp = log_softmax_rows(logits)
    return logp, np.exp(logp)


def _pad_batch(token_seqs: Sequence[Sequence[int]], pad: int):
    B = len(token_seqs)
    lengths = np.array([len(t) for t in token_seqs], dtype=np.int64)
    T = int(lengths.max())
    tokens = np.full((B, T), pad, dtype=np.int64)
    for i, seq in enumerate(token_seqs):
        tokens[i, : len(seq)] = seq
    return tokens, lengths


def _batch_nll(params: CaptionerParams, tables, token_seqs, Vimg, want_grads: bool):
    """Teacher-forced NLL over a batch; optionally with full gradients.

    Returns (loss_sum, n_predicted_tokens, grads or None, dU_full/dM_full/db_full
    row gradients for the caller to route into text/converter blocks).
    """
    tokens, lengths = _pad_batch(token_seqs, pad=0)
    B, L = tokens.shape
    T = L - 1
    mask = np.arange(1, L)[None, :] < lengths[:, None]  # (B, T): predict positions 1..L-1

    H = np.tanh(Vimg @ params.W_init.T + params.b_init)
    H0 = H
    caches = []
    steps = []
    loss_sum = 0.0
    for t in range(T):
        E = tables.U[tokens[:, t]]
        H, cache = _cell_step(params, H, E, Vimg)
        logits = H @ tables.M.T + tables.b
        logp, probs = _log_softmax_batch(logits)
        target = tokens[:, t + 1]
        tgt_logp = logp[np.arange(B), target]
        if np.any(mask[:, t] & ~np.isfinite(tgt_logp)):
            raise NumericError("target token has probability exactly 0")
        loss_sum += float(-(tgt_logp * mask[:, t]).sum())
        caches.append(cache)
        steps.append((H, probs, target))

    n_tokens = int(mask.sum())
    if not want_grads:
        return loss_sum, n_tokens, None, None

    d1 = params.U_text.shape[1]
    V = tables.U.shape[0]
    grads = {
        "cell.Wz": np.zeros_like(params.Wz),
        "cell.bz": np.zeros_like(params.bz),
        "cell.Wr": np.zeros_like(params.Wr),
        "cell.br": np.zeros_like(params.br),
        "cell.Wc": np.zeros_like(params.Wc),
        "cell.bc": np.zeros_like(params.bc),
        "init.W": np.zeros_like(params.W_init),
        "init.b": np.zeros_like(params.b_init),
    }
    dU_full = np.zeros((V, d1))
    dM_full = np.zeros_like(tables.M)
    db_full = np.zeros(V)

    dH_next = np.zeros_like(H0)
    for t in range(T - 1, -1, -1):
        H_t, probs, target = steps[t]
        dlogits = probs.copy()
        dlogits[np.arange(B), target] -= 1.0
        dlogits *= mask[:, t][:, None]
        dM_full += dlogits.T @ H_t
        db_full += dlogits.sum(axis=0)
        dH = dH_next + dlogits @ tables.M
        dE, dH_next = _cell_backward(params, dH, caches[t], grads, d1)
        np.add.at(dU_full, tokens[:, t], dE)

    da0 = dH_next * (1.0 - H0 * H0)
    grads["init.W"] += da0.T @ Vimg
    grads["init.b"] += da0.sum(axis=0)
    return loss_sum, n_tokens, grads, (dU_full, dM_full, db_full)


def _route_row_grads(model, grads: Dict[str, np.ndarray], row_grads) -> None:
    """Split full-table row gradients into text blocks and converter maps."""
    dU_full, dM_full, db_full = row_grads
    vocab = model.vocab
    te = vocab.text_end
    grads["U_text"] = dU_full[:te]
    grads["M_text"] = dM_full[:te]
    grads["b_text"] = db_full[:te]

    by_name = {c.name: c for c in model.categories}
    known = [c for c in model.categories if c.status == "known"]
    known_index = {c.name: i for i, c in enumerate(known)}
    rows_s, rows_p, protos = [], [], []
    bias_s = np.zeros(len(known))
    bias_p = np.zeros(len(known))
    for row, name, number in vocab.category_rows():
        cat = by_name[name]
        if number == "s":
            rows_s.append(row)
            protos.append(cat.prototype)
        else:
            rows_p.append(row)
        if cat.status == "known":
            if number == "s":
                bias_s[known_index[name]] = db_full[row]
            else:
                bias_p[known_index[name]] = db_full[row]
    grads["b_cat_s"] = bias_s
    grads["b_cat_p"] = bias_p

    P = np.array(protos) if protos else np.zeros((0, model.config.d_v))
    rows_s = np.array(rows_s, dtype=np.int64)
    rows_p = np.array(rows_p, dtype=np.int64)
    for key, rows, table in (
        ("conv.f_u_s", rows_s, dU_full),
        ("conv.f_u_p", rows_p, dU_full),
        ("conv.f_m_s", rows_s, dM_full),
        ("conv.f_m_p", rows_p, dM_full),
    ):
        amap = dict(model.converter.maps())[key.split(".")[1]]
        if rows.size:
            grads[key + ".W"] = table[rows].T @ P
            grads[key + ".b"] = table[rows].sum(axis=0)
        else:
            grads[key + ".W"] = np.zeros_like(amap.W)
            grads[key + ".b"] = np.zeros_like(amap.b)


def nll_loss(model, tokens: Sequence[int], v_img: np.ndarray, tables=None) -> float:
    """Teacher-forced negative log-likelihood of one bos...eos sequence."""
    from .model import assembled_tables

    if tables is None:
        tables = assembled_tables(model)
    loss, _, _, _ = _batch_nll(
        model.params, tables, [list(tokens)], np.asarray(v_img).reshape(1, -1), False
    )
    return loss


def backward(model, tokens: Sequence[int], v_img: np.ndarray, tables=None):
    """Loss and exact reverse-mode gradients for every trainable block."""
    from .model import assembled_tables

    if tables is None:
        tables = assembled_tables(model)
    loss, _, grads, row_grads = _batch_nll(
        model.params, tables, [list(tokens)], np.asarray(v_img).reshape(1, -1), True
    )
    _route_row_grads(model, grads, row_grads)
    return loss, grads


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    clip_norm: float = 5.0
    train_blocks: Optional[Sequence[str]] = None  # None trains everything

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise DataError("TrainConfig.learning_rate must be >= 0")
        for name in ("beta1", "beta2", "adam_eps", "epochs", "batch_size", "clip_norm"):
            if getattr(self, name) <= 0:
                raise DataError(f"TrainConfig.{name} must be positive")


class AdamState:
    def __init__(self, blocks: Dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in blocks.items()}
        self.v = {k: np.zeros_like(v) for k, v in blocks.items()}
        self.t = 0

    def update(self, blocks: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], cfg: TrainConfig):
        self.t += 1
        lr_t = cfg.learning_rate * math.sqrt(1.0 - cfg.beta2 ** self.t) / (1.0 - cfg.beta1 ** self.t)
        for name, arr in blocks.items():
            g = grads[name]
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * (g * g)
            arr -= lr_t * self.m[name] / (np.sqrt(self.v[name]) + cfg.adam_eps)


def _clip_gradients(grads: Dict[str, np.ndarray], names, max_norm: float) -> None:
    total = math.sqrt(sum(float((grads[n] ** 2).sum()) for n in names))
    if total > max_norm:
        scale = max_norm / total
        for n in names:
            grads[n] *= scale


def prepare_examples(model, dataset, max_caption_len: Optional[int] = None):
    """Tokenized (tokens, feature) training pairs, one per reference caption.

    Refuses captions that tokenize to novel-category tokens: training data
    must be pure of held-out categories.
    """
    if max_caption_len is None:
        max_caption_len = model.config.max_caption_len
    novel_names = {c.name for c in model.categories if c.status == "novel"}
    novel_rows = {
        row for row, name, _ in model.vocab.category_rows() if name in novel_names
    }
    examples = []
    for rec in dataset:
        for caption in rec.captions:
            tokens = tokenize(caption, model.vocab)
            if any(t in novel_rows for t in tokens):
                raise DataError(
                    f"image {rec.image_id}: caption mentions a novel category: {caption!r}"
                )
            if len(tokens) > max_caption_len + 2:
                logger.warning(
                    "image %s: caption truncated to %d tokens", rec.image_id, max_caption_len
                )
                tokens = tokens[: max_caption_len + 1] + [model.vocab.eos_id]
            examples.append((tokens, rec.feature))
    if not examples:
        raise DataError("no training captions in dataset")
    return examples


def mean_dataset_loss(model, dataset, batch_size: int = 64) -> float:
    """Mean NLL in nats per predicted token over a dataset (no gradients)."""
    from .model import assembled_tables

    tables = assembled_tables(model)
    examples = prepare_examples(model, dataset)
    total, count = 0.0, 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        seqs = [e[0] for e in chunk]
        feats = np.stack([e[1] for e in chunk])
        loss, n, _, _ = _batch_nll(model.params, tables, seqs, feats, False)
        total += loss
        count += n
    return total / count


def train(model, dataset, cfg: TrainConfig, val=None):
    """Mini-batch Adam training of captioner and converter jointly.

    Deterministic for a given (dataset, cfg, seed): fixed shuffle schedule,
    fixed accumulation and update order. Category embedding rows are
    recomputed from the converter every batch so the converter sees fresh
    gradients. Returns (model, loss_curve) where the curve rows are
    (epoch, mean train nats/token, mean val nats/token or None).
    """
    from .model import assembled_tables, trainable_blocks

    cfg.validate()
    examples = prepare_examples(model, dataset)
    blocks = trainable_blocks(model)
    if cfg.train_blocks is not None:
        missing = set(cfg.train_blocks) - set(blocks)
        if missing:
            raise DataError(f"unknown train blocks: {sorted(missing)}")
        blocks = {k: v for k, v in blocks.items() if k in cfg.train_blocks}
    block_names = list(blocks)
    adam = AdamState(blocks)
    rng = SeededRng(cfg.seed)

    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        total, count = 0.0, 0
        for start in range(0, len(examples), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            seqs = [examples[i][0] for i in idx]
            feats = np.stack([examples[i][1] for i in idx])
            tables = assembled_tables(model)
            try:
                loss, n, grads, row_grads = _batch_nll(model.params, tables, seqs, feats, True)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch at example {start}: {exc}")
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite loss in epoch {epoch}, batch at example {start}"
                )
            _route_row_grads(model, grads, row_grads)
            _clip_gradients(grads, block_names, cfg.clip_norm)
            adam.update(blocks, grads, cfg)
            total += loss
            count += n
        train_loss = total / count
        val_loss = mean_dataset_loss(model, val) if val is not None else None
        curve.append((epoch, train_loss, val_loss))
        logger.info(
            "epoch %d: train %.4f%s",
            epoch,
            train_loss,
            "" if val_loss is None else f" val {val_loss:.4f}",
        )
    return model, curve


def gradient_audit(
    seeds: int = 20,
    d_v: int = 4,
    d1: int = 5,
    hidden: int = 6,
    caption_len: int = 3,
    fd_step: float = 1e-5,
    tamper_block: Optional[str] = None,
) -> Dict[str, float]:
    """Analytic vs central-finite-difference gradients on a tiny model.

    The model has V=9 (3 specials, 2 words, 2 categories with singular and
    plural tokens). Returns the max relative error per parameter block over
    all seeds. ``tamper_block`` perturbs one analytic gradient block and is a
    negative control for the audit itself.
    """
    from .model import ModelConfig, assembled_tables, init_model, trainable_blocks
    from .numerics import finite_difference_gradient, max_relative_error
    from .vocab import build_vocabulary
    from .features import CategoryRecord

    worst: Dict[str, float] = {}
    for seed in range(seeds):
        rng = SeededRng(1000 + seed)
        cats = [
            CategoryRecord("alpha", "alpha", "alphas", rng.normal(d_v), 1, "known"),
            CategoryRecord("beta", "beta", "betas", rng.normal(d_v), 1, "known"),
        ]
        vocab = build_vocabulary(["red box", "red box red"], cats, min_count=1)
        config = ModelConfig(d_v=d_v, d1=d1, d2=hidden)
        model = init_model(vocab, cats, config, seed=seed)
        body_ids = [i for i in range(len(vocab)) if i not in (vocab.bos_id, vocab.eos_id)]
        # category tokens must occur as inputs or the f_u maps see no gradient
        body = [
            vocab.category_token_id(cats[int(rng.integers(0, 2))].name, "s"),
            vocab.category_token_id(cats[int(rng.integers(0, 2))].name, "p"),
        ]
        body += [body_ids[int(rng.integers(0, len(body_ids)))] for _ in range(max(caption_len - 2, 1))]
        tokens = [vocab.bos_id] + body + [vocab.eos_id]
        v_img = rng.normal(d_v)

        _, grads = backward(model, tokens, v_img)
        if tamper_block is not None and tamper_block in grads:
            grads[tamper_block] = grads[tamper_block] + 0.5

        for name, arr in trainable_blocks(model).items():
            shape = arr.shape

            def f(flat: np.ndarray) -> float:
                saved = arr.copy()
                arr[...] = flat.reshape(shape)
                try:
                    return nll_loss(model, tokens, v_img, tables=assembled_tables(model))
                finally:
                    arr[...] = saved

            fd = finite_difference_gradient(f, arr.ravel().copy(), h=fd_step)
            err = max_relative_error(grads[name].ravel(), fd)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
