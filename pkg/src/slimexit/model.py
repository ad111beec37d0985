"""Multi-exit transformer encoder on the autodiff engine.

Post-layer-norm residual wiring, per-head attention parameter storage (so
removing a head is an exact structural operation, not a masked one), linear
exit classifiers on the first-token hidden state, and exact parameter /
FLOP accounting for both uniform configs and width-pruned live models.

The forward can insert backward-only rescaling nodes so that one backward
pass delivers, at every layer, the arithmetic mean of the gradients of all
loss branches attached at or above that layer.  With a single final-exit
loss every scale factor is exactly 1.0 and the graph is bit-identical to
the unscaled one.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02
INIT_CLIP = 2.0


@dataclass
class ModelConfig:
    layers: int
    hidden: int
    num_heads: int
    head_size: int
    ffn: int
    vocab_size: int
    max_positions: int = 128
    num_type_ids: int = 2
    num_classes: int = 2
    embed_rank: Optional[int] = None
    seq_len: int = 32

    def __post_init__(self):
        sizes = [self.layers, self.hidden, self.num_heads, self.head_size,
                 self.ffn, self.vocab_size, self.max_positions,
                 self.num_type_ids, self.num_classes, self.seq_len]
        if any(int(s) != s or s < 1 for s in sizes):
            raise ValueError(f"all config sizes must be integers >= 1: {self}")
        if self.embed_rank is not None:
            if not 1 <= self.embed_rank <= min(self.vocab_size, self.hidden):
                raise ValueError(
                    f"embed_rank {self.embed_rank} outside [1, "
                    f"min(vocab={self.vocab_size}, hidden={self.hidden})]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown ModelConfig keys: {sorted(extra)}")
        return cls(**d)


class AttentionHead:
    """One head's projections: wq/wk/wv are (H, d) slices, wo is (d, H)."""

    def __init__(self, wq, bq, wk, bk, wv, bv, wo):
        self.wq, self.bq = wq, bq
        self.wk, self.bk = wk, bk
        self.wv, self.bv = wv, bv
        self.wo = wo

    def tensors(self):
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo]


class EncoderLayer:
    def __init__(self, heads, attn_out_bias, ln_attn_gain, ln_attn_bias,
                 ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b,
                 ln_ffn_gain, ln_ffn_bias):
        self.heads = list(heads)
        self.attn_out_bias = attn_out_bias
        self.ln_attn_gain, self.ln_attn_bias = ln_attn_gain, ln_attn_bias
        self.ffn_in_w, self.ffn_in_b = ffn_in_w, ffn_in_b
        self.ffn_out_w, self.ffn_out_b = ffn_out_w, ffn_out_b
        self.ln_ffn_gain, self.ln_ffn_bias = ln_ffn_gain, ln_ffn_bias

    @property
    def ffn_width(self):
        return self.ffn_in_w.shape[1]


class ExitHead:
    def __init__(self, w, b):
        self.w, self.b = w, b


class MultiExitModel:
    """Encoder with exit classifiers at the layers listed in `exits`.

    A single-exit teacher is the same class with only the final layer in
    `exits`.  Per-layer widths may differ from `config` after pruning; the
    config records the initial shape and the embedding/vocab geometry,
    which never change.
    """

    def __init__(self, config, head_size, embedding, layers, exits):
        self.config = config
        self.head_size = head_size
        (self.word, self.word_a, self.word_b, self.position,
         self.token_type, self.ln_emb_gain, self.ln_emb_bias) = embedding
        self.layers = list(layers)
        self.exits = dict(exits)

    @property
    def is_factorized(self):
        return self.word is None

    @property
    def num_layers(self):
        return len(self.layers)

    def layer_widths(self):
        return [(len(l.heads), l.ffn_width) for l in self.layers]

    def exit_layers(self):
        return sorted(self.exits)

    def named_parameters(self):
        out = []
        if self.is_factorized:
            out += [("embedding.word_a", self.word_a),
                    ("embedding.word_b", self.word_b)]
        else:
            out.append(("embedding.word", self.word))
        out += [("embedding.position", self.position),
                ("embedding.token_type", self.token_type),
                ("embedding.ln.gain", self.ln_emb_gain),
                ("embedding.ln.bias", self.ln_emb_bias)]
        for li, layer in enumerate(self.layers, start=1):
            for hi, head in enumerate(layer.heads):
                p = f"layer{li}.head{hi}"
                out += [(f"{p}.wq", head.wq), (f"{p}.bq", head.bq),
                        (f"{p}.wk", head.wk), (f"{p}.bk", head.bk),
                        (f"{p}.wv", head.wv), (f"{p}.bv", head.bv),
                        (f"{p}.wo", head.wo)]
            out += [(f"layer{li}.attn_out_bias", layer.attn_out_bias),
                    (f"layer{li}.ln_attn.gain", layer.ln_attn_gain),
                    (f"layer{li}.ln_attn.bias", layer.ln_attn_bias),
                    (f"layer{li}.ffn_in.w", layer.ffn_in_w),
                    (f"layer{li}.ffn_in.b", layer.ffn_in_b),
                    (f"layer{li}.ffn_out.w", layer.ffn_out_w),
                    (f"layer{li}.ffn_out.b", layer.ffn_out_b),
                    (f"layer{li}.ln_ffn.gain", layer.ln_ffn_gain),
                    (f"layer{li}.ln_ffn.bias", layer.ln_ffn_bias)]
        for li in sorted(self.exits):
            out += [(f"exit{li}.w", self.exits[li].w),
                    (f"exit{li}.b", self.exits[li].b)]
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def clone(self):
        """Deep value copy with fresh leaf tensors (no shared buffers)."""
        mapping = {id(t): Tensor(np.array(t.value, copy=True))
                   for _, t in self.named_parameters()}

        def c(t):
            return mapping[id(t)] if t is not None else None

        embedding = (c(self.word), c(self.word_a), c(self.word_b),
                     c(self.position), c(self.token_type),
                     c(self.ln_emb_gain), c(self.ln_emb_bias))
        layers = []
        for l in self.layers:
            heads = [AttentionHead(*[c(t) for t in h.tensors()])
                     for h in l.heads]
            layers.append(EncoderLayer(
                heads, c(l.attn_out_bias), c(l.ln_attn_gain), c(l.ln_attn_bias),
                c(l.ffn_in_w), c(l.ffn_in_b), c(l.ffn_out_w), c(l.ffn_out_b),
                c(l.ln_ffn_gain), c(l.ln_ffn_bias)))
        exits = {k: ExitHead(c(e.w), c(e.b)) for k, e in self.exits.items()}
        return MultiExitModel(self.config, self.head_size, embedding,
                              layers, exits)


def truncated_normal(rng, shape, std=INIT_STD):
    """Normal(0, std) with draws beyond 2 std resampled, not clipped."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > INIT_CLIP * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > INIT_CLIP * std
    return x


def init_model(config: ModelConfig, seed: int, exit_layers=None) -> MultiExitModel:
    """Fresh model; `exit_layers=None` puts an exit at every layer.

    A teacher is `exit_layers=(config.layers,)`.  Same seed and arguments
    give bit-identical weights.
    """
    rng = np.random.default_rng(seed)
    L, H = config.layers, config.hidden
    d = config.head_size
    if exit_layers is None:
        exit_layers = tuple(range(1, L + 1))
    exit_layers = tuple(sorted(set(int(k) for k in exit_layers)))
    if not exit_layers or exit_layers[0] < 1 or exit_layers[-1] > L:
        raise ValueError(f"exit layers {exit_layers} outside [1, {L}]")

    def w(*shape):
        return Tensor(truncated_normal(rng, shape))

    def zeros(*shape):
        return Tensor(np.zeros(shape))

    def ones(*shape):
        return Tensor(np.ones(shape))

    if config.embed_rank is None:
        word, word_a, word_b = w(config.vocab_size, H), None, None
    else:
        word = None
        word_a = w(config.vocab_size, config.embed_rank)
        word_b = w(config.embed_rank, H)
    embedding = (word, word_a, word_b, w(config.max_positions, H),
                 w(config.num_type_ids, H), ones(H), zeros(H))

    layers = []
    for _ in range(L):
        heads = [AttentionHead(w(H, d), zeros(d), w(H, d), zeros(d),
                               w(H, d), zeros(d), w(d, H))
                 for _ in range(config.num_heads)]
        layers.append(EncoderLayer(
            heads, zeros(H), ones(H), zeros(H),
            w(H, config.ffn), zeros(config.ffn),
            w(config.ffn, H), zeros(H),
            ones(H), zeros(H)))

    exits = {k: ExitHead(w(H, config.num_classes), zeros(config.num_classes))
             for k in exit_layers}
    return MultiExitModel(config, d, embedding, layers, exits)


@dataclass
class ForwardRecord:
    """Hidden states H_0..H_L plus logits for every exit layer.

    When `loss_depths` was requested, hiddens[k] for k in that set are the
    rescaled branch anchors; losses must attach to exactly those tensors
    for the per-depth gradient averaging to hold.
    """
    hiddens: list
    exit_logits: dict
    loss_depths: Optional[frozenset] = None


def _depth_scales(loss_depths, num_layers):
    # n_at[k] = number of active loss depths at or above k.  Branch factor
    # at an active depth k is 1/n_at[k]; the residual stream between h_k
    # and layer k+1 carries n_at[k+1]/n_at[k].
    active = sorted(loss_depths)
    if not active or active[0] < 0 or active[-1] > num_layers:
        raise ValueError(f"loss depths {active} outside [0, {num_layers}]")
    n_at = [sum(1 for d in active if d >= k) for k in range(num_layers + 2)]
    branch = {k: 1.0 / n_at[k] for k in active}
    stream = [n_at[k + 1] / n_at[k] if n_at[k] and n_at[k + 1] else 1.0
              for k in range(num_layers + 1)]
    return branch, stream


def _embed(model: MultiExitModel, ids, mask):
    cfg = model.config
    batch, seq = ids.shape
    if seq > cfg.max_positions:
        raise ad.ShapeError(
            f"sequence length {seq} exceeds max_positions {cfg.max_positions}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ad.ShapeError("token id out of vocabulary range")
    if model.is_factorized:
        tok = ad.embedding_lookup(model.word_a, ids) @ model.word_b
    else:
        tok = ad.embedding_lookup(model.word, ids)
    pos = ad.embedding_lookup(model.position, np.arange(seq))
    typ = ad.embedding_lookup(model.token_type, np.zeros(seq, dtype=np.int64))
    x = tok + pos + typ
    return ad.layer_norm(x, model.ln_emb_gain, model.ln_emb_bias)


def _encoder_layer(layer: EncoderLayer, x, keep):
    inv_sqrt_d = 1.0 / np.sqrt(layer.heads[0].wq.shape[1])
    attn = None
    for head in layer.heads:
        q = x @ head.wq + head.bq
        k = x @ head.wk + head.bk
        v = x @ head.wv + head.bv
        scores = ad.scale(q @ ad.transpose(k, (0, 2, 1)), inv_sqrt_d)
        probs = ad.row_softmax(ad.mask_columns(scores, keep))
        contrib = (probs @ v) @ head.wo
        attn = contrib if attn is None else attn + contrib
    attn = attn + layer.attn_out_bias
    mid = ad.layer_norm(attn + x, layer.ln_attn_gain, layer.ln_attn_bias)
    ffn = ad.gelu(mid @ layer.ffn_in_w + layer.ffn_in_b) @ layer.ffn_out_w
    ffn = ffn + layer.ffn_out_b
    return ad.layer_norm(ffn + mid, layer.ln_ffn_gain, layer.ln_ffn_bias)


def _exit_logits(head: ExitHead, hidden):
    return ad.gather_first_token(hidden) @ head.w + head.b


def forward_all(model: MultiExitModel, ids, mask, loss_depths=None) -> ForwardRecord:
    """Run every layer; return all hiddens and all exit logits.

    `loss_depths` selects the depths (0 = embedding output, k = layer k)
    where loss branches will attach; backward then averages the branch
    gradients per layer instead of summing them.
    """
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask)
    if ids.shape != mask.shape or ids.ndim != 2:
        raise ad.ShapeError(
            f"ids {ids.shape} and mask {mask.shape} must both be (batch, seq)")
    L = model.num_layers
    if loss_depths is not None:
        loss_depths = frozenset(int(d) for d in loss_depths)
        branch, stream = _depth_scales(loss_depths, L)
    keep = (mask != 0)[:, None, :]

    h = _embed(model, ids, mask)
    hiddens = []
    logits = {}
    for k in range(L + 1):
        if loss_depths is not None and k in branch:
            anchor = ad.grad_scale(h, branch[k])
        else:
            anchor = h
        hiddens.append(anchor)
        if k in model.exits:
            logits[k] = _exit_logits(model.exits[k], anchor)
        if k < L:
            carried = ad.grad_scale(h, stream[k]) if loss_depths is not None else h
            h = _encoder_layer(model.layers[k], carried, keep)
    return ForwardRecord(hiddens=hiddens, exit_logits=logits,
                         loss_depths=loss_depths)


def predictions(record: ForwardRecord, layer: int):
    return np.argmax(record.exit_logits[layer].value, axis=1)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def _config_widths(config: ModelConfig):
    return [(config.num_heads, config.ffn)] * config.layers


def count_params(target, *, pooler=False, count_exits=True) -> dict:
    """Exact integer parameter counts, biases included.

    `target` is a ModelConfig (uniform widths, one exit head per layer) or
    a live model (actual per-layer widths, actual exits).  `pooler=True`
    adds the dense-baseline H*H+H pooler; combined with
    `count_exits=False` this reproduces stock single-head encoder totals.
    """
    if isinstance(target, ModelConfig):
        cfg = target
        widths = _config_widths(cfg)
        factor_rank = cfg.embed_rank
        n_exits = cfg.layers if count_exits else 0
    else:
        cfg = target.config
        widths = target.layer_widths()
        factor_rank = (target.word_a.shape[1] if target.is_factorized else None)
        n_exits = len(target.exits) if count_exits else 0
        if pooler:
            raise ValueError("live models carry no pooler")
    H, d = cfg.hidden, (cfg.head_size if isinstance(target, ModelConfig)
                        else target.head_size)

    if factor_rank is None:
        word = cfg.vocab_size * H
    else:
        word = cfg.vocab_size * factor_rank + factor_rank * H
    other = cfg.max_positions * H + cfg.num_type_ids * H
    norms = 2 * H  # embedding layer-norm
    mha = ffn = 0
    for heads, fw in widths:
        mha += heads * (3 * (H * d + d) + d * H) + H
        ffn += H * fw + fw + fw * H + H
        norms += 4 * H
    exits = n_exits * (H * cfg.num_classes + cfg.num_classes)
    pool = H * H + H if pooler else 0
    total = word + other + norms + mha + ffn + exits + pool
    return {"embedding_word": word, "embedding_other": other,
            "layer_norms": norms, "mha": mha, "ffn": ffn,
            "exits": exits, "pooler": pool, "total": total}


def count_flops(target, seq_len: int, exit_layer: int) -> dict:
    """FLOPs to run through `exit_layer` and its single exit head.

    Convention: one multiply-accumulate = 2 FLOPs; matmuls only (QKV/O
    projections, the two n^2 attention products, FFN, the embedding factor
    product, one exit head).  Softmax, layer-norm, activations and
    embedding additions are scalar ops and excluded.
    """
    if isinstance(target, ModelConfig):
        cfg, widths, d = target, _config_widths(target), target.head_size
        factor_rank = cfg.embed_rank
    else:
        cfg, widths, d = target.config, target.layer_widths(), target.head_size
        factor_rank = (target.word_a.shape[1] if target.is_factorized else None)
    L, H, n = len(widths), cfg.hidden, int(seq_len)
    if not 1 <= exit_layer <= L:
        raise ValueError(f"exit_layer {exit_layer} outside [1, {L}]")
    if n < 1:
        raise ValueError("seq_len must be >= 1")

    embed = 2 * n * factor_rank * H if factor_rank is not None else 0
    per_layer = []
    for heads, fw in widths:
        a = heads * d
        macs = (3 * n * H * a      # Q, K, V projections
                + n * n * a        # scores = Q K^T over all heads
                + n * n * a        # probs V
                + n * a * H        # output projection
                + n * H * fw       # FFN in
                + n * fw * H)      # FFN out
        per_layer.append(2 * macs)
    exit_head = 2 * H * cfg.num_classes
    to_exit = embed + sum(per_layer[:exit_layer]) + exit_head
    return {"embedding": embed, "per_layer": per_layer,
            "exit_head": exit_head, "to_exit": to_exit,
            "total": embed + sum(per_layer) + exit_head}


def flops_to_exit_table(target, seq_len: int):
    """Cumulative cost of exiting at each layer 1..L as one list."""
    full = count_flops(target, seq_len, 1)
    base = full["embedding"] + full["exit_head"]
    out, run = [], 0
    for cost in full["per_layer"]:
        run += cost
        out.append(base + run)
    return out
