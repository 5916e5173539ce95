"""Query assembly, the L-layer mask decoder and the prediction heads.

Prompt queries take part in cross-attention only: the unified block and the
prompt block run through the shared layers as separate tensors and are
concatenated only at the output. Unified rows therefore cannot read prompt
content even at the bit level, which is the invariant generic segmentation
relies on (prompts are absent at plain inference).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .prompts import ClassEmbeddings, VisionPromptFeature
from .rng import make_rng

QUERY_CAP = 3500  # upper limit on sampled queries


@dataclass
class TaskEmbeddings:
    """One trainable d_in vector per query group, added before decoding."""

    unified: ad.Tensor
    vision: ad.Tensor
    text: ad.Tensor

    def named_params(self, prefix: str = "task_emb") -> dict[str, ad.Tensor]:
        return {f"{prefix}.unified": self.unified, f"{prefix}.vision": self.vision,
                f"{prefix}.text": self.text}


def init_task_embeddings(d_in: int) -> TaskEmbeddings:
    return TaskEmbeddings(unified=ad.parameter(np.zeros(d_in)),
                          vision=ad.parameter(np.zeros(d_in)),
                          text=ad.parameter(np.zeros(d_in)))


@dataclass
class AttentionWeights:
    wq: ad.Tensor
    bq: ad.Tensor
    wk: ad.Tensor
    bk: ad.Tensor
    wv: ad.Tensor
    bv: ad.Tensor
    wo: ad.Tensor
    bo: ad.Tensor

    def named_params(self, prefix: str) -> dict[str, ad.Tensor]:
        return {f"{prefix}.{n}": getattr(self, n)
                for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


@dataclass
class MLPHead:
    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor

    def named_params(self, prefix: str) -> dict[str, ad.Tensor]:
        return {f"{prefix}.{n}": getattr(self, n) for n in ("w1", "b1", "w2", "b2")}

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        h = ad.relu(ad.add(ad.matmul(x, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)


@dataclass
class LayerNormWeights:
    gamma: ad.Tensor
    beta: ad.Tensor

    def named_params(self, prefix: str) -> dict[str, ad.Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


@dataclass
class DecoderLayerWeights:
    cross: AttentionWeights
    ln_cross: LayerNormWeights
    self_attn: AttentionWeights
    ln_self: LayerNormWeights
    ffn: MLPHead
    ln_ffn: LayerNormWeights

    def named_params(self, prefix: str) -> dict[str, ad.Tensor]:
        out = {}
        out.update(self.cross.named_params(f"{prefix}.cross"))
        out.update(self.ln_cross.named_params(f"{prefix}.ln_cross"))
        out.update(self.self_attn.named_params(f"{prefix}.self"))
        out.update(self.ln_self.named_params(f"{prefix}.ln_self"))
        out.update(self.ffn.named_params(f"{prefix}.ffn"))
        out.update(self.ln_ffn.named_params(f"{prefix}.ln_ffn"))
        return out


@dataclass
class DecoderWeights:
    layers: list[DecoderLayerWeights]
    ln_out: LayerNormWeights
    out_head: MLPHead        # d_in -> d_out, applied to final queries
    mask_head: MLPHead       # d_in -> d_out, applied to superpoint features
    n_heads: int = 4

    def named_params(self, prefix: str = "decoder") -> dict[str, ad.Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_params(f"{prefix}.layer{i}"))
        out.update(self.ln_out.named_params(f"{prefix}.ln_out"))
        out.update(self.out_head.named_params(f"{prefix}.out_head"))
        out.update(self.mask_head.named_params(f"{prefix}.mask_head"))
        return out


def _init_attention(rng, d: int) -> AttentionWeights:
    zeros = lambda: ad.parameter(np.zeros(d))
    return AttentionWeights(
        wq=ad.parameter((d, d), rng), bq=zeros(),
        wk=ad.parameter((d, d), rng), bk=zeros(),
        wv=ad.parameter((d, d), rng), bv=zeros(),
        wo=ad.parameter((d, d), rng), bo=zeros(),
    )


def _init_ln(d: int) -> LayerNormWeights:
    return LayerNormWeights(gamma=ad.parameter(np.ones(d)), beta=ad.parameter(np.zeros(d)))


def _init_mlp(rng, d_in: int, d_hidden: int, d_out: int) -> MLPHead:
    return MLPHead(w1=ad.parameter((d_in, d_hidden), rng), b1=ad.parameter(np.zeros(d_hidden)),
                   w2=ad.parameter((d_hidden, d_out), rng), b2=ad.parameter(np.zeros(d_out)))


def init_decoder(rng: np.random.Generator, d_in: int, d_out: int, n_layers: int,
                 n_heads: int = 4) -> DecoderWeights:
    if d_in % n_heads != 0:
        raise ContractError(f"init_decoder: d_in={d_in} not divisible by {n_heads} heads")
    layers = [
        DecoderLayerWeights(
            cross=_init_attention(rng, d_in), ln_cross=_init_ln(d_in),
            self_attn=_init_attention(rng, d_in), ln_self=_init_ln(d_in),
            ffn=_init_mlp(rng, d_in, 4 * d_in, d_in), ln_ffn=_init_ln(d_in),
        )
        for _ in range(n_layers)
    ]
    return DecoderWeights(
        layers=layers, ln_out=_init_ln(d_in),
        out_head=_init_mlp(rng, d_in, d_in, d_out),
        mask_head=_init_mlp(rng, d_in, d_in, d_out),
        n_heads=n_heads,
    )


# ---------------------------------------------------------------------------
# query assembly


@dataclass
class QueryBundle:
    """Unified + prompt query blocks and the sampled superpoint index set."""

    unified: ad.Tensor                 # (m, d_in)
    prompts: ad.Tensor | None          # (K_v + K_t, d_in), vision rows first
    k_vision: int
    k_text: int
    sampled: np.ndarray                # (m,) superpoint indices backing unified queries

    @property
    def m(self) -> int:
        return self.unified.shape[0]


def sample_query_count(n_superpoints: int, seed: int, training: bool,
                       low_fraction: float = 0.5, cap: int = QUERY_CAP) -> int:
    """Training draws m uniformly from [ceil(low*M), M]; inference takes all.

    Both modes respect the hard cap on query count.
    """
    if training:
        rng = make_rng(seed, "query-count")
        low = int(math.ceil(low_fraction * n_superpoints))
        m = int(rng.integers(low, n_superpoints + 1))
    else:
        m = n_superpoints
    return min(m, cap)


def sample_query_indices(n_superpoints: int, m: int, seed: int) -> np.ndarray:
    """The m sampled superpoints backing the unified queries (sorted)."""
    if m == n_superpoints:
        return np.arange(n_superpoints)
    rng = make_rng(seed, "query-sample")
    return np.sort(rng.permutation(n_superpoints)[:m])


def assemble_queries(superpoint_features: ad.Tensor, m: int, emb: TaskEmbeddings,
                     seed: int, vision_prompts: list[VisionPromptFeature] = (),
                     text_features: ad.Tensor | None = None,
                     indices: np.ndarray | None = None) -> QueryBundle:
    """Build the three query groups (features + task embeddings)."""
    n_sp = superpoint_features.shape[0]
    if m > n_sp:
        raise ContractError(f"assemble_queries: m={m} exceeds M={n_sp}")
    if m > QUERY_CAP:
        raise ContractError(f"assemble_queries: m={m} exceeds the cap {QUERY_CAP}")
    idx = sample_query_indices(n_sp, m, seed) if indices is None else np.asarray(indices)
    unified = ad.add(ad.gather_rows(superpoint_features, idx), emb.unified)

    blocks = []
    k_vision = len(vision_prompts)
    if k_vision:
        rows = ad.concat([vp.feature for vp in vision_prompts], axis=0)
        blocks.append(ad.add(rows, emb.vision))
    k_text = 0 if text_features is None else text_features.shape[0]
    if k_text:
        blocks.append(ad.add(text_features, emb.text))
    prompt_block = None
    if blocks:
        prompt_block = blocks[0] if len(blocks) == 1 else ad.concat(blocks, axis=0)
    return QueryBundle(unified=unified, prompts=prompt_block,
                       k_vision=k_vision, k_text=k_text, sampled=idx)


# ---------------------------------------------------------------------------
# decoding


def _attention(x: ad.Tensor, keys: ad.Tensor, values: ad.Tensor,
               w: AttentionWeights, n_heads: int) -> ad.Tensor:
    """Multi-head scaled dot-product attention of x over (keys, values)."""
    d = x.shape[1]
    dh = d // n_heads
    q = ad.add(ad.matmul(x, w.wq), w.bq)
    outs = []
    for h in range(n_heads):
        qh = ad.slice_cols(q, h * dh, (h + 1) * dh)
        kh = ad.slice_cols(keys, h * dh, (h + 1) * dh)
        vh = ad.slice_cols(values, h * dh, (h + 1) * dh)
        scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh))
        outs.append(ad.matmul(ad.softmax_rows(scores), vh))
    merged = outs[0] if n_heads == 1 else ad.concat(outs, axis=1)
    return ad.add(ad.matmul(merged, w.wo), w.bo)


def decode(bundle: QueryBundle, superpoint_features: ad.Tensor,
           weights: DecoderWeights) -> tuple[ad.Tensor, ad.Tensor | None]:
    """Run the decoder; returns output features per block (unified, prompts).

    Pre-norm residual blocks. Prompt queries skip self-attention entirely
    and never enter the unified block's computation.
    """
    u = bundle.unified
    p = bundle.prompts
    for layer in weights.layers:
        keys = ad.add(ad.matmul(superpoint_features, layer.cross.wk), layer.cross.bk)
        values = ad.add(ad.matmul(superpoint_features, layer.cross.wv), layer.cross.bv)
        u = ad.add(u, _attention(layer.ln_cross(u), keys, values,
                                 layer.cross, weights.n_heads))
        if p is not None:
            p = ad.add(p, _attention(layer.ln_cross(p), keys, values,
                                     layer.cross, weights.n_heads))

        nu = layer.ln_self(u)
        sk = ad.add(ad.matmul(nu, layer.self_attn.wk), layer.self_attn.bk)
        sv = ad.add(ad.matmul(nu, layer.self_attn.wv), layer.self_attn.bv)
        u = ad.add(u, _attention(nu, sk, sv, layer.self_attn, weights.n_heads))

        u = ad.add(u, layer.ffn(layer.ln_ffn(u)))
        if p is not None:
            p = ad.add(p, layer.ffn(layer.ln_ffn(p)))
    f_u = weights.out_head(weights.ln_out(u))
    f_p = weights.out_head(weights.ln_out(p)) if p is not None else None
    return f_u, f_p


# ---------------------------------------------------------------------------
# predictions


@dataclass
class PredictionSet:
    """Per-query mask logits over sampled superpoints and class probabilities."""

    f_out: ad.Tensor              # (m + K_v + K_t, d_out)
    mask_logits: ad.Tensor        # (m + K_v + K_t, m)
    cls_logits: ad.Tensor         # (m + K_v + K_t, n_classes + 1)
    cls_pred: ad.Tensor           # row-softmax of cls_logits
    m: int
    k_vision: int
    k_text: int
    sampled: np.ndarray = field(repr=False, default=None)

    @property
    def n_queries(self) -> int:
        return self.m + self.k_vision + self.k_text

    def vision_row(self, i: int) -> int:
        return self.m + i

    def text_row(self, i: int) -> int:
        return self.m + self.k_vision + i


def predict(f_unified: ad.Tensor, f_prompts: ad.Tensor | None,
            superpoint_features: ad.Tensor, e_cls: ClassEmbeddings,
            bundle: QueryBundle, weights: DecoderWeights) -> PredictionSet:
    """Mask logits = F_out x keys(F_s sampled)^T; class rows are softmaxed."""
    keys = weights.mask_head(ad.gather_rows(superpoint_features, bundle.sampled))
    keys_t = ad.transpose(keys)
    e_t = ad.Tensor(e_cls.matrix.T)

    blocks = [f_unified] if f_prompts is None else [f_unified, f_prompts]
    mask_parts = [ad.matmul(b, keys_t) for b in blocks]
    cls_parts = [ad.matmul(b, e_t) for b in blocks]
    prob_parts = [ad.softmax_rows(c) for c in cls_parts]

    cat = (lambda xs: xs[0] if len(xs) == 1 else ad.concat(xs, axis=0))
    return PredictionSet(
        f_out=cat(blocks), mask_logits=cat(mask_parts),
        cls_logits=cat(cls_parts), cls_pred=cat(prob_parts),
        m=bundle.m, k_vision=bundle.k_vision, k_text=bundle.k_text,
        sampled=bundle.sampled,
    )


def superpoint_to_point(values: np.ndarray, superpoint_id: np.ndarray,
                        sampled: np.ndarray, n_superpoints: int) -> np.ndarray:
    """Broadcast per-sampled-superpoint values to points.

    Points whose superpoint was not sampled get -inf (training-time only;
    at inference every superpoint is sampled).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        full = np.full(n_superpoints, -np.inf)
        full[sampled] = values
        return full[superpoint_id]
    full = np.full((values.shape[0], n_superpoints), -np.inf)
    full[:, sampled] = values
    return full[:, superpoint_id]
