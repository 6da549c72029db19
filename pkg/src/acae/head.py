"""Attention context-aware embedding head.

For a pair of images, each person instance is a node carrying an appearance
feature vector. The head runs three stages per image:

1. intra-image attention: every node attends over all nodes of its own image
   (self included) and the aggregate is added residually, then layer-normed;
2. inter-image attention: the intra output queries the *other* image's raw
   appearance features, again residual + layer norm;
3. a feed-forward transform: residual MLP followed by layer norm.

Both images are processed symmetrically with shared parameters. Attention is
multi-head: queries/keys/values are split into ``heads`` slices of width
d/heads, logits are plain per-head dot products (no 1/sqrt(d_h) scaling
unless ``scaled_logits`` is set), and the per-head aggregates are
concatenated and passed through an output projection before the residual.

Forward functions come in two flavours: the public ones return embeddings
plus attention traces, and the ``*_cached`` ones additionally return the
intermediates the reverse-mode pass in :mod:`acae.grad` consumes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blockio import read_blocks, write_blocks
from .linalg import (
    DimensionError,
    LayerNormParams,
    as_matrix,
    check_finite,
    layer_norm_rows,
    softmax_rows,
)

UNLABELED = -1

FORMAT_VERSION = 1


@dataclass
class FeatureSet:
    """One image's person instances: appearance vectors plus identity labels.

    ``labels[i]`` is a nonnegative identity id, or UNLABELED for background
    persons without an annotation.
    """

    image_id: int
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = as_matrix(self.features)
        check_finite(self.features, f"features of image {self.image_id}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.features.shape[0],):
            raise DimensionError(
                f"image {self.image_id}: {self.features.shape[0]} feature rows "
                f"but {self.labels.shape} labels"
            )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def labeled_only(self) -> "FeatureSet":
        keep = self.labeled_mask()
        return FeatureSet(self.image_id, self.features[keep], self.labels[keep])


@dataclass
class AttentionBlockParams:
    """Q/K/V projections (head-concatenated rows) plus the output projection.

    The projections are pure linear maps; a key-side bias would shift every
    logit of a row equally and vanish under the softmax anyway. Only the
    output projection carries a bias.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray

    def arrays(self) -> dict:
        return {
            "wq": self.wq,
            "wk": self.wk,
            "wv": self.wv,
            "wo": self.wo, "bo": self.bo,
        }


@dataclass
class AcaeParams:
    """Every learnable weight of the head.

    ``dim`` must be divisible by ``heads``; per-head projections are the
    contiguous row slices of the (dim, dim) Q/K/V matrices.
    """

    dim: int
    heads: int
    ffn_dim: int
    intra: AttentionBlockParams
    inter: AttentionBlockParams
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln1: LayerNormParams
    ln2: LayerNormParams
    ln3: LayerNormParams
    scaled_logits: bool = False
    share_qkv: bool = False

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @classmethod
    def initialize(cls, dim: int, heads: int = 4, ffn_dim: int | None = None,
                   seed: int = 0, scaled_logits: bool = False,
                   share_qkv: bool = False, ln_eps: float = 1e-5) -> "AcaeParams":
        """Fresh parameters: fan-in scaled uniform weights, zero biases, unit LN gains."""
        if ffn_dim is None or ffn_dim <= 0:
            ffn_dim = 2 * dim
        rng = np.random.default_rng([seed, 0x0ACAE])

        def uni(out, inn):
            bound = 1.0 / np.sqrt(inn)
            return rng.uniform(-bound, bound, size=(out, inn))

        def block():
            return AttentionBlockParams(
                wq=uni(dim, dim),
                wk=uni(dim, dim),
                wv=uni(dim, dim),
                wo=uni(dim, dim), bo=np.zeros(dim),
            )

        intra = block()
        inter = intra if share_qkv else block()
        return cls(
            dim=dim, heads=heads, ffn_dim=ffn_dim,
            intra=intra, inter=inter,
            w1=uni(ffn_dim, dim), b1=np.zeros(ffn_dim),
            w2=uni(dim, ffn_dim), b2=np.zeros(dim),
            ln1=LayerNormParams.identity(dim, ln_eps),
            ln2=LayerNormParams.identity(dim, ln_eps),
            ln3=LayerNormParams.identity(dim, ln_eps),
            scaled_logits=scaled_logits,
            share_qkv=share_qkv,
        )

    def named_arrays(self) -> dict:
        """Stable name -> array view of every parameter block.

        When ``share_qkv`` is set the inter entries alias the intra arrays;
        gradient accumulation and SGD then act on the shared storage twice,
        which is exactly the tied-weights semantics.
        """
        out = {}
        for prefix, blk in (("intra", self.intra), ("inter", self.inter)):
            for name, arr in blk.arrays().items():
                out[f"{prefix}.{name}"] = arr
        out["mlp.w1"] = self.w1
        out["mlp.b1"] = self.b1
        out["mlp.w2"] = self.w2
        out["mlp.b2"] = self.b2
        for i, ln in ((1, self.ln1), (2, self.ln2), (3, self.ln3)):
            out[f"ln{i}.gain"] = ln.gain
            out[f"ln{i}.bias"] = ln.bias
        return out

    def save(self, path) -> None:
        blocks = {}
        for name, arr in self.named_arrays().items():
            blocks[name] = arr if arr.ndim == 2 else arr[None, :]
        blocks["opts.scaled_logits"] = np.array([[1.0 if self.scaled_logits else 0.0]])
        blocks["opts.share_qkv"] = np.array([[1.0 if self.share_qkv else 0.0]])
        blocks["opts.ln_eps"] = np.array([[self.ln1.eps]])
        write_blocks(path, FORMAT_VERSION, (self.dim, self.heads, self.ffn_dim), blocks)

    @classmethod
    def load(cls, path) -> "AcaeParams":
        version, (dim, heads, ffn_dim), blocks = read_blocks(path)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        return cls._from_blocks(dim, heads, ffn_dim, blocks)

    @classmethod
    def _from_blocks(cls, dim, heads, ffn_dim, blocks) -> "AcaeParams":
        expected = _expected_shapes(dim, ffn_dim)
        model_blocks = {k: v for k, v in blocks.items()
                        if not (k.startswith("imb.") or k.startswith("oim."))}
        missing = sorted(set(expected) - set(model_blocks))
        extra = sorted(set(model_blocks) - set(expected))
        if missing or extra:
            raise ValueError(
                f"parameter blocks do not match the header dimensions: "
                f"missing {missing}, unexpected {extra}"
            )
        for name, shape in expected.items():
            if model_blocks[name].shape != shape:
                raise ValueError(
                    f"block {name!r} has shape {model_blocks[name].shape}, "
                    f"expected {shape}"
                )

        def vec(name):
            return model_blocks[name][0]

        def blk(prefix):
            return AttentionBlockParams(
                wq=model_blocks[f"{prefix}.wq"],
                wk=model_blocks[f"{prefix}.wk"],
                wv=model_blocks[f"{prefix}.wv"],
                wo=model_blocks[f"{prefix}.wo"], bo=vec(f"{prefix}.bo"),
            )

        eps = float(model_blocks["opts.ln_eps"][0, 0])
        share = bool(model_blocks["opts.share_qkv"][0, 0])
        intra = blk("intra")
        inter = intra if share else blk("inter")
        return cls(
            dim=dim, heads=heads, ffn_dim=ffn_dim,
            intra=intra, inter=inter,
            w1=model_blocks["mlp.w1"], b1=vec("mlp.b1"),
            w2=model_blocks["mlp.w2"], b2=vec("mlp.b2"),
            ln1=LayerNormParams(vec("ln1.gain"), vec("ln1.bias"), eps),
            ln2=LayerNormParams(vec("ln2.gain"), vec("ln2.bias"), eps),
            ln3=LayerNormParams(vec("ln3.gain"), vec("ln3.bias"), eps),
            scaled_logits=bool(model_blocks["opts.scaled_logits"][0, 0]),
            share_qkv=share,
        )


def _expected_shapes(dim: int, ffn_dim: int) -> dict:
    shapes = {}
    for prefix in ("intra", "inter"):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{w}"] = (dim, dim)
        shapes[f"{prefix}.bo"] = (1, dim)
    shapes["mlp.w1"] = (ffn_dim, dim)
    shapes["mlp.b1"] = (1, ffn_dim)
    shapes["mlp.w2"] = (dim, ffn_dim)
    shapes["mlp.b2"] = (1, dim)
    for i in (1, 2, 3):
        shapes[f"ln{i}.gain"] = (1, dim)
        shapes[f"ln{i}.bias"] = (1, dim)
    shapes["opts.scaled_logits"] = (1, 1)
    shapes["opts.share_qkv"] = (1, 1)
    shapes["opts.ln_eps"] = (1, 1)
    return shapes


@dataclass
class AttentionTrace:
    """Per-head attention weights and raw logits, shape (heads, n, m).

    ``passthrough`` marks the empty-gallery case where no attention was
    applied and the output equals the input.
    """

    weights: np.ndarray
    logits: np.ndarray
    passthrough: bool = False


@dataclass
class ContextualEmbeddings:
    """The embedding triplet produced for one image of a pair."""

    intra: np.ndarray
    inter: np.ndarray
    final: np.ndarray


@dataclass
class PairTraces:
    a_intra: AttentionTrace
    a_inter: AttentionTrace
    b_intra: AttentionTrace
    b_inter: AttentionTrace


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads)


def attention_block_forward(x: np.ndarray, y: np.ndarray,
                            blk: AttentionBlockParams, ln: LayerNormParams,
                            heads: int, scaled: bool):
    """One attention stage: queries from ``x``, keys/values from ``y``,
    residual connection from ``x``, then layer norm.

    Returns (out, trace, cache); the cache holds everything the backward
    pass needs.
    """
    x = as_matrix(x)
    y = as_matrix(y)
    if x.shape[1] != blk.wq.shape[1] or y.shape[1] != blk.wk.shape[1]:
        raise DimensionError(
            f"feature width {x.shape[1]}/{y.shape[1]} does not match "
            f"projection width {blk.wq.shape[1]}"
        )
    n, d = x.shape
    dh = d // heads
    scale = 1.0 / np.sqrt(dh) if scaled else 1.0

    q = _split_heads(x @ blk.wq.T, heads)
    k = _split_heads(y @ blk.wk.T, heads)
    v = _split_heads(y @ blk.wv.T, heads)
    logits = np.einsum("nhd,mhd->hnm", q, k) * scale
    weights = softmax_rows(logits)
    ctx = np.einsum("hnm,mhd->nhd", weights, v).reshape(n, d)
    z = ctx @ blk.wo.T + blk.bo
    pre_ln = x + z
    out = layer_norm_rows(pre_ln, ln)

    trace = AttentionTrace(weights=weights, logits=logits)
    cache = {
        "x": x, "y": y, "q": q, "k": k, "v": v,
        "weights": weights, "ctx": ctx, "pre_ln": pre_ln,
        "blk": blk, "ln": ln, "heads": heads, "scale": scale,
    }
    return out, trace, cache


def mlp_forward(x: np.ndarray, params: AcaeParams):
    """Residual feed-forward stage: LN(x + W2 relu(W1 x + b1) + b2)."""
    h_pre = x @ params.w1.T + params.b1
    h = np.maximum(h_pre, 0.0)
    z = h @ params.w2.T + params.b2
    pre_ln = x + z
    out = layer_norm_rows(pre_ln, params.ln3)
    cache = {"x": x, "h_pre": h_pre, "h": h, "pre_ln": pre_ln, "params": params}
    return out, cache


def _empty_trace(heads: int, n: int, m: int, passthrough: bool = False) -> AttentionTrace:
    shape = (heads, n, m)
    return AttentionTrace(np.zeros(shape), np.zeros(shape), passthrough=passthrough)


def intra_attention(feats: FeatureSet, params: AcaeParams):
    """Aggregate every node over all nodes of the same image (Stage 1)."""
    out, trace, _ = intra_attention_cached(feats.features, params)
    return out, trace


def intra_attention_cached(features: np.ndarray, params: AcaeParams):
    features = as_matrix(features)
    if features.shape[0] == 0:
        return features.copy(), _empty_trace(params.heads, 0, 0), None
    return attention_block_forward(
        features, features, params.intra, params.ln1, params.heads, params.scaled_logits
    )


def inter_attention(pbar: np.ndarray, gallery: FeatureSet, params: AcaeParams):
    """Let intra embeddings query the other image's raw features (Stage 2)."""
    out, trace, _ = inter_attention_cached(pbar, gallery.features, params)
    return out, trace


def inter_attention_cached(pbar: np.ndarray, gallery_features: np.ndarray,
                           params: AcaeParams):
    pbar = as_matrix(pbar)
    gallery_features = as_matrix(gallery_features)
    if pbar.shape[0] == 0:
        return pbar.copy(), _empty_trace(params.heads, 0, gallery_features.shape[0]), None
    if gallery_features.shape[0] == 0:
        # No candidates to attend over: pass the intra embedding through.
        return pbar.copy(), _empty_trace(params.heads, pbar.shape[0], 0, passthrough=True), None
    return attention_block_forward(
        pbar, gallery_features, params.inter, params.ln2, params.heads, params.scaled_logits
    )


def final_transform(phat: np.ndarray, params: AcaeParams) -> np.ndarray:
    """Residual MLP plus layer norm (Stage 3)."""
    phat = as_matrix(phat)
    if phat.shape[0] == 0:
        return phat.copy()
    out, _ = mlp_forward(phat, params)
    return out


def acae_forward(a: FeatureSet, b: FeatureSet, params: AcaeParams):
    """Run the full head on an image pair.

    Returns (embeddings for a, embeddings for b, traces). The two images are
    processed with the same parameters, so swapping the arguments swaps the
    outputs exactly.
    """
    emb_a, emb_b, traces, _ = acae_forward_cached(a, b, params)
    return emb_a, emb_b, traces


def acae_forward_cached(a: FeatureSet, b: FeatureSet, params: AcaeParams):
    if a.dim != b.dim:
        raise DimensionError(f"feature widths differ: {a.dim} vs {b.dim}")
    if a.dim != params.dim:
        raise DimensionError(f"features have width {a.dim}, head expects {params.dim}")

    a_bar, tr_a_intra, c_a_intra = intra_attention_cached(a.features, params)
    b_bar, tr_b_intra, c_b_intra = intra_attention_cached(b.features, params)
    a_hat, tr_a_inter, c_a_inter = inter_attention_cached(a_bar, b.features, params)
    b_hat, tr_b_inter, c_b_inter = inter_attention_cached(b_bar, a.features, params)

    if a_hat.shape[0]:
        a_fin, c_a_mlp = mlp_forward(a_hat, params)
    else:
        a_fin, c_a_mlp = a_hat.copy(), None
    if b_hat.shape[0]:
        b_fin, c_b_mlp = mlp_forward(b_hat, params)
    else:
        b_fin, c_b_mlp = b_hat.copy(), None

    emb_a = ContextualEmbeddings(intra=a_bar, inter=a_hat, final=a_fin)
    emb_b = ContextualEmbeddings(intra=b_bar, inter=b_hat, final=b_fin)
    traces = PairTraces(tr_a_intra, tr_a_inter, tr_b_intra, tr_b_inter)
    caches = {
        "a_intra": c_a_intra, "a_inter": c_a_inter, "a_mlp": c_a_mlp,
        "b_intra": c_b_intra, "b_inter": c_b_inter, "b_mlp": c_b_mlp,
    }
    return emb_a, emb_b, traces, caches
