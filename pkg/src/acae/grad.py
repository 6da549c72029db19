"""Reverse-mode gradients for the attention head trained with the
instance-matching loss, plus an independent finite-difference validator.

The backward functions are hand-derived per layer and consume the caches
produced by the ``*_cached`` forwards in :mod:`acae.head`. The lookup table
and queue of the loss are treated as constants within a step: no gradient
flows into the memory structures.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .head import FeatureSet, AcaeParams, acae_forward_cached
from .linalg import LayerNormParams, l2_normalize_rows, softmax_rows_vjp
from .oim import OimState, oim_loss

Gradients = dict


@dataclass
class SupervisionConfig:
    """Which embeddings of the pair feed the matching loss.

    The default recipe supervises all three stages of both images; the
    retrieval score averages all three similarities, so every stage needs
    to stay discriminative, not just the final one.
    """

    supervise_pair: bool = True
    supervise_intra: bool = True
    supervise_inter: bool = True
    include_unlabeled_context: bool = True


def zero_gradients(params: AcaeParams) -> Gradients:
    return {name: np.zeros(arr.shape) for name, arr in params.named_arrays().items()}


def layer_norm_rows_vjp(dout: np.ndarray, x: np.ndarray, p: LayerNormParams):
    """Full-Jacobian backward through row-wise layer norm.

    ``x`` is the pre-normalisation input. Returns (dx, dgain, dbias).
    """
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    istd = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * istd

    dgain = np.sum(dout * xhat, axis=0)
    dbias = np.sum(dout, axis=0)
    dxhat = dout * p.gain
    dx = istd * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True)
    )
    return dx, dgain, dbias


def l2_normalize_rows_vjp(dout: np.ndarray, x: np.ndarray,
                          min_norm: float = 1e-12) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), min_norm)
    y = x / norms
    return (dout - y * np.sum(y * dout, axis=1, keepdims=True)) / norms


def attention_block_backward(dout: np.ndarray, cache: dict):
    """Backward through one attention stage.

    Returns (dx, dy, block_grads, dln_gain, dln_bias) where dx is the
    gradient w.r.t. the query/residual input and dy w.r.t. the key/value
    input.
    """
    blk = cache["blk"]
    heads = cache["heads"]
    scale = cache["scale"]
    x, y = cache["x"], cache["y"]
    q, k, v = cache["q"], cache["k"], cache["v"]
    weights, ctx = cache["weights"], cache["ctx"]
    n, d = x.shape

    d_pre, dg, db = layer_norm_rows_vjp(dout, cache["pre_ln"], cache["ln"])
    dz = d_pre
    dx = d_pre.copy()

    dctx = dz @ blk.wo
    dwo = dz.T @ ctx
    dbo = dz.sum(axis=0)

    dctx_h = dctx.reshape(n, heads, d // heads)
    dweights = np.einsum("nhd,mhd->hnm", dctx_h, v)
    dv = np.einsum("hnm,nhd->mhd", weights, dctx_h)
    dlogits = softmax_rows_vjp(weights, dweights) * scale
    dq = np.einsum("hnm,mhd->nhd", dlogits, k).reshape(n, d)
    dk = np.einsum("hnm,nhd->mhd", dlogits, q).reshape(y.shape[0], d)
    dv = dv.reshape(y.shape[0], d)

    grads = {
        "wq": dq.T @ x,
        "wk": dk.T @ y,
        "wv": dv.T @ y,
        "wo": dwo, "bo": dbo,
    }
    dx += dq @ blk.wq
    dy = dk @ blk.wk + dv @ blk.wv
    return dx, dy, grads, dg, db


def mlp_backward(dout: np.ndarray, cache: dict):
    """Backward through the residual feed-forward stage."""
    params = cache["params"]
    x, h_pre, h = cache["x"], cache["h_pre"], cache["h"]

    d_pre, dg, db = layer_norm_rows_vjp(dout, cache["pre_ln"], params.ln3)
    dz = d_pre
    dx = d_pre.copy()

    dh = dz @ params.w2
    dw2 = dz.T @ h
    db2 = dz.sum(axis=0)
    dh_pre = dh * (h_pre > 0)
    dw1 = dh_pre.T @ x
    db1 = dh_pre.sum(axis=0)
    dx += dh_pre @ params.w1

    grads = {"mlp.w1": dw1, "mlp.b1": db1, "mlp.w2": dw2, "mlp.b2": db2,
             "ln3.gain": dg, "ln3.bias": db}
    return dx, grads


def _supervision_rows(emb_a, emb_b, a: FeatureSet, b: FeatureSet,
                      sup: SupervisionConfig):
    """Ordered (stage_name, side, matrix, labels) units feeding the loss."""
    units = [("final", "a", emb_a.final, a.labels)]
    if sup.supervise_pair:
        units.append(("final", "b", emb_b.final, b.labels))
    if sup.supervise_intra:
        units.append(("intra", "a", emb_a.intra, a.labels))
        if sup.supervise_pair:
            units.append(("intra", "b", emb_b.intra, b.labels))
    if sup.supervise_inter:
        units.append(("inter", "a", emb_a.inter, a.labels))
        if sup.supervise_pair:
            units.append(("inter", "b", emb_b.inter, b.labels))
    return units


def pair_loss(a: FeatureSet, b: FeatureSet, params: AcaeParams, state: OimState,
              sup: SupervisionConfig | None = None, update_state: bool = False) -> float:
    """Scalar matching loss of one image pair (no gradients)."""
    sup = sup or SupervisionConfig()
    emb_a, emb_b, _, _ = acae_forward_cached(a, b, params)
    units = _supervision_rows(emb_a, emb_b, a, b, sup)
    feats = np.vstack([m for _, _, m, _ in units])
    labels = np.concatenate([lab for _, _, _, lab in units])
    loss, _ = oim_loss(l2_normalize_rows(feats), labels, state, update_state=update_state)
    return loss


def pair_loss_backward(a: FeatureSet, b: FeatureSet, params: AcaeParams,
                       state: OimState, sup: SupervisionConfig | None = None,
                       update_state: bool = False):
    """Loss of one pair plus exact gradients.

    Returns (loss, parameter gradients, d loss/d a.features,
    d loss/d b.features).
    """
    sup = sup or SupervisionConfig()
    emb_a, emb_b, _, caches = acae_forward_cached(a, b, params)

    units = _supervision_rows(emb_a, emb_b, a, b, sup)
    feats = np.vstack([m for _, _, m, _ in units])
    labels = np.concatenate([lab for _, _, _, lab in units])
    zfeats = l2_normalize_rows(feats)
    loss, dz = oim_loss(zfeats, labels, state, update_state=update_state)
    dfeats = l2_normalize_rows_vjp(dz, feats)

    d_by_unit = {}
    offset = 0
    for stage, side, m, _ in units:
        d_by_unit[(stage, side)] = dfeats[offset:offset + m.shape[0]]
        offset += m.shape[0]

    def unit_grad(stage, side, like):
        return d_by_unit.get((stage, side), np.zeros_like(like))

    grads = zero_gradients(params)

    def add_block(prefix, blk_grads, ln_name, dg, db):
        for name, g in blk_grads.items():
            grads[f"{prefix}.{name}"] += g
        grads[f"{ln_name}.gain"] += dg
        grads[f"{ln_name}.bias"] += db

    d_raw = {"a": np.zeros_like(a.features), "b": np.zeros_like(b.features)}

    for side, other, emb in (("a", "b", emb_a), ("b", "a", emb_b)):
        if emb.final.shape[0] == 0:
            continue
        d_fin = unit_grad("final", side, emb.final)

        # Stage 3: residual MLP.
        mlp_cache = caches[f"{side}_mlp"]
        d_hat, mlp_grads = mlp_backward(d_fin, mlp_cache)
        for name, g in mlp_grads.items():
            grads[name] += g
        d_hat = d_hat + unit_grad("inter", side, emb.inter)

        # Stage 2: cross-image attention (queries: this side's intra
        # embedding; keys/values: the other side's raw features).
        inter_cache = caches[f"{side}_inter"]
        if inter_cache is None:
            d_bar = d_hat  # empty-gallery passthrough is the identity
        else:
            d_bar, d_other, blk_grads, dg, db = attention_block_backward(d_hat, inter_cache)
            add_block("inter", blk_grads, "ln2", dg, db)
            d_raw[other] += d_other
        d_bar = d_bar + unit_grad("intra", side, emb.intra)

        # Stage 1: same-image attention (queries, keys, values and the
        # residual all come from this side's raw features).
        intra_cache = caches[f"{side}_intra"]
        dx, dy, blk_grads, dg, db = attention_block_backward(d_bar, intra_cache)
        add_block("intra", blk_grads, "ln1", dg, db)
        d_raw[side] += dx + dy

    if params.share_qkv:
        # Tied blocks: fold the inter-usage gradient into the shared storage.
        for name in ("wq", "wk", "wv", "wo", "bo"):
            grads[f"intra.{name}"] += grads[f"inter.{name}"]
            grads[f"inter.{name}"] = grads[f"intra.{name}"]

    return loss, grads, d_raw["a"], d_raw["b"]


def sgd_step(params: AcaeParams, grads: Gradients, lr: float) -> None:
    """In-place plain gradient descent over every parameter block."""
    seen = set()
    for name, arr in params.named_arrays().items():
        if id(arr) in seen:
            continue  # tied blocks appear under two names
        seen.add(id(arr))
        arr -= lr * grads[name]


@dataclass
class GradInstance:
    """One frozen problem for gradient checking."""

    a: FeatureSet
    b: FeatureSet
    state: OimState
    sup: SupervisionConfig = field(default_factory=SupervisionConfig)


def make_grad_instance(seed: int, n: int = 3, m: int = 3, dim: int = 8,
                       heads: int = 2, num_identities: int = 4,
                       queue_fill: int = 3,
                       sup: SupervisionConfig | None = None) -> GradInstance:
    """Seeded random pair + loss state covering table and queue logits."""
    rng = np.random.default_rng([seed, 0x6C])

    def feats(count, image_id):
        f = rng.standard_normal((count, dim))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        labels = rng.integers(0, num_identities, size=count)
        if count > 1:  # keep at least one unlabeled row in play
            labels[rng.integers(count)] = -1
        return FeatureSet(image_id=image_id, features=f, labels=labels)

    state = OimState(
        lut=_unit_rows(rng, num_identities, dim),
        capacity=5 * num_identities,
        tau=1.0 / 30.0,
        gamma=0.5,
        queue=[row for row in _unit_rows(rng, queue_fill, dim)],
    )
    return GradInstance(a=feats(n, 0), b=feats(m, 1), state=state,
                        sup=sup or SupervisionConfig())


def _unit_rows(rng, count, dim):
    rows = rng.standard_normal((count, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def finite_difference_gradients(params: AcaeParams, inst: GradInstance,
                                step: float = 1e-5) -> Gradients:
    """Central differences of the pair loss w.r.t. every parameter entry
    and both feature inputs. Slow by design; the independent reference."""

    def loss():
        return pair_loss(inst.a, inst.b, params, inst.state, inst.sup)

    fd = {}
    targets = dict(params.named_arrays())
    targets["input.a"] = inst.a.features
    targets["input.b"] = inst.b.features
    seen = {}
    for name, arr in targets.items():
        if id(arr) in seen:
            fd[name] = fd[seen[id(arr)]]
            continue
        seen[id(arr)] = name
        g = np.zeros(arr.size)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss()
            flat[i] = orig - step
            down = loss()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * step)
        fd[name] = g.reshape(arr.shape)
    return fd


@dataclass
class GradCheckRow:
    name: str
    max_rel_err: float
    worst_index: tuple
    ok: bool


@dataclass
class GradCheckReport:
    rows: list
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.rows), default=0.0)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    def failures(self) -> list:
        return [r for r in self.rows if not r.ok]

    def to_text(self) -> str:
        width = max(len(r.name) for r in self.rows)
        lines = [f"{'block'.ljust(width)}  {'max rel err':>12}  result"]
        for r in self.rows:
            lines.append(f"{r.name.ljust(width)}  {r.max_rel_err:>12.3e}  "
                         f"{'PASS' if r.ok else 'FAIL'}")
        lines.append(f"overall: {'PASS' if self.ok else 'FAIL'} "
                     f"(max {self.max_rel_err:.3e}, tolerance {self.tolerance:g})")
        return "\n".join(lines)

    def machine_rows(self) -> list:
        return [(r.name, f"{r.max_rel_err:.6e}", "pass" if r.ok else "fail")
                for r in self.rows]


def compare_gradients(analytic: Gradients, reference: Gradients,
                      tolerance: float) -> GradCheckReport:
    """Per-block relative-error comparison of two gradient dictionaries."""
    rows = []
    for name in sorted(reference):
        ga = analytic[name]
        gr = reference[name]
        denom = np.maximum(1e-8, np.abs(ga) + np.abs(gr))
        rel = np.abs(ga - gr) / denom
        worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
        err = float(rel.max()) if rel.size else 0.0
        rows.append(GradCheckRow(name, err, worst, err < tolerance))
    return GradCheckReport(rows=rows, tolerance=tolerance)


def grad_check(params: AcaeParams, inst: GradInstance,
               tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Validate the analytic gradients of one instance against central
    finite differences. Always returns a report; never raises on FAIL."""
    _, grads, da, db = pair_loss_backward(inst.a, inst.b, params, inst.state, inst.sup)
    analytic = dict(grads)
    analytic["input.a"] = da
    analytic["input.b"] = db
    fd = finite_difference_gradients(params, inst, step=step)
    return compare_gradients(analytic, fd, tolerance)
