import numpy as np
import pytest

from acae.grad import (
    SupervisionConfig,
    compare_gradients,
    finite_difference_gradients,
    grad_check,
    layer_norm_rows_vjp,
    make_grad_instance,
    pair_loss,
    pair_loss_backward,
)
from acae.head import AcaeParams
from acae.linalg import LayerNormParams, softmax_rows, softmax_rows_vjp


def test_scalar_probe_square():
    # df/dw of f(w) = w^2 at w = 3, via the same central-difference scheme
    step = 1e-5
    w = 3.0
    fd = ((w + step) ** 2 - (w - step) ** 2) / (2 * step)
    assert abs(fd - 6.0) < 1e-8


def test_layer_norm_vjp_matches_analytic_jacobian():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 5))
    p = LayerNormParams.identity(5, eps=1e-5)
    dout = rng.standard_normal((1, 5))
    dx, _, _ = layer_norm_rows_vjp(dout, x, p)

    d = 5
    mu = x.mean()
    xc = x[0] - mu
    var = np.mean(xc ** 2)
    istd = 1.0 / np.sqrt(var + p.eps)
    # full Jacobian of xhat = (x - mu) / sqrt(var + eps)
    jac = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            delta = 1.0 if i == j else 0.0
            jac[i, j] = istd * (delta - 1.0 / d) - xc[i] * istd ** 3 * xc[j] / d
    assert np.max(np.abs(dx[0] - dout[0] @ jac)) < 1e-10


def ln_jacobian(x, p):
    """Analytic Jacobian of gain * (x - mean) / sqrt(var + eps) + bias."""
    d = x.shape[0]
    mu = x.mean()
    xc = x - mu
    var = np.mean(xc ** 2)
    istd = 1.0 / np.sqrt(var + p.eps)
    jac = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            delta = 1.0 if i == j else 0.0
            jac[i, j] = p.gain[i] * (istd * (delta - 1.0 / d)
                                     - xc[i] * istd ** 3 * xc[j] / d)
    return jac


def test_zero_weight_head_norm_loss_is_layer_norm_chain():
    # with every value/output/MLP weight zero the final embedding is
    # LN3(LN2(LN1(p))); the gradient of |out|^2 must equal the transposed
    # Jacobian product of the three norms
    params = AcaeParams.initialize(6, heads=1, seed=3)
    for blk in (params.intra, params.inter):
        blk.wv[:] = 0.0
        blk.wo[:] = 0.0
        blk.bo[:] = 0.0
    params.w1[:] = 0.0
    params.w2[:] = 0.0
    params.b1[:] = 0.0
    params.b2[:] = 0.0

    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 6))

    from acae.linalg import layer_norm_rows
    h1 = layer_norm_rows(x, params.ln1)
    h2 = layer_norm_rows(h1, params.ln2)
    h3 = layer_norm_rows(h2, params.ln3)

    dout = 2.0 * h3  # gradient of the squared norm
    dx, _, _ = layer_norm_rows_vjp(dout, h2, params.ln3)
    dx, _, _ = layer_norm_rows_vjp(dx, h1, params.ln2)
    dx, _, _ = layer_norm_rows_vjp(dx, x, params.ln1)

    jac = ln_jacobian(x[0], params.ln1).T \
        @ ln_jacobian(h1[0], params.ln2).T \
        @ ln_jacobian(h2[0], params.ln3).T
    expected = jac @ (2.0 * h3[0])
    assert np.max(np.abs(dx[0] - expected)) < 1e-10


def test_zero_weight_head_loss_gradient_matches_fd():
    # all value/MLP paths zero: the graph is a layer-norm chain
    params = AcaeParams.initialize(6, heads=1, seed=1)
    for blk in (params.intra, params.inter):
        blk.wv[:] = 0.0
        blk.wo[:] = 0.0
    params.w1[:] = 0.0
    params.w2[:] = 0.0
    inst = make_grad_instance(2, n=2, m=2, dim=6, heads=1)
    report = grad_check(params, inst, tolerance=1e-4)
    assert report.ok, report.to_text()


def test_full_head_matches_central_differences():
    inst = make_grad_instance(5, n=3, m=3, dim=8, heads=2)
    params = AcaeParams.initialize(8, heads=2, seed=5)
    report = grad_check(params, inst, tolerance=1e-4)
    assert report.ok, report.to_text()
    assert report.max_rel_err < 1e-4


def test_grad_check_covers_inputs_and_all_blocks():
    inst = make_grad_instance(6, n=2, m=2, dim=4, heads=1)
    params = AcaeParams.initialize(4, heads=1, seed=6)
    report = grad_check(params, inst, tolerance=1e-4)
    names = {r.name for r in report.rows}
    assert "input.a" in names and "input.b" in names
    assert "intra.wq" in names and "mlp.w1" in names and "ln3.gain" in names


def test_corrupted_gradient_is_named():
    inst = make_grad_instance(7, n=2, m=2, dim=4, heads=1)
    params = AcaeParams.initialize(4, heads=1, seed=7)
    _, grads, da, db = pair_loss_backward(inst.a, inst.b, params, inst.state, inst.sup)
    grads["input.a"] = da
    grads["input.b"] = db
    grads["inter.wk"] = grads["inter.wk"] * 2.0  # fault injection
    fd = finite_difference_gradients(params, inst)
    report = compare_gradients(grads, fd, tolerance=1e-4)
    assert not report.ok
    assert [r.name for r in report.failures()] == ["inter.wk"]


def test_softmax_logit_gradient_orthogonal_to_ones():
    rng = np.random.default_rng(9)
    logits = rng.standard_normal((4, 6))
    weights = softmax_rows(logits)
    dweights = rng.standard_normal((4, 6))
    dlogits = softmax_rows_vjp(weights, dweights)
    assert np.max(np.abs(dlogits.sum(axis=-1))) < 1e-9


def test_gradients_deterministic():
    inst1 = make_grad_instance(11, n=2, m=3, dim=8, heads=2)
    inst2 = make_grad_instance(11, n=2, m=3, dim=8, heads=2)
    params1 = AcaeParams.initialize(8, heads=2, seed=11)
    params2 = AcaeParams.initialize(8, heads=2, seed=11)
    loss1, grads1, da1, _ = pair_loss_backward(inst1.a, inst1.b, params1, inst1.state, inst1.sup)
    loss2, grads2, da2, _ = pair_loss_backward(inst2.a, inst2.b, params2, inst2.state, inst2.sup)
    assert loss1 == loss2
    assert np.array_equal(da1, da2)
    for name in grads1:
        assert np.array_equal(grads1[name], grads2[name]), name


def test_non_default_supervision_matches_fd():
    sup = SupervisionConfig(supervise_intra=True, supervise_inter=True)
    inst = make_grad_instance(13, n=2, m=2, dim=6, heads=1, sup=sup)
    params = AcaeParams.initialize(6, heads=1, seed=13)
    report = grad_check(params, inst, tolerance=1e-4)
    assert report.ok, report.to_text()


def test_loss_state_not_mutated_without_update():
    inst = make_grad_instance(15, n=2, m=2, dim=6, heads=1)
    params = AcaeParams.initialize(6, heads=1, seed=15)
    lut_before = inst.state.lut.copy()
    queue_before = len(inst.state.queue)
    pair_loss(inst.a, inst.b, params, inst.state, inst.sup, update_state=False)
    pair_loss_backward(inst.a, inst.b, params, inst.state, inst.sup, update_state=False)
    assert np.array_equal(inst.state.lut, lut_before)
    assert len(inst.state.queue) == queue_before


@pytest.mark.parametrize("n,m,heads,seed", [
    (1, 1, 1, 200), (1, 5, 2, 205), (5, 1, 2, 213), (2, 2, 2, 209),
])
def test_grad_check_size_sweep(n, m, heads, seed):
    inst = make_grad_instance(seed, n=n, m=m, dim=8, heads=heads)
    params = AcaeParams.initialize(8, heads=heads, seed=seed)
    report = grad_check(params, inst, tolerance=1e-4)
    assert report.ok, report.to_text()
