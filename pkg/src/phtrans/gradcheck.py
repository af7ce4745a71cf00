"""Central finite-difference checking of analytic gradients.

All checks run in float64. The numeric side perturbs one element at a time
with step ``h`` and never looks at the tape, so it stays independent of the
reverse-mode path it validates.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import engine
from .engine import Tensor, Tape


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise |a - n| / max(1, |a|, |n|), reduced to the worst entry."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float((np.abs(a - n) / scale).max())


def fd_gradient(value_fn: Callable[[], float], param: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar function w.r.t. every element of ``param``.

    Mutates ``param.data`` in place during probing and restores it exactly.
    """
    flat = param.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value_fn()
        flat[i] = orig - h
        fm = value_fn()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(param.shape)


def gradcheck(make_loss: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4) -> float:
    """Compare tape gradients of a scalar loss against central differences.

    ``make_loss`` must rebuild the loss from the params' current data each
    call. Returns the worst relative error across all params.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("gradcheck requires float64 parameters")
        p.grad = None
    with Tape() as tape:
        loss = make_loss()
    tape.backward(loss)
    analytic = [np.array(p.grad, dtype=np.float64, copy=True) for p in params]

    def value() -> float:
        return float(make_loss().data)

    worst = 0.0
    for p, a in zip(params, analytic):
        numeric = fd_gradient(value, p, h=h)
        worst = max(worst, max_rel_error(a, numeric))
    return worst


def _rand(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape).astype(np.float64), requires_grad=True)


def _scalarize(out: Tensor, cot: np.ndarray) -> Tensor:
    return engine.reduce_sum(engine.mul(out, cot))


def op_gradcheck_cases(seed: int) -> list[tuple[str, Callable[[], float]]]:
    """One named check per differentiable operator; each returns its error."""
    rng = np.random.default_rng(seed)
    cases: list[tuple[str, Callable[[], float]]] = []

    def register(name, make_loss, params):
        cases.append((name, lambda: gradcheck(make_loss, params)))

    a = _rand(rng, (2, 3))
    b = _rand(rng, (2, 3), scale=0.5)
    cot = rng.normal(size=(2, 3))
    register("add", lambda: _scalarize(engine.add(a, b), cot), [a, b])
    register("sub", lambda: _scalarize(engine.sub(a, b), cot), [a, b])
    register("mul", lambda: _scalarize(engine.mul(a, b), cot), [a, b])

    num = _rand(rng, (2, 3))
    den = Tensor(rng.uniform(0.5, 2.0, size=(2, 3)), requires_grad=True)
    register("div", lambda: _scalarize(engine.div(num, den), cot), [num, den])

    bc = _rand(rng, (1, 3))
    register("add_broadcast", lambda: _scalarize(engine.add(a, bc), cot), [a, bc])

    g = _rand(rng, (3, 4))
    cot_g = rng.normal(size=(3, 4))
    register("gelu", lambda: _scalarize(engine.gelu(g), cot_g), [g])

    sm = _rand(rng, (3, 5), scale=2.0)
    cot_sm = rng.normal(size=(3, 5))
    register("softmax", lambda: _scalarize(engine.softmax(sm, axis=-1), cot_sm), [sm])
    register("log_softmax", lambda: _scalarize(engine.log_softmax(sm, axis=-1), cot_sm), [sm])

    r = _rand(rng, (2, 3, 4))
    cot_r0 = rng.normal(size=(3,))
    register("sum", lambda: _scalarize(engine.reduce_sum(r, axis=(0, 2)), cot_r0), [r])
    register("mean", lambda: _scalarize(engine.reduce_mean(r, axis=(0, 2)), cot_r0), [r])
    cot_rs = rng.normal(size=(4, 6))
    register("reshape", lambda: _scalarize(engine.reshape(r, (4, 6)), cot_rs), [r])
    cot_tp = rng.normal(size=(4, 2, 3))
    register("transpose", lambda: _scalarize(engine.transpose(r, (2, 0, 1)), cot_tp), [r])
    cot_rl = rng.normal(size=(2, 3, 4))
    register("roll", lambda: _scalarize(engine.roll(r, (1, 2), (0, 2)), cot_rl), [r])
    cot_nw = rng.normal(size=(2, 2, 4))
    register("narrow", lambda: _scalarize(engine.narrow(r, 1, 1, 2), cot_nw), [r])

    c1 = _rand(rng, (2, 2, 3))
    c2 = _rand(rng, (2, 4, 3))
    cot_cat = rng.normal(size=(2, 6, 3))
    register("concat", lambda: _scalarize(engine.concat(c1, c2, axis=1), cot_cat), [c1, c2])

    lx = _rand(rng, (2, 3, 4))
    lw = _rand(rng, (5, 4), scale=0.5)
    lb = _rand(rng, (5,))
    cot_lin = rng.normal(size=(2, 3, 5))
    register("linear", lambda: _scalarize(engine.linear(lx, lw, lb), cot_lin), [lx, lw, lb])

    ma = _rand(rng, (2, 3, 4))
    mb = _rand(rng, (2, 4, 2))
    cot_mm = rng.normal(size=(2, 3, 2))
    register("matmul", lambda: _scalarize(engine.matmul(ma, mb), cot_mm), [ma, mb])

    cx = _rand(rng, (1, 2, 4, 5, 5))
    cw = _rand(rng, (3, 2, 3, 3, 3), scale=0.5)
    cb = _rand(rng, (3,))
    cot_conv = rng.normal(size=(1, 3, 4, 3, 3))
    register(
        "conv3d",
        lambda: _scalarize(engine.conv3d(cx, cw, cb, (1, 2, 2), (1, 1, 1)), cot_conv),
        [cx, cw, cb],
    )

    tx = _rand(rng, (1, 3, 2, 2, 3))
    tw = _rand(rng, (3, 2, 1, 2, 2), scale=0.5)
    tb = _rand(rng, (2,))
    cot_tc = rng.normal(size=(1, 2, 2, 4, 6))
    register(
        "conv_transpose3d",
        lambda: _scalarize(engine.conv_transpose3d(tx, tw, tb, (1, 2, 2)), cot_tc),
        [tx, tw, tb],
    )

    ix = _rand(rng, (2, 3, 2, 3, 3))
    ig = Tensor(rng.uniform(0.5, 1.5, size=(3,)), requires_grad=True)
    ib = _rand(rng, (3,))
    cot_in = rng.normal(size=(2, 3, 2, 3, 3))
    register(
        "instance_norm",
        lambda: _scalarize(engine.instance_norm(ix, ig, ib), cot_in),
        [ix, ig, ib],
    )

    nx = _rand(rng, (2, 4, 6))
    ng = Tensor(rng.uniform(0.5, 1.5, size=(6,)), requires_grad=True)
    nb = _rand(rng, (6,))
    cot_ln = rng.normal(size=(2, 4, 6))
    register("layer_norm", lambda: _scalarize(engine.layer_norm(nx, ng, nb), cot_ln), [nx, ng, nb])

    table = _rand(rng, (2, 5))
    idx = rng.integers(0, 5, size=(3, 3))
    cot_ir = rng.normal(size=(2, 3, 3))
    register("index_rows", lambda: _scalarize(engine.index_rows(table, idx), cot_ir), [table])

    return cases


def run_op_gradchecks(seed: int) -> dict[str, float]:
    """Run every registered operator check; returns name -> max relative error."""
    return {name: fn() for name, fn in op_gradcheck_cases(seed)}
