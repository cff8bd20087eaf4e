"""Central-difference verification of analytic backward passes.

The probed op runs in float64; finite-difference noise at float32 would
drown out real defects at the tolerances we care about (1e-4).
"""

import numpy as np

from .errors import NumericError

DEFAULT_EPS = 1e-5
_FLOOR = 1e-8


def max_rel_error(analytic, numeric):
    """max |a - n| / max(|a|, |n|, 1e-8) over all coordinates."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), _FLOOR)
    return float(np.max(np.abs(a - b) / denom))


def grad_check(op, inputs, eps=DEFAULT_EPS, max_coords=200, seed=0):
    """Compare an op's analytic gradients against central differences.

    `op(*inputs)` must return `(output, vjp)` where `vjp(grad_output)` yields
    one gradient per input (None for inputs the op does not differentiate).
    The scalar being differenced is sum(output * r) for a fixed random r, so
    a single backward call provides every analytic gradient at once.

    Returns the max relative error over sampled coordinates of all inputs.
    """
    rng = np.random.default_rng(seed)
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    out, vjp = op(*xs)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite output in gradient check")
    r = rng.standard_normal(out.shape)
    analytic = vjp(r)
    if not np.all([g is None or np.all(np.isfinite(g)) for g in analytic]):
        raise NumericError("non-finite analytic gradient in gradient check")

    def scalar_at(perturbed):
        y, _ = op(*perturbed)
        y = np.asarray(y, dtype=np.float64)
        if not np.all(np.isfinite(y)):
            raise NumericError("non-finite intermediate in gradient check")
        return float((y * r).sum())

    worst = 0.0
    for i, g in enumerate(analytic):
        if g is None:
            continue
        size = xs[i].size
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        for flat in coords:
            probe = [x.copy() if j == i else x for j, x in enumerate(xs)]
            probe[i].flat[flat] += eps
            plus = scalar_at(probe)
            probe[i].flat[flat] -= 2 * eps
            minus = scalar_at(probe)
            numeric = (plus - minus) / (2 * eps)
            worst = max(worst, max_rel_error(np.asarray(g).flat[flat], numeric))
    return worst


def model_grad_check(params, image, s_init, gt, max_disp_px, n_samples=50, eps=DEFAULT_EPS, seed=0):
    """Whole-graph check: perturb sampled parameters of the assembled model
    and compare the combined training loss gradient against differences.
    """
    from . import losses, model

    params64 = {
        name: type(w)(w.kernel.astype(np.float64), w.bias.astype(np.float64))
        for name, w in params.items()
    }
    image = image.astype(np.float64)
    s_init = s_init.astype(np.float64)

    def loss_of(p):
        trace = model.forward_full(image, s_init, p, max_disp_px)
        value, _ = losses.total_loss(trace.s_fuse, trace.s_prop, trace.s_repl, gt)
        return value, trace

    base_loss, trace = loss_of(params64)
    if not np.isfinite(base_loss):
        raise NumericError("non-finite loss in model gradient check")
    _, (g_fuse, g_prop, g_repl) = losses.total_loss(
        trace.s_fuse, trace.s_prop, trace.s_repl, gt
    )
    grads = model.backward_full(
        trace, model.GradOutputs(s_fuse=g_fuse, s_prop=g_prop, s_repl=g_repl)
    )

    flat_analytic = model.flatten_params(grads)
    flat_params = model.flatten_params(params64)
    names = list(flat_params)
    rng = np.random.default_rng(seed)
    total = sum(flat_params[n].size for n in names)
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.cumsum([0] + [flat_params[n].size for n in names])

    worst = 0.0
    for pick in picks:
        which = int(np.searchsorted(offsets, pick, side="right") - 1)
        name, flat = names[which], int(pick - offsets[which])
        arr = flat_params[name]
        orig = arr.flat[flat]
        arr.flat[flat] = orig + eps
        plus, _ = loss_of(params64)
        arr.flat[flat] = orig - eps
        minus, _ = loss_of(params64)
        arr.flat[flat] = orig
        numeric = (plus - minus) / (2 * eps)
        worst = max(worst, max_rel_error(flat_analytic[name].flat[flat], numeric))
    return worst
