"""Central finite-difference oracle for single layers."""
import numpy as np

from lamarckneat.tensor_engine import backward_layer, forward_layer


def _rel_err(a, b):
    denom = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-8)
    return float(np.abs(a - b).max(initial=0) / denom)


def check_layer_gradients(spec, inputs, params, rng, mode="infer", h=1e-4, dtype=np.float64,
                          analytic_dtype=None):
    """Max relative error between analytic and numeric gradients of sum(out * r).

    ``r`` is a fixed random projection so every output element contributes.
    Dropout masks are pinned by reseeding the layer rng for every evaluation.
    Differences are always taken in ``dtype``; ``analytic_dtype`` runs the
    backward pass at another precision.
    """
    inputs = [np.asarray(x, dtype=dtype) for x in inputs]
    params = [np.asarray(p, dtype=dtype) for p in params]
    seed = int(rng.integers(2**31))

    def run(xs, ps):
        return forward_layer(spec, xs, ps, mode=mode, rng=np.random.default_rng(seed))

    out, _ = run(inputs, params)
    proj = rng.normal(size=out.shape).astype(dtype)
    low = analytic_dtype or dtype
    _, cache = run([x.astype(low) for x in inputs], [p.astype(low) for p in params])
    gin, gp = backward_layer(spec, cache, proj.astype(low))
    gin = [g.astype(dtype) for g in gin]
    gp = [g.astype(dtype) for g in gp]

    def loss(xs, ps):
        return float(np.sum(run(xs, ps)[0] * proj))

    worst = 0.0
    targets = [(inputs, i, gin[i]) for i in range(len(inputs))] + [(params, i, gp[i]) for i in range(len(params))]
    for group, i, analytic in targets:
        numeric = np.zeros_like(group[i])
        for idx in np.ndindex(*group[i].shape):
            orig = group[i][idx]
            group[i][idx] = orig + h
            up = loss(inputs, params)
            group[i][idx] = orig - h
            down = loss(inputs, params)
            group[i][idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        worst = max(worst, _rel_err(analytic, numeric))
    return worst
