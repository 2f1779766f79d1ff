"""Finite-difference verification of every analytic gradient in the package.

The oracle is deliberately separate from the code it checks: a plain,
loop-based re-implementation of each stage evaluated in extended
precision (``numpy.longdouble``), differentiated with a sixth-order
central stencil. Extended precision pushes round-off in the differences
to ~1e-15, so element-wise relative errors stay meaningful down to very
small gradient entries.
"""

from dataclasses import dataclass

import numpy as np

from . import neural
from .loss import (EstoiLossConfig, estoi_loss, mse_loss, normalize_segment,
                   normalize_segment_backward)
from .octave import OctaveBandConfig, band_energies, band_energies_backward

STAGES = ("bands", "normalize", "estoi", "mse", "network")

THRESHOLDS = {
    "bands": 1e-6,
    "normalize": 1e-6,
    "estoi": 1e-6,
    "mse": 1e-8,
    "network-mse": 1e-7,
    "network-estoi": 1e-5,
}

ABS_FLOOR = 1e-10
STEP = 1e-4
XP = np.longdouble

_STENCIL = ((3, 1.0), (2, -9.0), (1, 45.0), (-1, -45.0), (-2, 9.0), (-3, -1.0))


def central_difference(f, x, h=STEP):
    """Numerical gradient of scalar ``f`` at array ``x`` (perturbed in place)."""
    grad = np.zeros(x.shape)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        acc = XP(0)
        for k, w in _STENCIL:
            x[idx] = old + k * XP(h)
            acc += w * f()
        x[idx] = old
        grad[idx] = float(acc / (60 * XP(h)))
    return grad


# -- reference implementations (extended precision, no shared code) --------

def ref_bands(X, edges):
    return np.array([np.sqrt((X[lo:hi + 1] ** 2).sum(axis=0)) for lo, hi in edges], dtype=XP)


def _ref_unit(v, eps):
    c = v - v.sum() / len(v)
    n = np.sqrt((c * c).sum())
    return c / (n if n > eps else XP(eps))


def ref_normalize(seg, eps=1e-9):
    rows = np.array([_ref_unit(r, eps) for r in seg], dtype=XP)
    return np.array([_ref_unit(c, eps) for c in rows.T], dtype=XP).T


def ref_d_final(X, Y, edges, N, eps=1e-9):
    xb, yb = ref_bands(X, edges), ref_bands(Y, edges)
    M = xb.shape[1] - N + 1
    total = XP(0)
    for m in range(M):
        xt = ref_normalize(xb[:, m:m + N], eps)
        yt = ref_normalize(yb[:, m:m + N], eps)
        total += (xt * yt).sum() / N
    return total / M


def ref_estoi_loss(e1, e2, t1, t2, edges, N, eps=1e-9):
    return -(ref_d_final(e1, t1, edges, N, eps) + ref_d_final(e2, t2, edges, N, eps)) / 2


def ref_mse_loss(e1, e2, t1, t2):
    return (((e1 - t1) ** 2).mean() + ((e2 - t2) ** 2).mean()) / 2


def _sig(x):
    return 1 / (1 + np.exp(-x))


def ref_network(params, n_layers, Z):
    """Source estimates of the mask network for one (F, T) mixture."""
    F, T = Z.shape
    x = Z.T
    for k in range(n_layers):
        W, U, b = params[f"lstm{k}.W"], params[f"lstm{k}.U"], params[f"lstm{k}.b"]
        H = U.shape[0]
        h = np.zeros(H, dtype=XP)
        c = np.zeros(H, dtype=XP)
        outs = []
        for t in range(T):
            z = x[t] @ W + h @ U + b
            i, f, g, o = _sig(z[:H]), _sig(z[H:2 * H]), np.tanh(z[2 * H:3 * H]), _sig(z[3 * H:])
            c = f * c + i * g
            h = o * np.tanh(c)
            outs.append(h)
        x = np.array(outs, dtype=XP)
    mask = _sig(x @ params["dense.W"] + params["dense.b"]).T
    return mask * Z, (1 - mask) * Z


def _xp(a):
    return np.array(a, dtype=XP)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    worst_index: tuple
    threshold: float

    @property
    def passed(self):
        return self.max_rel_error < self.threshold


def compare(name, analytic, numeric, threshold, floor=ABS_FLOOR):
    """Largest |a - n| / |n| over coordinates with |n| >= ``floor``.

    Coordinates below the floor must still agree in absolute terms, or
    they count with their absolute error.
    """
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    err = np.abs(analytic - numeric)
    big = np.abs(numeric) >= floor
    rel = np.where(big, err / np.where(big, np.abs(numeric), 1.0), np.where(err > floor, err, 0.0))
    idx = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    return CheckResult(name, float(rel.max()) if rel.size else 0.0, idx, threshold)


def random_band_config(rng, F, J):
    """A contiguous J-band layout over bins 0..F-1 (each band >= 1 bin)."""
    cuts = np.sort(rng.choice(np.arange(1, F), size=J - 1, replace=False))
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts - 1, [F - 1]])
    # bin 0 left outside the first band sometimes, like DC in the real layout
    if starts[0] == 0 and ends[0] > 0 and rng.random() < 0.5:
        starts[0] = 1
    edges = tuple((int(a), int(b)) for a, b in zip(starts, ends))
    return OctaveBandConfig(16000, 2 * (F - 1), 150.0, 8000.0,
                            tuple(float(j) for j in range(J)), edges, J)


def _instance(rng, max_F=12, max_T=16, max_J=4, max_N=6):
    J = int(rng.integers(3, max_J + 1))
    F = int(rng.integers(max(J + 2, 6), max_F + 1))
    N = int(rng.integers(3, max_N + 1))
    T = int(rng.integers(N, max_T + 1))
    config = EstoiLossConfig(random_band_config(rng, F, J), N)
    arrays = [rng.uniform(0.05, 2.0, (F, T)) for _ in range(4)]
    return config, arrays


def check_bands(rng):
    config, (x, *_) = _instance(rng)
    bc = config.band_config
    w = rng.standard_normal((bc.num_bands, x.shape[1]))
    analytic = band_energies_backward(x, band_energies(x, bc), w, bc)
    xx, ww = _xp(x), _xp(w)
    numeric = central_difference(lambda: (ww * ref_bands(xx, bc.band_edges)).sum(), xx)
    return compare("bands", analytic, numeric, THRESHOLDS["bands"])


def check_normalize(rng):
    J, N = int(rng.integers(3, 6)), int(rng.integers(3, 7))
    seg = rng.uniform(0.0, 2.0, (J, N))
    w = rng.standard_normal((J, N))
    analytic = normalize_segment_backward(seg, w)
    ss, ww = _xp(seg), _xp(w)
    numeric = central_difference(lambda: (ww * ref_normalize(ss)).sum(), ss)
    return compare("normalize", analytic, numeric, THRESHOLDS["normalize"])


def check_estoi(rng):
    config, arrays = _instance(rng)
    out = estoi_loss(*arrays, config)
    e1, e2, t1, t2 = map(_xp, arrays)
    edges, N = config.band_config.band_edges, config.segment_frames
    f = lambda: ref_estoi_loss(e1, e2, t1, t2, edges, N)
    numeric = np.stack([central_difference(f, e1), central_difference(f, e2)])
    return compare("estoi", np.stack([out.grad_source1, out.grad_source2]), numeric,
                   THRESHOLDS["estoi"])


def check_mse(rng):
    _, arrays = _instance(rng)
    out = mse_loss(*arrays)
    e1, e2, t1, t2 = map(_xp, arrays)
    f = lambda: ref_mse_loss(e1, e2, t1, t2)
    numeric = np.stack([central_difference(f, e1), central_difference(f, e2)])
    return compare("mse", np.stack([out.grad_source1, out.grad_source2]), numeric,
                   THRESHOLDS["mse"])


def network_problem(rng, F=6, hidden=8, T=10, bands=3, N=3):
    """Tiny model, mixture, targets and band layout for a whole-pipeline check.

    Three bands are the minimum for a non-trivial check: with two, every
    spectrally normalised column is (+-1/sqrt 2) and the loss is flat.
    """
    model = neural.init_model(F, [hidden], seed=int(rng.integers(2**31)))
    Z = rng.uniform(0.1, 2.0, (F, T))
    share = rng.uniform(0.0, 1.0, (F, T))
    t1, t2 = share * Z, (1.0 - share) * Z
    edges = tuple((int(a[0]), int(a[-1])) for a in np.array_split(np.arange(F), bands))
    config = EstoiLossConfig(OctaveBandConfig(16000, 2 * (F - 1), 150.0, 8000.0,
                                              tuple(range(bands)), edges, bands), N)
    return model, Z, t1, t2, config


def check_network(rng, loss_name):
    model, Z, t1, t2, config = network_problem(rng)
    res = neural.forward(model, Z)
    if loss_name == "mse":
        out = mse_loss(res.est1, res.est2, t1, t2)
    else:
        out = estoi_loss(res.est1, res.est2, t1, t2, config)
    grads = neural.backward(model, res.tape, out.grad_source1, out.grad_source2)

    params = {k: _xp(v) for k, v in model.parameters().items()}
    ZZ, tt1, tt2 = _xp(Z), _xp(t1), _xp(t2)
    edges, N = config.band_config.band_edges, config.segment_frames

    def f():
        e1, e2 = ref_network(params, len(model.layers), ZZ)
        if loss_name == "mse":
            return ref_mse_loss(e1, e2, tt1, tt2)
        return ref_estoi_loss(e1, e2, tt1, tt2, edges, N)

    key = f"network-{loss_name}"
    worst = CheckResult(key, 0.0, (), THRESHOLDS[key])
    for name, p in params.items():
        res_p = compare(key, grads[name], central_difference(f, p), THRESHOLDS[key])
        if res_p.max_rel_error >= worst.max_rel_error:
            worst = CheckResult(key, res_p.max_rel_error, (name,) + tuple(res_p.worst_index),
                                THRESHOLDS[key])
    return worst


def run(stage="all", instances=20, seed=0):
    """Run the requested stages; returns the worst :class:`CheckResult` per check."""
    rng = np.random.default_rng(seed)
    stages = STAGES if stage == "all" else (stage,)
    results = []
    for st in stages:
        if st == "network":
            checks = [("network-mse", lambda r: check_network(r, "mse")),
                      ("network-estoi", lambda r: check_network(r, "estoi"))]
            count = max(1, instances // 10)
        else:
            fn = {"bands": check_bands, "normalize": check_normalize,
                  "estoi": check_estoi, "mse": check_mse}[st]
            checks = [(st, fn)]
            count = instances
        for name, fn in checks:
            worst = None
            for i in range(count):
                r = fn(rng)
                if worst is None or r.max_rel_error > worst.max_rel_error:
                    worst = CheckResult(name, r.max_rel_error, (i,) + tuple(r.worst_index),
                                        r.threshold)
            results.append(worst)
    return results
