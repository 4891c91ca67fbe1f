import numpy as np
import pytest


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of a scalar function wrt array x (in place
    perturbation, float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.abs(a) + np.abs(b))
    return float(np.max(np.abs(a - b) / denom))


def conv3d_oracle(x, w, stride, padding):
    """Naive seven-nested-loop cross-correlation, float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, ci, d, h, wd = x.shape
    co, _, k, _, _ = w.shape
    do = (d + 2 * padding - k) // stride + 1
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    out = np.zeros((n, co, do, ho, wo))
    for b in range(n):
        for o in range(co):
            for od in range(do):
                for oh in range(ho):
                    for ow in range(wo):
                        acc = 0.0
                        for c in range(ci):
                            for kd in range(k):
                                for kh in range(k):
                                    for kw in range(k):
                                        acc += (
                                            xp[b, c, od * stride + kd,
                                               oh * stride + kh, ow * stride + kw]
                                            * w[o, c, kd, kh, kw]
                                        )
                        out[b, o, od, oh, ow] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
