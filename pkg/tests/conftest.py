import numpy as np
import pytest


def conv2d_bruteforce(x, w):
    """Six-loop direct cross-correlation oracle. x: [C,H,W], w: [D,C,r,r]."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    c, h, wi = x.shape
    d, _, kh, kw = w.shape
    out = np.zeros((d, h - kh + 1, wi - kw + 1))
    for j in range(d):
        for u in range(out.shape[1]):
            for v in range(out.shape[2]):
                acc = 0.0
                for i in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            acc += x[i, u + a, v + b] * w[j, i, a, b]
                out[j, u, v] = acc
    return out


def central_difference(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar f at x (flattened)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros(x.size)
    flat = x.ravel()
    for i in range(x.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return g.reshape(x.shape)


def assert_gradients_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    ok = (diff <= atol) | (diff / scale <= rtol)
    assert ok.all(), (
        f"gradient mismatch: worst rel {np.max(diff / scale):.3e}, "
        f"worst abs {diff.max():.3e}"
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
