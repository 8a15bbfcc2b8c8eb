"""Shared test utilities: finite-difference gradient checking and an
analytic textured-plane renderer used as a matching oracle."""

import numpy as np

from videodepth.autodiff import Tensor


def numeric_grad(f, t: Tensor, indices=None, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. selected entries of t.

    f must re-run the forward pass reading t.data. Returns an array of the
    same shape as t with non-selected entries left at 0.
    """
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return out


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """Max elementwise relative error with an absolute floor on the scale.

    Central differences in double precision resolve gradients to roughly
    1e-8 absolute (rounding eps*|f|/h plus truncation h^2*f'''), so
    entries below the floor are checked absolutely at floor*tol instead
    of relatively; larger entries get the full relative comparison.
    """
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(make_loss, params, rng=None, samples=None, h=1e-5,
                    tol=1e-4, floor=1e-3):
    """Compare analytic grads of make_loss() against central differences.

    make_loss builds the graph fresh on each call and returns the scalar
    loss tensor. params is a list of leaf tensors with requires_grad.
    samples limits FD to that many random coordinates per tensor.
    """
    for p in params:
        p.grad = None
    loss = make_loss()
    loss.backward()
    worst = 0.0
    for p in params:
        assert p.grad is not None, "missing grad after backward"
        if samples is None or p.data.size <= samples:
            idx = None
        else:
            assert rng is not None
            idx = rng.choice(p.data.size, size=samples, replace=False)
        fd = numeric_grad(lambda: make_loss().data, p, indices=idx, h=h)
        if idx is None:
            err = max_rel_err(p.grad, fd, floor)
        else:
            err = max_rel_err(p.grad.reshape(-1)[idx], fd.reshape(-1)[idx], floor)
        worst = max(worst, err)
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e}"
    return worst


def _hash01(ix, iy, salt):
    """Deterministic lattice hash to [0, 1); uint64 wraparound intended."""
    salted = (salt * 0x165667B19E3779F9) % (1 << 64)
    h = (ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ np.uint64(salted))
    h ^= h >> np.uint64(29)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(32)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise_2d(x, y, salt):
    """Bilinear lattice noise at continuous 2-D points, roughly in [-0.5, 0.5]."""
    ix, iy = np.floor(x), np.floor(y)
    fx, fy = x - ix, y - iy
    v00 = _hash01(ix, iy, salt)
    v10 = _hash01(ix + 1, iy, salt)
    v01 = _hash01(ix, iy + 1, salt)
    v11 = _hash01(ix + 1, iy + 1, salt)
    top = v00 * (1 - fx) + v10 * fx
    bot = v01 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy - 0.5


def plane_texture(x, y, salt):
    """Multi-octave smooth texture over plane coordinates in meters."""
    out = np.zeros_like(x)
    for octave, (freq, amp) in enumerate([(2.5, 0.6), (5.0, 0.8), (10.0, 1.0)]):
        out += amp * value_noise_2d(x * freq, y * freq, salt * 7919 + octave)
    return out


def feature_plane_pair(k, depth, tx, channels, seed):
    """Analytic feature maps of a fronto-parallel plane seen from two
    cameras separated by a pure x-translation of tx meters.

    World frame = reference camera frame; the plane is z = depth.
    Returns float arrays shaped (1, channels, H, W) with zero model error.
    """
    ys, xs = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
    px = (xs - k.cx) / k.fx * depth
    py = (ys - k.cy) / k.fy * depth
    ref = np.stack([plane_texture(px, py, seed * 1000 + c)
                    for c in range(channels)])
    meas = np.stack([plane_texture(px + tx, py, seed * 1000 + c)
                     for c in range(channels)])
    return ref[None], meas[None]
