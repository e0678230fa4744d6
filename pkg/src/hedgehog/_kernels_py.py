"""Pure-numpy implementations of the hot kernels.

Same call signatures as the compiled extension ``hedgehog._kernels``; the
active backend is chosen in :mod:`hedgehog.kernels`.  Everything here is
vectorized over the query points, with python-level loops only over polygon
edges / chain steps.
"""

import numpy as np

BACKEND = "python"


def winding_number(vertices, pts):
    """Winding numbers of a closed polyline around each query point.

    Crossing-counting form (no angle accumulation): an upward crossing of the
    horizontal through the point with the point strictly left adds +1, a
    downward crossing with the point strictly right adds -1.

    Parameters
    ----------
    vertices : complex array (n,), polygon in cyclic order (not repeated).
    pts : complex array (m,).

    Returns
    -------
    int64 array (m,).
    """
    vertices = np.asarray(vertices, dtype=complex)
    pts = np.asarray(pts, dtype=complex)
    x, y = pts.real, pts.imag
    wn = np.zeros(pts.shape, dtype=np.int64)
    vx, vy = vertices.real, vertices.imag
    n = len(vertices)
    for i in range(n):
        x0, y0 = vx[i], vy[i]
        x1, y1 = vx[(i + 1) % n], vy[(i + 1) % n]
        # cross > 0 <=> point strictly left of directed edge
        cross = (x1 - x0) * (y - y0) - (x - x0) * (y1 - y0)
        up = (y0 <= y) & (y1 > y) & (cross > 0)
        dn = (y1 <= y) & (y0 > y) & (cross < 0)
        wn += up.astype(np.int64) - dn.astype(np.int64)
    return wn


def segment_distance(vertices, pts, closed=True):
    """Distance from each query point to a polyline (as segments, not vertices)."""
    vertices = np.asarray(vertices, dtype=complex)
    pts = np.asarray(pts, dtype=complex).ravel()
    n = len(vertices)
    m = n if closed else n - 1
    best = np.full(pts.shape, np.inf)
    for i in range(m):
        a = vertices[i]
        b = vertices[(i + 1) % n]
        ab = b - a
        denom = abs(ab) ** 2
        if denom == 0.0:
            d = np.abs(pts - a)
        else:
            t = np.clip(((pts - a) * np.conj(ab)).real / denom, 0.0, 1.0)
            d = np.abs(pts - (a + t * ab))
        np.minimum(best, d, out=best)
    return best


def periodic_series(coeffs, z):
    """Evaluate sum_{k>=1} coeffs[k-1] * exp(2*pi*i*k*z) by Horner in E."""
    coeffs = np.asarray(coeffs, dtype=complex)
    z = np.asarray(z, dtype=complex)
    E = np.exp(2j * np.pi * z)
    acc = np.zeros(z.shape, dtype=complex)
    for c in coeffs[::-1]:
        acc = (acc + c) * E
    return acc


def power_series(coeffs, w):
    """Evaluate sum_{k>=1} coeffs[k-1] * w**k by Horner."""
    coeffs = np.asarray(coeffs, dtype=complex)
    w = np.asarray(w, dtype=complex)
    acc = np.zeros(w.shape, dtype=complex)
    for c in coeffs[::-1]:
        acc = (acc + c) * w
    return acc


def zipper_forward(z0, z1, bs, cs, pts, with_derivative=False):
    """Push points through the zipper chain: initial sqrt map + slit steps.

    Stops before the closing Mobius/square (handled by the caller, cheap).
    Returns (w, dw) where dw is d(chain)/dz, or (w, None).
    """
    pts = np.asarray(pts, dtype=complex)
    w = 1j * np.sqrt((pts - z1) / (pts - z0))
    d = None
    if with_derivative:
        d = w * 0.5 * (1.0 / (pts - z1) - 1.0 / (pts - z0))
    for b, c in zip(bs, cs):
        if np.isfinite(b):
            q = 1.0 / (1.0 - w / b)
            if with_derivative:
                d = d * q * q
            w = w * q
        if c != 0.0:
            cw2 = (c / w) ** 2
            r = np.sqrt(1.0 + cw2)
            if with_derivative:
                d = d * (r - cw2 / r)
            w = w * r
    return w, d


def zipper_inverse(z0, z1, bs, cs, w):
    """Pull points back through the zipper chain (inverse of zipper_forward)."""
    w = np.asarray(w, dtype=complex).copy()
    for b, c in zip(bs[::-1], cs[::-1]):
        if c != 0.0:
            w = np.sqrt(w - c) * np.sqrt(w + c)
        if np.isfinite(b):
            w = w / (1.0 + w / b)
    rho = -(w ** 2)
    return (z1 - rho * z0) / (1.0 - rho)
