"""Hot pairwise-pooling kernels with numba and pure-numpy implementations.

Inputs are batches of (already encoded, optionally unit-normalized) image
column stacks (n_img, c, n_pix) and audio vectors (n_aud, c). The forward
kernel fuses the per-pair response map with its sigmoid-thresholded spatial
pooling; the backward kernel propagates a gradient w.r.t. the pooled score
matrix down to both embedding stacks.
"""
from __future__ import annotations

import numpy as np

from .backend import NUMBA_AVAILABLE, USE_NUMBA


def _sigmoid_arr(z):
    t = np.exp(-np.abs(z))
    return np.where(z >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))


def _pooled_similarity_numpy(vn, an, epsilon, beta):
    alpha = np.einsum("icp,jc->ijp", vn, an)
    w = _sigmoid_arr((alpha - epsilon) / beta)
    return (w * alpha).sum(axis=2) / w.sum(axis=2)


def _pooled_similarity_backward_numpy(vn, an, epsilon, beta, grad_s, detach_weights):
    alpha = np.einsum("icp,jc->ijp", vn, an)
    w = _sigmoid_arr((alpha - epsilon) / beta)
    den = w.sum(axis=2)
    dalpha = w / den[:, :, None]
    if not detach_weights:
        s = (w * alpha).sum(axis=2) / den
        wprime = w * (1.0 - w) / beta
        dalpha = dalpha + wprime * (alpha - s[:, :, None]) / den[:, :, None]
    dalpha *= grad_s[:, :, None]
    dvn = np.einsum("ijp,jc->icp", dalpha, an)
    dan = np.einsum("ijp,icp->jc", dalpha, vn)
    return dvn, dan


if NUMBA_AVAILABLE:
    from numba import njit

    @njit(cache=True)
    def _sigmoid64(z):
        if z >= 0.0:
            return 1.0 / (1.0 + np.exp(-z))
        e = np.exp(z)
        return e / (1.0 + e)

    @njit(cache=True)
    def _pooled_similarity_numba(vn, an, epsilon, beta):
        n_img, c, n_pix = vn.shape
        n_aud = an.shape[0]
        s = np.empty((n_img, n_aud), dtype=np.float64)
        for i in range(n_img):
            for j in range(n_aud):
                num = 0.0
                den = 0.0
                for p in range(n_pix):
                    a = 0.0
                    for ch in range(c):
                        a += vn[i, ch, p] * an[j, ch]
                    w = _sigmoid64((a - epsilon) / beta)
                    num += w * a
                    den += w
                s[i, j] = num / den
        return s

    @njit(cache=True)
    def _pooled_similarity_backward_numba(vn, an, epsilon, beta, grad_s, detach_weights):
        n_img, c, n_pix = vn.shape
        n_aud = an.shape[0]
        dvn = np.zeros_like(vn)
        dan = np.zeros_like(an)
        for i in range(n_img):
            for j in range(n_aud):
                g = grad_s[i, j]
                if g == 0.0:
                    continue
                num = 0.0
                den = 0.0
                for p in range(n_pix):
                    a = 0.0
                    for ch in range(c):
                        a += vn[i, ch, p] * an[j, ch]
                    w = _sigmoid64((a - epsilon) / beta)
                    num += w * a
                    den += w
                s = num / den
                for p in range(n_pix):
                    a = 0.0
                    for ch in range(c):
                        a += vn[i, ch, p] * an[j, ch]
                    w = _sigmoid64((a - epsilon) / beta)
                    d = w / den
                    if not detach_weights:
                        d += w * (1.0 - w) / beta * (a - s) / den
                    d *= g
                    for ch in range(c):
                        dvn[i, ch, p] += d * an[j, ch]
                        dan[j, ch] += d * vn[i, ch, p]
        return dvn, dan


def _pick(use_numba):
    if use_numba is None:
        return USE_NUMBA
    return bool(use_numba) and NUMBA_AVAILABLE


def pooled_similarity(vn, an, epsilon, beta, use_numba=None):
    """Pairwise pooled scores: entry (i, j) pools the response of stack i to vector j."""
    vn = np.ascontiguousarray(vn, dtype=np.float64)
    an = np.ascontiguousarray(an, dtype=np.float64)
    if _pick(use_numba):
        return _pooled_similarity_numba(vn, an, float(epsilon), float(beta))
    return _pooled_similarity_numpy(vn, an, float(epsilon), float(beta))


def pooled_similarity_backward(vn, an, epsilon, beta, grad_s, detach_weights=False,
                               use_numba=None):
    """Backward pass of pooled_similarity: returns (d/d vn, d/d an)."""
    vn = np.ascontiguousarray(vn, dtype=np.float64)
    an = np.ascontiguousarray(an, dtype=np.float64)
    grad_s = np.ascontiguousarray(grad_s, dtype=np.float64)
    if _pick(use_numba):
        return _pooled_similarity_backward_numba(
            vn, an, float(epsilon), float(beta), grad_s, bool(detach_weights))
    return _pooled_similarity_backward_numpy(
        vn, an, float(epsilon), float(beta), grad_s, bool(detach_weights))
