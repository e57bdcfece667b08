"""Factor posterior p(k | G) and the factor-routed weight loss."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor


def similarity(a: Tensor, b: Tensor) -> Tensor:
    """Scaled dot product a·bᵀ/√dim between row sets."""
    return (a @ b.T) * (1.0 / np.sqrt(a.shape[1]))


def row_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Scaled dot product between matching rows of ``a`` and ``b``."""
    return nk.sum(a * b, axis=1) * (1.0 / np.sqrt(a.shape[1]))


def infer_factor_probs(z: Sequence[Tensor], arch_enc: Tensor, prototypes: Tensor,
                       detach: bool = False) -> Tensor:
    """p(k | G_i): average over architectures j of softmax_k φ([z_ij ‖ enc_j], c_k).

    ``z`` holds one N × d tensor per architecture, ``arch_enc`` is K × d and the
    prototypes are K × 2d so they match the concatenation.
    """
    K = len(z)
    d = z[0].shape[1]
    if arch_enc.shape != (K, d) or prototypes.shape != (K, 2 * d):
        raise ValueError(f"shape mismatch: enc {arch_enc.shape}, prototypes {prototypes.shape}, "
                         f"expected ({K}, {d}) and ({K}, {2 * d})")
    scale = 1.0 / np.sqrt(2 * d)
    c_z, c_enc = prototypes[:, :d], prototypes[:, d:]
    total = None
    for j in range(K):
        zj = Tensor(z[j].data) if detach else z[j]
        logits = (zj @ c_z.T + arch_enc[j:j + 1] @ c_enc.T) * scale
        p = nk.softmax_rows(logits)
        total = p if total is None else total + p
    return total * (1.0 / K)


def factor_weighted_loss(posterior: Tensor, per_factor_losses: Tensor) -> Tensor:
    """L_w = (1/N) Σ_i Σ_k p(k|G_i) · l_k(G_i)."""
    if posterior.shape != per_factor_losses.shape:
        raise ValueError(f"posterior {posterior.shape} vs losses {per_factor_losses.shape}")
    if not np.all(np.isfinite(per_factor_losses.data)):
        raise FloatingPointError("non-finite pretext loss")
    return nk.mean(nk.sum(posterior * per_factor_losses, axis=1))


def jensen_gap(posterior: np.ndarray, task_probs: np.ndarray) -> float:
    """(1/N)Σ E_p[-log q] - (1/N)Σ -log E_p[q]; non-negative by Jensen."""
    upper = np.mean(np.sum(posterior * -np.log(task_probs), axis=1))
    lower = np.mean(-np.log(np.sum(posterior * task_probs, axis=1)))
    return float(upper - lower)
