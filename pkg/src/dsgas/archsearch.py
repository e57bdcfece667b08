"""Architecture augmentations and the architecture-level discrimination loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .disentangle import row_similarity
from .numkernel import Tensor
from .supernet import ForwardContext, SuperNet

AUG_KINDS = ("alpha", "weight", "embed", "compose")
READINGS = ("architecture", "graph", "literal")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ArchAugSpec:
    kind: str = "compose"
    r1: float = 1.1
    r2: float = 0.1
    r3: float = 0.05

    def __post_init__(self):
        if self.kind not in AUG_KINDS:
            raise ValueError(f"unknown architecture augmentation {self.kind!r}")
        if self.r1 < 1:
            raise ValueError(f"r1 must be >= 1, got {self.r1}")
        if not (0 <= self.r2 < 1 and 0 <= self.r3 < 1):
            raise ValueError("r2 and r3 are fractions in [0, 1)")


def augment_architecture(supernet: SuperNet, spec: ArchAugSpec, seed) -> ForwardContext:
    """Sample one augmented view T_f of the super-network as a forward context."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    kind = spec.kind
    if kind == "compose":
        kind = AUG_KINDS[int(rng.integers(3))]
    if kind == "alpha":
        return ForwardContext(temperature=float(rng.uniform(1.0 / spec.r1, spec.r1)))
    if kind == "weight":
        noise = {}
        for name, w in supernet.weight_params().items():
            sigma = float(w.data.std())
            mask = rng.random(w.shape) < spec.r2
            if sigma > 0 and mask.any():
                noise[name] = np.where(mask, rng.normal(0.0, sigma, w.shape), 0.0)
        return ForwardContext(weight_noise=noise)
    return ForwardContext(dropout_rate=spec.r3, rng=rng)


def arch_discrimination_probs(z: Sequence[Tensor], z_aug: Sequence[Tensor],
                              reading: str = "architecture") -> Tensor:
    """N × K probabilities that architecture k recognises its own augmented view.

    architecture: softmax over the K augmented views of graph i, evaluated at k.
    graph:        softmax over the N graphs' augmented views under architecture k.
    literal:      softmax over k of the matched similarities φ(z_ik, z'_ik); rows
                  sum to one, so the search loss built on it is constant.
    """
    K = len(z)
    if len(z_aug) != K or any(a.shape != b.shape for a, b in zip(z, z_aug)):
        raise ValueError("clean and augmented embeddings must have identical shapes")
    if reading not in READINGS:
        raise ValueError(f"unknown discrimination reading {reading!r}")
    if reading == "literal":
        matched = nk.concat([nk.reshape(row_similarity(z[k], z_aug[k]), (-1, 1)) for k in range(K)], 1)
        return nk.softmax_rows(matched)
    cols = []
    scale = 1.0 / np.sqrt(z[0].shape[1])
    for k in range(K):
        if reading == "architecture":
            logits = nk.concat([nk.reshape(row_similarity(z[k], z_aug[j]), (-1, 1))
                                for j in range(K)], 1)
            cols.append(nk.reshape(nk.log_softmax_rows(logits)[:, k], (-1, 1)))
        else:
            logits = (z[k] @ z_aug[k].T) * scale
            n = logits.shape[0]
            diag = nk.sum(nk.log_softmax_rows(logits) * Tensor(np.eye(n)), axis=1)
            cols.append(nk.reshape(diag, (-1, 1)))
    return nk.exp(nk.concat(cols, 1))


def contrastive_search_loss(probs: Tensor) -> Tensor:
    """L_α = Σ_i -log((1/K) Σ_k probs[i, k]) with a 1e-12 floor inside the log."""
    avg = nk.mean(probs, axis=1)
    floor = Tensor(np.full(avg.shape, PROB_FLOOR))
    return -nk.sum(nk.log(nk.maximum([avg, floor])))


def alpha_similarity(supernet: SuperNet) -> float:
    """Mean pairwise cosine similarity between the factors' flattened α."""
    K = supernet.num_factors
    mats = [supernet.alpha_matrix(k) for k in range(K)]
    if K < 2:
        return 1.0
    sims = [float(mats[a] @ mats[b] / (np.linalg.norm(mats[a]) * np.linalg.norm(mats[b])))
            for a in range(K) for b in range(a + 1, K)]
    return float(np.mean(sims))
