"""Finite-difference suite over both search losses on toy instances."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numkernel as nk
from .archsearch import (ArchAugSpec, arch_discrimination_probs, augment_architecture,
                         contrastive_search_loss)
from .disentangle import factor_weighted_loss, infer_factor_probs
from .graphio import FactorSpec, Graph, batch_graphs, default_factor_specs, make_synthetic_factors
from .pretext import PretextTask
from .supernet import SuperNet, SupernetSpec

TOLERANCE = 1e-4
AUG_CYCLE = ("alpha", "weight", "embed")


@dataclass
class CaseResult:
    seed: int
    augmentation: str
    loss_w: nk.GradCheckReport
    loss_alpha: nk.GradCheckReport

    @property
    def max_rel_error(self) -> float:
        return max(self.loss_w.max_rel_error, self.loss_alpha.max_rel_error)


def toy_graphs(seed: int, count: int = 3) -> list[Graph]:
    """Planted-factor graphs with two blocks of 3 to 4 nodes, so at most 8 nodes each."""
    small = [FactorSpec(f.variants, 3, 4, f.level) for f in default_factor_specs()]
    return make_synthetic_factors(count, small, seed=seed).graphs


def search_losses(net: SuperNet, task: PretextTask, graphs: Sequence[Graph], augmentation: str,
                  seed: int, reading: str = "architecture"
                  ) -> tuple[Callable[[], nk.Tensor], Callable[[], nk.Tensor]]:
    """Deterministic closures for L_w and L_α with views and augmentation frozen."""
    K = net.num_factors
    clean = batch_graphs(graphs)
    v1, v2 = task.views(graphs, np.random.default_rng(seed))
    ctx = augment_architecture(net, ArchAugSpec(augmentation), np.random.default_rng(seed))
    dropout_state = ctx.rng.bit_generator.state if ctx.rng is not None else None

    def loss_w() -> nk.Tensor:
        a, b = net.forward(v1).factors, net.forward(v2).factors
        losses = nk.concat([nk.reshape(task.instance_loss(a[k], b[k]), (-1, 1)) for k in range(K)], 1)
        post = infer_factor_probs(net.forward(clean).factors, net.encode_arch(), net.prototypes)
        return factor_weighted_loss(post, losses)

    def loss_alpha() -> nk.Tensor:
        if dropout_state is not None:
            ctx.rng.bit_generator.state = dropout_state  # same masks on every probe
        z, z_aug = net.forward(clean).factors, net.forward(clean, ctx).factors
        return contrastive_search_loss(arch_discrimination_probs(z, z_aug, reading))

    return loss_w, loss_alpha


def check_case(seed: int, graphs: Sequence[Graph] | None = None, num_factors: int = 2,
               hidden: int = 4, num_layers: int = 2, max_coords: int | None = 3) -> CaseResult:
    graphs = toy_graphs(seed) if graphs is None else list(graphs)
    rng = np.random.default_rng(seed)
    spec = SupernetSpec(graphs[0].x.shape[1], hidden, num_layers, num_factors)
    net = SuperNet(spec, seed=seed)
    # spread θ away from uniform so architecture gradients are well above round-off
    for theta in net.theta.values():
        theta.data[...] = rng.standard_normal(theta.shape)
    task = PretextTask.default("graph_contrastive", hidden, seed=seed)
    augmentation = AUG_CYCLE[seed % len(AUG_CYCLE)]
    loss_w, loss_alpha = search_losses(net, task, graphs, augmentation, seed)
    params = list(net.named_tensors().values()) + list(task.params().values())
    pick = np.random.default_rng(seed)
    return CaseResult(seed, augmentation,
                      nk.gradient_check(loss_w, params, max_coords=max_coords, rng=pick),
                      nk.gradient_check(loss_alpha, params, max_coords=max_coords, rng=pick))


def gradcheck_suite(seeds: Sequence[int] = range(10), max_coords: int | None = 3,
                    graphs_for: Callable[[int], Sequence[Graph]] | None = None) -> list[CaseResult]:
    return [check_case(s, None if graphs_for is None else graphs_for(s), max_coords=max_coords)
            for s in seeds]
