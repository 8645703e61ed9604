"""Co-expression intensity gene-correlation graph and its graph-conv layer.

Each gene is a node carrying a C-vector. A coordinate counts as *active*
for gene i when it exceeds the gene's threshold (its mean by default).
``p(i|j)`` is the fraction of gene j's active coordinates where gene i is
also active, and the edge intensity is ``I_ij = (p(i|j) + p(j|i)) / 2``.
"""

from __future__ import annotations

from typing import Callable, Union

import numpy as np

from . import numerics as nx
from .nn import Module
from .numerics import Tensor


def activity(F, tau_mode: Union[str, float] = "mean") -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if tau_mode == "mean":
        tau = F.mean(axis=1, keepdims=True)
    elif tau_mode == "median":
        tau = np.median(F, axis=1, keepdims=True)
    elif isinstance(tau_mode, (int, float)) and not isinstance(tau_mode, bool):
        tau = float(tau_mode)
    else:
        raise ValueError(f"unknown tau_mode {tau_mode!r}")
    return F > tau


def coexpression_matrix(F, tau_mode: Union[str, float] = "mean") -> np.ndarray:
    """N x N symmetric intensity matrix with entries in [0, 1]; 0/0 counts as 0."""
    if isinstance(F, Tensor):
        F = F.data
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 1:
        raise ValueError(f"node features must be (N, C) with N >= 1, got {F.shape}")
    act = activity(F, tau_mode).astype(np.float64)
    both = act @ act.T  # |a_i and a_j|
    n_act = act.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(n_act[None, :] > 0, both / n_act[None, :], 0.0)  # p[i, j] = p(i|j)
    return 0.5 * (p + p.T)


def graph_layer(F_x: Tensor, I, W_g: Tensor, alpha: float,
                act: Callable[[Tensor], Tensor] = nx.relu) -> Tensor:
    """``alpha * act(I F W) + (1 - alpha) * F``; ``I`` enters as a constant."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    N, C = F_x.shape
    I = I.detach() if isinstance(I, Tensor) else Tensor(I)
    if I.shape != (N, N) or W_g.shape != (C, C):
        raise nx.ShapeError(f"graph layer: F{F_x.shape} I{I.shape} W{W_g.shape}")
    mid = act(nx.matmul(nx.matmul(I, F_x), W_g))
    return nx.add(nx.mul(mid, alpha), nx.mul(F_x, 1.0 - alpha))


def save_csv(I: np.ndarray, path, genes=None) -> None:
    I = np.asarray(I)
    genes = list(genes) if genes is not None else [f"g{i}" for i in range(I.shape[0])]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("gene," + ",".join(genes) + "\n")
        for g, row in zip(genes, I):
            fh.write(g + "," + ",".join(repr(float(v)) for v in row) + "\n")


class GeneGraph(Module):
    """Graph layer applied at the denoiser bottleneck.

    The bottleneck channels split into N equal groups, one per gene. Each
    group is block-averaged to ``pool x pool`` and flattened into the gene's
    C-vector (``C = channels_per_gene * pool**2``). The layer's correction
    ``F_out - F_x`` is upsampled back and added, so ``alpha = 0`` leaves the
    features untouched.
    """

    def __init__(self, n_genes: int, channels: int, spatial: int, n_features: int,
                 alpha: float, rng: np.random.Generator, activation: str = "relu",
                 tau_mode: Union[str, float] = "mean"):
        if channels % n_genes:
            raise ValueError(f"{channels} bottleneck channels do not split over {n_genes} genes")
        per_gene = channels // n_genes
        pool2 = n_features / per_gene
        pool = int(round(np.sqrt(pool2)))
        if pool * pool * per_gene != n_features or spatial % pool:
            raise ValueError(f"graph_features={n_features} incompatible with {per_gene} channels/gene "
                             f"on a {spatial}px bottleneck")
        self.n_genes, self.per_gene, self.pool, self.spatial = n_genes, per_gene, pool, spatial
        self.alpha = alpha
        self.act = nx.activation(activation)
        self.tau_mode = tau_mode
        self.W_g = nx.parameter(np.eye(n_features) + rng.normal(0, 0.1 / np.sqrt(n_features),
                                                                (n_features, n_features)))

    def node_features(self, x: Tensor) -> Tensor:
        B = x.shape[0]
        pooled = nx.avg_pool(x, self.spatial // self.pool)
        return nx.reshape(pooled, (B, self.n_genes, -1))

    def __call__(self, x: Tensor) -> Tensor:
        if self.alpha == 0.0:
            return x
        B, Ch, S, _ = x.shape
        nodes = self.node_features(x)
        corr = []
        for b in range(B):
            f = nx.getitem(nodes, b)
            I = coexpression_matrix(f.data, self.tau_mode)
            out = graph_layer(f, I, self.W_g, self.alpha, self.act)
            corr.append(nx.sub(out, f))
        c = nx.reshape(nx.stack(corr, axis=0), (B, Ch, self.pool, self.pool))
        return nx.add(x, nx.upsample_nearest(c, S // self.pool))
