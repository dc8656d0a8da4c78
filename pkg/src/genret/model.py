"""Combined trainable model: view encoders/decoders, shared codebook, retriever.

Parameters are float64 end to end; initialization is drawn from a
numpy generator derived from the run seed, so identically configured
runs are bit-identical.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from . import seeding
from .retriever import QueryDecoder
from .tokenizer import DTYPE, SharedCodebook, ViewDecoder, ViewEncoder


class GenRetModel(nn.Module):
    def __init__(
        self,
        d_f: int,
        n_views: int,
        m_layers: int,
        k: int,
        d_z: int,
        hidden: int,
        tau_init: float,
        seed: int,
    ):
        super().__init__()
        self.d_f = d_f
        self.n_views = n_views
        self.m_layers = m_layers
        self.k = k
        self.d_z = d_z
        self.hidden = hidden
        self.encoders = nn.ModuleList(
            ViewEncoder(d_f, d_z, hidden) for _ in range(n_views)
        )
        self.decoders = nn.ModuleList(
            ViewDecoder(d_z, d_f, hidden) for _ in range(n_views)
        )
        self.codebook = SharedCodebook(m_layers, k, d_z)
        self.retriever = QueryDecoder(d_f, d_z, hidden, m_layers)
        self.tau = nn.Parameter(torch.tensor(float(tau_init), dtype=DTYPE))
        self._init_params(seeding.rng_for(seed, seeding.INIT))

    def _init_params(self, rng: np.random.Generator) -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "tau":
                    continue
                if name.startswith("codebook."):
                    values = rng.normal(0.0, 0.1, size=tuple(p.shape))
                elif name.endswith(".pos"):
                    values = rng.normal(0.0, 0.02, size=tuple(p.shape))
                elif name.endswith(".bias"):
                    values = np.zeros(tuple(p.shape))
                else:  # linear weights
                    bound = 1.0 / np.sqrt(p.shape[1])
                    values = rng.uniform(-bound, bound, size=tuple(p.shape))
                p.copy_(torch.as_tensor(values, dtype=DTYPE))

    def parameter_groups(self) -> list[tuple[str, torch.Tensor]]:
        """Named parameters in construction order (the checkpoint order)."""
        return list(self.named_parameters())

    def freeze_codebook_below(self, layer: int) -> None:
        """Stop gradients into codebook layers [0, layer); unfreeze the rest."""
        for m, p in enumerate(self.codebook.layers):
            p.requires_grad_(m >= layer)
