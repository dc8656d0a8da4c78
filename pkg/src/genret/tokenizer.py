"""Multi-view video tokenizer: view encoders, residual quantization, reconstruction.

Each video feature f_v is projected into N_v latent views z_i; each view
is discretized into a length-M code sequence over shared codebooks by
picking, layer by layer, the entry with maximum cosine similarity to the
current residual. A per-view reconstruction decoder regularizes the
quantization with a cosine-distance loss.

Code selection runs in float64 so every residual identity
(r(1) = z, r(m+1) = r(m) - e(m), z_hat = sum of selected entries)
holds exactly; training losses flow gradients through torch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64

# Residuals below this norm cannot support a cosine argmax; the code
# degenerates to 0 for the remaining layers and the trace is flagged.
DEGENERATE_RESIDUAL_NORM = 1e-12

SemanticId = tuple[int, ...]


class ViewEncoder(nn.Module):
    """Two-layer feed-forward map from feature space to latent space."""

    def __init__(self, d_f: int, d_z: int, hidden: int):
        super().__init__()
        self.lin1 = nn.Linear(d_f, hidden, dtype=DTYPE)
        self.lin2 = nn.Linear(hidden, d_z, dtype=DTYPE)

    def forward(self, x):
        return self.lin2(torch.relu(self.lin1(x)))


class ViewDecoder(nn.Module):
    """Two-layer feed-forward map from latent space back to feature space."""

    def __init__(self, d_z: int, d_f: int, hidden: int):
        super().__init__()
        self.lin1 = nn.Linear(d_z, hidden, dtype=DTYPE)
        self.lin2 = nn.Linear(hidden, d_f, dtype=DTYPE)

    def forward(self, z):
        return self.lin2(torch.relu(self.lin1(z)))


class SharedCodebook(nn.Module):
    """M layers of K x d_z learnable embeddings.

    A single instance is referenced by both the tokenizer and the
    retriever; that sharing is what lets retrieval gradients reshape
    quantization boundaries.
    """

    def __init__(self, m_layers: int, k: int, d_z: int):
        super().__init__()
        self.m_layers = m_layers
        self.k = k
        self.d_z = d_z
        self.layers = nn.ParameterList(
            nn.Parameter(torch.zeros(k, d_z, dtype=DTYPE)) for _ in range(m_layers)
        )

    def layer_arrays(self) -> list[np.ndarray]:
        return [p.detach().cpu().numpy() for p in self.layers]

    def set_layer(self, m: int, values: np.ndarray) -> None:
        with torch.no_grad():
            self.layers[m].copy_(torch.as_tensor(values, dtype=DTYPE))

    def reseed_collapsed(self, rng: np.random.Generator, floor: float = 1e-8) -> int:
        """Replace zero-norm entries with random unit vectors at layer scale."""
        fixed = 0
        with torch.no_grad():
            for layer in self.layers:
                norms = layer.norm(dim=1)
                dead = norms < floor
                if dead.any():
                    scale = float(norms[~dead].mean()) if (~dead).any() else 1.0
                    for idx in torch.nonzero(dead).flatten().tolist():
                        v = rng.standard_normal(self.d_z)
                        v = v / np.linalg.norm(v) * max(scale, floor)
                        layer[idx] = torch.as_tensor(v, dtype=DTYPE)
                        fixed += 1
        return fixed


@dataclass
class QuantizationTrace:
    """Layer-by-layer record of one residual quantization.

    residuals[m] is the residual *before* layer m's subtraction
    (residuals[0] == z); quantized is the running sum of selected
    entries. All float64 so the telescoping identities are exact.
    """

    codes: np.ndarray  # (M,) int64
    residuals: np.ndarray  # (M, d_z) float64
    quantized: np.ndarray  # (d_z,) float64
    degenerate: bool


def select_codes(
    z: np.ndarray, layers: list[np.ndarray], upto: int | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Greedy cosine code selection for a batch of latents.

    Returns (codes (n, m), residuals (n, m, d_z), quantized (n, d_z),
    degenerate (n,) bool). Ties in the cosine argmax resolve to the
    lowest entry index; residual norms below DEGENERATE_RESIDUAL_NORM
    force code 0 for that and all later layers.
    """
    z = np.ascontiguousarray(z, dtype=np.float64)
    n, d_z = z.shape
    m = len(layers) if upto is None else upto
    codes = np.zeros((n, m), dtype=np.int64)
    residuals = np.empty((n, m, d_z), dtype=np.float64)
    degenerate = np.zeros(n, dtype=bool)
    r = z.copy()
    acc = np.zeros_like(z)
    for layer_idx in range(m):
        entries = np.asarray(layers[layer_idx], dtype=np.float64)
        residuals[:, layer_idx, :] = r
        r_norm = np.linalg.norm(r, axis=1)
        e_norm = np.maximum(np.linalg.norm(entries, axis=1), DEGENERATE_RESIDUAL_NORM)
        sims = (r @ entries.T) / (np.maximum(r_norm, DEGENERATE_RESIDUAL_NORM)[:, None] * e_norm)
        picked = sims.argmax(axis=1)  # first max on ties
        dead = r_norm < DEGENERATE_RESIDUAL_NORM
        picked[dead] = 0
        degenerate |= dead
        codes[:, layer_idx] = picked
        chosen = entries[picked]
        acc = acc + chosen
        r = r - chosen
    return codes, residuals, acc, degenerate


def quantize(z: np.ndarray, layers: list[np.ndarray]) -> tuple[SemanticId, QuantizationTrace]:
    """Quantize a single latent vector into a semantic ID plus its trace."""
    z = np.asarray(z, dtype=np.float64)
    codes, residuals, acc, degenerate = select_codes(z[None, :], layers)
    trace = QuantizationTrace(
        codes=codes[0],
        residuals=residuals[0],
        quantized=acc[0],
        degenerate=bool(degenerate[0]),
    )
    return tuple(int(c) for c in codes[0]), trace


def encode_views(f_v: torch.Tensor, encoders: nn.ModuleList) -> torch.Tensor:
    """Apply all view encoders to a batch of features -> (n, N_v, d_z)."""
    if f_v.dim() == 1:
        f_v = f_v.unsqueeze(0)
    return torch.stack([enc(f_v) for enc in encoders], dim=1)


def straight_through(z: torch.Tensor, z_hat: torch.Tensor) -> torch.Tensor:
    """Forward z_hat, backward as if it were z."""
    return z + (z_hat - z).detach()


def gather_quantized(codebook: SharedCodebook, codes: torch.Tensor, upto: int) -> torch.Tensor:
    """Differentiable sum of selected entries for layers [0, upto)."""
    z_hat = codebook.layers[0][codes[..., 0]]
    for m in range(1, upto):
        z_hat = z_hat + codebook.layers[m][codes[..., m]]
    return z_hat


def rq_loss(z_hat: torch.Tensor, z: torch.Tensor, beta: float) -> torch.Tensor:
    """Quantization objective: ||z_hat - sg[z]||^2 + beta * ||sg[z_hat] - z||^2.

    The first term only moves codebook entries, the second only the
    encoder that produced z. Mean over any leading batch dims.
    """
    codebook_term = ((z_hat - z.detach()) ** 2).sum(dim=-1)
    commitment_term = ((z_hat.detach() - z) ** 2).sum(dim=-1)
    return (codebook_term + beta * commitment_term).mean()


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - cos(a, b) along the last dim; a zero-norm operand yields exactly 1."""
    a_norm = a.norm(dim=-1)
    b_norm = b.norm(dim=-1)
    dead = (a_norm < DEGENERATE_RESIDUAL_NORM) | (b_norm < DEGENERATE_RESIDUAL_NORM)
    denom = torch.clamp(a_norm * b_norm, min=DEGENERATE_RESIDUAL_NORM)
    cos = (a * b).sum(dim=-1) / denom
    return torch.where(dead.detach(), torch.ones_like(cos), 1.0 - cos)


def reconstruct(
    z_hat_views: torch.Tensor, decoders: nn.ModuleList, f_v: torch.Tensor | None = None
):
    """Decode quantized views and mean-pool into a reconstructed feature.

    z_hat_views: (n, N_v, d_z). Returns f_tilde (n, d_f), or
    (f_tilde, rec_loss) when the target f_v is given, with
    rec_loss = mean(1 - cos(f_v, f_tilde)) in [0, 2].
    """
    per_view = torch.stack(
        [dec(z_hat_views[:, i, :]) for i, dec in enumerate(decoders)], dim=1
    )
    f_tilde = per_view.mean(dim=1)
    if f_v is None:
        return f_tilde
    return f_tilde, cosine_distance(f_v, f_tilde).mean()


def tokenize_corpus(videos, model, batch_size: int = 1024) -> dict[int, list[SemanticId]]:
    """Assign each video its N_v semantic IDs under the current model.

    Deterministic given frozen parameters. Duplicate IDs within one
    video's set are kept; the index collapses them later.
    """
    if videos.dimension != model.d_f:
        raise ValueError(
            f"store dimension {videos.dimension} != model dimension {model.d_f}"
        )
    layers = model.codebook.layer_arrays()
    out: dict[int, list[SemanticId]] = {}
    n_views = len(model.encoders)
    with torch.no_grad():
        for start in range(0, len(videos), batch_size):
            feats = torch.as_tensor(
                videos.features[start : start + batch_size], dtype=DTYPE
            )
            z = encode_views(feats, model.encoders).cpu().numpy()  # (b, N_v, d_z)
            flat = z.reshape(-1, z.shape[-1])
            codes, _, _, _ = select_codes(flat, layers)
            codes = codes.reshape(z.shape[0], n_views, -1)
            for row in range(z.shape[0]):
                vid = int(videos.ids[start + row])
                out[vid] = [tuple(int(c) for c in codes[row, v]) for v in range(n_views)]
    return out


def dump_semantic_ids(id_sets: dict[int, list[SemanticId]], path) -> None:
    """Write the text dump: one `video_id<TAB>view_id<TAB>c1,c2,...,cM` line per view."""
    with open(path, "w", encoding="utf-8") as fh:
        for vid in sorted(id_sets):
            for view, sid in enumerate(id_sets[vid]):
                fh.write(f"{vid}\t{view}\t{','.join(str(c) for c in sid)}\n")
