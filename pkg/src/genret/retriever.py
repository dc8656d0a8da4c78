"""Generative retriever: autoregressive code prediction over the shared codebooks.

At step m the decoder maps (projected query context, mean embedding of
the already-emitted prefix, step position) to a feature h_m; token
probabilities are a softmax over cosine similarities between h_m and
the layer-m codebook entries, scaled by a learnable temperature. The
cumulative feature h(m) = sum_{l<=m} h_l mirrors the residual-sum
structure on the video side and is what the contrastive loss aligns
with the view latents.
"""

from __future__ import annotations

import torch
from torch import nn

from .tokenizer import DTYPE, SharedCodebook

LOG_CLAMP = 1e-12
TAU_MIN, TAU_MAX = 1e-3, 10.0
_NORM_FLOOR = 1e-12


class QueryDecoder(nn.Module):
    """Minimal causal decoder satisfying the h_m contract.

    h_m = MLP([query_ctx ; mean of prefix code embeddings]) + pos[m].
    An empty prefix contributes a zero vector, so h_1 conditions on the
    query alone. Any sequence decoder with the same signature can be
    swapped in.
    """

    def __init__(self, d_f: int, d_z: int, hidden: int, m_layers: int):
        super().__init__()
        self.d_z = d_z
        self.m_layers = m_layers
        self.query_proj = nn.Linear(d_f, d_z, dtype=DTYPE)
        self.lin1 = nn.Linear(2 * d_z, hidden, dtype=DTYPE)
        self.lin2 = nn.Linear(hidden, d_z, dtype=DTYPE)
        self.pos = nn.Parameter(torch.zeros(m_layers, d_z, dtype=DTYPE))

    def context(self, query_features: torch.Tensor) -> torch.Tensor:
        if query_features.dim() == 1:
            query_features = query_features.unsqueeze(0)
        return self.query_proj(query_features)

    def step(self, ctx: torch.Tensor, prefix_embed: torch.Tensor, step_index: int) -> torch.Tensor:
        x = torch.cat([ctx, prefix_embed], dim=-1)
        return self.lin2(torch.relu(self.lin1(x))) + self.pos[step_index]


def prefix_embedding(
    codebook: SharedCodebook, prefix: torch.Tensor | None, n: int
) -> torch.Tensor:
    """Mean of the shared-codebook embeddings of the prefix codes.

    prefix: (n, l) int64 with l < M, or None/empty for step 1.
    """
    if prefix is None or prefix.numel() == 0:
        return torch.zeros(n, codebook.d_z, dtype=DTYPE)
    length = prefix.shape[1]
    if length >= codebook.m_layers:
        raise ValueError(f"prefix length {length} leaves no step to decode")
    acc = codebook.layers[0][prefix[:, 0]]
    for l in range(1, length):
        acc = acc + codebook.layers[l][prefix[:, l]]
    return acc / length


def decode_step(
    decoder: QueryDecoder,
    codebook: SharedCodebook,
    query_features: torch.Tensor,
    prefix: torch.Tensor | None = None,
) -> torch.Tensor:
    """Decoder output h_m for the step following the given prefix."""
    ctx = decoder.context(query_features)
    step_index = 0 if prefix is None or prefix.numel() == 0 else prefix.shape[1]
    if step_index >= decoder.m_layers:
        raise ValueError(f"prefix length {step_index} leaves no step to decode")
    if prefix is not None and prefix.numel() > 0:
        for l in range(prefix.shape[1]):
            bad = (prefix[:, l] < 0) | (prefix[:, l] >= codebook.k)
            if bool(bad.any()):
                raise ValueError("prefix code out of range")
    return decoder.step(ctx, prefix_embedding(codebook, prefix, ctx.shape[0]), step_index)


def decode_steps(
    decoder: QueryDecoder,
    codebook: SharedCodebook,
    query_features: torch.Tensor,
    target_codes: torch.Tensor,
    upto: int,
) -> torch.Tensor:
    """Teacher-forced h_1..h_upto -> (n, upto, d_z)."""
    ctx = decoder.context(query_features)
    n = ctx.shape[0]
    steps = []
    for m in range(upto):
        prefix = target_codes[:, :m] if m > 0 else None
        steps.append(decoder.step(ctx, prefix_embedding(codebook, prefix, n), m))
    return torch.stack(steps, dim=1)


def cosine_to_entries(h: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """cos(h, e_k) for all entries; (n, K). Zero-norm h rows come out all-zero."""
    h_norm = torch.clamp(h.norm(dim=-1, keepdim=True), min=_NORM_FLOOR)
    e_norm = torch.clamp(entries.norm(dim=-1), min=_NORM_FLOOR)
    return (h @ entries.T) / (h_norm * e_norm)


def code_probs(h: torch.Tensor, entries: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
    """softmax(cos(h, entries) / tau) over the K entries of one layer."""
    squeeze = h.dim() == 1
    if squeeze:
        h = h.unsqueeze(0)
    probs = torch.softmax(cosine_to_entries(h, entries) / tau, dim=-1)
    return probs[0] if squeeze else probs


def code_probs_with_flags(h, entries, tau):
    """code_probs plus a mask of zero-norm inputs (which get the uniform row)."""
    squeeze = h.dim() == 1
    hh = h.unsqueeze(0) if squeeze else h
    flags = hh.norm(dim=-1) < _NORM_FLOOR
    probs = torch.softmax(cosine_to_entries(hh, entries) / tau, dim=-1)
    if squeeze:
        return probs[0], bool(flags[0])
    return probs, flags


def log_code_probs(h: torch.Tensor, entries: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
    """log of code_probs with the argument clamped at LOG_CLAMP (keeps losses finite)."""
    return torch.log(torch.clamp(code_probs(h, entries, tau), min=LOG_CLAMP))


def ce_loss(
    decoder: QueryDecoder,
    codebook: SharedCodebook,
    tau: torch.Tensor,
    query_features: torch.Tensor,
    target_codes: torch.Tensor,
    layer: int,
) -> torch.Tensor:
    """-log P(c_layer | c_<layer, q), teacher forcing, mean over the batch."""
    prefix = target_codes[:, :layer] if layer > 0 else None
    h = decode_step(decoder, codebook, query_features, prefix)
    logp = log_code_probs(h, codebook.layers[layer], tau)
    picked = logp.gather(1, target_codes[:, layer : layer + 1]).squeeze(1)
    return -picked.mean()


def cl_loss(z: torch.Tensor, h: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
    """In-batch contrastive alignment of view latents with cumulative decoder features.

    For query i the positive is its paired latent z_i; negatives are the
    other queries' paired latents. logits[i, j] = cos(z_j, h_i) / tau.
    """
    if z.shape[0] < 2:
        raise ValueError("contrastive loss needs batch size >= 2")
    z_norm = torch.clamp(z.norm(dim=-1), min=_NORM_FLOOR)
    h_norm = torch.clamp(h.norm(dim=-1), min=_NORM_FLOOR)
    cos = (h @ z.T) / (h_norm[:, None] * z_norm[None, :])
    logits = cos / tau
    log_probs = torch.log(torch.clamp(torch.softmax(logits, dim=-1), min=LOG_CLAMP))
    return -log_probs.diagonal().mean()


def video_code_log_probs(
    residual: torch.Tensor, entries: torch.Tensor, tau: torch.Tensor
) -> torch.Tensor:
    """Video-side code distribution: softmax over cos(residual, entries) / tau."""
    return torch.log(torch.clamp(code_probs(residual, entries, tau), min=LOG_CLAMP))


def hc_loss(
    decoder: QueryDecoder,
    codebook: SharedCodebook,
    tau: torch.Tensor,
    query_features: torch.Tensor,
    paired_latents: torch.Tensor,
    target_codes: torch.Tensor,
    current_layer: int,
) -> torch.Tensor:
    """Hierarchical consistency over all layers before current_layer.

    Sums -[log P(c_l | c_<l, q) + log P(c_l | c_<l, v)] for l < current
    layer; the video-conditioned term scores the paired view's layer-l
    residual against the layer-l entries. Requires current_layer >= 1.
    """
    if current_layer < 1:
        raise ValueError("hierarchical consistency needs at least one preceding layer")
    ctx = decoder.context(query_features)
    n = ctx.shape[0]
    total = query_features.new_zeros(())
    residual = paired_latents
    for l in range(current_layer):
        target = target_codes[:, l : l + 1]
        prefix = target_codes[:, :l] if l > 0 else None
        h_l = decoder.step(ctx, prefix_embedding(codebook, prefix, n), l)
        text_logp = log_code_probs(h_l, codebook.layers[l], tau).gather(1, target).squeeze(1)
        video_logp = (
            video_code_log_probs(residual, codebook.layers[l], tau).gather(1, target).squeeze(1)
        )
        total = total - (text_logp + video_logp).mean()
        residual = residual - codebook.layers[l][target_codes[:, l]]
    return total


def clamp_temperature(tau: torch.Tensor) -> None:
    """Keep tau inside [TAU_MIN, TAU_MAX]; call after every optimizer step."""
    with torch.no_grad():
        tau.clamp_(TAU_MIN, TAU_MAX)
