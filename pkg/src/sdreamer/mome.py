"""Patch embedding and the mixture-of-modality-experts layer stack.

Every pathway at a given layer reuses the same attention weights and layer
norms; only the feed-forward expert differs, chosen by a static routing table.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

EEG, EMG, MIX = "eeg", "emg", "mix"
PATHWAYS = (EEG, EMG, MIX)
MODALITIES = (EEG, EMG)

# Route value for the early mix layers: first half through FFN_eeg, second half
# through FFN_emg, then re-concatenated.
SPLIT = "split"


class RoutingError(KeyError):
    pass


class Module:
    """Container that yields its parameters in a stable, named order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, dict):
                for sub_key, sub in value.items():
                    if isinstance(sub, Module):
                        yield from sub.named_parameters(f"{name}.{sub_key}.")
                    elif isinstance(sub, Tensor) and sub.requires_grad:
                        yield f"{name}.{sub_key}", sub

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    # resample outside two standard deviations
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"model dim {dim} is not divisible by head count {heads}")
        self.heads = heads
        self.dim = dim
        for proj in ("q", "k", "v", "o"):
            setattr(self, f"w_{proj}", param(trunc_normal(rng, (dim, dim))))
            setattr(self, f"b_{proj}", param(np.zeros(dim)))

    def __call__(self, x: Tensor) -> Tensor:
        """Scaled dot-product attention over the token axis of ``(..., N, D)``."""
        *lead, n, d = x.shape
        h = self.heads
        dk = d // h

        def heads_first(t: Tensor) -> Tensor:
            t = T.reshape(t, tuple(lead) + (n, h, dk))
            return T.swapaxes(t, -2, -3)

        q = heads_first(T.linear(x, self.w_q, self.b_q) * (1.0 / np.sqrt(dk)))
        k = heads_first(T.linear(x, self.w_k, self.b_k))
        v = heads_first(T.linear(x, self.w_v, self.b_v))
        scores = T.matmul(q, T.swapaxes(k, -1, -2))
        attn = T.softmax(scores, axis=-1)
        ctx = T.swapaxes(T.matmul(attn, v), -2, -3)
        ctx = T.reshape(ctx, tuple(lead) + (n, d))
        return T.linear(ctx, self.w_o, self.b_o)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, activation: str = "gelu"):
        if activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.w_in = param(trunc_normal(rng, (dim, hidden)))
        self.b_in = param(np.zeros(hidden))
        self.w_out = param(trunc_normal(rng, (hidden, dim)))
        self.b_out = param(np.zeros(dim))
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        hidden = T.linear(x, self.w_in, self.b_in)
        hidden = T.gelu(hidden) if self.activation == "gelu" else T.relu(hidden)
        return T.linear(hidden, self.w_out, self.b_out)


@dataclass(frozen=True)
class RoutingTable:
    """Static map (pathway, layer) -> expert, layers numbered from 1.

    ``mix_start_layer`` is the first layer whose mix pathway uses FFN_mix;
    ``None`` means the stack has no mix pathway at all.
    """

    n_layers: int
    mix_start_layer: int | None

    def __post_init__(self):
        if self.mix_start_layer is not None and not 1 <= self.mix_start_layer <= self.n_layers:
            raise ValueError(
                f"mix_start_layer {self.mix_start_layer} outside 1..{self.n_layers}"
            )

    @property
    def pathways(self) -> tuple[str, ...]:
        return PATHWAYS if self.mix_start_layer is not None else MODALITIES

    def domain(self) -> list[tuple[str, int]]:
        return [(m, layer) for m in self.pathways for layer in range(1, self.n_layers + 1)]

    def route(self, pathway: str, layer: int) -> str:
        if pathway not in self.pathways or not 1 <= layer <= self.n_layers:
            raise RoutingError(f"no route for pathway {pathway!r} at layer {layer}")
        if pathway != MIX:
            return pathway
        return MIX if layer >= self.mix_start_layer else SPLIT

    def experts_at(self, layer: int) -> tuple[str, ...]:
        needed = {EEG, EMG}
        if self.mix_start_layer is not None and layer >= self.mix_start_layer:
            needed.add(MIX)
        return tuple(e for e in PATHWAYS if e in needed)


class MoMELayer(Module):
    def __init__(
        self,
        dim: int,
        heads: int,
        ffn_dim: int,
        experts: tuple[str, ...],
        rng: np.random.Generator,
        activation: str = "gelu",
    ):
        self.ln_attn = LayerNorm(dim)
        self.msa = MultiHeadAttention(dim, heads, rng)
        self.ln_ffn = LayerNorm(dim)
        self.experts = {name: FeedForward(dim, ffn_dim, rng, activation) for name in experts}

    def expert_forward(self, x: Tensor, route: str, split_at: int | None = None) -> Tensor:
        """FFN sub-step with its residual: ``expert(LN(x)) + x``."""
        if route == SPLIT:
            n = x.shape[-2]
            cut = n // 2 if split_at is None else split_at
            eeg_part, emg_part = T.split(x, [cut, n - cut], axis=-2)
            return T.concat(
                [self.expert_forward(eeg_part, EEG), self.expert_forward(emg_part, EMG)], axis=-2
            )
        if route not in self.experts:
            raise RoutingError(f"expert {route!r} not present at this layer")
        return self.experts[route](self.ln_ffn(x)) + x

    def __call__(
        self,
        tokens: Tensor,
        route: str,
        split_at: int | None = None,
        dropout: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        attended = self.msa(self.ln_attn(tokens))
        if dropout > 0.0 and rng is not None:
            attended = T.dropout(attended, dropout, rng)
        inter = attended + tokens
        return self.expert_forward(inter, route, split_at)


class MoMEStack(Module):
    """``n_layers`` MoME layers sharing one routing table."""

    def __init__(
        self,
        n_layers: int,
        mix_start_layer: int | None,
        dim: int,
        heads: int,
        ffn_dim: int,
        rng: np.random.Generator,
        activation: str = "gelu",
    ):
        self.routing = RoutingTable(n_layers, mix_start_layer)
        self.layers = {
            str(i): MoMELayer(dim, heads, ffn_dim, self.routing.experts_at(i), rng, activation)
            for i in range(1, n_layers + 1)
        }

    def layer(self, index: int) -> MoMELayer:
        return self.layers[str(index)]

    def layer_forward(self, tokens: Tensor, pathway: str, index: int, split_at: int | None = None, **kw) -> Tensor:
        route = self.routing.route(pathway, index)
        return self.layer(index)(tokens, route, split_at, **kw)

    def __call__(self, tokens: Tensor, pathway: str, split_at: int | None = None, **kw) -> Tensor:
        for index in range(1, self.routing.n_layers + 1):
            tokens = self.layer_forward(tokens, pathway, index, split_at, **kw)
        return tokens


class PatchEmbedding(Module):
    """Per-modality patch projection, CLS token and attribute encodings."""

    def __init__(self, patch_width: int, n_patches: int, dim: int, rng: np.random.Generator):
        self.patch_width = patch_width
        self.n_patches = n_patches
        self.proj = param(trunc_normal(rng, (patch_width, dim)))
        self.cls = param(trunc_normal(rng, (dim,)))
        self.pos = param(trunc_normal(rng, (n_patches + 1, dim)))
        self.mod = param(trunc_normal(rng, (dim,)))

    def __call__(self, patches, use_pos: bool = True, use_mod: bool = True) -> Tensor:
        """``patches`` is ``(..., P, W)``; returns ``(..., P + 1, D)``."""
        patches = T.as_tensor(patches)
        if patches.shape[-1] != self.patch_width:
            raise ValueError(
                f"patch width {patches.shape[-1]} does not match projection rows {self.patch_width}"
            )
        if patches.shape[-2] != self.n_patches:
            raise ValueError(f"expected {self.n_patches} patches, got {patches.shape[-2]}")
        lead = patches.shape[:-2]
        tokens = T.matmul(patches, self.proj)
        dim = self.cls.shape[0]
        cls = T.reshape(self.cls, (1,) * len(lead) + (1, dim))
        if lead:
            cls = T.mul(cls, np.ones(lead + (1, 1)))
        out = T.concat([cls, tokens], axis=-2)
        if use_pos:
            out = out + self.pos
        if use_mod:
            out = out + self.mod
        return out


def embed_patches(patches, embedding: PatchEmbedding, use_pos: bool = True, use_mod: bool = True) -> Tensor:
    return embedding(patches, use_pos, use_mod)


def msa_forward(tokens: Tensor, attention: MultiHeadAttention) -> Tensor:
    return attention(tokens)


def pathway_forward(tokens: Tensor, pathway: str, stack: MoMEStack, split_at: int | None = None) -> Tensor:
    return stack(tokens, pathway, split_at)
