"""Epoch and sequence sDREAMER models, pathway-selective inference, checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from . import tensor as T
from .mome import EEG, EMG, MIX, MODALITIES, PATHWAYS, Module, MoMEStack, PatchEmbedding, param, trunc_normal
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SDRM"
CHECKPOINT_VERSION = 1


class PathwayError(ValueError):
    """A requested pathway needs a modality the input does not carry."""


class CheckpointError(ValueError):
    pass


@dataclass
class EpochModelConfig:
    n_layers: int = 4
    mix_start_layer: int = 4
    dim: int = 128
    patch_width: int = 16
    sample_rate_hz: int = 512
    heads: int = 4
    ffn_dim: int = 512
    n_classes: int = 3
    activation: str = "gelu"
    dropout: float = 0.0
    use_pos_encoding: bool = True
    use_mod_encoding: bool = True

    def __post_init__(self):
        if not 1 <= self.mix_start_layer <= self.n_layers:
            raise ValueError(f"mix_start_layer must lie in 1..{self.n_layers}")

    @property
    def n_patches(self) -> int:
        return self.sample_rate_hz // self.patch_width


@dataclass
class SequenceModelConfig:
    epoch_layers: int = 2
    seq_layers: int = 3
    seq_mix_start_layer: int = 3
    K: int = 16
    dim: int = 128
    patch_width: int = 16
    sample_rate_hz: int = 512
    heads: int = 4
    ffn_dim: int = 512
    n_classes: int = 3
    activation: str = "gelu"
    dropout: float = 0.0
    use_pos_encoding: bool = True
    use_mod_encoding: bool = True

    def __post_init__(self):
        if not 1 <= self.seq_mix_start_layer <= self.seq_layers:
            raise ValueError(f"seq_mix_start_layer must lie in 1..{self.seq_layers}")
        if self.K < 1:
            raise ValueError("K must be >= 1")

    @property
    def n_patches(self) -> int:
        return self.sample_rate_hz // self.patch_width


class Head(Module):
    def __init__(self, in_dim: int, n_classes: int, rng: np.random.Generator):
        self.weight = param(trunc_normal(rng, (in_dim, n_classes)))
        self.bias = param(np.zeros(n_classes))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def available_modalities(x: np.ndarray, modality_axis: int) -> set[str]:
    """Modalities whose rows carry no NaN anywhere in the batch."""
    present = set()
    for i, m in enumerate(MODALITIES):
        rows = np.take(x, i, axis=modality_axis)
        if rows.size and not np.isnan(rows).any():
            present.add(m)
    return present


def _check_pathways(pathways: Iterable[str], present: set[str]) -> tuple[str, ...]:
    pathways = tuple(pathways)
    for p in pathways:
        if p not in PATHWAYS:
            raise PathwayError(f"unknown pathway {p!r}")
        need = set(MODALITIES) if p == MIX else {p}
        if not need <= present:
            raise PathwayError(
                f"pathway {p!r} needs {sorted(need)} but the input only carries {sorted(present)}"
            )
    return pathways


class _Model(Module):
    kind = ""

    def forward(self, x, pathways=PATHWAYS, *, return_embeddings=False, rng=None):
        raise NotImplementedError

    def __call__(self, x, pathways=PATHWAYS, **kw):
        return self.forward(x, pathways, **kw)

    def _drop_kw(self, rng):
        rate = self.config.dropout
        return {"dropout": rate, "rng": rng} if rate > 0 and rng is not None else {}


class EpochSDreamer(_Model):
    """One-to-one model over patched epochs ``(B, 2, P, W)``."""

    kind = "epoch"

    def __init__(self, config: EpochModelConfig | None = None, seed: int = 0):
        self.config = cfg = config or EpochModelConfig()
        rng = np.random.default_rng(seed)
        self.embed = {m: PatchEmbedding(cfg.patch_width, cfg.n_patches, cfg.dim, rng) for m in MODALITIES}
        self.stack = MoMEStack(cfg.n_layers, cfg.mix_start_layer, cfg.dim, cfg.heads, cfg.ffn_dim, rng, cfg.activation)
        self.heads = {
            EEG: Head(cfg.dim, cfg.n_classes, rng),
            EMG: Head(cfg.dim, cfg.n_classes, rng),
            MIX: Head(2 * cfg.dim, cfg.n_classes, rng),
        }

    def initial_tokens(self, x: np.ndarray, modality: str) -> Tensor:
        idx = MODALITIES.index(modality)
        cfg = self.config
        return self.embed[modality](x[:, idx], cfg.use_pos_encoding, cfg.use_mod_encoding)

    def forward(self, x, pathways=PATHWAYS, *, return_embeddings=False, rng=None):
        """Per-pathway logits ``(B, n_classes)``; optionally also the head inputs."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != 2:
            raise ValueError(f"expected (B, 2, P, W) patches, got {x.shape}")
        pathways = _check_pathways(pathways, available_modalities(x, 1))
        kw = self._drop_kw(rng)
        tokens = {}
        for m in MODALITIES:
            if m in pathways or MIX in pathways:
                tokens[m] = self.initial_tokens(x, m)
        logits, feats = {}, {}
        for p in pathways:
            if p == MIX:
                n_eeg = tokens[EEG].shape[-2]
                mixed = T.concat([tokens[EEG], tokens[EMG]], axis=-2)
                out = self.stack(mixed, MIX, split_at=n_eeg, **kw)
                feat = T.concat([out[:, 0, :], out[:, n_eeg, :]], axis=-1)
            else:
                out = self.stack(tokens[p], p, **kw)
                feat = out[:, 0, :]
            feats[p] = feat
            logits[p] = self.heads[p](feat)
        return (logits, feats) if return_embeddings else logits


class SequenceSDreamer(_Model):
    """Many-to-many model over sequences ``(B, K, 2, P, W)``."""

    kind = "sequence"

    def __init__(self, config: SequenceModelConfig | None = None, seed: int = 0):
        self.config = cfg = config or SequenceModelConfig()
        rng = np.random.default_rng(seed)
        self.embed = {m: PatchEmbedding(cfg.patch_width, cfg.n_patches, cfg.dim, rng) for m in MODALITIES}
        self.epoch_stack = MoMEStack(cfg.epoch_layers, None, cfg.dim, cfg.heads, cfg.ffn_dim, rng, cfg.activation)
        self.seq_pos = {m: param(trunc_normal(rng, (cfg.K, cfg.dim))) for m in MODALITIES}
        self.seq_stack = MoMEStack(
            cfg.seq_layers, cfg.seq_mix_start_layer, cfg.dim, cfg.heads, cfg.ffn_dim, rng, cfg.activation
        )
        self.heads = {
            EEG: Head(cfg.dim, cfg.n_classes, rng),
            EMG: Head(cfg.dim, cfg.n_classes, rng),
            MIX: Head(2 * cfg.dim, cfg.n_classes, rng),
        }

    def encode(self, x: np.ndarray, modality: str, rng=None) -> Tensor:
        """Per-epoch CLS outputs of the epoch-level stack plus sequence positions: ``(B, K, D)``."""
        if modality not in MODALITIES:
            raise PathwayError(f"the epoch encoder has no {modality!r} pathway")
        cfg = self.config
        b, k = x.shape[:2]
        if k != cfg.K:
            raise ValueError(f"sequence length {k} does not match model K={cfg.K}")
        idx = MODALITIES.index(modality)
        if np.isnan(x[:, :, idx]).any():
            raise PathwayError(f"input carries no {modality} signal")
        tokens = self.embed[modality](x[:, :, idx], cfg.use_pos_encoding, cfg.use_mod_encoding)
        n_tok = tokens.shape[-2]
        tokens = T.reshape(tokens, (b * k, n_tok, cfg.dim))
        out = self.epoch_stack(tokens, modality, **self._drop_kw(rng))
        z0 = T.reshape(out[:, 0, :], (b, k, cfg.dim))
        if cfg.use_pos_encoding:
            z0 = z0 + self.seq_pos[modality]
        return z0

    def sequence_forward(self, z0: dict[str, Tensor], pathways, *, return_embeddings=False, rng=None):
        kw = self._drop_kw(rng)
        logits, feats = {}, {}
        for p in pathways:
            if p == MIX:
                k = z0[EEG].shape[-2]
                out = self.seq_stack(T.concat([z0[EEG], z0[EMG]], axis=-2), MIX, split_at=k, **kw)
                feat = T.concat([out[:, :k, :], out[:, k:, :]], axis=-1)
            else:
                feat = self.seq_stack(z0[p], p, **kw)
            feats[p] = feat
            logits[p] = self.heads[p](feat)
        return (logits, feats) if return_embeddings else logits

    def forward(self, x, pathways=PATHWAYS, *, return_embeddings=False, rng=None):
        """Per-pathway logits ``(B, K, n_classes)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 5 or x.shape[2] != 2:
            raise ValueError(f"expected (B, K, 2, P, W) patches, got {x.shape}")
        pathways = _check_pathways(pathways, available_modalities(x, 2))
        z0 = {
            m: self.encode(x, m, rng)
            for m in MODALITIES
            if m in pathways or MIX in pathways
        }
        return self.sequence_forward(z0, pathways, return_embeddings=return_embeddings, rng=rng)


def build_model(kind: str, config, seed: int = 0) -> EpochSDreamer | SequenceSDreamer:
    if kind == "epoch":
        return EpochSDreamer(config, seed)
    if kind == "sequence":
        return SequenceSDreamer(config, seed)
    raise ValueError(f"unknown model kind {kind!r}")


def config_from_dict(kind: str, values: dict[str, Any]):
    cls = EpochModelConfig if kind == "epoch" else SequenceModelConfig
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown {kind} model fields: {sorted(unknown)}")
    return cls(**values)


# ---------------------------------------------------------------- inference

def choose_pathway(present: set[str], mode: str = "auto") -> str:
    if not present:
        raise PathwayError("input carries no modality")
    if mode == "auto":
        return MIX if present >= set(MODALITIES) else next(iter(present))
    if mode not in PATHWAYS:
        raise PathwayError(f"unknown pathway mode {mode!r}")
    need = set(MODALITIES) if mode == MIX else {mode}
    if not need <= present:
        raise PathwayError(f"pathway {mode!r} needs {sorted(need)}; input carries {sorted(present)}")
    return mode


def softmax_np(z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    s = z / tau
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Prediction:
    pathway: str
    labels: np.ndarray
    probabilities: np.ndarray
    logits: np.ndarray
    embeddings: np.ndarray | None = None


def infer(model, x, mode: str = "auto", batch_size: int = 256, return_embeddings: bool = False) -> Prediction:
    """Predict stages for patched epochs ``(N, 2, P, W)`` or sequences ``(N, K, 2, P, W)``.

    ``auto`` uses the mix pathway when both modalities are present and the
    single available modality's pathway otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    axis = 1 if model.kind == "epoch" else 2
    pathway = choose_pathway(available_modalities(x, axis), mode)
    logits, embs = [], []
    for start in range(0, len(x), batch_size):
        chunk = x[start : start + batch_size]
        out = model.forward(chunk, (pathway,), return_embeddings=return_embeddings)
        if return_embeddings:
            out, feats = out
            embs.append(feats[pathway].data)
        logits.append(out[pathway].data)
    z = np.concatenate(logits) if logits else np.zeros((0, model.config.n_classes))
    probs = softmax_np(z)
    return Prediction(
        pathway,
        probs.argmax(axis=-1),
        probs,
        z,
        np.concatenate(embs) if return_embeddings and embs else None,
    )


# -------------------------------------------------------------- checkpoints

def save_checkpoint(model, path, *, extra: dict | None = None, step: int = 0, rng_state: dict | None = None) -> Path:
    """Write ``SDRM`` magic, version, JSON config block, then named float64 blobs."""
    header = {
        "kind": model.kind,
        "model": asdict(model.config),
        "step": int(step),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    block = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(block)))
        fh.write(block)
        for name, p in model.named_parameters():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return path


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count != 1 else vals[0]

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an SDRM checkpoint")
    version, block_len = r.u32(2)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(r.take(block_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block ({exc})") from exc
    blobs: dict[str, np.ndarray] = {}
    while not r.done:
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        rank = r.u32()
        dims = r.u32(rank) if rank != 1 else (r.u32(),)
        dims = tuple(dims) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        blobs[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    return header, blobs


def load_checkpoint(path):
    """Rebuild the model recorded in ``path``; returns ``(model, header)``."""
    header, blobs = read_checkpoint(path)
    try:
        config = config_from_dict(header["kind"], header["model"])
        model = build_model(header["kind"], config)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model config ({exc})") from exc
    params = dict(model.named_parameters())
    missing = [n for n in params if n not in blobs]
    unexpected = [n for n in blobs if n not in params]
    if missing or unexpected:
        raise CheckpointError(
            f"{path}: parameter set differs from config (missing {missing[:5]}, unexpected {unexpected[:5]})"
        )
    for name, p in params.items():
        if blobs[name].shape != p.data.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {blobs[name].shape}, config implies {p.data.shape}"
            )
        p.data = blobs[name].copy()
    return model, header
