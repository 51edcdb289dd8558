"""The toy dual encoder: image MLP, bag-of-tokens text encoder, InfoNCE loss."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import ContractError, Tensor

TAU_MIN = 1e-3
TAU_MAX = 1.0
TAU_INIT = 0.07


class InputValidationError(ValueError):
    """A sample falls outside the model's input domain."""


@dataclass(frozen=True)
class Architecture:
    d_image: int = 32
    hidden: int = 64
    d_embed: int = 16
    vocab_size: int = 64
    d_token: int = 32


@dataclass
class ModelParams:
    """All trainable tensors of the dual encoder.

    ``log_tau`` stores the log of the softmax temperature; weight decay never
    touches it.
    """

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    E: Tensor
    Wt: Tensor
    bt: Tensor
    log_tau: Tensor

    @property
    def names(self) -> list[str]:
        return [f.name for f in fields(self)]

    def tensors(self) -> list[Tensor]:
        return [getattr(self, n) for n in self.names]

    def items(self):
        return [(n, getattr(self, n)) for n in self.names]

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))

    @property
    def arch(self) -> Architecture:
        return Architecture(
            d_image=self.W1.shape[0],
            hidden=self.W1.shape[1],
            d_embed=self.W2.shape[1],
            vocab_size=self.E.shape[0],
            d_token=self.E.shape[1],
        )

    def copy(self, requires_grad: bool = True) -> "ModelParams":
        return ModelParams(**{n: Tensor(t.data.copy(), requires_grad=requires_grad) for n, t in self.items()})

    def frozen(self) -> "ModelParams":
        return self.copy(requires_grad=False)

    def clamp_temperature(self) -> None:
        np.clip(self.log_tau.data, np.log(TAU_MIN), np.log(TAU_MAX), out=self.log_tau.data)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def init_params(arch: Architecture | None = None, seed: int = 0, init_scale: float = 1.0) -> ModelParams:
    """Random initialisation with a shared output bias.

    Both towers start with the same bias direction and small weights, so all
    embeddings are close together and the initial similarity matrix is nearly
    uniform (loss close to ``ln n``).
    """
    arch = arch or Architecture()
    rng = np.random.default_rng(seed)
    shared = rng.normal(size=arch.d_embed)
    shared /= np.linalg.norm(shared)

    def glorot(n_in, n_out, gain=1.0):
        return rng.normal(scale=gain * np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))

    w = 0.1 * init_scale
    return ModelParams(
        W1=Tensor(glorot(arch.d_image, arch.hidden), requires_grad=True),
        b1=Tensor(np.zeros(arch.hidden), requires_grad=True),
        W2=Tensor(glorot(arch.hidden, arch.d_embed, w), requires_grad=True),
        b2=Tensor(shared.copy(), requires_grad=True),
        E=Tensor(rng.normal(size=(arch.vocab_size, arch.d_token)), requires_grad=True),
        Wt=Tensor(glorot(arch.d_token, arch.d_embed, w), requires_grad=True),
        bt=Tensor(shared.copy(), requires_grad=True),
        log_tau=Tensor(np.log(TAU_INIT), requires_grad=True),
    )


# --------------------------------------------------------------------------
# input validation


def check_images(images, d_image: int) -> np.ndarray:
    x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != d_image:
        raise InputValidationError(f"images must have shape (n, {d_image}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputValidationError("images contain non-finite values")
    if x.min(initial=0.0) < 0.0 or x.max(initial=0.0) > 1.0:
        raise InputValidationError("image values must lie in [0, 1]")
    return x


def check_captions(captions: Sequence[Sequence[int]], vocab_size: int) -> list[tuple[int, ...]]:
    out = []
    for i, cap in enumerate(captions):
        cap = tuple(int(t) for t in cap)
        if not cap:
            raise InputValidationError(f"caption {i} is empty")
        if min(cap) < 0 or max(cap) >= vocab_size:
            raise InputValidationError(f"caption {i} has token ids outside [0, {vocab_size})")
        out.append(cap)
    return out


# --------------------------------------------------------------------------
# encoders


def encode_image(params: ModelParams, images) -> Tensor:
    """Unit-norm image embeddings; differentiable w.r.t. params and ``images``.

    ``images`` may be a tracked :class:`Tensor` (attacks need input gradients)
    or anything array-like of shape (n, d_image) with values in [0, 1].
    """
    if isinstance(images, Tensor):
        check_images(images, params.W1.shape[0])
        x = images
    else:
        x = Tensor(check_images(images, params.W1.shape[0]))
    h = ag.tanh(x @ params.W1 + params.b1)
    return ag.l2_normalize(h @ params.W2 + params.b2)


def pooling_matrix(captions: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    """(n x vocab) matrix of token frequencies: row i times E is caption i's mean token embedding."""
    lengths = np.fromiter((len(c) for c in captions), dtype=np.int64, count=len(captions))
    flat = np.fromiter((t for c in captions for t in c), dtype=np.int64, count=int(lengths.sum()))
    rows = np.repeat(np.arange(len(captions)), lengths)
    pool = np.zeros((len(captions), vocab_size))
    np.add.at(pool, (rows, flat), 1.0)
    return pool / lengths[:, None]


def encode_text(params: ModelParams, captions: Sequence[Sequence[int]]) -> Tensor:
    """Unit-norm text embeddings: mean of token embeddings, then an affine map."""
    captions = check_captions(captions, params.E.shape[0])
    pooled = Tensor(pooling_matrix(captions, params.E.shape[0])) @ params.E
    return ag.l2_normalize(pooled @ params.Wt + params.bt)


def text_embed_from_pooled(params: ModelParams, pooled: np.ndarray) -> np.ndarray:
    """Forward-only text head on precomputed mean token embeddings (..., d_token)."""
    z = pooled @ params.Wt.data + params.bt.data
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


def embed_images(params: ModelParams, images) -> np.ndarray:
    return encode_image(params, images).data


def embed_texts(params: ModelParams, captions) -> np.ndarray:
    return encode_text(params, captions).data


def similarity(params: ModelParams, image, caption) -> float:
    """Cosine similarity of one image and one caption."""
    ei = encode_image(params, np.asarray(image, dtype=np.float64)[None, :]).data[0]
    et = encode_text(params, [caption]).data[0]
    return float(ei @ et)


def info_nce_from_embeddings(img: Tensor, txt: Tensor, log_tau: Tensor) -> Tensor:
    """Symmetric InfoNCE on unit embeddings, (L_image + L_text) / 2, averaged over pairs."""
    n = img.shape[0]
    if n == 0:
        raise ContractError("info_nce_loss needs at least one pair")
    inv_tau = ag.exp(ag.scale(log_tau, -1.0))
    logits = ag.multiply(img @ txt.T, inv_tau)
    # the diagonal of the logits, so a single pair cancels exactly
    positives = ag.tsum(ag.multiply(logits, Tensor(np.eye(n))))
    lse_img = ag.log_sum_exp(logits, axis=1).sum()
    lse_txt = ag.log_sum_exp(logits, axis=0).sum()
    return ag.scale(ag.subtract(ag.add(lse_img, lse_txt), ag.scale(positives, 2.0)), 0.5 / n)


def info_nce_loss(params: ModelParams, images, captions) -> Tensor:
    """The CLIP objective on a batch of aligned (image, caption) pairs."""
    if len(captions) == 0:
        raise ContractError("info_nce_loss needs at least one pair")
    if len(images) != len(captions):
        raise ContractError(f"{len(images)} images but {len(captions)} captions")
    return info_nce_from_embeddings(encode_image(params, images), encode_text(params, captions), params.log_tau)


# --------------------------------------------------------------------------
# checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic b"MMRCKPT\x00"
#   4 bytes   uint32 format version (1)
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON header: {"config_hash": str, "tensors": [{"name", "shape"}...]}
#             written with sorted keys and no whitespace
#   rest      the tensors' values, in header order, as row-major float64 (<f8)

CKPT_MAGIC = b"MMRCKPT\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(params: ModelParams, config_hash: str = "") -> bytes:
    header = {
        "config_hash": config_hash,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in params.items()],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.tensors())
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb + body


def save_checkpoint(params: ModelParams, path, config_hash: str = "") -> None:
    Path(path).write_bytes(checkpoint_bytes(params, config_hash))


def load_checkpoint(path) -> tuple[ModelParams, str]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode())
    offset = 16 + hlen
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {spec['name']}")
        data = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        tensors[spec["name"]] = Tensor(data, requires_grad=True)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return ModelParams(**tensors), header["config_hash"]
