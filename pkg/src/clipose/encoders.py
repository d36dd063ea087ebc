"""Modality encoders: point cloud (k-NN edge aggregation), patch transformer
with learnable prompt tokens, and a small text transformer fed by a
numeric-bucketing tokenizer.  All three end in a linear projection followed
by L2 normalisation.
"""
from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .synthdata import CATEGORY_NAMES

PARAMETER_GROUPS = (
    "point_encoder",
    "image_backbone",
    "image_prompt_tokens",
    "image_projection",
    "text_backbone",
    "text_projection",
    "pose_head",
)


# ---------------------------------------------------------------------------
# tokenizer

PAD, UNK, CLS = 0, 1, 2
_WORDS = (
    "a", "point", "cloud", "model", "of", "whose", "rotation", "euler", "angles", "is",
    "and", "translation", "pose", "to", "be", "estimated", *CATEGORY_NAMES,
    "<", ">", ",", ".",
)
_TOKEN_RE = re.compile(r"-?\d+(?:\.\d+)?|[A-Za-z]+|[<>,.]")


@dataclass
class TokenSequence:
    ids: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return len(self.ids)


class Tokenizer:
    """Word tokens from a fixed vocabulary plus bucketed numerals.

    Numbers following ``angles`` land in ``angle_bin``-degree buckets over
    [-180, 180]; numbers following ``translation`` in ``trans_bin``-cm
    buckets over ``trans_range``.  Buckets are centred on multiples of the
    bin width.
    """

    def __init__(self, angle_bin=5.0, trans_bin=2.0, trans_range=(-100.0, 200.0), max_len=48):
        self.angle_bin = angle_bin
        self.trans_bin = trans_bin
        self.trans_range = trans_range
        self.max_len = max_len
        self.words = {w: i + 3 for i, w in enumerate(_WORDS)}
        self.n_angle = int(round(360 / angle_bin)) + 1
        self.n_trans = int(round((trans_range[1] - trans_range[0]) / trans_bin)) + 1
        self.angle_base = 3 + len(_WORDS)
        self.trans_base = self.angle_base + self.n_angle

    @property
    def vocab_size(self) -> int:
        return self.trans_base + self.n_trans

    def _angle_id(self, x: float) -> int:
        k = int(np.clip(round((x + 180.0) / self.angle_bin), 0, self.n_angle - 1))
        return self.angle_base + k

    def _trans_id(self, x: float) -> int:
        k = round((x - self.trans_range[0]) / self.trans_bin)
        return self.trans_base + int(np.clip(k, 0, self.n_trans - 1))

    def is_numeric(self, token_id: int) -> bool:
        return token_id >= self.angle_base

    def __call__(self, s: str) -> TokenSequence:
        ids = []
        mode = "angle"
        for tok in _TOKEN_RE.findall(s):
            if tok[0].isdigit() or tok[0] == "-":
                ids.append(self._angle_id(float(tok)) if mode == "angle" else self._trans_id(float(tok)))
                continue
            tok = tok.lower()
            if tok == "angles":
                mode = "angle"
            elif tok == "translation":
                mode = "translation"
            ids.append(self.words.get(tok, UNK))
        ids = np.asarray(ids, dtype=np.int64)
        return TokenSequence(ids, np.ones(len(ids), dtype=bool))

    def batch(self, texts) -> tuple[torch.Tensor, torch.Tensor]:
        """Pad a list of strings into ``(ids, mask)`` tensors, [CLS] first."""
        seqs = [self(t) for t in texts]
        T = 1 + max((len(s) for s in seqs), default=0)
        if T > self.max_len:
            raise ValueError(f"token sequence of length {T} exceeds max_len={self.max_len}")
        ids = np.full((len(seqs), T), PAD, dtype=np.int64)
        mask = np.zeros((len(seqs), T), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, 0] = CLS
            ids[i, 1:1 + len(s)] = s.ids
            mask[i, :1 + len(s)] = True
        return torch.from_numpy(ids), torch.from_numpy(mask)


def tokenize_text(s: str, tokenizer: Tokenizer | None = None) -> TokenSequence:
    return (tokenizer or Tokenizer())(s)


# ---------------------------------------------------------------------------
# building blocks

def init_linear(layer: nn.Linear) -> nn.Linear:
    nn.init.normal_(layer.weight, std=1.0 / math.sqrt(layer.in_features))
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.qkv = init_linear(nn.Linear(dim, 3 * dim))
        self.out = init_linear(nn.Linear(dim, dim))

    def forward(self, x, key_mask=None):
        B, T, D = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(D // self.heads)
        if key_mask is not None:
            att = att.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        y = att.softmax(-1) @ v
        return self.out(y.transpose(1, 2).reshape(B, T, D))


class Block(nn.Module):
    """Pre-norm transformer layer."""

    def __init__(self, dim, heads, mlp_ratio=2):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(init_linear(nn.Linear(dim, mlp_ratio * dim)), nn.GELU(),
                                 init_linear(nn.Linear(mlp_ratio * dim, dim)))

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.ln1(x), key_mask)
        return x + self.mlp(self.ln2(x))


# ---------------------------------------------------------------------------
# text

class TextEncoder(nn.Module):
    def __init__(self, tokenizer: Tokenizer | None = None, dim=64, layers=2, heads=2, out_dim=64):
        super().__init__()
        self.tokenizer = tokenizer or Tokenizer()
        self.token_emb = nn.Embedding(self.tokenizer.vocab_size, dim)
        self.pos_emb = nn.Parameter(torch.randn(self.tokenizer.max_len, dim) * 0.1)
        nn.init.normal_(self.token_emb.weight, std=0.1)
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(layers))
        self.ln = nn.LayerNorm(dim)
        self.projection = init_linear(nn.Linear(dim, out_dim, bias=False))

    def backbone_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("projection.")]

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        T = ids.shape[1]
        if T > self.tokenizer.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len={self.tokenizer.max_len}")
        x = self.token_emb(ids) + self.pos_emb[:T]
        for blk in self.blocks:
            x = blk(x, mask)
        return F.normalize(self.projection(self.ln(x[:, 0])), dim=-1)

    def encode(self, texts) -> torch.Tensor:
        ids, mask = self.tokenizer.batch(texts)
        return self(ids, mask)


# ---------------------------------------------------------------------------
# image

@dataclass
class PromptConfig:
    length: int = 10
    location: str = "prepend"       # or "append"
    layers: tuple = (1,)            # 1-based transformer layers receiving fresh tokens

    def __post_init__(self):
        if self.length < 0:
            raise ValueError("prompt length must be >= 0")
        if self.location not in ("prepend", "append"):
            raise ValueError(f"prompt location must be prepend|append, got {self.location!r}")
        self.layers = tuple(sorted(int(x) for x in self.layers))


class ImageEncoder(nn.Module):
    """Patch transformer; the projected [cls] output is the embedding.

    With prompts, the token sequence is ``[cls; prompts; patches]``
    (``prepend``) or ``[cls; patches; prompts]`` (``append``).  At every
    layer listed in ``prompt.layers`` the prompt slots are overwritten with
    that layer's own learnable tokens (inserted if not yet present).
    """

    def __init__(self, image_size=32, patch=8, channels=1, dim=64, layers=2, heads=2, out_dim=64,
                 prompt: PromptConfig | None = None):
        super().__init__()
        if image_size % patch:
            raise ValueError("image size must be a multiple of the patch size")
        self.image_size, self.patch, self.channels, self.dim = image_size, patch, channels, dim
        self.n_patches = (image_size // patch) ** 2
        self.patch_embed = init_linear(nn.Linear(patch * patch * channels, dim))
        self.cls = nn.Parameter(torch.randn(dim) * 0.1)
        self.pos_emb = nn.Parameter(torch.randn(1 + self.n_patches, dim) * 0.1)
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(layers))
        self.ln = nn.LayerNorm(dim)
        self.projection = init_linear(nn.Linear(dim, out_dim, bias=False))
        self.prompt = PromptConfig(0)
        self.prompts = nn.ParameterDict()
        self.set_prompts(prompt or PromptConfig(0))

    def set_prompts(self, prompt: PromptConfig, generator: torch.Generator | None = None):
        bad = [l for l in prompt.layers if not 1 <= l <= len(self.blocks)]
        if bad:
            raise ValueError(f"prompt layers {bad} outside 1..{len(self.blocks)}")
        self.prompt = prompt
        self.prompts = nn.ParameterDict({
            str(l): nn.Parameter(torch.rand(prompt.length, self.dim, generator=generator,
                                            dtype=self.cls.dtype) * 0.1 - 0.05)
            for l in prompt.layers
        } if prompt.length > 0 else {})

    def load_prompt_tokens(self, layer: int, tokens: torch.Tensor):
        if tokens.shape != (self.prompt.length, self.dim):
            raise ValueError(f"prompt tokens must have shape ({self.prompt.length}, {self.dim}), "
                             f"got {tuple(tokens.shape)}")
        with torch.no_grad():
            self.prompts[str(layer)].copy_(tokens)

    def sequence_length(self) -> int:
        return 1 + self.prompt.length + self.n_patches

    def backbone_parameters(self):
        return [p for n, p in self.named_parameters()
                if not n.startswith(("projection.", "prompts."))]

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        B, H, W, C = images.shape
        if (H, W, C) != (self.image_size, self.image_size, self.channels):
            raise ValueError(f"expected {self.image_size}x{self.image_size}x{self.channels} patches, "
                             f"got {H}x{W}x{C}")
        p = self.patch
        x = images.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, self.n_patches, p * p * C)

    def tokens(self, images: torch.Tensor) -> torch.Tensor:
        """Final-layer token sequence (before the [cls] read-out)."""
        x = self.patch_embed(self.patchify(images))
        B = x.shape[0]
        cls = self.cls.expand(B, 1, -1)
        x = torch.cat([cls, x], 1) + self.pos_emb
        L = self.prompt.length
        has_prompts = False
        for i, blk in enumerate(self.blocks, start=1):
            key = str(i)
            if L > 0 and key in self.prompts:
                P = self.prompts[key]
                if P.shape[-1] != x.shape[-1]:
                    raise ValueError("prompt token dim does not match patch embedding dim")
                P = P.expand(B, -1, -1)
                if self.prompt.location == "prepend":
                    rest = x[:, 1 + L:] if has_prompts else x[:, 1:]
                    x = torch.cat([x[:, :1], P, rest], 1)
                else:
                    keep = x[:, :1 + self.n_patches]
                    x = torch.cat([keep, P], 1)
                has_prompts = True
            x = blk(x)
        return x

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.tokens(images)
        return F.normalize(self.projection(self.ln(x[:, 0])), dim=-1)


# ---------------------------------------------------------------------------
# point cloud

def knn_indices(points: torch.Tensor, k: int) -> torch.Tensor:
    """(B, N, k) indices of the k nearest neighbours (self included)."""
    d = torch.cdist(points, points)
    return d.topk(k, dim=-1, largest=False).indices


def _gather(feats: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    B, N, k = idx.shape
    flat = idx.reshape(B, N * k)
    out = torch.gather(feats, 1, flat[..., None].expand(-1, -1, feats.shape[-1]))
    return out.view(B, N, k, feats.shape[-1])


class EdgeStage(nn.Module):
    """h_i <- max_j relu(W [h_i, h_j - h_i, p_j - p_i] + b) over the k-NN of i."""

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.lin = init_linear(nn.Linear(2 * in_dim + 3, out_dim))
        self.norm = nn.LayerNorm(out_dim)

    def forward(self, h, pts, idx):
        hj = _gather(h, idx)
        pj = _gather(pts, idx)
        hi = h[:, :, None].expand_as(hj)
        e = torch.cat([hi, hj - hi, pj - pts[:, :, None]], -1)
        return F.relu(self.norm(self.lin(e))).amax(dim=2)


class PointEncoder(nn.Module):
    """Per-point MLP, then ``stages`` k-NN edge-aggregation stages.

    Per-point features are the concatenation of all stage outputs; the global
    embedding is the max-pool of the projected final stage.  Inputs are the
    centred coordinates (times ``coord_scale``) plus the centroid, so
    features are not translation invariant.
    """

    def __init__(self, k=8, stages=3, width=32, out_dim=64, coord_scale=10.0):
        super().__init__()
        self.k, self.coord_scale = k, coord_scale
        self.stem = nn.Sequential(init_linear(nn.Linear(6, width)), nn.LayerNorm(width), nn.ReLU())
        self.stages = nn.ModuleList(EdgeStage(width, width) for _ in range(stages))
        self.projection = init_linear(nn.Linear(width, out_dim))

    @property
    def feature_dim(self) -> int:
        return len(self.stages) * self.stages[0].lin.out_features

    def forward(self, points: torch.Tensor):
        B, N, _ = points.shape
        if N < self.k:
            raise ValueError(f"need at least k={self.k} points, got {N}")
        centroid = points.mean(1, keepdim=True)
        local = (points - centroid) * self.coord_scale
        idx = knn_indices(local, self.k)
        h = self.stem(torch.cat([local, centroid.expand(-1, N, -1)], -1))
        outs = []
        for stage in self.stages:
            h = stage(h, local, idx)
            outs.append(h)
        per_point = torch.cat(outs, -1)
        glob = self.projection(h).amax(dim=1)
        return per_point, F.normalize(glob, dim=-1)


def encode_points(points, encoder: PointEncoder):
    return encoder(torch.as_tensor(points)[None] if np.ndim(points) == 2 else torch.as_tensor(points))


def encode_image(patch, encoder: ImageEncoder) -> torch.Tensor:
    x = torch.as_tensor(patch)
    return encoder(x[None] if x.dim() == 3 else x)


def encode_text(seq, encoder: TextEncoder) -> torch.Tensor:
    """Embed a :class:`TokenSequence`, a string or a list of strings."""
    if isinstance(seq, TokenSequence):
        ids = torch.cat([torch.tensor([CLS]), torch.from_numpy(seq.ids)])[None]
        return encoder(ids, torch.ones_like(ids, dtype=torch.bool))
    return encoder.encode([seq] if isinstance(seq, str) else list(seq))


# ---------------------------------------------------------------------------
# trainability

@dataclass
class TrainabilityPolicy:
    point_encoder: bool = True
    image_backbone: bool = False
    image_prompt_tokens: bool = True
    image_projection: bool = True
    text_backbone: bool = False
    text_projection: bool = False
    pose_head: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "TrainabilityPolicy":
        unknown = set(d) - set(PARAMETER_GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def frozen(cls) -> "TrainabilityPolicy":
        return cls(**{g: False for g in PARAMETER_GROUPS})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def enabled(self) -> list[str]:
        return [g for g in PARAMETER_GROUPS if getattr(self, g)]


def trainable_parameters(policy, groups: dict[str, list[nn.Parameter]]) -> list[nn.Parameter]:
    """Parameters an optimiser may update under ``policy``; sets ``requires_grad``.

    ``groups`` maps each name in PARAMETER_GROUPS to its parameters (see
    ``CLIPoseModel.parameter_groups``).
    """
    if isinstance(policy, dict):
        policy = TrainabilityPolicy.from_dict(policy)
    unknown = set(groups) - set(PARAMETER_GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
    out = []
    for name in PARAMETER_GROUPS:
        on = getattr(policy, name)
        for p in groups.get(name, []):
            p.requires_grad_(on)
            if on:
                out.append(p)
    return out
