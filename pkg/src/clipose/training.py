"""Two-stage training.

Stage 0 pre-aligns the image and text encoders on (patch, caption) pairs so
that they can play the role of a frozen, pre-aligned vision-language pair.
Stage 1 trains the point encoder, prompt tokens, image projection and pose
head under the combined objective.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import shutil
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .encoders import (PARAMETER_GROUPS, ImageEncoder, PointEncoder, PromptConfig, TextEncoder,
                       Tokenizer, TrainabilityPolicy, trainable_parameters)
from .evaluation import (DEFAULT_THRESHOLDS, MetricReport, evaluate_instance, map_at, mean_errors,
                         metric_symmetry, retrieval_accuracy)
from .posehead import PointCloudStats, PoseHead, calibrate_normals_batch, decode
from .synthdata import (CATEGORIES, CATEGORY_NAMES, AugmentConfig, DataConfig, Triplet, augment,
                        category_mean_scales, generate_split, make_text)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class ModelConfig:
    embed_dim: int = 64
    image_size: int = 32
    image_patch: int = 4
    image_dim: int = 64
    image_layers: int = 2
    image_heads: int = 2
    text_dim: int = 64
    text_layers: int = 2
    text_heads: int = 2
    point_k: int = 8
    point_stages: int = 3
    point_width: int = 32
    head_hidden: int = 128
    head_geometric: bool = True
    head_vote_features: bool = False
    head_vote_hidden: int = 64


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    tau: float = 0.07
    pose_text_fraction: float = 0.5
    retrieval_floor: float = 0.8
    eval_every: int = 100
    heldout_fraction: float = 0.1
    category_ce: float = 1.0        # weight of image vs category-text CE (tau-scaled)
    pool_per_category: int = 3000   # freshly generated caption pairs, disjoint from the task splits


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 24
    base_lr: float = 1e-4
    epochs: int = 20
    anneal_start_fraction: float = 0.72
    optimizer: str = "adamw"
    weight_decay: float = 1e-4
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    policy: TrainabilityPolicy = field(default_factory=TrainabilityPolicy)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    text_with_pose: bool = True
    one_hot: bool = False
    supervise_calibrated: bool = False
    sym_angle: float = math.pi / 2
    reflectional_metric: bool = False
    eval_interval: int = 5
    threads: int = 1
    ablation: str = "D0"

    def __post_init__(self):
        if not 0 < self.anneal_start_fraction <= 1:
            raise ValueError("anneal_start_fraction must lie in (0, 1]")
        w = self.weights
        if self.batch_size < 2 and (w.alpha or w.beta or w.lam):
            raise ValueError("contrastive terms need batch_size >= 2")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sub = {"weights": L.LossWeights, "prompt": PromptConfig, "policy": TrainabilityPolicy,
               "augmentation": AugmentConfig, "model": ModelConfig, "pretrain": PretrainConfig}
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for k, typ in sub.items():
            if k in d and isinstance(d[k], dict):
                fields_ = {f.name for f in dataclasses.fields(typ)}
                bad = set(d[k]) - fields_
                if bad:
                    raise ValueError(f"unknown keys in {k}: {sorted(bad)}")
                d[k] = typ(**d[k])
        return cls(**d)


# Ablation rows: contrastive PC terms, prompt fine-tuning, text with pose, classification variants,
# prompt length / location / layers, joint text training, temperature.
_BASE_POLICY = dict(point_encoder=True, pose_head=True)


def _table3(alpha, beta, text_pose, prompts, cls=None):
    def apply(cfg: TrainConfig):
        cfg.weights.alpha, cfg.weights.beta = alpha, beta
        cfg.weights.lam = 1.0 if cls == "nce" else 0.0
        cfg.weights.ce = 1.0 if cls == "ce" else 0.0
        cfg.one_hot = cls == "onehot"
        cfg.text_with_pose = text_pose
        cfg.prompt = PromptConfig(10 if prompts else 0, "prepend", (1,))
        cfg.policy = TrainabilityPolicy(**_BASE_POLICY, image_prompt_tokens=prompts,
                                        image_projection=prompts)
    return apply


def _layer_range(a, b):
    # map a range of a 12-layer ViT onto the configured depth
    def apply(cfg: TrainConfig):
        depth = cfg.model.image_layers
        lo, hi = math.ceil(a * depth / 12), math.ceil(b * depth / 12)
        cfg.prompt = PromptConfig(cfg.prompt.length, cfg.prompt.location, tuple(range(lo, hi + 1)))
    return apply


def _set(**kw):
    def apply(cfg: TrainConfig):
        for k, v in kw.items():
            if k == "length":
                cfg.prompt = PromptConfig(v, cfg.prompt.location, cfg.prompt.layers)
            elif k == "location":
                cfg.prompt = PromptConfig(cfg.prompt.length, v, cfg.prompt.layers)
            elif k == "tau":
                cfg.weights.tau = v
            elif k == "joint":
                cfg.policy.text_projection = v
    return apply


ABLATIONS = {
    "A0": _table3(0.0, 0.0, False, False),
    "B0": _table3(1.0, 0.0, False, False),
    "B1": _table3(0.0, 1.0, False, False),
    "B2": _table3(1.0, 1.0, False, False),
    "C0": _table3(1.0, 1.0, True, False),
    "C1": _table3(1.0, 1.0, False, True),
    "C2": _table3(1.0, 1.0, True, True),
    "D0": _table3(1.0, 1.0, True, True, "ce"),
    "D1": _table3(1.0, 1.0, True, True, "nce"),
    "D2": _table3(1.0, 1.0, True, True, "onehot"),
    "IV-0": _set(),
    "IV-1": _set(location="append"),
    **{f"IV-{i}": _set(length=n) for i, n in zip(range(2, 7), (5, 20, 50, 100, 200))},
    "V-0": _set(),
    "V-1": _set(joint=True),
    **{f"V-{i}": _layer_range(a, b) for i, (a, b) in
       zip(range(2, 8), ((1, 3), (1, 6), (1, 12), (6, 12), (9, 12), (12, 12)))},
    **{f"VII-{i}": _set(tau=t) for i, t in enumerate((0.2, 0.07, 0.03, 0.02, 0.001))},
}


def apply_ablation(cfg: TrainConfig, tag: str) -> TrainConfig:
    """Copy of ``cfg`` with an ablation row applied (rows IV-*, V-*, VII-* start from D0)."""
    if tag not in ABLATIONS:
        raise ValueError(f"unknown ablation tag {tag!r}; known: {', '.join(ABLATIONS)}")
    out = copy.deepcopy(cfg)
    if not tag[0] in "ABCD":
        ABLATIONS["D0"](out)
    ABLATIONS[tag](out)
    out.ablation = tag
    return out


# ---------------------------------------------------------------------------
# model

class CLIPoseModel(nn.Module):
    """Point/image/text encoders plus pose head.

    Each sub-module is initialised from its own stream derived from
    ``seed``, so changing one module's shape leaves the others' initial
    weights untouched.
    """

    def __init__(self, cfg: ModelConfig | None = None, prompt: PromptConfig | None = None,
                 one_hot: bool = False, seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.tokenizer = Tokenizer()

        def build(stream, fn):
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(int(np.random.SeedSequence([seed, stream]).generate_state(1)[0]))
                return fn()

        self.point_encoder = build(1, lambda: PointEncoder(cfg.point_k, cfg.point_stages,
                                                           cfg.point_width, cfg.embed_dim))
        self.image_encoder = build(2, lambda: ImageEncoder(
            cfg.image_size, cfg.image_patch, 1, cfg.image_dim, cfg.image_layers, cfg.image_heads,
            cfg.embed_dim, prompt))
        self.text_encoder = build(3, lambda: TextEncoder(self.tokenizer, cfg.text_dim, cfg.text_layers,
                                                         cfg.text_heads, cfg.embed_dim))
        self.pose_head = build(4, lambda: PoseHead(
            self.point_encoder.feature_dim, cfg.embed_dim, cfg.head_hidden,
            len(CATEGORY_NAMES) if one_hot else 0,
            geometric=cfg.head_geometric, vote_features=cfg.head_vote_features,
            vote_hidden=cfg.head_vote_hidden))

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        ie, te = self.image_encoder, self.text_encoder
        return {
            "point_encoder": list(self.point_encoder.parameters()),
            "image_backbone": ie.backbone_parameters(),
            "image_prompt_tokens": list(ie.prompts.parameters()),
            "image_projection": list(ie.projection.parameters()),
            "text_backbone": te.backbone_parameters(),
            "text_projection": list(te.projection.parameters()),
            "pose_head": list(self.pose_head.parameters()),
        }

    def named_groups(self) -> dict[str, str]:
        """state_dict key -> parameter group."""
        ids = {id(p): g for g, ps in self.parameter_groups().items() for p in ps}
        return {n: ids[id(p)] for n, p in self.named_parameters()}

    def category_texts(self) -> torch.Tensor:
        return self.text_encoder.encode([make_text(c, "infer") for c in CATEGORY_NAMES])


# ---------------------------------------------------------------------------
# schedule

def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Constant ``base_lr`` until ``anneal_start_fraction`` of training, then cosine to 0."""
    if total_steps <= 0:
        return cfg.base_lr
    progress = min(max(step / total_steps, 0.0), 1.0)
    a = cfg.anneal_start_fraction
    if progress < a or a >= 1.0:
        return cfg.base_lr
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (progress - a) / (1.0 - a)))


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    points: torch.Tensor
    images: torch.Tensor
    texts: list
    labels: torch.Tensor
    R: torch.Tensor
    t: torch.Tensor
    s: torch.Tensor

    def __len__(self):
        return len(self.texts)


def collate(samples: list[Triplet], text_with_pose: bool = True) -> Batch:
    texts = [s.text if text_with_pose else make_text(s.category_name, "infer") for s in samples]
    return Batch(
        points=torch.from_numpy(np.stack([s.points for s in samples])),
        images=torch.from_numpy(np.stack([s.image for s in samples])),
        texts=texts,
        labels=torch.tensor([s.category_id for s in samples]),
        R=torch.from_numpy(np.stack([s.pose.R for s in samples])).float(),
        t=torch.from_numpy(np.stack([s.pose.t for s in samples])).float(),
        s=torch.from_numpy(np.stack([s.pose.s for s in samples])).float(),
    )


class PretrainError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term, value):
        super().__init__(f"non-finite loss in term {term!r}: {value}")
        self.term = term


def _seeded_generator(*key) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0]))
    return g


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


# ---------------------------------------------------------------------------
# stage 0

def image_text_retrieval(model: CLIPoseModel, samples: list[Triplet], batch: int = 256) -> float:
    with torch.no_grad():
        cat = model.category_texts().numpy()
        embs = [model.image_encoder(collate(samples[i:i + batch]).images).numpy()
                for i in range(0, len(samples), batch)]
    return retrieval_accuracy(np.concatenate(embs), cat, [s.category_id for s in samples])


def pretrain_align(model: CLIPoseModel, pairs: list[Triplet], steps: int, cfg: TrainConfig,
                   heldout: list[Triplet] | None = None) -> list[dict]:
    """Contrastively align the image and text encoders (no prompt tokens).

    ``pairs`` supply image patches and captions; each caption is the pose
    description with probability ``pose_text_fraction``, the category-only
    description otherwise.  Raises :class:`PretrainError` if held-out
    image->category-text top-1 does not reach ``retrieval_floor``.
    """
    pc = cfg.pretrain
    history = []
    if steps <= 0:
        return history
    if heldout is None:
        n_hold = max(1, int(len(pairs) * pc.heldout_fraction))
        pairs, heldout = pairs[:-n_hold], pairs[-n_hold:]
    saved_prompt = model.image_encoder.prompt
    model.image_encoder.set_prompts(PromptConfig(0))
    params = model.image_encoder.backbone_parameters() + list(model.image_encoder.projection.parameters()) \
        + list(model.text_encoder.parameters())
    for p in model.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.AdamW(params, lr=pc.lr, weight_decay=cfg.weight_decay)
    rng = _rng(cfg.seed, 0xA11)
    final = 0.0
    model.train()
    for step in range(1, steps + 1):
        idx = rng.choice(len(pairs), size=min(pc.batch_size, len(pairs)), replace=False)
        chosen = [pairs[i] for i in idx]
        use_pose = rng.uniform(size=len(chosen)) < pc.pose_text_fraction
        texts = [s.text if u else make_text(s.category_name, "infer") for s, u in zip(chosen, use_pose)]
        images = torch.from_numpy(np.stack([s.image for s in chosen]))
        for g in opt.param_groups:
            g["lr"] = pc.lr * 0.5 * (1 + math.cos(math.pi * (step - 1) / steps))
        img = model.image_encoder(images)
        loss = L.nce_pair_loss(img, model.text_encoder.encode(texts), pc.tau)
        if pc.category_ce > 0:
            labels = torch.tensor([s.category_id for s in chosen])
            loss = loss + pc.category_ce * L.classification_ce(img, model.category_texts(), labels, pc.tau)
        opt.zero_grad()
        loss.backward()
        opt.step()
        rec = {"step": step, "loss": loss.item()}
        if step % pc.eval_every == 0 or step == steps:
            model.eval()
            rec["heldout_top1"] = final = image_text_retrieval(model, heldout)
            model.train()
            log.info("pretrain step %d loss %.4f heldout top-1 %.3f", step, rec["loss"], final)
        history.append(rec)
    model.eval()
    for p in params:
        p.requires_grad_(False)
    g = _seeded_generator(cfg.seed, 0x9807)
    model.image_encoder.set_prompts(saved_prompt, generator=g)
    if final <= pc.retrieval_floor:
        raise PretrainError(
            f"held-out image->text top-1 {final:.3f} did not exceed floor {pc.retrieval_floor} "
            f"within {steps} steps (last loss {history[-1]['loss']:.4f})")
    return history


# ---------------------------------------------------------------------------
# stage 1

class Stage1:
    """Bundles the model, optimiser and per-category scale statistics."""

    def __init__(self, model: CLIPoseModel, cfg: TrainConfig, mean_scales: np.ndarray):
        self.model, self.cfg = model, cfg
        self.mean_scales = torch.as_tensor(np.asarray(mean_scales), dtype=torch.float32)
        self.params = trainable_parameters(cfg.policy, model.parameter_groups())
        self.optimizer = make_optimizer(self.params, cfg)
        self.step = 0


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    if not params:
        return torch.optim.SGD([torch.zeros(1, requires_grad=True)], lr=0.0)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.base_lr)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.base_lr, momentum=0.9, weight_decay=cfg.weight_decay)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def compute_losses(model: CLIPoseModel, batch: Batch, cfg: TrainConfig, mean_scales: torch.Tensor,
                   category_texts: torch.Tensor | None = None) -> L.LossBreakdown:
    w = cfg.weights
    per_point, pc_emb = model.point_encoder(batch.points)
    need_img = w.alpha > 0 or w.lam > 0 or w.ce > 0
    img_emb = model.image_encoder(batch.images) if need_img else None
    need_txt = w.beta > 0 or w.lam > 0
    txt_emb = model.text_encoder.encode(batch.texts) if need_txt else None
    nce, terms = L.multimodal_nce(pc_emb, img_emb, txt_emb, w)
    if w.ce > 0:
        cat = category_texts if category_texts is not None else model.category_texts()
        terms["ce_img_text"] = w.ce * L.classification_ce(img_emb, cat, batch.labels, w.ce_tau)
    one_hot = nn.functional.one_hot(batch.labels, len(CATEGORY_NAMES)) if cfg.one_hot else None
    out = model.pose_head(per_point, pc_emb, batch.points, one_hot)
    rx_gt, ry_gt = batch.R[:, :, 0], batch.R[:, :, 1]
    r_x, r_y = out.r_x, out.r_y
    if cfg.supervise_calibrated:
        r_x, r_y = calibrate_normals_batch(r_x, r_y, out.c_x, out.c_y)
    centroid = batch.points.mean(1)
    M_s = mean_scales[batch.labels]
    terms["rot"] = w.pose * L.rotation_loss(r_x, r_y, rx_gt, ry_gt)
    terms["trans"] = w.pose * L.translation_loss(out.t_resid, centroid, batch.t)
    terms["scale"] = w.pose * L.scale_loss(out.s_resid, M_s, batch.s)
    syms = [CATEGORIES[CATEGORY_NAMES[int(c)]].symmetry for c in batch.labels]
    if w.sym > 0:
        terms["sym"] = w.sym * L.symmetry_loss(batch.points, out.P_prime, batch.R, batch.t, syms,
                                               cfg.sym_angle)
    return L.total_loss(terms)


def train_step(batch: Batch, state: Stage1, lr: float | None = None) -> dict:
    """One optimiser step over the policy's trainable parameters; returns the loss record."""
    if len(batch) < 2:
        raise ValueError("train_step needs a batch of at least 2 samples")
    model, cfg = state.model, state.cfg
    model.train()
    cat = None
    if cfg.weights.ce > 0 and not (cfg.policy.text_backbone or cfg.policy.text_projection):
        with torch.no_grad():
            cat = model.category_texts()
    res = compute_losses(model, batch, cfg, state.mean_scales, cat)
    for name, v in [("total", res.total), *res.terms.items()]:
        if not torch.isfinite(v):
            raise NonFiniteLossError(name, v.item())
    lr = cfg.base_lr if lr is None else lr
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    if res.total.requires_grad:
        res.total.backward()
        state.optimizer.step()
    state.step += 1
    return {"step": state.step, "lr": lr, **res.as_floats()}


# ---------------------------------------------------------------------------
# evaluation

@torch.no_grad()
def predict_poses(model: CLIPoseModel, samples: list[Triplet], mean_scales, cfg: TrainConfig,
                  batch: int = 128):
    """Decoded poses and global point embeddings for ``samples`` (eval mode)."""
    model.eval()
    poses, embs = [], []
    ms = np.asarray(mean_scales, dtype=np.float64)
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        b = collate(chunk, text_with_pose=False)
        per_point, emb = model.point_encoder(b.points)
        one_hot = nn.functional.one_hot(b.labels, len(CATEGORY_NAMES)) if cfg.one_hot else None
        out = model.pose_head(per_point, emb, b.points, one_hot)
        for j, s in enumerate(chunk):
            stats = PointCloudStats.from_points(s.points, ms[s.category_id])
            poses.append(decode(out.sample(j), stats))
        embs.append(emb.numpy())
    return poses, np.concatenate(embs) if embs else np.zeros((0, model.cfg.embed_dim))


def evaluate(model: CLIPoseModel, samples: list[Triplet], mean_scales, cfg: TrainConfig,
             thresholds=DEFAULT_THRESHOLDS) -> tuple[MetricReport, list]:
    poses, embs = predict_poses(model, samples, mean_scales, cfg)
    records = [evaluate_instance(p, s.pose, metric_symmetry(s.category_id, cfg.reflectional_metric),
                                 s.category_id, str(i))
               for i, (p, s) in enumerate(zip(poses, samples))]
    report = map_at(records, thresholds)
    with torch.no_grad():
        cat = model.category_texts().numpy()
    report.retrieval_top1 = retrieval_accuracy(embs, cat, [s.category_id for s in samples])
    report.mean_rot_deg, report.mean_trans_cm = mean_errors(records, cfg.reflectional_metric)
    return report, records


# ---------------------------------------------------------------------------
# checkpoints

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.uint8: "|u1"}
_TORCH = {v: k for k, v in _DTYPES.items()}
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict | None
    config: dict
    step: int = 0
    epoch: int = 0
    mean_scales: list | None = None
    history: list = field(default_factory=list)
    pretrain_history: list = field(default_factory=list)
    rng: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)


def _tensor_entries(ckpt: Checkpoint):
    for name, t in ckpt.model_state.items():
        yield f"model/{name}", ckpt.groups.get(name, "buffer"), t
    if ckpt.optimizer_state:
        for idx, st in ckpt.optimizer_state["state"].items():
            for key, t in st.items():
                yield f"optim/{idx}/{key}", "optimizer", t
    if "torch" in ckpt.rng:
        yield "rng/torch", "rng", ckpt.rng["torch"]


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``checkpoint.json`` + ``tensors.bin`` into directory ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        buf = bytearray()
        entries = []
        for name, group, t in _tensor_entries(ckpt):
            t = t.detach().cpu().contiguous()
            raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
            entries.append({"name": name, "group": group, "dtype": _DTYPES[t.dtype],
                            "shape": list(t.shape), "offset": len(buf), "nbytes": len(raw),
                            "crc32": zlib.crc32(raw)})
            buf += raw
        (tmp / "tensors.bin").write_bytes(bytes(buf))
        meta = {
            "format": "clipose-checkpoint", "version": CHECKPOINT_VERSION,
            "config": ckpt.config, "step": ckpt.step, "epoch": ckpt.epoch,
            "mean_scales": ckpt.mean_scales, "history": ckpt.history,
            "pretrain_history": ckpt.pretrain_history,
            "rng": {k: v for k, v in ckpt.rng.items() if k != "torch"},
            "optimizer_param_groups": ckpt.optimizer_state["param_groups"] if ckpt.optimizer_state else None,
            "groups": sorted(set(ckpt.groups.values())),
            "tensors": entries, "blob_crc32": zlib.crc32(bytes(buf)), "blob_nbytes": len(buf),
        }
        with open(tmp / "checkpoint.json", "w") as f:
            json.dump(meta, f, indent=1, sort_keys=True)
        if path.exists():
            shutil.rmtree(path)
        tmp.rename(path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    from .synthdata import ChecksumError, TruncatedPayloadError, VersionMismatchError

    path = Path(path)
    meta = json.loads((path / "checkpoint.json").read_text())
    if meta.get("format") != "clipose-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatchError("unsupported checkpoint format/version")
    raw = (path / "tensors.bin").read_bytes()
    if len(raw) != meta["blob_nbytes"]:
        raise TruncatedPayloadError("checkpoint tensor blob truncated")
    model_state, optim, rng, groups = {}, {}, {}, {}
    for e in meta["tensors"]:
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        if zlib.crc32(chunk) != e["crc32"]:
            raise ChecksumError(f"checksum mismatch in tensor {e['name']}", sample=e["name"])
        arr = np.frombuffer(chunk, dtype=e["dtype"]).reshape(e["shape"]).copy()
        t = torch.from_numpy(arr).to(_TORCH[e["dtype"]])
        kind, _, rest = e["name"].partition("/")
        if kind == "model":
            model_state[rest] = t
            groups[rest] = e["group"]
        elif kind == "optim":
            idx, key = rest.split("/")
            optim.setdefault(int(idx), {})[key] = t
        else:
            rng["torch"] = t
    rng.update(meta["rng"])
    opt_state = None
    if meta["optimizer_param_groups"] is not None:
        opt_state = {"state": optim, "param_groups": meta["optimizer_param_groups"]}
    return Checkpoint(model_state, opt_state, meta["config"], meta["step"], meta["epoch"],
                      meta["mean_scales"], meta["history"], meta["pretrain_history"], rng, groups)


def make_checkpoint(state: Stage1, epoch: int, history, pretrain_history, mean_scales) -> Checkpoint:
    return Checkpoint(
        model_state={k: v.detach().clone() for k, v in state.model.state_dict().items()},
        optimizer_state=copy.deepcopy(state.optimizer.state_dict()),
        config=state.cfg.to_dict(), step=state.step, epoch=epoch,
        mean_scales=np.asarray(mean_scales).tolist(), history=list(history),
        pretrain_history=list(pretrain_history),
        rng={"seed": state.cfg.seed, "epoch": epoch, "torch": torch.get_rng_state()},
        groups=state.model.named_groups(),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[CLIPoseModel, TrainConfig]:
    cfg = TrainConfig.from_dict(ckpt.config)
    model = CLIPoseModel(cfg.model, cfg.prompt, cfg.one_hot)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model, cfg


# ---------------------------------------------------------------------------
# driver

def _splits(dataset):
    if isinstance(dataset, dict):
        return list(dataset.get("train", [])), list(dataset.get("test", []))
    return dataset.split("train"), dataset.split("test")


def _augmented(samples, cfg: TrainConfig, epoch: int, order):
    return [augment(samples[i], [cfg.seed, epoch, int(i)], cfg.augmentation) for i in order]


def setup_determinism(cfg: TrainConfig):
    torch.set_num_threads(cfg.threads)
    torch.use_deterministic_algorithms(True)


def fit(cfg: TrainConfig, dataset, out_dir=None, resume: Checkpoint | None = None,
        backbone: dict | None = None, stop_after_epoch: int | None = None):
    """Stage 0 (unless resuming or given a pre-aligned ``backbone`` state) then Stage-1 epochs.

    Returns ``(checkpoint, history)``.  With ``out_dir`` a checkpoint is
    written after every epoch and the history to ``history.jsonl``.
    """
    setup_determinism(cfg)
    train, test = _splits(dataset)
    torch.manual_seed(cfg.seed)
    model = CLIPoseModel(cfg.model, cfg.prompt, cfg.one_hot, seed=cfg.seed)
    pretrain_history: list = []
    history: list = []
    start_epoch = 0
    mean_scales = category_mean_scales(train)
    if resume is not None:
        model.load_state_dict(resume.model_state)
        mean_scales = np.asarray(resume.mean_scales)
        history, pretrain_history = list(resume.history), list(resume.pretrain_history)
        start_epoch = resume.epoch
    elif backbone is not None:
        model.load_state_dict(backbone, strict=False)
        model.image_encoder.set_prompts(cfg.prompt, generator=_seeded_generator(cfg.seed, 0x9807))
    elif cfg.pretrain.steps > 0:
        pool = pretrain_pool(cfg, data_config_of(dataset))
        pretrain_history = pretrain_align(model, pool, cfg.pretrain.steps, cfg)
    state = Stage1(model, cfg, mean_scales)
    if resume is not None and resume.optimizer_state is not None:
        state.optimizer.load_state_dict(resume.optimizer_state)
        state.step = resume.step
    if resume is not None and "torch" in resume.rng:
        torch.set_rng_state(resume.rng["torch"])

    n_batches = len(train) // cfg.batch_size
    if n_batches == 0 and cfg.epochs > 0:
        raise ValueError(f"training split ({len(train)}) smaller than one batch ({cfg.batch_size})")
    total_steps = cfg.epochs * n_batches
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt = make_checkpoint(state, start_epoch, history, pretrain_history, mean_scales)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if resume is None:
            save_checkpoint(ckpt, out_dir / "checkpoint")
    last = stop_after_epoch if stop_after_epoch is not None else cfg.epochs
    for epoch in range(start_epoch, min(cfg.epochs, last)):
        order = _rng(cfg.seed, 0x5EED, epoch).permutation(len(train))
        sums: dict = {}
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            samples = _augmented(train, cfg, epoch, idx)
            rec = train_step(collate(samples, cfg.text_with_pose), state,
                             lr_schedule(state.step, total_steps, cfg))
            for k, v in rec.items():
                if k not in ("step", "lr"):
                    sums[k] = sums.get(k, 0.0) + v
        entry = {"epoch": epoch + 1, "step": state.step, "lr": lr_schedule(state.step, total_steps, cfg),
                 **{k: v / max(n_batches, 1) for k, v in sums.items()}}
        if test and ((epoch + 1) % cfg.eval_interval == 0 or epoch + 1 == cfg.epochs):
            report, _ = evaluate(model, test, mean_scales, cfg)
            entry["metrics"] = report.to_dict()
        history.append(entry)
        log.info("epoch %d %s", epoch + 1, {k: round(v, 4) for k, v in entry.items()
                                            if isinstance(v, float)})
        ckpt = make_checkpoint(state, epoch + 1, history, pretrain_history, mean_scales)
        if out_dir is not None:
            save_checkpoint(ckpt, out_dir / "checkpoint")
            write_history(history, out_dir / "history.jsonl")
    return ckpt, history


def write_history(history, path):
    with open(path, "w") as f:
        for h in history:
            f.write(json.dumps(h, sort_keys=True, ensure_ascii=False) + "\n")


def read_history(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def backbone_state(model: CLIPoseModel) -> dict:
    """Image/text encoder tensors (no prompts), for reuse across Stage-1 runs."""
    return {k: v.detach().clone() for k, v in model.state_dict().items()
            if k.startswith(("image_encoder.", "text_encoder.")) and ".prompts." not in k}


def data_config_of(dataset) -> DataConfig:
    manifest = getattr(dataset, "manifest", None)
    if manifest is not None and manifest.config:
        return DataConfig.from_dict(manifest.config)
    train, _ = _splits(dataset)
    if train:
        # in-memory splits: match the sample shapes so Stage-0 patches fit the image encoder
        n, p = len(train[0].points), train[0].image.shape[0]
        return DataConfig(n_points=n, patch_size=p, dense_points=max(4 * n, DataConfig.dense_points))
    return DataConfig()


def pretrain_pool(cfg: TrainConfig, data_config: DataConfig | None = None) -> list[Triplet]:
    """Image/caption pairs for Stage 0, generated under their own split name."""
    return generate_split(cfg.pretrain.pool_per_category, cfg.seed, data_config, "pretrain")


def pretrain_backbone(cfg: TrainConfig, data_config: DataConfig | None = None) -> tuple[dict, list]:
    setup_determinism(cfg)
    torch.manual_seed(cfg.seed)
    model = CLIPoseModel(cfg.model, PromptConfig(0), seed=cfg.seed)
    hist = []
    if cfg.pretrain.steps > 0:
        hist = pretrain_align(model, pretrain_pool(cfg, data_config), cfg.pretrain.steps, cfg)
    return backbone_state(model), hist
