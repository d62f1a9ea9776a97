"""Target ReID systems: two small embedding CNNs, their trainer, checkpoints and a name registry."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DatasetManifest, pk_batches

log = logging.getLogger(__name__)

# (conv widths, positions of 2x2 max-pool after a conv, embed_dim)
BACKBONES = {
    "toy_cnn_a": ((32, 64, 96, 128), (0, 1, 2), 64),
    "toy_cnn_b": ((24, 48, 48, 96, 96, 160), (1, 3, 4), 128),
}


class TrainingDiverged(RuntimeError):
    pass


class EmbeddingModel(nn.Module):
    """Conv trunk -> global average pool -> embedding -> ID classifier."""

    def __init__(self, backbone_id: str, num_ids: int, embed_dim: int | None = None,
                 normalize_embeddings: bool = False, image_size: tuple[int, int] = (64, 32)):
        super().__init__()
        if backbone_id not in BACKBONES:
            raise ValueError(f"unknown backbone {backbone_id!r}; choose from {sorted(BACKBONES)}")
        widths, pools, default_dim = BACKBONES[backbone_id]
        self.backbone_id = backbone_id
        self.num_ids = num_ids
        self.embed_dim = embed_dim or default_dim
        self.normalize_embeddings = normalize_embeddings
        self.image_size = tuple(image_size)
        self.trained = False

        layers, cin = [], 3
        for i, cout in enumerate(widths):
            layers += [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
            if i in pools:
                layers.append(nn.MaxPool2d(2))
            cin = cout
        self.trunk = nn.Sequential(*layers)
        self.embedding = nn.Linear(cin, self.embed_dim)
        self.classifier = nn.Linear(self.embed_dim, num_ids)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if tuple(x.shape[-2:]) != self.image_size:
            raise ValueError(f"{self.backbone_id} expects {self.image_size} inputs, got {tuple(x.shape[-2:])}")
        f = self.trunk(x).mean(dim=(2, 3))
        emb = self.embedding(f)
        logits = self.classifier(emb)
        if self.normalize_embeddings:
            emb = F.normalize(emb, dim=1)
        return emb, logits


def embed(model: EmbeddingModel, batch: torch.Tensor) -> torch.Tensor:
    return model(batch)[0]


def logits(model: EmbeddingModel, batch: torch.Tensor) -> torch.Tensor:
    return model(batch)[1]


@torch.no_grad()
def extract(model: EmbeddingModel, images: torch.Tensor, batch_size: int = 128) -> tuple[torch.Tensor, torch.Tensor]:
    was_training = model.training
    model.eval()
    embs, logs = [], []
    for i in range(0, len(images), batch_size):
        e, l = model(images[i:i + batch_size])
        embs.append(e)
        logs.append(l)
    model.train(was_training)
    return torch.cat(embs), torch.cat(logs)


def batch_hard_triplet(emb: torch.Tensor, ids: torch.Tensor, margin: float) -> torch.Tensor:
    """Standard triplet loss with hardest positive / hardest negative per anchor."""
    d = torch.cdist(emb, emb).pow(2)
    same = ids[:, None] == ids[None, :]
    hardest_pos = d.masked_fill(~same, float("-inf")).amax(1)
    hardest_neg = d.masked_fill(same, float("inf")).amin(1)
    return F.relu(hardest_pos - hardest_neg + margin).mean()


def augment(x: torch.Tensor, shift: int = 2) -> torch.Tensor:
    """Random horizontal flip and a +-``shift`` pixel translation (replicate padding)."""
    b, _, h, w = x.shape
    flip = torch.rand(b) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    padded = F.pad(x, (shift, shift, shift, shift), mode="replicate")
    offsets = torch.randint(0, 2 * shift + 1, (b, 2))
    return torch.stack([padded[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offsets.tolist())])


@dataclass
class TargetConfig:
    backbone: str = "toy_cnn_a"
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 5e-4
    P: int = 8
    C: int = 4
    margin: float = 0.3
    triplet_weight: float = 1.0
    embed_dim: int | None = None
    normalize_embeddings: bool = False
    seed: int = 0


@dataclass
class ModelCheckpoint:
    model: EmbeddingModel
    config: TargetConfig
    clean_report: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def train_target(manifest: DatasetManifest, backbone_id: str = "toy_cnn_a",
                 config: TargetConfig | None = None, evaluate: bool = True) -> ModelCheckpoint:
    """Cross-entropy over train identities plus a batch-hard triplet term."""
    from .metrics import evaluate_clean  # metrics imports models

    config = config or TargetConfig(backbone=backbone_id)
    config.backbone = backbone_id
    if len(manifest.indices("train")) == 0:
        raise ValueError("train split is empty")
    _seed_everything(config.seed)
    model = EmbeddingModel(backbone_id, manifest.num_ids, config.embed_dim,
                           config.normalize_embeddings, manifest.size)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(config.epochs, 1))
    history = []
    model.train()
    for epoch in range(config.epochs):
        tot, n = 0.0, 0
        for batch in pk_batches(manifest, config.P, config.C, config.seed, epoch):
            x = augment(batch.images)
            emb, logit = model(x)
            loss = F.cross_entropy(logit, batch.person_ids) + config.triplet_weight * batch_hard_triplet(
                emb, batch.person_ids, config.margin)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"target loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item()
            n += 1
        sched.step()
        history.append({"epoch": epoch, "loss": tot / max(n, 1)})
        log.info("target %s epoch %d loss %.4f", backbone_id, epoch, tot / max(n, 1))
    model.eval()
    model.trained = config.epochs > 0
    ckpt = ModelCheckpoint(model=model, config=config, history=history)
    if evaluate:
        ckpt.clean_report = evaluate_clean(model, manifest).as_dict()
    return ckpt


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(ckpt: ModelCheckpoint, path: str | os.PathLike) -> Path:
    """Directory with ``weights.pt`` and ``meta.txt`` (key = value lines)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    m = ckpt.model
    torch.save(m.state_dict(), path / "weights.pt")
    meta = {
        "backbone_id": m.backbone_id,
        "embed_dim": m.embed_dim,
        "num_ids": m.num_ids,
        "normalize_embeddings": m.normalize_embeddings,
        "image_size": f"{m.image_size[0]}x{m.image_size[1]}",
        "trained": m.trained,
        "config": json.dumps(asdict(ckpt.config)),
        "clean_report": json.dumps(ckpt.clean_report),
    }
    with open(path / "meta.txt", "w", encoding="utf-8") as fh:
        for k, v in meta.items():
            fh.write(f"{k} = {v}\n")
    if ckpt.history:
        with open(path / "train_log.csv", "w", encoding="utf-8") as fh:
            fh.write("epoch,loss\n")
            for row in ckpt.history:
                fh.write(f"{row['epoch']},{row['loss']:.6f}\n")
    return path


def read_keyvalue(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def load_checkpoint(path: str | os.PathLike) -> ModelCheckpoint:
    path = Path(path)
    meta = read_keyvalue(path / "meta.txt")
    h, w = (int(v) for v in meta["image_size"].split("x"))
    model = EmbeddingModel(meta["backbone_id"], int(meta["num_ids"]), int(meta["embed_dim"]),
                           meta["normalize_embeddings"] == "True", (h, w))
    model.load_state_dict(torch.load(path / "weights.pt", weights_only=True))
    model.trained = meta.get("trained") == "True"
    model.eval()
    config = TargetConfig(**json.loads(meta["config"]))
    return ModelCheckpoint(model=model, config=config, clean_report=json.loads(meta["clean_report"]))


class Registry:
    """Plain-text ``name<TAB>path`` index mapping checkpoint names to directories."""

    def __init__(self, index_file: str | os.PathLike):
        self.index_file = Path(index_file)

    def entries(self) -> dict[str, str]:
        if not self.index_file.exists():
            return {}
        out = {}
        with open(self.index_file, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    name, _, p = line.rstrip("\n").partition("\t")
                    out[name] = p
        return out

    def register(self, name: str, path: str | os.PathLike) -> None:
        entries = self.entries()
        entries[name] = str(Path(path).resolve())
        self.index_file.parent.mkdir(parents=True, exist_ok=True)
        with open(self.index_file, "w", encoding="utf-8") as fh:
            for k, v in sorted(entries.items()):
                fh.write(f"{k}\t{v}\n")

    def resolve(self, name_or_path: str) -> Path:
        p = Path(name_or_path)
        if (p / "meta.txt").exists() or (p / "attacker.txt").exists():
            return p
        entries = self.entries()
        if name_or_path in entries:
            return Path(entries[name_or_path])
        raise KeyError(f"{name_or_path!r} is neither a checkpoint directory nor a registered name")
