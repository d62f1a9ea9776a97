"""End-to-end adversarial training of the noise generator, discriminator and sampler."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, pk_batches
from .discriminator import PyramidDiscriminator, discriminator_step, sample_real_pairs
from .generator import AdversarialExample, NoiseGenerator, certify_budget, compose_adversarial
from .losses import (LossParts, LossWeights, NonFiniteLoss, gan_generator_loss, misclass_loss,
                     misrank_loss, msssim, total_loss)
from .models import EmbeddingModel
from .sampler import GumbelDraw, TauSchedule, parse_ratio, ratio_to_k, sample_mask

log = logging.getLogger(__name__)

OBJECTIVES = ("xent+etri", "xent", "etri", "gan")
LOSS_COLUMNS = ("step", "L_GAN_D", "L_GAN_G", "L_xent", "L_etri", "msssim", "total")


@dataclass
class AttackConfig:
    epsilon_byte: float = 16.0
    ratio: str = "1"
    epochs: int = 50
    P: int = 8
    C: int = 4
    lr: float = 2e-4
    tau_start: float = 1.0
    tau_decay: float = 0.95
    tau_floor: float = 0.1
    zeta: float = 2.0
    eta: float = 5.0
    delta: float = 0.1
    margin: float = 0.3
    msssim_levels: int | None = None
    objective: str = "xent+etri"
    generator_width: int = 16
    disc_widths: tuple[int, ...] = (32, 64, 128, 256)
    disc_fusion_width: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.epsilon_byte <= 0:
            raise ValueError("epsilon_byte must be positive")
        r = parse_ratio(self.ratio)
        if not 0 < r <= 1:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        self.ratio = str(r)
        self.disc_widths = tuple(int(v) for v in self.disc_widths)

    @property
    def batch_size(self) -> int:
        return self.P * self.C

    @property
    def ratio_value(self) -> Fraction:
        return parse_ratio(self.ratio)

    def weights(self) -> LossWeights:
        return LossWeights(zeta=self.zeta, eta=self.eta, delta=self.delta, margin=self.margin,
                           msssim_levels=self.msssim_levels)

    def tau_schedule(self) -> TauSchedule:
        return TauSchedule(self.tau_start, self.tau_decay, self.tau_floor)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown attack config keys {sorted(unknown)}; valid keys: {sorted(names)}")
        return cls(**d)


class Attacker:
    """Generator + discriminator + sampler settings; produces adversarial examples."""

    def __init__(self, config: AttackConfig, image_size: tuple[int, int] = (64, 32),
                 generator: NoiseGenerator | None = None, discriminator: torch.nn.Module | None = None):
        self.config = config
        self.image_size = tuple(image_size)
        torch.manual_seed(config.seed)
        self.G = generator or NoiseGenerator(config.epsilon_byte, config.generator_width)
        self.D = discriminator or PyramidDiscriminator(config.disc_widths, config.disc_fusion_width)
        self.tau = config.tau_start
        self.epoch = 0

    def k_for(self, ratio=None) -> int:
        return ratio_to_k(self.config.ratio_value if ratio is None else parse_ratio(ratio), *self.image_size)

    def eval(self) -> "Attacker":
        self.G.eval()
        self.D.eval()
        return self

    def perturb(self, images: torch.Tensor, ratio=None, epsilon_byte: float | None = None,
                draw: GumbelDraw | None = None, tau: float | None = None,
                zero_noise: bool = False) -> AdversarialExample:
        """Adversarial examples for a batch. ``draw=None`` gives the deterministic mask."""
        eps = self.config.epsilon_byte if epsilon_byte is None else epsilon_byte
        prelim = self.G(images)
        if zero_noise:
            prelim = torch.zeros_like(prelim)
        lam = self.D(images, images).lambda_map
        mask = sample_mask(lam, self.k_for(ratio), self.tau if tau is None else tau, draw)
        return compose_adversarial(images, prelim, mask.hard, eps)

    @torch.no_grad()
    def perturb_all(self, images: torch.Tensor, batch_size: int = 64, **kw) -> tuple[torch.Tensor, torch.Tensor]:
        """Perturb in evaluation mode; returns (perturbed images, binary masks [N, H, W])."""
        self.eval()
        outs, masks = [], []
        eps = kw.get("epsilon_byte") or self.config.epsilon_byte
        for i in range(0, len(images), batch_size):
            x = images[i:i + batch_size]
            adv = self.perturb(x, **kw)
            certify_budget(x, adv.perturbed, eps)
            outs.append(adv.perturbed)
            masks.append(adv.mask[:, 0])
        return torch.cat(outs), torch.cat(masks)

    # -- persistence -------------------------------------------------------

    def save(self, path: str | os.PathLike, optimizers: dict | None = None) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        torch.save(self.G.state_dict(), path / "generator.pt")
        torch.save(self.D.state_dict(), path / "discriminator.pt")
        with open(path / "attacker.txt", "w", encoding="utf-8") as fh:
            fh.write(f"config = {self.config.to_json()}\n")
            fh.write(f"image_size = {self.image_size[0]}x{self.image_size[1]}\n")
            fh.write(f"tau = {self.tau!r}\n")
            fh.write(f"epoch = {self.epoch}\n")
            fh.write(f"k = {self.k_for()}\n")
        if optimizers is not None:
            torch.save({k: o.state_dict() for k, o in optimizers.items()}, path / "optim.pt")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Attacker":
        from .models import read_keyvalue

        path = Path(path)
        meta = read_keyvalue(path / "attacker.txt")
        cfg = json.loads(meta["config"])
        cfg["disc_widths"] = tuple(cfg["disc_widths"])
        h, w = (int(v) for v in meta["image_size"].split("x"))
        att = cls(AttackConfig(**cfg), (h, w))
        att.G.load_state_dict(torch.load(path / "generator.pt", weights_only=True))
        att.D.load_state_dict(torch.load(path / "discriminator.pt", weights_only=True))
        att.tau = float(meta["tau"])
        att.epoch = int(meta["epoch"])
        return att.eval()


@dataclass
class TrainResult:
    attacker: Attacker
    step_log: list[dict] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)


def _freeze(model: EmbeddingModel) -> None:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)


def attack_step(attacker: Attacker, target: EmbeddingModel, images: torch.Tensor, ids: torch.Tensor,
                tau: float, draw: GumbelDraw | None, weights: LossWeights, objective: str):
    """Forward pass of the full objective for one batch. Returns (total, parts, adversarial example)."""
    G, D = attacker.G, attacker.D
    prelim = G(images)
    # the mask is derived from the clean image so it does not depend on the noise it gates
    lam = D(images, images).lambda_map
    mask = sample_mask(lam, attacker.k_for(), tau, draw)
    adv = compose_adversarial(images, prelim, mask.hard, attacker.config.epsilon_byte)

    with torch.no_grad():
        clean_emb, clean_logits = target(images)
    adv_emb, adv_logits = target(adv.perturbed)
    xent = misclass_loss(F.log_softmax(adv_logits, 1), clean_logits, ids, weights.delta)
    # anchors are adversarial, their ranking partners are the clean batch
    etri = misrank_loss(adv_emb, ids, weights.margin, reference=clean_emb)
    ms = msssim(images, adv.perturbed, levels=weights.msssim_levels)
    gan_g = gan_generator_loss(D(images, adv.perturbed, with_lambda=False).stage_scores)

    use_xent = objective in ("xent+etri", "xent")
    use_etri = objective in ("xent+etri", "etri")
    parts = LossParts(gan=gan_g, xent=xent if use_xent else 0.0 * xent,
                      etri=etri if use_etri else 0.0 * etri, msssim=ms,
                      extra={"xent_raw": xent.detach(), "etri_raw": etri.detach()})
    return total_loss(parts, weights), parts, adv


def train_attacker(target: EmbeddingModel, manifest: DatasetManifest, config: AttackConfig | None = None,
                   out_dir: str | os.PathLike | None = None, discriminator: torch.nn.Module | None = None,
                   resume: bool = False, max_steps: int | None = None) -> TrainResult:
    """Alternate one generator/sampler update with one discriminator update per batch.

    The target is frozen (white-box gradients only). Per epoch the temperature is
    annealed and, when ``out_dir`` is given, a checkpoint plus loss CSVs are written.
    """
    config = config or AttackConfig()
    weights = config.weights()
    torch.manual_seed(config.seed)
    np.random.seed(config.seed)
    _freeze(target)

    attacker = Attacker(config, manifest.size, discriminator=discriminator)
    G, D = attacker.G, attacker.D
    resp_params = list(D.response_parameters()) if hasattr(D, "response_parameters") else []
    opt_g = torch.optim.Adam(list(G.parameters()) + resp_params, lr=config.lr)
    branch_params = list(D.branch_parameters()) if hasattr(D, "branch_parameters") else list(D.parameters())
    opt_d = torch.optim.Adam(branch_params, lr=config.lr)
    schedule = config.tau_schedule()
    gen = torch.Generator().manual_seed(config.seed + 1)

    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(attacker)
    start_epoch = 0
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / "attacker.txt").exists():
            start_epoch = _resume(out, attacker, opt_g, opt_d, gen, result)

    step = len(result.step_log)
    for epoch in range(start_epoch, config.epochs):
        tau = schedule(epoch)
        attacker.tau = tau
        G.train()
        D.train()
        epoch_rows = []
        for batch in pk_batches(manifest, config.P, config.C, config.seed, epoch):
            x, ids = batch.images, batch.person_ids
            draw = GumbelDraw.sample((len(x),) + tuple(manifest.size), generator=gen)
            try:
                total, parts, adv = attack_step(attacker, target, x, ids, tau, draw, weights, config.objective)
                if not torch.isfinite(total):
                    raise NonFiniteLoss(f"total loss is {total.item()}")
            except (NonFiniteLoss, FloatingPointError) as exc:
                _dump_batch(out, x, ids, step)
                raise NonFiniteLoss(f"step {step}: {exc}") from exc
            certify_budget(x, adv.perturbed, config.epsilon_byte)

            opt_g.zero_grad()
            total.backward()
            opt_g.step()

            real = sample_real_pairs(x, ids, gen)
            d_loss = discriminator_step(D, opt_d, real, (x, adv.perturbed.detach()))
            if not torch.isfinite(d_loss):
                _dump_batch(out, x, ids, step)
                raise NonFiniteLoss(f"step {step}: discriminator loss {d_loss.item()}")

            row = {"step": step, "epoch": epoch, "L_GAN_D": d_loss.item(), "L_GAN_G": parts.gan.item(),
                   "L_xent": parts.extra["xent_raw"].item(), "L_etri": parts.extra["etri_raw"].item(),
                   "msssim": parts.msssim.item(), "total": total.item()}
            result.step_log.append(row)
            epoch_rows.append(row)
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        summary = {"epoch": epoch, "tau": tau, **{c: float(np.mean([r[c] for r in epoch_rows]))
                                                  for c in LOSS_COLUMNS[1:]}}
        result.epoch_log.append(summary)
        attacker.epoch = epoch + 1
        log.info("attack epoch %d tau %.3f total %.4f etri %.3f xent %.3f msssim %.4f", epoch, tau,
                 summary["total"], summary["L_etri"], summary["L_xent"], summary["msssim"])
        if out is not None:
            _write_logs(out, result)
            attacker.save(out, {"G": opt_g, "D": opt_d})
            torch.save({"gen": gen.get_state()}, out / "rng.pt")
        if max_steps is not None and step >= max_steps:
            break
    attacker.eval()
    return result


def _write_logs(out: Path, result: TrainResult) -> None:
    with open(out / "losses.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=("epoch",) + LOSS_COLUMNS)
        w.writeheader()
        for r in result.step_log:
            w.writerow({k: r[k] for k in ("epoch",) + LOSS_COLUMNS})
    with open(out / "epoch_losses.csv", "w", newline="", encoding="utf-8") as fh:
        cols = ("epoch", "tau") + LOSS_COLUMNS[1:]
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in result.epoch_log:
            w.writerow({k: r[k] for k in cols})


def _read_csv(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def _resume(out: Path, attacker: Attacker, opt_g, opt_d, gen: torch.Generator, result: TrainResult) -> int:
    saved = Attacker.load(out)
    attacker.G.load_state_dict(saved.G.state_dict())
    attacker.D.load_state_dict(saved.D.state_dict())
    states = torch.load(out / "optim.pt", weights_only=False)
    opt_g.load_state_dict(states["G"])
    opt_d.load_state_dict(states["D"])
    if (out / "rng.pt").exists():
        gen.set_state(torch.load(out / "rng.pt", weights_only=False)["gen"])
    if (out / "losses.csv").exists():
        result.step_log.extend(_read_csv(out / "losses.csv"))
        result.epoch_log.extend(_read_csv(out / "epoch_losses.csv"))
    log.info("resuming attacker training at epoch %d", saved.epoch)
    return saved.epoch


def _dump_batch(out: Path | None, x, ids, step: int) -> None:
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        torch.save({"images": x, "ids": ids, "step": step}, out / "nan_batch.pt")

