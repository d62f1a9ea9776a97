"""Retrieval metrics (CMC rank-k, mAP) and report containers."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch

log = logging.getLogger(__name__)

RANKS = (1, 5, 10, 20)
CONDITIONS = ("clean", "attacked", "baseline_gaussian", "baseline_uniform")
REPORT_COLUMNS = ("condition", "rank1", "rank5", "rank10", "rank20", "mAP", "Q", "G", "eps", "ratio", "seed")


@dataclass
class RankingReport:
    rank_k: dict[int, float]
    mAP: float
    num_queries: int
    num_gallery: int
    condition: str = "clean"
    skipped_queries: int = 0
    extra: dict = field(default_factory=dict)  # eps, ratio, seed, location, ...

    @property
    def rank1(self) -> float:
        return self.rank_k[1]

    def as_dict(self) -> dict:
        return {
            "condition": self.condition,
            **{f"rank{k}": v for k, v in self.rank_k.items()},
            "mAP": self.mAP, "Q": self.num_queries, "G": self.num_gallery,
            "skipped": self.skipped_queries, **self.extra,
        }

    def row(self) -> dict:
        d = self.as_dict()
        return {c: d.get(c, "") for c in REPORT_COLUMNS}

    def same_metrics(self, other: "RankingReport") -> bool:
        return self.rank_k == other.rank_k and self.mAP == other.mAP


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def cmc_map(query_emb, query_ids, query_cams, gallery_emb, gallery_ids, gallery_cams,
            ranks=RANKS, condition: str = "clean") -> RankingReport:
    """Single-query ReID evaluation with squared-L2 ranking.

    Gallery entries sharing both identity and camera with the query are dropped from
    its ranking. Queries left without any true match are skipped and counted.
    Distance ties are broken by gallery order.
    """
    qf = _np(query_emb)
    gf = _np(gallery_emb)
    q_ids, q_cams = _np(query_ids).astype(np.int64), _np(query_cams).astype(np.int64)
    g_ids, g_cams = _np(gallery_ids).astype(np.int64), _np(gallery_cams).astype(np.int64)
    if len(qf) < 1 or len(gf) < 1:
        raise ValueError("need at least one query and one gallery item")
    dist = squared_distances(qf, gf)

    max_rank = max(ranks)
    cmc = np.zeros(max_rank)
    aps = []
    skipped = 0
    for i in range(len(qf)):
        order = np.argsort(dist[i], kind="stable")
        junk = (g_ids[order] == q_ids[i]) & (g_cams[order] == q_cams[i])
        order = order[~junk]
        hits = g_ids[order] == q_ids[i]
        if not hits.any():
            skipped += 1
            continue
        pos = np.flatnonzero(hits)  # 0-based positions of true matches
        first = pos[0]
        if first < max_rank:
            cmc[first:] += 1
        aps.append(np.mean(np.arange(1, len(pos) + 1) / (pos + 1)))

    valid = len(aps)
    if valid == 0:
        rank_k = {k: 0.0 for k in ranks}
        mean_ap = 0.0
    else:
        rank_k = {k: float(cmc[k - 1] / valid) for k in ranks}
        mean_ap = float(np.mean(aps))
    return RankingReport(rank_k, mean_ap, len(qf), len(gf), condition, skipped)


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def evaluate_embeddings(model, query_images: torch.Tensor, manifest, condition: str = "clean",
                        gallery_emb: torch.Tensor | None = None) -> RankingReport:
    """Rank the clean gallery of ``manifest`` for the given (possibly perturbed) query images."""
    from .models import extract

    q_emb, _ = extract(model, query_images)
    if gallery_emb is None:
        gallery_emb, _ = extract(model, manifest.tensor("gallery"))
    return cmc_map(q_emb, manifest.person_ids("query"), manifest.camera_ids("query"),
                   gallery_emb, manifest.person_ids("gallery"), manifest.camera_ids("gallery"),
                   condition=condition)


def evaluate_clean(model, manifest) -> RankingReport:
    return evaluate_embeddings(model, manifest.tensor("query"), manifest)


def write_reports_csv(reports: list[RankingReport], path: str | os.PathLike, extra_columns=()) -> None:
    cols = list(extra_columns) + list(REPORT_COLUMNS)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in reports:
            row = {**r.row(), **{c: r.extra.get(c, "") for c in extra_columns}}
            w.writerow({c: _fmt(row.get(c, "")) for c in cols})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Fixed-width text table for terminals and ``*.txt`` reports."""
    cells = [[str(_fmt_text(r.get(c, ""))) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    line = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    out = [line, "-" * len(line)]
    out += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(out) + "\n"


def _fmt_text(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return v


# -- attack evaluation ----------------------------------------------------------

def _gallery(model, manifest):
    from .models import extract

    return extract(model, manifest.tensor("gallery"))[0]


def attack_eval(attacker, target, manifest, epsilon: float | None = None, ratio=None,
                gallery_emb: torch.Tensor | None = None, return_masks: bool = False):
    """Clean vs attacked report. Only queries are perturbed; the gallery stays clean.

    Masks are deterministic (no Gumbel noise) and every perturbed query is checked
    against the budget in float64; a violation raises ``BudgetViolation``.
    """
    eps = float(attacker.config.epsilon_byte if epsilon is None else epsilon)
    r = attacker.config.ratio if ratio is None else str(ratio)
    x = manifest.tensor("query")
    if gallery_emb is None:
        gallery_emb = _gallery(target, manifest)
    extra = {"eps": eps, "ratio": r, "seed": attacker.config.seed}
    clean = evaluate_embeddings(target, x, manifest, "clean", gallery_emb)
    adv, masks = attacker.perturb_all(x, ratio=r, epsilon_byte=eps)
    attacked = evaluate_embeddings(target, adv, manifest, "attacked", gallery_emb)
    clean.extra.update(extra)
    attacked.extra.update(extra)
    if return_masks:
        return clean, attacked, masks
    return clean, attacked


NOISE_KINDS = ("gaussian", "uniform")
NOISE_LOCATIONS = ("random", "learned")


def random_masks(n: int, height: int, width: int, k: int, generator: torch.Generator) -> torch.Tensor:
    """n binary [H, W] masks with k pixels each, chosen uniformly at random."""
    order = torch.rand(n, height * width, generator=generator).argsort(1)[:, :k]
    return torch.zeros(n, height * width).scatter_(1, order, 1.0).reshape(n, height, width)


def sample_noise(shape, epsilon_byte: float, kind: str, generator: torch.Generator) -> torch.Tensor:
    """Uniform on [-eps, eps], or Gaussian with sigma = eps / 3 clipped to [-eps, eps]."""
    e = float(epsilon_byte) / 255.0
    if kind == "uniform":
        return (torch.rand(shape, generator=generator) * 2 - 1) * e
    if kind == "gaussian":
        return (torch.randn(shape, generator=generator) * (e / 3)).clamp(-e, e)
    raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {kind!r}")


def noise_baseline_eval(target, manifest, epsilon: float, location: str = "random", kind: str = "uniform",
                        attacker=None, ratio=None, seed: int = 0, trials: int = 1,
                        gallery_emb: torch.Tensor | None = None) -> RankingReport:
    """Random noise at random or attacker-chosen pixels, averaged over ``trials`` draws."""
    from .generator import certify_budget, compose_adversarial
    from .sampler import parse_ratio, ratio_to_k

    if location not in NOISE_LOCATIONS:
        raise ValueError(f"location must be one of {NOISE_LOCATIONS}, got {location!r}")
    if kind not in NOISE_KINDS:
        raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {kind!r}")
    if location == "learned" and attacker is None:
        raise ValueError("learned locations need a trained attacker")
    if ratio is None:
        ratio = attacker.config.ratio if attacker is not None else "1"
    condition = f"baseline_{kind}"
    extra = {"eps": float(epsilon), "ratio": str(parse_ratio(ratio)), "seed": seed, "location": location,
             "trials": trials}
    x = manifest.tensor("query")
    if gallery_emb is None:
        gallery_emb = _gallery(target, manifest)
    if epsilon == 0:
        rep = evaluate_embeddings(target, x, manifest, condition, gallery_emb)
        rep.extra.update(extra)
        return rep

    h, w = x.shape[-2:]
    gen = torch.Generator().manual_seed(seed)
    if location == "learned":
        _, masks = attacker.perturb_all(x, ratio=ratio, epsilon_byte=epsilon)
    reports = []
    for _ in range(trials):
        if location == "random":
            masks = random_masks(len(x), h, w, ratio_to_k(parse_ratio(ratio), h, w), gen)
        noise = sample_noise(x.shape, epsilon, kind, gen)
        adv = compose_adversarial(x, noise, masks, epsilon).perturbed
        certify_budget(x, adv, epsilon)
        reports.append(evaluate_embeddings(target, adv, manifest, condition, gallery_emb))
    return _average_reports(reports, condition, extra)


def _average_reports(reports: list[RankingReport], condition: str, extra: dict) -> RankingReport:
    first = reports[0]
    rank_k = {k: float(np.mean([r.rank_k[k] for r in reports])) for k in first.rank_k}
    return RankingReport(rank_k, float(np.mean([r.mAP for r in reports])), first.num_queries, first.num_gallery,
                         condition, first.skipped_queries, dict(extra))


# -- transfer -------------------------------------------------------------------

@dataclass
class TransferCell:
    source: tuple[str, str]  # (model, dataset) the attacker was trained on
    target: tuple[str, str]
    report: RankingReport  # attacked
    clean: RankingReport

    @property
    def is_transfer(self) -> bool:
        return self.source != self.target

    @property
    def drop(self) -> float:
        return self.clean.rank1 - self.report.rank1

    def row(self) -> dict:
        return {"source_model": self.source[0], "source_data": self.source[1],
                "target_model": self.target[0], "target_data": self.target[1],
                "clean_rank1": self.clean.rank1, "clean_mAP": self.clean.mAP,
                **{f"rank{k}": v for k, v in self.report.rank_k.items()}, "mAP": self.report.mAP,
                "drop_rank1": self.drop}


TRANSFER_COLUMNS = ("source_model", "source_data", "target_model", "target_data", "clean_rank1", "clean_mAP",
                    "rank1", "rank5", "rank10", "rank20", "mAP", "drop_rank1")


@dataclass
class Victim:
    model_name: str
    data_name: str
    model: torch.nn.Module
    manifest: object


def transfer_eval(attacker, source: tuple[str, str], victims: list[Victim]) -> list[TransferCell]:
    """Apply a frozen attacker to other models and/or datasets (no victim gradients).

    If a victim's images differ in size from the attacker's, the queries are resized
    to the attacker's resolution, the resulting perturbation is resized back, and the
    budget is re-imposed on the victim's originals.
    """
    import torch.nn.functional as F

    from .generator import certify_budget, project_linf

    eps = attacker.config.epsilon_byte
    cells = []
    for v in victims:
        x = v.manifest.tensor("query")
        gallery_emb = _gallery(v.model, v.manifest)
        clean = evaluate_embeddings(v.model, x, v.manifest, "clean", gallery_emb)
        if tuple(x.shape[-2:]) != tuple(attacker.image_size):
            log.warning("victim %s/%s images %s resized to attacker size %s", v.model_name, v.data_name,
                        tuple(x.shape[-2:]), attacker.image_size)
            small = F.interpolate(x, size=attacker.image_size, mode="bilinear", align_corners=False)
            adv_small, _ = attacker.perturb_all(small)
            delta = F.interpolate(adv_small - small, size=x.shape[-2:], mode="bilinear", align_corners=False)
            adv = (x + project_linf(delta, eps)).clamp(0, 1)
            certify_budget(x, adv, eps)
        else:
            adv, _ = attacker.perturb_all(x)
        attacked = evaluate_embeddings(v.model, adv, v.manifest, "attacked", gallery_emb)
        extra = {"eps": eps, "ratio": attacker.config.ratio, "seed": attacker.config.seed}
        clean.extra.update(extra)
        attacked.extra.update(extra)
        cells.append(TransferCell(tuple(source), (v.model_name, v.data_name), attacked, clean))
    return cells


def write_transfer_csv(cells: list[TransferCell], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=TRANSFER_COLUMNS)
        w.writeheader()
        for c in cells:
            w.writerow({k: _fmt(v) for k, v in c.row().items()})


# -- mask statistics ------------------------------------------------------------

def mask_frequency(masks) -> torch.Tensor:
    """Per-pixel mean of hard masks. Accepts SamplingMask objects, [H, W] tensors or an [N, H, W] stack."""
    if isinstance(masks, torch.Tensor) and masks.dim() == 3:
        stack = masks
    else:
        items = [m.binary if hasattr(m, "binary") else torch.as_tensor(m) for m in masks]
        if not items:
            raise ValueError("mask_frequency needs at least one mask")
        flat = []
        for m in items:
            flat.extend(m.reshape(-1, *m.shape[-2:]))
        shapes = {tuple(m.shape) for m in flat}
        if len(shapes) != 1:
            raise ValueError(f"masks differ in shape: {sorted(shapes)}")
        stack = torch.stack(flat)
    if len(stack) == 0:
        raise ValueError("mask_frequency needs at least one mask")
    return stack.detach().double().mean(0)


def average_image(images: torch.Tensor) -> torch.Tensor:
    return images.detach().double().mean(0)


def figure_concentration(masks, figure_masks) -> tuple[float, float]:
    """Mean mask frequency on figure pixels and on background pixels.

    With an [N, H, W] mask stack and matching per-image figure masks the means are
    taken over (image, pixel) pairs; a single [H, W] frequency map is compared with
    the majority figure region instead.
    """
    m = _np(masks).astype(np.float64)
    fig = np.asarray(figure_masks, dtype=bool)
    if m.ndim == 3 and fig.shape == m.shape:
        return float(m[fig].mean()), float(m[~fig].mean())
    if m.ndim == 3:
        m = m.mean(0)
    if fig.ndim == 3:
        fig = fig.mean(0) >= 0.5
    return float(m[fig].mean()), float(m[~fig].mean())
