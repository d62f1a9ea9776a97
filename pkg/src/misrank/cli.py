"""Command-line entry point: ``misrank <command> [options]``.

Every command reads a flat ``key = value`` config (``--config``), applies
``--set key=value`` overrides and dedicated flags, writes the resolved config to
``config.txt`` in its run directory and emits CSV plus text tables.

Exit status: 0 on success, 1 on a budget-certificate violation, 2 on usage or
configuration errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import fields
from fractions import Fraction
from pathlib import Path

from .data import ConfigurationError, IngestionError, export_reid_dir, gen_synthetic_dataset, load_dataset
from .generator import BudgetViolation

log = logging.getLogger("misrank")

RUNS_ENV = "MISRANK_RUNS_DIR"
EPS_GRID = (40, 20, 16, 10)
LOSS_VARIANTS = ("xent", "etri", "xent+etri", "gan")


class ConfigError(ValueError):
    pass


# -- config files -------------------------------------------------------------

def read_config(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def write_config(cfg: dict, path: str | os.PathLike, command: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# resolved configuration for 'misrank {command}'\n")
        for k in sorted(cfg):
            fh.write(f"{k} = {_show(cfg[k])}\n")


def _show(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(kind, text: str, key: str):
    text = text.strip()
    if kind is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if text == "" and kind is not str:
        return None
    try:
        if kind == "ints":
            return tuple(int(v) for v in text.split(","))
        if kind == "strs":
            return tuple(v.strip() for v in text.split(",") if v.strip())
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None


def resolve(schema: dict, file_values: dict[str, str], overrides: list[str], flags: dict) -> dict:
    """Defaults <- config file <- --set overrides <- dedicated flags."""
    cfg = {k: default for k, (_, default) in schema.items()}
    layers = [file_values]
    sets = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        sets[k.strip()] = v
    layers.append(sets)
    for layer in layers:
        unknown = sorted(set(layer) - set(schema))
        if unknown:
            raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {sorted(schema)}")
        for k, v in layer.items():
            cfg[k] = _parse(schema[k][0], v, k)
    for k, v in flags.items():
        if v is not None:
            cfg[k] = v
    return cfg


# -- schemas --------------------------------------------------------------------

def _attack_schema() -> dict:
    from .trainer import AttackConfig

    types = {"disc_widths": "ints", "ratio": str, "objective": str, "msssim_levels": int}
    out = {}
    for f in fields(AttackConfig):
        default = f.default
        out[f.name] = (types.get(f.name, type(default)), default)
    return out


COMMON = {"seed": (int, 0), "name": (str, "")}
DATA_KEYS = {"data": (str, "synthetic:7"), "layout": (str, "reid_dir"), "height": (int, 64), "width": (int, 32)}

SCHEMAS = {
    "make-data": {**COMMON, "ids": (int, 32), "per_id": (int, 16), "height": (int, 64), "width": (int, 32),
                  "cameras": (int, 4), "lighting": (float, 1.0)},
    "train-target": {**COMMON, **DATA_KEYS, "backbone": (str, "toy_cnn_a"), "epochs": (int, 30), "lr": (float, 1e-3),
                     "weight_decay": (float, 5e-4), "P": (int, 8), "C": (int, 4), "margin": (float, 0.3),
                     "triplet_weight": (float, 1.0), "embed_dim": (int, None),
                     "normalize_embeddings": (bool, False)},
    "train-attack": None,  # filled lazily from AttackConfig
    "attack-eval": {**COMMON, **DATA_KEYS, "attacker": (str, ""), "target": (str, ""), "eps": (float, None),
                    "ratio": (str, ""), "examples": (int, 4)},
    "transfer-eval": {**COMMON, "attacker": (str, ""), "source": (str, "source@data"),
                      "victims": ("strs", ()), "layout": (str, "reid_dir"), "height": (int, 64), "width": (int, 32)},
    "noise-baseline": {**COMMON, **DATA_KEYS, "target": (str, ""), "attacker": (str, ""), "eps": (float, 40.0),
                       "ratio": (str, "1/8"), "kinds": ("strs", ("gaussian", "uniform")),
                       "locations": ("strs", ("random", "learned")), "trials": (int, 5)},
    "mask-stats": {**COMMON, **DATA_KEYS, "attacker": (str, ""), "ratio": (str, "")},
    "ablate": None,
}


def schema_for(command: str) -> dict:
    if command == "train-attack":
        return {**_attack_schema(), **DATA_KEYS, "name": (str, ""), "target": (str, ""), "ratio_eps": (str, "")}
    if command == "ablate":
        return {**_attack_schema(), **DATA_KEYS, "name": (str, ""), "target": (str, ""), "preset": (str, "ratio-sweep"),
                "ratio_eps": (str, ""), "eps_grid": ("ints", EPS_GRID), "ratios": ("strs", ())}
    return SCHEMAS[command]


# -- run directories --------------------------------------------------------------

def runs_root(args) -> Path:
    return Path(args.runs_dir or os.environ.get(RUNS_ENV) or "runs")


def prepare_run_dir(args, command: str, cfg: dict) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        label = cfg.get("name") or time.strftime("%Y%m%d-%H%M%S")
        out = runs_root(args) / command / label
    if out.exists() and any(out.iterdir()):
        if not args.overwrite:
            raise ConfigError(f"run directory {out} already exists; pass --overwrite to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.txt", command)
    return out


def registry(args):
    from .models import Registry

    return Registry(runs_root(args) / "registry.txt")


def load_data(cfg: dict):
    ref = cfg["data"]
    if ref.startswith("synthetic:"):
        return gen_synthetic_dataset(seed=int(ref.split(":", 1)[1]), size=(cfg["height"], cfg["width"]))
    return load_dataset(ref, cfg["layout"], (cfg["height"], cfg["width"]))


def load_target(args, ref: str):
    from .models import load_checkpoint

    if not ref:
        raise ConfigError("a target checkpoint is required (key 'target')")
    return load_checkpoint(registry(args).resolve(ref))


def load_attacker(args, ref: str):
    from .trainer import Attacker

    if not ref:
        raise ConfigError("an attacker checkpoint is required (key 'attacker')")
    return Attacker.load(registry(args).resolve(ref))


def emit_table(rows: list[dict], columns, out: Path, stem: str) -> str:
    import csv

    from .metrics import _fmt, format_table

    with open(out / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r.get(c, "")) for c in columns})
    text = format_table(rows, list(columns))
    (out / f"{stem}.txt").write_text(text, encoding="utf-8")
    return text


def parse_ratio_eps(text: str) -> dict[Fraction, float]:
    """'1/32:40,1/64:40' -> per-ratio epsilon overrides."""
    from .sampler import parse_ratio

    out = {}
    for item in (t for t in text.split(",") if t.strip()):
        r, _, e = item.partition(":")
        if not e:
            raise ConfigError(f"ratio_eps entries look like 'ratio:eps', got {item!r}")
        out[parse_ratio(r)] = float(e)
    return out


def attack_config(cfg: dict, **changes):
    from .trainer import AttackConfig

    keys = {f.name for f in fields(AttackConfig)}
    values = {k: v for k, v in cfg.items() if k in keys and v is not None}
    values.update(changes)
    return AttackConfig.from_dict(values)


# -- commands ---------------------------------------------------------------------

def cmd_make_data(args, cfg, out: Path) -> int:
    m = gen_synthetic_dataset(cfg["ids"], cfg["per_id"], (cfg["height"], cfg["width"]), cfg["seed"],
                              cfg["cameras"], cfg["lighting"])
    export_reid_dir(m, out)
    counts = [{"split": s, "images": len(m.indices(s)), "ids": len(set(m.person_ids(s).tolist()))}
              for s in ("train", "query", "gallery")]
    print(emit_table(counts, ("split", "images", "ids"), out, "summary"), end="")
    return 0


def cmd_train_target(args, cfg, out: Path) -> int:
    from .metrics import REPORT_COLUMNS
    from .models import TargetConfig, save_checkpoint, train_target

    manifest = load_data(cfg)
    tc = TargetConfig(backbone=cfg["backbone"], epochs=cfg["epochs"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                      P=cfg["P"], C=cfg["C"], margin=cfg["margin"], triplet_weight=cfg["triplet_weight"],
                      embed_dim=cfg["embed_dim"], normalize_embeddings=cfg["normalize_embeddings"], seed=cfg["seed"])
    ckpt = train_target(manifest, cfg["backbone"], tc)
    save_checkpoint(ckpt, out)
    if cfg["name"]:
        registry(args).register(cfg["name"], out)
    print(emit_table([ckpt.clean_report], REPORT_COLUMNS, out, "clean_report"), end="")
    return 0


def cmd_train_attack(args, cfg, out: Path) -> int:
    from .trainer import LOSS_COLUMNS, train_attacker

    manifest = load_data(cfg)
    target = load_target(args, cfg["target"]).model
    overrides = parse_ratio_eps(cfg["ratio_eps"])
    ac = attack_config(cfg)
    if ac.ratio_value in overrides:
        ac = attack_config(cfg, epsilon_byte=overrides[ac.ratio_value])
    result = train_attacker(target, manifest, ac, out_dir=out, resume=args.resume)
    if cfg["name"]:
        registry(args).register(cfg["name"], out)
    plot_losses(result.epoch_log, out / "losses.png")
    print(emit_table(result.epoch_log[-1:], ("epoch", "tau") + LOSS_COLUMNS[1:], out, "final_losses"), end="")
    return 0


def cmd_attack_eval(args, cfg, out: Path) -> int:
    from .export import save_mask_png, save_noise_png, save_png16
    from .metrics import REPORT_COLUMNS, attack_eval

    manifest = load_data(cfg)
    target = load_target(args, cfg["target"]).model
    att = load_attacker(args, cfg["attacker"])
    clean, attacked = attack_eval(att, target, manifest, cfg["eps"], cfg["ratio"] or None)
    for r in (clean, attacked):
        r.extra["seed"] = cfg["seed"]
    print(emit_table([clean.row(), attacked.row()], REPORT_COLUMNS, out, "report"), end="")

    n = min(cfg["examples"], len(manifest.indices("query")))
    if n:
        import torch

        ex = out / "examples"
        ex.mkdir(exist_ok=True)
        x = manifest.tensor("query")[:n]
        eps = cfg["eps"] or att.config.epsilon_byte
        with torch.no_grad():
            adv = att.eval().perturb(x, ratio=cfg["ratio"] or None, epsilon_byte=eps)
            lam = att.D(x, x).lambda_map
        for i in range(n):
            save_png16(lam[i], ex / f"query{i}_lambda.png")
            save_mask_png(adv.mask[i, 0], ex / f"query{i}_mask.png")
            save_noise_png(adv.perturbed[i] - x[i], eps, ex / f"query{i}_noise.png")
    return 0


def cmd_transfer_eval(args, cfg, out: Path) -> int:
    from .metrics import TRANSFER_COLUMNS, Victim, transfer_eval

    att = load_attacker(args, cfg["attacker"])
    if not cfg["victims"]:
        raise ConfigError("transfer-eval needs at least one victim ('victims = model@data,...')")
    victims = []
    for item in cfg["victims"]:
        model_ref, _, data_ref = item.partition("@")
        if not data_ref:
            raise ConfigError(f"victims are written model@data, got {item!r}")
        data_cfg = {"data": data_ref, "layout": cfg["layout"], "height": cfg["height"], "width": cfg["width"]}
        victims.append(Victim(model_ref, data_ref, load_target(args, model_ref).model, load_data(data_cfg)))
    src_model, _, src_data = cfg["source"].partition("@")
    cells = transfer_eval(att, (src_model, src_data), victims)
    print(emit_table([c.row() for c in cells], TRANSFER_COLUMNS, out, "transfer"), end="")
    return 0


def cmd_noise_baseline(args, cfg, out: Path) -> int:
    from .metrics import REPORT_COLUMNS, attack_eval, noise_baseline_eval

    manifest = load_data(cfg)
    target = load_target(args, cfg["target"]).model
    att = load_attacker(args, cfg["attacker"]) if cfg["attacker"] else None
    rows = []
    if att is not None:
        clean, learned = attack_eval(att, target, manifest, cfg["eps"], cfg["ratio"])
        rows += [{**clean.row(), "location": ""}, {**learned.row(), "location": "learned"}]
    for loc in cfg["locations"]:
        if loc == "learned" and att is None:
            log.warning("skipping learned locations: no attacker given")
            continue
        for kind in cfg["kinds"]:
            rep = noise_baseline_eval(target, manifest, cfg["eps"], loc, kind, att, cfg["ratio"], cfg["seed"],
                                      cfg["trials"])
            rows.append({**rep.row(), "location": loc})
    print(emit_table(rows, ("location",) + REPORT_COLUMNS, out, "baselines"), end="")
    return 0


def cmd_mask_stats(args, cfg, out: Path) -> int:
    from .export import save_png16, save_rgb_png
    from .metrics import average_image, figure_concentration, mask_frequency

    manifest = load_data(cfg)
    att = load_attacker(args, cfg["attacker"])
    x = manifest.tensor("query")
    _, masks = att.perturb_all(x, ratio=cfg["ratio"] or None)
    freq = mask_frequency(masks)
    avg = average_image(x)
    save_png16(freq, out / "frequency.png", 0.0, 1.0)
    save_rgb_png(avg, out / "average_query.png")
    plot_heatmap(freq, avg, out / "heatmap.png")
    row = {"ratio": cfg["ratio"] or att.config.ratio, "k": att.k_for(cfg["ratio"] or None), "queries": len(x),
           "top_half": float(freq[: freq.shape[0] // 2].mean()), "bottom_half": float(freq[freq.shape[0] // 2:].mean())}
    cols = ["ratio", "k", "queries", "top_half", "bottom_half"]
    if manifest.figure_masks is not None:
        on, off = figure_concentration(masks, manifest.figure_masks[manifest.indices("query")])
        row.update(figure_mean=on, background_mean=off, figure_to_background=on / off if off > 0 else float("inf"))
        cols += ["figure_mean", "background_mean", "figure_to_background"]
    print(emit_table([row], cols, out, "mask_stats"), end="")
    return 0


def cmd_ablate(args, cfg, out: Path) -> int:
    from .metrics import REPORT_COLUMNS, attack_eval
    from .sampler import RATIO_GRID, parse_ratio
    from .trainer import train_attacker

    manifest = load_data(cfg)
    target = load_target(args, cfg["target"]).model
    preset = cfg["preset"]
    overrides = parse_ratio_eps(cfg["ratio_eps"])
    if preset == "loss-variants":
        variants = [("objective", v, {"objective": v}) for v in LOSS_VARIANTS]
    elif preset == "eps-sweep":
        variants = [("eps", e, {"epsilon_byte": float(e)}) for e in cfg["eps_grid"]]
    elif preset == "ratio-sweep":
        ratios = [parse_ratio(r) for r in cfg["ratios"]] or list(RATIO_GRID)
        variants = [("ratio", str(r), {"ratio": str(r), **({"epsilon_byte": overrides[r]} if r in overrides else {})})
                    for r in ratios]
    else:
        raise ConfigError(f"unknown preset {preset!r}; choose loss-variants, eps-sweep or ratio-sweep")

    rows = []
    for label, value, change in variants:
        ac = attack_config(cfg, **change)
        sub = out / f"{label}_{str(value).replace('/', '_').replace('+', '_')}"
        att = train_attacker(target, manifest, ac, out_dir=sub, resume=args.resume).attacker
        clean, attacked = attack_eval(att, target, manifest)
        if not rows:
            rows.append({**clean.row(), "variant": "clean"})
        rows.append({**attacked.row(), "variant": f"{label}={value}"})
        emit_table(rows, ("variant",) + REPORT_COLUMNS, out, "ablation")  # keep partial results
    text = emit_table(rows, ("variant",) + REPORT_COLUMNS, out, "ablation")
    if preset == "eps-sweep":
        plot_curve([float(r["eps"]) for r in rows[1:]], [r["rank1"] for r in rows[1:]], "epsilon (byte units)",
                   out / "eps_vs_rank1.png")
    if preset == "ratio-sweep":
        plot_curve([float(Fraction(r["ratio"])) for r in rows[1:]], [r["rank1"] for r in rows[1:]],
                   "proportion of attacked pixels", out / "ratio_vs_rank1.png", logx=True)
    print(text, end="")
    return 0


COMMANDS = {
    "make-data": cmd_make_data,
    "train-target": cmd_train_target,
    "train-attack": cmd_train_attack,
    "attack-eval": cmd_attack_eval,
    "transfer-eval": cmd_transfer_eval,
    "noise-baseline": cmd_noise_baseline,
    "mask-stats": cmd_mask_stats,
    "ablate": cmd_ablate,
}

# dedicated flags: (flag, config key, type)
FLAGS = {
    "make-data": [("--ids", "ids", int), ("--per-id", "per_id", int), ("--seed", "seed", int)],
    "train-target": [("--data", "data", str), ("--backbone", "backbone", str), ("--epochs", "epochs", int),
                     ("--seed", "seed", int), ("--name", "name", str)],
    "train-attack": [("--data", "data", str), ("--target", "target", str), ("--epochs", "epochs", int),
                     ("--eps", "epsilon_byte", float), ("--ratio", "ratio", str), ("--objective", "objective", str),
                     ("--seed", "seed", int), ("--name", "name", str)],
    "attack-eval": [("--data", "data", str), ("--target", "target", str), ("--attacker", "attacker", str),
                    ("--eps", "eps", float), ("--ratio", "ratio", str)],
    "transfer-eval": [("--attacker", "attacker", str), ("--source", "source", str)],
    "noise-baseline": [("--data", "data", str), ("--target", "target", str), ("--attacker", "attacker", str),
                       ("--eps", "eps", float), ("--ratio", "ratio", str), ("--trials", "trials", int)],
    "mask-stats": [("--data", "data", str), ("--attacker", "attacker", str), ("--ratio", "ratio", str)],
    "ablate": [("--preset", "preset", str), ("--data", "data", str), ("--target", "target", str),
               ("--epochs", "epochs", int)],
}


# -- plots ----------------------------------------------------------------------

def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_losses(epoch_log: list[dict], path: Path) -> None:
    if not epoch_log:
        return
    plt = _plt()
    keys = ("L_GAN_D", "L_GAN_G", "L_xent", "L_etri", "msssim")
    fig, axes = plt.subplots(1, len(keys), figsize=(3 * len(keys), 2.6))
    ep = [r["epoch"] for r in epoch_log]
    for ax, k in zip(axes, keys):
        ax.plot(ep, [r[k] for r in epoch_log])
        ax.set_title(k)
        ax.set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_heatmap(freq, avg, path: Path) -> None:
    plt = _plt()
    fig, (a, b) = plt.subplots(1, 2, figsize=(4, 4))
    a.imshow(avg.permute(1, 2, 0).numpy().clip(0, 1))
    a.set_title("average query")
    im = b.imshow(freq.numpy(), cmap="jet", vmin=0, vmax=max(float(freq.max()), 1e-12))
    b.set_title("mask frequency")
    for ax in (a, b):
        ax.axis("off")
    fig.colorbar(im, ax=b, fraction=0.08)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_curve(xs, ys, xlabel: str, path: Path, logx: bool = False) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(xs, ys, "o-")
    if logx:
        ax.set_xscale("log", base=2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("attacked rank-1")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="misrank", description=__doc__.splitlines()[0])
    p.add_argument("--runs-dir", help=f"root for run directories and the registry (default ${RUNS_ENV} or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--out", help="run directory (default <runs-dir>/<command>/<name or timestamp>)")
        sp.add_argument("--overwrite", action="store_true", help="replace an existing run directory")
        sp.add_argument("--list-keys", action="store_true", help="print the valid config keys and exit")
        if name in ("train-attack", "ablate"):
            sp.add_argument("--resume", action="store_true", help="continue from checkpoints in the run directory")
        for flag, key, kind in FLAGS.get(name, []):
            sp.add_argument(flag, dest=f"flag_{key}", type=kind)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        schema = schema_for(args.command)
        if args.list_keys:
            for k in sorted(schema):
                print(f"{k} = {_show(schema[k][1])}")
            return 0
        file_values = read_config(args.config) if args.config else {}
        flags = {k[len("flag_"):]: v for k, v in vars(args).items() if k.startswith("flag_")}
        cfg = resolve(schema, file_values, args.set, flags)
        if args.command in ("train-attack", "ablate"):
            attack_config(cfg)  # validate early
            if args.resume and args.out and Path(args.out).exists():
                args.overwrite = False
                out = Path(args.out)
                write_config(cfg, out / "config.txt", args.command)
                return COMMANDS[args.command](args, cfg, out)
        out = prepare_run_dir(args, args.command, cfg)
        return COMMANDS[args.command](args, cfg, out)
    except BudgetViolation as exc:
        print(f"budget certificate violated: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ConfigurationError, IngestionError, KeyError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
