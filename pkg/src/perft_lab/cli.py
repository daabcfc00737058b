"""Command-line driver. Exit codes: 0 ok, 1 config error, 2 numeric failure,
3 I/O or parse failure.

    perft-lab pretrain     --config cfg.json [--set k=v ...]
    perft-lab finetune     --config cfg.json [--set k=v ...]
    perft-lab eval         --config cfg.json [--checkpoint DIR]
    perft-lab analyze      --config cfg.json [--checkpoint DIR] [--layer I]
                           [--eps E] [--gamma-t G]
    perft-lab count-params --config cfg.json
    perft-lab sweep        --config cfg.json

Every subcommand prints a one-line JSON summary on success. All outputs land
under the config's out_dir.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from dataclasses import asdict, replace
from typing import Optional

from .analysis import (
    RedundancyModel,
    effective_count,
    extract_atlas,
    gamma_for_effective,
    project_atlas,
    redundancy_estimate,
    routing_stats,
    write_atlas_csv,
    write_atlas_svg,
    write_routing_csv,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_override, from_dict, load_config
from .data import ByteTokenizer, encode_batch, generate_samples, load_jsonl
from .model import attach_variant, build_model
from .numerics import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    InputError,
    NumericError,
    ParseError,
    Rng,
)
from .peft import count_activated
from .training import evaluate, freeze_partition, train_loop


def _fmt_m(x: int) -> str:
    return f"{x / 1e6:.2f}M"


def _samples(cfg: RunConfig, split: str):
    """Training or eval samples, from JSONL files when given, else generated."""
    key = f"{split}_jsonl"
    if cfg.data.get(key):
        return load_jsonl(cfg.data[key])
    if cfg.task is None:
        raise ConfigError(f"config needs a 'task' section or data.{key}")
    if split == "train":
        return generate_samples(cfg.task, cfg.n_train)
    return generate_samples(replace(cfg.task, seed=cfg.task.seed + 1), cfg.n_eval)


def _need(cfg: RunConfig, attr: str, why: str):
    value = getattr(cfg, attr)
    if value is None:
        raise ConfigError(f"config needs {attr!r} for {why}")
    return value


def cmd_pretrain(cfg: RunConfig) -> dict:
    model_cfg = _need(cfg, "model", "pretrain")
    out = _need(cfg, "out_dir", "pretrain")
    model = build_model(model_cfg, cfg.seed)
    tok = ByteTokenizer()
    result = train_loop(model, _samples(cfg, "train"), tok, cfg.train,
                        eval_samples=_samples(cfg, "eval"), out_dir=out)
    ckpt = os.path.join(out, "checkpoint")
    save_checkpoint(ckpt, model, extra={"phase": "pretrain", "steps": result.steps_run})
    summary = {
        "command": "pretrain",
        "steps": result.steps_run,
        "final_loss": result.history[-1]["loss_total"],
        "final_eval": result.final_eval,
        "checkpoint": ckpt,
        "metrics": os.path.join(out, "metrics.csv"),
    }
    _echo_config(cfg, out)
    return summary


def cmd_finetune(cfg: RunConfig) -> dict:
    backbone = _need(cfg, "backbone", "finetune")
    perft = _need(cfg, "perft", "finetune")
    out = _need(cfg, "out_dir", "finetune")
    model = load_checkpoint(backbone)
    attach_variant(model, perft, Rng(cfg.seed).child(7))
    trainable = freeze_partition(model)
    tok = ByteTokenizer()
    result = train_loop(model, _samples(cfg, "train"), tok, cfg.train,
                        eval_samples=_samples(cfg, "eval"), out_dir=out)
    ckpt = os.path.join(out, "checkpoint")
    save_checkpoint(ckpt, model, extra={"phase": "finetune", "steps": result.steps_run})
    summary = {
        "command": "finetune",
        "variant": model.perft_cfg.variant,
        "trainable_tensors": len(trainable),
        "trainable_params": int(sum(p.value.size for p in trainable)),
        "steps": result.steps_run,
        "final_loss": result.history[-1]["loss_total"],
        "final_eval": result.final_eval,
        "checkpoint": ckpt,
        "metrics": os.path.join(out, "metrics.csv"),
    }
    _echo_config(cfg, out)
    return summary


def cmd_eval(cfg: RunConfig) -> dict:
    backbone = _need(cfg, "backbone", "eval")
    model = load_checkpoint(backbone)
    metrics = evaluate(model, _samples(cfg, "eval"), ByteTokenizer())
    return {"command": "eval", "checkpoint": backbone, **metrics}


def cmd_analyze(cfg: RunConfig, layer: int, eps: float, gamma_t: float) -> dict:
    backbone = _need(cfg, "backbone", "analyze")
    out = _need(cfg, "out_dir", "analyze")
    model = load_checkpoint(backbone)
    os.makedirs(out, exist_ok=True)
    atlas = extract_atlas(model, layer)
    proj = project_atlas(atlas, dims=2)
    atlas_csv = os.path.join(out, f"atlas_layer{layer}.csv")
    atlas_svg = os.path.join(out, f"atlas_layer{layer}.svg")
    write_atlas_csv(proj, atlas_csv)
    write_atlas_svg(proj, atlas_svg)
    batch = encode_batch(_samples(cfg, "eval"), ByteTokenizer(), model.cfg.t_max)
    stats = routing_stats(model, batch["tokens"])
    routing_csv = os.path.join(out, "routing.csv")
    write_routing_csv(stats, routing_csv)
    summary = {
        "command": "analyze",
        "layer": layer,
        "atlas_csv": atlas_csv,
        "atlas_svg": atlas_svg,
        "routing_csv": routing_csv,
        "dispatch_entropy": [st.entropy for st in stats],
    }
    pcfg = model.perft_cfg
    if pcfg is not None and pcfg.variant in ("R", "E", "D", "S"):
        keys = atlas.subset("peft_key")
        observed = effective_count(keys, eps)
        rm = RedundancyModel(m=pcfg.m, d_b=pcfg.d_b, eps=eps, gamma_t=gamma_t)
        est = redundancy_estimate(rm)
        red = {
            "m": pcfg.m, "d_b": pcfg.d_b, "eps": eps, "gamma_t": gamma_t,
            "p0": est.p0, "p_t": est.p_t, "eta": est.eta,
            "expected_effective": est.expected_effective,
            "observed_effective": observed,
        }
        try:
            red["gamma_t_for_observed"] = gamma_for_effective(pcfg.m, pcfg.d_b, eps, observed)
        except DomainError:
            red["gamma_t_for_observed"] = None
        red_path = os.path.join(out, "redundancy.json")
        with open(red_path, "w", encoding="utf-8") as fh:
            json.dump(red, fh, indent=1, sort_keys=True)
            fh.write("\n")
        summary["redundancy_json"] = red_path
        summary["observed_effective"] = observed
    return summary


def cmd_count_params(cfg: RunConfig) -> dict:
    perft = _need(cfg, "perft", "count-params")
    account = count_activated(perft, cfg.dims)
    print(
        f"{account.variant}: activated {_fmt_m(account.activated_trainable)} "
        f"({account.ratio_percent:.3f}% of activated backbone), "
        f"total {_fmt_m(account.total_trainable)}"
    )
    return {
        "command": "count-params",
        "variant": account.variant,
        "activated_trainable": account.activated_trainable,
        "total_trainable": account.total_trainable,
        "activated_total_model": account.activated_total_model,
        "ratio_percent": round(account.ratio_percent, 6),
    }


def cmd_sweep(config_path: str, overrides: list[str], cfg: RunConfig) -> dict:
    if not cfg.sweep:
        raise ConfigError("config needs a 'sweep' section of axis: [values]")
    out = _need(cfg, "out_dir", "sweep")
    axes = sorted(cfg.sweep.items())
    for name, values in axes:
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep axis {name!r} must be a non-empty list")
    os.makedirs(out, exist_ok=True)
    rows = []
    for i, combo in enumerate(itertools.product(*(v for _, v in axes))):
        point_sets = [f"{name}={json.dumps(value)}" for (name, _), value in zip(axes, combo)]
        point = load_config(config_path, overrides + point_sets)
        point.sweep = {}
        point.out_dir = os.path.join(out, f"point_{i:03d}")
        summary = cmd_finetune(point)
        row = {name: value for (name, _), value in zip(axes, combo)}
        row.update({
            "point": i,
            "variant": point.perft.variant,
            "trainable_params": summary["trainable_params"],
            "final_loss": summary["final_loss"],
            "token_accuracy": summary["final_eval"]["token_accuracy"] if summary["final_eval"] else "",
            "exact_match": summary["final_eval"]["exact_match"] if summary["final_eval"] else "",
        })
        rows.append(row)
    sweep_csv = os.path.join(out, "sweep.csv")
    axis_names = [name for name, _ in axes]
    cols = ["point", "variant", "trainable_params"] + axis_names + [
        "final_loss", "token_accuracy", "exact_match"]
    import csv as _csv

    with open(sweep_csv, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([row.get(c, "") for c in cols])
    return {"command": "sweep", "points": len(rows), "sweep_csv": sweep_csv}


def _echo_config(cfg: RunConfig, out: str) -> None:
    """Drop a resolved copy of the effective config next to the outputs."""
    os.makedirs(out, exist_ok=True)
    payload = {
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "backbone": cfg.backbone,
        "model": asdict(cfg.model) if cfg.model else None,
        "perft": asdict(cfg.perft) if cfg.perft else None,
        "train": asdict(cfg.train),
        "task": asdict(cfg.task) if cfg.task else None,
        "data": cfg.data,
        "n_train": cfg.n_train,
        "n_eval": cfg.n_eval,
    }
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="perft-lab", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "finetune", "eval", "analyze", "count-params", "sweep"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="path to the run config JSON")
        sp.add_argument("--set", dest="sets", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override, repeatable")
        if name in ("eval", "analyze"):
            sp.add_argument("--checkpoint", help="checkpoint dir (overrides config backbone)")
        if name == "analyze":
            sp.add_argument("--layer", type=int, default=0)
            sp.add_argument("--eps", type=float, default=0.05,
                            help="distinctness radius for effective counts")
            sp.add_argument("--gamma-t", type=float, default=1.0,
                            help="overlap-growth factor in the redundancy model")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.sets)
        if getattr(args, "checkpoint", None):
            cfg.backbone = args.checkpoint
        if args.command == "pretrain":
            summary = cmd_pretrain(cfg)
        elif args.command == "finetune":
            summary = cmd_finetune(cfg)
        elif args.command == "eval":
            summary = cmd_eval(cfg)
        elif args.command == "analyze":
            summary = cmd_analyze(cfg, args.layer, args.eps, args.gamma_t)
        elif args.command == "count-params":
            summary = cmd_count_params(cfg)
        else:
            summary = cmd_sweep(args.config, args.sets, cfg)
        print(json.dumps(summary, sort_keys=True))
        return 0
    except (ConfigError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericError, DomainError, DimensionError, DegenerateInputError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    except (ParseError, OSError) as e:
        print(f"i/o failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
