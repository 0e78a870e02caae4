"""Command-line entry point orchestrating the pipeline.

Subcommands: synth, build, train, evaluate, transfer.  Exit codes: 0 ok,
2 usage or validation problem, 3 i/o problem, 4 numeric abort.  A flat
key=value config file ('#' comments) may set any training key; explicit
flags override file values, and the effective configuration is echoed into
every summary for provenance.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import fields

import numpy as np

from . import district as district_mod
from . import evalreport as ev
from . import report as report_mod
from .bundle import load_bundle, poverty_headcount, write_bundle
from .errors import ConfigError, NumericError, PovmapError
from .synth import synth_city_with_truth, write_truth
from .traits import build_all, default_poi_table, write_sample_csvs
from .training import (
    Checkpoint,
    TileStack,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_access,
    train_econ,
    train_morph,
)

VARIANTS = ("full", "noaccess", "nomorph", "noecon", "nobackdoor", "proxy")
TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
CONFIG_KEYS = set(TRAIN_KEYS) | {"variants"}

__all__ = ["main"]


def _parse_config_file(path: str) -> dict:
    out: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = value
    return out


def _coerce(key: str, value):
    if key == "variants":
        return [v.strip() for v in str(value).split(",") if v.strip()]
    default = getattr(TrainConfig(), key)
    if isinstance(default, bool):
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def _train_config(args) -> TrainConfig:
    values: dict = {}
    if getattr(args, "config", None):
        for key, raw in _parse_config_file(args.config).items():
            if key != "variants":
                values[key] = _coerce(key, raw)
    for key in TRAIN_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return TrainConfig(**values)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags override")
    p.add_argument("--seed", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--q", dest="quantile", type=float)
    p.add_argument("--gamma", dest="gamma_m", type=float)
    p.add_argument("--dtype", choices=("float64", "float32"))
    p.add_argument("--patch-px", dest="patch_px", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--mlp-ratio", dest="mlp_ratio", type=int)
    p.add_argument("--poi-embed-dim", dest="poi_embed_dim", type=int)


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="povmap", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic city bundle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--districts", type=int, default=20)
    p.add_argument("--tiles-per-district", type=int, default=100)
    p.add_argument("--confound", type=float, default=0.2)
    p.add_argument("--out", required=True)

    p = sub.add_parser("build", help="emit the per-tile sample CSVs")
    p.add_argument("--bundle", required=True)
    p.add_argument("--gamma", type=float, default=2000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--poi-embed-dim", type=int, default=16)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one trait module")
    p.add_argument("--module", required=True, choices=("access", "morph", "econ"))
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--morph-checkpoint", help="required for econ with q > 0")
    _add_train_flags(p)

    p = sub.add_parser("evaluate", help="run the split-protocol evaluation")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoints", required=True, help="directory with <module>.ckpt files")
    p.add_argument("--variants", default="full")
    p.add_argument("--out", required=True)
    _add_train_flags(p)

    p = sub.add_parser("transfer", help="cross-city transferability matrix")
    p.add_argument("--bundles", required=True, help="comma-separated bundle directories")
    p.add_argument("--checkpoints", required=True, help="comma-separated checkpoint directories")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    return ap


def _echo(cfg: TrainConfig, **extra) -> dict:
    out = dict(cfg.to_dict())
    out.update(extra)
    return out


def cmd_synth(args) -> int:
    bundle, truth = synth_city_with_truth(
        args.seed, args.districts, args.tiles_per_district, args.confound
    )
    os.makedirs(args.out, exist_ok=True)
    write_bundle(bundle, args.out)
    write_truth(truth, args.out)
    print(f"wrote bundle with {len(bundle.tiles)} tiles to {args.out}")
    return 0


def cmd_build(args) -> int:
    bundle = load_bundle(args.bundle)
    table = default_poi_table(args.seed, args.poi_embed_dim)
    access, morph, econ = build_all(bundle, table, args.gamma)
    write_sample_csvs(access, morph, econ, args.out)
    print(f"wrote {len(access)} samples per family to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    bundle = load_bundle(args.bundle)
    stack = TileStack.from_bundle(bundle)
    table = default_poi_table(cfg.seed, cfg.poi_embed_dim)
    access_s, morph_s, econ_s = build_all(bundle, table, cfg.gamma_m)

    if args.module == "access":
        ckpt, log_rows = train_access(stack, access_s, cfg)
    elif args.module == "morph":
        ckpt, log_rows = train_morph(stack, morph_s, cfg)
    else:
        morph_ckpt = None
        if cfg.quantile > 0.0:
            if not args.morph_checkpoint:
                raise ConfigError("econ training with q > 0 needs --morph-checkpoint")
            morph_ckpt = load_checkpoint(args.morph_checkpoint)
        ckpt, log_rows = train_econ(stack, econ_s, morph_ckpt, cfg)

    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, f"{args.module}.ckpt")
    save_checkpoint(ckpt, ckpt_path)
    log_path = os.path.join(args.out, f"{args.module}_train_log.csv")
    with open(log_path, "w", newline="") as fh:
        if args.module == "econ" and cfg.quantile == 0.0:
            fh.write("# mode=nightlight-proxy\n")
        w = csv.writer(fh)
        w.writerow(["step", "loss", "wall_time_s"])
        for step, loss, wall in log_rows:
            w.writerow([step, repr(loss), f"{wall:.3f}"])
    print(f"wrote {ckpt_path}")
    return 0


def _load_ckpt(dir_: str, name: str) -> Checkpoint:
    path = os.path.join(dir_, f"{name}.ckpt")
    if not os.path.exists(path):
        raise ConfigError(f"missing checkpoint {path}")
    return load_checkpoint(path)


def _pool_blocks(stack: TileStack, ckpt_dir: str, need_q0: bool):
    """district -> named embedding blocks, pooling raw tiles per encoder."""
    morph = _load_ckpt(ckpt_dir, "morph")
    access = _load_ckpt(ckpt_dir, "access")
    econ = _load_ckpt(ckpt_dir, "econ")
    feats = district_mod.pool_districts(stack, morph, access, econ)
    de = morph.encoder.config.embed_dim
    blocks = {
        f.district_id: {"morph": f.r[:de], "access": f.r[de : 2 * de], "econ": f.r[2 * de :]}
        for f in feats
    }
    if need_q0:
        econ_q0 = _load_ckpt(ckpt_dir, "econ_q0")
        feats0 = district_mod.pool_districts(stack, morph, access, econ_q0)
        for f in feats0:
            blocks[f.district_id]["econ_q0"] = f.r[2 * de :]
    return blocks


def cmd_evaluate(args) -> int:
    cfg = _train_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}; valid: {list(VARIANTS)}")
    bundle = load_bundle(args.bundle)
    stack = TileStack.from_bundle(bundle)
    need_q0 = any(("econ_q0" in ev.VARIANT_BLOCKS[v]) for v in variants)
    blocks = _pool_blocks(stack, args.checkpoints, need_q0)
    targets = {d.district_id: float(poverty_headcount(d)) for d in bundle.districts}
    plan = district_mod.make_splits(sorted(targets), seed=cfg.seed)

    results: dict[str, ev.VariantResult] = {}
    for variant in variants:
        feats = ev.variant_feature_matrix(blocks, variant)
        results[variant] = ev.evaluate_variant(feats, targets, plan, variant)

    os.makedirs(args.out, exist_ok=True)
    report_mod.write_report_csv(os.path.join(args.out, "report.csv"), results, variants)

    ttests = {}
    if "full" in results:
        for variant in variants:
            if variant != "full":
                ttests[f"full vs {variant}"] = ev.paired_ttest(
                    results["full"].pearson, results[variant].pearson
                )
    quartiles = {}
    for variant in variants:
        if variant in ("full", "proxy") and len(targets) >= 8:
            quartiles[variant] = ev.quartile_analysis(targets, results[variant].mean_prediction())
    pca_ratios = None
    if "full" in results:
        full_feats = ev.variant_feature_matrix(blocks, "full")
        pca_ratios = ev.pca_explained(np.stack([full_feats[d] for d in sorted(full_feats)]))

    report_mod.write_summary_md(
        os.path.join(args.out, "summary.md"), results, variants, ttests, quartiles,
        pca_ratios, _echo(cfg, bundle=args.bundle, variants=",".join(variants)),
    )
    if quartiles:
        labels, values = [], []
        for variant, q in quartiles.items():
            for g in ("bottom25", "bottom50", "top50", "top25"):
                labels.append(f"{g}·{variant}")
                values.append(q[g])
        report_mod.svg_bar_chart(
            os.path.join(args.out, "quartiles.svg"), labels, values,
            "Pearson by ground-truth headcount group",
        )
    if pca_ratios is not None:
        report_mod.svg_bar_chart(
            os.path.join(args.out, "pca_scree.svg"),
            [f"pc{i + 1}" for i in range(min(10, pca_ratios.size))],
            [float(v) for v in pca_ratios[:10]],
            "PCA explained-variance ratios",
        )
    for variant in variants:
        s = results[variant].summary()
        print(f"{variant}: pearson {s['pearson'][0]:.4f} spearman {s['spearman'][0]:.4f} r2 {s['r2'][0]:.4f}")
    return 0


def cmd_transfer(args) -> int:
    cfg = _train_config(args)
    bundles = [b.strip() for b in args.bundles.split(",") if b.strip()]
    ckpt_dirs = [c.strip() for c in args.checkpoints.split(",") if c.strip()]
    if len(bundles) < 2:
        raise ConfigError("transfer needs at least 2 bundles")
    if len(ckpt_dirs) != len(bundles):
        raise ConfigError("need one checkpoint directory per bundle")

    names = [os.path.basename(os.path.normpath(b)) or f"city{i}" for i, b in enumerate(bundles)]
    stacks, targets_all, plans = [], [], []
    for b in bundles:
        bundle = load_bundle(b)
        stacks.append(TileStack.from_bundle(bundle))
        t = {d.district_id: float(poverty_headcount(d)) for d in bundle.districts}
        targets_all.append(t)
        plans.append(district_mod.make_splits(sorted(t), seed=cfg.seed))

    cells_by_variant: dict[str, dict[tuple[str, str], float]] = {"full": {}, "proxy": {}}
    cell_inputs = {}
    for si, src in enumerate(names):
        for ti, tgt in enumerate(names):
            blocks = _pool_blocks(stacks[ti], ckpt_dirs[si], need_q0=True)
            cell_inputs[(src, tgt)] = (blocks, targets_all[ti], plans[ti])
    os.makedirs(args.out, exist_ok=True)
    table: dict[tuple[str, str], dict[str, float]] = {k: {} for k in cell_inputs}
    for variant in ("full", "proxy"):
        res = ev.transfer_matrix(cell_inputs, variant)
        for key, vr in res.items():
            table[key][variant] = vr.summary()["pearson"][0]
        m = np.array([[table[(s, t)][variant] for t in names] for s in names])
        report_mod.svg_heatmap(
            os.path.join(args.out, f"transfer_{variant}.svg"), names, names, m,
            f"Transfer Pearson ({variant}); rows = source, cols = target",
        )
        off = [table[(s, t)][variant] for s in names for t in names if s != t]
        print(f"{variant}: mean off-diagonal pearson {np.mean(off):.4f}")
    report_mod.render_transfer_csv(os.path.join(args.out, "transfer.csv"), names, table)
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "build": cmd_build,
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "transfer": cmd_transfer,
    }
    try:
        return handlers[args.command](args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except PovmapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
