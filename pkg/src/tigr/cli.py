"""Command-line entry point.

Subcommands: synth, preprocess, pretrain, embed, eval, ablate,
export-similar, mask-sweep. Every command resolves a TOML config against
the declared defaults, seeds all randomness from it (CLI overrides where
noted), and leaves a run manifest next to its outputs. TIGR_OUT_ROOT
re-roots relative output paths.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import GradientError, Rng
from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_hash, describe_defaults, load_config, view_config
from .data import (
    ConfigError,
    DatasetSplit,
    ParseError,
    filter_trajectories,
    load_matched_csv,
    load_raw_csv,
    load_road_network,
    split_dataset,
)
from .downstream import (
    HeadConfig,
    dp_run,
    export_similar_geojson,
    rank_metrics,
    ts_build,
    ts_evaluate,
    ts_kneg_sweep,
    tte_run,
)
from .encoder import ContractViolation
from .model import BRANCHES, ModelConfig, TigrModel
from .pipeline import Artifacts, PreparedSample, make_artifacts, prepare_samples
from .runio import (
    RunClock,
    read_grid_spec_toml,
    write_embeddings,
    write_grid_spec_toml,
    write_matched_csv,
    write_network_csvs,
    write_raw_csv,
    write_run_manifest,
)
from .spatiotemporal import (
    build_traffic_matrix,
    build_transition_matrix,
    load_traffic_csv,
    load_transition_csv,
    save_traffic_csv,
    save_transition_csv,
    traffic_feature_dim,
)
from .synth import SynthConfig, synth_generate
from .training import TrainConfig, pretrain, restore_from_checkpoint

ABLATION_ROWS = ("g", "r", "st", "g+r", "g+st", "r+st", "g+r+st",
                 "no_inter", "no_lma", "no_rope")


def out_path(p: str) -> Path:
    root = os.environ.get("TIGR_OUT_ROOT")
    path = Path(p)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def synth_config_from(cfg: dict) -> SynthConfig:
    s = cfg["synth"]
    factors = {int(h): float(s["rush_factor"]) for h in s["rush_hours"]}
    factors.update({int(h): float(s["shoulder_factor"]) for h in s["shoulder_hours"]})
    return SynthConfig(
        lattice=s["lattice"], segment_length_m=s["segment_length_m"],
        trajectories=s["trajectories"], min_road_len=s["min_road_len"],
        max_road_len=s["max_road_len"], points_per_segment=s["points_per_segment"],
        gps_noise_m=s["gps_noise_m"], origin_lon=s["origin_lon"],
        origin_lat=s["origin_lat"], box_margin_m=s["box_margin_m"],
        cell_size_m=cfg["grid"]["cell_size_m"], start_window_days=s["start_window_days"],
        rush_hour_factors=factors,
    )


def model_config_from(cfg: dict, grid_vocab: int, road_vocab: int, st_dim: int,
                      branches: str | None = None, no_lma: bool = False,
                      no_rope: bool = False) -> ModelConfig:
    m = cfg["model"]
    branch_str = branches if branches is not None else cfg["ablation"]["branches"]
    return ModelConfig(
        grid_vocab=grid_vocab, road_vocab=road_vocab, st_feature_dim=st_dim,
        d_g=m["d_g"], d_r=m["d_r"], d_st=m["d_st"], d_proj=m["d_proj"],
        n_layers=m["n_layers"], h_enc=m["h_enc"], h_lma=m["h_lma"], q=m["q"],
        mu=m["mu"], dropout=m["dropout"], ffn_ratio=m["ffn_ratio"],
        branches=tuple(branch_str.split("+")),
        use_rope=not (no_rope or cfg["ablation"]["no_rope"]),
        use_lma=not (no_lma or cfg["ablation"]["no_lma"]),
    )


def train_config_from(cfg: dict, no_inter: bool = False, seed: int | None = None) -> TrainConfig:
    t = cfg["train"]
    mk = cfg["masking"]
    return TrainConfig(
        lr=t["lr"], batch=t["batch"], epochs=t["epochs"], tau=t["tau"],
        lam=t["lambda"], queue=t["queue"], seed=seed if seed is not None else t["seed"],
        use_inter=not (no_inter or cfg["ablation"]["no_inter"]),
        view1=view_config(mk["view1"], mk["min_keep"]),
        view2=view_config(mk["view2"], mk["min_keep"]),
    )


def head_config_from(cfg: dict) -> HeadConfig:
    e = cfg["eval"]
    return HeadConfig(epochs=e["head_epochs"], lr=e["head_lr"], batch=e["head_batch"])


@dataclass
class DatasetBundle:
    samples: dict[str, PreparedSample]
    splits: DatasetSplit
    artifacts: Artifacts
    name: str

    def split_samples(self, which: str) -> list[PreparedSample]:
        ids = {"train": self.splits.train, "validation": self.splits.validation,
               "test": self.splits.test}[which]
        return [self.samples[i] for i in ids if i in self.samples]


def load_dataset(data_dir: Path, cfg: dict) -> DatasetBundle:
    data_dir = Path(data_dir)
    spec = read_grid_spec_toml(data_dir / "grid_spec.toml")
    net, _ = load_road_network(data_dir / "segments.csv", data_dir / "edges.csv")
    raw, _ = load_raw_csv(data_dir / "raw.csv")
    matched, _ = load_matched_csv(data_dir / "matched.csv", net)
    retained, _ = filter_trajectories(raw, cfg["data"]["min_len"], cfg["data"]["max_len"], spec)
    samples, _ = prepare_samples(retained, matched, spec)
    processed = data_dir / "processed"
    if not processed.is_dir():
        raise ConfigError(f"{processed} missing; run `tigr preprocess` first")
    tm = load_transition_csv(processed / "transition.csv", net.n_segments)
    traffic = load_traffic_csv(processed / "traffic.csv", net.n_segments)
    splits_doc = json.loads((processed / "splits.json").read_text())
    splits = DatasetSplit(train=splits_doc["train"], validation=splits_doc["validation"],
                          test=splits_doc["test"])
    artifacts = make_artifacts(net, spec, tm, traffic)
    return DatasetBundle(samples={s.id: s for s in samples}, splits=splits,
                         artifacts=artifacts, name=data_dir.name)


def build_model_from_checkpoint(ckpt_dir: Path, bundle: DatasetBundle
                                ) -> tuple[TigrModel, dict, int]:
    arrays, step, snapshot = load_checkpoint(ckpt_dir)
    cfg = snapshot["config"]
    mc = model_config_from(cfg, bundle.artifacts.grid_spec.n_cells,
                           bundle.artifacts.net.n_segments,
                           traffic_feature_dim(bundle.artifacts.net),
                           branches=snapshot.get("branches"),
                           no_lma=snapshot.get("no_lma", False),
                           no_rope=snapshot.get("no_rope", False))
    model = TigrModel(mc, Rng(cfg["train"]["seed"]).child("init"))
    restore_from_checkpoint(model, arrays)
    return model, cfg, step


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    clock = RunClock()
    cfg = load_config(args.config)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(cfg["train"]["seed"]).child("synth")
    net, spec, road, raw = synth_generate(synth_config_from(cfg), rng)
    write_network_csvs(net, out / "segments.csv", out / "edges.csv")
    write_matched_csv(road, out / "matched.csv")
    write_raw_csv(raw, out / "raw.csv")
    write_grid_spec_toml(spec, out / "grid_spec.toml")
    outputs = ["segments.csv", "edges.csv", "matched.csv", "raw.csv", "grid_spec.toml"]
    write_run_manifest(out, "synth", config_hash(cfg), cfg["train"]["seed"],
                       [args.config] if args.config else [], outputs, clock)
    print(f"synth: {net.n_segments} segments, {len(road)} trajectories -> {out}")
    return 0


def cmd_preprocess(args) -> int:
    clock = RunClock()
    cfg = load_config(args.config)
    data_dir = Path(args.data)
    out = data_dir / "processed"
    out.mkdir(parents=True, exist_ok=True)
    spec = read_grid_spec_toml(data_dir / "grid_spec.toml")
    net, net_report = load_road_network(data_dir / "segments.csv", data_dir / "edges.csv")
    raw, raw_report = load_raw_csv(data_dir / "raw.csv")
    matched, matched_report = load_matched_csv(data_dir / "matched.csv", net)
    retained, filter_report = filter_trajectories(raw, cfg["data"]["min_len"],
                                                  cfg["data"]["max_len"], spec)
    samples, prep_report = prepare_samples(retained, matched, spec)
    if not samples:
        raise ConfigError("preprocessing retained no trajectories")
    rng = Rng(cfg["train"]["seed"])
    splits = split_dataset([s.id for s in samples], tuple(cfg["data"]["split"]),
                           rng.child("split"))
    train_ids = set(splits.train)
    train_road = [s.road for s in samples if s.id in train_ids]
    tm = build_transition_matrix(train_road, net)
    traffic, traffic_report = build_traffic_matrix(train_road, net)
    row_sums = tm.P_norm.sum(axis=1)
    audit_ok = bool(np.all(np.abs(row_sums - 1.0) <= 1e-6))
    print(f"preprocess: P_norm row-sum audit: max|sum-1| = {np.abs(row_sums - 1).max():.2e} "
          f"({'ok' if audit_ok else 'FAILED'})")
    save_transition_csv(tm, out / "transition.csv")
    save_traffic_csv(traffic, out / "traffic.csv")
    (out / "splits.json").write_text(json.dumps(splits.as_dict(), sort_keys=True, indent=1) + "\n")
    report = {
        "filter": dict(filter_report),
        "prepare": prep_report,
        "traffic": traffic_report,
        "network_warnings": net_report,
        "raw_issues": raw_report,
        "matched_issues": matched_report,
        "row_sum_audit_ok": audit_ok,
        "split_sizes": {k: len(v) for k, v in splits.as_dict().items()},
    }
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    print("preprocess: rejections " + json.dumps(dict(filter_report), sort_keys=True))
    write_run_manifest(out, "preprocess", config_hash(cfg), cfg["train"]["seed"],
                       [data_dir / "raw.csv", data_dir / "matched.csv"],
                       ["transition.csv", "traffic.csv", "splits.json", "report.json"], clock)
    return 0


def _pretrain_once(cfg: dict, bundle: DatasetBundle, branches: str, no_inter: bool,
                   no_lma: bool, no_rope: bool, seed: int, epochs: int | None,
                   batch: int | None, out_dir: Path | None):
    mc = model_config_from(cfg, bundle.artifacts.grid_spec.n_cells,
                           bundle.artifacts.net.n_segments,
                           traffic_feature_dim(bundle.artifacts.net),
                           branches=branches, no_lma=no_lma, no_rope=no_rope)
    tc = train_config_from(cfg, no_inter=no_inter, seed=seed)
    if epochs is not None:
        tc.epochs = epochs
    if batch is not None:
        tc.batch = batch
    model = TigrModel(mc, Rng(seed).child("init"))
    snapshot = {"config": cfg, "branches": branches, "no_inter": no_inter,
                "no_lma": no_lma, "no_rope": no_rope}
    train = bundle.split_samples("train")
    if len(train) < 2:
        raise ConfigError(f"train split has {len(train)} usable trajectories")
    reports = pretrain(train, model, bundle.artifacts, tc, Rng(seed).child("train"),
                       out_dir=out_dir, config_snapshot=snapshot)
    return model, tc, reports


def cmd_pretrain(args) -> int:
    clock = RunClock()
    cfg = load_config(args.config)
    bundle = load_dataset(Path(args.data), cfg)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg["train"]["seed"]
    branches = args.branches or cfg["ablation"]["branches"]
    model, tc, reports = _pretrain_once(
        cfg, bundle, branches, args.no_inter, args.no_lma, args.no_rope,
        seed, args.epochs, args.batch, out)
    outputs = ["loss.csv"] + [f"checkpoint_epoch{e}" for e in range(tc.epochs + 1)]
    write_run_manifest(out, "pretrain", config_hash(cfg), seed,
                       [Path(args.data) / "matched.csv"], outputs, clock)
    n_params = sum(p.data.size for p in model.anchor_parameters())
    print(f"pretrain: {tc.epochs} epochs, {len(reports)} steps, "
          f"{n_params} anchor parameters -> {out}")
    return 0


def cmd_embed(args) -> int:
    clock = RunClock()
    bundle_cfg = load_config(args.config)
    bundle = load_dataset(Path(args.data), bundle_cfg)
    model, cfg, _ = build_model_from_checkpoint(out_path(args.checkpoint), bundle)
    if args.split == "all":
        samples = [bundle.samples[i] for i in sorted(bundle.samples)]
    else:
        samples = bundle.split_samples(args.split)
    mat = model.encode_samples(samples, bundle.artifacts)
    out = out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_embeddings(out, [s.id for s in samples], mat)
    write_run_manifest(out.parent, "embed", config_hash(cfg), cfg["train"]["seed"],
                       [], [out.name], clock)
    print(f"embed: {mat.shape[0]} trajectories x {mat.shape[1]} dims -> {out}")
    return 0


def _eval_ts(cfg, bundle, model, out, sweep_ks=None):
    e = cfg["eval"]
    rng = Rng(e["seed"]).child("ts")
    test = bundle.split_samples("test")
    k_max = max(sweep_ks) if sweep_ks else e["k_neg"]
    inst = ts_build(test, k_max, rng, bundle.artifacts.grid_spec, n_queries=e["queries"])
    outputs = []
    if sweep_ks:
        rows = ts_kneg_sweep(inst, model, bundle.artifacts, sweep_ks)
        sweep_path = out / "kneg_sweep.csv"
        with open(sweep_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k_neg", "hr1", "hr5", "mr"])
            for r in rows:
                w.writerow([r["k_neg"], repr(r["hr1"]), repr(r["hr5"]), repr(r["mr"])])
        outputs.append("kneg_sweep.csv")
        metrics = {k: v for k, v in rows[-1].items() if k != "k_neg"}
        k_used = sweep_ks[-1]
    else:
        metrics = ts_evaluate(inst, model, bundle.artifacts)
        k_used = e["k_neg"]
    d_size = len(inst.queries) + k_used
    baseline = {"mr": (d_size + 1) / 2, "hr1": 1.0 / d_size, "hr5": min(1.0, 5.0 / d_size)}
    return metrics, baseline, outputs


def cmd_eval(args) -> int:
    clock = RunClock()
    cfg_file = load_config(args.config)
    bundle = load_dataset(Path(args.data), cfg_file)
    model, ckpt_cfg, _ = build_model_from_checkpoint(out_path(args.checkpoint), bundle)
    cfg = cfg_file
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    e = cfg["eval"]
    extra_outputs = []
    if args.task == "ts":
        sweep = [int(x) for x in args.kneg_sweep.split(",")] if args.kneg_sweep else None
        metrics, baseline, extra_outputs = _eval_ts(cfg, bundle, model, out, sweep)
    elif args.task == "tte":
        res = tte_run(bundle.split_samples("train"), bundle.split_samples("test"),
                      model, bundle.artifacts, head_config_from(cfg), Rng(e["seed"]))
        metrics, baseline = res["metrics"], res["baseline"]
    elif args.task == "dp":
        res = dp_run(bundle.split_samples("train"), bundle.split_samples("test"),
                     model, bundle.artifacts, head_config_from(cfg), Rng(e["seed"]))
        metrics, baseline = res["metrics"], res["baseline"]
    else:  # pragma: no cover - argparse choices guard this
        raise ConfigError(f"unknown task {args.task!r}")
    doc = {"task": args.task, "dataset": bundle.name, "seed": e["seed"],
           "metrics": metrics, "baseline": baseline, "config_hash": config_hash(cfg)}
    metrics_path = out / f"metrics_{args.task}.json"
    metrics_path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    write_run_manifest(out, f"eval:{args.task}", config_hash(cfg), e["seed"], [],
                       [metrics_path.name] + extra_outputs, clock)
    print(f"eval {args.task}: " + json.dumps(metrics, sort_keys=True))
    return 0


def _ablation_spec(label: str) -> dict:
    if label in ("no_inter", "no_lma", "no_rope"):
        return {"branches": "g+r+st", "no_inter": label == "no_inter",
                "no_lma": label == "no_lma", "no_rope": label == "no_rope"}
    return {"branches": label, "no_inter": False, "no_lma": False, "no_rope": False}


def cmd_ablate(args) -> int:
    clock = RunClock()
    cfg = load_config(args.config)
    bundle = load_dataset(Path(args.data), cfg)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = list(ABLATION_ROWS)
    if args.only:
        wanted = args.only.split(",")
        unknown = [w for w in wanted if w not in ABLATION_ROWS]
        if unknown:
            raise ConfigError(f"unknown ablation rows: {unknown}")
        labels = [l for l in labels if l in wanted]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg["ablation"]["seeds"]
    e = cfg["eval"]
    rows = []
    for label in labels:
        spec_row = _ablation_spec(label)
        for seed in seeds:
            model, tc, _ = _pretrain_once(cfg, bundle, spec_row["branches"],
                                          spec_row["no_inter"], spec_row["no_lma"],
                                          spec_row["no_rope"], seed, None, None, None)
            test = bundle.split_samples("test")
            inst = ts_build(test, e["k_neg"], Rng(e["seed"]).child("ts"),
                            bundle.artifacts.grid_spec, n_queries=e["queries"])
            ts_m = ts_evaluate(inst, model, bundle.artifacts)
            tte = tte_run(bundle.split_samples("train"), test, model, bundle.artifacts,
                          head_config_from(cfg), Rng(e["seed"]))
            dp = dp_run(bundle.split_samples("train"), test, model, bundle.artifacts,
                        head_config_from(cfg), Rng(e["seed"]))
            rows.append({
                "label": label, "seed": seed, **spec_row,
                "hr1": ts_m["hr1"], "hr5": ts_m["hr5"], "mr": ts_m["mr"],
                "mae": tte["metrics"]["mae"], "mape": tte["metrics"]["mape"],
                "rmse": tte["metrics"]["rmse"],
                "acc1": dp["metrics"]["acc1"], "acc5": dp["metrics"]["acc5"],
                "f1": dp["metrics"]["f1"],
            })
            print(f"ablate [{label} seed={seed}]: hr1={ts_m['hr1']:.4f} "
                  f"mape={tte['metrics']['mape']:.4f} acc1={dp['metrics']['acc1']:.4f}")
    table = out / "ablation.csv"
    cols = ["label", "branches", "no_inter", "no_lma", "no_rope", "seed",
            "hr1", "hr5", "mr", "mae", "mape", "rmse", "acc1", "acc5", "f1"]
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    write_run_manifest(out, "ablate", config_hash(cfg), seeds[0], [], ["ablation.csv"], clock)
    print(f"ablate: {len(rows)} rows -> {table}")
    return 0


def cmd_export_similar(args) -> int:
    clock = RunClock()
    cfg = load_config(args.config)
    bundle = load_dataset(Path(args.data), cfg)
    model, ckpt_cfg, _ = build_model_from_checkpoint(out_path(args.checkpoint), bundle)
    e = cfg["eval"]
    inst = ts_build(bundle.split_samples("test"), e["k_neg"], Rng(e["seed"]).child("ts"),
                    bundle.artifacts.grid_spec, n_queries=e["queries"])
    out = out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    k = args.k if args.k is not None else e["geojson_k"]
    export_similar_geojson(args.query_id, k, inst, model, bundle.artifacts, out)
    write_run_manifest(out.parent, "export-similar", config_hash(cfg), e["seed"], [],
                       [out.name], clock)
    print(f"export-similar: query {args.query_id}, top {k} -> {out}")
    return 0


def cmd_mask_sweep(args) -> int:
    clock = RunClock()
    cfg = load_config(args.config)
    bundle = load_dataset(Path(args.data), cfg)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    axis1 = args.view1_axis.split(",")
    axis2 = args.view2_axis.split(",")
    e = cfg["eval"]
    ratio = args.ratio
    rows = []
    for v1 in axis1:
        for v2 in axis2:
            sweep_cfg = json.loads(json.dumps(cfg))  # deep copy
            sweep_cfg["masking"]["view1"] = [{"kind": k, "ratio": ratio} for k in v1.split("+")]
            sweep_cfg["masking"]["view2"] = [{"kind": k, "ratio": ratio} for k in v2.split("+")]
            model, tc, _ = _pretrain_once(sweep_cfg, bundle, cfg["ablation"]["branches"],
                                          False, False, False, cfg["train"]["seed"],
                                          None, None, None)
            inst = ts_build(bundle.split_samples("test"), e["k_neg"],
                            Rng(e["seed"]).child("ts"), bundle.artifacts.grid_spec,
                            n_queries=e["queries"])
            m = ts_evaluate(inst, model, bundle.artifacts)
            rows.append({"view1": v1, "view2": v2, **m})
            print(f"mask-sweep [{v1} x {v2}]: hr1={m['hr1']:.4f}")
    path = out / "mask_sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view1", "view2", "hr1", "hr5", "mr"])
        for r in rows:
            w.writerow([r["view1"], r["view2"], repr(r["hr1"]), repr(r["hr5"]), repr(r["mr"])])
    write_run_manifest(out, "mask-sweep", config_hash(cfg), cfg["train"]["seed"], [],
                       ["mask_sweep.csv"], clock)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tigr",
        description="Trajectory representation learning: three-branch contrastive "
                    "pretraining and downstream evaluation.",
        epilog=describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="TOML config (defaults used if omitted)")
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = add("preprocess", cmd_preprocess, "filter, split, and build matrices")
    p.add_argument("--data", required=True, help="dataset directory from synth")

    p = add("pretrain", cmd_pretrain, "contrastive pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory for checkpoints and loss.csv")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--branches", default=None, help="branch subset, e.g. g+r+st")
    p.add_argument("--no-inter", action="store_true", help="drop the inter-modal loss")
    p.add_argument("--no-lma", action="store_true", help="fuse with a single global head")
    p.add_argument("--no-rope", action="store_true", help="disable rotary embeddings")

    p = add("embed", cmd_embed, "write the embedding binary for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "validation", "test", "all"], default="test")
    p.add_argument("--out", required=True, help="output .emb file")

    p = add("eval", cmd_eval, "evaluate a downstream task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=["ts", "tte", "dp"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kneg-sweep", default=None, help="comma list, e.g. 100,500,1000,2000")

    p = add("ablate", cmd_ablate, "branch-subset and component-removal table")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None, help="comma list of seeds")
    p.add_argument("--only", default=None, help="comma list of row labels to run")

    p = add("export-similar", cmd_export_similar, "GeoJSON of the most similar trajectories")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--query-id", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("mask-sweep", cmd_mask_sweep, "masking-combination experiment grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--view1-axis", default="rm,tc,cm,tc+cm")
    p.add_argument("--view2-axis", default="rm,tc,cm,rm+tc+cm")
    p.add_argument("--ratio", type=float, default=0.3)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, ContractViolation, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GradientError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
