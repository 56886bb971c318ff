"""Command-line pipeline: gen-data, train, eval, dca, analyze, param-audit.

No live steering — every command reads files, writes files, and exits.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis as an
from . import backbone as bb
from . import checkpoint as ck
from . import config as cf
from . import datagen as dg
from . import evaluation as ev
from . import hypernet as hn
from . import training as tr
from .errors import ConfigError, DataError, NumericError


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def load_split(data_dir, split: str, n_tasks: int, dims: tuple[int, int, int]):
    """Manifest + volumes for one split as (volumes, labels, ids)."""
    data_dir = Path(data_dir)
    rows = dg.read_manifest(data_dir / f"{split}.jsonl", n_tasks)
    h, w, z = dims
    vols = np.zeros((len(rows), h, w, z), dtype=np.float32)
    labels = np.zeros((len(rows), n_tasks), dtype=np.int64)
    ids = []
    for i, row in enumerate(rows):
        path = data_dir / "volumes" / f"{row['id']}.hctv"
        try:
            vol = dg.load_volume(path)
        except OSError as exc:
            raise DataError(f"cannot open volume file: {exc}") from exc
        if vol.shape != (h, w, z):
            raise DataError(
                f"volume {row['id']} has shape {vol.shape}, config expects {(h, w, z)}"
            )
        vols[i] = vol
        labels[i] = row["labels"]
        ids.append(row["id"])
    return vols, labels, ids


def bundle_from_checkpoint(path):
    """Rebuild a model around a checkpoint's own config echo, verifying the
    stored parameters actually fit that config."""
    data = ck.load_checkpoint(path)
    try:
        rc = cf.parse_config(data.config)
    except ConfigError as exc:
        raise DataError(f"checkpoint carries an unusable config: {exc}") from exc
    fresh = tr.build_model(rc.backbone, rc.hyperlora, rc.data.n_tasks,
                           rc.train.variant, rc.seed)

    def plan(store):
        return {p: (store[p].data.shape, store.is_trainable(p)) for p in store.paths()}

    if plan(fresh.store) != plan(data.store):
        raise DataError("checkpoint parameters do not match its embedded config")
    bundle = tr.ModelBundle(store=data.store, backbone_cfg=rc.backbone,
                            hyper_cfg=rc.hyperlora, descriptors=fresh.descriptors,
                            n_tasks=rc.data.n_tasks, variant=rc.train.variant)
    return bundle, rc, data


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = cf.load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cf.write_effective_config(cfg, out)
    specs = {split: cfg.data.spec(cfg.seed, split) for split in cf.SPLITS}
    counts = {}
    train_rows = []
    for split in cf.SPLITS:
        rows = dg.generate_cohort(specs[split], out, split)
        counts[split] = len(rows)
        if split == "train":
            train_rows = rows
    rulebook = dg.build_rulebook(specs["train"])
    if train_rows:
        scorer = dg.RulebookScorer(rulebook)
        stats = np.array([
            scorer.score_all(dg.load_volume(out / "volumes" / f"{row['id']}.hctv"))
            for row in train_rows
        ])
        labels = np.array([row["labels"] for row in train_rows])
        dg.fill_thresholds(rulebook, stats, labels)
    _write_json(out / "rulebook.json", rulebook)
    print(f"wrote {out}: " + ", ".join(f"{counts[s]} {s}" for s in cf.SPLITS))
    return 0


def cmd_train(args) -> int:
    cfg = cf.load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cf.write_effective_config(cfg, out)
    dims = (cfg.data.height, cfg.data.width, cfg.data.depth)
    tv, tl, _ = load_split(args.data, "train", cfg.data.n_tasks, dims)
    vv, vl, _ = load_split(args.data, "val", cfg.data.n_tasks, dims)
    bundle = tr.build_model(cfg.backbone, cfg.hyperlora, cfg.data.n_tasks,
                            cfg.train.variant, cfg.seed)
    result = tr.train(bundle, cfg.train, tv, tl, vv, vl)
    (out / "metrics.jsonl").write_text(tr.metrics_jsonl(result.log))
    ck.save_checkpoint(out / "model.ckpt", bundle.store, cf.effective_config(cfg),
                       result.rng_state, epoch=result.best_epoch)
    best = "n/a" if result.best_val_auc is None else f"{result.best_val_auc:.4f}"
    print(f"trained {cfg.train.variant}: best epoch {result.best_epoch}, val AUC {best}")
    return 0


def cmd_eval(args) -> int:
    if args.bootstrap_iters is not None and args.bootstrap_iters < 0:
        raise ConfigError("bootstrap iterations must be >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scores is not None:
        rows = ev.read_scores(args.scores)
        iters = 1000 if args.bootstrap_iters is None else args.bootstrap_iters
        seed = args.seed
        _write_json(out / "config.json", {
            "seed": seed,
            "eval": {"bootstrap_iters": iters, "scores_file": str(args.scores)},
        })
    else:
        if args.data is None:
            raise ConfigError("eval needs --data when scoring from a checkpoint")
        bundle, rc, _ = bundle_from_checkpoint(args.checkpoint)
        split = args.split or rc.eval.split
        iters = rc.eval.bootstrap_iters if args.bootstrap_iters is None else args.bootstrap_iters
        rc = replace(rc, eval=replace(rc.eval, split=split, bootstrap_iters=iters))
        cf.write_effective_config(rc, out)
        dims = (rc.data.height, rc.data.width, rc.data.depth)
        vols, labels, ids = load_split(args.data, split, rc.data.n_tasks, dims)
        rows = tr.score_rows(bundle, vols, labels, ids)
        probs = ev.sigmoid_map(np.array([r["score"] for r in rows]))
        for row, p in zip(rows, probs):
            row["score"] = float(p)
        ev.write_scores(out / "scores.jsonl", rows)
        seed = rc.seed
    summaries = ev.evaluate_tasks(rows, iters=iters, seed=seed)
    (out / "eval.csv").write_text(ev.eval_csv(summaries))
    mean = float(np.mean([s["auc"] for s in summaries]))
    print(f"evaluated {len(summaries)} tasks, mean AUC {mean:.4f}")
    return 0


def cmd_dca(args) -> int:
    if not args.t_lo < args.t_hi or not 0.0 < args.t_lo or not args.t_hi < 1.0:
        raise ConfigError("need 0 < t-lo < t-hi < 1")
    if args.steps < 2:
        raise ConfigError("need at least 2 threshold steps")
    rows = ev.read_scores(args.scores)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {
        "dca": {"t_lo": args.t_lo, "t_hi": args.t_hi, "steps": args.steps,
                "scores_file": str(args.scores)},
    })
    grouped = ev.group_scores(rows)
    for task, (probs, labels) in grouped.items():
        if probs.min() < 0.0 or probs.max() > 1.0:
            raise DataError(
                f"task {task}: scores are not probabilities in [0, 1]; "
                "decision curves need calibrated scores"
            )
        curve = ev.dca_curve(probs, labels, args.t_lo, args.t_hi, args.steps)
        (out / f"dca-task{task}.csv").write_text(ev.dca_csv(curve))
    print(f"wrote decision curves for {len(grouped)} tasks to {out}")
    return 0


def cmd_analyze(args) -> int:
    bundle, rc, _ = bundle_from_checkpoint(args.checkpoint)
    if bundle.variant != "hyperct":
        raise ConfigError(
            f"weight-space analysis needs per-task generated adapters; "
            f"checkpoint variant is {bundle.variant!r}"
        )
    mode = args.mode or rc.analysis.mode
    rc = replace(rc, analysis=replace(rc.analysis, mode=mode))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cf.write_effective_config(rc, out)
    V = an.task_weight_matrix(bundle.store, bundle.hyper_cfg, bundle.descriptors,
                              bundle.n_tasks, mode=mode)
    coords, _ = an.pca_2d(V)
    (out / "pca.csv").write_text(an.embeddings_csv(coords))
    distances = an.cosine_distances(V)
    (out / "mds.csv").write_text(an.embeddings_csv(an.mds_2d(distances)))
    k_range = range(rc.analysis.k_min, rc.analysis.k_max + 1)
    report = an.cluster_report(V, k_range)
    _write_json(out / "cluster_report.json", report)
    print(f"k* = {report['k_star']} (silhouette {report['silhouette']:.3f})")
    return 0


REFERENCE_BACKBONE = bb.BackboneConfig(hidden_dim=768, num_layers=12, num_heads=12,
                                       patch_size=16, image_side=224, mlp_ratio=4)
REFERENCE_RANK = 16
REFERENCE_HEAD_IN = 64


def audit_report(cfg: cf.RunConfig) -> str:
    """Closed-form vs live parameter counts for the given config, plus the
    same closed forms evaluated at the reference scale (D=768, L=12, r=16)."""
    lines = []

    def block(title, bcfg, hcfg_rank, hcfg_head_in, store=None, descriptors=None):
        d = bcfg.hidden_dim
        descs = descriptors if descriptors is not None else bb.enumerate_target_modules(bcfg)
        lines.append(title)
        lines.append(f"  adapted modules         {len(descs)} (6 per layer x {bcfg.num_layers} layers)")
        lora = hn.param_count_lora(hcfg_head_in, d, hcfg_rank)
        full = hn.param_count_full(hcfg_head_in, d)
        lines.append(f"  head cost, rank-{hcfg_rank} pair vs dense DxD target (D={d}):")
        lines.append(f"    factor pair           {lora}")
        lines.append(f"    dense                 {full}")
        lines.append(f"    ratio                 {lora / full:.6f} (= 2r/D)")
        heads_total = hn.heads_closed_form(descs, hcfg_rank, hcfg_head_in)
        lines.append(f"  all generation heads    {heads_total}")
        widest = max(hn.head_shape_plan(descs, hcfg_rank, hcfg_head_in),
                     key=lambda p: p["out_len"])
        lines.append(f"  widest head output      {widest['out_len']} ({widest['kind']})")
        if store is not None:
            counts = hn.census(store)
            lines.append("  live census:")
            for component in sorted(c for c in counts if c != "trainable_total"):
                lines.append(f"    {component:<21} {counts[component]}")
            lines.append(f"    trainable total       {counts['trainable_total']}")
            if counts.get("heads", 0) != heads_total:
                lines.append("    WARNING: live head count disagrees with closed form")

    bundle = tr.build_model(cfg.backbone, cfg.hyperlora, cfg.data.n_tasks,
                            cfg.train.variant, cfg.seed)
    block(f"given config (D={cfg.backbone.hidden_dim}, L={cfg.backbone.num_layers}, "
          f"r={cfg.hyperlora.rank})",
          cfg.backbone, cfg.hyperlora.rank, cfg.hyperlora.head_in_dim,
          store=bundle.store, descriptors=bundle.descriptors)
    lines.append("")
    block(f"reference scale (D={REFERENCE_BACKBONE.hidden_dim}, "
          f"L={REFERENCE_BACKBONE.num_layers}, r={REFERENCE_RANK}) — closed forms only",
          REFERENCE_BACKBONE, REFERENCE_RANK, REFERENCE_HEAD_IN)
    return "\n".join(lines) + "\n"


def cmd_param_audit(args) -> int:
    cfg = cf.load_config(args.config)
    sys.stdout.write(audit_report(cfg))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; our contract reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hyperlora", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic cohort + rulebook")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant; writes checkpoint + metric log")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-task AUC table with bootstrap CIs")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--scores", help="summarise an existing score file instead of a model")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=cf.SPLITS)
    p.add_argument("--bootstrap-iters", type=int)
    p.add_argument("--seed", type=int, default=0,
                   help="bootstrap seed when evaluating a raw score file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dca", help="decision-curve CSVs from a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t-lo", type=float, default=ev.DCA_T_LO)
    p.add_argument("--t-hi", type=float, default=ev.DCA_T_HI)
    p.add_argument("--steps", type=int, default=ev.DCA_STEPS)
    p.set_defaults(func=cmd_dca)

    p = sub.add_parser("analyze", help="PCA/MDS embeddings + cluster report from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("factors", "materialized"))
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("param-audit", help="closed-form vs live parameter counts")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_param_audit)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cf.apply_thread_cap()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    """Console-script wrapper: exit with the command's status code."""
    raise SystemExit(main())
