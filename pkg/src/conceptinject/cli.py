"""Pipeline orchestration CLI.

Subcommands: gen-world, pretrain-lm, train-cf, eval, build-table, report.
Every command writes a provenance sidecar (command line, config hash, input
fingerprints) into its output directory, and all randomness funnels through
the --seed flag plus seeds recorded in the effective config.
"""

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import torch

from conceptinject import corpus, graph_store, lookup
from conceptinject.concept import ConceptEncoder
from conceptinject.evaluation import (EvalReport, compare_report, evaluate,
                                      format_table)
from conceptinject.lm import LMConfig, TinyLM, pretrain_base_lm
from conceptinject.tokenizer import Tokenizer, build_tokenizer
from conceptinject.training import TrainConfig, run_two_stage, train_stage

DEFAULT_CONFIG = {
    "world": {
        "n_subjects": 620,
        "value_pool_size": 100,
        "n_predicates": 24,
        "min_deg": 3,
        "max_deg": 20,
    },
    "split": {"ratios": [0.8, 0.1, 0.1]},
    "tokenizer": {"vocab_size": 512},
    "lm": {
        "dim": 64,
        "n_layers": 2,
        "n_heads": 4,
        "context": 128,
        "ffn_dim": 256,
        "epochs": 24,
        "learning_rate": 3e-3,
        "batch_size": 64,
        "slot_frac": 1.0,
        "max_slots": 8,
        "slot_weight": 6.0,
        "slot_warmup": 16,
        "slot_polish": 16,
    },
    "cf": {"hidden": 128, "slope": 0.01},
    "train_stage1": {
        "learning_rate": 3e-3,
        "weight_decay": 0.01,
        "batch_size": 32,
        "max_epochs": 12,
        "patience": 2,
    },
    "train_stage2": {
        "learning_rate": 1e-3,
        "weight_decay": 0.01,
        "batch_size": 32,
        "max_epochs": 8,
        "patience": 2,
    },
    "eval": {"ks": [1, 5, 10], "top_m": None},
}


def _merge_config(base, override, path=""):
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise SystemExit(f"unknown config key: {path}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise SystemExit(f"config key {path}{key} must be a mapping")
            merged[key] = _merge_config(base[key], value, f"{path}{key}.")
        else:
            merged[key] = value
    return merged


def load_config(path):
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    with open(path, encoding="utf-8") as fh:
        override = json.load(fh)
    return _merge_config(DEFAULT_CONFIG, override)


def _config_hash(config):
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _write_provenance(outdir, config, extra=None):
    record = {
        "command_line": sys.argv,
        "config": config,
        "config_sha256": _config_hash(config),
    }
    if extra:
        record.update(extra)
    with open(Path(outdir) / "provenance.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)


def _load_dataset(data_dir):
    data_dir = Path(data_dir)
    bites = {}
    for stage in ("stage1", "stage2"):
        for split in ("train", "val", "test"):
            bites[(stage, split)] = corpus.read_bites(
                data_dir / f"{stage}_{split}.jsonl")
    stars = graph_store.load_star_graphs(data_dir / "stars.json")
    manifest = corpus.read_manifest(data_dir / "splits.tsv")
    return bites, stars, manifest


def _load_lm(lm_dir):
    lm_dir = Path(lm_dir)
    model = TinyLM.load(lm_dir / "lm.tlm1").freeze()
    tok = Tokenizer.load(lm_dir / "tokenizer.vocab")
    return model, tok


def _require(path, what):
    if not Path(path).exists():
        raise SystemExit(f"missing {what}: {path}")
    return Path(path)


# ---- subcommands -----------------------------------------------------------

def cmd_gen_world(args):
    config = load_config(args.config)
    wc = corpus.WorldConfig(**config["world"])
    world = corpus.generate_toy_world(wc, args.seed)
    stage1 = corpus.render_stage1(world)
    stage2 = corpus.render_stage2(world, args.seed + 1)
    ratios = tuple(config["split"]["ratios"])
    s1_train, s1_val, s1_test, manifest = corpus.split_by_subject(
        stage1, ratios, args.seed + 2)
    by_split = {"train": [], "val": [], "test": []}
    for b in stage2:
        by_split[manifest[b.subject.qid]].append(b)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus.write_bites(s1_train, out / "stage1_train.jsonl")
    corpus.write_bites(s1_val, out / "stage1_val.jsonl")
    corpus.write_bites(s1_test, out / "stage1_test.jsonl")
    for split in by_split:
        corpus.write_bites(by_split[split], out / f"stage2_{split}.jsonl")
    graphs = corpus.export_star_graphs(world)
    graph_store.save_star_graphs(graphs, out / "stars.json")
    corpus.write_manifest(manifest, out / "splits.tsv")
    _write_provenance(out, config, {"seed": args.seed,
                                    "n_facts": len(world.facts)})
    print(f"wrote {len(world.facts)} facts for {len(world.subjects)} subjects to {out}")


def cmd_pretrain_lm(args):
    config = load_config(args.config)
    bites, _, _ = _load_dataset(_require(args.data, "dataset directory"))
    train_bites = bites[("stage1", "train")] + bites[("stage2", "train")]
    all_text = [b.text for split in ("train", "val", "test")
                for stage in ("stage1", "stage2")
                for b in bites[(stage, split)]]
    tok = build_tokenizer(all_text, config["tokenizer"]["vocab_size"])
    lc = config["lm"]
    lm_cfg = LMConfig(vocab_size=tok.vocab_size, dim=lc["dim"],
                      n_layers=lc["n_layers"], n_heads=lc["n_heads"],
                      context=lc["context"], ffn_dim=lc["ffn_dim"])
    model, stats = pretrain_base_lm(
        lm_cfg, tok, train_bites, seed=args.seed, epochs=lc["epochs"],
        lr=lc["learning_rate"], batch_size=lc["batch_size"],
        log_every=5 if args.verbose else 0,
        slot_frac=lc["slot_frac"], max_slots=lc["max_slots"],
        slot_weight=lc["slot_weight"], slot_warmup=lc["slot_warmup"],
        slot_polish=lc["slot_polish"])
    model.freeze()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fingerprint = model.save(out / "lm.tlm1")
    tok.save(out / "tokenizer.vocab")
    _write_provenance(out, config, {
        "seed": args.seed, "lm_fingerprint": fingerprint,
        "pretrain_stats": stats,
    })
    print(f"frozen LM fingerprint {fingerprint}")


def cmd_train_cf(args):
    config = load_config(args.config)
    bites, stars, _ = _load_dataset(_require(args.data, "dataset directory"))
    model, tok = _load_lm(_require(args.lm, "LM directory"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.n_vectors
    stage = args.stage

    if stage == 2:
        prev = out / f"cf_n{n}_stage1.cfp1"
        if prev.exists():
            encoder = ConceptEncoder.load(prev)
        elif args.skip_stage1:
            encoder = ConceptEncoder(
                dim_i=model.cfg.dim, dim_o=model.cfg.dim, n_vectors=n,
                hidden=config["cf"]["hidden"], slope=config["cf"]["slope"],
                seed=args.seed)
        else:
            raise SystemExit(f"missing stage-1 checkpoint: {prev} "
                             "(run --stage 1 first or pass --skip-stage1)")
    else:
        encoder = ConceptEncoder(
            dim_i=model.cfg.dim, dim_o=model.cfg.dim, n_vectors=n,
            hidden=config["cf"]["hidden"], slope=config["cf"]["slope"],
            seed=args.seed)

    tc = config[f"train_stage{stage}"]
    train_cfg = TrainConfig(learning_rate=tc["learning_rate"],
                            weight_decay=tc["weight_decay"],
                            batch_size=tc["batch_size"],
                            max_epochs=tc["max_epochs"],
                            patience=tc["patience"], seed=args.seed)
    stage_key = f"stage{stage}"
    encoder, report = train_stage(
        encoder, model, tok, bites[(stage_key, "train")], stars,
        bites[(stage_key, "val")], train_cfg, stage=str(stage),
        log_every=1 if args.verbose else 0)
    ckpt = out / f"cf_n{n}_stage{stage}.cfp1"
    fingerprint = encoder.save(ckpt)
    sidecar = {
        "seed": args.seed,
        "stage": stage,
        "n_vectors": n,
        "cf_fingerprint": fingerprint,
        "lm_fingerprint": model.fingerprint(),
        "config": config,
        "report": report.to_dict(),
        "skip_stage1": bool(args.skip_stage1),
    }
    with open(str(ckpt) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    _write_provenance(out, config, {"cf_fingerprint": fingerprint})
    print(f"stage {stage} checkpoint {ckpt} fingerprint {fingerprint}")


def cmd_eval(args):
    config = load_config(args.config)
    bites, stars, _ = _load_dataset(_require(args.data, "dataset directory"))
    model, tok = _load_lm(_require(args.lm, "LM directory"))
    encoder = None
    table = None
    if args.mode == "cf":
        if args.table:
            table = lookup.load_table(_require(args.table, "lookup table"))
            table.validate_against(model=model)
        elif args.cf:
            encoder = ConceptEncoder.load(_require(args.cf, "encoder checkpoint"))
        else:
            raise SystemExit("--mode cf requires --cf or --table")
    dataset = bites[(args.stage_data, args.split)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(
        args.mode, dataset, stars, model, tok, encoder=encoder, table=table,
        ks=tuple(config["eval"]["ks"]), top_m=config["eval"]["top_m"],
        audit_path=out / f"audit_{args.mode}.jsonl")
    report.provenance = {
        "lm_fingerprint": model.fingerprint(),
        "cf_fingerprint": encoder.fingerprint() if encoder else
        (table.cf_fingerprint if table else None),
        "split": args.split,
        "stage_data": args.stage_data,
    }
    report_path = out / f"report_{args.mode}.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    _write_provenance(out, config, {"mode": args.mode})
    print(format_table([report]))
    print(f"report written to {report_path}")


def cmd_build_table(args):
    config = load_config(args.config)
    _, stars, _ = _load_dataset(_require(args.data, "dataset directory"))
    model, tok = _load_lm(_require(args.lm, "LM directory"))
    encoder = ConceptEncoder.load(_require(args.cf, "encoder checkpoint"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "table.cflt"
    _, sidecar = lookup.build_table(stars, encoder, model, tok, table_path,
                                    top_m=config["eval"]["top_m"])
    _write_provenance(out, config, {"table": sidecar})
    print(f"table with {sidecar['entry_count']} entries at {table_path} "
          f"(sha256 {sidecar['table_sha256']})")


def cmd_report(args):
    reports = []
    for path in args.reports:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        rep = EvalReport(mode=data["mode"], ks=data["ks"])
        for key, value in data.items():
            setattr(rep, key, value)
        reports.append(rep)
    comparison = compare_report(reports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.json", "w", encoding="utf-8") as fh:
        json.dump(comparison, fh, indent=2, sort_keys=True)
    print(format_table(reports))
    print(json.dumps(comparison, indent=2, sort_keys=True))


# ---- argument parsing ------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="conceptinject",
        description="Soft-prompt knowledge injection pipeline")
    parser.add_argument("--threads", type=int, default=1,
                        help="cap intra-op worker threads (default 1, "
                             "deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("gen-world", help="generate the toy corpus and graphs")
    common(p)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("pretrain-lm", help="pretrain and freeze the base LM")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_pretrain_lm)

    p = sub.add_parser("train-cf", help="train the concept encoder")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--n-vectors", type=int, default=5)
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--skip-stage1", action="store_true",
                   help="stage-2 ablation without a stage-1 checkpoint")
    p.set_defaults(func=cmd_train_cf)

    p = sub.add_parser("eval", help="evaluate a prompt mode")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--mode", choices=("baseline", "rag", "cf"), required=True)
    p.add_argument("--cf", default=None, help="encoder checkpoint for cf mode")
    p.add_argument("--table", default=None, help="lookup table for cf mode")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--stage-data", choices=("stage1", "stage2"),
                   default="stage2")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("build-table", help="precompute the lookup table")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--cf", required=True)
    p.set_defaults(func=cmd_build_table)

    p = sub.add_parser("report", help="merge eval reports into a comparison")
    p.add_argument("--out", required=True)
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    torch.set_num_threads(args.threads)
    args.func(args)


if __name__ == "__main__":
    main()
