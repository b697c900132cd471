"""Command-line driver. Subcommands cover corpus generation, each training
stage, decoding, and the analysis experiments; every command writes its
artifacts under the run directory given by --out and exits non-zero on any
contract violation or missing prerequisite."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .adaptation import (LossLog, TrainHistory, batch_tta, generate_pseudo_labels,
                         predict_class_label, sat_train, train_domain_classifier,
                         train_router, train_si, adaptive_train)
from .autodiff import Tensor
from .corpus import generate_corpus, load_corpus
from .harness import (ExperimentConfig, MissingArtifact, _require, benchmark_rtf,
                      data_quantity_curve, export_routing, load_artifacts,
                      no_domain_routing, round_robin, run_pipeline, run_experiment,
                      score_decodes, write_adaptation_log, write_routing_csv,
                      write_scores, _decode_split, read_routing_csv)
from .model import ModelParams, init_experts_from_adaptive_training
from .router import RouterParams


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return ExperimentConfig.from_json(Path(args.config).read_text())
    return ExperimentConfig()


def _corpus(args, config):
    manifest = Path(args.out) / "corpus" / "manifest.txt"
    return load_corpus(_require(manifest, "moe-route gen-corpus"))


def cmd_gen_corpus(args) -> int:
    config = _load_config(args)
    corpus = generate_corpus(config.corpus, args.seed, Path(args.out) / "corpus")
    print(f"generated {len(corpus.utterances)} utterances for "
          f"{len(corpus.speakers)} speakers under {args.out}/corpus")
    return 0


def cmd_train_si(args) -> int:
    config = _load_config(args)
    corpus = _corpus(args, config)
    out = Path(args.out)
    model = train_si(corpus, config.resolved_model(corpus), args.seed,
                     config.plan.si_epochs, config.plan.lr, config.plan.batch_size,
                     loss_log=LossLog(out / "si_loss.csv"))
    model.save(out / "si.bin")
    print(f"wrote {out / 'si.bin'}")
    return 0


def cmd_adaptive_train(args) -> int:
    config = _load_config(args)
    corpus = _corpus(args, config)
    out = Path(args.out)
    si = ModelParams.load(_require(out / "si.bin", "moe-route train-si"))
    model, adapters, groups = adaptive_train(si, corpus, config.grouping, args.seed,
                                             config.plan.adaptive_epochs,
                                             config.plan.lr, config.plan.batch_size)
    moe = init_experts_from_adaptive_training(model, adapters)
    moe.save(out / "moe_init.bin")
    (out / "groups.json").write_text(json.dumps(groups))
    print(f"wrote {out / 'moe_init.bin'} with {len(groups)} group-initialized experts")
    return 0


def cmd_sat(args) -> int:
    config = _load_config(args)
    corpus = _corpus(args, config)
    out = Path(args.out)
    moe = ModelParams.load(_require(out / "moe_init.bin", "moe-route adaptive-train"))
    canonical, theta = sat_train(moe, corpus, config.weights, config.grouping,
                                 args.seed, config.plan.sat_epochs, config.plan.lr,
                                 config.plan.batch_size, class_task=config.class_task,
                                 loss_log=LossLog(out / "sat_loss.csv"))
    canonical.save(out / "canonical.bin")
    write_routing_csv(out / "theta.csv",
                      [[s, "*"] + [float(v) for v in theta[s].data]
                       for s in sorted(theta)], canonical.config.num_experts)
    print(f"wrote {out / 'canonical.bin'} and {out / 'theta.csv'}")
    return 0


def cmd_train_router(args) -> int:
    config = _load_config(args)
    corpus = _corpus(args, config)
    out = Path(args.out)
    canonical = ModelParams.load(_require(out / "canonical.bin", "moe-route sat"))
    theta_map, _ = read_routing_csv(_require(out / "theta.csv", "moe-route sat"))
    theta = {s: Tensor(v, name=f"r.{s}") for s, v in theta_map.items()}
    router = train_router(canonical, theta, corpus, config.weights,
                          config.router_config(canonical.config), config.grouping,
                          args.seed, config.plan.router_epochs, config.plan.lr,
                          config.plan.batch_size, loss_mode=config.router_loss,
                          class_task=config.class_task,
                          loss_log=LossLog(out / "router_loss.csv"))
    router.save(out / "router.bin")
    print(f"wrote {out / 'router.bin'}")
    return 0


def cmd_tta_batch(args) -> int:
    config = _load_config(args)
    corpus = _corpus(args, config)
    out = Path(args.out)
    canonical = ModelParams.load(_require(out / "canonical.bin", "moe-route sat"))
    classifier = train_domain_classifier(corpus, config.grouping, args.seed,
                                         epochs=config.plan.classifier_epochs)
    steps = args.steps if args.steps is not None else config.plan.tta_steps
    reports = []
    routing = {}
    for s in corpus.test_speakers():
        adapt = corpus.by_speaker("adapt")[s]
        pseudo, _ = generate_pseudo_labels(canonical, adapt)
        label = (predict_class_label(classifier, adapt, config.grouping)
                 if config.class_task else None)
        r, report = batch_tta(canonical, adapt, pseudo, label, config.weights,
                              steps, config.plan.tta_lr, speaker_id=s)
        routing[s] = r
        reports.append(report)
    write_adaptation_log(out / "adaptation_log.csv", reports)
    write_routing_csv(out / "routing_batch.csv",
                      [[s, "*"] + [float(v) for v in routing[s]]
                       for s in sorted(routing)], canonical.config.num_experts)
    test = corpus.split("test")
    table = score_decodes(test, _decode_split(canonical, test, routing))
    write_scores(out / "scores_batch.csv", table)
    print(f"batch adaptation wer {table.wer:.4f} over {table.tokens} tokens")
    return 0


def cmd_decode(args) -> int:
    config = _load_config(args)
    corpus = _corpus(args, config)
    out = Path(args.out)
    test = corpus.split("test")
    if args.mode == "si":
        model = ModelParams.load(_require(out / "si.bin", "moe-route train-si"))
        table = score_decodes(test, _decode_split(model, test))
        write_scores(out / "scores_si.csv", table)
    elif args.mode == "batch":
        model = ModelParams.load(_require(out / "canonical.bin", "moe-route sat"))
        routing, _ = read_routing_csv(_require(out / "routing_batch.csv",
                                               "moe-route tta-batch"))
        table = score_decodes(test, _decode_split(model, test, routing))
        write_scores(out / "scores_batch.csv", table)
    else:  # onfly
        from .adaptation import onfly_decode
        model = ModelParams.load(_require(out / "canonical.bin", "moe-route sat"))
        router = RouterParams.load(_require(out / "router.bin", "moe-route train-router"))
        hyps = {}
        rows = []
        for u in test:
            hyp, r = onfly_decode(model, router, u)
            hyps[u.utt_id] = hyp
            rows.append([u.speaker_id, u.utt_id] + [float(v) for v in r])
        table = score_decodes(test, hyps)
        write_scores(out / "scores_onfly.csv", table)
        write_routing_csv(out / "routing_onfly.csv", rows, model.config.num_experts)
    print(f"{args.mode} wer {table.wer:.4f} over {table.tokens} tokens")
    return 0


def cmd_pipeline(args) -> int:
    config = _load_config(args)
    art = run_pipeline(config, args.seed, Path(args.out))
    wer = art.metrics["wer"]
    print(f"pipeline done: wer si={wer['si']:.4f} batch={wer['batch']:.4f} "
          f"onfly={wer['onfly']:.4f}")
    return 0


def cmd_experiment(args) -> int:
    config = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    out = run_experiment(config, Path(args.out), seeds=seeds)
    print(json.dumps(out["report"]["majority"], indent=1))
    return 0


def cmd_benchmark_rtf(args) -> int:
    art = load_artifacts(Path(args.out))
    records = benchmark_rtf(art, out_path=Path(args.out) / "rtf.csv")
    for mode, rec in records.items():
        print(f"{mode}: rtf {rec.rtf:.4f} ({rec.wall_seconds:.2f}s "
              f"/ {rec.audio_seconds:.2f}s audio)")
    return 0


def cmd_round_robin(args) -> int:
    art = load_artifacts(Path(args.out))
    result = round_robin(art, out_path=Path(args.out) / "roundrobin.csv")
    print(f"round-robin wer {result['rr_wer']:.4f} vs si {result['si_wer']:.4f}")
    return 0


def cmd_curves(args) -> int:
    art = load_artifacts(Path(args.out))
    result = data_quantity_curve(art, out_path=Path(args.out) / "curve.csv")
    print(f"pearson(batch wer, cosine) = {result['pearson']:.4f}")
    return 0


def cmd_export_routing(args) -> int:
    art = load_artifacts(Path(args.out))
    nd = no_domain_routing(art) if args.no_domain else None
    summary = export_routing(art, nd, out_dir=Path(args.out))
    print(json.dumps(summary, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moe-route",
        description="Mixture-of-experts speaker adaptation experiments at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, steps=False, mode=False, seeds=False):
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="ExperimentConfig JSON path")
        if steps:
            p.add_argument("--steps", type=int, default=None,
                           help="adaptation step count override")
        if mode:
            p.add_argument("--mode", choices=("si", "batch", "onfly"), default="onfly")
        if seeds:
            p.add_argument("--seeds", help="comma-separated seed list")

    handlers = {
        "gen-corpus": (cmd_gen_corpus, {}),
        "train-si": (cmd_train_si, {}),
        "adaptive-train": (cmd_adaptive_train, {}),
        "sat": (cmd_sat, {}),
        "train-router": (cmd_train_router, {}),
        "tta-batch": (cmd_tta_batch, {"steps": True}),
        "decode": (cmd_decode, {"mode": True}),
        "pipeline": (cmd_pipeline, {}),
        "experiment": (cmd_experiment, {"seeds": True}),
        "benchmark-rtf": (cmd_benchmark_rtf, {}),
        "round-robin": (cmd_round_robin, {}),
        "curves": (cmd_curves, {}),
        "export-routing": (cmd_export_routing, {}),
    }
    for name, (handler, extra) in handlers.items():
        p = sub.add_parser(name)
        common(p, **extra)
        if name == "export-routing":
            p.add_argument("--no-domain", action="store_true",
                           help="also run the no-domain-knowledge comparison arm")
        p.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
