"""Command-line entry point: dataset synthesis, reward-model training and evaluation,
policy pretraining, GRPO fine-tuning, ablations and a consolidated report.

Exit codes: 0 success, 1 usage, 2 data error, 3 divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import flowgen as fg
from . import pacodata as pd
from . import pacogrpo as pg
from . import pacoreward as pr
from . import rankmetrics as rm
from . import toyworld as tw
from .config import ConfigError, ExperimentConfig
from .numcore import CheckpointError, NonFiniteGradientError, RngStream

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

# sub-stream ids under the global seed
S_DATA, S_SCORER, S_PROMPTS, S_PRETRAIN, S_GRPO = 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _log(msg: str) -> None:
    print(msg, flush=True)


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def prepare_out(out, force: bool, allow_existing: bool = False) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not (force or allow_existing):
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def prompt_pool(cfg: ExperimentConfig) -> tuple[list[tw.PromptSpec], list[tw.PromptSpec]]:
    """(train, eval) prompts for policy pretraining and RL, derived from the global seed."""
    s = RngStream(cfg.seed).split(S_PROMPTS)
    pool = [tw.random_prompt(s.split(i)) for i in range(cfg.policy.prompts)]
    k = cfg.policy.train_prompts
    if not 0 < k < len(pool):
        raise ConfigError("policy.train_prompts must leave at least one eval prompt")
    return pool[:k], pool[k:]


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- commands

def cmd_synth_data(args) -> int:
    cfg = load_config(args)
    out = prepare_out(args.out, args.force)
    p = cfg.dataset
    root = RngStream(cfg.seed).split(S_DATA)
    prompts = [tw.random_prompt(root.split(100_000 + i)) for i in range(p.prompts)]
    ds = pd.build_dataset(prompts, root, p.grids_per_prompt, p.rows, p.cols, p.noise_scale, p.jitter,
                          p.holdout, p.resolution, p.policy, p.rationale)
    counts = pd.write_dataset(out, ds, cfg.seed)
    write_json(out / "config.json", cfg.to_json())
    write_json(out / "counts.json", {**counts, "expected_instances": pd.instance_count(
        p.prompts, p.grids_per_prompt, p.rows, p.cols)})
    for k, v in counts.items():
        _log(f"{k}: {v}")
    return EXIT_OK


def cmd_train_reward(args) -> int:
    cfg = load_config(args)
    pairs = pd.read_pairs(args.pairs)
    if not pairs:
        raise pd.DataError(f"{args.pairs}: no pairs")
    out = prepare_out(args.out, args.force)
    sp = cfg.scorer
    if sp.max_pairs:
        pairs = pairs[:sp.max_pairs]
    alpha, use_rat = (1.0, False) if sp.fast else (sp.alpha, True)
    scorer, log = pr.train_scorer(pairs, alpha, sp.epochs, sp.lr, RngStream(cfg.seed).split(S_SCORER),
                                  sp.batch_size, sp.hidden, use_rationale=use_rat)
    pr.save_scorer(out / "scorer.ckpt", scorer, {"alpha": alpha, "rationale": use_rat, "seed": cfg.seed})
    with open(out / "scorer_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "decision_accuracy"])
        for e in log.epochs:
            w.writerow([e["epoch"], f"{e['loss']:.10g}", f"{e['decision_accuracy']:.10g}"])
    summary = {"pairs": len(pairs), "alpha": alpha, "rationale": use_rat, **log.last(),
               "preference_accuracy_train": pr.preference_accuracy(scorer, pairs)}
    write_json(out / "scorer_summary.json", summary)
    _log(f"trained scorer on {len(pairs)} pairs: loss {summary.get('loss', float('nan')):.4f}, "
         f"train preference accuracy {summary['preference_accuracy_train']:.4f}")
    return EXIT_OK


def load_benchmark(path) -> list[pd.RankingInstance]:
    path = Path(path)
    grids = pd.read_grids(path.parent / "grids.jsonl")
    with open(path) as fh:
        has_split = any('"split"' in line for line in fh)
    return pd.read_instances(path, grids, split="benchmark" if has_split else None)


def cmd_eval_reward(args) -> int:
    cfg = load_config(args)
    instances = load_benchmark(args.benchmark)
    if not instances:
        raise pd.DataError(f"{args.benchmark}: no benchmark instances")
    missing = [x.instance_id for x in instances if x.annotation is None]
    if missing:
        raise pd.DataError(f"{len(missing)} benchmark instances are unannotated (first id {missing[0]})")
    scorer = pr.load_scorer(args.scorer)
    out = prepare_out(args.out, args.force, allow_existing=True)
    trained = rm.score_benchmark(rm.pair_scorer_adapter(scorer), instances)
    rows = [
        rm.benchmark_report(rm.oracle_scorer, instances, "oracle"),
        rm.benchmark_report(rm.random_scorer(cfg.seed), instances, "random"),
        rm.benchmark_report(rm.cosine_scorer, instances, "raw-cosine"),
        rm.benchmark_report(None, instances, "paco-reward", results=trained),
    ]
    rm.write_report_csv(out / "benchmark_report.csv", rows)
    rm.write_instance_csv(out / "benchmark_instances.csv", trained)
    pairs = [q for inst in instances for q in pd.ranking_to_pairs(inst, rationale=False)]
    summary = {"rows": rows, "decision_accuracy": pr.decision_accuracy(scorer, pairs),
               "preference_accuracy": pr.preference_accuracy(scorer, pairs)}
    write_json(out / "eval_summary.json", summary)
    for r in rows:
        _log(f"{r['method']:>12}: acc {r['accuracy']:.4f} tau {r['tau']:.4f} rho {r['rho']:.4f} "
             f"t1b1 {r['t1b1']:.4f} pairwise {r['pairwise_acc']:.4f} (n={r['n_samples']})")
    return EXIT_OK


def cmd_train_policy(args) -> int:
    cfg = load_config(args)
    out = prepare_out(args.out, args.force)
    train, evalp = prompt_pool(cfg)
    pool = train + evalp
    pp = cfg.policy
    model, losses = fg.pretrain(pool, pp.steps, RngStream(cfg.seed).split(S_PRETRAIN), pp.resolution,
                                pp.batch_size, pp.lr)
    fg.save_flow_model(out / "policy.ckpt", model, {"seed": cfg.seed, "steps": pp.steps})
    with open(out / "policy_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, f"{v:.10g}"])
    _log(f"pretrained policy for {pp.steps} steps, final loss {losses[-1] if losses else float('nan'):.4f}")
    return EXIT_OK


def build_channels(names: list[str], scorer_path) -> list[pg.RewardChannel]:
    out = []
    for n in names:
        if n == "consistency":
            if scorer_path:
                out.append(pg.scorer_consistency_channel(pr.load_scorer(scorer_path)))
            else:
                out.append(pg.analytic_consistency_channel())
        elif n == "alignment":
            out.append(pg.alignment_channel())
        else:
            raise UsageError(f"unknown channel {n!r}; choose from consistency, alignment")
    return out


def parse_channels(text: str) -> list[str]:
    names = [c.strip() for c in text.split(",") if c.strip()]
    if not names or len(set(names)) != len(names):
        raise UsageError(f"--channels needs a comma-separated list of distinct names, got {text!r}")
    return names


def cmd_grpo_train(args) -> int:
    cfg = load_config(args)
    names = parse_channels(args.channels)
    channels = build_channels(names, args.scorer)
    try:
        weights = cfg.weights_for(names)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    policy = fg.load_flow_model(args.policy)
    out = prepare_out(args.out, args.force)
    train, evalp = prompt_pool(cfg)
    res = pg.run_grpo(policy, train, evalp, channels, weights, cfg.grpo, RngStream(cfg.seed).split(S_GRPO),
                      eval_every=cfg.eval_every, eval_seed=cfg.seed, csv_path=out / "epochs.csv",
                      log=_log if args.verbose else None)
    fg.save_flow_model(out / "policy_grpo.ckpt", res.state.policy, {"seed": cfg.seed})
    summary = res.summary(names, weights)
    summary.update({"channels": names, "weights": weights,
                    "consistency_source": "scorer" if args.scorer else "analytic",
                    "eval_curve": res.eval_curve, "grpo": cfg.grpo.to_json()})
    write_json(out / "grpo_summary.json", summary)
    for n in names:
        _log(f"{n}: eval {res.eval_before[n]:.4f} -> {res.eval_after[n]:.4f}")
    if summary["final_dominance_ratio"] is not None:
        _log(f"final dominance ratio: {summary['final_dominance_ratio']:.4f}")
    return EXIT_OK


ABLATION_MODES = ("resolution", "logtame")


def cmd_ablate(args) -> int:
    if args.mode not in ABLATION_MODES:
        raise UsageError(f"unknown ablation mode {args.mode!r}; choose from {', '.join(ABLATION_MODES)}")
    cfg = load_config(args)
    names = ["consistency", "alignment"]
    channels = build_channels(names, args.scorer)
    policy = fg.load_flow_model(args.policy)
    out = prepare_out(args.out, args.force, allow_existing=True)
    train, evalp = prompt_pool(cfg)
    if args.mode == "resolution":
        weights = cfg.weights_for(names)
        summary = pg.resolution_ablation(policy, train, evalp, channels, weights, cfg.grpo,
                                         cfg.ablation.resolutions, cfg.seed, eval_every=args.eval_every)
        for d, arm in summary["arms"].items():
            _log(f"d_train={d}: status {arm['status']}, eval reward {arm['eval_aggregated_after']:.4f} "
                 f"({arm['relative_to_full']:.3f} of full), cost ratio {arm['cost_ratio']:.3f}")
    else:
        summary = pg.logtame_ablation(policy, train, evalp, channels, cfg.ablation.logtame_weights, cfg.grpo,
                                      cfg.ablation.logtame_seeds)
        for row in summary["pairs"]:
            _log(f"seed {row['seed']}: naive ratio {row['naive']:.4f}, tamed ratio {row['tamed']:.4f}")
        _log(f"tamed < naive in {summary['tamed_lower_count']} of {len(summary['pairs'])} seed pairs")
    summary["consistency_source"] = "scorer" if args.scorer else "analytic"
    pg.write_summary(out / f"ablation_{args.mode}.json", summary)
    pg.write_plot_csv(out / f"ablation_{args.mode}_plot.csv", summary)
    return EXIT_OK


# ---------------------------------------------------------------- report

CRITERIA = {
    "C1": "count identity",
    "C2": "metric oracle equivalence",
    "C3": "weighted-loss identities",
    "C4": "SDE correctness",
    "C5": "taming properties",
    "C6": "advantage properties",
    "C7": "reward model efficacy",
    "C8": "RL efficacy",
    "C9": "log-tame ablation",
    "C10": "resolution decoupling",
    "C11": "reproducibility",
}


def _find(run_dir: Path, name: str):
    hits = sorted(run_dir.rglob(name))
    return json.loads(hits[0].read_text()) if hits else None


def build_digest(run_dir: Path) -> list[str]:
    lines = [f"run directory: {run_dir.name}"]
    counts = _find(run_dir, "counts.json")
    ev = _find(run_dir, "eval_summary.json")
    grpo = _find(run_dir, "grpo_summary.json")
    lt = _find(run_dir, "ablation_logtame.json")
    res = _find(run_dir, "ablation_resolution.json")
    acc = _find(run_dir, "acceptance.json") or {}
    notes = {}
    if counts:
        notes["C1"] = (f"grids {counts['grids']}, instances {counts['instances']} "
                       f"(formula {counts['expected_instances']}), pairs {counts['pairs']}")
    if ev:
        by = {r["method"]: r for r in ev["rows"]}
        t = by.get("paco-reward", {})
        notes["C7"] = (f"paco-reward tau {t.get('tau', float('nan')):.4f} rho {t.get('rho', float('nan')):.4f} "
                       f"t1b1 {t.get('t1b1', float('nan')):.4f}; raw-cosine tau {by['raw-cosine']['tau']:.4f}; "
                       f"random tau {by['random']['tau']:.4f}; preference accuracy "
                       f"{ev['preference_accuracy']:.4f}, pointwise decision accuracy {ev['decision_accuracy']:.4f}")
    if grpo:
        b, a = grpo["eval_before"], grpo["eval_after"]
        parts = [f"{k} {b[k]:.4f} -> {a[k]:.4f}" for k in sorted(b)]
        notes["C8"] = "; ".join(parts)
    if lt:
        notes["C9"] = f"tamed < naive in {lt['tamed_lower_count']} of {len(lt['pairs'])} seed pairs"
    if res:
        parts = [f"d_train={d}: {arm['status']}, {arm['relative_to_full']:.3f} of full, cost x{arm['cost_ratio']:.2f}"
                 for d, arm in res["arms"].items()]
        notes["C10"] = "; ".join(parts)
    for cid, title in CRITERIA.items():
        verdict = acc.get(cid, {}).get("status", "-")
        detail = notes.get(cid) or acc.get(cid, {}).get("detail") or "no artifact in run directory"
        lines.append(f"{cid:<4} {title:<28} [{verdict}] {detail}")
    return lines


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise pd.DataError(f"run directory {run_dir} does not exist")
    if not any(run_dir.iterdir()):
        raise pd.DataError(f"run directory {run_dir} is empty")
    lines = build_digest(run_dir)
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = prepare_out(args.out, True)
        (out / "report.txt").write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults used when omitted)")
    common.add_argument("--seed", type=_u64, help="override the config's global seed")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")

    p = _Parser(prog="pacolab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", parents=[common], help="build grids, ranking instances and pairs")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth_data)

    s = sub.add_parser("train-reward", parents=[common], help="train the pair scorer")
    s.add_argument("pairs", help="pairs.jsonl (grids.jsonl must sit next to it)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_reward)

    s = sub.add_parser("eval-reward", parents=[common], help="ranking metrics on the benchmark split")
    s.add_argument("scorer", help="scorer checkpoint")
    s.add_argument("benchmark", help="instances.jsonl (grids.jsonl must sit next to it)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval_reward)

    s = sub.add_parser("train-policy", parents=[common], help="flow-matching pretraining of the base policy")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_policy)

    s = sub.add_parser("grpo-train", parents=[common], help="GRPO fine-tuning of a pretrained policy")
    s.add_argument("policy", help="policy checkpoint")
    s.add_argument("--scorer", help="scorer checkpoint for the consistency channel (analytic oracle if omitted)")
    s.add_argument("--channels", default="consistency,alignment")
    s.add_argument("--out", required=True)
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(fn=cmd_grpo_train)

    s = sub.add_parser("ablate", parents=[common], help="paired ablation runs")
    s.add_argument("policy", help="policy checkpoint")
    s.add_argument("--mode", required=True, help="resolution | logtame")
    s.add_argument("--scorer")
    s.add_argument("--eval-every", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("report", help="digest of every acceptance-relevant number in a run directory")
    s.add_argument("run_dir")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (pr.ScorerDivergedError, fg.NonFiniteLossError, NonFiniteGradientError, pg.NonFiniteRatioError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (pd.DataError, CheckpointError, FileNotFoundError, tw.PreconditionError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
