"""``samkit`` command line: select, merge, run, evaluate, ensemble, cost, toylab.

Exit codes: 0 ok, 2 configuration error, 3 I/O or format error, 4 endpoint
error, 5 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .cost import CostQuery, cost_report, format_cost
from .errors import ConfigError, SamError
from .ner_eval import (
    ensemble_intersection,
    ensemble_union,
    ensemble_vote,
    micro_f1,
    read_corpus,
    read_predictions,
    write_predictions,
)
from .pipeline import PipelineConfig, cmd_merge, cmd_run, cmd_select

logger = logging.getLogger("samkit")


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    sup = argparse.SUPPRESS
    common.add_argument("--config", default=sup, help="pipeline config JSON; flags override it")
    common.add_argument("--seed", type=int, default=sup, help="root seed")
    common.add_argument("--output-dir", default=sup)
    common.add_argument("--registry", default=sup, help="expert registry JSON")
    common.add_argument("--endpoint", default=sup, help="inference service base URL")
    common.add_argument("--mock", action="store_true", default=sup, help="use the deterministic mock backend")
    common.add_argument("-v", "--verbose", action="store_true", default=sup)
    return common


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    sup = argparse.SUPPRESS
    p.add_argument("--corpus", default=sup, help="target corpus JSON-lines")
    p.add_argument("--target-embeddings", default=sup)
    p.add_argument("--base-model", default=sup)
    p.add_argument("--gold", default=sup)
    p.add_argument("--m", type=int, default=sup, help="experts per merged model")
    p.add_argument("--k", type=int, default=sup, help="sampled target instances")
    p.add_argument("--method", default=sup)
    p.add_argument("--density", type=float, default=sup)
    p.add_argument("--drop-rate", type=float, default=sup)
    p.add_argument("--scale", type=float, default=sup)
    p.add_argument("--weighting", default=sup, choices=["uniform", "mode1", "mode2"])
    p.add_argument("--ensemble", default=sup, choices=["union", "intersection", "ds_only", "se_only", "eco1", "eco2", "eco3"])
    p.add_argument("--clusters", type=int, default=sup)
    p.add_argument("--format", default=sup, choices=["json", "enumeration"])
    p.add_argument("--mode", default=sup, choices=["generate_api", "chat_compat"], help="endpoint dialect")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="samkit", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("select", "rank experts by domain similarity and sampling evaluation"),
        ("merge", "merge the selected experts' deltas"),
        ("run", "select, merge, infer, ensemble and evaluate"),
    ):
        _pipeline_flags(sub.add_parser(name, parents=[common], help=help_text))

    ev = sub.add_parser("evaluate", parents=[common], help="entity-level micro-F1 of a predictions file")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gold", required=True)
    ev.add_argument("--out", help="write the EvalReport JSON here instead of stdout")

    en = sub.add_parser("ensemble", parents=[common], help="combine prediction files")
    en.add_argument("inputs", nargs="+")
    en.add_argument("--how", choices=["union", "intersection", "vote"], default="union")
    en.add_argument("--threshold", type=int, help="votes needed with --how vote (default: strict majority)")
    en.add_argument("--out", required=True)

    co = sub.add_parser("cost", parents=[common], help="storage cost of n LoRA experts")
    co.add_argument("--H", type=int, required=True, help="model dimension")
    co.add_argument("--r", type=int, required=True, help="LoRA rank")
    co.add_argument("--L", type=int, required=True, help="layer count")
    co.add_argument("--V", type=int, default=128_000, help="vocabulary size")
    co.add_argument("--n", type=int, default=1, help="number of experts")
    co.add_argument("--json", action="store_true")

    tl = sub.add_parser("toylab", parents=[common], help="run the synthetic domain study")
    tl.add_argument("--specs", help="JSON with 'sources', 'targets' and optional 'config'")
    tl.add_argument("--seeds", type=int, nargs="+")
    tl.add_argument("--family-seed", type=int, default=0, help="seed of the default domain family")
    return parser


_FLAG_MAP = {
    "registry": ("registry_path",),
    "corpus": ("target_corpus_path",),
    "target_embeddings": ("target_embeddings_path",),
    "base_model": ("base_model_path",),
    "gold": ("gold_path",),
    "output_dir": ("output_dir",),
    "seed": ("seed",),
    "weighting": ("weighting",),
    "ensemble": ("ensemble",),
    "clusters": ("clustering",),
    "format": ("output_format",),
    "mock": ("mock",),
    "m": ("selection", "m"),
    "k": ("selection", "k"),
    "method": ("merge", "method"),
    "density": ("merge", "density"),
    "drop_rate": ("merge", "drop_rate"),
    "scale": ("merge", "scale"),
    "endpoint": ("endpoint", "base_url"),
    "mode": ("endpoint", "mode"),
}


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    config = PipelineConfig.from_file(args.config) if getattr(args, "config", None) else PipelineConfig()
    for flag, target in _FLAG_MAP.items():
        if not hasattr(args, flag):
            continue
        value = getattr(args, flag)
        if len(target) == 1:
            setattr(config, target[0], value)
        elif target[0] == "endpoint":
            config.endpoint = {**config.endpoint, target[1]: value}
        else:
            setattr(getattr(config, target[0]), target[1], value)
    return config


def _print_selection(results) -> None:
    for g, (ds, se) in enumerate(results):
        prefix = f"[cluster {g}] " if len(results) > 1 else ""
        print(f"{prefix}domain similarity : " + ", ".join(f"{e} ({s:.4f})" for e, s in ds.ranked))
        print(f"{prefix}sampling eval     : " + ", ".join(f"{e} ({s:.4f})" for e, s in se.ranked))


def _run_toylab(args) -> None:
    from .toylab import StudyConfig, SyntheticDomainSpec, format_table, make_domain_family, run_domain_study

    config = StudyConfig()
    if args.specs:
        try:
            doc = json.loads(Path(args.specs).read_text(encoding="utf-8"))
            sources = [SyntheticDomainSpec.from_dict(d) for d in doc["sources"]]
            targets = [SyntheticDomainSpec.from_dict(d) for d in doc["targets"]]
            if "config" in doc:
                config = StudyConfig.from_dict(doc["config"])
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"bad toylab specs {args.specs}: {exc}") from exc
    else:
        sources, targets = make_domain_family(seed=args.family_seed)
    if args.seeds:
        config.seeds = args.seeds
    report = run_domain_study(sources, targets, config)
    out = Path(getattr(args, "output_dir", "toylab_out"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "study_report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=str) + "\n")
    text = (
        "In-domain micro-F1 (mean over seeds)\n"
        + format_table(report["summary"]["mean"]["in_domain"])
        + "\n\nOut-of-domain micro-F1 (mean over seeds)\n"
        + format_table(report["summary"]["mean"]["out_of_domain"])
        + "\n"
    )
    (out / "study_tables.txt").write_text(text)
    print(text)


def _dispatch(args) -> None:
    cmd = args.command
    if cmd == "select":
        _print_selection(cmd_select(config_from_args(args)))
    elif cmd == "merge":
        for g, paths in enumerate(cmd_merge(config_from_args(args))):
            for name, path in paths.items():
                print(f"{name}: {path}")
    elif cmd == "run":
        result = cmd_run(config_from_args(args))
        _print_selection(result["selections"])
        if result["report"] is not None:
            print(result["report"].summary_table())
    elif cmd == "evaluate":
        preds = read_predictions(args.pred)
        golds = [inst.gold for inst in read_corpus(args.gold)]
        if any(g is None for g in golds):
            raise ConfigError(f"{args.gold} has instances without 'mentions'")
        report = micro_f1(preds, golds)
        doc = json.dumps(report.to_dict(), indent=2, sort_keys=True)
        if args.out:
            Path(args.out).write_text(doc + "\n")
            print(report.summary_table())
        else:
            print(doc)
    elif cmd == "ensemble":
        files = [read_predictions(p) for p in args.inputs]
        if len({len(f) for f in files}) != 1:
            raise ConfigError("prediction files have different lengths")
        combined = []
        for sets in zip(*files):
            if args.how == "vote":
                threshold = args.threshold or len(sets) // 2 + 1
                combined.append(ensemble_vote(list(sets), threshold))
            else:
                op = ensemble_union if args.how == "union" else ensemble_intersection
                acc = sets[0]
                for s in sets[1:]:
                    acc = op(acc, s)
                combined.append(acc)
        write_predictions(combined, args.out)
    elif cmd == "cost":
        report = cost_report(CostQuery(args.H, args.r, args.L, args.V, args.n))
        print(json.dumps(report, indent=2) if args.json else format_cost(report))
    elif cmd == "toylab":
        _run_toylab(args)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _dispatch(args)
    except SamError as exc:
        print(f"samkit: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # invariant violations and bugs
        logger.exception("internal error")
        print(f"samkit: internal error: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
