"""Command-line entry point.

Subcommands: prepare, stats, naive, emit-prompts, train, eval, analyze,
sweep. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure. Configuration layering (profile < config file <
MESH_* environment < flags) lives in `config`; every command writes the
fully resolved configuration to `<out>/config.echo`.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import config as cfg
from . import evaluation as ev
from . import history, tkg, training
from .autodiff import NumericError
from .encoders import (
    PromptTemplate,
    emit_prompts,
    load_semantic_embeddings,
    synthetic_embeddings,
)
from .model import AblationConfig
from .tkg import DatasetError


class CliError(Exception):
    """Configuration-level failure (exit code 2)."""


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--profile", choices=sorted(cfg.PROFILES))
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    for name, kind in (
        ("dim", int), ("llm-dim", int), ("adapter-hidden", int), ("channels", int),
        ("kernel-width", int), ("layers", int), ("window", int),
        ("num-historical", int), ("num-nonhistorical", int),
        ("omega", float), ("learning-rate", float), ("dropout", float),
        ("epochs-stage0", int), ("epochs-stage1", int),
        ("max-timestamps", int), ("drop-history", float),
        ("synthetic-seed", int),
    ):
        parser.add_argument(f"--{name}", type=kind, dest=name.replace("-", "_"))
    parser.add_argument("--loss-mode", choices=cfg.LOSS_MODES, dest="loss_mode")
    parser.add_argument("--dtype", choices=("float32", "float64"))
    parser.add_argument("--embeddings", help="semantic embedding file (default: synthetic)")
    parser.add_argument("--gate-input", choices=("structural", "semantic", "concatenated"),
                        dest="gate_input")
    for flag in ("disable-semantic", "disable-structural", "disable-event-aware",
                 "disable-prediction-expert"):
        parser.add_argument(f"--{flag}", action="store_const", const=True,
                            dest=flag.replace("-", "_"))


def _resolve(args, dataset=None) -> cfg.RunConfig:
    flag_values = {
        name: getattr(args, name)
        for name in cfg.RunConfig.__dataclass_fields__
        if hasattr(args, name) and getattr(args, name) is not None
    }
    if dataset is not None:
        flag_values["dataset"] = dataset
    try:
        return cfg.resolve(flag_values, config_file=getattr(args, "config", None))
    except (ValueError, OSError) as exc:
        raise CliError(str(exc))


def _write_echo(config: cfg.RunConfig) -> None:
    os.makedirs(config.out, exist_ok=True)
    with open(os.path.join(config.out, "config.echo"), "w", encoding="utf-8") as fh:
        fh.write(config.echo())


def _load_data(config: cfg.RunConfig):
    vocab, train, valid, test = tkg.load_dataset(config.dataset)
    if config.max_timestamps:
        vocab, train, valid, test = tkg.truncate_and_resplit(
            vocab, train, valid, test, config.max_timestamps
        )
    if config.drop_history > 0.0:
        train = tkg.drop_history_fraction(train, config.drop_history, config.seed)
    return vocab, train, valid, test


def _semantic_table(config: cfg.RunConfig, vocab):
    if config.embeddings:
        return load_semantic_embeddings(config.embeddings, vocab)
    return synthetic_embeddings(vocab, config.llm_dim, config.synthetic_seed)


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# subcommands

def cmd_prepare(args) -> int:
    config = _resolve(args, dataset=args.dataset)
    _write_echo(config)
    vocab, train, valid, test = _load_data(config)
    out_dir = os.path.join(config.out, "dataset")
    tkg.write_dataset(out_dir, vocab, train, valid, test)
    print(f"normalized dataset written to {out_dir} "
          f"({train.num_facts}/{valid.num_facts}/{test.num_facts} facts, "
          f"{vocab.num_timestamps} timestamps)")
    return 0


def cmd_stats(args) -> int:
    config = _resolve(args, dataset=args.dataset)
    _write_echo(config)
    vocab, train, valid, test = _load_data(config)
    report = history.dataset_stats(vocab, train, valid, test)
    print(report.to_text(), end="")
    _write(os.path.join(config.out, "stats.txt"), report.to_text())
    _write(os.path.join(config.out, "stats.tsv"), report.to_kv())
    return 0


def cmd_naive(args) -> int:
    config = _resolve(args, dataset=args.dataset)
    _write_echo(config)
    vocab, train, valid, test = _load_data(config)
    result = ev.evaluate_naive(vocab, train, valid, test, split=args.split)
    text = ev.format_reports(result.named_reports())
    print(text, end="")
    _write(os.path.join(config.out, "naive_metrics.txt"), text)
    _write(os.path.join(config.out, "naive_metrics.tsv"), ev.reports_to_kv(result.named_reports()))
    return 0


def cmd_emit_prompts(args) -> int:
    config = _resolve(args, dataset=args.dataset)
    _write_echo(config)
    vocab, _, _, _ = _load_data(config)
    template = PromptTemplate(domain=args.domain, datatype=args.datatype)
    path = os.path.join(config.out, "prompts.tsv")
    try:
        count = emit_prompts(vocab, template, path)
    except ValueError as exc:
        raise CliError(str(exc))
    print(f"{count} prompts written to {path}")
    return 0


def cmd_train(args) -> int:
    config = _resolve(args, dataset=args.dataset)
    _write_echo(config)
    vocab, train, valid, test = _load_data(config)
    sem = _semantic_table(config, vocab)
    result = training.train_model(
        config, vocab, train, valid, sem,
        verbose=(print if args.verbose else None),
    )
    log_path = os.path.join(config.out, "training.log")
    _write(log_path, "".join(line + "\n" for line in result.log_lines))
    ckpt_path = os.path.join(config.out, "checkpoint.mesh")
    training.save_checkpoint(ckpt_path, result.model, config, result.frozen_names, config.seed)
    best = "n/a" if result.best_valid_mrr is None else f"{result.best_valid_mrr:.6f}"
    print(f"checkpoint written to {ckpt_path} (best valid MRR {best})")
    return 0


def _eval_setup(args):
    model, header = training.load_checkpoint(args.checkpoint)
    stored = dict(header["config"])
    stored.update({"dataset": args.dataset or stored.get("dataset", "")})
    for key in ("out", "embeddings"):
        value = getattr(args, key, None)
        if value is not None:
            stored[key] = value
    config = cfg.RunConfig(**stored)
    config.validate()
    if not config.dataset:
        raise CliError("no dataset given and none recorded in the checkpoint")
    vocab, train, valid, test = _load_data(config)
    if vocab.num_entities != model.num_entities or vocab.num_relations != model.num_relations:
        raise CliError(
            f"checkpoint was trained for |E|={model.num_entities}, |R|={model.num_relations}; "
            f"dataset has |E|={vocab.num_entities}, |R|={vocab.num_relations}"
        )
    sem = _semantic_table(config, vocab)
    return model, config, vocab, train, valid, test, sem


def _ablation_flags(args, config) -> AblationConfig:
    return AblationConfig(
        disable_semantic=bool(getattr(args, "disable_semantic", None) or config.disable_semantic),
        disable_structural=bool(getattr(args, "disable_structural", None) or config.disable_structural),
        disable_event_aware=bool(getattr(args, "disable_event_aware", None) or config.disable_event_aware),
        disable_prediction_expert=bool(
            getattr(args, "disable_prediction_expert", None) or config.disable_prediction_expert
        ),
        gate_input=config.gate_input,
    )


def cmd_eval(args) -> int:
    model, config, vocab, train, valid, test, sem = _eval_setup(args)
    _write_echo(config)
    ablation = _ablation_flags(args, config)
    result = ev.evaluate(model, vocab, train, valid, test, sem,
                         ablation=ablation, split=args.split)
    text = ev.format_reports(result.named_reports())
    print(text, end="")
    _write(os.path.join(config.out, "metrics.txt"), text)
    _write(os.path.join(config.out, "metrics.tsv"), ev.reports_to_kv(result.named_reports()))
    _write(os.path.join(config.out, "gate_stats.txt"), result.gate_stats.to_text())
    return 0


def cmd_analyze(args) -> int:
    model, config, vocab, train, valid, test, sem = _eval_setup(args)
    _write_echo(config)
    result = ev.evaluate(model, vocab, train, valid, test, sem,
                         ablation=_ablation_flags(args, config), split=args.split)
    print(result.gate_stats.to_text(), end="")
    _write(os.path.join(config.out, "gate_stats.txt"), result.gate_stats.to_text())
    return 0


def _parse_mn(text: str) -> tuple[int, int]:
    try:
        m, n = text.lower().split("x")
        return int(m), int(n)
    except ValueError:
        raise CliError(f"expected MxN (like 2x1), got {text!r}")


def cmd_sweep(args) -> int:
    config = _resolve(args, dataset=args.dataset)
    if bool(args.omega_list) == bool(args.mn_grid):
        raise CliError("sweep needs exactly one of --omega-list or --mn-grid")
    if args.omega_list:
        try:
            settings = [("omega", float(v)) for v in args.omega_list.split(",") if v]
        except ValueError:
            raise CliError(f"bad --omega-list value: {args.omega_list!r}")
    else:
        settings = [("mn", _parse_mn(v)) for v in args.mn_grid.split(",") if v]
    _write_echo(config)
    rows = ["setting\tMRR\tH@3\tH@10"]
    for kind, value in settings:
        run_cfg = cfg.RunConfig(**config.to_dict())
        if kind == "omega":
            run_cfg.omega = value
            tag = f"omega_{value:g}"
        else:
            run_cfg.num_historical, run_cfg.num_nonhistorical = value
            tag = f"m{value[0]}n{value[1]}"
        run_cfg.out = os.path.join(config.out, tag)
        run_cfg.validate()
        _write_echo(run_cfg)
        vocab, train, valid, test = _load_data(run_cfg)
        sem = _semantic_table(run_cfg, vocab)
        result = training.train_model(run_cfg, vocab, train, valid, sem)
        training.save_checkpoint(
            os.path.join(run_cfg.out, "checkpoint.mesh"),
            result.model, run_cfg, result.frozen_names, run_cfg.seed,
        )
        _write(os.path.join(run_cfg.out, "training.log"),
               "".join(line + "\n" for line in result.log_lines))
        eval_result = ev.evaluate(result.model, vocab, train, valid, test, sem,
                                  ablation=training._ablation_from(run_cfg))
        report = eval_result.overall
        rows.append(f"{tag}\t{100 * report.mrr:.2f}\t{100 * report.hits3:.2f}\t{100 * report.hits10:.2f}")
        print(rows[-1])
    _write(os.path.join(config.out, "sweep.tsv"), "\n".join(rows) + "\n")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshtkg",
        description="Temporal knowledge graph reasoning: dual-view encoding, "
                    "event-aware expert gating, time-aware evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True):
        if dataset:
            p.add_argument("dataset", help="dataset directory")
        _add_config_flags(p)

    common(sub.add_parser("prepare", help="validate and normalize a dataset directory"))
    common(sub.add_parser("stats", help="dataset statistics incl. historical share"))
    p = sub.add_parser("naive", help="frequency-ranking baseline")
    common(p)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p = sub.add_parser("emit-prompts", help="write entity/relation prompts")
    common(p)
    p.add_argument("--domain", required=True)
    p.add_argument("--datatype", required=True)
    p = sub.add_parser("train", help="two-stage training run")
    common(p)
    p.add_argument("--verbose", action="store_true")
    for name in ("eval", "analyze"):
        p = sub.add_parser(name, help=f"{name} a trained checkpoint")
        p.add_argument("checkpoint")
        p.add_argument("dataset", nargs="?")
        p.add_argument("--out")
        p.add_argument("--embeddings")
        p.add_argument("--split", choices=("valid", "test"), default="test")
        for flag in ("disable-semantic", "disable-structural", "disable-event-aware",
                     "disable-prediction-expert"):
            p.add_argument(f"--{flag}", action="store_const", const=True,
                           dest=flag.replace("-", "_"))
    p = sub.add_parser("sweep", help="omega or (M,N) hyperparameter sweep")
    common(p)
    p.add_argument("--omega-list", help="comma-separated omega values")
    p.add_argument("--mn-grid", help="comma-separated MxN settings (like 1x1,2x1)")
    return parser


COMMANDS = {
    "prepare": cmd_prepare,
    "stats": cmd_stats,
    "naive": cmd_naive,
    "emit-prompts": cmd_emit_prompts,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
