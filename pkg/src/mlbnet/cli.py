"""Command-line interface.

Subcommands: gradcheck, equiv, sketch-stats, params, train, eval.
Common flags: --config PATH (JSON), --seed U64, --out DIR, and
--set key=value (repeatable) applied after the config file; unknown
keys are errors. Every run with a fixed seed writes byte-identical
artifacts. Exit codes: 0 success, 1 configuration or format problem,
2 verification failure, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from . import data, figures, pooling, training, verify
from .errors import (
    ConfigurationError,
    DataError,
    DivergenceError,
    FormatError,
)
from .rng import _check_seed


@dataclass
class Key:
    type: object
    default: object
    help: str


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigurationError(f"expected a boolean, got {text!r}")


def _parse_int_list(value) -> list:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v]
    return [int(v) for v in value]


SCHEMAS = {
    "gradcheck": {
        "threshold": Key(float, verify.GRADCHECK_DEFAULT_THRESHOLD,
                         "fail when any relative error reaches this"),
        "corrupt": Key(bool, False,
                       "insert a wrong-derivative negative control (forces exit 2)"),
    },
    "equiv": {
        "n": Key(int, 5, "first input dimension"),
        "m": Key(int, 4, "second input dimension"),
        "d": Key(int, 3, "joint embedding width"),
        "c": Key(int, 3, "pooled output dimension"),
        "instances": Key(int, 100, "random instances per identity"),
        "conv_max_d": Key(int, 256, "convolution lengths checked, 1..conv_max_d"),
        "rank_restrict": Key(bool, False, "enforce d <= min(n, m) at construction"),
    },
    "sketch-stats": {
        "n_x": Key(int, 8, "first input length for bucket counting"),
        "n_y": Key(int, 8, "second input length for bucket counting"),
        "d": Key(int, 4, "sketch buckets for bucket counting"),
        "trials": Key(int, 20000, "bucket-count trials (>= 1000)"),
        "ip_n": Key(int, 16, "vector length for the inner-product check"),
        "ip_d": Key(int, 8, "sketch buckets for the inner-product check"),
        "ip_trials": Key(int, 10000, "inner-product trials (>= 1000)"),
        "mean_rtol": Key(float, 0.01, "relative tolerance on the bucket mean"),
        "var_rtol": Key(float, 0.10, "relative tolerance on the bucket variance"),
        "z_max": Key(float, 4.0, "|z| limit for inner-product unbiasedness"),
    },
    "params": {
        "n": Key(int, 2400, "first input dimension"),
        "m": Key(int, 2048, "second input dimension"),
        "d": Key(int, 1200, "joint embedding width of the factored pooling"),
        "outputs": Key(int, 2000, "output count for the factored/exact kinds"),
        "compact_d": Key(int, 16000, "sketch dimension of the sketched pooling"),
        "compact_outputs": Key(int, 3000, "output count of the sketched projection"),
        "d_sweep": Key(list, [800, 1000, 1200, 1400, 1600],
                       "joint embedding widths for the sweep (comma-separated)"),
    },
    "train": {
        "variant": Key(str, "mlb", "mlb | marn | mcb-att | baseline-linear"),
        "iterations": Key(int, 5000, "training iterations"),
        "batch_size": Key(int, 64, "minibatch size"),
        "learning_rate": Key(float, 3e-4, "initial learning rate"),
        "lr_decay": Key(float, 0.99997592083, "learning-rate decay per iteration"),
        "dropout": Key(float, 0.5, "dropout rate on the question-side projections"),
        "clip_threshold": Key(float, 10.0, "elementwise gradient clamp"),
        "rms_decay": Key(float, 0.99, "running mean-square decay"),
        "rms_epsilon": Key(float, 1e-8, "running mean-square damping"),
        "eval_interval": Key(int, 500, "iterations between metric rows"),
        "glimpses": Key(int, 1, "attention glimpses"),
        "embed_dim": Key(int, 32, "joint embedding width"),
        "lattice": Key(int, 4, "lattice side; the grid has lattice^2 cells"),
        "q_dim": Key(int, 32, "question vector length"),
        "v_dim": Key(int, 16, "feature channels per cell"),
        "n_answers": Key(int, 2, "answer vocabulary size"),
        "sketch_dim": Key(int, 64, "sketch buckets for the mcb-att variant"),
        "train_count": Key(int, 4096, "training samples"),
        "eval_count": Key(int, 2048, "held-out samples"),
        "distractor_channels": Key(int, 6, "noise channels per cell"),
        "noise_scale": Key(float, 0.3, "distractor noise amplitude"),
        "divided_rate": Key(float, 0.0, "fraction of samples with a strong runner-up answer"),
        "annotators": Key(int, 10, "annotators per answer multiset"),
        "answer_sampling": Key(bool, False, "train on sampled answers instead of the mode"),
        "augment": Key(bool, False, "append a single-annotator augmentation pool"),
        "augment_count": Key(int, 1024, "samples in the augmentation pool"),
    },
    "eval": {
        "checkpoint": Key(str, None, "checkpoint directory written by train (required)"),
        "metric": Key(str, "both", "exact | vqa | both"),
    },
}


def load_config(subcommand: str, path: str | None, overrides: list) -> dict:
    schema = SCHEMAS[subcommand]
    cfg = {name: key.default for name, key in schema.items()}
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigurationError("config file must hold a JSON object")
        for name, value in loaded.items():
            if name not in schema:
                raise ConfigurationError(f"unknown config key {name!r} for {subcommand}")
            cfg[name] = _coerce(schema[name], name, value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"--set needs key=value, got {item!r}")
        name, _, raw = item.partition("=")
        name = name.strip()
        if name not in schema:
            raise ConfigurationError(f"unknown config key {name!r} for {subcommand}")
        cfg[name] = _coerce(schema[name], name, raw)
    return cfg


def _coerce(key: Key, name: str, value):
    try:
        if key.type is bool:
            return value if isinstance(value, bool) else _parse_bool(str(value))
        if key.type is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if key.type is float:
            return float(value)
        if key.type is list:
            return _parse_int_list(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"config key {name!r} got invalid value {value!r}")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gradcheck(cfg: dict, seed: int, out: Path) -> int:
    entries = verify.gradcheck_suite(seed, corrupt=cfg["corrupt"])
    failed = [e for e in entries if e["max_rel_error"] >= cfg["threshold"]]
    report = {"subcommand": "gradcheck", "seed": seed, "threshold": cfg["threshold"],
              "entries": entries, "status": "fail" if failed else "pass"}
    _write_json(out / "gradcheck.json", report)
    for e in entries:
        e["limit"] = cfg["threshold"]
    figures.save_report_bars(entries, "max_rel_error", out / "gradcheck.png",
                             "finite-difference gradient checks")
    for e in entries:
        print(f"{e['name']}: {e['max_rel_error']:.3e}")
    print(f"gradcheck: {report['status']} ({len(entries)} checks, threshold {cfg['threshold']:g})")
    return 2 if failed else 0


def cmd_equiv(cfg: dict, seed: int, out: Path) -> int:
    econfig = verify.EquivConfig(n=cfg["n"], m=cfg["m"], d=cfg["d"], c=cfg["c"],
                                 instances=cfg["instances"], conv_max_d=cfg["conv_max_d"],
                                 rank_restrict=cfg["rank_restrict"])
    entries = verify.equivalence_suite(seed, econfig)
    failed = [e for e in entries if e["max_abs_deviation"] > e["tolerance"]]
    report = {"subcommand": "equiv", "seed": seed, "entries": entries,
              "status": "fail" if failed else "pass"}
    _write_json(out / "equiv.json", report)
    figures.save_report_bars(entries, "max_abs_deviation", out / "equiv.png",
                             "algebraic equivalence oracles")
    for e in entries:
        print(f"{e['name']}: {e['max_abs_deviation']:.3e} (tolerance {e['tolerance']:g})")
    print(f"equiv: {report['status']} ({len(entries)} oracles)")
    return 2 if failed else 0


def cmd_sketch_stats(cfg: dict, seed: int, out: Path) -> int:
    sconfig = verify.SketchStatsConfig(**{k: cfg[k] for k in SCHEMAS["sketch-stats"]})
    stats = verify.sketch_stats(seed, sconfig)
    lines = ["statistic,observed,expected,error,limit,status"]
    for row in stats["rows"]:
        lines.append(f"{row['statistic']},{row['observed']!r},{row['expected']!r},"
                     f"{row['error']!r},{row['limit']!r},{row['status']}")
    (out / "sketch_stats.csv").write_text("\n".join(lines) + "\n")
    figures.save_sketch_stats_figure(stats, out / "sketch_stats.png")
    failed = [r for r in stats["rows"] if r["status"] != "pass"]
    for row in stats["rows"]:
        print(f"{row['statistic']}: observed {row['observed']:.6g}, expected "
              f"{row['expected']:.6g} [{row['status']}]")
    print(f"sketch-stats: {'fail' if failed else 'pass'}")
    return 2 if failed else 0


def cmd_params(cfg: dict, seed: int, out: Path) -> int:
    rows = []
    full_count, full_report = pooling.count_params(
        "full_bilinear", {"n": cfg["n"], "m": cfg["m"], "outputs": cfg["outputs"]})
    rows.append(("full_bilinear", cfg["n"], cfg["m"], "", cfg["outputs"],
                 full_count, full_report))
    low_count, low_report = pooling.count_params(
        "low_rank", {"n": cfg["n"], "m": cfg["m"], "d": cfg["d"], "outputs": cfg["outputs"]})
    rows.append(("low_rank", cfg["n"], cfg["m"], cfg["d"], cfg["outputs"],
                 low_count, low_report))
    compact_count, compact_report = pooling.count_params(
        "compact", {"d": cfg["compact_d"], "outputs": cfg["compact_outputs"]})
    rows.append(("compact", "", "", cfg["compact_d"], cfg["compact_outputs"],
                 compact_count, compact_report))

    lines = ["kind,n,m,d,outputs,count,per_output,per_output_share"]
    for kind, n, m, d, outputs, count, report in rows:
        lines.append(f"{kind},{n},{m},{d},{outputs},{count},"
                     f"{report['per_output']},{report['per_output_share']!r}")
    (out / "params.csv").write_text("\n".join(lines) + "\n")

    sweep = []
    for d in cfg["d_sweep"]:
        lr, _ = pooling.count_params(
            "low_rank", {"n": cfg["n"], "m": cfg["m"], "d": d, "outputs": cfg["outputs"]})
        cp, _ = pooling.count_params("compact", {"d": d, "outputs": cfg["outputs"]})
        sweep.append({"d": d, "low_rank": lr, "compact": cp})
    sweep_lines = ["d,low_rank,compact"] + [f"{r['d']},{r['low_rank']},{r['compact']}" for r in sweep]
    (out / "params_sweep.csv").write_text("\n".join(sweep_lines) + "\n")
    figures.save_params_sweep(sweep, out / "params.png")

    header = f"{'kind':<14}{'count':>16}{'per-output':>14}{'share':>12}"
    print(header)
    for kind, _, _, _, _, count, report in rows:
        print(f"{kind:<14}{count:>16,}{report['per_output']:>14,}"
              f"{report['per_output_share']:>12.4f}")
    return 0


def _task_config(cfg: dict, count: int) -> data.ToyTaskConfig:
    return data.ToyTaskConfig(
        s=cfg["lattice"], n=cfg["q_dim"], m=cfg["v_dim"], n_answers=cfg["n_answers"],
        count=count, distractor_channels=cfg["distractor_channels"],
        divided_rate=cfg["divided_rate"], annotators=cfg["annotators"],
        noise_scale=cfg["noise_scale"])


def _build_datasets(cfg: dict, seed: int):
    train_set = data.generate_toy_dataset(_task_config(cfg, cfg["train_count"]), seed, "train")
    eval_set = data.generate_toy_dataset(_task_config(cfg, cfg["eval_count"]), seed, "eval")
    if cfg["augment"]:
        extra = data.generate_toy_dataset(_task_config(cfg, cfg["augment_count"]), seed, "augment")
        train_set = data.augment(train_set, extra)
    return train_set, eval_set


def cmd_train(cfg: dict, seed: int, out: Path) -> int:
    hyper_keys = [k for k in training.HyperParams.__dataclass_fields__]
    hp = training.HyperParams(**{k: cfg[k] for k in hyper_keys})
    train_set, eval_set = _build_datasets(cfg, seed)
    model = training.Model(cfg["variant"], hp, seed)
    result = training.train(model, train_set, eval_set, seed,
                            answer_sampling=cfg["answer_sampling"])
    (out / "metrics.csv").write_text(result.metrics_csv())
    figures.save_training_curves(result.metrics, out / "training.png")
    training.save_checkpoint(out / "checkpoint", model, seed,
                             extra={"task": {k: cfg[k] for k in
                                             ("train_count", "eval_count", "distractor_channels",
                                              "noise_scale", "divided_rate", "annotators",
                                              "answer_sampling", "augment", "augment_count",
                                              "variant")}})
    final = result.metrics[-1]
    print(f"trained {cfg['variant']} for {hp.iterations} iterations; "
          f"final train_acc={final.train_acc!r} eval_acc={final.eval_acc!r}")
    return 0


def cmd_eval(cfg: dict, seed: int, out: Path) -> int:
    if not cfg["checkpoint"]:
        raise ConfigurationError("eval needs config key 'checkpoint' (see --set checkpoint=DIR)")
    if cfg["metric"] not in ("exact", "vqa", "both"):
        raise ConfigurationError(f"metric must be exact, vqa, or both; got {cfg['metric']!r}")
    model, manifest = training.load_checkpoint(cfg["checkpoint"])
    task = manifest.get("task")
    if task is None:
        raise FormatError("checkpoint manifest lacks the task section")
    hp = model.hp
    eval_cfg = {"lattice": hp.lattice, "q_dim": hp.q_dim, "v_dim": hp.v_dim,
                "n_answers": hp.n_answers, "distractor_channels": task["distractor_channels"],
                "divided_rate": task["divided_rate"], "annotators": task["annotators"],
                "noise_scale": task["noise_scale"]}
    eval_set = data.generate_toy_dataset(
        _task_config(eval_cfg, task["eval_count"]), manifest["seed"], "eval")
    payload = {"subcommand": "eval", "variant": model.variant,
               "eval_count": task["eval_count"]}
    if cfg["metric"] in ("exact", "both"):
        payload["exact_accuracy"] = training.evaluate(model, eval_set, "exact")
        print(f"exact_accuracy={payload['exact_accuracy']!r}")
    if cfg["metric"] in ("vqa", "both"):
        payload["vqa_accuracy"] = training.evaluate(model, eval_set, "vqa")
        print(f"vqa_accuracy={payload['vqa_accuracy']!r}")
    _write_json(out / "eval.json", payload)
    return 0


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "equiv": cmd_equiv,
    "sketch-stats": cmd_sketch_stats,
    "params": cmd_params,
    "train": cmd_train,
    "eval": cmd_eval,
}

DESCRIPTIONS = {
    "gradcheck": "finite-difference gradient checks over every operation",
    "equiv": "algebraic equivalence oracles for all constructions",
    "sketch-stats": "Monte-Carlo sketch moments vs closed forms",
    "params": "parameter counts, ratios, and an embedding-width sweep",
    "train": "train a variant on the synthetic multimodal task",
    "eval": "evaluate a saved checkpoint",
}


def _keys_epilog(subcommand: str) -> str:
    lines = ["config keys (settable in --config JSON or via --set key=value):"]
    for name, key in SCHEMAS[subcommand].items():
        type_name = key.type.__name__
        lines.append(f"  {name} ({type_name}, default {key.default!r}): {key.help}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlbnet",
        description="bilinear pooling constructions, sketched pooling, and "
                    "multimodal attention models with cross-verification reports")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=DESCRIPTIONS[name], epilog=_keys_epilog(name),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0, help="unsigned 64-bit run seed")
        p.add_argument("--out", default="mlbnet-out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        seed = _check_seed(args.seed)
        cfg = load_config(args.subcommand, args.config, args.set)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.subcommand](cfg, seed, out)
    except (ConfigurationError, FormatError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
