"""Command-line pipeline: gen-data, train, search, finetune, report, correlate, ablate-state.

Every command reads an optional ``key = value`` config file (``--config``),
applies flag overrides, rejects unknown keys, and writes its artifacts plus a
``config_echo`` of the fully resolved configuration into ``--out``. Feeding
that echo back through ``--config`` reproduces the run bit-exactly.

Exit codes: 0 ok, 2 configuration or input error, 3 infeasible budget,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import nn
from ._io import atomic_write_text
from .data import DataGenConfig, generate, load_dataset, save_dataset, split
from .env import FEATURES
from .errors import ConfigError, FormatError, InfeasibleBudget, NumericError, ShapeError
from .search import (
    SearchConfig, ablate_state, finetune, iterative_prune_finetune, proxy_correlation_study, read_log_csv,
    run_handcrafted, run_search, write_search_outputs,
)

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4
SPLIT_FILES = {"train": "train.amcd", "val": "val.amcd", "test": "test.amcd"}


# ---------------------------------------------------------------------------
# typed keys


def _bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse):
    def inner(text):
        return None if str(text).strip().lower() in ("none", "") else parse(text)
    return inner


def _list(parse):
    def inner(text):
        return tuple(parse(v.strip()) for v in str(text).split(",") if v.strip())
    return inner


def _render(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    help: str = ""
    required: bool = False

    @property
    def flag(self):
        return "--" + self.name.replace("_", "-")


OUT = Key("out", str, None, "output directory", required=True)
SEED = Key("seed", int, 0, "random seed")
DATA = Key("data", str, None, "directory holding train/val/test .amcd files", required=True)
MODEL = Key("model", str, None, "weight file (.amcw) of the network to compress", required=True)

SEARCH_KEYS = [
    Key("protocol", str, "resource_constrained", "resource_constrained | accuracy_guaranteed"),
    Key("reward", _optional(str), None, "r_err | r_flops | r_param (default follows the protocol)"),
    Key("cost", str, "flops", "params | flops | latency:<table path>"),
    Key("alpha", _optional(float), None, "fraction of the resource to remove (resource_constrained)"),
    Key("prune", str, "channel", "fine | channel"),
    Key("episodes_explore", int, 100, "episodes at constant exploration noise"),
    Key("episodes_exploit", int, 300, "episodes with decaying noise and learning"),
    Key("a_max", float, 0.8, "per-layer cap on the removed fraction"),
    Key("a_max_dense", _optional(float), None, "cap for dense layers (fine-grained default 0.98)"),
    Key("agent", str, "ddpg", "ddpg | random"),
    Key("reward_mode", str, "broadcast", "broadcast | terminal-only"),
    Key("updates_per_step", int, 1, "agent updates per environment step while exploiting"),
    Key("sigma_decay", float, 0.98, "per-episode decay of the exploration noise"),
    Key("state_features", _list(str), FEATURES, "comma list of state features kept (others zeroed)"),
    Key("reward_subset", _optional(int), None, "score rewards on a fixed random subset of val"),
    Key("select_by", str, "reward", "reward | val_acc"),
]
FINETUNE_KEYS = [
    Key("finetune_epochs", int, 10, "fine-tuning epochs"),
    Key("finetune_lr", float, 0.02, "fine-tuning learning rate"),
    Key("batch_size", int, 32, "SGD minibatch size"),
]

COMMANDS = {
    "gen-data": [
        OUT, SEED,
        Key("num_per_class", int, 250), Key("image_size", int, 16), Key("channels", int, 1),
        Key("num_classes", int, 10), Key("noise_sigma", float, 1.0), Key("angle_jitter", float, 0.08),
        Key("fractions", _list(float), (0.7, 0.2, 0.1), "train,val,test fractions"),
    ],
    "train": [
        DATA, OUT, SEED,
        Key("epochs", int, 30), Key("lr", float, 0.02), Key("batch_size", int, 32),
        Key("widths", _list(int), (8, 16, 16, 32), "output channels of the four convs"),
        Key("hidden", int, 64, "hidden units of the first dense layer"),
    ],
    "search": [MODEL, DATA, OUT, SEED] + SEARCH_KEYS + [
        Key("handcrafted", _bool, False, "also score uniform/shallow/deep policies (resource_constrained)"),
    ],
    "finetune": [
        MODEL, DATA, OUT, SEED,
        Key("epochs", int, 10), Key("lr", float, 0.02), Key("batch_size", int, 32),
    ],
    "report": [
        Key("run", str, None, "search output directory", required=True),
        Key("out", _optional(str), None, "report directory (default <run>/report)"),
        Key("random_run", _optional(str), None, "search output directory of a random-agent run"),
    ],
    "correlate": [MODEL, DATA, OUT, SEED] + SEARCH_KEYS + FINETUNE_KEYS + [
        Key("num_policies", int, 15, "random feasible policies to score"),
    ],
    "ablate-state": [MODEL, DATA, OUT, SEED] + SEARCH_KEYS + [
        Key("feature_sets", str, "full:" + ",".join(FEATURES) + ";no_index:" + ",".join(FEATURES[1:])
            + ";no_layer_embedding:" + ",".join(FEATURES[8:]),
            "name:f1,f2;name2:... state-feature subsets to compare"),
    ],
    "iterate": [MODEL, DATA, OUT, SEED] + SEARCH_KEYS + FINETUNE_KEYS + [
        Key("densities", _list(float), (0.5, 0.35, 0.25, 0.2), "strictly decreasing overall densities"),
    ],
}


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"config: cannot read {path}: {err.strerror}") from None
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def resolve(command, file_values, flag_values):
    """Merge defaults, config-file values and flags for ``command`` into typed values."""
    keys = {k.name: k for k in COMMANDS[command]}
    unknown = sorted(set(file_values) - set(keys))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    resolved = {}
    for name, key in keys.items():
        if flag_values.get(name) is not None:
            text = flag_values[name]
        elif name in file_values:
            text = file_values[name]
        else:
            resolved[name] = key.default
            continue
        try:
            resolved[name] = key.parse(text)
        except ValueError as err:
            raise ConfigError(f"{name}: {err}") from None
    for name, key in keys.items():
        if key.required and resolved[name] is None:
            raise ConfigError(f"missing required key '{name}' (flag {key.flag})")
    return resolved


def echo(command, cfg):
    lines = [f"# rlprune {command}: resolved configuration"]
    lines += [f"{k.name} = {_render(cfg[k.name])}" for k in COMMANDS[command]]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# helpers


def _require_file(cfg, key):
    path = cfg[key]
    if not os.path.isfile(path):
        raise ConfigError(f"{key}: no such file {path}")
    return path


def _load_split(cfg, tag, expected_shape=None):
    if not os.path.isdir(cfg["data"]):
        raise ConfigError(f"data: no such directory {cfg['data']}")
    path = os.path.join(cfg["data"], SPLIT_FILES[tag])
    if not os.path.isfile(path):
        raise ConfigError(f"data: missing {SPLIT_FILES[tag]} in {cfg['data']}")
    return load_dataset(path, tag, expected_shape)


def _load_model(cfg, input_shape):
    return nn.load_toy_convnet(_require_file(cfg, "model"), input_shape)


def search_config(cfg, **overrides):
    protocol = cfg["protocol"]
    reward = cfg["reward"] or ("r_err" if protocol == "resource_constrained" else "r_flops")
    alpha = cfg["alpha"]
    if alpha is None and protocol == "resource_constrained":
        alpha = 0.5
    cfg["reward"], cfg["alpha"] = reward, alpha  # echo the resolved values
    values = dict(
        protocol=protocol, reward=reward, cost=cfg["cost"], alpha=alpha, prune=cfg["prune"],
        episodes_explore=cfg["episodes_explore"], episodes_exploit=cfg["episodes_exploit"], seed=cfg["seed"],
        a_max=cfg["a_max"], a_max_dense=cfg["a_max_dense"], agent=cfg["agent"], reward_mode=cfg["reward_mode"],
        updates_per_step=cfg["updates_per_step"], sigma_decay=cfg["sigma_decay"],
        state_features=cfg["state_features"], reward_subset=cfg["reward_subset"], select_by=cfg["select_by"],
    )
    for key in ("finetune_epochs", "finetune_lr", "batch_size"):
        if key in cfg:
            values[key] = cfg[key]
    values.update(overrides)
    if values["reward_mode"] not in ("broadcast", "terminal-only"):
        raise ConfigError(f"reward_mode: unknown mode {values['reward_mode']!r}")
    if values["cost"] not in ("params", "flops") and not values["cost"].startswith("latency:"):
        raise ConfigError(f"cost: expected params, flops or latency:<path>, got {values['cost']!r}")
    if values["cost"].startswith("latency:") and not os.path.isfile(values["cost"].split(":", 1)[1]):
        raise ConfigError(f"cost: latency table {values['cost'].split(':', 1)[1]} not found")
    if values["cost"].startswith("latency:") and values["prune"] == "fine":
        raise ConfigError("cost: latency costs need channel pruning")
    return SearchConfig(**values)


def _csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _write(out, name, text):
    atomic_write_text(os.path.join(out, name), text)


def _say(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg):
    try:
        gen = DataGenConfig(seed=cfg["seed"], num_per_class=cfg["num_per_class"], image_size=cfg["image_size"],
                            channels=cfg["channels"], num_classes=cfg["num_classes"],
                            noise_sigma=cfg["noise_sigma"], angle_jitter=cfg["angle_jitter"])
        parts = split(generate(gen), cfg["fractions"], seed=cfg["seed"])
    except ValueError as err:
        raise ConfigError(str(err)) from None
    os.makedirs(cfg["out"], exist_ok=True)
    for part in parts:
        save_dataset(part, os.path.join(cfg["out"], SPLIT_FILES[part.split_tag]))
    _say(f"wrote {', '.join(f'{p.split_tag}={len(p)}' for p in parts)} samples to {cfg['out']}")


def cmd_train(cfg):
    train = _load_split(cfg, "train")
    val = _load_split(cfg, "val", train.image_shape)
    if len(cfg["widths"]) != 4:
        raise ConfigError("widths: expected four comma-separated channel counts")
    net = nn.toy_convnet(train.image_shape, max(train.num_classes, val.num_classes), cfg["widths"],
                         cfg["hidden"], seed=cfg["seed"])
    rows = []
    for epoch in range(cfg["epochs"]):
        loss = nn.train_epoch(net, train, cfg["lr"], cfg["batch_size"], seed=cfg["seed"] * 1000 + epoch)
        rows.append((epoch, repr(float(loss)), repr(nn.evaluate(net, val))))
    os.makedirs(cfg["out"], exist_ok=True)
    nn.save_weights(net, os.path.join(cfg["out"], "model.amcw"))
    _write(cfg["out"], "train_log.csv", _csv(("epoch", "loss", "val_acc"), rows))
    _say(f"val accuracy {rows[-1][2] if rows else nn.evaluate(net, val)}")


def cmd_search(cfg):
    val = _load_split(cfg, "val")
    net = _load_model(cfg, val.image_shape)
    scfg = search_config(cfg)
    result = run_search(scfg, net, val)
    os.makedirs(cfg["out"], exist_ok=True)
    if cfg["handcrafted"] and scfg.protocol == "resource_constrained":
        baselines = {}
        for policy in ("uniform", "shallow", "deep"):
            out = run_handcrafted(policy, scfg, net, val)
            baselines[policy] = {"val_acc": out.val_acc, "reward": out.reward, "cost_ratio": out.cost_ratio,
                                 "policy": out.actions}
        _write(cfg["out"], "baselines.json", json.dumps(baselines, indent=2) + "\n")
    write_search_outputs(result, cfg["out"])
    _say(f"best reward {result.best_reward!r}, val accuracy {result.best_val_acc!r}, "
         f"cost ratio {result.best_cost.ratio_vs_baseline!r}")


def cmd_finetune(cfg):
    train = _load_split(cfg, "train")
    val = _load_split(cfg, "val", train.image_shape)
    test = _load_split(cfg, "test", train.image_shape)
    net = _load_model(cfg, train.image_shape)
    pre = nn.evaluate(net, val)
    tuned = finetune(net, train, cfg["epochs"], cfg["lr"], cfg["batch_size"], seed=cfg["seed"])
    os.makedirs(cfg["out"], exist_ok=True)
    nn.save_weights(tuned, os.path.join(cfg["out"], "finetuned.amcw"))
    summary = {"val_acc_pre_finetune": pre, "val_acc": nn.evaluate(tuned, val), "test_acc": nn.evaluate(tuned, test),
               "epochs": cfg["epochs"]}
    _write(cfg["out"], "finetune.json", json.dumps(summary, indent=2) + "\n")
    _say(f"val accuracy {pre!r} -> {summary['val_acc']!r} (test {summary['test_acc']!r})")


def _run_summary(run_dir):
    rows = read_log_csv(os.path.join(run_dir, "episodes.csv"))
    if not rows:
        raise ValueError("empty episode log")
    best = max(rows, key=lambda r: r["reward"])
    return rows, best


def cmd_report(cfg):
    run = cfg["run"]
    out = cfg["out"] or os.path.join(run, "report")
    try:
        rows, best = _run_summary(run)
    except (OSError, ValueError, KeyError) as err:
        raise ConfigError(f"run: cannot read episode log in {run}: {err}") from None
    running = np.maximum.accumulate([r["reward"] for r in rows])
    os.makedirs(out, exist_ok=True)
    curve = [(r["episode"], r["phase"], repr(r["reward"]), repr(float(b)), repr(r["val_acc"]), repr(r["sigma"]),
              repr(r["cost_ratio"])) for r, b in zip(rows, running)]
    _write(out, "curves.csv", _csv(("episode", "phase", "reward", "running_best", "val_acc", "sigma", "cost_ratio"), curve))

    policy = best["actions"]
    policy_path = os.path.join(run, "best_policy.json")
    if os.path.isfile(policy_path):
        with open(policy_path) as fh:
            policy = json.load(fh)["policy"]
    _write(out, "policy.csv", _csv(("layer", "ratio_removed"), [(i, repr(float(a))) for i, a in enumerate(policy)]))

    lines = [
        f"episodes: {len(rows)} ({sum(r['phase'] == 'explore' for r in rows)} explore, "
        f"{sum(r['phase'] == 'exploit' for r in rows)} exploit)",
        "method            best_reward   val_acc(pre-ft)   cost_ratio",
        f"{'search':<17} {best['reward']:>11.4f}   {best['val_acc']:>15.4f}   {best['cost_ratio']:>10.4f}",
    ]
    baselines_path = os.path.join(run, "baselines.json")
    if os.path.isfile(baselines_path):
        with open(baselines_path) as fh:
            for name, b in json.load(fh).items():
                lines.append(f"{name:<17} {b['reward']:>11.4f}   {b['val_acc']:>15.4f}   {b['cost_ratio']:>10.4f}")
    if cfg["random_run"]:
        try:
            _, rbest = _run_summary(cfg["random_run"])
        except (OSError, ValueError, KeyError) as err:
            raise ConfigError(f"random_run: cannot read episode log: {err}") from None
        lines.append(f"{'random':<17} {rbest['reward']:>11.4f}   {rbest['val_acc']:>15.4f}   {rbest['cost_ratio']:>10.4f}")
    lines.append("policy (fraction removed per weighted layer): " + ", ".join(f"{a:.3f}" for a in policy))
    _write(out, "summary.txt", "\n".join(lines) + "\n")
    _say("\n".join(lines))
    return out


def cmd_correlate(cfg):
    train = _load_split(cfg, "train")
    val = _load_split(cfg, "val", train.image_shape)
    net = _load_model(cfg, train.image_shape)
    scfg = search_config(cfg)
    if cfg["num_policies"] < 10:
        raise ConfigError("num_policies: the correlation study needs at least 10 policies")
    rho, rows = proxy_correlation_study(scfg, cfg["num_policies"], net, train, val, seed=cfg["seed"])
    os.makedirs(cfg["out"], exist_ok=True)
    table = [(i, repr(r["pre_acc"]), repr(r["post_acc"]), repr(r["cost_ratio"]), ";".join(repr(a) for a in r["policy"]))
             for i, r in enumerate(rows)]
    _write(cfg["out"], "correlation.csv", _csv(("policy", "pre_acc", "post_acc", "cost_ratio", "actions"), table))
    _write(cfg["out"], "correlation.json", json.dumps({"spearman_rho": rho, "num_policies": len(rows)}, indent=2) + "\n")
    _say(f"spearman rho = {'undefined' if rho is None else f'{rho:.4f}'} over {len(rows)} policies")


def _feature_sets(text):
    sets = {}
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        if ":" not in chunk:
            raise ConfigError(f"feature_sets: expected name:f1,f2 in {chunk!r}")
        name, feats = chunk.split(":", 1)
        feats = tuple(f.strip() for f in feats.split(",") if f.strip())
        unknown = set(feats) - set(FEATURES)
        if unknown:
            raise ConfigError(f"feature_sets: unknown features {sorted(unknown)}")
        sets[name.strip()] = feats
    if not sets:
        raise ConfigError("feature_sets: no feature sets given")
    return sets


def cmd_ablate_state(cfg):
    val = _load_split(cfg, "val")
    net = _load_model(cfg, val.image_shape)
    sets = _feature_sets(cfg["feature_sets"])
    scfg = search_config(cfg)
    best = ablate_state(scfg, sets, net, val)
    os.makedirs(cfg["out"], exist_ok=True)
    _write(cfg["out"], "ablation.csv",
           _csv(("name", "features", "best_reward"), [(k, ";".join(sets[k]), repr(v)) for k, v in best.items()]))
    for k, v in best.items():
        _say(f"{k:<22} best reward {v:.4f}")


def cmd_iterate(cfg):
    train = _load_split(cfg, "train")
    val = _load_split(cfg, "val", train.image_shape)
    net = _load_model(cfg, train.image_shape)
    cfg["prune"] = "fine"
    scfg = search_config(cfg)
    final, stages = iterative_prune_finetune(scfg, cfg["densities"], net, train, val)
    os.makedirs(cfg["out"], exist_ok=True)
    nn.save_weights(final, os.path.join(cfg["out"], "final_model.amcw"))
    rows = [(k, repr(s.density_target), repr(s.density), repr(s.pre_acc), repr(s.post_acc),
             ";".join(repr(a) for a in s.policy)) for k, s in enumerate(stages)]
    _write(cfg["out"], "stages.csv", _csv(("stage", "density_target", "density", "pre_acc", "post_acc", "actions"), rows))
    for r in rows:
        _say(f"stage {r[0]}: density {float(r[2]):.4f} (target {float(r[1])}), post-finetune accuracy {float(r[4]):.4f}")


HELP = {
    "gen-data": "generate the synthetic dataset and its train/val/test split",
    "train": "train the baseline network",
    "search": "search a per-layer compression policy",
    "finetune": "fine-tune a (compressed) model with frozen masks",
    "report": "emit plot-ready curves, the best policy and a text summary of a search run",
    "correlate": "pre- vs post-fine-tune accuracy over random feasible policies",
    "ablate-state": "compare searches with state features zeroed out",
    "iterate": "multi-stage fine-grained prune and fine-tune",
}

HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "search": cmd_search, "finetune": cmd_finetune,
    "report": cmd_report, "correlate": cmd_correlate, "ablate-state": cmd_ablate_state, "iterate": cmd_iterate,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="rlprune", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="key = value configuration file")
        for key in keys:
            p.add_argument(key.flag, dest=key.name, default=None, help=key.help or None)
    return parser


def _threads():
    text = os.environ.get("AMC_THREADS")
    if not text:
        return 1
    try:
        n = int(text)
    except ValueError:
        raise ConfigError(f"AMC_THREADS must be a positive integer, got {text!r}") from None
    if n < 1:
        raise ConfigError(f"AMC_THREADS must be a positive integer, got {text!r}")
    return n


def main(argv=None):
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        nn.set_eval_threads(_threads())
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(args.command, file_values, flags)
        HANDLERS[args.command](cfg)
        out = cfg.get("out") or (os.path.join(cfg["run"], "report") if args.command == "report" else None)
        if out:
            _write(out, "config_echo", echo(args.command, cfg))
    except InfeasibleBudget as err:
        print(f"error: infeasible budget: {err}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericError as err:
        where = f" (layer {err.layer}, batch {err.batch})" if err.layer is not None or err.batch is not None else ""
        print(f"error: numeric failure{where}: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, ShapeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
