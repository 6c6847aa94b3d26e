"""Flat dotted-key run configuration.

One schema drives parsing, type checking, defaults and the ``--help`` text.
Config files are TOML; nested tables and dotted keys are flattened to
``section.key`` names.  Precedence: built-in defaults < file < command-line
overrides.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import tomli


class ConfigError(Exception):
    """Unknown key, wrong type, missing file or missing required key."""


@dataclass(frozen=True)
class Key:
    name: str
    type: str            # int, float, bool, str, ints, floats, strs
    default: object
    help: str


SCHEMA: tuple[Key, ...] = (
    # model
    Key("model.preset", "str", "omniglot", "architecture preset: omniglot (28x28 grey) or miniimagenet (84x84 RGB)"),
    Key("model.channels", "int", 64, "conv channels in every block"),
    Key("model.relation_hidden", "int", 8, "width of the relation module's hidden FC layer"),
    Key("model.bn_momentum", "float", 0.1, "BN running-statistics momentum"),
    Key("model.bn_eps", "float", 1e-5, "BN epsilon"),
    Key("model.fused_pair_conv", "bool", True, "evaluate the first relation conv without materialising pair concatenations"),
    # zero-shot model
    Key("zsl.preset", "str", "awa", "hidden sizes preset: awa (1024/400) or cub (1200/1200)"),
    Key("zsl.attribute_dim", "int", 0, "attribute vector length (0 = read from the table)"),
    Key("zsl.feature_dim", "int", 0, "query feature length (0 = read from the table)"),
    Key("zsl.fc1_hidden", "int", 0, "semantic MLP hidden width (0 = preset)"),
    Key("zsl.fc3_hidden", "int", 0, "relation MLP hidden width (0 = preset)"),
    Key("zsl.fc3_relu", "bool", True, "ReLU after the relation MLP's hidden layer"),
    # episodes
    Key("episode.preset", "str", "omniglot-5w1s", "training composition preset (see `relnet version --presets`)"),
    Key("episode.ways", "int", 0, "classes per episode (0 = preset)"),
    Key("episode.shots", "int", 0, "samples per class (0 = preset)"),
    Key("episode.queries", "int", 0, "training queries per class (0 = preset)"),
    Key("episode.eval_queries", "int", 0, "test queries per class (0 = shots for omniglot, 15 for miniimagenet)"),
    # training
    Key("train.total_episodes", "int", 1000, "optimizer steps (episodes or ZSL minibatches)"),
    Key("train.base_lr", "float", 0.0, "initial learning rate (0 = 1e-3 few-shot, 1e-5 zero-shot)"),
    Key("train.lr_halving_period", "int", 0, "steps per learning-rate halving (0 = 100000 few-shot, 200000 zero-shot)"),
    Key("train.beta1", "float", 0.9, "Adam beta1"),
    Key("train.beta2", "float", 0.999, "Adam beta2"),
    Key("train.eps", "float", 1e-8, "Adam epsilon"),
    Key("train.weight_decay", "float", -1.0, "decay on the semantic MLP (negative = 0 few-shot, 1e-5 zero-shot)"),
    Key("train.decoupled_decay", "bool", True, "add decay to the update (true) or to the gradient (false)"),
    Key("train.batch_size", "int", 32, "zero-shot minibatch size"),
    Key("train.seed", "int", 0, "seed for initialisation and the training stream"),
    Key("train.log_every", "int", 100, "steps between metrics.csv rows"),
    Key("train.checkpoint_every", "int", 1000, "steps between checkpoints (0 = final only)"),
    Key("train.eval_every", "int", 0, "steps between validation runs (needs a val split)"),
    Key("train.eval_episodes", "int", 100, "episodes per validation run"),
    Key("train.final_eval", "bool", True, "evaluate on the test split after training"),
    Key("train.resume", "str", "", "checkpoint to resume from"),
    # data
    Key("data.root", "str", "", "image corpus root: <root>/<class>/<item>.png|.pgm (nested layouts flattened)"),
    Key("data.split_file", "str", "", "class split file (class_id<TAB>train|val|test); overrides the counts"),
    Key("data.train_classes", "int", 1200, "original classes in the training split"),
    Key("data.test_classes", "int", 423, "original classes in the test split"),
    Key("data.train_limit", "int", 0, "use only this many original training classes (0 = all)"),
    Key("data.split_seed", "int", 0, "seed of the class split"),
    Key("data.rotations", "bool", True, "add 90/180/270-degree rotations as new classes"),
    Key("data.eval_originals_only", "bool", False, "evaluate on unrotated test classes only"),
    Key("data.features", "str", "", "zero-shot training features CSV"),
    Key("data.test_features", "str", "", "zero-shot test features CSV"),
    Key("data.attributes", "str", "", "class attributes CSV"),
    Key("data.splits", "str", "", "seen/unseen split CSV"),
    # evaluation
    Key("eval.checkpoint", "str", "", "checkpoint to evaluate"),
    Key("eval.episodes", "int", 1000, "test episodes"),
    Key("eval.seed", "int", 0, "seed of the evaluation stream"),
    Key("eval.threads", "int", 1, "worker threads for evaluation (results are identical)"),
    Key("eval.mode", "str", "both", "zero-shot mode: conventional, gzsl or both"),
    Key("eval.per_sample", "bool", False, "zero-shot accuracy averaged over items instead of classes"),
    # synthetic study
    Key("synth.pattern", "str", "rings", "ground-truth relation: rings, checkerboard or ball"),
    Key("synth.ring_width", "float", 1.0, "band width r"),
    Key("synth.box_min", "float", -2.0, "lower corner of the square domain"),
    Key("synth.box_max", "float", 2.0, "upper corner of the square domain"),
    Key("synth.n_train", "int", 50_000, "training pairs per seed"),
    Key("synth.n_test", "int", 20_000, "held-out pairs per seed"),
    Key("synth.steps", "int", 10_000, "optimizer steps per comparator"),
    Key("synth.batch_size", "int", 512, "minibatch size"),
    Key("synth.lr", "float", 3e-3, "initial learning rate (halved after each third)"),
    Key("synth.relation_hidden", "ints", [64, 64, 64], "relation MLP hidden widths"),
    Key("synth.mlp_hidden", "ints", [16, 16], "embedding MLP hidden widths of mlp_mahalanobis"),
    Key("synth.embed_dim", "int", 2, "embedding size of mlp_mahalanobis"),
    Key("synth.grid", "int", 256, "decision map resolution"),
    Key("synth.query", "floats", [0.0, 0.0], "query point of the decision maps"),
    Key("synth.seeds", "ints", [0, 1, 2, 3, 4], "seeds of the sweep"),
    Key("synth.kinds", "strs", ["mahalanobis", "mlp_mahalanobis", "relation_mlp"], "comparators to train"),
    # visualisation export
    Key("viz.checkpoint", "str", "", "checkpoint whose embeddings are exported"),
    Key("viz.seed", "int", 0, "seed of the exported episode"),
    Key("viz.queries", "int", 5, "queries per class in the exported episode"),
)

KEYS = {k.name: k for k in SCHEMA}

REQUIRED = {
    "train": ("data.root",),
    "eval": ("data.root", "eval.checkpoint"),
    "zsl-train": ("data.features", "data.attributes", "data.splits"),
    "zsl-eval": ("data.test_features", "data.attributes", "data.splits", "eval.checkpoint"),
    "export-viz": ("data.root", "viz.checkpoint"),
}


def _check(key: Key, value, source: str):
    base = {"ints": "int", "floats": "float", "strs": "str"}.get(key.type)
    if base is not None:
        if not isinstance(value, list):
            raise ConfigError(f"{source}: {key.name} must be a list of {base}s")
        return [_check(Key(key.name, base, None, ""), v, source) for v in value]
    ok = {
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "bool": isinstance(value, bool),
        "str": isinstance(value, str),
    }[key.type]
    if not ok:
        raise ConfigError(f"{source}: {key.name} must be {key.type}, got {type(value).__name__} {value!r}")
    return float(value) if key.type == "float" else value


def _parse_text(key: Key, text: str):
    base = {"ints": "int", "floats": "float", "strs": "str"}.get(key.type)
    if base is not None:
        items = [t.strip() for t in text.strip("[]").split(",") if t.strip()]
        return [_parse_text(Key(key.name, base, None, ""), t) for t in items]
    try:
        if key.type == "int":
            return int(text)
        if key.type == "float":
            return float(text)
        if key.type == "bool":
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigError(f"--{key.name}: cannot parse {text!r} as {key.type}") from None
    return text


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in tree.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, name + "."))
        else:
            flat[name] = v
    return flat


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, name: str):
        return self.values[name]

    def get(self, name: str, default=None):
        return self.values.get(name, default)

    def section(self, prefix: str) -> dict:
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def require(self, command: str) -> None:
        missing = [k for k in REQUIRED.get(command, ()) if not self.values.get(k)]
        if missing:
            raise ConfigError(f"{command} needs {', '.join(missing)} (set in the config file or as --key=value)")

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    if isinstance(value, str):
        return json.dumps(value)
    return str(value)


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, an optional TOML file and ``{dotted_key: text}`` overrides."""
    values = {k.name: (list(k.default) if isinstance(k.default, list) else k.default) for k in SCHEMA}
    if path:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            tree = tomli.loads(path.read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for name, value in _flatten(tree).items():
            if name not in KEYS:
                raise ConfigError(f"{path}: unknown key {name!r}")
            values[name] = _check(KEYS[name], value, str(path))
    for name, text in (overrides or {}).items():
        if name not in KEYS:
            raise ConfigError(f"unknown key {name!r}")
        values[name] = _parse_text(KEYS[name], text) if isinstance(text, str) else _check(KEYS[name], text, "override")
    return RunConfig(values)


def help_text() -> str:
    width = max(len(k.name) for k in SCHEMA)
    lines = ["configuration keys (file: `key = value` or [section] tables; flag: --key=value):"]
    for k in SCHEMA:
        lines.append(f"  {k.name:<{width}}  {k.type:<6} default {_format(k.default):<20} {k.help}")
    return "\n".join(lines)
