"""Command-line entry point: ``relnet <subcommand> [--config FILE] [--key=value ...]``.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from relnet import __version__
from relnet.checkpoint import CheckpointError, load_checkpoint
from relnet.config import ConfigError, RunConfig, help_text, parse_config
from relnet.data import (
    PRESETS,
    DataError,
    EpisodeSpec,
    augment_rotations,
    eval_queries,
    load_feature_table,
    load_image_dataset,
    sample_episode,
    split_classes,
)
from relnet.model import ModelConfig, ZslConfig
from relnet.tensor import ShapeError
from relnet.train import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_COMMANDS = ("train", "eval", "zsl-train", "zsl-eval", "synth", "export-viz")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="relnet", description="Relation Network few-shot and zero-shot toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join((*RUN_COMMANDS, "gradcheck", "version")) + "}",
                                parser_class=_Parser)
    descriptions = {
        "train": "episodic few-shot training on an image corpus",
        "eval": "few-shot evaluation of a checkpoint on the test classes",
        "zsl-train": "zero-shot training on a feature table",
        "zsl-eval": "zero-shot (conventional and generalised) evaluation of a checkpoint",
        "synth": "synthetic 2-D comparator study with decision maps",
        "export-viz": "export embeddings and relation features of one episode with 2-D PCA",
    }
    for name in RUN_COMMANDS:
        p = sub.add_parser(name, help=descriptions[name], description=descriptions[name], epilog=help_text(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="TOML config file with flat dotted keys")
        p.add_argument("--outdir", help="output directory (default runs/<timestamp>)")
        p.add_argument("--threads", type=int, help="evaluation worker threads (sets eval.threads)")
    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--all", action="store_true", help="check every registered op")
    g.add_argument("--op", action="append", default=[], help="check one op (repeatable)")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    v = sub.add_parser("version", help="print the version")
    v.add_argument("--presets", action="store_true", help="also list episode presets")
    return parser


def _overrides(extra: list[str]) -> dict:
    out, i = {}, 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or "." not in token.split("=", 1)[0]:
            raise UsageError(f"unrecognized argument {token!r}")
        if "=" in token:
            key, value = token[2:].split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {token}")
            key, value = token[2:], extra[i + 1]
            i += 1
        out[key] = value
        i += 1
    return out


# -- shared builders -------------------------------------------------------------


def model_config(cfg: RunConfig) -> ModelConfig:
    kw = dict(channels=cfg["model.channels"], relation_hidden=cfg["model.relation_hidden"],
              bn_momentum=cfg["model.bn_momentum"], bn_eps=cfg["model.bn_eps"],
              fused_pair_conv=cfg["model.fused_pair_conv"])
    preset = cfg["model.preset"]
    if preset == "omniglot":
        return ModelConfig.omniglot(**kw)
    if preset == "miniimagenet":
        return ModelConfig.miniimagenet(**kw)
    raise ConfigError(f"unknown model.preset {preset!r}")


def family(cfg: RunConfig) -> str:
    return "omniglot" if cfg["model.preset"] == "omniglot" else "mini"


def episode_spec(cfg: RunConfig) -> EpisodeSpec:
    try:
        ways, shots, queries = PRESETS[cfg["episode.preset"]]
    except KeyError:
        raise ConfigError(f"unknown episode.preset {cfg['episode.preset']!r}; known: {', '.join(PRESETS)}") from None
    return EpisodeSpec(cfg["episode.ways"] or ways, cfg["episode.shots"] or shots, cfg["episode.queries"] or queries)


def eval_spec(cfg: RunConfig, train_spec: EpisodeSpec) -> EpisodeSpec:
    q = cfg["episode.eval_queries"] or eval_queries(family(cfg), train_spec.shots)
    return EpisodeSpec(train_spec.ways, train_spec.shots, q)


def train_config(cfg: RunConfig, mode: str):
    from relnet.train import TrainConfig

    spec = episode_spec(cfg) if mode == "fewshot" else EpisodeSpec(2, 1, 1)
    wd = cfg["train.weight_decay"]
    return TrainConfig(
        mode=mode, ways=spec.ways, shots=spec.shots, queries=spec.queries,
        total_episodes=cfg["train.total_episodes"], base_lr=cfg["train.base_lr"] or None,
        lr_halving_period=cfg["train.lr_halving_period"] or None, beta1=cfg["train.beta1"],
        beta2=cfg["train.beta2"], eps=cfg["train.eps"], weight_decay=None if wd < 0 else wd,
        decoupled_decay=cfg["train.decoupled_decay"], batch_size=cfg["train.batch_size"], seed=cfg["train.seed"],
        log_every=cfg["train.log_every"], checkpoint_every=cfg["train.checkpoint_every"],
        eval_every=cfg["train.eval_every"], eval_episodes=cfg["train.eval_episodes"],
        eval_queries=eval_spec(cfg, spec).queries if mode == "fewshot" else None,
    )


def image_splits(cfg: RunConfig, mcfg: ModelConfig) -> dict:
    """Load the corpus, split original classes, then add rotations per split."""
    ds = load_image_dataset(cfg["data.root"], mcfg.input_size, mcfg.input_channels)
    if cfg["data.split_file"]:
        parts = split_classes(ds, split_file=cfg["data.split_file"])
    else:
        parts = split_classes(ds, cfg["data.train_classes"], cfg["data.test_classes"], seed=cfg["data.split_seed"])
    limit = cfg["data.train_limit"]
    if limit and "train" in parts and limit < len(parts["train"]):
        ids = parts["train"].class_ids
        pick = np.random.default_rng([cfg["data.split_seed"], 1]).permutation(len(ids))[:limit]
        parts["train"] = parts["train"].subset(sorted(ids[i] for i in pick))
    if cfg["data.rotations"]:
        for name in parts:
            if name == "test" and cfg["data.eval_originals_only"]:
                continue
            parts[name] = augment_rotations(parts[name])
    return parts


def zsl_config(cfg: RunConfig, table) -> ZslConfig:
    preset = cfg["zsl.preset"]
    if preset not in ("awa", "cub"):
        raise ConfigError(f"unknown zsl.preset {preset!r}")
    base = ZslConfig.awa() if preset == "awa" else ZslConfig.cub()
    return ZslConfig(
        attribute_dim=cfg["zsl.attribute_dim"] or table.attribute_dim,
        fc1_hidden=cfg["zsl.fc1_hidden"] or base.fc1_hidden,
        feature_dim=cfg["zsl.feature_dim"] or table.feature_dim,
        fc3_hidden=cfg["zsl.fc3_hidden"] or base.fc3_hidden,
        fc3_relu=cfg["zsl.fc3_relu"],
    )


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _write_report(outdir: Path, stem: str, report) -> None:
    _write_json(outdir / f"{stem}.json", report.to_dict())
    (outdir / f"{stem}.csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n")


def _write_rows(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- subcommands -----------------------------------------------------------------


def cmd_train(cfg: RunConfig, outdir: Path) -> int:
    from relnet.metrics import evaluate_fewshot
    from relnet.plotting import plot_metrics
    from relnet.train import train_fewshot

    mcfg = model_config(cfg)
    parts = image_splits(cfg, mcfg)
    tcfg = train_config(cfg, "fewshot")
    print(f"training classes {len(parts['train'])}, episode {tcfg.episode_spec}", flush=True)
    start = time.perf_counter()
    result = train_fewshot(tcfg, mcfg, parts["train"], parts.get("val"), outdir, resume=cfg["train.resume"] or None)
    summary = {"steps": result.state.step, "checkpoint": str(result.checkpoint),
               "train_seconds": round(time.perf_counter() - start, 2),
               "final_loss": result.log[-1][1] if result.log else None}
    plot_metrics(outdir / "metrics.csv", outdir / "metrics.png")
    if cfg["train.final_eval"] and "test" in parts:
        report = evaluate_fewshot(result.state.model, parts["test"], eval_spec(cfg, tcfg.episode_spec),
                                  cfg["eval.episodes"], cfg["eval.seed"], cfg["eval.threads"])
        _write_report(outdir, "eval_report", report)
        summary["test_accuracy"] = report.mean
        summary["test_ci"] = report.ci_half_width
        print(f"test accuracy {report.mean:.4f} +- {report.ci_half_width:.4f} over {report.n_episodes} episodes")
    _write_json(outdir / "summary.json", summary)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, outdir: Path) -> int:
    from relnet.metrics import evaluate_fewshot

    state = load_checkpoint(cfg["eval.checkpoint"])
    if not hasattr(state.model, "score_episode"):
        raise ConfigError("eval needs a few-shot checkpoint; use zsl-eval for zero-shot ones")
    mcfg = state.model.config
    parts = image_splits(cfg, mcfg)
    spec = eval_spec(cfg, episode_spec(cfg))
    report = evaluate_fewshot(state.model, parts["test"], spec, cfg["eval.episodes"], cfg["eval.seed"],
                              cfg["eval.threads"], {"checkpoint": cfg["eval.checkpoint"]})
    _write_report(outdir, "report", report)
    _write_rows(outdir / "metrics.csv", ["episode", "accuracy"], enumerate(report.accuracies))
    print(report.csv_header())
    print(report.csv_row())
    return EXIT_OK


def _zsl_reports(model, table, cfg: RunConfig, outdir: Path) -> dict:
    from relnet.metrics import evaluate_zsl

    out = {}
    modes = ("conventional", "gzsl") if cfg["eval.mode"] == "both" else (cfg["eval.mode"],)
    for mode in modes:
        report = evaluate_zsl(model, table, mode, per_sample=cfg["eval.per_sample"])
        _write_report(outdir, f"zsl_{mode}", report)
        print(report.csv_header())
        print(report.csv_row())
        out[mode] = report
    return out


def cmd_zsl_train(cfg: RunConfig, outdir: Path) -> int:
    from relnet.plotting import plot_metrics
    from relnet.train import train_zsl

    table = load_feature_table(cfg["data.features"], cfg["data.attributes"], cfg["data.splits"])
    tcfg = train_config(cfg, "zsl")
    result = train_zsl(tcfg, zsl_config(cfg, table), table, outdir, resume=cfg["train.resume"] or None)
    plot_metrics(outdir / "metrics.csv", outdir / "metrics.png")
    summary = {"steps": result.state.step, "checkpoint": str(result.checkpoint)}
    if cfg["train.final_eval"] and cfg["data.test_features"]:
        test = load_feature_table(cfg["data.test_features"], cfg["data.attributes"], cfg["data.splits"])
        reports = _zsl_reports(result.state.model, test, cfg, outdir)
        summary.update({m: r.to_dict() for m, r in reports.items()})
    _write_json(outdir / "summary.json", summary)
    return EXIT_OK


def cmd_zsl_eval(cfg: RunConfig, outdir: Path) -> int:
    state = load_checkpoint(cfg["eval.checkpoint"])
    if not hasattr(state.model, "embed_semantic"):
        raise ConfigError("zsl-eval needs a zero-shot checkpoint")
    table = load_feature_table(cfg["data.test_features"], cfg["data.attributes"], cfg["data.splits"])
    reports = _zsl_reports(state.model, table, cfg, outdir)
    rows = []
    for mode, r in reports.items():
        rows.append([mode, *(r.to_dict().get(k) for k in ("mean", "t1_unseen", "t1_seen", "harmonic"))])
    _write_rows(outdir / "metrics.csv", ["mode", "t1", "t1_unseen", "t1_seen", "harmonic"], rows)
    return EXIT_OK


def cmd_synth(cfg: RunConfig, outdir: Path) -> int:
    from relnet.plotting import plot_accuracy_bars, plot_decision_map, plot_scatter
    from relnet.synthlab import SynthConfig, pca_fit, render_scatter, run_study

    s = cfg.section("synth")
    sc = SynthConfig(
        pattern=s["pattern"], ring_width=s["ring_width"], box=(s["box_min"], s["box_max"]), n_train=s["n_train"],
        n_test=s["n_test"], steps=s["steps"], batch_size=s["batch_size"], lr=s["lr"],
        relation_hidden=tuple(s["relation_hidden"]), mlp_hidden=tuple(s["mlp_hidden"]), embed_dim=s["embed_dim"],
        grid=s["grid"], query=tuple(s["query"]), seeds=tuple(s["seeds"]), kinds=tuple(s["kinds"]),
    )
    if len(sc.query) != 2:
        raise ConfigError("synth.query must hold two coordinates")

    def on_map(kind, seed, dmap, comp):
        plot_decision_map(dmap, outdir / f"decision_{kind}_seed{seed}.png", f"{kind} seed {seed}")
        if kind == "relation_mlp" and seed == sc.seeds[0]:
            # pair features of the relation MLP for the fixed query, projected to 2-D
            pts = _grid_subsample(dmap, sc)
            qs = np.broadcast_to(np.asarray(sc.query), pts.shape)
            feats = comp.hidden_features(qs, pts)
            match = comp.predict(qs, pts).astype(int)
            proj = pca_fit(feats, 2).project(feats)
            _write_rows(outdir / "pair_features_pca.csv", ["s_x", "s_y", "predicted_match", "pc1", "pc2"],
                        ([*p, m, *z] for p, m, z in zip(pts.tolist(), match, proj.tolist())))
            render_scatter(proj, match, outdir / "pair_features_pca.ppm")
            plot_scatter(proj, match, outdir / "pair_features_pca.png", "relation MLP penultimate layer, 2-D PCA")

    results = run_study(sc, outdir, on_map=on_map)
    _write_rows(outdir / "metrics.csv", ["seed", "comparator", "accuracy", "map_accuracy"],
                ([r["seed"], r["comparator"], f"{r['accuracy']:.4f}", f"{r['map_accuracy']:.4f}"] for r in results))
    plot_accuracy_bars(results, outdir / "accuracy.png")
    return EXIT_OK


def _grid_subsample(dmap, sc, n: int = 2000) -> np.ndarray:
    from relnet.synthlab import grid_points

    pts = grid_points(dmap.grid, sc.box)
    idx = np.random.default_rng(0).choice(len(pts), size=min(n, len(pts)), replace=False)
    return pts[np.sort(idx)]


def cmd_export_viz(cfg: RunConfig, outdir: Path) -> int:
    from relnet.plotting import plot_scatter
    from relnet.synthlab import pca_fit, render_scatter
    from relnet.tensor import Tensor

    state = load_checkpoint(cfg["viz.checkpoint"])
    model = state.model
    if not hasattr(model, "score_episode"):
        raise ConfigError("export-viz needs a few-shot checkpoint")
    parts = image_splits(cfg, model.config)
    train_spec = episode_spec(cfg)
    spec = EpisodeSpec(train_spec.ways, train_spec.shots, cfg["viz.queries"])
    ep = sample_episode(parts["test"], spec, np.random.default_rng(cfg["viz.seed"]))
    images = np.concatenate([ep.support_images, ep.query_images])
    emb = model.embed_image(Tensor(images, dtype=model.dtype), mode="eval").data.reshape(len(images), -1)
    labels = ep.support_labels + ep.query_labels
    roles = ["support"] * len(ep.support_labels) + ["query"] * len(ep.query_labels)
    class_index = {c: i for i, c in enumerate(ep.class_ids)}
    proj = pca_fit(emb, 2).project(emb)
    _write_rows(outdir / "embeddings.csv", ["role", "class_id", "pc1", "pc2", *[f"f{i}" for i in range(emb.shape[1])]],
                ([r, c, *z, *e] for r, c, z, e in zip(roles, labels, proj.tolist(), emb.tolist())))
    render_scatter(proj, [class_index[c] for c in labels], outdir / "embeddings_pca.ppm")
    plot_scatter(proj, [class_index[c] for c in labels], outdir / "embeddings_pca.png", "embeddings, 2-D PCA")
    sm = model.score_episode(ep, mode="eval", return_hidden=True)
    n_classes = len(ep.class_ids)
    # hidden rows are query-major: row j * C + i pairs query j with class i
    match = [int(ep.query_labels[r // n_classes] == ep.class_ids[r % n_classes]) for r in range(len(sm.hidden))]
    pair_proj = pca_fit(sm.hidden, 2).project(sm.hidden)
    _write_rows(outdir / "pair_features.csv",
                ["query", "class_id", "match", "score", "pc1", "pc2", *[f"h{i}" for i in range(sm.hidden.shape[1])]],
                ([r // n_classes, ep.class_ids[r % n_classes], m, float(sm.scores.reshape(-1)[r]), *z, *h]
                 for r, (m, z, h) in enumerate(zip(match, pair_proj.tolist(), sm.hidden.tolist()))))
    render_scatter(pair_proj, match, outdir / "pair_features_pca.ppm")
    plot_scatter(pair_proj, match, outdir / "pair_features_pca.png", "relation module penultimate layer, 2-D PCA")
    _write_rows(outdir / "metrics.csv", ["items", "pairs"], [[len(images), len(match)]])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from relnet.gradcheck import REGISTRY, grad_check

    names = list(REGISTRY) if args.all or not args.op else args.op
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise UsageError(f"unknown op(s) {', '.join(unknown)}; registered: {', '.join(REGISTRY)}")
    start = time.perf_counter()
    reports = []
    for name in names:
        report = grad_check(name, tolerance=args.tolerance, seed=args.seed)
        print(report.line(), flush=True)
        reports.append(report)
    ok = all(r.passed for r in reports)
    print(f"{'all passed' if ok else 'FAILED'}: {sum(r.passed for r in reports)}/{len(reports)} ops "
          f"in {time.perf_counter() - start:.1f}s")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "zsl-train": cmd_zsl_train,
    "zsl-eval": cmd_zsl_eval,
    "synth": cmd_synth,
    "export-viz": cmd_export_viz,
}


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError("relnet: error: a subcommand is required")
    if args.command == "version":
        if extra:
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        print(__version__)
        if args.presets:
            for name, (c, k, q) in PRESETS.items():
                print(f"{name}: ways={c} shots={k} queries={q}")
        return EXIT_OK
    if args.command == "gradcheck":
        if extra:
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        return cmd_gradcheck(args)
    overrides = _overrides(extra)
    if args.threads is not None:
        overrides["eval.threads"] = str(args.threads)
    cfg = parse_config(args.config, overrides)
    cfg.require(args.command)
    outdir = Path(args.outdir) if args.outdir else Path("runs") / time.strftime("%Y%m%d-%H%M%S")
    outdir.mkdir(parents=True, exist_ok=True)
    cfg.write(outdir / "resolved.cfg")
    return COMMANDS[args.command](cfg, outdir)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, CheckpointError, FileNotFoundError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
