"""Command-line entry point: ``mmil <command> [options]``.

Every command writes its artifacts plus ``manifest.json`` into ``--out``. The
manifest records the configuration, the seeds and the SHA-256 of every input
and output file. It contains no timestamps, so identical runs give identical
manifests. Failures print one ``error: <Kind>: <message>`` line on stderr and
exit with status 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bagdata, graphadapt, metrics
from .explain import pipeline
from .netcore import build_network, load_model, save_model
from .train import TrainConfig, accuracy, evaluate, predict, train, write_history
from .validation import check_bags

DEFAULT_ARCH = {
    "levels": [
        {"bags": [{"units": 64, "aggregator": "max", "activation": "relu"}]},
        {"bags": [{"units": 64, "aggregator": "max", "activation": "relu"}]},
    ],
    "head": [],
    "output": "auto",
}


class CliError(Exception):
    """A user-facing failure with a short kind label."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Collects what a command read and wrote, then writes the manifest."""

    def __init__(self, command: str, out: str):
        self.command = command
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config: dict = {}
        self.seeds: dict = {}
        self.inputs: dict = {}
        self.outputs: list = []
        self.results: dict = {}

    def input(self, path):
        if path is None:
            return None
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"input file not found: {path}")
        self.inputs[str(path)] = sha256(p)
        return p

    def output(self, name: str) -> Path:
        if name in self.outputs:
            raise RuntimeError(f"output {name} written twice")
        self.outputs.append(name)
        return self.out / name

    def finish(self) -> Path:
        doc = {
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {name: sha256(self.out / name) for name in sorted(self.outputs)},
            "results": self.results,
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _load_data(run: Run, path):
    return bagdata.load_dataset(run.input(path))


def _check_against_model(spec, dataset, path):
    """Fail early, naming the dimensions, when data and model disagree."""
    if dataset.feature_dim != spec.input_dim:
        raise ValueError(f"feature_dim mismatch: {path} has {dataset.feature_dim}, model expects {spec.input_dim}")
    if dataset.depth != spec.depth:
        raise ValueError(f"depth mismatch: {path} is nested {dataset.depth} deep, model expects {spec.depth}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> Run:
    run = Run("synth", args.out)
    sizes = {"train": args.n_train, "valid": args.n_valid, "test": args.n_test}
    run.config = {
        "sizes": sizes,
        "noise_std": args.noise,
        "class_count": args.class_count,
        "cardinality": [args.min_card, args.max_card],
    }
    children = np.random.SeedSequence(args.seed).spawn(len(sizes))
    run.seeds = {"seed": args.seed}
    for (name, n), child in zip(sizes.items(), children):
        if n == 0:
            continue
        sub_seed = int(child.generate_state(1)[0])
        run.seeds[name] = sub_seed
        data, latent = bagdata.generate_seven_not_three(
            n, class_count=args.class_count, noise_std=args.noise, seed=sub_seed,
            cardinality=(args.min_card, args.max_card),
        )
        target = run.output(f"{name}.json")
        bagdata.save_dataset(data, target)
        bagdata.save_latent(latent, run.output(bagdata.latent_path_for(target).name))
        run.results[name] = bagdata.cardinality_summary(data)
    return run


def cmd_train(args) -> Run:
    run = Run("train", args.out)
    train_set = _load_data(run, args.data)
    valid_set = _load_data(run, args.valid) if args.valid else None
    test_set = _load_data(run, args.test) if args.test else None
    arch = _read_json(run.input(args.arch)) if args.arch else DEFAULT_ARCH
    init_seq, train_seq = np.random.SeedSequence(args.seed).spawn(2)
    init_seed, train_seed = (int(s.generate_state(1)[0]) for s in (init_seq, train_seq))
    config = TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size, max_epochs=args.epochs,
        early_stop_patience=args.patience, seed=train_seed,
    )
    run.config = {"arch": arch, "train": {k: v for k, v in config.to_dict().items() if k != "seed"}}
    run.seeds = {"seed": args.seed, "init": init_seed, "train": train_seed}
    spec = build_network(arch, train_set.feature_dim, train_set.num_classes, init_seed)
    if spec.depth != train_set.depth:
        raise ValueError(f"depth mismatch: architecture has {spec.depth} levels, data is nested {train_set.depth} deep")
    for ds, path in ((valid_set, args.valid), (test_set, args.test)):
        if ds is not None:
            _check_against_model(spec, ds, path)
    result = train(spec, train_set, valid_set, config)
    save_model(result.spec, run.output("model.json"))
    write_history(result.history, run.output("history.csv"))
    run.results = {"best_epoch": result.best_epoch, "stopped_epoch": result.stopped_epoch}
    if result.history:
        best = result.history[result.best_epoch - 1] if result.best_epoch else result.history[-1]
        run.results["valid_loss"] = best["valid_loss"]
    if test_set is not None:
        pred, _ = predict(result.spec, test_set)
        run.results["test_accuracy"] = accuracy(pred, test_set)
    return run


def cmd_predict(args) -> Run:
    run = Run("predict", args.out)
    spec = load_model(run.input(args.model))
    data = _load_data(run, args.data)
    _check_against_model(spec, data, args.data)
    pred, proba = predict(spec, data)
    with open(run.output("predictions.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "prediction"] + [f"p{c}" for c in range(proba.shape[1])])
        for ex, p, row in zip(data, pred, proba):
            writer.writerow([ex.id, int(p)] + [repr(float(v)) for v in row])
    run.results = {"accuracy": accuracy(pred, data), "n_examples": len(data)}
    return run


def cmd_eval(args) -> Run:
    run = Run("eval", args.out)
    spec = load_model(run.input(args.model))
    data = _load_data(run, args.data)
    _check_against_model(spec, data, args.data)
    bags, depth, _ = check_bags(data, depth=spec.depth, feature_dim=spec.input_dim)
    loss, acc, _ = evaluate(spec, bags, depth, data.labels)
    run.results = {"accuracy": acc, "loss": loss, "n_examples": len(data)}
    _write_json(run.output("metrics.json"), run.results)
    return run


def cmd_explain(args) -> Run:
    run = Run("explain", args.out)
    spec = load_model(run.input(args.model))
    train_set = _load_data(run, args.data)
    valid_set = _load_data(run, args.valid) if args.valid else train_set
    test_set = _load_data(run, args.test) if args.test else None
    for ds, path in ((train_set, args.data), (valid_set, args.valid), (test_set, args.test)):
        if ds is not None:
            _check_against_model(spec, ds, path)
    mode = args.feature_mode or pipeline.default_feature_mode(spec)
    run.config = {
        "k_max": args.kmax, "feature_mode": mode, "max_depth": args.max_depth,
        "min_leaf": args.min_leaf, "n_restarts": args.restarts,
    }
    run.seeds = {"seed": args.seed}
    best = pipeline.find_best_explainer(
        spec, train_set, valid_set, args.kmax, feature_mode=mode, max_depth=args.max_depth,
        min_leaf=args.min_leaf, seed=args.seed, n_restarts=args.restarts,
    )
    pipeline.save_explainer(best.e_inst, best.e_sub, run.output("explainer.json"))
    run.output("rules.txt").write_text(
        pipeline.rules_text(best.e_inst, best.e_sub, spec.num_classes), encoding="utf-8"
    )
    pipeline.write_grid(best.grid, run.output("grid.csv"))
    results = {"k_inst": best.k_inst, "k_sub": best.k_sub, "valid_fidelity": best.fidelity}
    if test_set is not None:
        reps = pipeline.intermediate_representations(spec, test_set)
        surrogate, _ = pipeline.surrogate_predict(best.e_inst, best.e_sub, reps)
        results["test_fidelity"] = float(np.mean(surrogate == reps.predictions))
        results["test_surrogate_accuracy"] = accuracy(surrogate, test_set)
        results["test_network_accuracy"] = accuracy(reps.predictions, test_set)
    _write_json(run.output("fidelity.json"), results)
    run.results = results
    return run


def _select_examples(data, ids, indices):
    if ids:
        by_id = {ex.id: i for i, ex in enumerate(data)}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise KeyError(f"unknown example id(s): {', '.join(missing)}")
        return [by_id[i] for i in ids]
    if indices:
        bad = [i for i in indices if not 0 <= i < len(data)]
        if bad:
            raise IndexError(f"example index out of range: {bad[0]} (dataset has {len(data)})")
        return list(indices)
    return list(range(len(data)))


def cmd_trace(args) -> Run:
    run = Run("trace", args.out)
    spec = load_model(run.input(args.model))
    e_inst, e_sub = pipeline.load_explainer(run.input(args.explainer))
    data = _load_data(run, args.data)
    _check_against_model(spec, data, args.data)
    surrogate = pipeline.SurrogateModel(spec, e_inst, e_sub)
    chosen = _select_examples(data, args.id, args.index)
    traces = []
    for i in chosen:
        record = pipeline.trace_prediction(data[i], surrogate)
        record = {"id": data[i].id, "label": int(data[i].label), **record}
        traces.append(record)
    run.config = {"ids": args.id, "indices": args.index}
    _write_json(run.output("trace.json"), traces)
    run.results = {"n_traced": len(traces)}
    return run


def cmd_graph_decompose(args) -> Run:
    run = Run("graph-decompose", args.out)
    run.config = {"task": args.task, "degree_variant": args.degree_variant, "fractions": args.fractions}
    if args.task == "graph":
        if not args.graph_index or not args.labels:
            raise ValueError("graph task needs --graph-index and --labels")
        graphs = graphadapt.load_graph_collection(
            run.input(args.edges), run.input(args.graph_index), run.input(args.labels)
        )
        data = graphadapt.graph_to_mmil(graphs, args.degree_variant)
        bagdata.save_dataset(data, run.output("data.json"))
        run.results = {"n_graphs": len(graphs), "max_degree": graphadapt.max_degree(graphs)}
        return run
    graph = graphadapt.load_graph(
        run.input(args.edges), run.input(args.features), run.input(args.texts),
        run.input(args.labels), run.input(args.years),
    )
    labelled = [v for v in graph.nodes if v in graph.labels]
    convert = graphadapt.node_to_mil if args.flat else graphadapt.node_to_mmil
    if graph.years:
        split = graphadapt.temporal_split({v: graph.years[v] for v in labelled}, tuple(args.fractions))
        vocab = None
        if graphadapt.has_token_features(graph):
            vocab = graphadapt.build_vocabulary(graph, split["train"])
            graphadapt.save_vocabulary(vocab, run.output("vocabulary.json"))
        num_classes = max(2, max(graph.labels.values()) + 1)
        for name in ("train", "valid", "test"):
            data = convert(graph, split[name], vocab, num_classes)
            bagdata.save_dataset(data, run.output(f"{name}.json"))
        run.results = {"yr1": split["yr1"], "yr2": split["yr2"],
                       **{f"n_{k}": len(split[k]) for k in ("train", "valid", "test")}}
    else:
        data = convert(graph, labelled)
        bagdata.save_dataset(data, run.output("data.json"))
        run.results = {"n_examples": len(data)}
    return run


def cmd_rank_eval(args) -> Run:
    run = Run("rank-eval", args.out)
    truth = metrics.read_matrix(run.input(args.truth))
    scores = metrics.read_matrix(run.input(args.scores))
    run.config = {"map_variant": args.map_variant}
    if args.masked:
        masked = metrics.read_matrix(run.input(args.masked))
    else:
        masked, skipped = metrics.mask_matrix(truth, args.percent, args.seed)
        metrics.write_matrix(masked, run.output("masked.csv"))
        run.config["percent"] = args.percent
        run.seeds = {"seed": args.seed}
        run.results["skipped_columns"] = skipped
    rows, mean = metrics.evaluate_matrix(scores, truth, masked, args.map_variant)
    metrics.write_report(rows, run.output("report.csv"))
    run.results.update({"mAP": mean, "n_regions": sum(r.score is not None for r in rows)})
    return run


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmil", description="Multi-multi-instance learning networks and rule explanations.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = command("synth", cmd_synth, "generate the seven-not-three benchmark")
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-valid", type=int, default=500)
    p.add_argument("--n-test", type=int, default=5000)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--class-count", type=int, default=10)
    p.add_argument("--min-card", type=int, default=2)
    p.add_argument("--max-card", type=int, default=6)

    p = command("train", cmd_train, "train a bag network")
    p.add_argument("--data", required=True)
    p.add_argument("--valid")
    p.add_argument("--test")
    p.add_argument("--arch", help="architecture JSON (default: two max bag-layers of width 64)")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=20)
    p.add_argument("--patience", type=int, default=10)

    for name, func, text in (("predict", cmd_predict, "predict labels with a saved model"),
                             ("eval", cmd_eval, "report loss and accuracy of a saved model")):
        p = command(name, func, text)
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)

    p = command("explain", cmd_explain, "fit the rule surrogate of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="examples the clusters and trees are fit on")
    p.add_argument("--valid", help="examples that select the cluster counts (default: --data)")
    p.add_argument("--test")
    p.add_argument("--kmax", type=int, default=8)
    p.add_argument("--feature-mode", choices=("frequency", "occurrence"))
    p.add_argument("--max-depth", type=int, default=6)
    p.add_argument("--min-leaf", type=int, default=5)
    p.add_argument("--restarts", type=int, default=10)

    p = command("trace", cmd_trace, "explain individual predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--explainer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--id", action="append", default=[], help="example id (repeatable)")
    p.add_argument("--index", type=int, action="append", default=[], help="example position (repeatable)")

    p = command("graph-decompose", cmd_graph_decompose, "turn a graph problem into a bag dataset")
    p.add_argument("--task", choices=("node", "graph"), default="node")
    p.add_argument("--edges", required=True, help="CSV of node pairs")
    p.add_argument("--features", help="CSV: node, x1, x2, ...")
    p.add_argument("--texts", help="JSON: node -> list of tokens")
    p.add_argument("--labels", help="CSV: node,label (node task) or graph,label (graph task)")
    p.add_argument("--years", help="CSV: node,year; enables the temporal split")
    p.add_argument("--graph-index", help="CSV: node,graph (graph task)")
    p.add_argument("--degree-variant", choices=("strict", "inclusive"), default="strict")
    p.add_argument("--fractions", type=float, nargs=3, default=[0.4, 0.2, 0.4])
    p.add_argument("--flat", action="store_true", help="emit flat bags instead of top-bags")

    p = command("rank-eval", cmd_rank_eval, "score rankings of deleted matrix entries")
    p.add_argument("--truth", required=True, help="CSV 0/1 matrix, regions by items")
    p.add_argument("--scores", required=True, help="CSV score matrix of the same shape")
    p.add_argument("--masked", help="CSV masked matrix (default: mask --truth with --percent)")
    p.add_argument("--percent", type=float, default=10.0)
    p.add_argument("--map-variant", choices=metrics.MAP_VARIANTS, default="literal")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        print(f"error: {exc}".replace("\n", " "), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    try:
        args.func(args).finish()
    except Exception as exc:  # noqa: BLE001 - every failure becomes one stderr line
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
