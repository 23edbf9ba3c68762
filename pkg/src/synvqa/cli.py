"""Command line front end.

Subcommands: synth, build-hypergraph, align, train, eval, gradcheck,
inspect. Usage errors exit 2, data errors exit 1, success exits 0.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .deptree import ParseError, parse_conllu, to_conllu
from .hypergraph import build_hypergraph, hypergraph_to_dict, incidence_csv
from .numcore import finite_diff_check, tensor
from .otalign import ProjectionParams, SolverError, cost_matrix, ipot
from .pipeline import (
    DataError,
    FEATURE_MAGIC,
    SEED_ENV_VAR,
    SyntheticSpec,
    TrainAbort,
    TrainConfig,
    batch_loss,
    evaluate,
    init_model,
    load_config,
    load_dataset,
    load_model,
    read_embeddings,
    read_features,
    save_model,
    synth_generate,
    train,
    write_embeddings,
    write_features,
)

_KINDS = {"int": int, "float": float, "str": str, "bool": bool}


def _flag_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {raw!r}")


def _add_field_flags(parser: argparse.ArgumentParser, dc: type) -> list[str]:
    """One flag per dataclass field so every config key is reachable."""
    names = []
    for f in dataclasses.fields(dc):
        kind = _KINDS[str(f.type)]
        parser.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f.name,
            type=_flag_bool if kind is bool else kind,
            default=None,
            help=f"override {f.name} (default {f.default!r})",
        )
        names.append(f.name)
    return names


def _env_seed(fallback: int) -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise DataError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None


# -- synth --------------------------------------------------------------------


def _write_example_files(out: Path, ex, answers: list[str]) -> dict:
    rel = f"examples/{ex.id}"
    row: dict = {"id": ex.id, "embeddings": "embeddings.txt", "task": ex.task}
    write_features(out / f"{rel}.frames.bin", ex.F)
    row["frames"] = f"{rel}.frames.bin"
    write_features(out / f"{rel}.clips.bin", ex.M)
    row["clips"] = f"{rel}.clips.bin"
    if ex.task == "multiple_choice":
        paths = []
        for j, (t, _) in enumerate(ex.candidates):
            cand = f"{rel}.cand{j}.conllu"
            (out / cand).write_text(to_conllu(t), encoding="utf-8")
            paths.append(cand)
        row["candidates"] = paths
        row["truth_index"] = ex.truth_index
        return row
    (out / f"{rel}.conllu").write_text(to_conllu(ex.tree), encoding="utf-8")
    row["conllu"] = f"{rel}.conllu"
    if ex.task == "count":
        row["target"] = ex.target
    else:
        # answer as a token resolved through the shared answers file
        row["target"] = answers[ex.target]
        row["answers"] = "answers.txt"
    return row


def _cmd_synth(args) -> int:
    kwargs = {
        n: getattr(args, n)
        for n in args._spec_fields
        if getattr(args, n) is not None
    }
    spec = SyntheticSpec(**kwargs)
    seed = _env_seed(args.seed)
    data = synth_generate(spec, seed)
    out = Path(args.out)
    (out / "examples").mkdir(parents=True, exist_ok=True)
    write_embeddings(out / "embeddings.txt", data.embeddings)
    (out / "answers.txt").write_text(" ".join(data.answers) + "\n", encoding="utf-8")
    for split, examples in (("train", data.train), ("test", data.test)):
        rows = [
            json.dumps(_write_example_files(out, ex, data.answers))
            for ex in examples
        ]
        (out / f"{split}.jsonl").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(
        json.dumps(
            {
                "out": str(out),
                "seed": seed,
                "train": len(data.train),
                "test": len(data.test),
                "task": spec.task,
            }
        )
    )
    return 0


# -- hypergraph export --------------------------------------------------------


def _one_tree(path: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    trees = parse_conllu(text)
    if len(trees) != 1:
        raise DataError(f"{path}: expected one sentence, found {len(trees)}")
    return trees[0]


def _cmd_build_hypergraph(args) -> int:
    tree = _one_tree(args.conllu)
    graph = build_hypergraph(tree)
    payload = hypergraph_to_dict(graph)
    payload["forms"] = list(tree.forms())
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(incidence_csv(graph), encoding="utf-8")
    print(json.dumps({"nodes": graph.n_nodes, "edges": graph.n_edges}))
    return 0


# -- alignment export ---------------------------------------------------------


def _cmd_align(args) -> int:
    X = read_features(args.text)
    F = read_features(args.frames)
    if X.shape[1] != F.shape[1]:
        raise DataError(
            f"width mismatch: text {X.shape[1]} vs frames {F.shape[1]} "
            "(align uses identity projections, so widths must agree)"
        )
    eye = np.eye(X.shape[1])
    proj = ProjectionParams(T_x=tensor(eye), T_f=tensor(eye.copy()))
    plan = ipot(cost_matrix(X, F, proj), iters=args.iters).data
    lines = [",".join(f"{v:.17g}" for v in row) for row in plan]
    Path(args.out_csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if args.out_json:
        Path(args.out_json).write_text(
            json.dumps(
                {"rows": plan.shape[0], "cols": plan.shape[1], "plan": plan.tolist()}
            )
            + "\n",
            encoding="utf-8",
        )
    print(
        json.dumps(
            {
                "rows": plan.shape[0],
                "cols": plan.shape[1],
                "iters": args.iters,
                "mass": float(plan.sum()),
            }
        )
    )
    return 0


# -- training / evaluation ----------------------------------------------------


def _cmd_train(args) -> int:
    overrides = {n: getattr(args, n) for n in args._cfg_fields}
    cfg = load_config(args.config, overrides)
    dataset = load_dataset(args.manifest)
    eval_dataset = load_dataset(args.eval_manifest) if args.eval_manifest else None
    model, cfg, log = train(cfg, dataset, eval_dataset=eval_dataset)
    for line in log:
        print(line)
    if args.out:
        save_model(args.out, model, cfg)
    return 0


def _cmd_eval(args) -> int:
    model, cfg = load_model(args.model)
    dataset = load_dataset(args.manifest)
    print(json.dumps(evaluate(model, cfg, dataset), sort_keys=True))
    return 0


# -- gradient check -----------------------------------------------------------


def _cmd_gradcheck(args) -> int:
    dims = args.dims
    if dims < 1:
        raise DataError("dims must be >= 1")
    seed = _env_seed(args.seed)
    spec = SyntheticSpec(
        vocab_size=12,
        d_w=dims,
        d_v=max(dims, 12),
        n_frames=8,
        arity=2,
        noise=0.05,
        n_train=2,
        n_test=1,
    )
    data = synth_generate(spec, seed)
    cfg = TrainConfig(
        d_w=dims,
        d_v=max(dims, 12),
        d=dims,
        d_o=dims,
        l=1,
        ot_iters=3,
        seed=seed,
        task="open_ended",
        n_answers=spec.n_answers,
    )
    model = init_model(cfg)
    params = model.named()
    err = finite_diff_check(lambda: batch_loss(model, cfg, data.train), params)
    ok = bool(err <= args.tol)
    print(
        json.dumps(
            {
                "dims": dims,
                "seed": seed,
                "params": int(sum(p.data.size for p in params.values())),
                "max_rel_err": err,
                "tol": args.tol,
                "ok": ok,
            }
        )
    )
    return 0 if ok else 1


# -- artifact inspection ------------------------------------------------------


def _inspect_payload(path: Path) -> dict:
    try:
        head = path.open("rb").read(4)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if head == FEATURE_MAGIC:
        arr = read_features(path)
        return {
            "kind": "features",
            "rows": arr.shape[0],
            "cols": arr.shape[1],
            "min": float(arr.min()),
            "max": float(arr.max()),
            "mean": float(arr.mean()),
        }
    if head[:2] == b"PK":
        model, cfg = load_model(path)
        return {
            "kind": "model",
            "config": dataclasses.asdict(cfg),
            "params": {k: list(t.shape) for k, t in sorted(model.named().items())},
        }
    if path.suffix == ".jsonl":
        dataset = load_dataset(path)
        return {
            "kind": "manifest",
            "examples": len(dataset),
            "tasks": sorted({ex.task for ex in dataset}),
        }
    if path.suffix == ".conllu":
        trees = parse_conllu(path.read_text(encoding="utf-8"))
        return {
            "kind": "parses",
            "sentences": len(trees),
            "forms": [list(t.forms()) for t in trees],
        }
    table = read_embeddings(path)
    width = len(next(iter(table.values()))) if table else 0
    return {"kind": "embeddings", "tokens": len(table), "width": width}


def _cmd_inspect(args) -> int:
    payload = _inspect_payload(Path(args.path))
    payload["path"] = args.path
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


# -- parser wiring -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synvqa",
        description="Syntax-aware video QA over precomputed features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth, _spec_fields=_add_field_flags(p, SyntheticSpec))

    p = sub.add_parser("build-hypergraph", help="export a parse's hypergraph")
    p.add_argument("--conllu", required=True)
    p.add_argument("--out", required=True, help="JSON output path")
    p.add_argument("--csv", help="optional incidence matrix CSV")
    p.set_defaults(func=_cmd_build_hypergraph)

    p = sub.add_parser(
        "align", help="transport plan between two feature containers"
    )
    p.add_argument("--text", required=True, help="N_s x d feature container")
    p.add_argument("--frames", required=True, help="N_f x d feature container")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-json")
    p.add_argument("--iters", type=int, default=10)
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("train", help="train a model from a JSONL manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--eval-manifest", help="metrics dataset for the epoch log")
    p.add_argument("--out", help="save the trained model here (.npz)")
    p.set_defaults(func=_cmd_train, _cfg_fields=_add_field_flags(p, TrainConfig))

    p = sub.add_parser("eval", help="evaluate a saved model on a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check end to end")
    p.add_argument("--dims", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("inspect", help="describe an artifact file as JSON")
    p.add_argument("path")
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DataError, ParseError, SolverError, TrainAbort, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
