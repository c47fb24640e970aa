"""Command-line entry point: ``lutgen <subcommand> ...``.

Exit codes: 0 success, 2 input error (bad arguments, missing files, invalid
configuration), 3 format error (malformed file content), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fileio
from .config import dump_config, load_config
from .curation import TASKS, DatasetTuple, build_fuse_library, build_split_pairs
from .errors import FormatError, InputError, NumericError, RewardUnavailableError
from .fileio import ManifestEntry, TokenRecord
from .grpo import GrpoConfig, LutReward, train_grpo
from .lut import apply_lut, resample_lut
from .metrics import metric_report
from .policy import PolicyConfig, PolicyModel, build_examples, condition_schema, materialize, train_nll
from .synthetic import synthetic_images, synthetic_luts
from .tokenizer import DESK_CONFIG, RESOLUTION, TokenizerConfig, TokenizerModel, evaluate_tokenizer, train_tokenizer

EXIT_OK, EXIT_INPUT, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"no such file: {p}")
    return p


def _load_lut(path):
    lut = fileio.load_cube(_require(path))
    return lut if lut.size == RESOLUTION else resample_lut(lut, RESOLUTION)


def _load_luts(manifest) -> dict:
    return {e.id: _load_lut(e.path) for e in fileio.read_manifest(_require(manifest))}


def _load_images(manifest) -> dict:
    return {k: fileio.read_image(_require(p)) for k, p in fileio.read_image_manifest(_require(manifest)).items()}


def _load_tuples(path) -> list[DatasetTuple]:
    return [DatasetTuple.from_dict(row) for row in fileio.read_jsonl(_require(path))]


def _fixture_images():
    return synthetic_images(16, seed=5, height=32, width=32)


# -- subcommands ------------------------------------------------------------------


def cmd_apply(args) -> int:
    lut = _load_lut(args.lut)
    img = fileio.read_image(_require(args.image))
    out = apply_lut(lut, img)
    fileio.write_image(out, args.out)
    if args.gt:
        _emit(metric_report(out, fileio.read_image(_require(args.gt))))
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    (out / "luts").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, lut in enumerate(synthetic_luts(args.luts, seed=args.seed, n=RESOLUTION)):
        name = f"lut{i:04d}"
        fileio.save_cube(lut, out / "luts" / f"{name}.cube", title=name)
        entries.append(ManifestEntry(name, f"luts/{name}.cube", "filter"))
    fileio.write_manifest(entries, out / "luts.jsonl")
    rows = []
    for i, img in enumerate(synthetic_images(args.images, seed=args.seed + 1, height=args.size, width=args.size)):
        name = f"img{i:04d}"
        fileio.write_image(img, out / "images" / f"{name}.png")
        rows.append({"id": name, "path": f"images/{name}.png"})
    fileio.write_jsonl(rows, out / "images.jsonl")
    _emit({"luts": len(entries), "images": len(rows), "out": str(out)})
    return EXIT_OK


def cmd_train_tokenizer(args) -> int:
    config = load_config(TokenizerConfig, args.config, base=DESK_CONFIG)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    luts = list(_load_luts(args.manifest).values())
    model, log = train_tokenizer(luts, config)
    model.save(args.out)
    if args.log:
        fileio.write_jsonl(log, args.log)
    _emit({"epochs": len(log), "final": log[-1] if log else None, "parameters": model.parameter_count()})
    return EXIT_OK


def cmd_tokenize(args) -> int:
    model = TokenizerModel.load(_require(args.checkpoint))
    records, report = [], []
    images = _fixture_images()
    for path in args.luts:
        lut = _load_lut(path)
        tokens = model.tokenize(lut)
        records.append(TokenRecord(Path(path).stem, model.codebook.hash(), tuple(int(t) for t in tokens)))
        ev = evaluate_tokenizer(model, [lut], images)
        report.append({"id": Path(path).stem, "tokens": int(len(tokens)), "psnr": ev["psnr"], "delta_e": ev["delta_e"]})
    with open(args.out, "w", encoding="utf-8") as fh:
        fileio.write_tokens(records, fh, k=model.codebook.size)
    for row in report:
        _emit(row)
    return EXIT_OK


def cmd_detokenize(args) -> int:
    model = TokenizerModel.load(_require(args.checkpoint))
    with open(_require(args.tokens), "r", encoding="utf-8") as fh:
        records = fileio.read_tokens(fh, k=model.codebook.size, expected_hash=model.codebook.hash())
    out = Path(args.out)
    if len(records) == 1 and out.suffix == ".cube":
        targets = [out]
    else:
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / f"{r.lut_id}.cube" for r in records]
    for rec, target in zip(records, targets):
        fileio.save_cube(model.decode(np.array(rec.tokens)), target, title=rec.lut_id)
    _emit({"written": [str(t) for t in targets]})
    return EXIT_OK


def cmd_cluster(args) -> int:
    entries = fileio.read_manifest(_require(args.manifest))
    luts = [_load_lut(e.path) for e in entries]
    pca, lib = build_fuse_library(luts, [e.id for e in entries], k=args.k, p=args.p, seed=args.seed)
    by_id = {e.id: e for e in entries}
    # paths relative to the output manifest, so the file does not depend on
    # where the workspace lives
    base = Path(args.out).resolve().parent
    rel = {i: os.path.relpath(Path(e.path).resolve(), base) for i, e in by_id.items()}
    fileio.write_manifest([ManifestEntry(i, rel[i], "fuse") for i in lib.representatives], args.out)
    if args.pca_out:
        pca.save(args.pca_out)
    if args.assignment:
        Path(args.assignment).write_text(json.dumps(lib.assignment, sort_keys=True) + "\n", encoding="utf-8")
    _emit({"k": len(lib.representatives), "inertia": lib.inertia, "iterations": len(lib.inertia_history)})
    return EXIT_OK


def cmd_build_pairs(args) -> int:
    image_paths = fileio.read_image_manifest(_require(args.images))
    lut_entries = fileio.read_manifest(_require(args.luts))
    images = luts = None
    if args.task == "instruct":
        images = {k: fileio.read_image(p) for k, p in image_paths.items()}
        luts = {e.id: _load_lut(e.path) for e in lut_entries}
    train, evals = build_split_pairs(
        args.task, list(image_paths), [e.id for e in lut_entries], args.count, args.eval_count,
        seed=args.seed, images=images, luts=luts,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_jsonl((t.to_dict() for t in train), out / f"{args.task}_train.jsonl")
    fileio.write_jsonl((t.to_dict() for t in evals), out / f"{args.task}_eval.jsonl")
    _emit({"train": len(train), "eval": len(evals)})
    return EXIT_OK


def _check_vocab(policy_vocab: int, tokenizer) -> None:
    if policy_vocab != tokenizer.codebook.size:
        raise InputError(f"policy vocabulary {policy_vocab} != tokenizer codebook size {tokenizer.codebook.size}")


def _prompts(args):
    images, luts = _load_images(args.images), _load_luts(args.luts)
    tuples = [t for path in args.pairs for t in _load_tuples(path)]
    return [materialize(t, images, luts, i) for i, t in enumerate(tuples)], luts


def cmd_train_policy(args) -> int:
    config = load_config(PolicyConfig, args.config, base=PolicyConfig())
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.steps is not None:
        config = replace(config, steps=args.steps)
    tokenizer = TokenizerModel.load(_require(args.tokenizer))
    _check_vocab(config.vocab, tokenizer)
    prompts, luts = _prompts(args)
    used = sorted({p.lut_id for p in prompts})
    lut_tokens = dict(zip(used, tokenizer.tokenize([luts[i] for i in used]))) if used else {}
    policy = PolicyModel(config)
    policy, log = train_nll(policy, build_examples(prompts, lut_tokens), config)
    policy.save(args.out)
    Path(str(args.out) + ".schema.json").write_text(json.dumps(condition_schema(), indent=1, sort_keys=True) + "\n")
    if args.log:
        fileio.write_jsonl(log, args.log)
    _emit({"steps": len(log), "first_nll": log[0]["nll"] if log else None, "final_nll": log[-1]["nll"] if log else None})
    return EXIT_OK


def cmd_grpo(args) -> int:
    config = load_config(GrpoConfig, args.config, base=GrpoConfig())
    updates = {k: v for k, v in (("seed", args.seed), ("steps", args.steps), ("group_size", args.group_size)) if v is not None}
    config = replace(config, **updates)
    bad = config.validate()
    if bad:
        raise InputError("; ".join(bad))
    tokenizer = TokenizerModel.load(_require(args.tokenizer))
    ref = PolicyModel.load(_require(args.policy))
    _check_vocab(ref.config.vocab, tokenizer)
    policy = ref.copy()
    prompts, _ = _prompts(args)
    reward = LutReward(tokenizer, color_weight=config.color_weight, aesthetic_weight=config.aesthetic_weight)
    policy, log = train_grpo(policy, ref, prompts, config, reward, log_path=args.log, checkpoint_path=args.out)
    n = max(1, min(20, len(log) // 2))
    _emit({
        "steps": len(log),
        "initial_reward": float(np.mean([r["mean_reward"] for r in log[:n]])) if log else None,
        "final_reward": float(np.mean([r["mean_reward"] for r in log[-n:]])) if log else None,
    })
    return EXIT_OK


def _format_table(rows: list[tuple[str, dict]]) -> str:
    lines = [f"{'split':<12}{'n':>5}{'Aes.':>8}{'PSNR':>8}{'dE':>8}{'LPIPS':>8}"]
    for name, agg in rows:
        lines.append(
            f"{name:<12}{agg['n']:>5}{agg['aesthetic_reward']:>8.2f}{agg['psnr_db']:>8.2f}"
            f"{agg['mean_delta_e']:>8.2f}{'n/a':>8}"
        )
    return "\n".join(lines)


def _aggregate(samples: list[dict]) -> dict:
    keys = ("aesthetic_reward", "psnr_db", "mean_delta_e", "color_reward")
    out = {k: float(np.mean([s[k] for s in samples])) for k in keys}
    out["n"] = len(samples)
    out["lpips"] = None
    return out


def cmd_eval(args) -> int:
    tokenizer = TokenizerModel.load(_require(args.tokenizer))
    if bool(args.oracle) == bool(args.policy):
        raise InputError("eval needs exactly one of --policy and --oracle")
    policy = None if args.oracle else PolicyModel.load(_require(args.policy))
    if policy is not None:
        _check_vocab(policy.config.vocab, tokenizer)
    prompts, luts = _prompts(args)
    samples = []
    for pr in prompts:
        if policy is None:
            tokens = tokenizer.tokenize(luts[pr.lut_id])
        else:
            tokens = policy.greedy(pr.condition)
        pred = apply_lut(tokenizer.decode(tokens), pr.query)
        row = metric_report(pred, pr.target)
        row.update({"id": pr.id, "task": pr.task, "lut_id": pr.lut_id})
        samples.append(row)
    if not samples:
        raise InputError("no tuples to evaluate")
    aggregate = {"all": _aggregate(samples)}
    for task in TASKS:
        subset = [s for s in samples if s["task"] == task]
        if subset:
            aggregate[task] = _aggregate(subset)
    Path(args.out).write_text(json.dumps({"aggregate": aggregate, "samples": samples}, sort_keys=True, indent=1) + "\n")
    print(_format_table(sorted(aggregate.items())))
    return EXIT_OK


def cmd_show_config(args) -> int:
    cls = {"tokenizer": TokenizerConfig, "policy": PolicyConfig, "grpo": GrpoConfig}[args.kind]
    base = {"tokenizer": DESK_CONFIG, "policy": PolicyConfig(), "grpo": GrpoConfig()}[args.kind]
    sys.stdout.write(dump_config(load_config(cls, args.config, base=base)))
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lutgen", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        return p

    p = add("apply", cmd_apply, "grade an image with a .cube LUT")
    p.add_argument("lut")
    p.add_argument("image")
    p.add_argument("--out", required=True)
    p.add_argument("--gt", help="ground-truth image; prints a metric report")

    p = add("synth", cmd_synth, "write a procedural LUT and image corpus with manifests")
    p.add_argument("--luts", type=int, default=64)
    p.add_argument("--images", type=int, default=32)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("train-tokenizer", cmd_train_tokenizer, "train the LUT tokenizer")
    p.add_argument("manifest")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--log")

    p = add("tokenize", cmd_tokenize, "LUT files -> token records")
    p.add_argument("checkpoint")
    p.add_argument("luts", nargs="+")
    p.add_argument("--out", required=True)

    p = add("detokenize", cmd_detokenize, "token records -> .cube files")
    p.add_argument("checkpoint")
    p.add_argument("tokens")
    p.add_argument("--out", required=True)

    p = add("cluster", cmd_cluster, "PCA + k-means fusion of a LUT library")
    p.add_argument("manifest")
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--p", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--pca-out")
    p.add_argument("--assignment")

    p = add("build-pairs", cmd_build_pairs, "sample disjoint train/eval tuples")
    p.add_argument("--images", required=True)
    p.add_argument("--luts", required=True)
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--eval-count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    for name, func, help_ in (
        ("train-policy", cmd_train_policy, "likelihood training of the token policy"),
        ("grpo", cmd_grpo, "group-relative policy optimization from a trained policy"),
        ("eval", cmd_eval, "score greedy policy outputs on a tuple list"),
    ):
        p = add(name, func, help_)
        p.add_argument("--tokenizer", required=True)
        p.add_argument("--pairs", required=True, nargs="+")
        p.add_argument("--images", required=True)
        p.add_argument("--luts", required=True)
        p.add_argument("--out", required=True)
        if name != "eval":
            p.add_argument("--config")
            p.add_argument("--seed", type=int)
            p.add_argument("--steps", type=int)
            p.add_argument("--log")
        if name == "train-policy":
            continue
        p.add_argument("--policy", required=(name == "grpo"))
        if name == "grpo":
            p.add_argument("--group-size", type=int)
        else:
            p.add_argument("--oracle", action="store_true", help="use the ground-truth LUT's tokens")

    p = add("show-config", cmd_show_config, "print the effective configuration")
    p.add_argument("kind", choices=("tokenizer", "policy", "grpo"))
    p.add_argument("--config")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (NumericError, RewardUnavailableError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
