"""Command line front end: dataset generation, training, prompt-driven
editing, metric sweeps, and SVG rendering behind one executable.

Exit codes: 0 success, 1 usage, 2 IO or malformed data, 3 training
divergence, 4 part extraction failure.
"""

from __future__ import annotations

import argparse
import sys
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from .blend import BlendConfig, blended_edit
from .diffusion import (
    TrainConfig,
    TrainSet,
    load_checkpoint,
    make_schedule,
    save_checkpoint,
    train,
)
from .errors import (
    BadStepError,
    CloudEditError,
    DegenerateCloudError,
    DivergedError,
    EmptyCloudError,
    EmptyRegionError,
    FormatError,
    InvalidEditError,
    InvalidParamsError,
    LengthMismatchError,
    ShapeMismatchError,
    TokenizeError,
    TooFewPointsError,
    TooFewSamplesError,
    UnknownCategoryError,
    UnknownTokenError,
)
from .figures import cloud_svg, report_chart, sweep_chart
from .geometry import PCB1_MAGIC, check_mask, load_pcb1, save_pcb1
from .metrics import (
    EvalConfig,
    MetricReport,
    classifier_corpus,
    evaluate,
    load_classifier,
    train_classifier,
    write_report,
)
from .prompts import UNKNOWN, extract_part, tokenize
from .synthgen import (
    PART_LABELS,
    DatasetConfig,
    build_dataset,
    category_of_labels,
    load_triplet,
    read_manifest,
)

_USAGE_ERRORS = (
    BadStepError,
    InvalidEditError,
    InvalidParamsError,
    TokenizeError,
    UnknownCategoryError,
    UnknownTokenError,
)
_IO_ERRORS = (
    OSError,
    DegenerateCloudError,
    EmptyCloudError,
    EmptyRegionError,
    FormatError,
    LengthMismatchError,
    ShapeMismatchError,
    TooFewPointsError,
    TooFewSamplesError,
)


class _ExtractFailure(Exception):
    """Prompt did not resolve to a usable part mask; edit must fail closed."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # noqa: A003 - argparse hook
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _fail(message: str, code: int) -> int:
    sys.stderr.write(f"error: {message}\n")
    return code


# ----------------------------------------------------------------- gen-data


def _cmd_gen_data(args: argparse.Namespace) -> int:
    categories = tuple(c for c in args.categories.split(",") if c)
    config = DatasetConfig(
        out_dir=args.out,
        n=args.n,
        categories=categories,
        points=args.points,
        split=args.split,
        seed=args.seed,
    )
    manifest = build_dataset(config)
    counts = Counter(
        (r["category"], r["split"]) for r in read_manifest(manifest)
    )
    for category, split in sorted(counts):
        print(f"{category}\t{split}\t{counts[(category, split)]}")
    print(f"manifest\t{manifest}")
    return 0


# -------------------------------------------------------------------- train


def _train_set(manifest: str | Path) -> TrainSet:
    records = [r for r in read_manifest(manifest) if r["split"] == "train"]
    if not records:
        raise TooFewSamplesError(f"no train records in {manifest}")
    root = Path(manifest).parent
    return TrainSet.from_triplets([load_triplet(r, root) for r in records])


def _cmd_train(args: argparse.Namespace) -> int:
    dataset = _train_set(args.data)
    config = TrainConfig(
        steps=args.steps,
        batch=args.batch,
        lr=args.lr,
        p_text=args.p_text,
        p_recon=args.p_recon,
        seed=args.seed,
    )
    den, curve = train(dataset, config, schedule=make_schedule(args.t))
    for step, loss in curve:
        print(f"{step}\t{loss:.9g}")
    save_checkpoint(args.out, den, step=args.steps)
    print(f"checkpoint\t{args.out}")
    return 0


# --------------------------------------------------------------------- edit


def _read_mask_file(path: str | Path, k: int) -> np.ndarray:
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                values.append(int(line))
    return check_mask(np.array(values, dtype=bool), k)


def _resolve_mask(args: argparse.Namespace, cloud, prompt_ids) -> tuple[np.ndarray, str]:
    if args.mask is not None:
        return _read_mask_file(args.mask, cloud.k), "(mask file)"
    if cloud.labels is None:
        raise _ExtractFailure("input has no part labels; pass --mask")
    try:
        category = category_of_labels(cloud.labels)
    except UnknownCategoryError as exc:
        raise _ExtractFailure(str(exc)) from exc
    part = extract_part(prompt_ids, category)
    if part == UNKNOWN:
        raise _ExtractFailure(
            f"prompt names no {category} part; pass --mask to edit anyway"
        )
    label = PART_LABELS.get(part)
    if label is None:
        raise _ExtractFailure(f"part {part!r} has no label in this corpus")
    mask = cloud.labels == label
    if not mask.any():
        raise _ExtractFailure(f"part {part!r} absent from the input cloud")
    return mask, part


def _cmd_edit(args: argparse.Namespace) -> int:
    den, _ = load_checkpoint(args.model)
    cloud, _ = load_pcb1(args.input)
    prompt_ids = tokenize(args.prompt)
    mask, part = _resolve_mask(args, cloud, prompt_ids)
    config = BlendConfig(
        T=args.t, t_r=args.tr, sampler=args.sampler, seed=args.seed
    )
    edited = blended_edit(cloud, mask, prompt_ids, den, config)
    save_pcb1(args.out, edited, mask=mask)
    print(f"part\t{part}")
    print(f"mask\t{int(mask.sum())}")
    return 0


# ------------------------------------------------------------- eval, ablate


def _value_tag(param: str, value) -> str:
    if param == "repaint":
        return f"{value[0]}x{value[1]}"
    if param == "recon-pct":
        return str(int(value)) if float(value).is_integer() else str(value)
    return str(value)


def _parse_values(param: str, text: str) -> list:
    tokens = [v for v in text.split(",") if v]
    if not tokens:
        raise InvalidParamsError("--values must list at least one value")
    try:
        if param == "tr":
            return [int(v) for v in tokens]
        if param == "recon-pct":
            return [float(v) for v in tokens]
        pairs = []
        for token in tokens:
            r, sep, j = token.partition("x")
            if not sep:
                raise ValueError(token)
            pairs.append((int(r), int(j)))
        return pairs
    except ValueError as exc:
        raise InvalidParamsError(
            f"bad --values entry for {param}: {exc}"
        ) from exc


def _retrain(args: argparse.Namespace, path: Path, p_recon: float) -> None:
    dataset = _train_set(args.data)
    config = TrainConfig(
        steps=args.steps, p_recon=p_recon, seed=args.seed
    )
    den, _ = train(dataset, config, schedule=make_schedule(args.t))
    save_checkpoint(path, den, step=args.steps)


def _eval_config(args: argparse.Namespace, **overrides) -> EvalConfig:
    base = dict(
        t_r=args.tr,
        steps=args.t,
        sampler=args.sampler,
        seed=args.seed,
        batch=args.batch,
        split=args.split,
        limit=args.limit,
    )
    base.update(overrides)
    return EvalConfig(**base)


def _sweep(args: argparse.Namespace, param: str, values: list) -> int:
    """Shared metric path: one report per value, a combined sweep table,
    and charts next to each delimited file."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.classifier is not None:
        clf = load_classifier(args.classifier)
    else:
        clf, _ = train_classifier(classifier_corpus(args.data), seed=0)
    reports, tags, notes = [], [], []
    for value in values:
        tag = _value_tag(param, value)
        note = ""
        if param == "tr":
            checkpoint = args.model
            config = _eval_config(args, t_r=value)
            if value == args.t:
                note = "inpaint-at-every-step"
        elif param == "recon-pct":
            checkpoint = out / f"model_recon{tag}.bpm"
            _retrain(args, checkpoint, p_recon=value / 100.0)
            config = _eval_config(args)
        else:
            checkpoint = args.model
            config = _eval_config(
                args, arm="repaint", repaint_r=value[0], repaint_j=value[1]
            )
        report, rows = evaluate(checkpoint, args.data, config, classifier=clf)
        write_report(out / f"report_{param}{tag}.tsv", report, rows)
        report_chart(out / f"report_{param}{tag}.svg", rows)
        reports.append(report)
        tags.append(tag)
        notes.append(note)
        line = (
            f"{param}\t{tag}\tgd {report.gd:.9g}\tlgd {report.lgd:.9g}"
            f"\tadherence {report.adherence_rate:.9g}"
        )
        print(line + (f"\t[{note}]" if note else ""))
    _write_sweep_table(out / "sweep.tsv", param, tags, reports, notes)
    sweep_chart(out / "sweep.svg", param, tags, reports)
    return 0


_SWEEP_FIELDS = ("gd", "lgd", "cd", "fpd", "dir_sim", "adherence_rate")


def _write_sweep_table(path: Path, param: str, tags: list[str],
                       reports: list[MetricReport], notes: list[str]) -> None:
    lines = [
        "# ablation sweep",
        f"# param\t{param}",
        "value\t" + "\t".join(_SWEEP_FIELDS) + "\tn\tnote",
    ]
    for tag, report, note in zip(tags, reports, notes):
        cells = [tag]
        cells += [format(getattr(report, f), ".9g") for f in _SWEEP_FIELDS]
        cells += [str(report.n), note]
        lines.append("\t".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_sweep_table(path: str | Path) -> tuple[str, list[str], list[MetricReport]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 4 or not lines[1].startswith("# param\t"):
        raise FormatError(f"{path}: not a sweep table")
    param = lines[1].split("\t", 1)[1]
    tags, reports = [], []
    for line in lines[3:]:
        if not line:
            continue
        cells = line.split("\t")
        tags.append(cells[0])
        values = [float(c) for c in cells[1:7]]
        reports.append(MetricReport(*values, n=int(cells[7])))
    return param, tags, reports


def _cmd_eval(args: argparse.Namespace) -> int:
    return _sweep(args, "tr", [args.tr])


def _cmd_ablate(args: argparse.Namespace) -> int:
    values = _parse_values(args.param, args.values)
    if args.param != "recon-pct" and args.model is None:
        raise InvalidParamsError(f"--model is required for --param {args.param}")
    return _sweep(args, args.param, values)


# ------------------------------------------------------------------- render


def _cmd_render(args: argparse.Namespace) -> int:
    raw = Path(args.input).read_bytes()
    if raw[:4] == PCB1_MAGIC:
        cloud, mask = load_pcb1(args.input)
        svg = cloud_svg(cloud, view=args.view, color_by=args.color_by, mask=mask)
        Path(args.out).write_text(svg, encoding="utf-8")
    elif raw.startswith(b"# ablation sweep"):
        param, tags, reports = _read_sweep_table(args.input)
        sweep_chart(args.out, param, tags, reports)
    else:
        raise FormatError(f"{args.input}: neither a PCB1 cloud nor a sweep table")
    print(f"wrote\t{args.out}")
    return 0


# ------------------------------------------------------------------ parsing


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="manifest.jsonl path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tr", type=int, default=20, help="edit start step")
    p.add_argument("--t", type=int, default=64, help="diffusion steps")
    p.add_argument("--sampler", choices=("deterministic", "ancestral"),
                   default="deterministic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=None,
                   help="evaluate only the first N records")
    p.add_argument("--classifier", default=None,
                   help="BPM1 classifier; trained from the train split if omitted")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cloudedit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("gen-data", help="synthesize an edit-triplet dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--categories", default="chair,table,lamp")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--split", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a denoiser on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--t", type=int, default=64)
    p.add_argument("--p-text", type=float, default=0.5)
    p.add_argument("--p-recon", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("edit", help="apply a prompt edit to one cloud")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="PCB1 cloud")
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tr", type=int, default=20)
    p.add_argument("--t", type=int, default=64)
    p.add_argument("--sampler", choices=("deterministic", "ancestral"),
                   default="deterministic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask", default=None,
                   help="text file, one 0/1 per point, overrides extraction")
    p.set_defaults(func=_cmd_edit)

    p = sub.add_parser("eval", help="metrics for one t_r on one split")
    p.add_argument("--model", required=True)
    _add_eval_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="metric sweeps over tr/recon-pct/repaint")
    p.add_argument("--model", default=None)
    p.add_argument("--param", required=True,
                   choices=("tr", "recon-pct", "repaint"))
    p.add_argument("--values", required=True,
                   help="comma list; repaint entries as RxJ")
    p.add_argument("--steps", type=int, default=4000,
                   help="retraining budget for recon-pct")
    _add_eval_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("render", help="PCB1 cloud or sweep table to SVG")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--view", choices=("front", "side", "top", "iso"),
                   default="front")
    p.add_argument("--color-by", choices=("part", "mask", "none"),
                   default="part")
    p.set_defaults(func=_cmd_render)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return args.func(args)
    except _ExtractFailure as exc:
        return _fail(str(exc), 4)
    except DivergedError as exc:
        return _fail(str(exc), 3)
    except _IO_ERRORS as exc:
        return _fail(str(exc), 2)
    except _USAGE_ERRORS as exc:
        return _fail(str(exc), 1)
    except CloudEditError as exc:
        return _fail(str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
