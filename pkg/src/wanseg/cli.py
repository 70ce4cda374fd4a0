"""Command-line entry point: ``wanseg {synth,train,adapt,eval,report}``.

Exit codes: 0 success, 1 I/O failure, 2 invalid input (bad config key, missing
masks or weak labels, incompatible checkpoint). Outputs of a command are staged
and only moved into place once every artifact has been produced.
"""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from collections import defaultdict
from pathlib import Path
from statistics import fmean
from typing import Callable, Optional

import numpy as np

from . import checkpoint
from . import config as runconfig
from .data.dataset import PatchSet
from .data.io import load_manifest, read_manifest, write_pgm
from .data.synth import SOURCE_DEFAULT, TARGET_DEFAULT, SyntheticDomainSpec, synth_generate
from .engine import ADVERSARIAL_MODES, METHOD_NAMES, WAN_MODES, adapt, finetune, train_source
from .errors import ContractError
from .metrics import REPORT_FIELDS, evaluate_dataset, predict, read_reports
from .models import UNetGenerator

log = logging.getLogger("wanseg")

METHOD_ORDER = ("baseline", "osa", "lta", "os_wan", "lt_wan", "finetune")
GENERATOR_FILE = "checkpoint.wck"
AUX_FILE = "auxiliary.wck"
MANIFEST_FILE = "run_manifest.txt"
LOSS_FILE = "losses.csv"
EVAL_FILE = "evals.csv"


class UsageError(Exception):
    """Invalid input; maps to exit code 2."""


def worker_count() -> int:
    raw = os.environ.get("WAN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"WAN_THREADS must be an integer, got {raw!r}") from None


def method_name(mode: str) -> str:
    return METHOD_NAMES.get(mode, mode)


# --- staging ------------------------------------------------------------------

class Staging:
    """Collects output files in a temporary directory next to ``out``; ``commit`` moves them in."""

    def __init__(self, out: Path):
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))

    def path(self, name: str) -> Path:
        return self.dir / name

    def commit(self) -> None:
        for p in sorted(self.dir.iterdir()):
            dest = self.out / p.name
            if dest.is_dir():
                shutil.rmtree(dest)
            os.replace(p, dest)
        self.dir.rmdir()

    def discard(self) -> None:
        shutil.rmtree(self.dir, ignore_errors=True)


def _staged(out: Path, body: Callable[[Staging], None]) -> None:
    stage = Staging(out)
    try:
        body(stage)
    except BaseException:
        stage.discard()
        raise
    stage.commit()


# --- model files ----------------------------------------------------------------

def generator_from_state(state: dict[str, np.ndarray], base_width: Optional[int] = None) -> UNetGenerator:
    if "enc0.conv1.weight" not in state:
        raise ContractError("checkpoint does not hold a generator")
    width = state["enc0.conv1.weight"].shape[0]
    if base_width is not None and width != base_width:
        raise ContractError(f"checkpoint base width {width} does not match config base_width={base_width}")
    g = UNetGenerator(np.random.default_rng(0), width)
    g.load_state_dict(state)
    return g


def _write_run(stage: Staging, cfg: runconfig.RunConfig, generator, record, aux: Optional[dict] = None) -> str:
    digest = checkpoint.save(stage.path(GENERATOR_FILE), generator.state_dict())
    if aux:
        checkpoint.save(stage.path(AUX_FILE), aux)
    record.write_csv(stage.path(LOSS_FILE))
    if record.evals:
        record.write_eval_csv(stage.path(EVAL_FILE))
    effective = runconfig.RunConfig(cfg.adapt.resolved(), cfg.source_manifest, cfg.target_manifest,
                                    cfg.source_eval_split, cfg.target_eval_split)
    text = runconfig.serialize(effective)
    text += f"# config_hash={record.config_hash}\n# checkpoint={digest}\n"
    stage.path(MANIFEST_FILE).write_text(text, encoding="utf-8")
    return digest


def _eval_split(manifest: Optional[Path], split: str) -> Optional[PatchSet]:
    if manifest is None or not any(r.split == split for r in read_manifest(manifest)):
        return None
    return load_manifest(manifest, split, with_masks=True)


def _load_config(path: str) -> tuple[runconfig.RunConfig, Path]:
    try:
        cfg = runconfig.load(path)
        cfg.adapt.resolved()
    except ContractError as e:
        raise UsageError(str(e)) from None
    return cfg, Path(path).resolve().parent


def _manifest(cfg_value: str, base: Path, what: str) -> Path:
    if not cfg_value:
        raise UsageError(f"config needs {what}")
    return runconfig.resolve_path(cfg_value, base)


# --- commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    src = SyntheticDomainSpec.from_file(args.source_spec) if args.source_spec else SOURCE_DEFAULT
    tgt = SyntheticDomainSpec.from_file(args.target_spec) if args.target_spec else TARGET_DEFAULT
    if args.seed is not None:
        src = src.with_seed(2 * args.seed)
        tgt = tgt.with_seed(2 * args.seed + 1)
    counts = _parse_counts(args.counts)
    out = Path(args.out)

    def body(stage: Staging) -> None:
        synth_generate(src, tgt, counts, stage.dir, worker_count())

    _staged(out, body)
    for domain in ("source", "target"):
        rows = read_manifest(out / domain / "manifest.csv")
        per = {s: sum(r.split == s for r in rows) for s in counts}
        positives = sum(r.weak_label == 1 for r in rows)
        print(f"{domain}: " + " ".join(f"{s}={n}" for s, n in per.items()) + f" weak_positive={positives}")
    return 0


def _parse_counts(text: str) -> dict[str, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError("--counts expects train,val,test")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"--counts must be integers, got {text!r}") from None
    if min(values) < 0:
        raise UsageError("--counts must be non-negative")
    return dict(zip(("train", "val", "test"), values))


def cmd_train(args) -> int:
    cfg, base = _load_config(args.config)
    if cfg.adapt.mode != "source_only":
        raise UsageError(f"train runs mode=source_only, config has mode={cfg.adapt.mode}")
    src_manifest = _manifest(cfg.source_manifest, base, "source_manifest")
    tgt_manifest = runconfig.resolve_path(cfg.target_manifest, base) if cfg.target_manifest else None
    try:
        source = load_manifest(src_manifest, "train", with_masks=True)
    except ContractError as e:
        raise UsageError(str(e)) from None
    source_eval = _eval_split(src_manifest, cfg.source_eval_split)
    target_eval = _eval_split(tgt_manifest, cfg.target_eval_split)
    generator, record = train_source(cfg.adapt, source, None, source_eval, target_eval)
    _staged(Path(args.out), lambda stage: _write_run(stage, cfg, generator, record))
    print(f"trained {record.mode} for {len(record.steps)} steps -> {args.out}")
    return 0


def cmd_adapt(args) -> int:
    cfg, base = _load_config(args.config)
    mode = cfg.adapt.mode
    if mode not in ADVERSARIAL_MODES + ("finetune",):
        raise UsageError(f"adapt needs an adaptation mode or finetune, config has mode={mode}")
    try:
        generator = generator_from_state(checkpoint.load(args.init), cfg.adapt.base_width)
        generator.astype(np.dtype(cfg.adapt.dtype))
    except ContractError as e:
        raise UsageError(f"{args.init}: {e}") from None
    tgt_manifest = _manifest(cfg.target_manifest, base, "target_manifest")
    src_manifest = runconfig.resolve_path(cfg.source_manifest, base) if cfg.source_manifest else None
    try:
        if mode == "finetune":
            target = load_manifest(tgt_manifest, "train", with_masks=True)
        else:
            target = load_manifest(tgt_manifest, "train", with_masks=False,
                                   require_weak_labels=mode in WAN_MODES)
            if src_manifest is None:
                raise UsageError("adversarial modes need source_manifest")
            source = load_manifest(src_manifest, "train", with_masks=True)
    except ContractError as e:
        raise UsageError(str(e)) from None
    source_eval = _eval_split(src_manifest, cfg.source_eval_split)
    target_eval = _eval_split(tgt_manifest, cfg.target_eval_split)
    aux: dict = {}
    if mode == "finetune":
        generator, record = finetune(cfg.adapt, generator, target, source_eval, target_eval)
    else:
        generator, disc, head, record = adapt(cfg.adapt, generator, source, target, source_eval, target_eval)
        aux.update({f"discriminator/{k}": v for k, v in disc.state_dict().items()})
        if head is not None:
            aux.update({f"head/{k}": v for k, v in head.state_dict().items()})
    _staged(Path(args.out), lambda stage: _write_run(stage, cfg, generator, record, aux))
    print(f"adapted ({mode}) for {len(record.steps)} steps -> {args.out}")
    return 0


def _method_for_checkpoint(ckpt: Path) -> str:
    manifest = ckpt.parent / MANIFEST_FILE
    if manifest.exists():
        try:
            return method_name(runconfig.load(manifest).adapt.mode)
        except ContractError:
            pass
    return "unknown"


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    try:
        generator = generator_from_state(checkpoint.load(ckpt))
        data = load_manifest(args.manifest, args.split, with_masks=True)
    except ContractError as e:
        raise UsageError(str(e)) from None
    if len(data) == 0:
        raise UsageError(f"{args.manifest}: split {args.split!r} is empty")
    dataset = args.dataset or Path(args.manifest).resolve().parent.name
    method = args.method or _method_for_checkpoint(ckpt)
    try:
        report = evaluate_dataset(generator, data, dataset, args.split, method, checkpoint.file_hash(ckpt))
    except ContractError as e:
        raise UsageError(str(e)) from None
    if args.dump_masks:
        dump = Path(args.dump_masks)
        dump.mkdir(parents=True, exist_ok=True)
        probs = predict(generator, data.images)
        for sample_id, p in zip(data.ids, probs):
            write_pgm(dump / f"{sample_id}.pgm", (p[0] >= 0.5).astype(np.uint8))
    report.append_csv(args.out)
    print(f"{dataset}/{args.split} {method}: iou={report.iou:.4f} f1={report.f1:.4f}")
    return 0


def _collect_reports(runs: Path) -> list[dict]:
    rows = []
    for path in sorted(runs.rglob("*.csv")):
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip()
        if header == ",".join(REPORT_FIELDS):
            rows.extend(read_reports(path))
    return rows


def _order(method: str) -> tuple[int, str]:
    return (METHOD_ORDER.index(method), "") if method in METHOD_ORDER else (len(METHOD_ORDER), method)


def render_report(rows: list[dict], source_dataset: str = "source") -> str:
    """Markdown comparison table plus a retention table when source evaluations exist."""
    groups: dict[tuple[str, str], list[dict]] = defaultdict(list)
    for r in rows:
        groups[(r["dataset"], r["method"])].append(r)
    target_keys = sorted((k for k in groups if k[0] != source_dataset), key=lambda k: (k[0], _order(k[1])))
    if not target_keys:
        target_keys = sorted(groups, key=lambda k: (k[0], _order(k[1])))
    lines = ["| Pair | Method | IoU | F1 | Runs |", "|---|---|---|---|---|"]
    for dataset, method in target_keys:
        g = groups[(dataset, method)]
        pair = dataset if dataset == source_dataset else f"{source_dataset} → {dataset}"
        lines.append(f"| {pair} | {method} | {fmean(r['iou'] for r in g):.4f} | "
                     f"{fmean(r['f1'] for r in g):.4f} | {len(g)} |")
    before_rows = groups.get((source_dataset, "baseline"))
    after = [k for k in groups if k[0] == source_dataset and k[1] != "baseline"]
    if before_rows and after:
        before = fmean(r["iou"] for r in before_rows)
        lines += ["", "| Method | Source IoU before | Source IoU after | Drop |", "|---|---|---|---|"]
        for _, method in sorted(after, key=lambda k: _order(k[1])):
            value = fmean(r["iou"] for r in groups[(source_dataset, method)])
            drop = (before - value) / before if before > 0 else float("nan")
            lines.append(f"| {method} | {before:.4f} | {value:.4f} | {drop:.4f} |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    rows = _collect_reports(Path(args.runs))
    if not rows:
        raise UsageError(f"no evaluation reports under {args.runs}")
    text = render_report(rows, args.source_dataset)
    Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# --- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wanseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic source/target patch trees")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the seeds in the spec files")
    p.add_argument("--source-spec")
    p.add_argument("--target-spec")
    p.add_argument("--counts", default="200,100,100", help="train,val,test patch counts per domain")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="supervised source training")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="domain adaptation or fine-tuning from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="append an IoU/F1 row to a report CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-masks")
    p.add_argument("--dataset", help="dataset name in the report (default: manifest directory name)")
    p.add_argument("--method", help="method name (default: read from the run manifest)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="markdown tables from report CSVs")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source-dataset", default="source")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ContractError) as e:
        print(f"wanseg {args.command}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"wanseg {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
