"""``capnet`` command line: one subcommand per pipeline stage.

Every stage reads files, writes only under ``--out`` and exits 0 on
success, 1 on a validation error and 2 on an IO or format error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .attention_eval import localization_accuracy, localization_csv, write_attention_maps
from .config import Config, apply_overrides, parse_config
from .dataset import (SyntheticSpec, Vocabulary, attribute_word_list, build_vocab, generate_synthetic,
                      read_manifest, split_dataset, tokenize, write_manifest)
from .errors import CapnetError, FormatError, ValidationError
from .imageio import image_io
from .metrics import CorpusPair, evaluate_corpus, report_csv
from .model import init_attribute_extractor, init_captioner, tiny_grad_check
from .training import (Split, ablation_data, attribute_recall, caption_split, localization_traces, predict_attributes,
                       prepare, prepare_split, run_ablation, train_attribute_extractor, train_captioner)

VOCAB_FILE = "vocab.txt"
ATTR_VOCAB_FILE = "attr_vocab.txt"


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _config(args) -> Config:
    cfg = parse_config(args.config) if args.config else Config()
    pairs = []
    for item in args.set or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    return apply_overrides(cfg, pairs) if pairs else cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _vocabs(path) -> tuple:
    d = Path(path)
    return Vocabulary.load(d / VOCAB_FILE), Vocabulary.load(d / ATTR_VOCAB_FILE)


def _load_captioner(path, vocabs):
    ck = ckpt_io.load(path)
    ckpt_io.check_compatible(ck, init_captioner(ck.config, len(vocabs[0]), len(vocabs[1])))
    return ck


def _load_extractor(path, cfg: Config, vocabs):
    if path is None:
        return None
    ck = ckpt_io.load(path)
    ckpt_io.check_compatible(ck, init_attribute_extractor(ck.config, len(vocabs[1])))
    return ck.params


def _need_extractor(cfg: Config, extractor) -> None:
    if cfg.uses_attributes and cfg.attr_source == "extractor" and extractor is None:
        raise ValidationError(f"mode {cfg.mode!r} with attr_source=extractor needs --attr-checkpoint")


def _split(args, cfg: Config, vocabs):
    samples = read_manifest(args.manifest, cfg.image_size)
    chosen = [s for s in samples if s.split == args.split]
    if not chosen:
        raise ValidationError(f"manifest has no {args.split!r} samples")
    return prepare_split(chosen, vocabs[0], vocabs[1], cfg.n_attributes, cfg.shapes)


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    print(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out(args)
    samples = split_dataset(generate_synthetic(SyntheticSpec.from_config(cfg)), seed=cfg.seed)
    write_manifest(samples, out)
    _write(out / "config.cfg", cfg.serialize())
    print(f"{len(samples)} samples")
    return 0


def cmd_build_vocab(args) -> int:
    cfg = _config(args)
    out = _out(args)
    train = [s for s in read_manifest(args.manifest) if s.split == "train"]
    if not train:
        raise ValidationError("manifest has no training samples")
    cap, attr = build_vocab([s.caption for s in train], cfg.max_attr_words, attribute_word_list(cfg))
    cap.save(out / VOCAB_FILE)
    attr.save(out / ATTR_VOCAB_FILE)
    print(f"caption vocab {len(cap)}, attribute vocab {len(attr)}")
    return 0


def _prepared(args, cfg: Config):
    vocabs = _vocabs(args.vocab)
    data = prepare(read_manifest(args.manifest, cfg.image_size), cfg, vocabs)
    if "train" not in data.splits:
        raise ValidationError("manifest has no training samples")
    return data


def _logger(args):
    if args.quiet:
        return None
    return lambda row: print(f"epoch {row[0]} lr {row[1]:.3e} train {row[2]:.4f} val {row[3]:.4f}", flush=True)


def cmd_train_attr(args) -> int:
    cfg = _config(args)
    data = _prepared(args, cfg)
    out = _out(args)
    train = data.splits["train"]
    res = train_attribute_extractor(train, cfg, data.splits.get("val"), on_epoch=_logger(args))
    ckpt_io.save(out / "attr.ckpt", res.checkpoint(cfg))
    _write(out / "attr_log.csv", res.log_csv())
    recall = attribute_recall(predict_attributes(res.params, cfg, train.images), train.attr_ids)
    print(f"train top-{cfg.n_attributes} recall {recall:.4f}")
    return 0


def cmd_train_caption(args) -> int:
    cfg = _config(args)
    data = _prepared(args, cfg)
    out = _out(args)
    extractor = _load_extractor(args.attr_checkpoint, cfg, (data.cap_vocab, data.attr_vocab))
    if cfg.uses_attributes and cfg.train_attr_source == "extractor" and extractor is None:
        raise ValidationError("train_attr_source=extractor needs --attr-checkpoint")
    res = train_captioner(data.splits["train"], cfg, len(data.cap_vocab), len(data.attr_vocab),
                          data.splits.get("val"), on_epoch=_logger(args), extractor=extractor)
    ckpt_io.save(out / "caption.ckpt", res.checkpoint(cfg))
    _write(out / "train_log.csv", res.log_csv())
    return 0


def cmd_caption(args) -> int:
    vocabs = _vocabs(args.vocab)
    ck = _load_captioner(args.checkpoint, vocabs)
    cfg = ck.config
    extractor = _load_extractor(args.attr_checkpoint, cfg, vocabs)
    if cfg.uses_attributes:
        # a bare image has no ground-truth attributes
        cfg = cfg.replace(attr_source="extractor")
    _need_extractor(cfg, extractor)
    out = _out(args)
    rows = []
    for path in args.image:
        image = image_io(path, "read", size=(cfg.image_size, cfg.image_size))
        if image.ndim != 3:
            raise FormatError(f"{path}: expected an RGB (P6) image")
        sid = Path(path).stem
        split = _single(sid, image)
        caps, steps, traces = caption_split(ck.params, cfg, split, vocabs[0], extractor)
        rows.append(f"{sid}\t{' '.join(caps[0])}")
        if cfg.uses_attention:
            write_attention_maps(out, sid, steps[0] + ["<end>"], traces[0], cfg.grid_side,
                                 (cfg.image_size, cfg.image_size), cfg.th, cfg.connectivity)
    _write(out / "captions.tsv", "\n".join(rows) + "\n")
    return 0


def _single(sid, image) -> Split:
    return Split([sid], image[None], np.zeros((1, 2), dtype=np.int64), np.zeros((1, 5), dtype=np.int64),
                 np.zeros((1, 1)), [[]], [(0, 0, 1, 1)], [""])


def _read_candidates(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'id<TAB>caption'")
        sid, text = line.split("\t", 1)
        out[sid] = tokenize(text)
    return out


def cmd_evaluate(args) -> int:
    out = _out(args)
    if args.candidates:
        cfg = _config(args)
        refs = {s.id: [s.caption] for s in read_manifest(args.manifest) if s.split == args.split}
        if not refs:
            raise ValidationError(f"manifest has no {args.split!r} samples")
        cands = _read_candidates(args.candidates)
        report = evaluate_corpus(CorpusPair(cands, refs))
        name = "candidates"
    else:
        if not (args.checkpoint and args.vocab):
            raise ValidationError("evaluate needs --candidates, or --checkpoint with --vocab")
        vocabs = _vocabs(args.vocab)
        ck = _load_captioner(args.checkpoint, vocabs)
        cfg = ck.config
        extractor = _load_extractor(args.attr_checkpoint, cfg, vocabs)
        _need_extractor(cfg, extractor)
        split = _split(args, cfg, vocabs)
        caps, _, _ = caption_split(ck.params, cfg, split, vocabs[0], extractor)
        _write(out / "candidates.tsv", "".join(f"{i}\t{' '.join(c)}\n" for i, c in zip(split.ids, caps)))
        report = evaluate_corpus(CorpusPair(dict(zip(split.ids, caps)),
                                            {i: [r] for i, r in zip(split.ids, split.references)}))
        name = cfg.mode
    text = report_csv([(name, report)])
    _write(out / "metrics.csv", text)
    print(text, end="")
    return 0


def cmd_attn_eval(args) -> int:
    vocabs = _vocabs(args.vocab)
    ck = _load_captioner(args.checkpoint, vocabs)
    cfg = ck.config
    if not cfg.uses_attention:
        raise ValidationError(f"mode {cfg.mode!r} has no spatial attention")
    extractor = _load_extractor(args.attr_checkpoint, cfg, vocabs)
    _need_extractor(cfg, extractor)
    out = _out(args)
    split = _split(args, cfg, vocabs)
    _, steps, traces = caption_split(ck.params, cfg, split, vocabs[0], extractor)
    table, overall = localization_accuracy(localization_traces(split, steps, traces, cfg.grid_side, cfg.shapes),
                                           cfg.shapes, cfg.th, cfg.connectivity)
    text = localization_csv(table)
    text += f"overall,{sum(n for n, _ in table.values())},{'n/a' if overall is None else f'{overall:.4f}'}\n"
    _write(out / "localization.csv", text)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out(args)
    seeds = [cfg.seed] if not args.seeds else [int(s) for s in args.seeds.split(",")]
    summary = ["seed,cider_full,cider_vanilla,full_ge_vanilla"]
    for seed in seeds:
        log = None if args.quiet else (lambda row, s=seed: print(f"seed {s}: {row}", flush=True))
        rows = run_ablation(ablation_data(cfg, seed), cfg, seed, log=log)
        _write(out / f"ablation_seed{seed}.csv", report_csv(rows))
        cider = {mode: rep.cider for mode, rep in rows}
        summary.append(f"{seed},{cider['full']:.4f},{cider['vanilla']:.4f},"
                       f"{int(cider['full'] >= cider['vanilla'])}")
    _write(out / "summary.csv", "\n".join(summary) + "\n")
    return 0


def cmd_grad_check(args) -> int:
    if args.dims != "tiny":
        raise ValidationError("only --dims tiny is supported")
    out = _out(args)
    seed = 0 if args.seed is None else args.seed
    report = tiny_grad_check(args.mode, seed, args.tol)
    lines = ["param\tchecked\tmax_rel_error\tstatus"] + report.lines()
    lines.append(f"worst {report.worst:.3e} tol {args.tol:g} flagged {','.join(report.flagged) or 'none'}")
    _write(out / "grad_check.txt", "\n".join(lines) + "\n")
    print(lines[-1])
    return 0 if report.ok() else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--quiet", action="store_true")

    parser = _Parser(prog="capnet", description="Attribute-conditioned adaptive-attention captioning.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "render the synthetic dataset and manifest")
    p = add("build-vocab", cmd_build_vocab, "caption and attribute vocabularies")
    p.add_argument("--manifest", required=True)
    for name, fn, help_ in (("train-attr", cmd_train_attr, "train the attribute extractor"),
                            ("train-caption", cmd_train_caption, "train the captioner")):
        p = add(name, fn, help_)
        p.add_argument("--manifest", required=True)
        p.add_argument("--vocab", required=True, help="directory holding the vocabulary files")
    p.add_argument("--attr-checkpoint", help="extractor used when train_attr_source = extractor")
    p = add("caption", cmd_caption, "caption images and write attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attr-checkpoint")
    p.add_argument("--vocab", required=True)
    p.add_argument("--image", required=True, nargs="+")
    p = add("evaluate", cmd_evaluate, "caption metrics CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--candidates", help="id<TAB>caption file to score instead of a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--attr-checkpoint")
    p.add_argument("--vocab")
    p = add("attn-eval", cmd_attn_eval, "attention localization CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attr-checkpoint")
    p.add_argument("--vocab", required=True)
    p = add("ablate", cmd_ablate, "four-mode ablation")
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p = add("grad-check", cmd_grad_check, "end-to-end gradient check")
    p.add_argument("--dims", default="tiny", choices=["tiny"])
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--mode", default="full", choices=["full", "adaptive", "attr_only", "vanilla"])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_help())
        return args.fn(args)
    except (FormatError, OSError) as exc:
        print(f"capnet: {exc}", file=sys.stderr)
        return 2
    except CapnetError as exc:
        print(f"capnet: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
