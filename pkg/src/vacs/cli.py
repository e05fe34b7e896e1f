"""Command line entry point: ``vacs <subcommand> [flags]``.

Configuration comes from an optional JSON file with sections ``toy``,
``model``, ``train``, ``generate`` and ``payload``; flags override it.
"""
import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict, fields

from vacs import checkpoint
from vacs.data import (DataError, ToyConfig, build_vocab, load_embeddings, read_corpus,
                       save_embeddings, synth_toy_splits, write_corpus)
from vacs.generation import generate_corpus, write_generated
from vacs.metrics import format_table, report
from vacs.model import ModelCollapseError, Vacs, VacsConfig
from vacs.payload import (Curriculum, PayloadConfig, PayloadLM, PayloadVocab, format_ppl_table,
                          perplexity, run_curricula, train_payload)
from vacs.training import DivergenceError, TrainConfig, train

# desk-scale settings; a full pipeline run takes a few CPU minutes
DEFAULTS = {
    "toy": asdict(ToyConfig()),
    "model": asdict(VacsConfig()),
    "train": {**asdict(TrainConfig()), "epochs_parallel": 3, "epochs_cs": 6,
              "anneal_t0": 400.0, "anneal_k": 0.01},
    "generate": {"n": 5000, "max_len": 30, "temperature": 1.0},
    "payload": {**asdict(PayloadConfig()), "epochs_mono": 5, "epochs_gcs": 2, "epochs": 5},
}


class UsageError(Exception):
    pass


def load_config(path=None):
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        with open(path, encoding="utf-8") as f:
            user = json.load(f)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(user, dict):
        raise UsageError(f"{path}: top level must be an object")
    for section, values in user.items():
        if section not in cfg:
            raise UsageError(f"{path}: unknown section {section!r}")
        if not isinstance(values, dict):
            raise UsageError(f"{path}: section {section!r} must be an object")
        for k, v in values.items():
            if k not in cfg[section]:
                raise UsageError(f"{path}: unknown key {section}.{k}")
            cfg[section][k] = v
    return cfg


def _make(cls, values):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in values.items() if k in names})


def _configs(args):
    cfg = load_config(args.config)
    seed = args.seed
    if seed is not None:
        cfg["train"]["seed"] = seed
    else:
        seed = cfg["train"]["seed"]
    gen = cfg["generate"]
    for flag, key in (("n", "n"), ("max_len", "max_len"), ("temperature", "temperature")):
        if getattr(args, flag, None) is not None:
            gen[key] = getattr(args, flag)
    return cfg, seed


# --- subcommands -------------------------------------------------------------

def cmd_toygen(args):
    cfg, seed = _configs(args)
    out = args.out or "toy"
    os.makedirs(out, exist_ok=True)
    toy = _make(ToyConfig, cfg["toy"])
    splits = synth_toy_splits(toy, seed)
    for name in ("mono", "cs_train", "cs_valid", "cs_test"):
        write_corpus(os.path.join(out, name.replace("_", "-") + ".jsonl"), splits[name])
    words, vectors = splits["world"].embedding_rows()
    save_embeddings(os.path.join(out, "embeddings.txt"), words, vectors)
    print(f"wrote toy corpora to {out}")
    return splits


def cmd_train_vacs(args, cfg=None, seed=None, parallel=None, cs=None, embeddings=None):
    if cfg is None:
        cfg, seed = _configs(args)
        if not args.corpus or len(args.corpus) != 2:
            raise UsageError("train-vacs needs --corpus PARALLEL --corpus CS")
        parallel = read_corpus(args.corpus[0], "parallel-mono")
        cs = read_corpus(args.corpus[1], "real-CS")
        embeddings = args.embeddings
    out = args.out or "vacs-run"
    os.makedirs(out, exist_ok=True)
    vocab = build_vocab([parallel, cs])
    mcfg = _make(VacsConfig, cfg["model"])
    emb = load_embeddings(embeddings, vocab) if embeddings else None
    if emb is not None and emb.dim and emb.dim != mcfg.word_dim:
        raise UsageError(f"embedding width {emb.dim} != model.word_dim {mcfg.word_dim}")
    model = Vacs.init(mcfg, vocab, seed, emb)
    tcfg = _make(TrainConfig, cfg["train"])
    res = train(model, parallel, cs, tcfg, out_dir=out, log_path=os.path.join(out, "train-log.jsonl"))
    final = os.path.join(out, "vacs.ckpt")
    res.model.save(final, extra={"steps": res.steps})
    print(f"trained {res.steps} steps; checkpoint {final}")
    return res.model


def cmd_generate(args, cfg=None, seed=None, model=None):
    if cfg is None:
        cfg, seed = _configs(args)
        if not args.checkpoint:
            raise UsageError("generate needs --checkpoint")
        model = Vacs.load(args.checkpoint[0])
    gen = cfg["generate"]
    corpus = generate_corpus(model, gen["n"], gen["max_len"], gen["temperature"], seed)
    out = args.out or "gcs.jsonl"
    write_generated(out, corpus)
    print(f"wrote {len(corpus)} sentences to {out}")
    return corpus


def cmd_metrics(args):
    if not args.corpus:
        raise UsageError("metrics needs at least one --corpus")
    rows = [(os.path.basename(p), report(read_corpus(p))) for p in args.corpus]
    print(format_table(rows, reference=rows[0][0] if len(rows) > 1 else None))
    if args.out:
        _write_json(args.out, {name: r.to_record() for name, r in rows})


def _epochs(value, n):
    if isinstance(value, list):
        if len(value) != n:
            raise UsageError(f"payload.epochs lists {len(value)} entries for {n} stages")
        return value
    return [value] * n


def cmd_train_payload(args):
    cfg, seed = _configs(args)
    if not args.curriculum:
        raise UsageError("train-payload needs --curriculum CORPUS [CORPUS ...]")
    corpora = [read_corpus(p) for p in args.curriculum]
    extra = [read_corpus(p) for p in (args.corpus or [])]
    vocab = PayloadVocab.build(corpora + extra)
    epochs = _epochs(cfg["payload"]["epochs"], len(corpora))
    name = "|".join(os.path.splitext(os.path.basename(p))[0] for p in args.curriculum)
    cur = Curriculum(list(zip(corpora, epochs)), name)
    model = train_payload(cur, _make(PayloadConfig, cfg["payload"]), seed, vocab)
    out = args.out or "payload.ckpt"
    model.save(out, extra={"curriculum": name})
    print(f"trained payload LM on {name}; checkpoint {out}")


def cmd_eval_ppl(args):
    if not args.checkpoint or not args.corpus:
        raise UsageError("eval-ppl needs --checkpoint and --corpus")
    corpora = [(p, read_corpus(p)) for p in args.corpus]
    for ck in args.checkpoint:
        model = PayloadLM.load(ck)
        for p, c in corpora:
            print(f"{ck}\t{p}\t{perplexity(model, c):.6f}")


def cmd_pipeline(args):
    """toygen, VACS training, generation, metrics and the perplexity table in one go."""
    cfg, seed = _configs(args)
    out = args.out or "pipeline"
    os.makedirs(out, exist_ok=True)
    sub = argparse.Namespace(**{**vars(args), "out": os.path.join(out, "data")})
    splits = cmd_toygen(sub)
    sub.out = os.path.join(out, "vacs")
    model = cmd_train_vacs(sub, cfg, seed, splits["mono"], splits["cs_train"],
                           os.path.join(out, "data", "embeddings.txt"))
    sub.out = os.path.join(out, "gcs.jsonl")
    gcs = cmd_generate(sub, cfg, seed, model)

    rows = [("cs-train", report(splits["cs_train"])), ("gCS", report(gcs))]
    metrics_table = format_table(rows, reference="cs-train")
    _write_text(os.path.join(out, "metrics.txt"), metrics_table)
    _write_json(os.path.join(out, "metrics.json"), {n: r.to_record() for n, r in rows})
    print(metrics_table)

    p = cfg["payload"]
    pcfg = _make(PayloadConfig, p)
    mono = splits["mono"]
    curricula = [Curriculum([(mono, p["epochs_mono"])], "Mono"),
                 Curriculum([(mono, p["epochs_mono"]), (gcs, p["epochs_gcs"])], "Mono|VACS-gCS")]
    ppl_rows, models = run_curricula(curricula, pcfg, seed, splits["cs_valid"], splits["cs_test"])
    for k, (name, m) in enumerate(models.items()):
        m.save(os.path.join(out, f"payload-{k}.ckpt"), extra={"curriculum": name})
    ppl_table = format_ppl_table(ppl_rows)
    _write_text(os.path.join(out, "perplexity.txt"), ppl_table)
    _write_json(os.path.join(out, "perplexity.json"),
                [{"curriculum": r.curriculum, "valid": r.valid, "test": r.test} for r in ppl_rows])
    print(ppl_table)
    return ppl_rows, rows


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text + "\n")


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


COMMANDS = {
    "toygen": (cmd_toygen, "write synthetic toy corpora and aligned embeddings"),
    "train-vacs": (cmd_train_vacs, "train VACS on a parallel corpus then a code-switched corpus"),
    "generate": (cmd_generate, "sample a code-switched corpus from a VACS checkpoint"),
    "metrics": (cmd_metrics, "print code-switching metrics for one or more corpora"),
    "train-payload": (cmd_train_payload, "train the payload LM over a curriculum"),
    "eval-ppl": (cmd_eval_ppl, "perplexity of payload checkpoints on corpora"),
    "pipeline": (cmd_pipeline, "run the full toy experiment"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="vacs", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_) in COMMANDS.items():
        p = subs.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--corpus", action="append", help="corpus path (repeatable)")
        p.add_argument("--checkpoint", action="append", help="checkpoint path (repeatable)")
        p.add_argument("--n", type=int, help="number of sentences to generate")
        p.add_argument("--max-len", type=int, dest="max_len")
        p.add_argument("--temperature", type=float)
        p.add_argument("--curriculum", nargs="+", help="ordered corpus paths")
        p.add_argument("--embeddings", help="pre-trained word vectors (train-vacs)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"vacs: error: {e}", file=sys.stderr)
        return 2
    except (OSError, DataError, checkpoint.CheckpointError, DivergenceError,
            ModelCollapseError, ValueError) as e:
        print(f"vacs: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
