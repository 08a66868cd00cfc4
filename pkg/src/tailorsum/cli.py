"""Command-line entry point.

Every command resolves its settings from built-in defaults, then an optional
``--config`` file of ``key=value`` lines, then explicit flags.  The resolved
settings are written next to the outputs as ``<command>.config``.  Output
goes to ``--out``, else ``$TAILORSUM_OUT``, else ``./out``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data, metrics
from .data import Corpus, Example, EncodedExample, Vocabulary, build_vocab, gen_synthetic, mix_corpus
from .decode import DecodeConfig, decode, write_decodes
from .model import Dims, ModelParams, load_checkpoint, save_checkpoint
from .numerics import check_gradients, finite_diff_gradient
from .tailoring import (
    NOT_READABLE,
    NOT_SIMPLE,
    READABLE,
    SIMPLE,
    ControlToken,
    VotingTable,
    fewer_syllables,
    load_frequency_table,
    load_lexicon,
    load_synonyms,
    make_reward,
    median_bins,
    more_frequent,
    prepend_control_token,
    select_boost_vector,
    topic_token,
)
from .training import TrainConfig, nll_loss, sequence_pass, substream, train, write_loss_curve

OUT_ENV = "TAILORSUM_OUT"
NEUTRAL = ControlToken("<topic:none>", "topic")

DIM_PRESETS = {
    "tiny": {"emb": 8, "hidden": 8, "attn": 8},
    "small": {"emb": 16, "hidden": 32, "attn": 32},
    "medium": {"emb": 32, "hidden": 64, "attn": 64},
}


class ConfigError(Exception):
    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field


# name -> (type, default); None defaults mean "required when used"
SETTINGS = {
    "synth": {"kind": (str, None), "size": (int, None), "seed": (int, None), "oov_rate": (float, 0.0),
              "max_len": (int, 10)},
    "build-vocab": {"corpus": (Path, None), "max_size": (int, 50000), "controls": (str, ""),
                    "control_kind": (str, "none")},
    "mix": {"corpus": (Path, None), "seed": (int, None), "block": (int, 2)},
    "train": {"corpus": (Path, None), "vocab": (Path, None), "seed": (int, None), "dims": (str, "small"),
              "emb": (int, 0), "hidden": (int, 0), "attn": (int, 0), "iterations": (int, 2000),
              "scst_iterations": (int, 0), "alpha": (float, 0.9), "learning_rate": (float, 0.15),
              "initial_accumulator": (float, 0.1), "coverage_weight": (float, 1.0),
              "reward": (str, "readability"), "freq_table": (Path, ""), "init": (Path, ""),
              "control": (str, "none"), "max_decode_len": (int, 100), "checkpoint_every": (int, 500),
              "target_nll": (float, 0.0), "nll_window": (int, 500), "max_grad_norm": (float, 2.0)},
    "decode": {"corpus": (Path, None), "vocab": (Path, None), "checkpoint": (Path, None),
               "beam": (int, 1), "max_len": (int, 100), "min_len": (int, 0), "control": (str, "none"),
               "lexicon": (Path, ""), "boost_k": (int, 5), "gamma": (float, 0.0),
               "synonyms": (Path, ""), "voting_lambda": (float, 0.0), "simpler": (str, "syllables"),
               "freq_table": (Path, ""), "attention": (int, 0)},
    "eval": {"metric": (str, None), "decodes": (Path, ""), "corpus": (Path, ""), "text": (str, ""),
             "freq_table": (Path, ""), "lexicon": (Path, "")},
    "gradcheck": {"seed": (int, None), "dims": (str, "tiny"), "vocab_size": (int, 20), "epsilon": (float, 1e-5),
                  "tol": (float, 1e-4), "init_scale": (float, 1.0), "coverage_weight": (float, 1.0)},
}


def read_config_file(path) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError("config", f"{path}:{lineno}: expected key=value")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve(command: str, flags: dict) -> dict:
    spec = SETTINGS[command]
    raw: dict[str, object] = {}
    if flags.get("config"):
        raw.update(read_config_file(flags["config"]))
    raw.update({k: v for k, v in flags.items() if k in spec and v is not None})
    unknown = sorted(set(raw) - set(spec))
    if unknown:
        raise ConfigError(unknown[0], f"unknown setting for {command}")
    resolved = {}
    for key, (typ, default) in spec.items():
        if key in raw:
            try:
                resolved[key] = typ(raw[key]) if not isinstance(raw[key], typ) else raw[key]
            except ValueError:
                raise ConfigError(key, f"cannot parse {raw[key]!r} as {typ.__name__}") from None
        elif default is None:
            raise ConfigError(key, "required setting is missing")
        else:
            resolved[key] = typ(default) if default != "" else ""
    for key, value in resolved.items():
        if spec[key][0] is Path and value != "" and not Path(value).exists():
            raise ConfigError(key, f"path does not exist: {value}")
    return resolved


def write_resolved(out: Path, command: str, cfg: dict) -> None:
    with open(out / f"{command}.config", "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(cfg):
            fh.write(f"{key}={cfg[key]}\n")


def model_dims(cfg: dict, vocab_size: int) -> Dims:
    if cfg["dims"] not in DIM_PRESETS:
        raise ConfigError("dims", f"unknown preset {cfg['dims']!r}")
    preset = dict(DIM_PRESETS[cfg["dims"]])
    for key in ("emb", "hidden", "attn"):
        if cfg.get(key):
            preset[key] = cfg[key]
    return Dims(vocab_size, preset["emb"], preset["hidden"], preset["attn"])


def control_for(example: Example, mode: str, labeler=None) -> ControlToken | None:
    if mode == "none":
        return None
    if mode == "topic":
        if example.topic is None:
            raise ConfigError("control", "topic control needs topic labels in the corpus")
        return topic_token(example.topic)
    if mode in ("readability", "simplicity"):
        return labeler(example)
    if mode.startswith("<"):
        kind = "topic" if mode.startswith("<topic:") else "readability"
        return ControlToken(mode, kind)
    raise ConfigError("control", f"unknown control mode {mode!r}")


def style_labeler(corpus: Corpus, mode: str, freq_path):
    if mode == "readability":
        values = [metrics.flesch_score(ex.summary) for ex in corpus]
        _, label = median_bins(values, READABLE, NOT_READABLE)
        return lambda ex: label(metrics.flesch_score(ex.summary))
    if mode == "simplicity":
        if not freq_path:
            raise ConfigError("freq_table", "simplicity control needs a frequency table")
        freq = load_frequency_table(freq_path)
        values = [metrics.simplicity_score(ex.summary, freq) for ex in corpus]
        _, label = median_bins(values, SIMPLE, NOT_SIMPLE)
        return lambda ex: label(metrics.simplicity_score(ex.summary, freq))
    return None


# -- commands ---------------------------------------------------------------

def _write_lines(path: Path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(line + "\n" for line in lines)


def cmd_synth(cfg, out: Path):
    if cfg["kind"] not in ("copy", "two_topic"):
        raise ConfigError("kind", f"unknown synthetic kind {cfg['kind']!r}")
    if cfg["size"] < 1:
        raise ConfigError("size", "size must be >= 1")
    corpus = gen_synthetic(cfg["kind"], cfg["size"], cfg["seed"], cfg["max_len"], cfg["oov_rate"])
    out.mkdir(parents=True, exist_ok=True)
    data.write_corpus(corpus, out / "corpus.jsonl")
    if cfg["kind"] == "two_topic":
        _write_lines(out / "lexicon.tsv", data.synthetic_lexicon_lines())
    else:
        _write_lines(out / "frequency.tsv", data.synthetic_frequency_lines())
        _write_lines(out / "synonyms.tsv", data.synthetic_synonym_lines())
    write_resolved(out, "synth", cfg)
    return f"wrote {len(corpus)} examples"


def cmd_build_vocab(cfg, out: Path):
    corpus = data.read_corpus(cfg["corpus"])
    controls = [c for c in cfg["controls"].split(",") if c]
    kind = cfg["control_kind"]
    if kind == "topic":
        controls += [topic_token(t).surface for t in corpus.topics()] + [NEUTRAL.surface]
    elif kind == "readability":
        controls += [READABLE.surface, NOT_READABLE.surface]
    elif kind == "simplicity":
        controls += [SIMPLE.surface, NOT_SIMPLE.surface]
    elif kind != "none":
        raise ConfigError("control_kind", f"unknown control kind {kind!r}")
    vocab = build_vocab(corpus, cfg["max_size"], controls)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.tsv")
    write_resolved(out, "build-vocab", cfg)
    return f"vocabulary size {len(vocab)}"


def cmd_mix(cfg, out: Path):
    corpus = data.read_corpus(cfg["corpus"])
    mixed = mix_corpus(corpus, cfg["seed"], block=cfg["block"])
    out.mkdir(parents=True, exist_ok=True)
    data.write_corpus(mixed, out / "mixed.jsonl")
    write_resolved(out, "mix", cfg)
    return f"wrote {len(mixed)} mixed tuples"


def cmd_train(cfg, out: Path):
    if not 0.0 <= cfg["alpha"] <= 1.0:
        raise ConfigError("alpha", "alpha must lie in [0, 1]")
    for key in ("iterations", "scst_iterations", "nll_window", "max_grad_norm", "checkpoint_every"):
        if cfg[key] < 0 or (key in ("nll_window", "checkpoint_every") and cfg[key] == 0):
            raise ConfigError(key, f"{key} out of range")
    corpus = data.read_corpus(cfg["corpus"])
    vocab = Vocabulary.load(cfg["vocab"])
    labeler = style_labeler(corpus, cfg["control"], cfg["freq_table"])
    examples = []
    for ex in corpus:
        token = control_for(ex, cfg["control"], labeler)
        if token is not None:
            ex = prepend_control_token(ex, token, vocab)
        examples.append(vocab.encode(ex))
    reward_fn = None
    if cfg["scst_iterations"] and cfg["alpha"] > 0:
        if cfg["reward"] == "simplicity" and not cfg["freq_table"]:
            raise ConfigError("freq_table", "simplicity reward needs a frequency table")
        if cfg["reward"] not in ("readability", "simplicity"):
            raise ConfigError("reward", f"unknown reward {cfg['reward']!r}")
        freq = load_frequency_table(cfg["freq_table"]) if cfg["freq_table"] else None
        reward_fn = make_reward(cfg["reward"], freq).on_ids(vocab)
    if cfg["init"]:
        params = load_checkpoint(cfg["init"])
        if params.dims.vocab != len(vocab):
            raise ConfigError("init", "checkpoint vocabulary size does not match the vocabulary")
    else:
        params = ModelParams.init(model_dims(cfg, len(vocab)), substream(cfg["seed"], "init"))
    tc = TrainConfig(alpha=cfg["alpha"], learning_rate=cfg["learning_rate"],
                     initial_accumulator=cfg["initial_accumulator"], iterations=cfg["iterations"],
                     scst_iterations=cfg["scst_iterations"], seed=cfg["seed"],
                     coverage_weight=cfg["coverage_weight"], max_decode_len=cfg["max_decode_len"],
                     checkpoint_every=cfg["checkpoint_every"], target_nll=cfg["target_nll"] or None,
                     nll_window=cfg["nll_window"], max_grad_norm=cfg["max_grad_norm"] or None)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out, "train", cfg)
    result = train(examples, tc, params, reward_fn, forbidden=vocab.forbidden_ids,
                   checkpoint_path=out / "model.ckpt")
    write_loss_curve(result.curve, out / "loss_curve.tsv")
    return f"trained {result.stopped_at} iterations"


def cmd_decode(cfg, out: Path):
    corpus = data.read_corpus(cfg["corpus"])
    vocab = Vocabulary.load(cfg["vocab"])
    params = load_checkpoint(cfg["checkpoint"])
    lexicon = load_lexicon(cfg["lexicon"]) if cfg["lexicon"] else None
    if cfg["gamma"] > 0 and lexicon is None:
        raise ConfigError("lexicon", "boosting needs a topic lexicon")
    voting = None
    if cfg["synonyms"]:
        if cfg["simpler"] == "frequency":
            if not cfg["freq_table"]:
                raise ConfigError("freq_table", "frequency-based voting needs a frequency table")
            simpler = more_frequent(load_frequency_table(cfg["freq_table"]))
        elif cfg["simpler"] == "syllables":
            simpler = fewer_syllables
        else:
            raise ConfigError("simpler", f"unknown rule {cfg['simpler']!r}")
        voting = VotingTable(load_synonyms(cfg["synonyms"]), simpler)
    records = []
    for ex in corpus:
        boost = None
        if cfg["gamma"] > 0:
            if ex.topic is None:
                raise ConfigError("gamma", "boosting needs topic labels in the corpus")
            boost = select_boost_vector(ex.article, ex.topic, lexicon, cfg["boost_k"], cfg["gamma"])
        dc = DecodeConfig(beam_width=cfg["beam"], max_len=cfg["max_len"], min_len=cfg["min_len"], boost=boost,
                          voting=voting, voting_lambda=cfg["voting_lambda"],
                          control=control_for(ex, cfg["control"]))
        rec = decode(params, vocab, ex.article, dc).record(vocab, bool(cfg["attention"]))
        rec["reference"] = data.detokenize(ex.summary)
        if ex.topic is not None:
            rec["topic"] = ex.topic
        records.append(rec)
    out.mkdir(parents=True, exist_ok=True)
    write_decodes(records, out / "decodes.jsonl")
    write_resolved(out, "decode", cfg)
    return f"decoded {len(records)} articles"


def _load_decodes(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_eval(cfg, out: Path):
    names = [m.strip() for m in cfg["metric"].split(",") if m.strip()]
    known = {"flesch", "simplicity", "rouge1", "rouge2", "rougeL", "top1", "top3"}
    bad = [m for m in names if m not in known]
    if bad or not names:
        raise ConfigError("metric", f"unknown metric {bad[0] if bad else ''!r}")
    if cfg["text"]:
        rows = [{"text": cfg["text"], "reference": cfg["text"], "topic": None}]
    elif cfg["decodes"]:
        rows = _load_decodes(cfg["decodes"])
    else:
        raise ConfigError("decodes", "eval needs --decodes or --text")
    freq = load_frequency_table(cfg["freq_table"]) if cfg["freq_table"] else None
    lexicon = load_lexicon(cfg["lexicon"]) if cfg["lexicon"] else None
    if "simplicity" in names and freq is None:
        raise ConfigError("freq_table", "simplicity needs a frequency table")
    if {"top1", "top3"} & set(names) and lexicon is None:
        raise ConfigError("lexicon", "topic accuracy needs a lexicon")
    reports = []
    for name in names:
        values = []
        for row in rows:
            cand = data.tokenize(row["text"]) if not cfg["text"] else row["text"].split()
            ref = data.tokenize(row.get("reference", ""))
            if name == "flesch":
                values.append(metrics.flesch_score(cand) if any(map(metrics.is_word, cand)) else 0.0)
            elif name == "simplicity":
                words = [t for t in cand if metrics.is_word(t)]
                values.append(metrics.simplicity_score(words, freq) if words else 0.0)
            elif name in ("rouge1", "rouge2"):
                values.append(metrics.rouge_n_f1(cand, ref, int(name[-1])))
            elif name == "rougeL":
                values.append(metrics.rouge_l_f1(cand, ref))
            else:
                values.append(metrics.topk_topic_accuracy([cand], [row["topic"]], lexicon, int(name[-1])))
        reports.append(metrics.MetricReport(name, values))
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_report(reports, out / "report.tsv")
    write_resolved(out, "eval", cfg)
    return " ".join(f"{r.name}={r.mean:.4f}" for r in reports)


def gradcheck(seed: int, dims: Dims, epsilon: float = 1e-5, tol: float = 1e-4,
              init_scale: float = 1.0, coverage_weight: float = 1.0):
    """Analytic vs central-difference gradients of the full alpha=0 loss."""
    rng = substream(seed, "gradcheck")
    params = ModelParams.init(dims, rng, init_scale)
    V = dims.vocab
    n_oov = 2
    src = rng.integers(4, V + n_oov, size=7)
    tgt = np.append(rng.integers(4, V + n_oov, size=5), data.STOP_ID)
    ex = EncodedExample(src, tgt, tuple(f"oov{k}" for k in range(n_oov)), V + n_oov)
    _, grads, _ = nll_loss(params, ex, coverage_weight)

    def loss_fn(theta):
        sp = sequence_pass(ModelParams(dims, theta), ex.source_ids, ex.extended_size, targets=ex.target_ids)
        return sp.nll + coverage_weight * sp.coverage_loss

    numeric = finite_diff_gradient(loss_fn, params.flat.copy(), epsilon)
    report = check_gradients(grads.flat, numeric, tol)
    groups = {name: check_gradients(grads.flat[ix], numeric[ix], tol).max_error
              for name, ix in params.group_slices().items()}
    return report, groups


def cmd_gradcheck(cfg, out: Path):
    preset = DIM_PRESETS.get(cfg["dims"])
    if preset is None:
        raise ConfigError("dims", f"unknown preset {cfg['dims']!r}")
    dims = Dims(cfg["vocab_size"], preset["emb"], preset["hidden"], preset["attn"])
    report, groups = gradcheck(cfg["seed"], dims, cfg["epsilon"], cfg["tol"], cfg["init_scale"],
                               cfg["coverage_weight"])
    text = report.summary() + "\n" + "\n".join(f"  group {g}: {e:.3e}" for g, e in groups.items()) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.txt").write_text(text, encoding="utf-8")
    write_resolved(out, "gradcheck", cfg)
    sys.stdout.write(text)
    if not report.passed:
        raise SystemExit(1)
    return "gradients match"


COMMANDS = {
    "synth": cmd_synth, "build-vocab": cmd_build_vocab, "mix": cmd_mix, "train": cmd_train,
    "decode": cmd_decode, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tailorsum", description="Tailored pointer-generator summarization")
    sub = parser.add_subparsers(dest="command")
    for name, spec in SETTINGS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path)
        p.add_argument("--out", type=Path)
        for key in spec:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
    return parser


def output_dir(flag) -> Path:
    if flag is not None:
        return Path(flag)
    return Path(os.environ.get(OUT_ENV, "out"))


def run(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in COMMANDS:
        got = argv[0] if argv else ""
        sys.stderr.write(f"error field=command message=unknown command {got!r}\n")
        return 2
    args = parser.parse_args(argv)
    flags = vars(args)
    try:
        cfg = resolve(args.command, flags)
        message = COMMANDS[args.command](cfg, output_dir(args.out))
    except ConfigError as exc:
        sys.stderr.write(f"error field={exc.field} message={exc}\n")
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ValueError, OSError, RuntimeError) as exc:
        sys.stderr.write(f"error field=run message={str(exc).splitlines()[0]}\n")
        return 1
    print(message)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
