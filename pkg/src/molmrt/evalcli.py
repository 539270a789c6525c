"""Evaluation protocol and the command-line front end.

Evaluation normalizes both sides the same way: parse, collapse numbered
wildcard placeholders to the plain wildcard, ignore cis/trans bond
markers, and canonicalize under the configured stereo mode. A prediction
that fails anywhere along that path scores zero on every metric; a
reference that fails aborts with CorruptGroundTruth, naming the pair.

Subcommands: train, eval, reward, canon, sample. Usage errors exit 1,
runtime failures exit 2, diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, field

import torch

from . import data as data_mod
from .molgraph import (
    PRESERVE,
    STRIP,
    InvalidMolecule,
    ParseError,
    analyze,
    canonicalize,
    parse_smiles,
    strip_rgroup_labels,
)
from .reward import (
    CorruptGroundTruth,
    DEFAULT_WEIGHTS,
    RewardWeights,
    compose_total,
    compute_reward,
)
from .rng import Stream
from .seqmodel import (
    CheckpointError,
    ModelParams,
    Vocab,
    encode,
    greedy_decode_batch,
    sample_decode,
    load_checkpoint,
)
from .similarity import SIM_KINDS, make_similarity
from .trainer import TrainConfig, load_config, train

_STEREO_MODES = (PRESERVE, STRIP)


@dataclass(frozen=True)
class EvalOptions:
    stereo: str = PRESERVE
    rgroup_wildcarding: bool = True
    sim_kind: str = "tanimoto"

    def validate(self) -> "EvalOptions":
        if self.stereo not in _STEREO_MODES:
            raise ValueError(f"unknown stereo mode {self.stereo!r}")
        if self.sim_kind not in SIM_KINDS:
            raise ValueError(f"unknown sim kind {self.sim_kind!r}")
        return self


def normalize_for_eval(s: str, opts: EvalOptions) -> str | None:
    """Canonical comparison form, or None when s cannot be scored.

    Numbered wildcards ("[2*]") and the bare wildcard collapse to one
    form when wildcarding is on; cis/trans markers are already ignored
    by the parser. None covers both parse and valence failures.
    """
    try:
        g = parse_smiles(s)
        if opts.rgroup_wildcarding:
            g = strip_rgroup_labels(g)
        return canonicalize(g, stereo=opts.stereo)
    except (ParseError, InvalidMolecule):
        return None


@dataclass(frozen=True)
class EvalRecord:
    index: int
    pred: str
    truth: str
    parsed: bool
    valid: bool
    exact: bool
    similarity: float
    reward: float

    def line(self) -> str:
        return (f"idx={self.index} parsed={int(self.parsed)} "
                f"valid={int(self.valid)} exact={int(self.exact)} "
                f"sim={self.similarity!r} reward={self.reward!r} "
                f"pred={self.pred!r} truth={self.truth!r}")


@dataclass(frozen=True)
class EvalReport:
    n_total: int
    n_parsed: int
    n_valid: int
    n_exact: int
    exact_rate: float
    validity_rate: float
    mean_similarity: float
    mean_reward: float
    sim_kind: str
    records: tuple[EvalRecord, ...] = field(repr=False, default=())

    def summary_line(self) -> str:
        return (f"n_total={self.n_total} n_parsed={self.n_parsed} "
                f"n_valid={self.n_valid} n_exact={self.n_exact} "
                f"exact_rate={self.exact_rate!r} "
                f"validity_rate={self.validity_rate!r} "
                f"mean_similarity={self.mean_similarity!r} "
                f"mean_reward={self.mean_reward!r} "
                f"sim_kind={self.sim_kind}")

    def pretty(self) -> str:
        rows = [
            ("pairs", str(self.n_total)),
            ("parsed", str(self.n_parsed)),
            ("valid", str(self.n_valid)),
            ("exact", str(self.n_exact)),
            ("exact match", f"{self.exact_rate:.4f}"),
            ("validity", f"{self.validity_rate:.4f}"),
            (f"mean sim ({self.sim_kind})", f"{self.mean_similarity:.4f}"),
            ("mean reward", f"{self.mean_reward:.4f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)

    def write_file(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.summary_line() + "\n")
            for rec in self.records:
                fh.write(rec.line() + "\n")


def evaluate(pred_pairs, opts: EvalOptions, sim_fn=None,
             weights: RewardWeights = DEFAULT_WEIGHTS) -> EvalReport:
    """Score (prediction, truth) pairs; aggregates are over all pairs.

    Similarity is computed between the raw prediction and the
    normalized truth (identical either way for the structural kinds),
    and zeroed for invalid predictions, matching the reward gate.
    """
    opts.validate()
    weights.validate()
    if sim_fn is None:
        sim_fn = make_similarity(opts.sim_kind)
    pairs = list(pred_pairs)
    truths_norm: list[str] = []
    for i, (_, truth) in enumerate(pairs):
        norm = normalize_for_eval(truth, opts)
        if norm is None:
            raise CorruptGroundTruth(f"pair {i}: bad reference {truth!r}")
        truths_norm.append(norm)
    records = []
    n_parsed = n_valid = n_exact = 0
    sims: list[float] = []
    rewards: list[float] = []
    for i, ((pred, _), truth_norm) in enumerate(zip(pairs, truths_norm)):
        an = analyze(pred)
        parsed, valid = an.parsed, an.valid
        pred_norm = normalize_for_eval(pred, opts) if valid else None
        exact = pred_norm is not None and pred_norm == truth_norm
        if valid:
            sim = min(1.0, max(0.0, sim_fn.evaluate(pred, truth_norm)))
        else:
            sim = 0.0
        total = compose_total(valid, sim, exact, weights)
        n_parsed += parsed
        n_valid += valid
        n_exact += exact
        sims.append(sim)
        rewards.append(total)
        records.append(EvalRecord(i, pred, truth_norm, parsed, valid,
                                  exact, sim, total))
    n = len(pairs)
    div = n if n else 1
    # fsum keeps the aggregates independent of pair order to the last bit
    return EvalReport(
        n_total=n, n_parsed=n_parsed, n_valid=n_valid, n_exact=n_exact,
        exact_rate=n_exact / div, validity_rate=n_valid / div,
        mean_similarity=math.fsum(sims) / div,
        mean_reward=math.fsum(rewards) / div,
        sim_kind=sim_fn.kind, records=tuple(records))


# ---------------------------------------------------------------------------
# Checkpoint evaluation (greedy decoding over a corpus split)

_DECODE_CHUNK = 64


def _decode_strings(params: ModelParams, vocab: Vocab, features,
                    max_len: int) -> list[str]:
    out: list[str] = []
    feats = torch.as_tensor(features, dtype=torch.float64)
    for start in range(0, feats.shape[0], _DECODE_CHUNK):
        hidden = encode(feats[start:start + _DECODE_CHUNK], params)
        for ids in greedy_decode_batch(params, hidden, max_len, vocab):
            out.append(vocab.render(ids))
    return out


def evaluate_checkpoint(config: TrainConfig, checkpoint: str,
                        split: str = "eval", sim_kind: str | None = None,
                        stereo: str = PRESERVE) -> EvalReport:
    """Greedy-decode one corpus split with a saved model and score it."""
    params, vocab = load_checkpoint(checkpoint)
    path = config.corpus or data_mod.bundled_corpus_path()
    corpus = data_mod.load_corpus(path)
    spec = config.feature_spec()
    splits = data_mod.make_splits(
        corpus, (config.split_mle, config.split_mrt, config.split_eval),
        config.seed)
    try:
        indices = {"mle": splits.mle_train, "mrt": splits.mrt_train,
                   "eval": splits.eval}[split]
    except KeyError:
        raise ValueError(f"unknown split {split!r}") from None
    stats = data_mod.feature_stats(corpus, spec)
    ds = data_mod.build_dataset(corpus, indices, spec, config.seed, stats)
    preds = _decode_strings(params, vocab, ds.feature_matrix(),
                            config.max_len)
    opts = EvalOptions(stereo=stereo,
                       sim_kind=sim_kind or config.sim_kind)
    sim_fn = make_similarity(opts.sim_kind)
    return evaluate(list(zip(preds, ds.strings())), opts, sim_fn,
                    config.reward_weights())


# ---------------------------------------------------------------------------
# CLI


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1, not argparse's default 2
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="molmrt",
                description="Train and evaluate the recognition model.")
    sub = p.add_subparsers(dest="command", metavar="command")

    t = sub.add_parser("train", help="run the interleaved training loop")
    t.add_argument("--config", required=True, help="key = value file")
    t.add_argument("--seed", type=int, help="override config seed")
    t.add_argument("--lambda", dest="mrt_weight", type=float,
                   help="override the expected-risk loss weight")
    t.add_argument("--sim", choices=SIM_KINDS, help="override sim kind")
    t.add_argument("--out", help="override output directory")

    e = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="training config (defaults apply)")
    e.add_argument("--split", default="eval",
                   choices=("mle", "mrt", "eval"))
    e.add_argument("--sim", choices=SIM_KINDS)
    e.add_argument("--stereo", default=PRESERVE, choices=_STEREO_MODES)
    e.add_argument("--report", help="report path (default: beside "
                                    "the checkpoint)")

    r = sub.add_parser("reward", help="score one prediction")
    r.add_argument("--pred", required=True)
    r.add_argument("--truth", required=True)
    r.add_argument("--sim", default="tanimoto", choices=SIM_KINDS)
    r.add_argument("--stereo", default=PRESERVE, choices=_STEREO_MODES)

    c = sub.add_parser("canon", help="print the canonical form")
    c.add_argument("--smiles", required=True)
    c.add_argument("--strip-stereo", action="store_true")

    s = sub.add_parser("sample", help="show a model's candidate set "
                                      "for one molecule")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--smiles", required=True,
                   help="the reference structure to condition on")
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--temperature", type=float, default=0.5)
    s.add_argument("--config", help="training config (defaults apply)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sim", default="tanimoto", choices=SIM_KINDS)
    return p


def _load_train_config(path: str | None) -> TrainConfig:
    return load_config(path) if path else TrainConfig()


def _cmd_train(args) -> int:
    config = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mrt_weight is not None:
        overrides["mrt_weight"] = args.mrt_weight
    if args.sim is not None:
        overrides["sim_kind"] = args.sim
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        import dataclasses
        config = dataclasses.replace(config, **overrides)
        config.validate()
    result = train(config)
    last = result.log.records[-1]
    print(f"trained {last.epoch} epochs, {len(result.log.records)} steps")
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _cmd_eval(args) -> int:
    config = _load_train_config(args.config)
    report = evaluate_checkpoint(config, args.checkpoint, args.split,
                                 args.sim, args.stereo)
    print(report.pretty())
    path = args.report or os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)),
        "eval_report.txt")
    report.write_file(path)
    print(f"report written to {path}")
    return 0


def _cmd_reward(args) -> int:
    sim_fn = make_similarity(args.sim)
    br = compute_reward(args.pred, args.truth, sim_fn,
                        stereo=args.stereo)
    print(f"valid   {int(br.valid)}")
    print(f"exact   {int(br.exact)}")
    print(f"sim     {br.sim:.6f} ({args.sim})")
    print(f"total   {br.total:.6f}")
    return 0


def _cmd_canon(args) -> int:
    stereo = STRIP if args.strip_stereo else PRESERVE
    g = parse_smiles(args.smiles)
    print(canonicalize(g, stereo=stereo))
    return 0


def _cmd_sample(args) -> int:
    config = _load_train_config(args.config)
    params, vocab = load_checkpoint(args.checkpoint)
    truth = canonicalize(parse_smiles(args.smiles))
    path = config.corpus or data_mod.bundled_corpus_path()
    corpus = data_mod.load_corpus(path)
    spec = config.feature_spec()
    stats = data_mod.feature_stats(corpus, spec)
    noiseless = data_mod.featurize(parse_smiles(args.smiles),
                                   data_mod.FeatureSpec(sigma=0.0))
    feats = (noiseless - stats[0]) / stats[1]
    hidden = encode(feats, params)
    result = sample_decode(params, hidden, args.n, args.temperature,
                           config.max_len, Stream(args.seed, "cli-sample"),
                           vocab)
    sim_fn = make_similarity(args.sim)
    rows = []
    for ids, lp in zip(result.sequences, result.logprob):
        text = vocab.render(ids)
        br = compute_reward(text, truth, sim_fn)
        rows.append((lp, text, br))
    rows.sort(key=lambda r: -r[0])
    print(f"truth: {truth}")
    print(f"{'logprob':>10}  {'reward':>7}  {'V':>1} {'E':>1}  candidate")
    for lp, text, br in rows:
        print(f"{lp:10.3f}  {br.total:7.4f}  {int(br.valid)} "
              f"{int(br.exact)}  {text}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "reward": _cmd_reward,
    "canon": _cmd_canon,
    "sample": _cmd_sample,
}


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("a subcommand is required")
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (ParseError, InvalidMolecule, CorruptGroundTruth,
            CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
