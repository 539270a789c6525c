"""Interleaved sequence training: label-smoothed MLE plus weighted
expected-risk steps on a schedule.

Every optimizer step accumulates the MLE gradients for one batch; after
the warmup epochs, every K-th step additionally accumulates the
lambda-weighted MRT gradients for the next MRT batch, so both objectives
land in a single clipped adaptive update. K is chosen so the MRT set is
traversed about once per epoch. With mrt_weight=0 the MRT branch is
skipped entirely and the run is a pure MLE baseline.

Config files are flat ``key = value`` text; every key must match a
TrainConfig field (unknown keys are a hard error). The metrics log is
one self-describing ``key=value`` record per optimizer step.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

import torch

from . import data as data_mod
from .mrt import EmptyBatch, MrtConfig, compute_mrt_loss
from .reward import RewardWeights
from .rng import Stream
from .seqmodel import (
    ModelConfig,
    ModelParams,
    NonFiniteGradient,
    ShapeMismatch,
    Vocab,
    encode,
    save_checkpoint,
    teacher_forced_logits,
)
from .similarity import SimilarityFunction, make_similarity

BETA1, BETA2, EPS_OPT = 0.9, 0.999, 1e-8

METRICS_DIR_ENV = "MOLMRT_METRICS_DIR"


@dataclass
class TrainConfig:
    corpus: str | None = None  # None: bundled corpus
    out_dir: str = "runs/default"
    seed: int = 0
    epochs: int = 20
    warmup_epochs: int = 5
    mle_batch: int = 32
    mrt_batch: int = 8
    mrt_weight: float = 0.1
    label_smoothing: float = 0.1
    learning_rate: float = 4e-4
    weight_decay: float = 1e-6
    warmup_fraction: float = 0.02
    cosine_decay: bool = True
    clip_norm: float = 1.0
    mrt_samples: int = 32
    mrt_temperature: float = 0.5
    mrt_alpha: float = 1.0
    max_len: int = 500
    sim_kind: str = "tanimoto"
    w_valid: float = 0.1
    w_sim: float = 0.5
    w_exact: float = 0.4
    feature_noise: float = 0.3
    embed_dim: int = 64
    hidden_dim: int = 128
    split_mle: float = 0.6
    split_mrt: float = 0.2
    split_eval: float = 0.2

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.mle_batch < 1 or self.mrt_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.mrt_weight < 0:
            raise ValueError("mrt_weight must be >= 0")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.warmup_fraction <= 1:
            raise ValueError("warmup_fraction must be in [0, 1]")
        if self.sim_kind not in ("edit_distance", "tanimoto", "visual"):
            raise ValueError(f"unknown sim_kind {self.sim_kind!r}")
        ratios = (self.split_mle, self.split_mrt, self.split_eval)
        if min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError("split ratios must be positive and sum to 1")
        self.reward_weights().validate()
        self.mrt_config().validate()
        return self

    def reward_weights(self) -> RewardWeights:
        return RewardWeights(self.w_valid, self.w_sim, self.w_exact)

    def mrt_config(self) -> MrtConfig:
        return MrtConfig(
            n_samples=self.mrt_samples,
            temperature=self.mrt_temperature,
            alpha=self.mrt_alpha,
            max_len=self.max_len,
            sim_kind=self.sim_kind,
            weights=self.reward_weights(),
        )

    def feature_spec(self) -> data_mod.FeatureSpec:
        return data_mod.FeatureSpec(sigma=self.feature_noise)


_BOOL_WORDS = {"true": True, "yes": True, "1": True,
               "false": False, "no": False, "0": False}


def load_config(path: str) -> TrainConfig:
    """Read ``key = value`` lines into a TrainConfig, strictly.

    Unknown keys, duplicate keys, and unparseable values are errors;
    missing keys keep their defaults.
    """
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    raw: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in text.split("=", 1))
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            if key in raw:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = value
    kwargs = {}
    for key, value in raw.items():
        ftype = fields[key].type
        try:
            if ftype == "int":
                kwargs[key] = int(value)
            elif ftype == "float":
                kwargs[key] = float(value)
            elif ftype == "bool":
                kwargs[key] = _BOOL_WORDS[value.lower()]
            elif ftype == "str | None":
                kwargs[key] = None if value.lower() == "none" else value
            else:
                kwargs[key] = value
        except (ValueError, KeyError) as exc:
            raise ValueError(
                f"{path}: bad value for {key!r}: {value!r}") from exc
    return TrainConfig(**kwargs).validate()


# ---------------------------------------------------------------------------
# Objective pieces


def mle_loss(params: ModelParams, batch, epsilon: float,
             vocab: Vocab) -> torch.Tensor:
    """Label-smoothed cross-entropy, averaged over non-PAD positions.

    batch: (features array (B, F), targets: EOS-terminated id lists).
    The smoothed target puts 1-epsilon on the gold token and
    epsilon/(V-1) on every other token.
    """
    features, targets = batch
    if len(targets) == 0:
        raise EmptyBatch("no items")
    for ids in targets:
        if not ids:
            raise EmptyBatch("empty target sequence")
        if ids[-1] != vocab.eos_id:
            raise ValueError("targets must end with EOS")
    hidden = encode(features, params)
    if hidden.dim() == 1:
        hidden = hidden.unsqueeze(0)
    logits, mask = teacher_forced_logits(params, hidden, targets,
                                         vocab.pad_id, vocab.bos_id)
    logp = torch.log_softmax(logits, dim=2)
    B, T = mask.shape
    tgt = torch.full((B, T), vocab.pad_id, dtype=torch.long)
    for b, ids in enumerate(targets):
        tgt[b, :len(ids)] = torch.tensor(ids, dtype=torch.long)
    gold = logp.gather(2, tgt.unsqueeze(2)).squeeze(2)
    V = vocab.size
    eps_term = (logp.sum(dim=2) - gold) * (epsilon / (V - 1))
    per_pos = -((1.0 - epsilon) * gold + eps_term)
    return (per_pos * mask).sum() / mask.sum()


def interleave_k(mle_size: int, mle_batch: int, mrt_size: int,
                 mrt_batch: int) -> int:
    """Steps between MRT triggers so the MRT set is seen ~once/epoch."""
    if min(mle_size, mle_batch, mrt_size, mrt_batch) < 1:
        raise ValueError("sizes and batches must be >= 1")
    t = math.ceil(mle_size / mle_batch)
    t_mrt = math.ceil(mrt_size / mrt_batch)
    return max(1, t // t_mrt)


def lr_at(step: int, total_steps: int, base_lr: float,
          warmup_fraction: float, cosine: bool = True) -> float:
    """Linear 0 -> base over the warmup steps, then cosine to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError("step outside schedule")
    w = math.ceil(warmup_fraction * total_steps)
    if step < w:
        return base_lr * step / w
    if not cosine:
        return base_lr
    if total_steps == w:
        return base_lr
    progress = (step - w) / (total_steps - w)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads: dict[str, torch.Tensor],
                   max_norm: float) -> tuple[dict[str, torch.Tensor], float]:
    """Scale all gradients by max_norm/norm when the global L2 norm
    exceeds max_norm; returns (grads, pre-clip norm)."""
    sq = 0.0
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
        sq += float((g * g).sum())
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {n: g * scale for n, g in grads.items()}
    return grads, norm


@dataclass
class OptimizerState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    t: int = 0

    @classmethod
    def init(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            m={n: torch.zeros_like(t) for n, t in params.named()},
            v={n: torch.zeros_like(t) for n, t in params.named()},
        )


def optimizer_step(params: ModelParams, grads: dict[str, torch.Tensor],
                   state: OptimizerState, lr: float,
                   weight_decay: float) -> None:
    """Bias-corrected adaptive update with decoupled weight decay."""
    state.t += 1
    t = state.t
    with torch.no_grad():
        for name, p in params.named():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient shape for {name}")
            m = state.m[name]
            v = state.v[name]
            m.mul_(BETA1).add_(g, alpha=1.0 - BETA1)
            v.mul_(BETA2).addcmul_(g, g, value=1.0 - BETA2)
            mhat = m / (1.0 - BETA1 ** t)
            vhat = v / (1.0 - BETA2 ** t)
            p -= lr * (mhat / (vhat.sqrt() + EPS_OPT) + weight_decay * p)


# ---------------------------------------------------------------------------
# Logging


@dataclass
class TrainRecord:
    epoch: int
    step: int  # 0-based position within the epoch
    kind: str  # "mle" or "mle+mrt"
    mle_loss: float
    mrt_loss: float | None
    mean_reward: float | None
    lr: float
    grad_norm: float

    def line(self) -> str:
        def fmt(v):
            return "none" if v is None else repr(v)
        return (f"epoch={self.epoch} step={self.step} kind={self.kind} "
                f"mle_loss={fmt(self.mle_loss)} mrt_loss={fmt(self.mrt_loss)} "
                f"mean_reward={fmt(self.mean_reward)} lr={fmt(self.lr)} "
                f"grad_norm={fmt(self.grad_norm)}")


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def append(self, rec: TrainRecord) -> None:
        self.records.append(rec)

    def lines(self) -> list[str]:
        return [r.line() for r in self.records]


@dataclass
class TrainResult:
    params: ModelParams
    vocab: Vocab
    log: TrainLog
    final_checkpoint: str
    metrics_path: str
    epoch_checkpoints: list[str]


# ---------------------------------------------------------------------------
# The loop


def _tokenized(dataset: data_mod.Dataset, vocab: Vocab) -> list[list[int]]:
    return [vocab.tokenize(it.smiles) + [vocab.eos_id]
            for it in dataset.items]


def build_training_inputs(config: TrainConfig):
    """Corpus -> (mle_dataset, mrt_dataset) per the config's splits."""
    path = config.corpus or data_mod.bundled_corpus_path()
    corpus = data_mod.load_corpus(path)
    spec = config.feature_spec()
    splits = data_mod.make_splits(
        corpus, (config.split_mle, config.split_mrt, config.split_eval),
        config.seed)
    stats = data_mod.feature_stats(corpus, spec)
    mle_ds = data_mod.build_dataset(corpus, splits.mle_train, spec,
                                    config.seed, stats)
    mrt_ds = data_mod.build_dataset(corpus, splits.mrt_train, spec,
                                    config.seed, stats)
    return mle_ds, mrt_ds


def train(config: TrainConfig,
          mle_dataset: data_mod.Dataset | None = None,
          mrt_dataset: data_mod.Dataset | None = None,
          sim_fn: SimilarityFunction | None = None) -> TrainResult:
    """Run the full interleaved schedule; returns params, log, paths.

    Deterministic for a fixed config: data order, initialization, and
    candidate sampling all come from counter-based streams keyed by the
    config seed. Aborts (after writing a diagnostic dump) on non-finite
    gradients.
    """
    config.validate()
    if (mle_dataset is None) != (mrt_dataset is None):
        raise ValueError("provide both datasets or neither")
    if mle_dataset is None:
        mle_dataset, mrt_dataset = build_training_inputs(config)
    if len(mle_dataset) == 0 or len(mrt_dataset) == 0:
        raise EmptyBatch("datasets must be non-empty")
    if sim_fn is None:
        sim_fn = make_similarity(config.sim_kind)

    vocab = data_mod.build_vocab(mle_dataset, mrt_dataset)
    spec = config.feature_spec()
    model_cfg = ModelConfig(vocab_size=vocab.size, feature_dim=spec.dim,
                            embed_dim=config.embed_dim,
                            hidden_dim=config.hidden_dim)
    params = ModelParams(model_cfg, seed=config.seed)
    opt = OptimizerState.init(params)

    mle_feats = torch.from_numpy(mle_dataset.feature_matrix())
    mle_targets = _tokenized(mle_dataset, vocab)
    mrt_feats = torch.from_numpy(mrt_dataset.feature_matrix())
    mrt_truths = mrt_dataset.strings()

    n_mle = len(mle_dataset)
    n_mrt = len(mrt_dataset)
    B = config.mle_batch
    Bp = config.mrt_batch
    T = math.ceil(n_mle / B)
    total_steps = T * config.epochs
    K = interleave_k(n_mle, B, n_mrt, Bp)
    mrt_cfg = config.mrt_config()

    # Persistent without-replacement cursor over the MRT set.
    mrt_order: list[int] = []
    mrt_pos = 0
    mrt_pass = 0

    def next_mrt_batch() -> list[int]:
        nonlocal mrt_order, mrt_pos, mrt_pass
        out: list[int] = []
        while len(out) < Bp:
            if mrt_pos >= len(mrt_order):
                mrt_order = Stream(config.seed, "mrtorder",
                                   mrt_pass).permutation(n_mrt)
                mrt_pass += 1
                mrt_pos = 0
            take = min(Bp - len(out), len(mrt_order) - mrt_pos)
            out.extend(mrt_order[mrt_pos:mrt_pos + take])
            mrt_pos += take
        return out

    os.makedirs(config.out_dir, exist_ok=True)
    metrics_dir = os.environ.get(METRICS_DIR_ENV) or config.out_dir
    os.makedirs(metrics_dir, exist_ok=True)
    metrics_path = os.path.join(metrics_dir, "metrics.log")

    log = TrainLog()
    epoch_ckpts: list[str] = []
    global_step = 0
    mrt_calls = 0

    with open(metrics_path, "w", encoding="utf-8") as metrics:
        for epoch in range(1, config.epochs + 1):
            order = Stream(config.seed, "order", epoch).permutation(n_mle)
            in_warmup = epoch <= config.warmup_epochs
            for s, start in enumerate(range(0, n_mle, B)):
                rows = order[start:start + B]
                batch = (mle_feats[rows],
                         [mle_targets[r] for r in rows])
                params.zero_grad()
                loss_mle = mle_loss(params, batch, config.label_smoothing,
                                    vocab)
                loss_mle.backward()

                kind = "mle"
                mrt_val: float | None = None
                mean_reward: float | None = None
                if (not in_warmup and config.mrt_weight > 0.0
                        and s % K == 0):
                    idx = next_mrt_batch()
                    hidden = encode(mrt_feats[idx], params)
                    streams = [Stream(config.seed, "sample", mrt_calls, slot)
                               for slot in range(len(idx))]
                    loss_mrt, cset = compute_mrt_loss(
                        params, hidden, [mrt_truths[i] for i in idx],
                        mrt_cfg, sim_fn, streams, vocab)
                    (config.mrt_weight * loss_mrt).backward()
                    mrt_calls += 1
                    kind = "mle+mrt"
                    mrt_val = float(loss_mrt.detach())
                    mean_reward = cset.mean_reward

                grads = params.grads()
                try:
                    grads, norm = clip_gradients(grads, config.clip_norm)
                except NonFiniteGradient:
                    dump = os.path.join(config.out_dir, "diverged.txt")
                    with open(dump, "w", encoding="utf-8") as fh:
                        fh.write(f"epoch={epoch} step={s} "
                                 f"mle_loss={float(loss_mle.detach())!r}\n")
                    raise
                lr = lr_at(global_step, total_steps, config.learning_rate,
                           config.warmup_fraction, config.cosine_decay)
                optimizer_step(params, grads, opt, lr, config.weight_decay)

                rec = TrainRecord(epoch, s, kind,
                                  float(loss_mle.detach()), mrt_val,
                                  mean_reward, lr, norm)
                log.append(rec)
                metrics.write(rec.line() + "\n")
                global_step += 1
            ck = os.path.join(config.out_dir, f"epoch_{epoch:03d}.ckpt")
            save_checkpoint(ck, params, vocab)
            epoch_ckpts.append(ck)

    final = os.path.join(config.out_dir, "final.ckpt")
    save_checkpoint(final, params, vocab)
    return TrainResult(params, vocab, log, final, metrics_path, epoch_ckpts)
