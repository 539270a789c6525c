"""Sequence-level expected-risk loss over sampled candidate sets.

For each conditioning input, N candidates are drawn by multinomial
decoding (no gradients), scored with the composite reward (constants),
then re-scored with teacher-forced temperature-1 log-probabilities
(with gradients). The loss is

    mean over items of  sum_i Q_a(i) * (1 - R_i),
    Q_a = softmax(a * logprob_i over the N candidates)

and is differentiable through both the re-scoring and the Q_a weights;
sampling temperature affects only exploration, never the scored
probabilities. Duplicate candidates are kept as drawn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .molgraph import PRESERVE
from .reward import (
    DEFAULT_WEIGHTS,
    RewardBreakdown,
    RewardWeights,
    compute_rewards_batch,
)
from .rng import Stream
from .seqmodel import (
    ModelParams,
    Vocab,
    sample_decode_batch,
    teacher_forced_logits,
)
from .similarity import SimilarityFunction

_DTYPE = torch.float64


class EmptyBatch(ValueError):
    pass


@dataclass(frozen=True)
class MrtConfig:
    n_samples: int = 32
    temperature: float = 0.5
    alpha: float = 1.0
    max_len: int = 500
    sim_kind: str = "tanimoto"
    weights: RewardWeights = field(default_factory=lambda: DEFAULT_WEIGHTS)
    stereo: str = PRESERVE

    def validate(self) -> "MrtConfig":
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        self.weights.validate()
        return self


@dataclass
class CandidateItem:
    """Diagnostics for one item's N candidates."""

    truth: str
    candidates: list[str]
    token_seqs: list[list[int]]
    truncated: list[bool]
    logprobs: list[float]  # temperature-1, from re-scoring
    rewards: list[RewardBreakdown]
    q_weights: list[float]


@dataclass
class CandidateSet:
    items: list[CandidateItem]
    mean_reward: float
    validity_rate: float
    exact_rate: float
    mean_q_entropy: float


def sharpen_weights(logprobs, alpha: float) -> torch.Tensor:
    """softmax(alpha * logprobs): sharpened normalized candidate weights.

    Tensor input keeps its gradient path (the weights depend on the
    model and participate in backward); list input returns a plain
    tensor. Numerically stabilized by max subtraction inside softmax.
    """
    lp = logprobs if isinstance(logprobs, torch.Tensor) else torch.tensor(
        [float(x) for x in logprobs], dtype=_DTYPE)
    if lp.numel() == 0:
        raise ValueError("logprobs must be non-empty")
    return torch.softmax(alpha * lp, dim=-1)


def _score_targets(params: ModelParams, hidden: torch.Tensor,
                   flat_targets: list[list[int]], vocab: Vocab
                   ) -> torch.Tensor:
    """Teacher-forced temperature-1 total logprob per target, with grad.

    Unlike the public teacher-forcing op this accepts truncated (non-EOS)
    targets: such candidates are scored on exactly the tokens they emitted.
    """
    logits, mask = teacher_forced_logits(params, hidden, flat_targets,
                                         vocab.pad_id, vocab.bos_id)
    logp = torch.log_softmax(logits, dim=2)
    T = mask.shape[1]
    tgt = torch.full((len(flat_targets), T), vocab.pad_id, dtype=torch.long)
    for b, ids in enumerate(flat_targets):
        tgt[b, :len(ids)] = torch.tensor(ids, dtype=torch.long)
    per_token = logp.gather(2, tgt.unsqueeze(2)).squeeze(2) * mask
    return per_token.sum(dim=1)


def expected_risk(params: ModelParams, hidden: torch.Tensor,
                  token_seqs: list[list[list[int]]],
                  reward_totals: list[list[float]],
                  alpha: float, vocab: Vocab
                  ) -> tuple[torch.Tensor, list[torch.Tensor], list[torch.Tensor]]:
    """Differentiable phases 3-4 on a frozen candidate set.

    hidden: (B, H) gradient-carrying; token_seqs[b] holds item b's
    candidate scoring targets (EOS included where the sample terminated);
    reward_totals are constants. Returns (scalar mean risk, per-item Q
    tensors, per-item logprob tensors).
    """
    B = len(token_seqs)
    if B == 0:
        raise EmptyBatch("no items")
    if hidden.shape[0] != B:
        raise EmptyBatch("hidden rows do not match items")
    counts = [len(seqs) for seqs in token_seqs]
    if any(c == 0 for c in counts):
        raise EmptyBatch("an item has no candidates")
    flat = [seq for seqs in token_seqs for seq in seqs]
    rows = torch.repeat_interleave(
        torch.arange(B), torch.tensor(counts))
    lp_flat = _score_targets(params, hidden[rows], flat, vocab)
    losses = []
    qs = []
    lps = []
    offset = 0
    for b in range(B):
        lp = lp_flat[offset:offset + counts[b]]
        offset += counts[b]
        q = sharpen_weights(lp, alpha)
        r = torch.tensor(reward_totals[b], dtype=_DTYPE)
        losses.append((q * (1.0 - r)).sum())
        qs.append(q)
        lps.append(lp)
    loss = torch.stack(losses).mean()
    return loss, qs, lps


def _scoring_target(seq: list[int], truncated: bool, eos_id: int) -> list[int]:
    return list(seq) if truncated else list(seq) + [eos_id]


def compute_mrt_loss(params: ModelParams, hidden_batch: torch.Tensor,
                     truths: list[str], config: MrtConfig,
                     sim_fn: SimilarityFunction, rng: list[Stream],
                     vocab: Vocab) -> tuple[torch.Tensor, CandidateSet]:
    """Full candidate-sampling expected-risk loss for one batch.

    truths are canonical reference strings; rng supplies one counter
    stream per item. The returned loss is differentiable wrt params and
    the encoder path feeding hidden_batch; rewards are constants.
    """
    config.validate()
    B = len(truths)
    if B == 0:
        raise EmptyBatch("no items")
    if hidden_batch.dim() != 2 or hidden_batch.shape[0] != B:
        raise EmptyBatch("hidden batch does not match truths")
    if len(rng) != B:
        raise ValueError("need one rng stream per item")

    decoded = sample_decode_batch(params, hidden_batch, config.n_samples,
                                  config.temperature, config.max_len,
                                  rng, vocab)

    token_seqs: list[list[list[int]]] = []
    reward_totals: list[list[float]] = []
    all_rewards: list[list[RewardBreakdown]] = []
    all_strings: list[list[str]] = []
    for b, dr in enumerate(decoded):
        strings = [vocab.render(seq) for seq in dr.sequences]
        rewards = compute_rewards_batch(strings, truths[b], sim_fn,
                                        config.weights, config.stereo)
        token_seqs.append([
            _scoring_target(seq, tr, vocab.eos_id)
            for seq, tr in zip(dr.sequences, dr.truncated)
        ])
        reward_totals.append([rb.total for rb in rewards])
        all_rewards.append(rewards)
        all_strings.append(strings)

    loss, qs, lps = expected_risk(params, hidden_batch, token_seqs,
                                  reward_totals, config.alpha, vocab)

    items = []
    n_all = 0
    sum_reward = 0.0
    n_valid = 0
    n_exact = 0
    entropy = 0.0
    for b, dr in enumerate(decoded):
        q = [float(x) for x in qs[b].detach()]
        lp = [float(x) for x in lps[b].detach()]
        items.append(CandidateItem(
            truth=truths[b],
            candidates=all_strings[b],
            token_seqs=token_seqs[b],
            truncated=list(dr.truncated),
            logprobs=lp,
            rewards=all_rewards[b],
            q_weights=q,
        ))
        for rb in all_rewards[b]:
            n_all += 1
            sum_reward += rb.total
            n_valid += int(rb.valid)
            n_exact += int(rb.exact)
        entropy += -sum(w * math.log(w) for w in q if w > 0.0)
    cset = CandidateSet(
        items=items,
        mean_reward=sum_reward / n_all,
        validity_rate=n_valid / n_all,
        exact_rate=n_exact / n_all,
        mean_q_entropy=entropy / B,
    )
    return loss, cset


@dataclass
class DirectionCheckReport:
    passed: bool
    gap_before: float
    gaps_after: dict[float, float]


def mrt_gradient_direction_check(
        step_sizes: tuple[float, ...] = (1e-1, 1e-2, 1e-3)
) -> DirectionCheckReport:
    """Sanity-check the sign of the learning signal on a 2-candidate world.

    With rewards (1, 0) and a frozen candidate pair, one plain gradient
    step along the negative risk gradient must strictly widen the
    log-probability gap toward the higher-reward candidate for at least
    one of the line-searched step sizes.
    """
    from .seqmodel import ModelConfig, encode

    vocab = Vocab(("C", "N", "O"))
    cfg = ModelConfig(vocab_size=vocab.size, feature_dim=2,
                      embed_dim=4, hidden_dim=6)
    params = ModelParams(cfg, seed=17)
    feats = torch.tensor([0.3, -0.2], dtype=_DTYPE)

    hi = vocab.tokenize("CO") + [vocab.eos_id]
    lo = vocab.tokenize("CN") + [vocab.eos_id]
    seqs = [[hi, lo]]
    rewards = [[1.0, 0.0]]

    def gap(p: ModelParams) -> float:
        h = encode(feats, p).unsqueeze(0)
        _, _, lps = expected_risk(p, h, seqs, rewards, alpha=1.0, vocab=vocab)
        lp = lps[0].detach()
        return float(lp[0] - lp[1])

    h = encode(feats, params).unsqueeze(0)
    loss, _, _ = expected_risk(params, h, seqs, rewards, alpha=1.0,
                               vocab=vocab)
    params.zero_grad()
    loss.backward()
    grads = {n: t.grad.detach().clone() for n, t in params.named()
             if t.grad is not None}

    before = gap(params)
    after = {}
    for eta in step_sizes:
        p2 = params.clone()
        with torch.no_grad():
            for n, t in p2.named():
                if n in grads:
                    t -= eta * grads[n]
        after[eta] = gap(p2)
    passed = any(g > before for g in after.values())
    return DirectionCheckReport(passed=passed, gap_before=before,
                                gaps_after=after)
