"""Expected-risk objective over sampled candidate sets."""

import math

import torch
import pytest

from molmrt.mrt import (
    EmptyBatch,
    MrtConfig,
    compute_mrt_loss,
    expected_risk,
    mrt_gradient_direction_check,
    sharpen_weights,
)
from molmrt.reward import RewardWeights
from molmrt.rng import Stream
from molmrt.seqmodel import ModelConfig, ModelParams, Vocab
from molmrt.similarity import make_similarity


@pytest.fixture()
def tiny():
    vocab = Vocab(("C", "N", "O", "(", ")", "=", "1"))
    config = ModelConfig(vocab_size=vocab.size, feature_dim=5,
                         embed_dim=8, hidden_dim=9)
    params = ModelParams(config, seed=2)
    return vocab, config, params


def seqs(vocab, *strings):
    return [vocab.tokenize(s) + [vocab.eos_id] for s in strings]


# ---------------------------------------------------------------------------
# candidate weights


def test_sharpen_weights_matches_manual_softmax():
    lp = [-1.0, -2.0, -3.0]
    for alpha in (0.5, 1.0, 2.0):
        w = sharpen_weights(lp, alpha)
        z = [math.exp(alpha * x) for x in lp]
        want = [v / sum(z) for v in z]
        assert torch.allclose(w, torch.tensor(want, dtype=torch.float64))
        assert w.sum().item() == pytest.approx(1.0)


def test_sharpen_weights_alpha_zero_is_uniform():
    w = sharpen_weights([-5.0, -1.0, -9.0, -2.0], 0.0)
    assert torch.allclose(w, torch.full((4,), 0.25, dtype=torch.float64))


def test_sharpen_weights_large_alpha_concentrates():
    w = sharpen_weights([-1.0, -2.0], 50.0)
    assert w[0].item() > 0.999


def test_sharpen_weights_keeps_gradient_path():
    lp = torch.tensor([-1.0, -2.0], dtype=torch.float64, requires_grad=True)
    w = sharpen_weights(lp, 1.0)
    w[0].backward()
    assert lp.grad is not None and torch.isfinite(lp.grad).all()


def test_sharpen_weights_rejects_empty():
    with pytest.raises(ValueError):
        sharpen_weights([], 1.0)


# ---------------------------------------------------------------------------
# expected risk


def test_expected_risk_hand_value(tiny):
    vocab, config, params = tiny
    h = torch.zeros((1, config.hidden_dim), dtype=torch.float64)
    cands = [seqs(vocab, "C", "CC")]
    rewards = [[1.0, 0.0]]
    risk, qs, lps = expected_risk(params, h, cands, rewards, 1.0, vocab)
    q = qs[0]
    want = q[0].item() * 0.0 + q[1].item() * 1.0
    assert risk.item() == pytest.approx(want, rel=1e-12)
    assert q.sum().item() == pytest.approx(1.0)
    assert len(lps[0]) == 2


def test_expected_risk_mean_over_items(tiny):
    vocab, config, params = tiny
    h = torch.zeros((2, config.hidden_dim), dtype=torch.float64)
    cands = [seqs(vocab, "C", "CC"), seqs(vocab, "N", "NO")]
    rewards = [[1.0, 0.0], [0.5, 0.5]]
    both, _, _ = expected_risk(params, h, cands, rewards, 1.0, vocab)
    first, _, _ = expected_risk(params, h[:1], cands[:1], rewards[:1], 1.0, vocab)
    second, _, _ = expected_risk(params, h[1:], cands[1:], rewards[1:], 1.0, vocab)
    assert both.item() == pytest.approx((first.item() + second.item()) / 2, rel=1e-12)


def test_equal_rewards_give_zero_gradient(tiny):
    # when every candidate earns the same reward there is nothing to
    # rank, and the objective must be flat in the parameters
    vocab, config, params = tiny
    h = torch.zeros((1, config.hidden_dim), dtype=torch.float64)
    cands = [seqs(vocab, "C", "CC", "NO")]
    risk, _, _ = expected_risk(params, h, cands, [[0.7, 0.7, 0.7]], 1.0, vocab)
    risk.backward()
    for name, t in params.named():
        if t.grad is not None:
            assert t.grad.abs().max().item() < 1e-12, name
    assert risk.item() == pytest.approx(0.3, rel=1e-12)


def test_mixed_rewards_give_nonzero_gradient(tiny):
    vocab, config, params = tiny
    h = torch.zeros((1, config.hidden_dim), dtype=torch.float64)
    cands = [seqs(vocab, "C", "CC", "NO")]
    risk, _, _ = expected_risk(params, h, cands, [[1.0, 0.0, 0.0]], 1.0, vocab)
    risk.backward()
    total = sum(t.grad.abs().sum().item() for _, t in params.named()
                if t.grad is not None)
    assert total > 1e-6


def test_expected_risk_rejects_empty(tiny):
    vocab, config, params = tiny
    h = torch.zeros((0, config.hidden_dim), dtype=torch.float64)
    with pytest.raises(EmptyBatch):
        expected_risk(params, h, [], [], 1.0, vocab)
    h1 = torch.zeros((1, config.hidden_dim), dtype=torch.float64)
    with pytest.raises(EmptyBatch):
        expected_risk(params, h1, [[]], [[]], 1.0, vocab)


# ---------------------------------------------------------------------------
# full sampled loss


def make_cfg(**kw):
    defaults = dict(n_samples=6, temperature=0.7, alpha=1.0, max_len=10,
                    sim_kind="tanimoto", weights=RewardWeights(0.1, 0.5, 0.4),
                    stereo="preserve_tetrahedral")
    defaults.update(kw)
    return MrtConfig(**defaults)


def test_compute_mrt_loss_deterministic(tiny):
    vocab, config, params = tiny
    h = torch.zeros((2, config.hidden_dim), dtype=torch.float64)
    sim = make_similarity("tanimoto")
    cfg = make_cfg()

    def run():
        streams = [Stream(0, "mrt", i) for i in range(2)]
        loss, cs = compute_mrt_loss(params, h, ["CCO", "CN"], cfg, sim,
                                    streams, vocab)
        return loss.item(), cs

    l1, cs1 = run()
    l2, cs2 = run()
    assert l1 == l2
    assert [i.candidates for i in cs1.items] == [i.candidates for i in cs2.items]


def test_compute_mrt_loss_structure(tiny):
    vocab, config, params = tiny
    h = torch.zeros((1, config.hidden_dim), dtype=torch.float64)
    sim = make_similarity("tanimoto")
    loss, cs = compute_mrt_loss(params, h, ["CCO"], make_cfg(), sim,
                                [Stream(4, "s")], vocab)
    item = cs.items[0]
    assert len(item.candidates) == 6
    assert len(item.rewards) == 6
    assert item.truth == "CCO"
    assert sum(item.q_weights) == pytest.approx(1.0)
    assert all(0.0 <= r.total <= 1.0 for r in item.rewards)
    assert 0.0 <= loss.item() <= 1.0


def test_compute_mrt_loss_carries_gradient(tiny):
    vocab, config, params = tiny
    h = torch.zeros((1, config.hidden_dim), dtype=torch.float64)
    sim = make_similarity("tanimoto")
    loss, cs = compute_mrt_loss(params, h, ["CCO"], make_cfg(), sim,
                                [Stream(4, "s")], vocab)
    if len({r.total for r in cs.items[0].rewards}) > 1:
        loss.backward()
        total = sum(t.grad.abs().sum().item() for _, t in params.named()
                    if t.grad is not None)
        assert total > 0.0


def test_compute_mrt_loss_rejects_empty(tiny):
    vocab, config, params = tiny
    h = torch.zeros((0, config.hidden_dim), dtype=torch.float64)
    with pytest.raises(EmptyBatch):
        compute_mrt_loss(params, h, [], make_cfg(), make_similarity("tanimoto"),
                         [], vocab)


# ---------------------------------------------------------------------------
# learning-signal direction


def test_direction_check_passes():
    report = mrt_gradient_direction_check()
    assert report.passed
    assert all(g > report.gap_before for g in report.gaps_after)


def test_direction_check_reports_each_step_size():
    report = mrt_gradient_direction_check(step_sizes=(0.2, 0.05))
    assert len(report.gaps_after) == 2
