"""Training loop: losses, schedule, optimizer, determinism, config."""

import math
import os

import numpy as np
import torch
import pytest

from molmrt.data import Dataset, DatasetItem
from molmrt.mrt import MrtConfig, compute_mrt_loss
from molmrt.reward import RewardWeights
from molmrt.rng import Stream
from molmrt.seqmodel import (
    ModelConfig,
    ModelParams,
    NonFiniteGradient,
    Vocab,
    backward,
)
from molmrt.similarity import make_similarity
from molmrt.trainer import (
    METRICS_DIR_ENV,
    OptimizerState,
    TrainConfig,
    clip_gradients,
    interleave_k,
    load_config,
    lr_at,
    mle_loss,
    optimizer_step,
    train,
)


@pytest.fixture()
def tiny():
    vocab = Vocab(("C", "N", "O", "(", ")", "=", "1"))
    config = ModelConfig(vocab_size=vocab.size, feature_dim=4,
                         embed_dim=6, hidden_dim=8)
    params = ModelParams(config, seed=1)
    return vocab, config, params


def batch_of(vocab, feature_dim, *strings):
    feats = np.linspace(-1, 1, len(strings) * feature_dim).reshape(
        len(strings), feature_dim)
    targets = [vocab.tokenize(s) + [vocab.eos_id] for s in strings]
    return feats, targets


def fast_config(corpus, out_dir, **kw):
    base = dict(corpus=corpus, out_dir=out_dir, seed=0, epochs=3,
                warmup_epochs=0, mle_batch=16, mrt_batch=8, mrt_samples=4,
                max_len=30, embed_dim=12, hidden_dim=16, learning_rate=5e-3)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_lr_warmup_then_cosine():
    total, base = 100, 0.5
    # warmup width is ceil(0.02 * 100) = 2 steps: 0, base/2, then base
    assert lr_at(0, total, base, 0.02) == 0.0
    assert lr_at(1, total, base, 0.02) == pytest.approx(base / 2)
    assert lr_at(2, total, base, 0.02) == pytest.approx(base)
    # cosine midpoint of the remaining 98 steps
    assert lr_at(2 + 49, total, base, 0.02) == pytest.approx(base / 2)
    # decays toward zero at the end
    assert lr_at(100, total, base, 0.02) == pytest.approx(0.0)
    assert lr_at(99, total, base, 0.02) < 0.01 * base


def test_lr_constant_after_warmup_without_cosine():
    total, base = 50, 0.1
    values = [lr_at(s, total, base, 0.02, cosine=False) for s in range(1, 50)]
    assert all(v == pytest.approx(base) for v in values)


def test_lr_monotone_decay_after_warmup():
    vals = [lr_at(s, 200, 1.0, 0.02) for s in range(4, 200)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# interleave factor


def test_interleave_k_example():
    # 1000 MLE batches vs 100 MRT batches per epoch: one MRT step
    # rides along every 10th MLE step
    assert interleave_k(1000, 1, 100, 1) == 10


def test_interleave_k_floors_at_one():
    assert interleave_k(10, 1, 100, 1) == 1
    assert interleave_k(32, 16, 100, 4) == 1


def test_interleave_k_uses_batch_counts():
    # T = ceil(700/16) = 44, T_mrt = ceil(100/8) = 13 -> K = 3
    assert interleave_k(700, 16, 100, 8) == 3


# ---------------------------------------------------------------------------
# MLE loss


def test_mle_loss_uniform_logits_value(tiny):
    vocab, config, _ = tiny
    zeros = {n: torch.zeros_like(t) for n, t in
             ModelParams(config, seed=0).named()}
    flat = ModelParams(config, tensors=zeros)
    feats, targets = batch_of(vocab, config.feature_dim, "CNO", "C")
    for eps in (0.0, 0.1):
        loss = mle_loss(flat, (feats, targets), eps, vocab)
        # all logits zero -> every position costs exactly log V
        assert loss.item() == pytest.approx(math.log(vocab.size), rel=1e-12)


def test_mle_loss_zero_epsilon_is_nll(tiny):
    vocab, config, params = tiny
    feats, targets = batch_of(vocab, config.feature_dim, "CNO", "C=O")
    loss = mle_loss(params, (feats, targets), 0.0, vocab)

    from molmrt.seqmodel import encode, teacher_forced_logprob_batch
    hidden = encode(feats, params)
    lp, _, mask = teacher_forced_logprob_batch(params, hidden, targets, vocab)
    want = (-lp.sum() / mask.sum()).item()
    assert loss.item() == pytest.approx(want, rel=1e-12)


def test_mle_loss_smoothing_penalizes_confidence(tiny):
    vocab, config, params = tiny
    feats, targets = batch_of(vocab, config.feature_dim, "CCNO", "C")
    plain = mle_loss(params, (feats, targets), 0.0, vocab).item()
    smooth = mle_loss(params, (feats, targets), 0.1, vocab).item()
    assert smooth != pytest.approx(plain)


def test_mle_loss_pad_positions_carry_no_gradient(tiny):
    vocab, config, params = tiny
    feats, targets = batch_of(vocab, config.feature_dim, "CNOCNO", "C")
    loss = mle_loss(params, (feats, targets), 0.1, vocab)
    grads = backward(loss, params)
    # PAD is never a gold target nor a fed input, so its embedding row
    # must sit outside the computation graph entirely
    assert grads["emb"][vocab.pad_id].abs().max().item() == 0.0


def test_mle_loss_independent_of_batch_padding(tiny):
    vocab, config, params = tiny
    feats, targets = batch_of(vocab, config.feature_dim, "C", "CNOCNO((11))")
    short_alone = mle_loss(params, (feats[:1], targets[:1]), 0.1, vocab)
    long_alone = mle_loss(params, (feats[1:], targets[1:]), 0.1, vocab)
    mixed = mle_loss(params, (feats, targets), 0.1, vocab)
    n_short, n_long = len(targets[0]), len(targets[1])
    want = (short_alone.item() * n_short + long_alone.item() * n_long) / (
        n_short + n_long)
    assert mixed.item() == pytest.approx(want, rel=1e-12)


def test_mle_loss_validates_targets(tiny):
    vocab, config, params = tiny
    feats, targets = batch_of(vocab, config.feature_dim, "C")
    with pytest.raises(ValueError):
        mle_loss(params, (feats, [targets[0][:-1]]), 0.1, vocab)


# ---------------------------------------------------------------------------
# combined objective


def test_accumulated_gradients_equal_joint_objective(tiny):
    # backward on the MLE loss, then on lambda * MRT loss, must leave
    # exactly the gradient of (L_mle + lambda * L_mrt)
    vocab, config, params = tiny
    lam = 0.37
    feats, targets = batch_of(vocab, config.feature_dim, "CCO", "CN")
    sim = make_similarity("tanimoto")
    mcfg = MrtConfig(n_samples=4, temperature=0.7, alpha=1.0, max_len=8,
                     sim_kind="tanimoto", weights=RewardWeights(0.1, 0.5, 0.4),
                     stereo="preserve_tetrahedral")
    from molmrt.seqmodel import encode

    def mrt_term(p):
        hidden = encode(feats, p)
        loss, _ = compute_mrt_loss(p, hidden, ["CCO", "CN"], mcfg, sim,
                                   [Stream(0, "gc", i) for i in range(2)], vocab)
        return loss

    params.zero_grad()
    mle_loss(params, (feats, targets), 0.1, vocab).backward()
    (lam * mrt_term(params)).backward()
    accumulated = params.grads()

    twin = params.clone()
    joint = mle_loss(twin, (feats, targets), 0.1, vocab) + lam * mrt_term(twin)
    joint.backward()
    joint_grads = twin.grads()

    for name in accumulated:
        diff = (accumulated[name] - joint_grads[name]).abs().max().item()
        assert diff < 1e-10, name


# ---------------------------------------------------------------------------
# clipping and optimizer


def test_clip_gradients_rescales_to_max_norm():
    g = {"a": torch.tensor([3.0, 4.0], dtype=torch.float64)}
    clipped, norm = clip_gradients(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert torch.allclose(clipped["a"], torch.tensor([0.6, 0.8], dtype=torch.float64))


def test_clip_gradients_leaves_small_gradients_alone():
    g = {"a": torch.tensor([0.3, 0.4], dtype=torch.float64)}
    clipped, norm = clip_gradients(g, 1.0)
    assert norm == pytest.approx(0.5)
    assert torch.equal(clipped["a"], g["a"])


def test_clip_gradients_global_norm_spans_tensors():
    g = {"a": torch.tensor([3.0], dtype=torch.float64),
         "b": torch.tensor([4.0], dtype=torch.float64)}
    _, norm = clip_gradients(g, 10.0)
    assert norm == pytest.approx(5.0)


def test_clip_gradients_rejects_nonfinite():
    g = {"a": torch.tensor([float("inf")], dtype=torch.float64)}
    with pytest.raises(NonFiniteGradient):
        clip_gradients(g, 1.0)


def test_optimizer_matches_torch_adamw(tiny):
    vocab, config, params = tiny
    mirror = params.clone()
    torch_params = [t.detach().clone().requires_grad_(True)
                    for _, t in mirror.named()]
    opt = torch.optim.AdamW(torch_params, lr=1e-2, betas=(0.9, 0.999),
                            eps=1e-8, weight_decay=0.01)
    state = OptimizerState.init(params)
    stream = Stream(6, "fakegrad")
    for step in range(5):
        grads = {}
        for i, (name, t) in enumerate(params.named()):
            g = torch.from_numpy(
                stream.gaussian(t.numel()).reshape(tuple(t.shape)))
            grads[name] = g
        optimizer_step(params, grads, state, lr=1e-2, weight_decay=0.01)
        for tp, (name, _) in zip(torch_params, params.named()):
            tp.grad = grads[name].clone()
        opt.step()
    for tp, (name, t) in zip(torch_params, params.named()):
        # same algebra, different rounding order than torch's kernel
        assert torch.allclose(t.detach(), tp.detach(), rtol=1e-12, atol=1e-13), name


# ---------------------------------------------------------------------------
# config file handling


def test_load_config_round_trip(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(
        "corpus = none\n"
        "seed = 3\n"
        "epochs = 7\n"
        "mrt_weight = 0.25\n"
        "cosine_decay = false\n"
        "sim_kind = edit_distance\n"
        "# a comment line\n"
    )
    cfg = load_config(str(p))
    assert cfg.corpus is None
    assert cfg.seed == 3 and cfg.epochs == 7
    assert cfg.mrt_weight == 0.25
    assert cfg.cosine_decay is False
    assert cfg.sim_kind == "edit_distance"


def test_load_config_rejects_unknown_key(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("learning_rte = 0.1\n")
    with pytest.raises(ValueError):
        load_config(str(p))


def test_load_config_rejects_duplicate_key(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 1\nseed = 2\n")
    with pytest.raises(ValueError):
        load_config(str(p))


def test_load_config_rejects_bad_value(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("epochs = three\n")
    with pytest.raises(ValueError):
        load_config(str(p))


def test_config_validation():
    for kw in (dict(epochs=0),
               dict(split_mle=0.5, split_mrt=0.2, split_eval=0.2),
               dict(sim_kind="nope"),
               dict(mrt_temperature=0.0),
               dict(learning_rate=0.0),
               dict(w_valid=-0.2)):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()
    TrainConfig().validate()


# ---------------------------------------------------------------------------
# the loop itself (small corpus, few epochs)


def synthetic_datasets(vocab_strings, n_mle, n_mrt, dim=18):
    """Datasets cycling over a few tiny molecules; dim matches the
    default feature layout the trainer sizes its encoder for."""
    def item(i):
        s = vocab_strings[i % len(vocab_strings)]
        feats = np.full(dim, (i % 7) / 7.0)
        return DatasetItem(corpus_index=i, smiles=s, features=feats)
    return (Dataset([item(i) for i in range(n_mle)]),
            Dataset([item(i) for i in range(n_mrt)]))


def test_train_schedule_counts(tmp_path):
    # injected datasets: 12 MLE items, 4 MRT items, B = B' = 1
    cfg = TrainConfig(out_dir=str(tmp_path / "run"), seed=0, epochs=3,
                      warmup_epochs=1, mle_batch=1, mrt_batch=1,
                      mrt_samples=2, max_len=6, embed_dim=6, hidden_dim=8)
    mle_ds, mrt_ds = synthetic_datasets(["C", "CC", "CO", "CN"], 12, 4)
    result = train(cfg, mle_ds, mrt_ds)
    per_epoch = {}
    for rec in result.log.records:
        per_epoch.setdefault(rec.epoch, []).append(rec)
    assert set(per_epoch) == {1, 2, 3}
    # warmup epoch: MLE only
    assert all(r.kind == "mle" for r in per_epoch[1])
    # post-warmup: K = floor(12/4) = 3, MRT rides every third step
    for epoch in (2, 3):
        kinds = [r.kind for r in per_epoch[epoch]]
        assert len(kinds) == 12
        joint = [i for i, k in enumerate(kinds) if k == "mle+mrt"]
        assert joint == [0, 3, 6, 9]


def test_train_zero_weight_never_runs_mrt(tmp_path):
    cfg = TrainConfig(out_dir=str(tmp_path / "run"), seed=0, epochs=2,
                      warmup_epochs=0, mle_batch=1, mrt_batch=1,
                      mrt_weight=0.0, mrt_samples=2, max_len=6,
                      embed_dim=6, hidden_dim=8)
    mle_ds, mrt_ds = synthetic_datasets(["C", "CC"], 6, 2)
    result = train(cfg, mle_ds, mrt_ds)
    assert all(r.kind == "mle" for r in result.log.records)


def test_train_writes_artifacts(tmp_path, small_corpus_file):
    cfg = fast_config(small_corpus_file, str(tmp_path / "run"), epochs=2)
    result = train(cfg)
    assert os.path.exists(result.final_checkpoint)
    assert os.path.exists(result.metrics_path)
    assert len(result.epoch_checkpoints) == 2
    for p in result.epoch_checkpoints:
        assert os.path.exists(p)
    lines = open(result.metrics_path).read().splitlines()
    assert lines and all(line.startswith("epoch=") for line in lines)
    assert len(lines) == len(result.log.records)


def test_train_metrics_dir_override(tmp_path, small_corpus_file, monkeypatch):
    override = tmp_path / "elsewhere"
    override.mkdir()
    monkeypatch.setenv(METRICS_DIR_ENV, str(override))
    cfg = fast_config(small_corpus_file, str(tmp_path / "run"), epochs=1)
    result = train(cfg)
    assert os.path.dirname(result.metrics_path) == str(override)


def test_train_deterministic_repeat(tmp_path, small_corpus_file):
    cfg1 = fast_config(small_corpus_file, str(tmp_path / "r1"), epochs=2)
    cfg2 = fast_config(small_corpus_file, str(tmp_path / "r2"), epochs=2)
    r1, r2 = train(cfg1), train(cfg2)
    m1 = open(r1.metrics_path, "rb").read()
    m2 = open(r2.metrics_path, "rb").read()
    assert m1 == m2
    c1 = open(r1.final_checkpoint, "rb").read()
    c2 = open(r2.final_checkpoint, "rb").read()
    assert c1 == c2


def test_train_seed_changes_outcome(tmp_path, small_corpus_file):
    r1 = train(fast_config(small_corpus_file, str(tmp_path / "r1"), epochs=1))
    r2 = train(fast_config(small_corpus_file, str(tmp_path / "r2"), epochs=1,
                           seed=1))
    assert open(r1.final_checkpoint, "rb").read() != \
        open(r2.final_checkpoint, "rb").read()


def test_train_requires_both_datasets_or_neither(tmp_path):
    cfg = TrainConfig(out_dir=str(tmp_path / "run"))
    mle_ds, _ = synthetic_datasets(["C"], 4, 2)
    with pytest.raises(ValueError):
        train(cfg, mle_ds, None)
