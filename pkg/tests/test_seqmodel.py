"""Decoder model: tokenization, scoring, decoding, checkpoints."""

import torch
import pytest

from molmrt.rng import Stream
from molmrt.seqmodel import (
    CheckpointError,
    ModelConfig,
    ModelParams,
    ShapeMismatch,
    UnknownToken,
    Vocab,
    backward,
    encode,
    greedy_decode,
    greedy_decode_batch,
    load_checkpoint,
    sample_decode,
    save_checkpoint,
    step_logits,
    teacher_forced_logprob,
    teacher_forced_logprob_batch,
)


def with_eos(vocab: Vocab, s: str) -> list[int]:
    return vocab.tokenize(s) + [vocab.eos_id]


@pytest.fixture()
def tiny():
    vocab = Vocab(("C", "N", "O", "(", ")", "=", "1"))
    config = ModelConfig(vocab_size=vocab.size, feature_dim=6,
                         embed_dim=8, hidden_dim=10)
    params = ModelParams(config, seed=5)
    return vocab, config, params


# ---------------------------------------------------------------------------
# vocab


def test_vocab_layout():
    v = Vocab(("C", "N", "O"))
    assert v.size == 6
    assert len({v.pad_id, v.bos_id, v.eos_id}) == 3


def test_vocab_from_corpus_covers_all_characters():
    v = Vocab.from_corpus(["CCO", "CC(=O)N", "c1ccccc1"])
    for ch in "CO(=N)c1":
        assert v.detokenize(v.tokenize(ch)) == ch


def test_tokenize_round_trip():
    v = Vocab.from_corpus(["CC(=O)Oc1ccccc1C(=O)O"])
    s = "c1ccccc1C(=O)O"
    assert v.detokenize(v.tokenize(s)) == s


def test_tokenize_unknown_character():
    v = Vocab(("C",))
    with pytest.raises(UnknownToken):
        v.tokenize("Q")


def test_detokenize_rejects_special_ids():
    v = Vocab(("C", "O"))
    with pytest.raises(UnknownToken):
        v.detokenize([v.bos_id])


def test_render_is_lenient_about_specials():
    # model output may contain specials; render keeps them visible as
    # unparseable markers instead of crashing
    v = Vocab(("C", "O"))
    ids = [v.bos_id] + v.tokenize("CO") + [v.eos_id]
    out = v.render(ids)
    assert "CO" in out
    assert out != "CO"


# ---------------------------------------------------------------------------
# parameters


def test_params_deterministic_by_seed():
    cfg = ModelConfig(vocab_size=7, feature_dim=4, embed_dim=6, hidden_dim=8)
    a, b = ModelParams(cfg, seed=3), ModelParams(cfg, seed=3)
    c = ModelParams(cfg, seed=4)
    for name in ModelParams.NAMES:
        assert torch.equal(a.tensors()[name], b.tensors()[name])
    assert any(not torch.equal(a.tensors()[n], c.tensors()[n])
               for n in ModelParams.NAMES)


def test_params_are_float64(tiny):
    _, _, params = tiny
    assert all(t.dtype == torch.float64 for t in params.tensors().values())


def test_params_clone_is_deep(tiny):
    _, _, params = tiny
    dup = params.clone()
    with torch.no_grad():
        dup.emb.add_(1.0)
    assert not torch.equal(dup.emb, params.emb)


# ---------------------------------------------------------------------------
# scoring


def test_step_logits_shape(tiny):
    vocab, config, params = tiny
    h = torch.zeros((1, config.hidden_dim), dtype=torch.float64)
    logits, h2 = step_logits(params, torch.tensor([vocab.bos_id]), h)
    assert logits.shape == (1, vocab.size)
    assert h2.shape == (1, config.hidden_dim)


def test_teacher_forced_logprob_matches_manual_chain(tiny):
    vocab, config, params = tiny
    h0 = torch.linspace(-1, 1, config.hidden_dim, dtype=torch.float64)
    ids = with_eos(vocab, "CNO")
    lp, _ = teacher_forced_logprob(params, h0, ids, vocab)

    # manual: feed BOS then gold prefix, sum log-softmax of each gold pick
    h = h0.unsqueeze(0)
    prev = torch.tensor([vocab.bos_id])
    total = 0.0
    for tok in ids:
        logits, h = step_logits(params, prev, h)
        total += torch.log_softmax(logits[0], dim=0)[tok].item()
        prev = torch.tensor([tok])
    assert lp.item() == pytest.approx(total, rel=1e-12)


def test_batch_scoring_matches_single(tiny):
    vocab, config, params = tiny
    hs = torch.stack([
        torch.linspace(-1, 1, config.hidden_dim, dtype=torch.float64),
        torch.linspace(0.5, -0.5, config.hidden_dim, dtype=torch.float64),
        torch.zeros(config.hidden_dim, dtype=torch.float64),
    ])
    targets = [with_eos(vocab, s) for s in ("CNO", "C", "OO=C(N)1")]
    batch_lp, _, _ = teacher_forced_logprob_batch(params, hs, targets, vocab)
    for i, ids in enumerate(targets):
        single, _ = teacher_forced_logprob(params, hs[i], ids, vocab)
        assert batch_lp[i].item() == pytest.approx(single.item(), rel=1e-12)


def test_padding_does_not_change_scores(tiny):
    # scores of short sequences are unaffected by longer batch mates
    vocab, config, params = tiny
    hs = torch.zeros((2, config.hidden_dim), dtype=torch.float64)
    short = with_eos(vocab, "C")
    long = with_eos(vocab, "CNOCNO(())")
    lp_mixed, _, _ = teacher_forced_logprob_batch(params, hs, [short, long], vocab)
    lp_alone, _, _ = teacher_forced_logprob_batch(params, hs[:1], [short], vocab)
    assert lp_mixed[0].item() == pytest.approx(lp_alone[0].item(), rel=1e-12)


def test_target_must_end_with_eos(tiny):
    vocab, config, params = tiny
    h = torch.zeros(config.hidden_dim, dtype=torch.float64)
    with pytest.raises(ValueError):
        teacher_forced_logprob(params, h, vocab.tokenize("CNO"), vocab)


def test_encode_maps_features_to_hidden(tiny):
    vocab, config, params = tiny
    feats = torch.ones((2, config.feature_dim), dtype=torch.float64)
    h = encode(feats, params)
    assert h.shape == (2, config.hidden_dim)


def test_shape_mismatch_detected(tiny):
    vocab, config, params = tiny
    two_rows = torch.zeros((2, config.hidden_dim), dtype=torch.float64)
    with pytest.raises(ShapeMismatch):
        teacher_forced_logprob_batch(params, two_rows, [with_eos(vocab, "C")], vocab)
    with pytest.raises(ShapeMismatch):
        encode(torch.zeros((1, config.feature_dim + 2), dtype=torch.float64), params)


def test_backward_fills_all_grads(tiny):
    vocab, config, params = tiny
    hs = torch.zeros((1, config.hidden_dim), dtype=torch.float64)
    lp, _, _ = teacher_forced_logprob_batch(
        params, hs, [with_eos(vocab, "CNO")], vocab)
    grads = backward(-lp.sum(), params)
    assert set(grads) == set(ModelParams.NAMES)
    assert all(torch.isfinite(g).all() for g in grads.values())


# ---------------------------------------------------------------------------
# decoding


def test_greedy_decode_deterministic(tiny):
    vocab, config, params = tiny
    h = torch.linspace(-1, 1, config.hidden_dim, dtype=torch.float64)
    a = greedy_decode(params, h, 20, vocab)
    b = greedy_decode(params, h, 20, vocab)
    assert a == b
    assert len(a) <= 20
    assert all(t not in (vocab.pad_id, vocab.bos_id, vocab.eos_id) for t in a)


def test_greedy_decode_batch_matches_single(tiny):
    vocab, config, params = tiny
    hs = torch.stack([
        torch.linspace(-1, 1, config.hidden_dim, dtype=torch.float64),
        torch.linspace(1, -1, config.hidden_dim, dtype=torch.float64),
    ])
    outs = greedy_decode_batch(params, hs, 15, vocab)
    assert outs[0] == greedy_decode(params, hs[0], 15, vocab)
    assert outs[1] == greedy_decode(params, hs[1], 15, vocab)


def test_sample_decode_reproducible(tiny):
    vocab, config, params = tiny
    h = torch.zeros(config.hidden_dim, dtype=torch.float64)
    r1 = sample_decode(params, h, 6, 0.8, 12, Stream(9, "s"), vocab)
    r2 = sample_decode(params, h, 6, 0.8, 12, Stream(9, "s"), vocab)
    r3 = sample_decode(params, h, 6, 0.8, 12, Stream(10, "s"), vocab)
    assert r1.sequences == r2.sequences
    assert r1.logprob == r2.logprob
    assert r1.sequences != r3.sequences
    assert len(r1.sequences) == 6
    assert all(len(s) <= 12 for s in r1.sequences)


def test_sample_decode_scores_at_unit_temperature(tiny):
    # reported logprob is the model's own score of the sampled tokens,
    # independent of the sampling temperature
    vocab, config, params = tiny
    h = torch.zeros(config.hidden_dim, dtype=torch.float64)
    res = sample_decode(params, h, 4, 0.5, 12, Stream(3, "t"), vocab)
    for i, seq in enumerate(res.sequences):
        if res.truncated[i]:
            continue
        lp, _ = teacher_forced_logprob(params, h, seq + [vocab.eos_id], vocab)
        assert res.logprob[i] == pytest.approx(lp.item(), rel=1e-10)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path, tiny):
    vocab, config, params = tiny
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, params, vocab)
    params2, vocab2 = load_checkpoint(path)
    assert vocab2.size == vocab.size
    assert vocab2.detokenize(vocab2.tokenize("CNO")) == "CNO"
    for name in ModelParams.NAMES:
        a, b = params.tensors()[name], params2.tensors()[name]
        # storage is float32; values round-trip at that resolution
        assert torch.equal(a.to(torch.float32), b.to(torch.float32))


def test_checkpoint_resave_is_byte_identical(tmp_path, tiny):
    vocab, _, params = tiny
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(p1, params, vocab)
    params2, vocab2 = load_checkpoint(p1)
    save_checkpoint(p2, params2, vocab2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_checkpoint_rejects_truncation(tmp_path, tiny):
    vocab, _, params = tiny
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), params, vocab)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))
