"""Conditioned autoregressive character model with exact gradients.

A single gated-recurrent layer over character tokens, conditioned on a
feature vector through an affine+tanh encoder. Scale is deliberately
small: the point is executable sequence-level training objectives with
gradients that pass finite-difference checks, not modelling capacity.
All math runs in float64 on torch tensors; reverse-mode gradients come
from autograd and are treated as the module's own backward contract
(finite-difference verified in the tests).

Checkpoint byte layout (little-endian throughout):
    magic  b"MMRT"
    u32    format version (1)
    u64    config hash: stable_hash("model-config", V, d_e, H, F)
    u32    tensor count
    per tensor:
        u32 name length, UTF-8 name,
        u32 ndim, u32 * ndim dims,
        float32 * prod(dims) row-major data
The vocabulary travels as a tensor named "vocab_codepoints" (one code
point per non-special token, in id order), so a checkpoint plus feature
config fully determines decoding behavior.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .rng import Stream, stable_hash

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
_SPECIALS = (PAD, BOS, EOS)

_DTYPE = torch.float64

CHECKPOINT_MAGIC = b"MMRT"
CHECKPOINT_VERSION = 1


class UnknownToken(ValueError):
    def __init__(self, token, position: int):
        super().__init__(f"unknown token {token!r} at position {position}")
        self.token = token
        self.position = position


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(RuntimeError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Character vocabulary with PAD/BOS/EOS at ids 0/1/2."""

    chars: tuple[str, ...]
    _ids: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = list(_SPECIALS) + list(self.chars)
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(tokens)})

    @classmethod
    def from_corpus(cls, strings) -> "Vocab":
        chars = sorted({c for s in strings for c in s})
        return cls(tuple(chars))

    @property
    def size(self) -> int:
        return 3 + len(self.chars)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    def tokenize(self, s: str) -> list[int]:
        out = []
        for pos, c in enumerate(s):
            i = self._ids.get(c)
            if i is None:
                raise UnknownToken(c, pos)
            out.append(i)
        return out

    def detokenize(self, ids) -> str:
        out = []
        for pos, i in enumerate(ids):
            if not 3 <= i < self.size:
                raise UnknownToken(i, pos)
            out.append(self.chars[i - 3])
        return "".join(out)

    def render(self, ids) -> str:
        """Lenient detokenize for model output: special tokens become
        their angle-bracket names, which no SMILES parser accepts, so a
        degenerate sample scores as invalid rather than crashing."""
        out = []
        for i in ids:
            if 3 <= i < self.size:
                out.append(self.chars[i - 3])
            elif 0 <= i < 3:
                out.append(_SPECIALS[i])
            else:
                out.append("<?>")
        return "".join(out)


def tokenize(s: str, vocab: Vocab) -> list[int]:
    return vocab.tokenize(s)


def detokenize(ids, vocab: Vocab) -> str:
    return vocab.detokenize(ids)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feature_dim: int
    embed_dim: int = 64
    hidden_dim: int = 128

    def hash(self) -> int:
        return stable_hash("model-config", self.vocab_size, self.embed_dim,
                           self.hidden_dim, self.feature_dim)


def _uniform_tensor(stream: Stream, shape, scale: float = 0.08) -> torch.Tensor:
    n = int(np.prod(shape))
    vals = (stream.uniform(n) * 2.0 - 1.0) * scale
    return torch.from_numpy(vals.reshape(shape).copy())


def _orthogonal_tensor(stream: Stream, n: int) -> torch.Tensor:
    """n x n orthogonal matrix from a seeded Gaussian via QR, with the
    sign of R's diagonal fixed so the result is unique."""
    g = stream.gaussian(n * n).reshape(n, n)
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return torch.from_numpy(q.copy())


class ModelParams:
    """All trainable tensors, float64, requires_grad.

    Embedding and projection weights start uniform(-0.08, 0.08), the
    recurrent (hidden-to-hidden) matrices orthogonal, biases zero; every
    tensor draws from its own named seed stream.
    """

    NAMES = ("emb", "enc_w", "enc_b",
             "wz", "uz", "bz", "wr", "ur", "br", "wn", "un", "bn",
             "out_w", "out_b")

    def __init__(self, config: ModelConfig, seed: int | None = None,
                 tensors: dict[str, torch.Tensor] | None = None):
        self.config = config
        V, F = config.vocab_size, config.feature_dim
        E, H = config.embed_dim, config.hidden_dim
        shapes = {
            "emb": (V, E), "enc_w": (F, H), "enc_b": (H,),
            "wz": (E, H), "uz": (H, H), "bz": (H,),
            "wr": (E, H), "ur": (H, H), "br": (H,),
            "wn": (E, H), "un": (H, H), "bn": (H,),
            "out_w": (H, V), "out_b": (V,),
        }
        if tensors is None:
            if seed is None:
                raise ValueError("need a seed or explicit tensors")
            tensors = {}
            for name, shape in shapes.items():
                st = Stream(seed, "init", name)
                if name in ("uz", "ur", "un"):
                    t = _orthogonal_tensor(st, H)
                elif name.startswith("b") or name == "enc_b" or name == "out_b":
                    t = torch.zeros(shape, dtype=_DTYPE)
                else:
                    t = _uniform_tensor(st, shape)
                tensors[name] = t
        for name, shape in shapes.items():
            t = tensors[name]
            if tuple(t.shape) != shape:
                raise ShapeMismatch(f"{name}: {tuple(t.shape)} != {shape}")
            t = t.to(_DTYPE).detach().clone().requires_grad_(True)
            setattr(self, name, t)

    def named(self):
        return [(n, getattr(self, n)) for n in self.NAMES]

    def tensors(self) -> dict[str, torch.Tensor]:
        return dict(self.named())

    def zero_grad(self) -> None:
        for _, t in self.named():
            if t.grad is not None:
                t.grad.zero_()

    def grads(self) -> dict[str, torch.Tensor]:
        out = {}
        for n, t in self.named():
            out[n] = (t.grad.detach().clone() if t.grad is not None
                      else torch.zeros_like(t))
        return out

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, tensors={
            n: t.detach().clone() for n, t in self.named()})


def encode(features, params: ModelParams) -> torch.Tensor:
    """tanh(features @ W + b): feature vector(s) to initial hidden state.

    Accepts (F,) or (B, F); numpy arrays are converted. Differentiable
    when handed a gradient-carrying tensor.
    """
    x = features
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64))
    x = x.to(_DTYPE)
    if x.shape[-1] != params.config.feature_dim:
        raise ShapeMismatch(
            f"feature dim {x.shape[-1]} != {params.config.feature_dim}")
    return torch.tanh(x @ params.enc_w + params.enc_b)


def _gru_step(params: ModelParams, x: torch.Tensor,
              h: torch.Tensor) -> torch.Tensor:
    z = torch.sigmoid(x @ params.wz + h @ params.uz + params.bz)
    r = torch.sigmoid(x @ params.wr + h @ params.ur + params.br)
    n = torch.tanh(x @ params.wn + (r * h) @ params.un + params.bn)
    return (1.0 - z) * n + z * h


def step_logits(params: ModelParams, token_ids: torch.Tensor,
                h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Advance one step on token_ids (B,), return (logits (B,V), h')."""
    x = params.emb[token_ids]
    h = _gru_step(params, x, h)
    return h @ params.out_w + params.out_b, h


def _check_target(ids, vocab_size: int, eos_id: int) -> None:
    if not ids:
        raise ValueError("target sequence is empty")
    for pos, i in enumerate(ids):
        if not 0 <= i < vocab_size:
            raise UnknownToken(i, pos)
    if ids[-1] != eos_id:
        raise ValueError("target sequence must end with EOS")


def teacher_forced_logits(params: ModelParams, hidden: torch.Tensor,
                          targets: list[list[int]], pad_id: int = 0,
                          bos_id: int = 1
                          ) -> tuple[torch.Tensor, torch.Tensor]:
    """Logits at every position under teacher forcing.

    hidden: (B, H); targets: ragged id lists (each EOS-terminated).
    Returns (logits (B, T, V), mask (B, T)) where T is the longest
    target; padded positions are masked out.
    """
    B = len(targets)
    if hidden.dim() != 2 or hidden.shape[0] != B:
        raise ShapeMismatch("hidden batch does not match targets")
    T = max(len(t) for t in targets)
    inp = torch.full((B, T), pad_id, dtype=torch.long)
    mask = torch.zeros((B, T), dtype=_DTYPE)
    for b, ids in enumerate(targets):
        inp[b, 0] = bos_id
        if len(ids) > 1:
            inp[b, 1:len(ids)] = torch.tensor(ids[:-1], dtype=torch.long)
        mask[b, :len(ids)] = 1.0
    h = hidden
    per_step = []
    for t in range(T):
        logits, h = step_logits(params, inp[:, t], h)
        per_step.append(logits)
    return torch.stack(per_step, dim=1), mask


def teacher_forced_logprob_batch(params: ModelParams, hidden: torch.Tensor,
                                 targets: list[list[int]],
                                 vocab: Vocab
                                 ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total (B,), per_token (B, T), mask) log-probabilities, with grad."""
    for ids in targets:
        _check_target(ids, vocab.size, vocab.eos_id)
    logits, mask = teacher_forced_logits(params, hidden, targets,
                                         vocab.pad_id, vocab.bos_id)
    logp = torch.log_softmax(logits, dim=2)
    tgt = torch.full(mask.shape, vocab.pad_id, dtype=torch.long)
    for b, ids in enumerate(targets):
        tgt[b, :len(ids)] = torch.tensor(ids, dtype=torch.long)
    per_token = logp.gather(2, tgt.unsqueeze(2)).squeeze(2) * mask
    return per_token.sum(dim=1), per_token, mask


def teacher_forced_logprob(params: ModelParams, hidden: torch.Tensor,
                           target_ids: list[int], vocab: Vocab
                           ) -> tuple[torch.Tensor, torch.Tensor]:
    """Sum and per-token log p(y_t | y_<t, hidden) for one sequence.

    target_ids must be EOS-terminated; conditioning is always on the
    ground-truth prefix. The returned tensors carry gradients.
    """
    h = hidden if hidden.dim() == 2 else hidden.unsqueeze(0)
    total, per_token, mask = teacher_forced_logprob_batch(
        params, h, [list(target_ids)], vocab)
    return total[0], per_token[0][: len(target_ids)]


@dataclass
class DecodeResult:
    """Sampled candidates for one conditioning input.

    sequences hold content token ids (no BOS/EOS). logprob is the
    temperature-1 log-probability of each sequence (the quantity later
    re-derived with gradients); sampling_logprob is under the tempered
    distribution that actually generated it. Both include the EOS step
    for sequences that terminated; truncated ones simply ran out.
    """

    sequences: list[list[int]]
    logprob: list[float]
    sampling_logprob: list[float]
    truncated: list[bool]


def _lowest_id_argmax(logits: torch.Tensor) -> torch.Tensor:
    # ties broken toward the lowest token id, deterministically
    V = logits.shape[-1]
    top = logits.max(dim=-1, keepdim=True).values
    weight = torch.arange(V, 0, -1, dtype=_DTYPE)
    return ((logits == top).to(_DTYPE) * weight).argmax(dim=-1)


def sample_decode_batch(params: ModelParams, hidden: torch.Tensor,
                        n_samples: int, temperature: float, max_len: int,
                        streams: list[Stream], vocab: Vocab
                        ) -> list[DecodeResult]:
    """Multinomial decoding, no grad: n_samples per hidden row.

    Token draws for item b come only from streams[b] (n_samples uniforms
    per step, drawn every step), so results are independent of how the
    work would be scheduled across candidates.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if n_samples < 1 or max_len < 1:
        raise ValueError("n_samples and max_len must be >= 1")
    B = hidden.shape[0]
    if len(streams) != B:
        raise ShapeMismatch("one stream per batch item required")
    N = B * n_samples
    eos = vocab.eos_id
    with torch.no_grad():
        h = hidden.repeat_interleave(n_samples, dim=0)
        last = torch.full((N,), vocab.bos_id, dtype=torch.long)
        alive = torch.ones(N, dtype=torch.bool)
        lp1 = torch.zeros(N, dtype=_DTYPE)
        lpt = torch.zeros(N, dtype=_DTYPE)
        steps: list[torch.Tensor] = []
        for _ in range(max_len):
            logits, h = step_logits(params, last, h)
            logp1 = torch.log_softmax(logits, dim=1)
            logpt = torch.log_softmax(logits / temperature, dim=1)
            cdf = torch.cumsum(torch.exp(logpt), dim=1)
            u = np.concatenate([st.uniform(n_samples) for st in streams])
            ut = torch.from_numpy(u).unsqueeze(1)
            tok = torch.searchsorted(cdf, ut).squeeze(1)
            tok = tok.clamp(max=vocab.size - 1)
            lp1 = lp1 + torch.where(alive, logp1.gather(1, tok.unsqueeze(1)).squeeze(1), 0.0)
            lpt = lpt + torch.where(alive, logpt.gather(1, tok.unsqueeze(1)).squeeze(1), 0.0)
            tok = torch.where(alive, tok, torch.full_like(tok, eos))
            steps.append(tok)
            alive = alive & (tok != eos)
            last = tok
            if not bool(alive.any()):
                break
        toks = torch.stack(steps, dim=1).numpy()
        alive_np = alive.numpy()
        lp1_np = lp1.numpy()
        lpt_np = lpt.numpy()
    results = []
    for b in range(B):
        seqs, l1, lt, tr = [], [], [], []
        for k in range(n_samples):
            row = toks[b * n_samples + k]
            content = []
            for t in row:
                if t == eos:
                    break
                content.append(int(t))
            seqs.append(content)
            l1.append(float(lp1_np[b * n_samples + k]))
            lt.append(float(lpt_np[b * n_samples + k]))
            tr.append(bool(alive_np[b * n_samples + k]))
        results.append(DecodeResult(seqs, l1, lt, tr))
    return results


def sample_decode(params: ModelParams, hidden: torch.Tensor, n_samples: int,
                  temperature: float, max_len: int, rng: Stream,
                  vocab: Vocab) -> DecodeResult:
    """Sample n_samples sequences from one hidden state (see batch form)."""
    h = hidden if hidden.dim() == 2 else hidden.unsqueeze(0)
    return sample_decode_batch(params, h, n_samples, temperature, max_len,
                               [rng], vocab)[0]


def greedy_decode_batch(params: ModelParams, hidden: torch.Tensor,
                        max_len: int, vocab: Vocab) -> list[list[int]]:
    """Argmax decoding per row; ties go to the lowest token id."""
    B = hidden.shape[0]
    eos = vocab.eos_id
    with torch.no_grad():
        h = hidden
        last = torch.full((B,), vocab.bos_id, dtype=torch.long)
        alive = torch.ones(B, dtype=torch.bool)
        steps = []
        for _ in range(max_len):
            logits, h = step_logits(params, last, h)
            tok = _lowest_id_argmax(logits)
            tok = torch.where(alive, tok, torch.full_like(tok, eos))
            steps.append(tok)
            alive = alive & (tok != eos)
            last = tok
            if not bool(alive.any()):
                break
        toks = torch.stack(steps, dim=1).numpy()
    out = []
    for b in range(B):
        content = []
        for t in toks[b]:
            if t == eos:
                break
            content.append(int(t))
        out.append(content)
    return out


def greedy_decode(params: ModelParams, hidden: torch.Tensor, max_len: int,
                  vocab: Vocab) -> list[int]:
    h = hidden if hidden.dim() == 2 else hidden.unsqueeze(0)
    return greedy_decode_batch(params, h, max_len, vocab)[0]


def backward(loss: torch.Tensor, params: ModelParams,
             accumulate: bool = False) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every parameter.

    Raises NonFiniteGradient on NaN/inf anywhere (divergence signal).
    With accumulate=False existing .grad buffers are cleared first.
    """
    if not accumulate:
        params.zero_grad()
    loss.backward()
    grads = params.grads()
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    return grads


# ---------------------------------------------------------------------------
# Checkpoint I/O


def save_checkpoint(path: str, params: ModelParams, vocab: Vocab) -> None:
    entries = list(params.named())
    cp = torch.tensor([float(ord(c)) for c in vocab.chars], dtype=_DTYPE)
    entries.append(("vocab_codepoints", cp))
    blob = [CHECKPOINT_MAGIC,
            struct.pack("<I", CHECKPOINT_VERSION),
            struct.pack("<Q", params.config.hash()),
            struct.pack("<I", len(entries))]
    for name, t in entries:
        data = t.detach().numpy().astype("<f4")
        nb = name.encode("utf-8")
        blob.append(struct.pack("<I", len(nb)))
        blob.append(nb)
        blob.append(struct.pack("<I", data.ndim))
        for d in data.shape:
            blob.append(struct.pack("<I", d))
        blob.append(data.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str) -> tuple[ModelParams, Vocab]:
    with open(path, "rb") as fh:
        buf = fh.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        out = buf[off:off + n]
        off += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    (stored_hash,) = struct.unpack("<Q", take(8))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        numel = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(numel * 4), dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(data.astype(np.float64))
    if off != len(buf):
        raise CheckpointError("trailing bytes in checkpoint")
    if "vocab_codepoints" not in tensors:
        raise CheckpointError("checkpoint lacks vocabulary")
    cp = tensors.pop("vocab_codepoints").numpy()
    chars = tuple(chr(int(round(float(v)))) for v in cp)
    vocab = Vocab(chars)
    try:
        V, E = tensors["emb"].shape
        F, H = tensors["enc_w"].shape
    except KeyError as exc:
        raise CheckpointError(f"missing tensor {exc}") from exc
    config = ModelConfig(vocab_size=V, feature_dim=F, embed_dim=E,
                         hidden_dim=H)
    if config.hash() != stored_hash:
        raise CheckpointError("config hash mismatch (corrupt or edited)")
    if V != vocab.size:
        raise CheckpointError("vocabulary size disagrees with embedding")
    params = ModelParams(config, tensors=tensors)
    return params, vocab
