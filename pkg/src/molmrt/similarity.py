"""Three interchangeable molecule similarities mapping into [0, 1].

* ``edit_distance``: string-level, 1 - Levenshtein / max length, computed
  on the raw strings as given (a prediction can be an alternative
  rendering of the right molecule and still score below 1 here).
* ``tanimoto``: bit-set overlap of circular fingerprints.
* ``visual``: cosine of embedding vectors from a pluggable provider; the
  bundled stub provider projects the fingerprint through a fixed seeded
  matrix, standing in for a trained visual encoder.

All fingerprint hashing goes through the package's stable hash so bit
patterns are identical across platforms and runs.
"""

from __future__ import annotations

import struct
import subprocess
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .molgraph import (
    InvalidMolecule,
    MolGraph,
    ParseError,
    canonicalize,
    check_valence,
    parse_smiles,
)
from .rng import Stream, stable_hash

_BOND_FP_CODE = {"single": 1, "double": 2, "triple": 3, "aromatic": 4}

SIM_KINDS = ("edit_distance", "tanimoto", "visual")


class WidthMismatch(ValueError):
    """Tanimoto over fingerprints of different widths."""


class ProviderFailure(RuntimeError):
    """An embedding provider misbehaved (protocol or numeric trouble)."""


def levenshtein(a: str, b: str) -> int:
    """Minimum single-character edits (insert/delete/substitute) from a to b.

    Two-row dynamic programming, O(|a|*|b|) time, O(min) memory.
    """
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(
                prev[j] + 1,
                cur[j - 1] + 1,
                prev[j - 1] + (ca != cb),
            ))
        prev = cur
    return prev[-1]


def edit_similarity(a: str, b: str) -> float:
    """1 - Lev(a, b) / max(|a|, |b|); 1.0 when both strings are empty."""
    m = max(len(a), len(b))
    if m == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / m


@dataclass(frozen=True)
class Fingerprint:
    """Fixed-width bit vector held as a Python int bitmask."""

    bits: int
    width: int = 2048

    def __post_init__(self):
        if self.width <= 0 or self.width & (self.width - 1):
            raise ValueError("fingerprint width must be a power of two")
        if self.bits < 0 or self.bits >> self.width:
            raise ValueError("bits outside the fingerprint width")

    @property
    def popcount(self) -> int:
        return self.bits.bit_count()

    def positions(self) -> list[int]:
        return [i for i in range(self.width) if (self.bits >> i) & 1]

    @classmethod
    def from_positions(cls, positions, width: int = 2048) -> "Fingerprint":
        bits = 0
        for p in positions:
            bits |= 1 << (p % width)
        return cls(bits, width)


def morgan_fingerprint(g: MolGraph, radius: int = 2,
                       width: int = 2048) -> Fingerprint:
    """Circular substructure fingerprint by iterative neighborhood hashing.

    Round 0 hashes (element, charge, degree, H count, ring flag,
    aromatic flag) per atom; each later round rehashes an atom's
    identifier with its sorted (bond code, neighbor identifier) list.
    Identifiers from every round fold into the bit vector modulo width.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    report = check_valence(g)
    if not report.valid:
        v = report.violations[0]
        raise InvalidMolecule(f"atom {v.atom}: {v.reason}")
    ring = g.ring_atoms()
    ids = [
        stable_hash("atom", a.element, a.charge, g.degree(i), g.total_h(i),
                    int(i in ring), int(a.aromatic))
        for i, a in enumerate(g.atoms)
    ]
    bits = 0
    for ident in ids:
        bits |= 1 << (ident % width)
    adj = [
        [(_BOND_FP_CODE[bond.order], j) for j, bond in g.neighbors(i)]
        for i in range(len(g))
    ]
    for r in range(1, radius + 1):
        new_ids = []
        for i in range(len(g)):
            env = sorted((code, ids[j]) for code, j in adj[i])
            flat: list[int] = [r, ids[i]]
            for code, nid in env:
                flat.append(code)
                flat.append(nid)
            new_ids.append(stable_hash("round", *flat))
        ids = new_ids
        for ident in ids:
            bits |= 1 << (ident % width)
    return Fingerprint(bits, width)


def tanimoto(f1: Fingerprint, f2: Fingerprint) -> float:
    """|intersection| / |union| of set bits; 1.0 when both are empty."""
    if f1.width != f2.width:
        raise WidthMismatch(f"widths {f1.width} != {f2.width}")
    union = (f1.bits | f2.bits).bit_count()
    if union == 0:
        return 1.0
    return (f1.bits & f2.bits).bit_count() / union


# ---------------------------------------------------------------------------
# Embedding providers

# The provider input is a canonical-invariant byte sketch of the graph;
# canonical SMILES serves exactly that purpose and keeps the subprocess
# protocol human-readable.


def render_sketch(g: MolGraph) -> str:
    return canonicalize(g)


class StubEmbedder:
    """Deterministic stand-in for a trained visual encoder.

    Embeds the fingerprint of the sketched molecule through a fixed
    seeded Gaussian projection to ``dim`` and L2-normalizes. Cheap,
    order-invariant, and identical across runs and platforms.
    """

    _PROJECTION_SEED = 900011

    def __init__(self, dim: int = 128, width: int = 2048, radius: int = 2):
        self.dim = dim
        self.width = width
        self.radius = radius
        self.thread_safe = True
        draws = Stream(self._PROJECTION_SEED, "stub-projection", dim, width)
        self._matrix = draws.gaussian(dim * width).reshape(width, dim)

    def embed(self, sketch: str) -> np.ndarray:
        g = parse_smiles(sketch)
        fp = morgan_fingerprint(g, radius=self.radius, width=self.width)
        pos = fp.positions()
        if not pos:
            v = np.ones(self.dim, dtype=np.float64)
        else:
            v = self._matrix[pos].sum(axis=0)
        n = float(np.linalg.norm(v))
        if n == 0.0:
            v = np.ones(self.dim, dtype=np.float64)
            n = float(np.linalg.norm(v))
        return v / n


class SubprocessEmbedder:
    """Client for an external encoder speaking the line protocol:

    request:  u32 little-endian byte length, then that many bytes of
              UTF-8 canonical SMILES;
    response: ``dim`` little-endian float32 values (a unit vector).

    One request in flight at a time; not thread safe.
    """

    def __init__(self, command: list[str], dim: int = 128):
        self.dim = dim
        self.thread_safe = False
        self._command = command
        self._proc: subprocess.Popen | None = None

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self._command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            )
        return self._proc

    def embed(self, sketch: str) -> np.ndarray:
        proc = self._ensure()
        payload = sketch.encode("utf-8")
        try:
            proc.stdin.write(struct.pack("<I", len(payload)) + payload)
            proc.stdin.flush()
            want = self.dim * 4
            buf = b""
            while len(buf) < want:
                chunk = proc.stdout.read(want - len(buf))
                if not chunk:
                    raise ProviderFailure(
                        f"provider closed after {len(buf)}/{want} bytes")
                buf += chunk
        except (BrokenPipeError, OSError) as exc:
            raise ProviderFailure(f"provider pipe error: {exc}") from exc
        v = np.frombuffer(buf, dtype="<f4").astype(np.float64)
        n = float(np.linalg.norm(v))
        if not np.isfinite(n) or abs(n - 1.0) > 1e-3:
            raise ProviderFailure(f"provider vector norm {n!r} not ~1")
        return v / n

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=5)
        self._proc = None


def cosine_clamped(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of two unit vectors, clamped into [0, 1].

    The raw cosine can be negative; the composite reward needs a value
    in [0, 1], so negative alignment is floored at zero.
    """
    c = float(np.dot(u, v))
    return min(1.0, max(0.0, c))


def visual_similarity(pred: str, truth: str, provider,
                      renderer=None) -> float:
    """Cosine similarity of provider embeddings of two molecules.

    Both strings must parse and pass valence checking; the renderer maps
    a MolGraph to the provider's input (default: canonical sketch).
    """
    renderer = renderer or render_sketch
    vecs = []
    for s in (pred, truth):
        g = parse_smiles(s)
        vecs.append(provider.embed(renderer(g)))
    return cosine_clamped(vecs[0], vecs[1])


# ---------------------------------------------------------------------------
# The uniform Sim interface

# Hot-path caches keyed by the literal string; candidate sets repeat
# heavily during training, so parse/fingerprint/embedding work is done
# once per distinct string.


@lru_cache(maxsize=1 << 17)
def _cached_fingerprint(s: str) -> Fingerprint | None:
    try:
        return morgan_fingerprint(parse_smiles(s))
    except (ParseError, InvalidMolecule):
        return None


class SimilarityFunction:
    """kind + evaluate(pred, truth) -> [0, 1].

    evaluate returns 0.0 for a prediction that fails to parse or fails
    valence (the structural kinds need a graph); a broken truth raises
    InvalidMolecule. The composite reward gates by validity anyway, so
    the 0.0 never reaches training objectives directly.
    """

    def __init__(self, kind: str, fn):
        self.kind = kind
        self._fn = fn

    def evaluate(self, pred: str, truth: str) -> float:
        return self._fn(pred, truth)


def _edit_eval(pred: str, truth: str) -> float:
    return edit_similarity(pred, truth)


def _tanimoto_eval(pred: str, truth: str) -> float:
    ft = _cached_fingerprint(truth)
    if ft is None:
        raise InvalidMolecule(f"truth does not fingerprint: {truth!r}")
    fp = _cached_fingerprint(pred)
    if fp is None:
        return 0.0
    return tanimoto(fp, ft)


def make_similarity(kind: str, provider=None) -> SimilarityFunction:
    """Build the Sim function for ``kind`` in {edit_distance, tanimoto,
    visual}. ``visual`` uses the given provider or the bundled stub."""
    if kind == "edit_distance":
        return SimilarityFunction(kind, _edit_eval)
    if kind == "tanimoto":
        return SimilarityFunction(kind, _tanimoto_eval)
    if kind == "visual":
        prov = provider if provider is not None else get_stub_embedder()
        cache: dict[str, np.ndarray] = {}

        def _embed(s: str) -> np.ndarray | None:
            if s not in cache:
                try:
                    g = parse_smiles(s)
                    cache[s] = prov.embed(render_sketch(g))
                except (ParseError, InvalidMolecule):
                    cache[s] = None
            return cache[s]

        def _visual_eval(pred: str, truth: str) -> float:
            vt = _embed(truth)
            if vt is None:
                raise InvalidMolecule(f"truth does not embed: {truth!r}")
            vp = _embed(pred)
            if vp is None:
                return 0.0
            return cosine_clamped(vp, vt)

        return SimilarityFunction(kind, _visual_eval)
    raise ValueError(f"unknown similarity kind {kind!r}")


_STUB: StubEmbedder | None = None


def get_stub_embedder() -> StubEmbedder:
    global _STUB
    if _STUB is None:
        _STUB = StubEmbedder()
    return _STUB
