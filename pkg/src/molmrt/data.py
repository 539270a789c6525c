"""Corpus loading, degraded-observation featurization, and split making.

The recognition task: the model sees only a low-dimensional noisy
structural sketch of a molecule (element histogram, bond-order counts,
ring count, size) and must emit its canonical SMILES. The sketch is
deliberately lossy — distinct corpus molecules can share identical
noiseless features — so the conditional distribution over strings has
real ambiguity for sequence-level training to reshape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .molgraph import (
    AROMATIC,
    DOUBLE,
    InvalidMolecule,
    MolGraph,
    ParseError,
    SINGLE,
    TRIPLE,
    canonicalize,
    check_valence,
    parse_smiles,
)
from .rng import Stream
from .seqmodel import Vocab

DEFAULT_ELEMENT_ORDER = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I",
                         "H", "*")


class InsufficientData(ValueError):
    pass


@dataclass
class CorpusEntry:
    raw: str
    canonical: str
    graph: MolGraph


@dataclass
class Corpus:
    entries: list[CorpusEntry]
    source: str
    rejections: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def strings(self) -> list[str]:
        return [e.canonical for e in self.entries]


def bundled_corpus_path() -> str:
    return str(resources.files("molmrt") / "assets" / "corpus.smi")


def load_corpus(path: str) -> Corpus:
    """One SMILES per line; ``#`` comment lines and blanks skipped.

    Comments are whole-line only (first non-space character ``#``):
    inline stripping would eat triple bonds. Every line is parsed,
    valence-checked, and canonicalized. Lines that fail go to the
    rejection report with their line number; they never abort the load.
    Entries whose canonical form was already seen are merged into the
    first occurrence (not counted as rejections).
    """
    entries: list[CorpusEntry] = []
    rejections: list[tuple[int, str]] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                g = parse_smiles(text)
                canonical = canonicalize(g)
            except (ParseError, InvalidMolecule) as exc:
                rejections.append((lineno, str(exc)))
                continue
            if canonical in seen:
                continue
            seen.add(canonical)
            entries.append(CorpusEntry(text, canonical, g))
    return Corpus(entries, path, rejections)


@dataclass(frozen=True)
class FeatureSpec:
    """Layout of the structural sketch vector.

    Slots: one count per element symbol (in ``elements`` order, with
    ``*`` for wildcards and ``H`` counting explicit hydrogen atoms),
    then single/double/triple/aromatic bond counts, independent ring
    count, and atom count. ``sigma`` scales the additive Gaussian noise.
    """

    elements: tuple[str, ...] = DEFAULT_ELEMENT_ORDER
    sigma: float = 0.3

    @property
    def dim(self) -> int:
        return len(self.elements) + 4 + 1 + 1


def featurize(g: MolGraph, spec: FeatureSpec,
              rng: Stream | None = None) -> np.ndarray:
    """Structural counts plus additive Gaussian noise(0, sigma^2).

    With sigma=0 (or rng=None) the output is the exact integer counts as
    floats; it is then invariant under atom renumbering.
    """
    x = np.zeros(spec.dim, dtype=np.float64)
    pos = {el: i for i, el in enumerate(spec.elements)}
    for a in g.atoms:
        i = pos.get(a.element)
        if i is not None:
            x[i] += 1.0
    base = len(spec.elements)
    order_slot = {SINGLE: 0, DOUBLE: 1, TRIPLE: 2, AROMATIC: 3}
    for b in g.bonds:
        x[base + order_slot[b.order]] += 1.0
    x[base + 4] = g.cycle_count()
    x[base + 5] = len(g.atoms)
    if spec.sigma > 0.0 and rng is not None:
        x = x + spec.sigma * rng.gaussian(spec.dim)
    return x


@dataclass
class Splits:
    mle_train: list[int]
    mrt_train: list[int]
    eval: list[int]
    seed: int
    ratios: tuple[float, float, float]


def make_splits(corpus: Corpus, ratios: tuple[float, float, float],
                seed: int) -> Splits:
    """Seeded Fisher-Yates shuffle, then contiguous partition.

    Sizes: floor(r*n) for the first two splits, remainder to eval.
    Raises InsufficientData when any split would be empty.
    """
    if len(ratios) != 3 or min(ratios) <= 0:
        raise ValueError("need three positive ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    n = len(corpus)
    perm = Stream(seed, "split").permutation(n)
    n1 = int(ratios[0] * n)
    n2 = int(ratios[1] * n)
    n3 = n - n1 - n2
    if min(n1, n2, n3) < 1:
        raise InsufficientData(
            f"splits ({n1}, {n2}, {n3}) from {n} items; every split needs >= 1")
    return Splits(perm[:n1], perm[n1:n1 + n2], perm[n1 + n2:], seed,
                  tuple(ratios))


def feature_stats(corpus: Corpus,
                  spec: FeatureSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot mean and standard deviation of the noiseless features
    over the whole corpus. Zero-variance slots get std 1 so
    standardization maps them to exactly 0."""
    rows = np.stack([featurize(e.graph, spec, None) for e in corpus.entries])
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    std = np.where(std > 1e-9, std, 1.0)
    return mean, std


@dataclass
class DatasetItem:
    corpus_index: int
    smiles: str  # canonical target string
    features: np.ndarray


@dataclass
class Dataset:
    items: list[DatasetItem]

    def __len__(self) -> int:
        return len(self.items)

    def feature_matrix(self) -> np.ndarray:
        return np.stack([it.features for it in self.items])

    def strings(self) -> list[str]:
        return [it.smiles for it in self.items]


def build_dataset(corpus: Corpus, indices: list[int], spec: FeatureSpec,
                  seed: int,
                  stats: tuple[np.ndarray, np.ndarray]) -> Dataset:
    """Fixed degraded observations for the given corpus rows.

    Pipeline per item: noiseless counts -> standardize with the corpus
    stats -> add N(0, sigma^2) from the per-item stream keyed by corpus
    index. Each molecule therefore has one fixed noisy sketch,
    reproducible in isolation, identical wherever the item appears.
    """
    mean, std = stats
    items = []
    for idx in indices:
        entry = corpus.entries[idx]
        x = (featurize(entry.graph, spec, None) - mean) / std
        if spec.sigma > 0.0:
            x = x + spec.sigma * Stream(seed, "feat", idx).gaussian(spec.dim)
        items.append(DatasetItem(idx, entry.canonical, x))
    return Dataset(items)


def build_vocab(*datasets: Dataset) -> Vocab:
    strings: list[str] = []
    for ds in datasets:
        strings.extend(ds.strings())
    return Vocab.from_corpus(strings)


def check_for_collisions(corpus: Corpus,
                         spec: FeatureSpec) -> list[tuple[int, int]]:
    """Pairs of distinct corpus rows with identical noiseless features.

    A nonempty result proves the sketch is ambiguous (the model cannot
    be perfect even without noise).
    """
    by_key: dict[bytes, list[int]] = {}
    for i, e in enumerate(corpus.entries):
        key = featurize(e.graph, spec, None).tobytes()
        by_key.setdefault(key, []).append(i)
    out = []
    for rows in by_key.values():
        for a in range(len(rows)):
            for b in range(a + 1, len(rows)):
                out.append((rows[a], rows[b]))
    return out
