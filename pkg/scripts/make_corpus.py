#!/usr/bin/env python3
"""Regenerate the bundled molecule corpus fixture.

Deterministic: a fixed seed drives scaffold choice, substituent grafting
sites, and the final ordering, so rerunning the script reproduces the
file byte for byte. Every emitted molecule is parsed, valence-checked,
and required to canonicalize identically across randomized
re-renderings before it is accepted. A hand-curated block guarantees
coverage the sampler cannot: feature-collision pairs (distinct
molecules with identical noiseless count features), tetrahedral
centers, numbered wildcards, charges, isotopes, and multi-fragment
strings.

Usage: python3 scripts/make_corpus.py [--out PATH]
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from molmrt import data as data_mod
from molmrt.molgraph import (
    Bond,
    MolGraph,
    SINGLE,
    canonicalize,
    check_valence,
    parse_smiles,
    random_rendering,
)
from molmrt.rng import Stream

SEED = 20260823
TARGET = 1000
MAX_HEAVY = 20
MAX_LEN = 48
STABILITY_RENDERS = 20

# Distinct molecules, identical noiseless count features: these pairs
# keep the recognition task ambiguous on purpose.
COLLISION_PAIRS = [
    ("CCCO", "CC(C)O"),
    ("CCCC(=O)O", "CC(C)C(=O)O"),
    ("CCCCN", "CC(C)CN"),
    ("CCCCO", "CC(C)CO"),
]

FIXED = [
    "C", "CC", "CCO", "CO", "O", "OO", "C=C", "C#C", "C#N", "CC#N",
    "N#N", "O=C=O", "CCOCC", "CC(=O)C", "CC(=O)OC", "C1CC1", "C1CCC1",
    "c1ccccc1", "C1CCCCC1", "c1ccncc1", "c1cc[nH]c1", "c1ccoc1",
    "c1ccsc1", "C1CCNCC1", "C1CCOC1", "C1COCCN1", "C1CCNC1",
    "CC(=O)Oc1ccccc1C(=O)O",
    "CC(=O)Nc1ccc(O)cc1",
    "CC(C)Cc1ccc(cc1)C(C)C(=O)O",
    "CN1C=NC2=C1C(=O)N(C)C(=O)N2C",
    "N[C@@H](C)C(=O)O", "N[C@H](C)C(=O)O",
    "N[C@@H](CC(C)C)C(=O)O", "C[C@H](O)C(=O)O",
    "N[C@@H](CO)C(=O)O", "C[C@@H](N)CC", "F[C@H](Cl)Br",
    "*CCO", "[1*]c1ccccc1", "[2*]CC(=O)O", "*C(C)C",
    "C[N+](C)(C)C", "CC(=O)[O-]", "[NH4+]", "[NH3+]CC([O-])=O",
    "B(O)(O)c1ccccc1", "OB(O)O", "OP(=O)(O)O", "CP(C)C",
    "[13CH3]CO", "O[2H]", "CCO.Cl", "O.O",
]

SCAFFOLDS = [
    "c1ccccc1", "c1ccncc1", "c1cncnc1", "c1cc[nH]c1", "c1ccoc1",
    "c1ccsc1", "c1cnc[nH]1", "c1ccc2ccccc2c1",
    "C1CCCCC1", "C1CCCC1", "C1CC1", "C1CCC1", "C1CCNCC1", "C1CCOC1",
    "C1COCCN1", "C1CCNC1",
    "CCCC", "CCCCC", "CCOCC", "CCNCC", "CC(C)CC", "CCSCC",
]

# First atom is the attachment point.
SUBSTITUENTS = [
    "C", "CC", "CCC", "C(C)C", "C(C)(C)C", "O", "OC", "OCC", "N",
    "NC", "N(C)C", "F", "Cl", "Br", "I", "C(=O)O", "C(=O)OC",
    "C(=O)N", "C(=O)C", "C#N", "C=C", "CO", "CN", "CCO", "SC",
    "S(=O)(=O)C", "S(=O)(=O)N", "[N+](=O)[O-]", "C(F)(F)F",
    "B(O)O", "OC(=O)C", "OP(=O)(O)O", "C=O",
]


def graft(base: MolGraph, sub: MolGraph, at: int) -> MolGraph:
    off = len(base.atoms)
    atoms = ([replace(a) for a in base.atoms]
             + [replace(a) for a in sub.atoms])
    bonds = ([Bond(b.a, b.b, b.order) for b in base.bonds]
             + [Bond(b.a + off, b.b + off, b.order) for b in sub.bonds])
    bonds.append(Bond(at, off, SINGLE))
    return MolGraph(atoms, bonds)


def attachment_sites(g: MolGraph) -> list[int]:
    sites = []
    for i, atom in enumerate(g.atoms):
        if atom.element in ("*", "H") or atom.chirality:
            continue
        if atom.explicit_h is None:
            if g.implicit_h(i) >= 1:
                sites.append(i)
        else:
            # bracket atom: tentative, the post-graft valence check decides
            sites.append(i)
    return sites


def pick(stream: Stream, seq):
    return seq[int(stream.integers(1, len(seq))[0])]


def assemble(stream: Stream) -> MolGraph:
    g = parse_smiles(pick(stream, SCAFFOLDS))
    if stream.uniform(1)[0] < 0.15:
        sites = attachment_sites(g)
        if sites:
            linked = graft(g, parse_smiles(pick(stream, SCAFFOLDS)),
                           pick(stream, sites))
            if check_valence(linked).valid:
                g = linked
    n_subs = int(stream.integers(1, 4)[0])  # 0..3
    for _ in range(n_subs):
        sites = attachment_sites(g)
        if not sites:
            break
        candidate = graft(g, parse_smiles(pick(stream, SUBSTITUENTS)),
                          pick(stream, sites))
        if check_valence(candidate).valid:
            g = candidate
    return g


def is_stable(canonical: str, attempt: int) -> bool:
    g = parse_smiles(canonical)
    for t in range(STABILITY_RENDERS):
        rendered = random_rendering(g, Stream(SEED, "stab", attempt, t))
        if canonicalize(parse_smiles(rendered)) != canonical:
            return False
    return True


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    default_out = os.path.join(os.path.dirname(__file__), "..", "src",
                               "molmrt", "assets", "corpus.smi")
    ap.add_argument("--out", default=default_out)
    args = ap.parse_args()

    entries: list[tuple[str, str]] = []  # (raw line, canonical)
    seen: set[str] = set()

    fixed = [s for pair in COLLISION_PAIRS for s in pair] + FIXED
    for i, s in enumerate(fixed):
        g = parse_smiles(s)
        report = check_valence(g)
        if not report.valid:
            raise SystemExit(f"fixed entry invalid: {s!r} "
                             f"({report.violations[0].reason})")
        c = canonicalize(g)
        if not is_stable(c, -1 - i):
            raise SystemExit(f"fixed entry unstable: {s!r}")
        if c in seen:
            raise SystemExit(f"fixed entry duplicate: {s!r}")
        seen.add(c)
        entries.append((s, c))

    attempt = 0
    while len(entries) < TARGET:
        attempt += 1
        if attempt > 100000:
            raise SystemExit("sampler exhausted before reaching target")
        g = assemble(Stream(SEED, "assemble", attempt))
        if len(g.atoms) > MAX_HEAVY:
            continue
        try:
            c = canonicalize(g)
        except Exception:
            continue
        if len(c) > MAX_LEN or c in seen:
            continue
        if not is_stable(c, attempt):
            print(f"unstable, skipped: {c}", file=sys.stderr)
            continue
        seen.add(c)
        entries.append((c, c))

    order = Stream(SEED, "order").permutation(len(entries))
    lines = [entries[i][0] for i in order]

    out = os.path.abspath(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("# bundled molecule corpus, one SMILES per line\n")
        fh.write("# generated by scripts/make_corpus.py "
                 f"(seed {SEED}); do not edit by hand\n")
        fh.write("\n".join(lines) + "\n")

    corpus = data_mod.load_corpus(out)
    if corpus.rejections:
        raise SystemExit(f"self-check failed: {corpus.rejections[:3]}")
    if len(corpus.entries) != TARGET:
        raise SystemExit(f"self-check failed: {len(corpus.entries)} "
                         f"entries after reload")
    collisions = data_mod.check_for_collisions(
        corpus, data_mod.FeatureSpec(sigma=0.0))
    if not collisions:
        raise SystemExit("self-check failed: no feature-collision pair")
    sizes = [len(e.canonical) for e in corpus.entries]
    print(f"wrote {len(corpus.entries)} molecules to {out}")
    print(f"canonical length: min {min(sizes)} max {max(sizes)} "
          f"mean {sum(sizes) / len(sizes):.1f}")
    print(f"feature collisions (noiseless): {len(collisions)} pairs")
    return 0


if __name__ == "__main__":
    sys.exit(main())
