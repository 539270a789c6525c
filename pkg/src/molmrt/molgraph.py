"""Molecular graphs: SMILES parsing, valence checking, canonical writing.

Self-contained, no chemistry toolkit. The supported SMILES subset:

* organic-subset atoms B C N O P S F Cl Br I, aromatic b c n o p s,
  bracket atoms with isotope / chirality (@, @@) / H count / charge,
  the wildcard ``*`` (optionally labelled, e.g. ``[2*]``),
* bonds ``- = # :``, ring closures (digits and ``%nn``), branches,
  dot-separated fragments,
* directional single-bond markers ``/`` and ``\\`` are accepted but
  recorded as plain single bonds; double-bond geometry is not modelled.

Conventions fixed here (they define canonical output and validity):

* Implicit hydrogens on a bare organic-subset atom: the smallest allowed
  valence that is >= the atom's bond-order sum, minus that sum (0 when
  every allowed valence is exceeded). Bracket atoms carry exactly their
  written H count.
* Aromatic bonds count 1.5 toward the bond-order sum and the total is
  floored. If that still exceeds the atom's maximum allowed valence the
  atom is recounted with aromatic bonds at 1.0 (lone-pair donors such as
  the oxygen in furan). Aromatic atoms other than carbon never receive
  implicit hydrogens, so a pyrrole-type nitrogen must be written [nH].
* Charge shifts an atom's allowed valences: a +1 nitrogen may carry four
  bonds, a -1 oxygen one.
* Chirality is tetrahedral order parity over the neighbor list as
  written, with an in-bracket hydrogen occupying its textual position.
  Centers whose neighbors are not all symmetry-distinct are dropped at
  write time.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

ORGANIC_SUBSET = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC_ELEMENTS = ("b", "c", "n", "o", "p", "s")
ELEMENTS = ORGANIC_SUBSET + ("H",)

SINGLE = "single"
DOUBLE = "double"
TRIPLE = "triple"
AROMATIC = "aromatic"
_BOND_VALUE = {SINGLE: 1.0, DOUBLE: 2.0, TRIPLE: 3.0, AROMATIC: 1.5}
_BOND_CODE = {SINGLE: 1, DOUBLE: 2, TRIPLE: 3, AROMATIC: 4}
_BOND_OF_CHAR = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC}

STRIP = "strip"
PRESERVE = "preserve_tetrahedral"

VALENCE_EXCEEDED = "valence_exceeded"
AROMATIC_OUTSIDE_RING = "aromatic_outside_ring"

# Marker used in chiral neighbor-order tuples for the in-bracket hydrogen.
H_SLOT = -1


class ParseError(ValueError):
    """SMILES text rejected; carries the character offset of the fault."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class InvalidMolecule(ValueError):
    """A structurally parseable molecule that fails validity rules."""


@dataclass
class Atom:
    element: str
    aromatic: bool = False
    charge: int = 0
    isotope: int | None = None
    # None means "bare organic-subset atom, hydrogens implied by valence".
    explicit_h: int | None = None
    chirality: str | None = None  # "@" (ccw) or "@@" (cw)
    rgroup: int | None = None  # label of a numbered wildcard, e.g. [2*]
    # Reference neighbor order for chirality: atom indices, H_SLOT for the
    # in-bracket hydrogen. Set by the parser from textual order.
    chiral_neighbors: tuple[int, ...] | None = None


@dataclass
class Bond:
    a: int
    b: int
    order: str = SINGLE


@dataclass
class Violation:
    atom: int
    reason: str


@dataclass
class ValidityReport:
    valid: bool
    violations: list[Violation] = field(default_factory=list)


_DEFAULT_TABLE: dict[str, tuple[int, ...]] | None = None


def load_valence_table(path: str | None = None) -> dict[str, tuple[int, ...]]:
    """Read an element->allowed-valences table.

    Format: one ``SYMBOL v[,v...]`` pair per line, ``#`` comments and
    blank lines ignored. With no path, the bundled table is returned
    (cached).
    """
    global _DEFAULT_TABLE
    if path is None:
        if _DEFAULT_TABLE is None:
            text = (
                resources.files("molmrt") / "assets" / "valence.txt"
            ).read_text("utf-8")
            _DEFAULT_TABLE = _parse_valence_text(text)
        return _DEFAULT_TABLE
    with open(path, "r", encoding="utf-8") as fh:
        return _parse_valence_text(fh.read())


def _parse_valence_text(text: str) -> dict[str, tuple[int, ...]]:
    table: dict[str, tuple[int, ...]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"valence table line {lineno}: expected 'SYMBOL v[,v...]'")
        symbol, values = parts
        try:
            parsed = tuple(sorted(int(v) for v in values.split(",")))
        except ValueError as exc:
            raise ValueError(f"valence table line {lineno}: bad valence list") from exc
        if not parsed or any(v < 0 for v in parsed):
            raise ValueError(f"valence table line {lineno}: valences must be >= 0")
        table[symbol] = parsed
    return table


class MolGraph:
    """An immutable-after-construction molecular graph.

    Derived properties (adjacency, ring membership, components) are
    cached on first use; do not mutate atoms or bonds afterwards.
    """

    def __init__(self, atoms: list[Atom], bonds: list[Bond],
                 table: dict[str, tuple[int, ...]] | None = None):
        self.atoms = atoms
        self.bonds = bonds
        self._table = table if table is not None else load_valence_table()
        self._adj: list[list[tuple[int, Bond]]] | None = None
        self._ring_atoms: frozenset[int] | None = None
        self._ring_bonds: frozenset[int] | None = None
        self._components: list[list[int]] | None = None
        # per-atom memo tables; safe because the graph is frozen
        self._valence_cache: list[tuple[int, ...] | None] = [None] * len(atoms)
        self._bsum_cache: list[tuple[int, bool] | None] = [None] * len(atoms)
        self._imph_cache: list[int | None] = [None] * len(atoms)

    def __len__(self) -> int:
        return len(self.atoms)

    def adjacency(self) -> list[list[tuple[int, Bond]]]:
        if self._adj is None:
            adj: list[list[tuple[int, Bond]]] = [[] for _ in self.atoms]
            for bond in self.bonds:
                adj[bond.a].append((bond.b, bond))
                adj[bond.b].append((bond.a, bond))
            self._adj = adj
        return self._adj

    def neighbors(self, i: int) -> list[tuple[int, Bond]]:
        return self.adjacency()[i]

    def degree(self, i: int) -> int:
        return len(self.adjacency()[i])

    def bond_between(self, a: int, b: int) -> Bond | None:
        for j, bond in self.adjacency()[a]:
            if j == b:
                return bond
        return None

    def components(self) -> list[list[int]]:
        if self._components is None:
            seen = [False] * len(self.atoms)
            comps: list[list[int]] = []
            for s in range(len(self.atoms)):
                if seen[s]:
                    continue
                comp = [s]
                seen[s] = True
                stack = [s]
                while stack:
                    u = stack.pop()
                    for v, _ in self.adjacency()[u]:
                        if not seen[v]:
                            seen[v] = True
                            comp.append(v)
                            stack.append(v)
                comps.append(sorted(comp))
            self._components = comps
        return self._components

    def is_connected(self) -> bool:
        return len(self.components()) <= 1

    def cycle_count(self) -> int:
        """Independent cycles: bonds - atoms + components."""
        return len(self.bonds) - len(self.atoms) + len(self.components())

    def ring_bond_ids(self) -> frozenset[int]:
        """Indices into ``bonds`` of bonds on at least one cycle."""
        if self._ring_bonds is None:
            self._find_bridges()
        return self._ring_bonds

    def ring_atoms(self) -> frozenset[int]:
        if self._ring_atoms is None:
            self._find_bridges()
        return self._ring_atoms

    def _find_bridges(self) -> None:
        # Iterative bridge finding; ring bonds are the non-bridges.
        n = len(self.atoms)
        disc = [-1] * n
        low = [0] * n
        bridges: set[int] = set()
        timer = 0
        adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        for k, b in enumerate(self.bonds):
            adj[b.a].append((b.b, k))
            adj[b.b].append((b.a, k))
        for start in range(n):
            if disc[start] != -1:
                continue
            stack: list[tuple[int, int, int]] = [(start, -1, 0)]
            while stack:
                u, pedge, it = stack.pop()
                if it == 0:
                    disc[u] = low[u] = timer
                    timer += 1
                if it < len(adj[u]):
                    stack.append((u, pedge, it + 1))
                    v, eid = adj[u][it]
                    if eid == pedge:
                        continue
                    if disc[v] == -1:
                        stack.append((v, eid, 0))
                    else:
                        low[u] = min(low[u], disc[v])
                else:
                    if pedge != -1:
                        p = self.bonds[pedge]
                        parent = p.a if p.b == u else p.b
                        low[parent] = min(low[parent], low[u])
                        if low[u] > disc[parent]:
                            bridges.add(pedge)
        ring_bonds = frozenset(
            k for k in range(len(self.bonds)) if k not in bridges
        )
        ring_atoms: set[int] = set()
        for k in ring_bonds:
            ring_atoms.add(self.bonds[k].a)
            ring_atoms.add(self.bonds[k].b)
        self._ring_bonds = ring_bonds
        self._ring_atoms = frozenset(ring_atoms)

    # -- hydrogen and valence accounting -------------------------------

    def allowed_valences(self, i: int) -> tuple[int, ...]:
        cached = self._valence_cache[i]
        if cached is not None:
            return cached
        a = self.atoms[i]
        base = self._table.get(a.element.capitalize() if a.aromatic else a.element)
        if a.element == "*" or base is None:
            out: tuple[int, ...] = ()
        else:
            out = tuple(sorted(v + a.charge for v in base if v + a.charge >= 0))
        self._valence_cache[i] = out
        return out

    def _bond_order_sum(self, i: int) -> tuple[int, bool]:
        """(effective integer bond-order sum, used lone-pair fallback).

        Aromatic bonds count 1.5, floored; if the atom then exceeds its
        maximum allowed valence, aromatic bonds are recounted at 1.0.
        """
        cached = self._bsum_cache[i]
        if cached is not None:
            return cached
        raw = 0.0
        has_aromatic = False
        for _, bond in self.neighbors(i):
            raw += _BOND_VALUE[bond.order]
            has_aromatic = has_aromatic or bond.order == AROMATIC
        eff = int(raw)
        fallback = False
        if has_aromatic:
            allowed = self.allowed_valences(i)
            cap = max(allowed) if allowed else 0
            if eff > cap:
                eff = int(sum(
                    1.0 if bond.order == AROMATIC else _BOND_VALUE[bond.order]
                    for _, bond in self.neighbors(i)
                ))
                fallback = True
        self._bsum_cache[i] = (eff, fallback)
        return eff, fallback

    def implicit_h(self, i: int) -> int:
        """Hydrogens implied by valence for a bare organic-subset atom."""
        cached = self._imph_cache[i]
        if cached is not None:
            return cached
        a = self.atoms[i]
        if a.element == "*" or (a.aromatic and a.element.capitalize() != "C"):
            out = 0
        else:
            allowed = self.allowed_valences(i)
            eff, _ = self._bond_order_sum(i)
            fitting = [v for v in allowed if v >= eff]
            out = (min(fitting) - eff) if fitting else 0
        self._imph_cache[i] = out
        return out

    def total_h(self, i: int) -> int:
        a = self.atoms[i]
        if a.explicit_h is not None:
            return a.explicit_h
        return self.implicit_h(i)


def check_valence(g: MolGraph,
                  table: dict[str, tuple[int, ...]] | None = None) -> ValidityReport:
    """Check every atom against the allowed-valence table.

    Wildcards always pass. Aromatic atoms must sit on a ring. An atom
    fails when its effective bond-order sum plus hydrogen count exceeds
    its maximum allowed valence (charge-shifted).
    """
    if table is not None and table is not g._table:
        g = MolGraph(g.atoms, g.bonds, table)
    violations: list[Violation] = []
    ring = g.ring_atoms()
    for i, a in enumerate(g.atoms):
        if a.element == "*":
            continue
        if a.aromatic and i not in ring:
            violations.append(Violation(i, AROMATIC_OUTSIDE_RING))
        allowed = g.allowed_valences(i)
        cap = max(allowed) if allowed else 0
        eff, _ = g._bond_order_sum(i)
        if eff + g.total_h(i) > cap:
            violations.append(Violation(i, VALENCE_EXCEEDED))
    return ValidityReport(valid=not violations, violations=violations)


# ---------------------------------------------------------------------------
# Parsing


def parse_smiles(text: str,
                 table: dict[str, tuple[int, ...]] | None = None) -> MolGraph:
    """Parse SMILES text into a MolGraph.

    Raises ParseError (with character offset) for malformed input:
    unknown characters, unbalanced parentheses, unmatched ring closures,
    dangling bonds, malformed bracket atoms, conflicting ring-closure
    bond orders, duplicate bonds, empty input.
    """
    if not isinstance(text, str):
        raise ParseError(0, "input must be a string")
    if text != text.strip() or not text:
        if not text.strip():
            raise ParseError(0, "empty input")
        raise ParseError(0, "leading or trailing whitespace")

    atoms: list[Atom] = []
    bonds: list[Bond] = []
    bond_pairs: set[tuple[int, int]] = set()
    # Per-atom neighbor order as written; ring openings hold a one-slot
    # list that is patched when the closure arrives.
    slots: list[list] = []

    prev: int | None = None
    pending: str | None = None
    pending_off = 0
    branch_stack: list[tuple[int | None, int, int]] = []
    ring_open: dict[int, tuple[int, str | None, int, list]] = {}
    dot_off: int | None = None
    after_open = False

    def add_bond(a: int, b: int, order: str, off: int) -> None:
        if a == b:
            raise ParseError(off, "ring closure bonds an atom to itself")
        key = (a, b) if a < b else (b, a)
        if key in bond_pairs:
            raise ParseError(off, "duplicate bond between the same atoms")
        bond_pairs.add(key)
        bonds.append(Bond(a, b, order))

    def add_atom(atom: Atom, off: int) -> None:
        nonlocal prev, pending, dot_off
        idx = len(atoms)
        atoms.append(atom)
        slots.append([])
        if prev is None:
            if pending is not None:
                raise ParseError(pending_off, "bond symbol without a preceding atom")
        else:
            if pending is not None:
                order = _BOND_OF_CHAR[pending] if pending in _BOND_OF_CHAR else SINGLE
            elif atoms[prev].aromatic and atom.aromatic:
                order = AROMATIC
            else:
                order = SINGLE
            add_bond(prev, idx, order, off)
            slots[prev].append(idx)
            slots[idx].append(prev)
        if atom.chirality is not None and (atom.explicit_h or 0) >= 1:
            slots[idx].append(H_SLOT)
        prev = idx
        pending = None
        dot_off = None
        nonlocal after_open
        after_open = False

    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "[":
            atom, consumed = _parse_bracket(text, i)
            add_atom(atom, i)
            i += consumed
        elif ch.isupper():
            two = text[i:i + 2]
            if two in ("Cl", "Br"):
                add_atom(Atom(two), i)
                i += 2
            elif ch in ORGANIC_SUBSET:
                add_atom(Atom(ch), i)
                i += 1
            else:
                raise ParseError(i, f"unknown element {ch!r}")
        elif ch in AROMATIC_ELEMENTS:
            add_atom(Atom(ch.upper(), aromatic=True), i)
            i += 1
        elif ch == "*":
            add_atom(Atom("*"), i)
            i += 1
        elif ch in "-=#:":
            if pending is not None:
                raise ParseError(i, "two bond symbols in a row")
            pending = ch
            pending_off = i
            i += 1
        elif ch in "/\\":
            # directional markers: keep the single bond, drop the geometry
            if pending is not None:
                raise ParseError(i, "two bond symbols in a row")
            pending = "/"
            pending_off = i
            i += 1
        elif ch.isdigit() or ch == "%":
            if ch == "%":
                tail = text[i + 1:i + 3]
                if len(tail) != 2 or not tail.isdigit():
                    raise ParseError(i, "'%' ring closure needs two digits")
                num = int(tail)
                width = 3
            else:
                num = int(ch)
                width = 1
            if prev is None:
                raise ParseError(i, "ring closure before any atom")
            if after_open:
                raise ParseError(i, "ring closure may not start a branch")
            if num in ring_open:
                o_atom, o_bond, o_off, o_slot = ring_open.pop(num)
                order = _resolve_ring_order(o_bond, pending, atoms[o_atom],
                                            atoms[prev], i)
                add_bond(o_atom, prev, order, i)
                o_slot[0] = prev
                slots[prev].append(o_atom)
            else:
                placeholder: list = [None]
                slots[prev].append(placeholder)
                ring_open[num] = (prev, pending, i, placeholder)
            pending = None
            i += width
        elif ch == "(":
            if pending is not None:
                raise ParseError(pending_off, "bond symbol before a branch")
            if prev is None:
                raise ParseError(i, "branch before any atom")
            if after_open:
                raise ParseError(i, "branch may not start with another branch")
            branch_stack.append((prev, i, len(atoms)))
            after_open = True
            i += 1
        elif ch == ")":
            if pending is not None:
                raise ParseError(pending_off, "dangling bond inside branch")
            if not branch_stack:
                raise ParseError(i, "unbalanced ')'")
            opener_prev, _, count = branch_stack.pop()
            if len(atoms) == count:
                raise ParseError(i, "empty branch")
            prev = opener_prev
            i += 1
        elif ch == ".":
            if branch_stack:
                raise ParseError(i, "fragment separator inside a branch")
            if pending is not None:
                raise ParseError(pending_off, "bond symbol before fragment separator")
            if prev is None:
                raise ParseError(i, "fragment separator without a preceding atom")
            prev = None
            dot_off = i
            i += 1
        else:
            raise ParseError(i, f"unexpected character {ch!r}")

    if pending is not None:
        raise ParseError(pending_off, "dangling bond symbol")
    if branch_stack:
        raise ParseError(branch_stack[-1][1], "unbalanced '('")
    if ring_open:
        off = min(entry[2] for entry in ring_open.values())
        raise ParseError(off, "unmatched ring closure")
    if dot_off is not None:
        raise ParseError(dot_off, "fragment separator without a following atom")
    if not atoms:
        raise ParseError(0, "no atoms")

    for idx, atom in enumerate(atoms):
        if atom.chirality is not None:
            flat = tuple(s if isinstance(s, int) else s[0] for s in slots[idx])
            atom.chiral_neighbors = flat
    return MolGraph(atoms, bonds, table)


def _resolve_ring_order(open_sym: str | None, close_sym: str | None,
                        a1: Atom, a2: Atom, off: int) -> str:
    def to_order(sym: str | None) -> str | None:
        if sym is None:
            return None
        return _BOND_OF_CHAR.get(sym, SINGLE)

    o1, o2 = to_order(open_sym), to_order(close_sym)
    if o1 is not None and o2 is not None and o1 != o2:
        raise ParseError(off, "conflicting bond orders on ring closure")
    order = o1 if o1 is not None else o2
    if order is None:
        order = AROMATIC if (a1.aromatic and a2.aromatic) else SINGLE
    return order


def _parse_bracket(text: str, start: int) -> tuple[Atom, int]:
    """Parse ``[...]`` starting at ``start``; return (atom, chars consumed)."""
    end = text.find("]", start)
    if end == -1:
        raise ParseError(start, "unclosed bracket atom")
    body = text[start + 1:end]
    base = start + 1

    def fail(pos: int, why: str):
        raise ParseError(base + pos, f"malformed bracket atom: {why}")

    pos = 0
    digits = ""
    while pos < len(body) and body[pos].isdigit():
        digits += body[pos]
        pos += 1

    element = None
    aromatic = False
    if pos < len(body):
        two = body[pos:pos + 2]
        if two in ("Cl", "Br"):
            element = two
            pos += 2
        elif body[pos] == "*":
            element = "*"
            pos += 1
        elif body[pos] in ELEMENTS:
            element = body[pos]
            pos += 1
        elif body[pos] in AROMATIC_ELEMENTS:
            element = body[pos].upper()
            aromatic = True
            pos += 1
    if element is None:
        fail(pos, "missing or unknown element symbol")

    chirality = None
    if pos < len(body) and body[pos] == "@":
        if pos + 1 < len(body) and body[pos + 1] == "@":
            chirality = "@@"
            pos += 2
        else:
            chirality = "@"
            pos += 1

    hcount = 0
    has_h = False
    if pos < len(body) and body[pos] == "H" and element != "H":
        has_h = True
        pos += 1
        hd = ""
        while pos < len(body) and body[pos].isdigit():
            hd += body[pos]
            pos += 1
        hcount = int(hd) if hd else 1
    elif element == "H" and pos < len(body) and body[pos] == "H":
        # [HH]: an H atom with one attached hydrogen
        has_h = True
        pos += 1
        hd = ""
        while pos < len(body) and body[pos].isdigit():
            hd += body[pos]
            pos += 1
        hcount = int(hd) if hd else 1

    charge = 0
    if pos < len(body) and body[pos] in "+-":
        sign = 1 if body[pos] == "+" else -1
        symbol = body[pos]
        pos += 1
        if pos < len(body) and body[pos].isdigit():
            cd = ""
            while pos < len(body) and body[pos].isdigit():
                cd += body[pos]
                pos += 1
            charge = sign * int(cd)
        else:
            count = 1
            while pos < len(body) and body[pos] == symbol:
                count += 1
                pos += 1
            charge = sign * count

    if pos != len(body):
        fail(pos, f"unexpected {body[pos]!r}")

    if element == "*":
        if chirality is not None or has_h or charge != 0:
            fail(0, "wildcard atoms take no chirality, H count, or charge")
        rgroup = int(digits) if digits else None
        if rgroup == 0:
            fail(0, "wildcard label must be positive")
        return Atom("*", rgroup=rgroup), end - start + 1

    isotope = None
    if digits:
        isotope = int(digits)
        if isotope == 0:
            fail(0, "isotope must be positive")
    return (
        Atom(element, aromatic=aromatic, charge=charge, isotope=isotope,
             explicit_h=hcount, chirality=chirality),
        end - start + 1,
    )


# ---------------------------------------------------------------------------
# Canonical ranking and writing


def _dense_rank(keys: list) -> list[int]:
    order = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [order[k] for k in keys]


def _initial_invariants(g: MolGraph) -> list[tuple]:
    ring = g.ring_atoms()
    inv = []
    for i, a in enumerate(g.atoms):
        inv.append((
            a.element,
            int(a.aromatic),
            a.charge,
            a.isotope or 0,
            a.rgroup or 0,
            g.total_h(i),
            g.degree(i),
            int(i in ring),
        ))
    return inv


def _packed_adjacency(g: MolGraph) -> list[list[tuple[int, int]]]:
    # bond code and neighbor rank packed into one int so the per-atom
    # neighborhood signatures sort fast
    n = len(g)
    return [
        [(_BOND_CODE[bond.order] * n, j) for j, bond in g.neighbors(i)]
        for i in range(n)
    ]


def _refine(g: MolGraph, ranks: list[int],
            adj: list[list[tuple[int, int]]] | None = None) -> list[int]:
    n = len(g)
    if adj is None:
        adj = _packed_adjacency(g)
    classes = len(set(ranks))
    while True:
        keys = [
            (ranks[i], tuple(sorted(base + ranks[j] for base, j in adj[i])))
            for i in range(n)
        ]
        new = _dense_rank(keys)
        new_classes = len(set(new))
        if new_classes == classes:
            return new
        ranks, classes = new, new_classes


def canonical_ranks(g: MolGraph) -> tuple[list[int], list[int]]:
    """(total order per atom, symmetry class per atom).

    Neighborhood refinement over element/charge/isotope/H/degree/ring
    invariants, then repeated lowest-index tie-breaking until every atom
    has a unique rank. The pre-tie-break classes are returned for
    symmetry-based stereo pruning.
    """
    adj = _packed_adjacency(g)
    ranks = _refine(g, _dense_rank(_initial_invariants(g)), adj)
    sym = ranks
    while True:
        by_rank: dict[int, list[int]] = {}
        for i, r in enumerate(ranks):
            by_rank.setdefault(r, []).append(i)
        tied = sorted(r for r, members in by_rank.items() if len(members) > 1)
        if not tied:
            return ranks, sym
        chosen = min(by_rank[tied[0]])
        keys = [(ranks[i], int(i != chosen)) for i in range(len(g))]
        ranks = _refine(g, _dense_rank(keys), adj)


def _perm_parity(src: list[int], dst: list[int]) -> int:
    pos = {v: k for k, v in enumerate(src)}
    perm = [pos[v] for v in dst]
    inversions = 0
    for x in range(len(perm)):
        for y in range(x + 1, len(perm)):
            if perm[x] > perm[y]:
                inversions += 1
    return inversions % 2


def _chiral_sense(g: MolGraph, u: int, out_slots: list[int],
                  sym: list[int]) -> str | None:
    """Chirality mark for atom u given its output neighbor order.

    None when the center is unmarked or degenerate (wrong arity, more
    than one hydrogen, or two neighbors in the same symmetry class)."""
    a = g.atoms[u]
    if a.chirality is None or a.chiral_neighbors is None:
        return None
    ref = list(a.chiral_neighbors)
    if sorted(ref) != sorted(out_slots):
        return None
    if len(ref) not in (3, 4):
        return None
    if (a.explicit_h or 0) >= 2:
        return None
    cls = ["H" if s == H_SLOT else sym[s] for s in ref]
    if len(set(cls)) != len(cls):
        return None
    if _perm_parity(ref, out_slots) == 0:
        return a.chirality
    return "@@" if a.chirality == "@" else "@"


def _would_be_implicit(g: MolGraph, i: int) -> int | None:
    """Hydrogen count the atom would get written bare, or None if it
    cannot be written bare at all."""
    a = g.atoms[i]
    if a.element not in ORGANIC_SUBSET or a.charge != 0:
        return None
    if a.aromatic and a.element.lower() not in AROMATIC_ELEMENTS:
        return None
    return g.implicit_h(i)


def _atom_token(g: MolGraph, i: int, sense: str | None) -> str:
    a = g.atoms[i]
    if a.element == "*":
        return "*" if a.rgroup is None else f"[{a.rgroup}*]"
    sym = a.element.lower() if a.aromatic else a.element
    total = g.total_h(i)
    if (a.isotope is None and a.charge == 0 and sense is None
            and _would_be_implicit(g, i) == total
            and a.element != "H"):
        return sym
    parts = ["["]
    if a.isotope is not None:
        parts.append(str(a.isotope))
    parts.append(sym)
    if sense is not None:
        parts.append(sense)
    if total == 1:
        parts.append("H")
    elif total > 1:
        parts.append(f"H{total}")
    if a.charge == 1:
        parts.append("+")
    elif a.charge == -1:
        parts.append("-")
    elif a.charge > 1:
        parts.append(f"+{a.charge}")
    elif a.charge < -1:
        parts.append(f"-{-a.charge}")
    parts.append("]")
    return "".join(parts)


def _bond_token(g: MolGraph, bond: Bond) -> str:
    both_aromatic = g.atoms[bond.a].aromatic and g.atoms[bond.b].aromatic
    if bond.order == SINGLE:
        return "-" if both_aromatic else ""
    if bond.order == AROMATIC:
        return "" if both_aromatic else ":"
    return "=" if bond.order == DOUBLE else "#"


def write_smiles(g: MolGraph, priority: list[int],
                 stereo: str = PRESERVE,
                 sym: list[int] | None = None) -> str:
    """Emit SMILES with atoms visited in ``priority`` order (low first).

    Deterministic given the priority vector. Fragments are ordered by
    their best priority. ``canonicalize`` passes canonical ranks here; a
    random permutation gives an alternative rendering of the same graph.
    """
    if stereo not in (STRIP, PRESERVE):
        raise ValueError(f"unknown stereo mode {stereo!r}")
    # symmetry classes are only consulted for chirality marks; skip the
    # refinement pass entirely for achiral or stereo-stripped output
    if (sym is None and stereo == PRESERVE
            and any(a.chirality is not None for a in g.atoms)):
        sym = _refine(g, _dense_rank(_initial_invariants(g)))
    frags = []
    comps = sorted(g.components(), key=lambda c: min(priority[i] for i in c))
    for comp in comps:
        frags.append(_write_fragment(g, comp, priority, stereo, sym))
    return ".".join(frags)


def _write_fragment(g: MolGraph, comp: list[int], priority: list[int],
                    stereo: str, sym: list[int] | None) -> str:
    start = min(comp, key=lambda i: priority[i])
    bond_map: dict[tuple[int, int], Bond] = {}
    for bond in g.bonds:
        bond_map[(bond.a, bond.b)] = bond
        bond_map[(bond.b, bond.a)] = bond

    # pass 1: spanning tree in priority order; leftover edges close rings
    children: dict[int, list[int]] = {i: [] for i in comp}
    parent: dict[int, int | None] = {start: None}
    visited = {start}
    ring_edges: list[tuple[int, int]] = []
    seen_edges: set[tuple[int, int]] = set()
    stack = [start]
    while stack:
        u = stack.pop()
        nbrs = [(priority[v], v) for v, _ in g.neighbors(u)]
        nbrs.sort()
        for _, v in nbrs:
            if v not in visited:
                visited.add(v)
                parent[v] = u
                children[u].append(v)
            elif v != parent[u]:
                key = (u, v) if u < v else (v, u)
                if key not in seen_edges:
                    seen_edges.add(key)
                    ring_edges.append(key)
        for v in reversed(children[u]):
            stack.append(v)

    ring_at: dict[int, list[tuple[int, int]]] = {}
    for e in ring_edges:
        ring_at.setdefault(e[0], []).append(e)
        ring_at.setdefault(e[1], []).append(e)

    out: list[str] = []
    emitted: set[int] = set()
    open_digits: dict[tuple[int, int], int] = {}
    free: list[int] = []
    next_digit = 1

    def take_digit() -> int:
        nonlocal next_digit
        if free:
            return heapq.heappop(free)
        d = next_digit
        next_digit += 1
        if d > 99:
            raise InvalidMolecule("more than 99 concurrently open rings")
        return d

    def digit_text(d: int) -> str:
        return str(d) if d < 10 else f"%{d:02d}"

    work: list[tuple] = [("atom", start, None)]
    while work:
        item = work.pop()
        if item[0] == "lit":
            out.append(item[1])
            continue
        _, u, par = item
        if par is not None:
            out.append(_bond_token(g, bond_map[(par, u)]))

        closures = []
        openings = []
        for e in ring_at.get(u, ()):
            other = e[0] if e[1] == u else e[1]
            if e in open_digits:
                closures.append((open_digits[e], e, other))
            else:
                openings.append((priority[other], e, other))
        closures.sort()
        openings.sort()

        out_slots: list[int] = []
        if par is not None:
            out_slots.append(par)
        a = g.atoms[u]
        if a.chirality is not None and (a.explicit_h or 0) == 1:
            out_slots.append(H_SLOT)
        out_slots.extend(other for _, _, other in closures)
        out_slots.extend(other for _, _, other in openings)
        out_slots.extend(children[u])

        sense = None
        if stereo == PRESERVE and a.chirality is not None:
            sense = _chiral_sense(g, u, out_slots, sym)
        out.append(_atom_token(g, u, sense))
        emitted.add(u)

        for d, e, _ in closures:
            out.append(digit_text(d))
            del open_digits[e]
            heapq.heappush(free, d)
        for _, e, other in openings:
            d = take_digit()
            open_digits[e] = d
            out.append(_bond_token(g, bond_map[(u, other)]))
            out.append(digit_text(d))

        kids = children[u]
        if kids:
            seq: list[tuple] = []
            for c in kids[:-1]:
                seq.append(("lit", "("))
                seq.append(("atom", c, u))
                seq.append(("lit", ")"))
            seq.append(("atom", kids[-1], u))
            work.extend(reversed(seq))
    return "".join(out)


def canonicalize(g: MolGraph, stereo: str = PRESERVE) -> str:
    """Canonical SMILES for a valid graph.

    Invariant under atom relabelling and alternative renderings of the
    same molecule. Raises InvalidMolecule when the graph fails valence
    checking.
    """
    report = check_valence(g)
    if not report.valid:
        first = report.violations[0]
        raise InvalidMolecule(
            f"atom {first.atom}: {first.reason}"
            + (f" (+{len(report.violations) - 1} more)"
               if len(report.violations) > 1 else "")
        )
    ranks, sym = canonical_ranks(g)
    return write_smiles(g, ranks, stereo=stereo, sym=sym)


def random_rendering(g: MolGraph, stream, stereo: str = PRESERVE) -> str:
    """A SMILES string for ``g`` with randomized start and traversal order."""
    priority = stream.permutation(len(g))
    return write_smiles(g, priority, stereo=stereo)


def strip_rgroup_labels(g: MolGraph) -> MolGraph:
    """Copy of ``g`` with numbered wildcards collapsed to plain ``*``."""
    atoms = [
        Atom(a.element, a.aromatic, a.charge, a.isotope, a.explicit_h,
             a.chirality, None if a.element == "*" else a.rgroup,
             a.chiral_neighbors)
        for a in g.atoms
    ]
    bonds = [Bond(b.a, b.b, b.order) for b in g.bonds]
    return MolGraph(atoms, bonds, g._table)


@dataclass
class Analysis:
    """Cached per-string result: parse outcome, validity, canonical form."""

    graph: MolGraph | None
    parsed: bool
    valid: bool
    canonical: str | None  # tetrahedral-preserving canonical form
    error: str | None


@lru_cache(maxsize=1 << 17)
def analyze(s: str) -> Analysis:
    """Parse + valence-check + canonicalize once per distinct string.

    Never raises; failures land in the ``error`` field. Training reward
    paths call this constantly with repeating candidate strings.
    """
    try:
        g = parse_smiles(s)
    except ParseError as exc:
        return Analysis(None, False, False, None, str(exc))
    try:
        canonical = canonicalize(g)
    except InvalidMolecule as exc:
        return Analysis(g, True, False, None, str(exc))
    return Analysis(g, True, True, canonical, None)


def exact_match(pred: str, truth: str, stereo: str = PRESERVE,
                collapse_rgroups: bool = True) -> bool:
    """Whether two SMILES strings denote the same molecule.

    Both sides are parsed, valence-checked, and canonicalized; failures
    on the prediction side yield False, failures on the truth side raise
    (a broken reference is a caller bug, not a model miss).
    """
    tg = parse_smiles(truth)
    if collapse_rgroups:
        tg = strip_rgroup_labels(tg)
    truth_canonical = canonicalize(tg, stereo=stereo)
    try:
        pg = parse_smiles(pred)
        if collapse_rgroups:
            pg = strip_rgroup_labels(pg)
        pred_canonical = canonicalize(pg, stereo=stereo)
    except (ParseError, InvalidMolecule):
        return False
    return pred_canonical == truth_canonical
