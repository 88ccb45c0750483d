"""Hierarchical linguistic attributes distilled from a caption corpus.

Fine attributes are lemmatized words sorted into four part-of-speech
groups via a lexicon lookup. Coarse attributes cluster the fine ones per
group: two words join whenever their normalized Leacock-Chodorow similarity
over a concept tree reaches the threshold, and clusters are the connected
components of that graph.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

GROUPS = ("noun", "adjective", "verb", "preposition")


class UnmappedWordError(KeyError):
    def __init__(self, word):
        super().__init__(word)
        self.word = word

    def __str__(self):
        return f"word {self.word!r} is not mapped in the taxonomy"


def _tsv_rows(path):
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield lineno, line.split("\t")


class PosLexicon:
    def __init__(self, entries: dict):
        self.entries = {}
        for word, tags in entries.items():
            tags = frozenset(tags)
            if not tags:
                raise ValueError(f"empty tag set for {word!r}")
            bad = tags - set(GROUPS)
            if bad:
                raise ValueError(f"unknown tags {sorted(bad)} for {word!r}")
            self.entries[word.lower()] = tags

    @classmethod
    def load(cls, path) -> "PosLexicon":
        entries = {}
        for lineno, cols in _tsv_rows(path):
            if len(cols) != 2:
                raise ValueError(f"{path}:{lineno}: expected word<TAB>tags")
            entries[cols[0]] = {t.strip() for t in cols[1].split(",") if t.strip()}
        return cls(entries)

    def save(self, path):
        lines = [f"{w}\t{','.join(t for t in GROUPS if t in tags)}\n" for w, tags in sorted(self.entries.items())]
        Path(path).write_text("".join(lines), encoding="utf-8")

    def tags(self, word) -> frozenset:
        return self.entries.get(word, frozenset())


class LemmaTable:
    def __init__(self, entries: dict):
        self.entries = {k.lower(): v.lower() for k, v in entries.items()}
        for lemma in set(self.entries.values()):
            self.entries.setdefault(lemma, lemma)
        for form, lemma in self.entries.items():
            if self.entries[lemma] != lemma:
                raise ValueError(f"lemma {lemma!r} of {form!r} is itself mapped to {self.entries[lemma]!r}")

    @classmethod
    def load(cls, path) -> "LemmaTable":
        entries = {}
        for lineno, cols in _tsv_rows(path):
            if len(cols) != 2:
                raise ValueError(f"{path}:{lineno}: expected form<TAB>lemma")
            entries[cols[0]] = cols[1]
        return cls(entries)

    def save(self, path):
        Path(path).write_text("".join(f"{f}\t{l}\n" for f, l in sorted(self.entries.items())), encoding="utf-8")


def lemmatize(word: str, table: LemmaTable) -> str:
    return table.entries.get(word, word)


class Taxonomy:
    """Rooted concept tree plus a word -> concept mapping.

    File layout: a ``[tree]`` section of ``child<TAB>parent`` rows and a
    ``[words]`` section of ``word<TAB>concept`` rows.
    """

    def __init__(self, parents: dict, words: dict):
        self.parent = dict(parents)
        nodes = set(self.parent) | set(self.parent.values())
        roots = sorted(n for n in nodes if n not in self.parent)
        if len(roots) != 1:
            raise ValueError(f"taxonomy needs exactly one root, found {roots}")
        self.root = roots[0]
        self.nodes = nodes
        self.depth = {}
        for n in sorted(nodes):
            self._depth_of(n)
        self.max_depth = max(self.depth.values())
        self.words = {}
        for w, concept in words.items():
            if concept not in nodes:
                raise ValueError(f"word {w!r} maps to unknown concept {concept!r}")
            self.words[w.lower()] = concept

    def _depth_of(self, node):
        chain = []
        n = node
        while n not in self.depth:
            if n in chain:
                raise ValueError(f"cycle in taxonomy through {n!r}")
            if n == self.root:
                self.depth[n] = 1
                break
            chain.append(n)
            n = self.parent[n]
        d = self.depth[n]
        for m in reversed(chain):
            d += 1
            self.depth[m] = d

    @classmethod
    def load(cls, path) -> "Taxonomy":
        parents, words = {}, {}
        section = parents
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line == "[tree]":
                section = parents
                continue
            if line == "[words]":
                section = words
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ValueError(f"{path}:{lineno}: expected two tab-separated columns")
            if cols[0] in section:
                raise ValueError(f"{path}:{lineno}: duplicate entry {cols[0]!r}")
            section[cols[0]] = cols[1]
        return cls(parents, words)

    def save(self, path):
        out = ["[tree]\n"] + [f"{c}\t{p}\n" for c, p in sorted(self.parent.items())]
        out += ["[words]\n"] + [f"{w}\t{c}\n" for w, c in sorted(self.words.items())]
        Path(path).write_text("".join(out), encoding="utf-8")

    def concept(self, word) -> str:
        try:
            return self.words[word]
        except KeyError:
            raise UnmappedWordError(word) from None

    def ancestors(self, node) -> list:
        out = [node]
        while node != self.root:
            node = self.parent[node]
            out.append(node)
        return out

    def path_nodes(self, a, b) -> int:
        """Node count on the tree path between two concepts (1 when equal)."""
        up_a = self.ancestors(a)
        on_a = set(up_a)
        lca = next(n for n in self.ancestors(b) if n in on_a)
        return self.depth[a] + self.depth[b] - 2 * self.depth[lca] + 1

    def common_concept(self, concepts: Iterable[str]) -> str:
        concepts = list(concepts)
        common = self.ancestors(concepts[0])
        for c in concepts[1:]:
            keep = set(self.ancestors(c))
            common = [n for n in common if n in keep]
        return common[0]


def lch_raw(path_len: int, max_depth: int) -> float:
    return -math.log(path_len / (2.0 * max_depth))


def lch_similarity(a: str, b: str, taxonomy: Taxonomy) -> float:
    """Leacock-Chodorow similarity divided by its maximum, so identity scores 1."""
    ca, cb = taxonomy.concept(a), taxonomy.concept(b)
    D = taxonomy.max_depth
    return lch_raw(taxonomy.path_nodes(ca, cb), D) / lch_raw(1, D)


def itemize(caption: Sequence[str], lexicon: PosLexicon, lemmas: Optional[LemmaTable] = None) -> dict:
    """Split a token sequence into the four POS groups (unknown words dropped).

    With a lemma table, a word missing from the lexicon is retried as its lemma.
    """
    groups = {g: [] for g in GROUPS}
    for w in caption:
        tags = lexicon.tags(w)
        if not tags and lemmas is not None:
            tags = lexicon.tags(lemmatize(w, lemmas))
        for g in GROUPS:
            if g in tags and w not in groups[g]:
                groups[g].append(w)
    return groups


def cluster_coarse(words: Sequence[str], taxonomy: Taxonomy, threshold: float = 0.85):
    """Connected components of the ``similarity >= threshold`` graph.

    Returns ``(clusters, unmapped)``: clusters as sorted member lists ordered
    by their name (smallest member); unmapped words become singletons and are
    also listed in ``unmapped``.
    """
    if not (0.0 < threshold <= 1.0):
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    words = sorted(set(words))
    mapped = [w for w in words if w in taxonomy.words]
    unmapped = [w for w in words if w not in taxonomy.words]
    parent = {w: w for w in words}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, a in enumerate(mapped):
        for b in mapped[i + 1:]:
            if lch_similarity(a, b, taxonomy) >= threshold:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    comps = {}
    for w in words:
        comps.setdefault(find(w), []).append(w)
    clusters = sorted((sorted(m) for m in comps.values()), key=lambda m: m[0])
    return clusters, unmapped


@dataclass
class CoarseCluster:
    name: str
    group: str
    members: list
    concept: str = ""


@dataclass
class AttributeVocabulary:
    a1: list                     # [(lemma, group)]
    a2: list                     # [CoarseCluster]
    a1_to_a2: dict = field(default_factory=dict)
    unmapped: list = field(default_factory=list)

    def __post_init__(self):
        self.a1_index = {entry: n for n, entry in enumerate(self.a1)}
        self.a2_index = {(c.group, c.name): n for n, c in enumerate(self.a2)}
        if not self.a1_to_a2:
            for n, c in enumerate(self.a2):
                for m in c.members:
                    self.a1_to_a2[self.a1_index[(m, c.group)]] = n

    def save(self, a1_path, a2_path):
        a1_lines = [f"{lemma}\t{group}\t{self.a2[self.a1_to_a2[n]].name}\n" for n, (lemma, group) in enumerate(self.a1)]
        a2_lines = [f"{c.name}\t{c.group}\t{c.concept}\t{','.join(c.members)}\n" for c in self.a2]
        Path(a1_path).write_text("".join(a1_lines), encoding="utf-8")
        Path(a2_path).write_text("".join(a2_lines), encoding="utf-8")

    @classmethod
    def load(cls, a1_path, a2_path) -> "AttributeVocabulary":
        a1 = [tuple(cols[:2]) for _, cols in _tsv_rows(a1_path)]
        a2 = [CoarseCluster(cols[0], cols[1], cols[3].split(","), cols[2]) for _, cols in _tsv_rows(a2_path)]
        return cls(a1, a2)


def build_attribute_vocabulary(captions: Iterable[Sequence[str]], lexicon: PosLexicon, lemmas: LemmaTable,
                               taxonomy: Taxonomy, threshold: float = 0.85,
                               min_count: int = 1) -> AttributeVocabulary:
    counts = Counter()
    for cap in captions:
        for group, words in itemize(cap, lexicon, lemmas).items():
            for w in {lemmatize(w, lemmas) for w in words}:
                counts[(w, group)] += 1
    kept = sorted((e for e, c in counts.items() if c >= min_count), key=lambda e: (GROUPS.index(e[1]), e[0]))
    clusters = []
    unmapped = []
    for group in GROUPS:
        words = [w for w, g in kept if g == group]
        comps, miss = cluster_coarse(words, taxonomy, threshold)
        unmapped += [(w, group) for w in miss]
        for members in comps:
            concepts = [taxonomy.words[m] for m in members if m in taxonomy.words]
            concept = taxonomy.common_concept(concepts) if concepts else ""
            clusters.append(CoarseCluster(members[0], group, members, concept))
    clusters.sort(key=lambda c: (c.name, GROUPS.index(c.group)))
    return AttributeVocabulary(kept, clusters, unmapped=unmapped)


def encode_targets(caption: Sequence[str], vocab: AttributeVocabulary, lexicon: PosLexicon,
                   lemmas: LemmaTable):
    """Binary ``(a2, a1)`` presence vectors for one caption."""
    a1 = np.zeros(len(vocab.a1))
    a2 = np.zeros(len(vocab.a2))
    for group, words in itemize(caption, lexicon, lemmas).items():
        for w in words:
            n = vocab.a1_index.get((lemmatize(w, lemmas), group))
            if n is not None:
                a1[n] = 1.0
                a2[vocab.a1_to_a2[n]] = 1.0
    return a2, a1


def top_word_targets(caption_ids: Sequence[int], top_ids: Sequence[int]) -> np.ndarray:
    """Presence vector over a fixed list of frequent vocabulary ids."""
    present = set(caption_ids)
    return np.array([1.0 if t in present else 0.0 for t in top_ids])
