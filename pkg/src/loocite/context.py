"""Queries, partitioned contexts and token-level prompt layouts.

The tokenizer is byte level: token ids 0-255 are raw UTF-8 bytes and two
special ids follow them.  Byte tokenization is concatenation compatible, so
a prompt assembled from independently tokenized pieces is identical to the
tokenization of the assembled text, and removing a source never disturbs
the tokens in front of it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

N_BYTES = 256
BOS = 256
EOS = 257
N_SPECIAL = 2

DEFAULT_TEMPLATE = (
    "Answer the question based on the provided context\n"
    "Context:\n"
    "{context}\n"
    "Question: {question}\n"
)
DEFAULT_SEPARATOR = "\n"


class TemplateError(ValueError):
    pass


class PartitionError(ValueError):
    pass


def tokenize(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def detokenize(tokens: Iterable[int], errors: str = "strict") -> str:
    """Inverse of :func:`tokenize`; special tokens are dropped."""
    return bytes(t for t in tokens if t < N_BYTES).decode("utf-8", errors=errors)


@dataclass(frozen=True)
class SourceGroup:
    sources: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.sources)


@dataclass(frozen=True)
class ContextPartition:
    """Ordered source groups; the flat source order is the context order."""

    groups: tuple[SourceGroup, ...]

    def __post_init__(self):
        if not self.groups:
            raise PartitionError("context has no source groups")
        for g, group in enumerate(self.groups):
            if not group.sources:
                raise PartitionError(f"source group {g} is empty")
            for s in group.sources:
                if not isinstance(s, str) or not s:
                    raise PartitionError(f"empty source in group {g}")

    @classmethod
    def from_lists(cls, groups: Sequence[Sequence[str]]) -> "ContextPartition":
        return cls(tuple(SourceGroup(tuple(g)) for g in groups))

    @classmethod
    def flat(cls, sources: Sequence[str]) -> "ContextPartition":
        """One singleton group per source."""
        return cls(tuple(SourceGroup((s,)) for s in sources))

    @property
    def sources(self) -> tuple[str, ...]:
        return tuple(s for g in self.groups for s in g.sources)

    @property
    def group_sizes(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.groups)

    @property
    def grouping(self) -> tuple[tuple[int, ...], ...]:
        """Flat source indices (0-based) belonging to each group."""
        out, i = [], 0
        for g in self.groups:
            out.append(tuple(range(i, i + len(g))))
            i += len(g)
        return tuple(out)

    def __len__(self) -> int:
        return sum(self.group_sizes)

    def text(self, separator: str = DEFAULT_SEPARATOR) -> str:
        return "".join(s + separator for s in self.sources)


@dataclass(frozen=True)
class Example:
    id: str
    query: str
    partition: ContextPartition
    response: str | None = None


@dataclass(frozen=True)
class PromptLayout:
    """Token-level prompt with the span of every source recorded.

    ``spans[i]`` is the half-open range of source ``i`` (including its
    trailing separator) inside ``tokens``.  ``source_ids`` identify each
    source in the partition the layout was originally built from, so a
    layout rebuilt from a subset of sources still knows which is which.
    """

    tokens: tuple[int, ...]
    preamble_end: int
    spans: tuple[tuple[int, int], ...]
    suffix_start: int
    source_ids: tuple[int, ...]
    grouping: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        pos = self.preamble_end
        for a, b in self.spans:
            if a != pos or b <= a:
                raise PartitionError("source spans must tile the context region")
            pos = b
        if pos != self.suffix_start or self.suffix_start > len(self.tokens):
            raise PartitionError("source spans must end where the suffix starts")
        if len(self.source_ids) != len(self.spans):
            raise PartitionError("one source id per span required")
        if not self.grouping:
            object.__setattr__(self, "grouping", tuple((i,) for i in range(len(self.spans))))

    @property
    def n_sources(self) -> int:
        return len(self.spans)

    @property
    def full_prompt(self) -> tuple[int, ...]:
        return self.tokens

    @property
    def preamble_span(self) -> tuple[int, int]:
        return (0, self.preamble_end)

    @property
    def suffix_span(self) -> tuple[int, int]:
        return (self.suffix_start, len(self.tokens))

    def span_lengths(self) -> list[int]:
        return [b - a for a, b in self.spans]

    def source_tokens(self, i: int) -> tuple[int, ...]:
        a, b = self.spans[i]
        return self.tokens[a:b]

    def shared_prefix(self, removed: Iterable[int]) -> int:
        """Number of leading tokens an ablation shares with the full prompt."""
        removed = list(removed)
        if not removed:
            return len(self.tokens)
        return self.spans[min(removed)][0]

    def keep(self, kept: Iterable[int]) -> "PromptLayout":
        """Layout over the kept sources only, in their original order."""
        kept = sorted(set(kept))
        if not kept:
            raise PartitionError("cannot build a layout with no sources")
        _check_indices(kept, self.n_sources)
        pre = self.tokens[: self.preamble_end]
        toks = list(pre)
        spans = []
        for i in kept:
            a = len(toks)
            toks.extend(self.source_tokens(i))
            spans.append((a, len(toks)))
        suffix_start = len(toks)
        toks.extend(self.tokens[self.suffix_start:])
        position = {old: new for new, old in enumerate(kept)}
        grouping = []
        for g in self.grouping:
            members = tuple(position[i] for i in g if i in position)
            if members:
                grouping.append(members)
        return PromptLayout(
            tokens=tuple(toks),
            preamble_end=self.preamble_end,
            spans=tuple(spans),
            suffix_start=suffix_start,
            source_ids=tuple(self.source_ids[i] for i in kept),
            grouping=tuple(grouping),
        )


def _check_indices(indices: Iterable[int], n: int) -> None:
    for i in indices:
        if not 0 <= i < n:
            raise IndexError(f"source index {i} out of range for {n} sources")


def build_prompt(
    template: str,
    partition: ContextPartition,
    query: str,
    separator: str = DEFAULT_SEPARATOR,
    bos: bool = True,
) -> PromptLayout:
    """Lay out ``template`` with every source tokenized on its own.

    Each source carries exactly one trailing ``separator`` inside its span.
    """
    for key in ("{context}", "{question}"):
        if key not in template:
            raise TemplateError(f"template is missing the {key} placeholder")
    head, tail = template.split("{context}", 1)
    if "{context}" in tail:
        raise TemplateError("template must contain {context} exactly once")
    head = head.replace("{question}", query)
    tail = tail.replace("{question}", query)

    toks = [BOS] if bos else []
    toks.extend(tokenize(head))
    preamble_end = len(toks)
    spans = []
    for src in partition.sources:
        piece = tokenize(src + separator)
        if not piece:
            raise PartitionError("source tokenizes to nothing")
        a = len(toks)
        toks.extend(piece)
        spans.append((a, len(toks)))
    suffix_start = len(toks)
    toks.extend(tokenize(tail))
    return PromptLayout(
        tokens=tuple(toks),
        preamble_end=preamble_end,
        spans=tuple(spans),
        suffix_start=suffix_start,
        source_ids=tuple(range(len(spans))),
        grouping=partition.grouping,
    )


def layout_from_lengths(
    lengths: Sequence[int],
    preamble: int = 0,
    suffix: int = 0,
    group_sizes: Sequence[int] | None = None,
    token: int = 97,
) -> PromptLayout:
    """Synthetic layout with the given span lengths, for cost simulations."""
    toks = [token] * preamble
    spans = []
    for n in lengths:
        a = len(toks)
        toks.extend([token] * n)
        spans.append((a, len(toks)))
    suffix_start = len(toks)
    toks.extend([token] * suffix)
    grouping: tuple[tuple[int, ...], ...] = ()
    if group_sizes is not None:
        if sum(group_sizes) != len(lengths):
            raise PartitionError("group sizes must add up to the source count")
        out, i = [], 0
        for g in group_sizes:
            out.append(tuple(range(i, i + g)))
            i += g
        grouping = tuple(out)
    return PromptLayout(tuple(toks), preamble, tuple(spans), suffix_start,
                        tuple(range(len(spans))), grouping)


def ablate_prompt(layout: PromptLayout, removed: Iterable[int]) -> tuple[int, ...]:
    """Full prompt with the spans of ``removed`` sources deleted."""
    removed = set(removed)
    _check_indices(removed, layout.n_sources)
    if not removed:
        return layout.tokens
    out: list[int] = list(layout.tokens[: layout.preamble_end])
    for i, (a, b) in enumerate(layout.spans):
        if i not in removed:
            out.extend(layout.tokens[a:b])
    out.extend(layout.tokens[layout.suffix_start:])
    return tuple(out)


@dataclass(frozen=True)
class Ablation:
    """A layout with a set of sources removed."""

    layout: PromptLayout
    removed: frozenset[int] = field(default_factory=frozenset)

    @property
    def tokens(self) -> tuple[int, ...]:
        return ablate_prompt(self.layout, self.removed)

    @property
    def kept(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.layout.n_sources) if i not in self.removed)

    @property
    def kept_ids(self) -> frozenset[int]:
        return frozenset(self.layout.source_ids[i] for i in self.kept)

    @property
    def shared_prefix(self) -> int:
        return self.layout.shared_prefix(self.removed)

    def context_tokens_from(self, position: int) -> int:
        """Kept source tokens located at or after ``position`` in the ablated prompt."""
        total, pos = 0, self.layout.preamble_end
        for i in self.kept:
            a, b = self.layout.spans[i]
            n = b - a
            total += max(0, pos + n - max(pos, position))
            pos += n
        return total


def as_array(tokens: Sequence[int]) -> np.ndarray:
    return np.asarray(tokens, dtype=np.int64)
