"""Code/NL corpora: JSONL ingest, screening, capping, dedup and splitting."""

from __future__ import annotations

import hashlib
import json
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from hybridret.codetok import Kind, LexError, check_well_formed, is_supported, tokenize_code


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    id: str
    problem_id: str
    language: str
    code: str
    nl: str
    comment: Optional[str] = None
    source: str = ""

    def to_record(self) -> dict:
        rec = asdict(self)
        if rec["comment"] is None:
            del rec["comment"]
        return rec


@dataclass(frozen=True)
class Corpus:
    samples: tuple[Sample, ...]
    languages: frozenset[str] = frozenset()
    by_id: dict[str, Sample] = field(init=False, repr=False, compare=False)
    index_by_problem: dict[str, tuple[str, ...]] = field(init=False, repr=False, compare=False)
    index_by_language: dict[str, tuple[str, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        langs = frozenset(self.languages) | {s.language for s in samples}
        object.__setattr__(self, "languages", langs)
        by_id: dict[str, Sample] = {}
        by_problem: dict[str, list[str]] = defaultdict(list)
        by_lang: dict[str, list[str]] = defaultdict(list)
        for s in samples:
            if s.id in by_id:
                raise CorpusError(f"duplicate sample id {s.id!r}")
            by_id[s.id] = s
            by_problem[s.problem_id].append(s.id)
            by_lang[s.language].append(s.id)
        object.__setattr__(self, "by_id", by_id)
        object.__setattr__(self, "index_by_problem", {k: tuple(v) for k, v in by_problem.items()})
        object.__setattr__(self, "index_by_language", {k: tuple(v) for k, v in by_lang.items()})

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def problems(self) -> list[str]:
        return sorted(self.index_by_problem)

    def subset(self, keep: Iterable[Sample]) -> "Corpus":
        return Corpus(tuple(keep), self.languages)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(json.dumps(s.to_record(), sort_keys=True, ensure_ascii=False).encode())
            h.update(b"\n")
        return h.hexdigest()


_REQUIRED = ("problem_id", "language", "code", "nl")


def _parse_record(rec: object, lineno: int, dataset_name: str) -> Sample:
    if not isinstance(rec, dict):
        raise CorpusError(f"line {lineno}: expected a JSON object")
    for key in _REQUIRED:
        if key not in rec:
            raise CorpusError(f"line {lineno}: missing field {key!r}")
        if not isinstance(rec[key], str):
            raise CorpusError(f"line {lineno}: field {key!r} must be a string")
    for key in ("id", "comment", "source"):
        if rec.get(key) is not None and not isinstance(rec[key], str):
            raise CorpusError(f"line {lineno}: field {key!r} must be a string")
    if not rec["code"].strip():
        raise CorpusError(f"line {lineno}: empty code")
    if not rec["nl"].strip():
        raise CorpusError(f"line {lineno}: empty nl")
    return Sample(
        id=rec.get("id") or f"{dataset_name}:{lineno}",
        problem_id=rec["problem_id"],
        language=rec["language"],
        code=rec["code"],
        nl=rec["nl"],
        comment=rec.get("comment") or None,
        source=rec.get("source") or dataset_name,
    )


def ingest_jsonl(path: str | Path, dataset_name: str) -> Corpus:
    """Read a JSONL export; any malformed line aborts the whole ingest."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    samples = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        samples.append(_parse_record(rec, lineno, dataset_name))
    try:
        return Corpus(tuple(samples))
    except CorpusError as exc:
        raise CorpusError(f"{path}: {exc}") from exc


def write_jsonl(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in corpus:
            fh.write(json.dumps(s.to_record(), ensure_ascii=False) + "\n")


def filter_syntactic(corpus: Corpus, report: Optional[list[str]] = None) -> Corpus:
    """Drop samples failing the lexer-level well-formedness check.

    Samples in languages without a dedicated lexer table are kept and a
    ``WARN <id> <reason>`` line is appended to ``report``.
    """
    keep = []
    for s in corpus:
        if not is_supported(s.language):
            if report is not None:
                report.append(f"WARN {s.id} unsupported language {s.language!r}; retained unchecked")
            keep.append(s)
            continue
        if check_well_formed(s.code, s.language) is None:
            keep.append(s)
    return corpus.subset(keep)


def cap_per_problem(corpus: Corpus, cap: int = 10, seed: int = 0) -> Corpus:
    if cap < 1:
        raise CorpusError("cap must be >= 1")
    groups: dict[tuple[str, str], list[int]] = defaultdict(list)
    for i, s in enumerate(corpus.samples):
        groups[(s.problem_id, s.language)].append(i)
    rng = np.random.default_rng(seed)
    dropped: set[int] = set()
    for key in sorted(groups):
        members = groups[key]
        if len(members) > cap:
            kept = set(rng.choice(len(members), size=cap, replace=False).tolist())
            dropped.update(m for j, m in enumerate(members) if j not in kept)
    return corpus.subset(s for i, s in enumerate(corpus.samples) if i not in dropped)


_SPACES = re.compile(r"\s+")


def normalize_code(code: str, language: str) -> str:
    """Comments stripped, whitespace runs collapsed to one space."""
    try:
        seq = tokenize_code(code, language)
        code = "".join(" " if t.kind is Kind.COMMENT else t.text for t in seq.tokens)
    except LexError:
        pass
    return _SPACES.sub(" ", code).strip()


def dedup(corpus: Corpus) -> Corpus:
    seen: set[str] = set()
    keep = []
    for s in corpus:
        key = normalize_code(s.code, s.language)
        if key not in seen:
            seen.add(key)
            keep.append(s)
    return corpus.subset(keep)


def split_by_problem(corpus: Corpus, test_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    if not 0.0 < test_fraction < 1.0:
        raise CorpusError("test_fraction must be in (0, 1)")
    problems = corpus.problems
    if len(problems) < 2:
        raise CorpusError(f"need at least 2 problems to split, got {len(problems)}")
    n_test = min(max(round(test_fraction * len(problems)), 1), len(problems) - 1)
    order = np.random.default_rng(seed).permutation(len(problems))
    test_ids = {problems[i] for i in order[:n_test]}
    train = corpus.subset(s for s in corpus if s.problem_id not in test_ids)
    test = corpus.subset(s for s in corpus if s.problem_id in test_ids)
    return train, test
