"""Lossless per-language lexing and the token-level augmentation operators.

The lexer is intentionally shallow: it classifies characters into tokens
without building any syntax tree. Every character of the input lands in
exactly one token, so ``seq.text() == source`` always holds.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

MASK = "[MASK]"


class Kind(str, enum.Enum):
    IDENTIFIER = "Identifier"
    KEYWORD = "Keyword"
    NUMBER = "Number"
    STRING = "String"
    OPERATOR = "Operator"
    PUNCT = "Punct"
    COMMENT = "Comment"
    WHITESPACE = "Whitespace"


MASKABLE = frozenset({Kind.IDENTIFIER, Kind.KEYWORD, Kind.NUMBER, Kind.STRING, Kind.OPERATOR})
TRIVIA = frozenset({Kind.COMMENT, Kind.WHITESPACE})


class LexError(ValueError):
    """Unterminated string or comment; ``offset`` is where it started."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class Token:
    text: str
    kind: Kind
    position: int


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[Token, ...]
    language: str

    def text(self) -> str:
        return "".join(t.text for t in self.tokens)

    def content(self) -> list[str]:
        """Token texts with whitespace and comments dropped."""
        return [t.text for t in self.tokens if t.kind not in TRIVIA]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class LangSpec:
    name: str
    keywords: frozenset[str]
    line_comments: tuple[str, ...] = ("//",)
    block_comments: tuple[tuple[str, str], ...] = (("/*", "*/"),)
    quotes: tuple[str, ...] = ('"', "'")
    triple_quotes: tuple[str, ...] = ()


PYTHON_KEYWORDS = frozenset(
    """False None True and as assert async await break class continue def del
    elif else except finally for from global if import in is lambda nonlocal
    not or pass raise return try while with yield""".split()
)

JAVA_KEYWORDS = frozenset(
    """abstract assert boolean break byte case catch char class const continue
    default do double else enum extends final finally float for goto if
    implements import instanceof int interface long native new package private
    protected public return short static strictfp super switch synchronized
    this throw throws transient try void volatile while""".split()
)

LANGUAGES: dict[str, LangSpec] = {
    "python": LangSpec(
        "python",
        PYTHON_KEYWORDS,
        line_comments=("#",),
        block_comments=(),
        triple_quotes=('"""', "'''"),
    ),
    "java": LangSpec("java", JAVA_KEYWORDS, triple_quotes=('"""',)),
    "generic": LangSpec("generic", frozenset()),
    # surface styles used by the synthetic corpus generator; keyword sets are disjoint
    "toy_a": LangSpec(
        "toy_a", frozenset("func let return when otherwise loop yes no".split())
    ),
    "toy_b": LangSpec(
        "toy_b",
        frozenset("proc var yield begin end unless repeat truthy falsy".split()),
        line_comments=("#",),
        block_comments=(),
    ),
    "toy_c": LangSpec(
        "toy_c",
        frozenset("routine bind emit given alt cycle on off".split()),
        line_comments=("--",),
        block_comments=(("{-", "-}"),),
    ),
    "toy_d": LangSpec(
        "toy_d",
        frozenset("fn mut ret check orelse spin hi lo".split()),
        line_comments=(";;",),
        block_comments=(),
    ),
}

_OPERATORS = sorted(
    """>>>= ... **= //= <<= >>= >>> -> => :: := <- == != <= >= && || ++ -- += -=
    *= /= %= &= |= ^= ** // << >> @= + - * / % = < > ! & | ^ ~ ? @""".split(),
    key=len,
    reverse=True,
)
_PUNCT = set("()[]{},;:.")
_WS_RE = re.compile(r"\s+")
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER_RE = re.compile(
    r"0[xX][0-9a-fA-F_]+[lL]?"
    r"|(?:\d[\d_]*(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?[lLfFdDjJ]?"
)


def lang_spec(language: str) -> LangSpec:
    return LANGUAGES.get(language, LANGUAGES["generic"])


def is_supported(language: str) -> bool:
    """True when ``language`` has a dedicated table (not the generic fallback)."""
    return language in LANGUAGES and language != "generic"


def _scan_string(text: str, start: int, quote: str, strict: bool) -> int:
    """Return the end offset of a string literal opened at ``start``."""
    n = len(text)
    if len(quote) == 3:
        end = text.find(quote, start + 3)
        # backslash-escaped closers are rare enough in triple strings to ignore
        if end < 0:
            if strict:
                raise LexError("unterminated string", start)
            return n
        return end + 3
    i = start + 1
    while i < n:
        c = text[i]
        if c == "\\":
            i += 2
            continue
        if c == quote:
            return i + 1
        if c == "\n":
            break
        i += 1
    if strict:
        raise LexError("unterminated string", start)
    return min(i, n)


def tokenize_code(text: str, language: str, *, strict: bool = True) -> TokenSeq:
    """Split ``text`` into classified tokens.

    With ``strict`` (the default) an unterminated string or block comment raises
    :class:`LexError`; otherwise the literal runs to the end of the line/input.
    """
    spec = lang_spec(language)
    tokens: list[Token] = []
    i, n = 0, len(text)

    def emit(end: int, kind: Kind) -> None:
        nonlocal i
        tokens.append(Token(text[i:end], kind, i))
        i = end

    while i < n:
        c = text[i]
        m = _WS_RE.match(text, i)
        if m:
            emit(m.end(), Kind.WHITESPACE)
            continue

        matched = False
        for opener, closer in spec.block_comments:
            if text.startswith(opener, i):
                end = text.find(closer, i + len(opener))
                if end < 0:
                    if strict:
                        raise LexError("unterminated comment", i)
                    end = n
                else:
                    end += len(closer)
                emit(end, Kind.COMMENT)
                matched = True
                break
        if matched:
            continue
        for prefix in spec.line_comments:
            if text.startswith(prefix, i):
                end = text.find("\n", i)
                emit(n if end < 0 else end, Kind.COMMENT)
                matched = True
                break
        if matched:
            continue

        for q in spec.triple_quotes:
            if text.startswith(q, i):
                emit(_scan_string(text, i, q, strict), Kind.STRING)
                matched = True
                break
        if matched:
            continue
        if c in spec.quotes:
            emit(_scan_string(text, i, c, strict), Kind.STRING)
            continue

        m = _IDENT_RE.match(text, i)
        if m:
            kind = Kind.KEYWORD if m.group() in spec.keywords else Kind.IDENTIFIER
            emit(m.end(), kind)
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            m = _NUMBER_RE.match(text, i)
            if m:
                emit(m.end(), Kind.NUMBER)
                continue
        for op in _OPERATORS:
            if text.startswith(op, i):
                emit(i + len(op), Kind.OPERATOR)
                matched = True
                break
        if matched:
            continue
        # punctuation proper, plus any character nothing else claims
        emit(i + 1, Kind.PUNCT)

    return TokenSeq(tuple(tokens), language)


_BRACKETS = {")": "(", "]": "[", "}": "{"}


def check_well_formed(text: str, language: str) -> Optional[str]:
    """Return ``None`` when the snippet passes the lexer-level check, else a reason."""
    try:
        seq = tokenize_code(text, language)
    except LexError as exc:
        return str(exc)
    if not seq.content():
        return "no content tokens"
    stack: list[str] = []
    for tok in seq.tokens:
        if tok.kind is not Kind.PUNCT:
            continue
        if tok.text in "([{":
            stack.append(tok.text)
        elif tok.text in _BRACKETS:
            if not stack or stack[-1] != _BRACKETS[tok.text]:
                return f"unbalanced {tok.text!r} at offset {tok.position}"
            stack.pop()
    if stack:
        return f"unclosed {stack[-1]!r}"
    return None


# --- augmentation -----------------------------------------------------------


def mask_tokens(seq: TokenSeq, p_mask: float, seed: int) -> TokenSeq:
    if not 0.0 <= p_mask <= 1.0:
        raise ValueError(f"p_mask must be in [0, 1], got {p_mask}")
    rng = np.random.default_rng(seed)
    out = []
    for tok in seq.tokens:
        if tok.kind in MASKABLE and rng.random() < p_mask:
            tok = replace(tok, text=MASK)
        out.append(tok)
    return TokenSeq(tuple(out), seq.language)


def plan_renames(seq: TokenSeq, fraction: float, seed: int) -> dict[str, str]:
    """Choose which identifiers to rename and what to call them."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    distinct: list[str] = []
    seen: set[str] = set()
    for tok in seq.tokens:
        if tok.kind is Kind.IDENTIFIER and tok.text != MASK and tok.text not in seen:
            seen.add(tok.text)
            distinct.append(tok.text)
    k = math.ceil(round(fraction * len(distinct), 9))
    if k == 0:
        return {}
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(distinct), size=k, replace=False).tolist())
    mapping: dict[str, str] = {}
    ordinal = 0
    for idx in chosen:
        while f"var{ordinal}" in seen:
            ordinal += 1
        mapping[distinct[idx]] = f"var{ordinal}"
        ordinal += 1
    return mapping


def rename_identifiers(seq: TokenSeq, fraction: float, seed: int) -> TokenSeq:
    mapping = plan_renames(seq, fraction, seed)
    if not mapping:
        return seq
    out = tuple(
        replace(t, text=mapping[t.text])
        if t.kind is Kind.IDENTIFIER and t.text in mapping
        else t
        for t in seq.tokens
    )
    return TokenSeq(out, seq.language)


_NL_SPLIT = re.compile(r"(\s+)")
_HAS_WORD = re.compile(r"\w")


def mask_nl(text: str, p_mask: float, seed: int) -> str:
    """Mask whitespace-delimited words; punctuation-only pieces are left alone."""
    if not 0.0 <= p_mask <= 1.0:
        raise ValueError(f"p_mask must be in [0, 1], got {p_mask}")
    rng = np.random.default_rng(seed)
    parts = _NL_SPLIT.split(text)
    for j, part in enumerate(parts):
        if part and not part.isspace() and _HAS_WORD.search(part):
            if rng.random() < p_mask:
                parts[j] = MASK
    return "".join(parts)


@dataclass(frozen=True)
class AugmentConfig:
    p_mask: float = 0.15
    rename_fraction: float = 0.5
    comment_swap_p: float = 0.5
    use_comments: bool = True


class AugTuple(NamedTuple):
    code1: TokenSeq
    code2: TokenSeq
    nl1: str
    nl2: str
    comment1: Optional[str] = None
    comment2: Optional[str] = None


def augment_tuple(d: AugTuple, cfg: AugmentConfig, seed: int) -> AugTuple:
    """Produce the perturbed twin of a functionally-equivalent tuple."""
    s = np.random.SeedSequence(seed).generate_state(8)
    codes = []
    for seq, rs, ms in ((d.code1, s[0], s[1]), (d.code2, s[2], s[3])):
        seq = rename_identifiers(seq, cfg.rename_fraction, int(rs))
        codes.append(mask_tokens(seq, cfg.p_mask, int(ms)))
    nls = []
    for nl, comment, ms, cs in ((d.nl1, d.comment1, s[4], s[5]), (d.nl2, d.comment2, s[6], s[7])):
        if cfg.use_comments and comment:
            if np.random.default_rng(int(cs)).random() < cfg.comment_swap_p:
                nls.append(comment)
                continue
        nls.append(mask_nl(nl, cfg.p_mask, int(ms)))
    return AugTuple(codes[0], codes[1], nls[0], nls[1], d.comment1, d.comment2)
