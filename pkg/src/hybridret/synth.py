"""Synthetic multilingual corpus with cross-language relevance by construction.

Each problem is a short pipeline of primitive list operations. Every toy
language renders the same pipeline with its own keywords and its own
identifier casing, so two implementations of one problem share identifier
*stems* but no identifier *tokens*. NL descriptions are templated from
per-operation phrase variants.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from hybridret.corpus import Corpus, Sample
from hybridret.seeding import substream

TOY_LANGUAGES = ("toy_a", "toy_b", "toy_c", "toy_d")

# stem words, result variable stems, NL phrase variants
OPERATIONS: dict[str, tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]] = {
    "sum": (("sum", "values"), ("running", "total"), ("add up all the values", "compute the total of the numbers", "sum every element")),
    "max": (("find", "max"), ("largest", "item"), ("pick the largest value", "find the maximum element", "take the biggest number")),
    "min": (("find", "min"), ("smallest", "item"), ("pick the smallest value", "find the minimum element", "take the lowest number")),
    "sort": (("sort", "ascending"), ("sorted", "items"), ("sort the values in ascending order", "order the elements from low to high", "arrange the numbers increasingly")),
    "reverse": (("reverse", "order"), ("reversed", "items"), ("reverse the sequence", "flip the order of the elements", "iterate the list backwards")),
    "evens": (("keep", "evens"), ("even", "items"), ("keep only the even numbers", "filter out odd values", "drop every odd element")),
    "square": (("square", "each"), ("squared", "items"), ("square each element", "raise every value to the power two", "multiply each number by itself")),
    "double": (("double", "each"), ("doubled", "items"), ("double every value", "multiply each element by two", "scale the numbers by a factor of two")),
    "unique": (("drop", "duplicates"), ("unique", "items"), ("remove duplicate entries", "keep distinct values only", "deduplicate the elements")),
    "count": (("count", "items"), ("item", "count"), ("count how many elements there are", "return the number of items", "measure the length of the list")),
    "mean": (("average", "values"), ("mean", "value"), ("compute the arithmetic mean", "average the numbers", "take the mean of the elements")),
    "product": (("multiply", "all"), ("running", "product"), ("multiply all values together", "compute the product of the elements", "take the product of every number")),
    "abs": (("absolute", "each"), ("absolute", "items"), ("take the absolute value of each element", "make every number non negative", "drop the sign of each value")),
    "prefix": (("prefix", "sums"), ("prefix", "items"), ("build the prefix sums", "compute cumulative totals", "accumulate a running sum list")),
    "negate": (("negate", "each"), ("negated", "items"), ("negate every element", "flip the sign of each value", "multiply each number by minus one")),
    "positives": (("keep", "positives"), ("positive", "items"), ("keep only positive numbers", "filter out negative values", "drop values below zero")),
    "halve": (("halve", "each"), ("halved", "items"), ("divide every value by two", "halve each element", "cut each number in half")),
    "head": (("take", "head"), ("head", "items"), ("keep the first few elements", "take the head of the list", "truncate to the leading values")),
    "tail": (("take", "tail"), ("tail", "items"), ("keep the last few elements", "take the tail of the list", "truncate to the trailing values")),
    "clip": (("clip", "range"), ("clipped", "items"), ("clamp each value into a range", "clip the numbers to bounds", "limit every element between bounds")),
}

FUNC_STEMS = (
    ("process", "batch"), ("compute", "score"), ("transform", "data"), ("handle", "input"),
    ("reduce", "series"), ("analyze", "readings"), ("summarize", "list"), ("prepare", "report"),
    ("clean", "samples"), ("evaluate", "metrics"), ("merge", "records"), ("scan", "window"),
)
INPUT_STEMS = (
    ("input", "list"), ("raw", "values"), ("data", "points"), ("number", "array"),
    ("sample", "buffer"), ("reading", "list"), ("item", "vector"), ("source", "data"),
)

NL_OPENERS = ("Given a list of numbers, ", "This function takes numbers and will ", "For the input sequence, ", "")
NL_JOINERS = (", then ", ", after that ", " and then ")

COMMENTS = ("steps: {}", "pipeline {}", "does {}")


def _case(words: Sequence[str], style: str) -> str:
    if style == "camel":
        return words[0] + "".join(w.capitalize() for w in words[1:])
    if style == "snake":
        return "_".join(words)
    if style == "pascal":
        return "".join(w.capitalize() for w in words)
    if style == "upper":
        return "_".join(w.upper() for w in words)
    raise ValueError(style)


def _render(lang: str, func: Sequence[str], arg: Sequence[str], ops: Sequence[str], comment: str | None) -> str:
    """Render one op pipeline in a toy language surface style."""
    steps = []
    prev = arg
    for op in ops:
        stem, result, _ = OPERATIONS[op]
        steps.append((stem, prev, result))
        prev = result
    if lang == "toy_a":
        c = lambda w: _case(w, "camel")  # noqa: E731
        lines = [f"// {comment}"] if comment else []
        lines.append(f"func {c(func)}({c(arg)}) {{")
        lines += [f"    let {c(r)} = {c(s)}({c(p)});" for s, p, r in steps]
        lines += [f"    return {c(prev)};", "}"]
    elif lang == "toy_b":
        c = lambda w: _case(w, "snake")  # noqa: E731
        lines = [f"# {comment}"] if comment else []
        lines.append(f"proc {c(func)}({c(arg)})")
        lines.append("begin")
        lines += [f"  var {c(r)} := {c(s)}({c(p)})" for s, p, r in steps]
        lines += [f"  yield {c(prev)}", "end"]
    elif lang == "toy_c":
        c = lambda w: _case(w, "pascal")  # noqa: E731
        lines = [f"-- {comment}"] if comment else []
        lines.append(f"routine {c(func)}[{c(arg)}]:")
        lines += [f"  bind {c(r)} <- {c(s)}[{c(p)}]" for s, p, r in steps]
        lines.append(f"  emit {c(prev)}")
    elif lang == "toy_d":
        c = lambda w: _case(w, "upper")  # noqa: E731
        lines = [f";; {comment}"] if comment else []
        lines.append(f"fn {c(func)} ({c(arg)}) {{")
        lines += [f"  mut {c(r)} = {c(s)} ({c(p)})" for s, p, r in steps]
        lines += [f"  ret {c(prev)}", "}"]
    else:
        raise ValueError(f"unknown toy language {lang!r}")
    return "\n".join(lines) + "\n"


def _describe(ops: Sequence[str], rng: np.random.Generator) -> str:
    phrases = [OPERATIONS[op][2][int(rng.integers(3))] for op in ops]
    joiner = NL_JOINERS[int(rng.integers(len(NL_JOINERS)))]
    opener = NL_OPENERS[int(rng.integers(len(NL_OPENERS)))]
    text = opener + joiner.join(phrases)
    return text[0].upper() + text[1:] + "."


def synth_corpus(
    n_problems: int,
    languages: Sequence[str] = TOY_LANGUAGES[:3],
    seed: int = 0,
    ops_per_problem: tuple[int, int] = (3, 4),
    comment_p: float = 0.5,
    dataset_name: str = "synth",
) -> Corpus:
    """One sample per (problem, language); problems have pairwise distinct op sets."""
    languages = list(languages)
    if not 2 <= len(languages) <= len(TOY_LANGUAGES):
        raise ValueError(f"need 2..{len(TOY_LANGUAGES)} toy languages")
    for lang in languages:
        if lang not in TOY_LANGUAGES:
            raise ValueError(f"unknown toy language {lang!r}")
    if n_problems < 1:
        raise ValueError("n_problems must be >= 1")
    rng = substream(seed, "synth/problems")
    names = sorted(OPERATIONS)
    used: set[frozenset[str]] = set()
    problems = []
    attempts = 0
    while len(problems) < n_problems:
        attempts += 1
        if attempts > 100 * n_problems:
            raise ValueError(f"cannot draw {n_problems} distinct problems")
        k = int(rng.integers(ops_per_problem[0], ops_per_problem[1] + 1))
        ops = [names[i] for i in rng.choice(len(names), size=k, replace=False)]
        if frozenset(ops) in used:
            continue
        used.add(frozenset(ops))
        func = FUNC_STEMS[int(rng.integers(len(FUNC_STEMS)))]
        arg = INPUT_STEMS[int(rng.integers(len(INPUT_STEMS)))]
        problems.append((ops, func, arg))

    samples = []
    for p, (ops, func, arg) in enumerate(problems):
        pid = f"p{p:04d}"
        for lang in languages:
            srng = substream(seed, f"synth/{pid}/{lang}")
            nl = _describe(ops, srng)
            comment = None
            if srng.random() < comment_p:
                comment = COMMENTS[int(srng.integers(len(COMMENTS)))].format(" ".join(ops))
            code = _render(lang, func, arg, ops, comment)
            samples.append(
                Sample(
                    id=f"{pid}-{lang}",
                    problem_id=pid,
                    language=lang,
                    code=code,
                    nl=nl,
                    comment=comment,
                    source=dataset_name,
                )
            )
    return Corpus(tuple(samples))
