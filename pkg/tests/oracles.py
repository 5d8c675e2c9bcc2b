"""Independent reference implementations used to check the package.

Nothing here imports the code under test except plain data types; each oracle
uses a different arithmetic route than the implementation it checks.
"""

from __future__ import annotations

import functools
import math
from fractions import Fraction


def exact_cosine_key(a: list[int], b: list[int]) -> Fraction | None:
    """Signed squared cosine as an exact rational; monotone in the cosine.

    ``None`` for zero-norm vectors (they can never be ranked).
    """
    dot = sum(x * y for x, y in zip(a, b))
    na = sum(x * x for x in a)
    nb = sum(y * y for y in b)
    if na == 0 or nb == 0:
        return None
    sq = Fraction(dot * dot, na * nb)
    return sq if dot >= 0 else -sq


def brute_force_topk(probe: list[int], candidates: dict[str, list[int]], k: int, exclude: str | None) -> list[str]:
    """Top-k ids by exact cosine, ties broken by ascending case id."""
    scored = []
    for cid, vec in candidates.items():
        if cid == exclude:
            continue
        key = exact_cosine_key(probe, vec)
        if key is not None:
            scored.append((cid, key))

    def cmp(x, y):
        if x[1] != y[1]:
            return -1 if x[1] > y[1] else 1
        return (x[0] > y[0]) - (x[0] < y[0])

    scored.sort(key=functools.cmp_to_key(cmp))
    return [cid for cid, _ in scored[:k]]


def confusion_oracle(pred: list[list[bool]], ref: list[list[bool]]) -> dict:
    """Per-column and pooled counts by explicit loops over a 2x2 table."""
    columns = len(ref[0]) if ref else 0
    per = []
    for j in range(columns):
        table = {(True, True): 0, (True, False): 0, (False, True): 0, (False, False): 0}
        for p_row, r_row in zip(pred, ref):
            table[(p_row[j], r_row[j])] += 1
        per.append((table[(True, True)], table[(True, False)], table[(False, True)]))

    def prf(tp, fp, fn):
        p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        f = 2 * p * r / (p + r) if p + r else Fraction(0)
        return p, r, f

    tp = sum(c[0] for c in per)
    fp = sum(c[1] for c in per)
    fn = sum(c[2] for c in per)
    per_prf = [prf(*c) for c in per]
    macro = tuple(sum(x[i] for x in per_prf) / len(per_prf) for i in range(3)) if per_prf else (0, 0, 0)
    return {"per": per_prf, "micro": prf(tp, fp, fn), "macro": macro}


def _tokens(text: str) -> list[str]:
    # Same token definition as the metric, written independently: split on
    # whitespace, then peel punctuation characters off into their own tokens.
    out = []
    for chunk in text.lower().split():
        word = ""
        for ch in chunk:
            if ch.isalnum() or ch == "_":
                word += ch
            else:
                if word:
                    out.append(word)
                    word = ""
                out.append(ch)
        if word:
            out.append(word)
    return out


def bleu_oracle(candidate: str, reference: str, n: int, epsilon: float = 1e-9) -> float:
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 0.0
    logs = []
    for k in range(1, n + 1):
        cand_grams = [tuple(cand[i:i + k]) for i in range(len(cand) - k + 1)]
        if not cand_grams:
            break
        ref_grams = [tuple(ref[i:i + k]) for i in range(len(ref) - k + 1)]
        clipped = 0
        for gram in set(cand_grams):
            clipped += min(cand_grams.count(gram), ref_grams.count(gram))
        if clipped == 0 and k == 1:
            return 0.0
        logs.append(math.log((clipped or epsilon) / len(cand_grams)))
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.exp(sum(logs) / len(logs))


def rouge_l_oracle(candidate: str, reference: str, beta: float = 1.2) -> float:
    a, b = _tokens(candidate), _tokens(reference)
    if not a or not b:
        return 0.0
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) - 1, -1, -1):
        for j in range(len(b) - 1, -1, -1):
            table[i][j] = table[i + 1][j + 1] + 1 if a[i] == b[j] else max(table[i + 1][j], table[i][j + 1])
    lcs = table[0][0]
    if lcs == 0:
        return 0.0
    p, r = lcs / len(a), lcs / len(b)
    return (1 + beta * beta) * p * r / (r + beta * beta * p)
