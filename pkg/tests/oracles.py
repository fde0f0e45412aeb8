"""Independent reference implementations used as test oracles.

None of these import the code paths they check.
"""

from __future__ import annotations

import re
from collections import Counter
from itertools import product

import numpy as np

_TAG_SPLIT = re.compile(r"(</?(?:think|answer|type)>)")
_HEADING = re.compile(r"^(Caption|Feedback|Comparision|Comparison|Conclusion):")
_TASK_NAMES = {"image understanding", "image generation", "video understanding", "video generation"}


def reference_accepts(text: str, typed: bool) -> bool:
    """Naive tokenizing/line-scanning validator for the reply grammar."""
    pieces = _TAG_SPLIT.split(text)
    texts, tags = pieces[0::2], pieces[1::2]
    want = ["<think>", "<type>", "</type>", "</think>", "<answer>", "</answer>"]
    if not typed:
        want = [t for t in want if "type" not in t]
    if tags != want:
        return False
    # texts[i] sits before tags[i]; texts[-1] follows the last tag
    if texts[0].strip():
        return False
    if typed:
        if texts[1].strip():
            return False
        if " ".join(texts[2].split()).lower() not in _TASK_NAMES:
            return False
        think_body, between, answer, tail = texts[3], texts[4], texts[5], texts[6]
    else:
        think_body, between, answer, tail = texts[1], texts[2], texts[3], texts[4]
    if between.strip() or tail.strip():
        return False
    if answer.strip() not in ("A", "B"):
        return False
    return _sections_ok(think_body, typed)


def _sections_ok(body: str, typed: bool) -> bool:
    if "\n" not in body:
        return False
    first, rest = body.split("\n", 1)
    if first.strip():
        return False
    expected = (["Caption"] if typed else []) + ["Feedback", "Comparison", "Conclusion"]
    pos = 0
    caption_lines: list[str] = []
    for line in rest.split("\n"):
        m = _HEADING.match(line)
        if m:
            name = "Comparison" if m.group(1) == "Comparision" else m.group(1)
            if pos >= len(expected) or name != expected[pos]:
                return False
            pos += 1
            if name == "Caption":
                caption_lines.append(line[len("Caption:"):])
            continue
        if pos == 0 and line.strip():
            return False
        if pos == 1 and typed:
            caption_lines.append(line)
    if pos != len(expected):
        return False
    return not typed or bool("\n".join(caption_lines).strip())


def brute_force_cmkd(labels, well_formed, confidences):
    """Selection by exhaustive scoring.

    ``labels[i]`` is the readable answer or None. Returns ``(label, index)`` or
    ``None`` when nothing survives.
    """
    counts = Counter(l for l in labels if l is not None)
    if not counts:
        return None
    top = max(counts.values())
    label = min(l for l, c in counts.items() if c == top)  # "A" < "B"
    survivors = [i for i in range(len(labels)) if labels[i] == label and well_formed[i]]
    if not survivors:
        return None
    best = max(confidences[i] for i in survivors)
    return label, min(i for i in survivors if confidences[i] == best)


def enumerate_kl(p_heads: list[np.ndarray], q_heads: list[np.ndarray]) -> float:
    """KL of two product distributions by summing over the joint action space."""
    total = 0.0
    for combo in product(*[range(len(p)) for p in p_heads]):
        p = np.prod([ph[i] for ph, i in zip(p_heads, combo)])
        q = np.prod([qh[i] for qh, i in zip(q_heads, combo)])
        if p > 0:
            total += p * np.log(p / q)
    return float(total)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def majority_accuracy(p: float, k: int, frac_a: float) -> float:
    """Closed-form voting@k accuracy for i.i.d. votes correct with probability ``p``.

    Ties go to A, so a tie is correct exactly for gold-A examples.
    """
    from math import comb

    win = sum(comb(k, j) * p**j * (1 - p) ** (k - j) for j in range(k // 2 + 1, k + 1))
    tie = comb(k, k // 2) * p ** (k // 2) * (1 - p) ** (k // 2) if k % 2 == 0 else 0.0
    return win + tie * frac_a
