"""Network intent extraction: utterance -> slot:value keywords, with scoring."""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Sequence

SLOTS = ("bandwidth", "src", "dst", "protection", "other")

_UNITS = {"bps": "bps", "kbps": "Kbps", "mbps": "Mbps", "gbps": "Gbps", "kb/s": "Kbps", "mb/s": "Mbps", "gb/s": "Gbps"}
_BW_RE = re.compile(r"(\d+(?:\.\d+)?)\s*(gbps|mbps|kbps|bps|gb/s|mb/s|kb/s)\b", re.I)
_EP_RE = re.compile(r"\b(access|cloud)\s*[-#]?\s*(\d+)\b", re.I)
_FROM_WORDS = {"from"}
_TO_WORDS = {"to", "towards", "into", "reach", "reaching", "and"}
_NEG_PROT_RE = re.compile(r"\b(unprotected|without\s+(?:any\s+)?protection|no\s+protection|not\s+protected)\b", re.I)
_PROT_RE = re.compile(r"\bprotect(?:ion|ed)?\b", re.I)


@dataclass(frozen=True)
class IntentSample:
    utterance: str
    keywords: frozenset[tuple[str, str]]

    def __post_init__(self):
        if not self.keywords:
            raise ValueError(f"intent sample {self.utterance!r} has no keywords")
        for slot, value in self.keywords:
            if slot not in SLOTS:
                raise ValueError(f"unknown slot {slot!r}")
            if slot == "bandwidth" and not _BW_RE.fullmatch(value):
                raise ValueError(f"bandwidth {value!r} is not number+unit")

    def to_tsv(self) -> str:
        return "\t".join([self.utterance, *(f"{s}:{v}" for s, v in sorted(self.keywords, key=_slot_order))])

    @classmethod
    def from_tsv(cls, line: str, lineno: int = 1) -> "IntentSample":
        utterance, *fields = line.rstrip("\n").split("\t")
        return cls(utterance, parse_keywords(fields, lineno))


def _slot_order(kv: tuple[str, str]) -> tuple[int, str]:
    return (SLOTS.index(kv[0]) if kv[0] in SLOTS else len(SLOTS), kv[1])


def parse_keywords(fields: Iterable[str], lineno: int = 1) -> frozenset[tuple[str, str]]:
    out = set()
    for f in fields:
        f = f.strip()
        if not f:
            continue
        slot, sep, value = f.partition(":")
        if not sep or not value.strip():
            raise ValueError(f"line {lineno}: expected slot:value, got {f!r}")
        out.add((slot.strip(), value.strip()))
    return frozenset(out)


def canonical_bandwidth(number: str, unit: str) -> str:
    n = Decimal(number).normalize()
    text = format(n, "f")
    return f"{text} {_UNITS[unit.lower()]}"


def extract_intent_rules(utterance: str) -> frozenset[tuple[str, str]]:
    """Rule-based slot extraction.

    Endpoints marked by "from"/"to" take those roles; unmarked ones fill the
    remaining roles in order of mention.
    """
    out: set[tuple[str, str]] = set()
    m = _BW_RE.search(utterance)
    if m:
        out.add(("bandwidth", canonical_bandwidth(m.group(1), m.group(2))))

    src = dst = None
    unmarked = []
    for m in _EP_RE.finditer(utterance):
        name = f"{m.group(1).capitalize()} {int(m.group(2))}"
        before = re.findall(r"[a-z]+", utterance[: m.start()].lower())
        prev = before[-1] if before else ""
        if prev in _FROM_WORDS and src is None:
            src = name
        elif prev in _TO_WORDS and prev != "and" and dst is None:
            dst = name
        else:
            unmarked.append(name)
    for name in unmarked:
        if src is None and name != dst:
            src = name
        elif dst is None and name != src:
            dst = name
    if src:
        out.add(("src", src))
    if dst:
        out.add(("dst", dst))

    if _NEG_PROT_RE.search(utterance):
        out.add(("protection", "no"))
    elif _PROT_RE.search(utterance):
        out.add(("protection", "yes"))
    return frozenset(out)


@dataclass
class IntentScore:
    exact_match: float
    precision: float
    recall: float
    f1: float
    n: int

    def to_dict(self) -> dict:
        return {"exact_match": self.exact_match, "precision": self.precision, "recall": self.recall, "f1": self.f1, "n": self.n}


def score_intents(predicted: Sequence[frozenset], gold: Sequence[frozenset]) -> IntentScore:
    """Exact-match rate and micro-averaged slot precision/recall/F1."""
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predictions for {len(gold)} gold samples")
    if not gold:
        return IntentScore(0.0, 0.0, 0.0, 0.0, 0)
    exact = sum(set(p) == set(g) for p, g in zip(predicted, gold))
    tp = sum(len(set(p) & set(g)) for p, g in zip(predicted, gold))
    n_pred = sum(len(p) for p in predicted)
    n_gold = sum(len(g) for g in gold)
    prec = tp / n_pred if n_pred else 0.0
    rec = tp / n_gold if n_gold else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return IntentScore(exact / len(gold), prec, rec, f1, len(gold))


def read_intents(path: str | Path) -> list[IntentSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip() and not line.startswith("#"):
                out.append(IntentSample.from_tsv(line, lineno))
    return out


def write_intents(samples: Iterable[IntentSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(s.to_tsv() + "\n")


_TEMPLATES = (
    "Please create a {bw} connection from {src} to {dst}{prot}.",
    "I need {bw} between {src} and {dst}{prot}.",
    "Set up a link to {dst} from {src} with {bw}{prot}.",
    "Provision {bw} from {src} towards {dst}{prot}.",
    "Connect {src} to {dst} at {bw}{prot}.",
    "Could you build a path from {src} to {dst}? It needs {bw}{prot}.",
)
_PROT_PHRASES = {
    "yes": (" with protection", ", protected", " and make it protected"),
    "no": (" without protection", ", no protection needed", ", unprotected"),
}


def generate_intent_dataset(n: int = 4000, seed: int = 0) -> list[IntentSample]:
    """Seeded utterance/keyword pairs from the templates above."""
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        kinds = ["Access", "Cloud"]
        src = f"{rng.choice(kinds)} {rng.randint(1, 9)}"
        dst = src
        while dst == src:
            dst = f"{rng.choice(kinds)} {rng.randint(1, 9)}"
        num = rng.choice(["1", "2", "5", "10", "20", "40", "100", "2.5"])
        unit = rng.choice(["Mbps", "Gbps", "Kbps"])
        prot = rng.choice(["yes", "no", None])
        phrase = rng.choice(_PROT_PHRASES[prot]) if prot else ""
        text = rng.choice(_TEMPLATES).format(bw=f"{num} {unit}", src=src, dst=dst, prot=phrase)
        kw = {("bandwidth", canonical_bandwidth(num, unit)), ("src", src), ("dst", dst)}
        if prot:
            kw.add(("protection", prot))
        out.append(IntentSample(text, frozenset(kw)))
    return out


def build_intent_prompt(utterance: str) -> str:
    return (
        "Extract the network intent as slot:value pairs separated by tabs. "
        f"Slots: {', '.join(SLOTS)}.\nUtterance: {utterance}\nKeywords:"
    )


class BackendIntentExtractor:
    """Extract intents with a text backend; unparseable fields are dropped."""

    def __init__(self, backend):
        self.backend = backend

    def __call__(self, utterance: str) -> frozenset[tuple[str, str]]:
        from ..model_backend import GenerationRequest

        text = self.backend.generate(GenerationRequest(build_intent_prompt(utterance))).text
        last = text.strip().splitlines()[-1] if text.strip() else ""
        out = set()
        for field in re.split(r"[\t;]", last):
            slot, sep, value = field.partition(":")
            if sep and slot.strip() in SLOTS and value.strip():
                out.add((slot.strip(), value.strip()))
        return frozenset(out)


def golden_path() -> Path:
    return Path(__file__).resolve().parent.parent / "data" / "intent_golden.tsv"
