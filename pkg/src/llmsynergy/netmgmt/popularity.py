"""Content popularity prediction harness: interval bucketing, prompt templates, baselines."""

from __future__ import annotations

import csv
import math
import random
import re
from collections import Counter
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

SIX_HOURS = 6 * 3600
HALF_YEAR = 183 * 86400

BLOCK_START = "<|interval|>"
BLOCK_END = "<|endofinterval|>"
LINE_FORMAT = "In interval {i}, movie '{title}' appear :{label}"
_LINE_RE = re.compile(r"^In interval (\d+), movie '(.+)' appear :([01])$")


class DataError(ValueError):
    pass


class TemplateError(DataError):
    pass


@dataclass(frozen=True)
class ViewingRecord:
    timestamp: int
    title: str

    def __post_init__(self):
        if not self.title:
            raise DataError("viewing record needs a title")
        if not isinstance(self.timestamp, (int, np.integer)):
            raise DataError(f"timestamp must be integer seconds, got {self.timestamp!r}")


@dataclass
class IntervalDataset:
    interval_len_s: int
    start: int
    titles: list[str]
    labels: np.ndarray  # (n_intervals, K), 0/1
    first_index: int = 0

    def __post_init__(self):
        if self.interval_len_s <= 0:
            raise DataError("interval_len_s must be > 0")
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2 or self.labels.shape[1] != len(self.titles):
            raise DataError("labels must be |intervals| x K")

    @property
    def n_intervals(self) -> int:
        return self.labels.shape[0]

    @property
    def intervals(self) -> range:
        return range(self.first_index, self.first_index + self.n_intervals)

    def interval_start(self, i: int) -> int:
        return self.start + i * self.interval_len_s

    def subset(self, lo: int, hi: int) -> "IntervalDataset":
        return IntervalDataset(self.interval_len_s, self.start, self.titles, self.labels[lo:hi], self.first_index + lo)


def parse_timestamp(value: str) -> int:
    value = value.strip()
    try:
        return int(float(value))
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(value)
    except ValueError:
        raise DataError(f"unparseable timestamp {value!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def read_viewing_csv(path: str | Path, timestamp_col: str = "timestamp", title_col: str = "title") -> list[ViewingRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {timestamp_col, title_col} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            title = (row[title_col] or "").strip()
            if not title:
                continue
            records.append(ViewingRecord(parse_timestamp(row[timestamp_col]), title))
    return records


def write_viewing_csv(records: Iterable[ViewingRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "title"])
        for r in records:
            w.writerow([r.timestamp, r.title])


def default_window(records: Sequence[ViewingRecord], span_s: int = HALF_YEAR) -> tuple[int, int]:
    """The last ``span_s`` seconds of data, as a half-open [start, end) span."""
    end = max(r.timestamp for r in records) + 1
    start = max(min(r.timestamp for r in records), end - span_s)
    return start, end


def bucketize(
    records: Sequence[ViewingRecord],
    interval_len_s: int = SIX_HOURS,
    top_k: int = 20,
    window: tuple[int, int] | None = None,
) -> IntervalDataset:
    """Presence labels of the ``top_k`` most-viewed titles per fixed-length interval.

    Intervals are half-open and anchored at the window start. Frequency ties
    break by title.
    """
    if not records:
        raise DataError("no viewing records")
    if interval_len_s <= 0:
        raise DataError("interval_len_s must be > 0")
    start, end = window if window is not None else default_window(records)
    if end <= start:
        raise DataError("empty window")
    inside = [r for r in records if start <= r.timestamp < end]
    counts = Counter(r.title for r in inside)
    if len(counts) < top_k:
        raise DataError(f"only {len(counts)} distinct titles in window, {top_k} needed ({top_k - len(counts)} short)")
    titles = [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]]
    col = {t: j for j, t in enumerate(titles)}
    n = math.ceil((end - start) / interval_len_s)
    labels = np.zeros((n, top_k), dtype=np.uint8)
    for r in inside:
        j = col.get(r.title)
        if j is not None:
            labels[(r.timestamp - start) // interval_len_s, j] = 1
    return IntervalDataset(interval_len_s, start, titles, labels)


# ---- templates -----------------------------------------------------------------


def render_line(i: int, title: str, label: int) -> str:
    if "\n" in title or not title:
        raise TemplateError("titles must be nonempty single-line text")
    return LINE_FORMAT.format(i=i, title=title, label=int(label))


def render_template(ds: IntervalDataset, interval: int) -> str:
    """Prompt block for one interval: every tracked title with its label."""
    if interval not in ds.intervals:
        raise IndexError(f"interval {interval} outside {ds.intervals}")
    row = ds.labels[interval - ds.first_index]
    lines = [render_line(interval, t, row[j]) for j, t in enumerate(ds.titles)]
    return "\n".join([BLOCK_START, *lines, BLOCK_END])


def parse_line(line: str, lineno: int = 1) -> tuple[int, str, int]:
    m = _LINE_RE.match(line)
    if not m:
        raise TemplateError(
            f"line {lineno}: expected \"In interval <n>, movie '<title>' appear :<0|1>\", got {line!r}"
        )
    return int(m.group(1)), m.group(2), int(m.group(3))


def parse_template(text: str) -> list[tuple[int, str, int]]:
    """Parse rendered lines (block markers optional) into (interval, title, label)."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.strip() in (BLOCK_START, BLOCK_END, ""):
            continue
        out.append(parse_line(line, lineno))
    return out


# ---- split, baselines, scoring ------------------------------------------------------


def split_train_test(ds: IntervalDataset, ratio: float = 0.95) -> tuple[IntervalDataset, IntervalDataset]:
    if not 0.0 < ratio < 1.0:
        raise DataError("split ratio must lie in (0, 1)")
    n = ds.n_intervals
    n_train = math.floor(ratio * n + 1e-9)
    if n_train < 1 or n_train >= n:
        raise DataError(f"{n} intervals cannot give nonempty train and test sets at ratio {ratio}")
    return ds.subset(0, n_train), ds.subset(n_train, n)


class FrequencyBaseline(ClassifierMixin, BaseEstimator):
    """Predict a title present when its training appearance rate exceeds ``threshold``."""

    def __init__(self, threshold: float = 0.5):
        self.threshold = threshold

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.rate_ = X.mean(axis=0)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "rate_")
        X = check_array(X, dtype=np.float64)
        row = (self.rate_ > self.threshold).astype(np.uint8)
        return np.tile(row, (X.shape[0], 1))


class Markov1Baseline(ClassifierMixin, BaseEstimator):
    """Per-title first-order Markov chain over presence labels.

    ``fit`` takes the chronological training label matrix; ``predict`` takes
    the label vector of each interval preceding the one being predicted.
    """

    def __init__(self, threshold: float = 0.5):
        self.threshold = threshold

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        prev, nxt = X[:-1], X[1:]
        k = X.shape[1]
        self.p_next_ = np.zeros((2, k))
        self.seen_ = np.zeros((2, k), dtype=bool)
        for state in (0, 1):
            mask = prev == state
            count = mask.sum(axis=0)
            ones = (nxt * mask).sum(axis=0)
            self.seen_[state] = count > 0
            self.p_next_[state] = np.divide(ones, count, out=np.zeros(k), where=count > 0)
        self.rate_ = X.mean(axis=0)
        self.n_features_in_ = k
        return self

    def predict(self, X):
        check_is_fitted(self, "p_next_")
        X = check_array(X, dtype=np.float64)
        state = (X > 0.5).astype(int)
        cols = np.arange(X.shape[1])
        p = self.p_next_[state, cols]
        # unseen predecessor state: fall back to the marginal rate
        p = np.where(self.seen_[state, cols], p, self.rate_)
        return (p > self.threshold).astype(np.uint8)


class BackendPredictor(ClassifierMixin, BaseEstimator):
    """Ask a text backend to continue the template for the next interval.

    The prompt is the previous interval's block followed by one unlabeled
    line per title; the reply is read with :func:`parse_template`. Titles the
    reply does not label are predicted absent.
    """

    def __init__(self, backend=None, titles=None, start_index: int = 0):
        self.backend = backend
        self.titles = titles
        self.start_index = start_index

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        from ..model_backend import GenerationRequest

        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64)
        out = np.zeros(X.shape, dtype=np.uint8)
        col = {t: j for j, t in enumerate(self.titles)}
        for r, prev in enumerate(X):
            i = self.start_index + r
            context = [render_line(i - 1, t, int(prev[j] > 0.5)) for j, t in enumerate(self.titles)]
            query = [LINE_FORMAT.format(i=i, title=t, label="").rstrip() for t in self.titles]
            prompt = "\n".join([BLOCK_START, *context, BLOCK_END, BLOCK_START, *query])
            text = self.backend.generate(GenerationRequest(prompt)).text
            for line in text.splitlines():
                try:
                    idx, title, label = parse_line(line.strip())
                except TemplateError:
                    continue
                if idx == i and title in col:
                    out[r, col[title]] = label
        return out


BASELINES = {"frequency": FrequencyBaseline, "markov1": Markov1Baseline}


def previous_labels(train: IntervalDataset, test: IntervalDataset) -> np.ndarray:
    """Label vectors of the interval before each test interval."""
    return np.vstack([train.labels[-1:], test.labels[:-1]])


def predict_baseline(train: IntervalDataset, test: IntervalDataset, method: str = "frequency") -> np.ndarray:
    if train.n_intervals == 0:
        raise DataError("empty training set")
    try:
        est = BASELINES[method]()
    except KeyError:
        raise DataError(f"unknown method {method!r}; choose from {sorted(BASELINES)}") from None
    return est.fit(train.labels).predict(previous_labels(train, test))


@dataclass
class Score:
    accuracy: float
    per_title: dict[str, float]

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "per_title": self.per_title}


def score(pred, truth, titles: Sequence[str] | None = None) -> Score:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DataError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    hit = pred == truth
    titles = list(titles) if titles is not None else [str(j) for j in range(truth.shape[1])]
    per = hit.mean(axis=0) if hit.size else np.zeros(truth.shape[1])
    return Score(float(hit.mean()) if hit.size else 0.0, {t: float(a) for t, a in zip(titles, per)})


def periodic_labels(n_intervals: int = 200, k: int = 20, period: int = 2, noise: float = 0.05, seed: int = 0) -> np.ndarray:
    """Labels where each title repeats a fixed on/off pattern of length ``period``.

    Half the pattern slots are on, so the marginal rate carries no signal
    while the previous interval does.
    """
    rng = np.random.default_rng(seed)
    phase = rng.integers(0, period, size=k)
    t = np.arange(n_intervals)[:, None]
    base = (((t + phase[None, :]) % period) < period / 2).astype(np.uint8)
    flip = rng.random(base.shape) < noise
    return np.where(flip, 1 - base, base).astype(np.uint8)


def synthetic_viewing_records(days: int = 200, n_titles: int = 30, seed: int = 0, start: int = 1_600_000_000) -> list[ViewingRecord]:
    """Viewing log with daily rhythms: each title has a preferred 6-hour slot."""
    rng = random.Random(seed)
    titles = [f"Title {k:02d}" for k in range(n_titles)]
    slot = {t: rng.randrange(4) for t in titles}
    weight = {t: rng.uniform(0.2, 1.0) for t in titles}
    recs = []
    for day in range(days):
        for t in titles:
            for s in range(4):
                p = weight[t] * (0.85 if s == slot[t] else 0.08)
                if rng.random() < p:
                    ts = start + day * 86400 + s * SIX_HOURS + rng.randrange(SIX_HOURS)
                    recs.append(ViewingRecord(ts, t))
    recs.sort(key=lambda r: (r.timestamp, r.title))
    return recs


def synthetic_csv_path() -> Path:
    return Path(__file__).resolve().parent.parent / "data" / "viewing_synthetic.csv"
