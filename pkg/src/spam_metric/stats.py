"""Plausibility and faithfulness statistics.

Correlations (LCC/SRCC/KTAU) against MOS tables, the adherence rate over
positive/negative prompt pairs, and paired t-tests with an in-repo Student
t distribution.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

VARIANTS = ("original", "positive", "negative")


class StatsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# correlations


def _pair(x: Sequence[float], y: Sequence[float], min_len: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatsError("inputs must be 1-D sequences of equal length")
    if x.size < min_len:
        raise StatsError(f"need at least {min_len} paired values, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise StatsError("inputs must be finite")
    return x, y


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _pair(x, y, 3)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise StatsError("correlation undefined: zero variance input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def rankdata(x: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _pair(x, y, 3)
    return pearson(rankdata(x), rankdata(y))


def kendall_tau(x: Sequence[float], y: Sequence[float]) -> float:
    """Kendall's tau-b."""
    x, y = _pair(x, y, 2)
    n = x.size
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(n, k=1)
    prod = (sx * sy)[iu]
    concordant = int(np.sum(prod > 0))
    discordant = int(np.sum(prod < 0))
    n0 = n * (n - 1) // 2
    tx = int(np.sum(sx[iu] == 0))
    ty = int(np.sum(sy[iu] == 0))
    denom = (n0 - tx) * (n0 - ty)
    if denom == 0:
        raise StatsError("kendall tau undefined: an input is constant")
    return (concordant - discordant) / math.sqrt(denom)


# ---------------------------------------------------------------------------
# Student t distribution


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must be in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_sf_abs(t: float, df: float) -> float:
    """P(T > |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return 0.5 * betainc_regularized(0.5 * df, 0.5, x)


def t_cdf(t: float, df: float) -> float:
    tail = t_sf_abs(t, df)
    return tail if t < 0 else 1.0 - tail


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p_two_sided: float
    p_one_sided_less: float


def paired_t(diffs: Sequence[float]) -> TTestResult:
    """One-sample t-test of ``mean(diffs) = 0`` (the paired t-test on
    per-pair differences)."""
    d = np.asarray(diffs, dtype=np.float64)
    if d.ndim != 1 or d.size < 3:
        raise StatsError("paired t-test needs at least 3 differences")
    if not np.all(np.isfinite(d)):
        raise StatsError("differences must be finite")
    sd = float(np.std(d, ddof=1))
    if sd == 0.0 or np.all(d == d[0]):
        raise StatsError(
            "degenerate paired t-test: all differences are identical, so the "
            "standard error is zero and t is undefined"
        )
    n = d.size
    t = float(d.mean()) / (sd / math.sqrt(n))
    df = n - 1
    tail = t_sf_abs(t, df)
    p_less = tail if t < 0 else 1.0 - tail
    p_two = min(1.0, 2.0 * tail)
    return TTestResult(t=t, df=df, p_two_sided=p_two, p_one_sided_less=p_less)


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


# ---------------------------------------------------------------------------
# score and MOS tables


@dataclass(frozen=True)
class ScoreRow:
    item_id: str
    variant: str
    variant_idx: int
    score: float


class ScoreTable:
    HEADER = ("item_id", "variant", "variant_idx", "score")

    def __init__(self, rows: Iterable[ScoreRow] = ()):
        self.rows: list[ScoreRow] = []
        for row in rows:
            self.add(row)

    def add(self, row: ScoreRow) -> None:
        if row.variant not in VARIANTS:
            raise StatsError(f"invalid variant {row.variant!r}")
        if not math.isfinite(row.score):
            raise StatsError(f"non-finite score for {row.item_id}")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def by_item(self) -> dict[str, dict[str, list[float]]]:
        """item_id -> variant -> scores ordered by variant_idx."""
        grouped: dict[str, dict[str, list[tuple[int, float]]]] = {}
        for row in self.rows:
            grouped.setdefault(row.item_id, {v: [] for v in VARIANTS})[row.variant].append(
                (row.variant_idx, row.score)
            )
        return {
            item: {v: [s for _, s in sorted(vals)] for v, vals in variants.items()}
            for item, variants in grouped.items()
        }

    def validate_complete(self) -> None:
        for item, variants in self.by_item().items():
            if len(variants["original"]) != 1:
                raise StatsError(f"{item}: expected exactly one original score")
            if len(variants["positive"]) != len(variants["negative"]):
                raise StatsError(f"{item}: positive and negative counts differ")
            if not variants["positive"]:
                raise StatsError(f"{item}: missing positive/negative scores")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.HEADER)
            for r in self.rows:
                writer.writerow([r.item_id, r.variant, r.variant_idx, repr(float(r.score))])

    @classmethod
    def read_csv(cls, path: str | Path) -> "ScoreTable":
        table = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            _check_header(header, cls.HEADER, path)
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    item_id, variant, idx, score = row
                    table.add(ScoreRow(item_id, variant, int(idx), float(score)))
                except (ValueError, StatsError) as exc:
                    raise StatsError(f"{path}:{lineno}: malformed row ({exc})") from exc
        return table


def _check_header(header, expected: Sequence[str], path) -> None:
    if header is None:
        raise StatsError(f"{path}: empty file, expected header {','.join(expected)}")
    for i, name in enumerate(expected):
        got = header[i] if i < len(header) else None
        if got != name:
            raise StatsError(f"{path}: bad header column {i + 1}: expected {name!r}, got {got!r}")
    if len(header) > len(expected):
        raise StatsError(f"{path}: bad header column {len(expected) + 1}: unexpected {header[len(expected)]!r}")


class MosTable:
    HEADER = ("item_id", "mos")

    def __init__(self, rows: Mapping[str, float] | Iterable[tuple[str, float]] = ()):
        items = rows.items() if isinstance(rows, Mapping) else rows
        self.mos: dict[str, float] = {}
        for item_id, value in items:
            value = float(value)
            if not 1.0 <= value <= 5.0:
                raise StatsError(f"MOS for {item_id} outside [1, 5]: {value}")
            if item_id in self.mos:
                raise StatsError(f"duplicate MOS item {item_id!r}")
            self.mos[item_id] = value

    def __len__(self) -> int:
        return len(self.mos)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.HEADER)
            for item, value in self.mos.items():
                writer.writerow([item, repr(value)])

    @classmethod
    def read_csv(cls, path: str | Path) -> "MosTable":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            _check_header(next(reader, None), cls.HEADER, path)
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    item_id, value = row
                    rows.append((item_id, float(value)))
                except ValueError as exc:
                    raise StatsError(f"{path}:{lineno}: malformed row ({exc})") from exc
        return cls(rows)


# ---------------------------------------------------------------------------
# reports


def _pair_credit(pos: np.ndarray, neg: np.ndarray) -> float:
    diff = pos[:, None] - neg[None, :]
    return float(np.mean((diff > 0) + 0.5 * (diff == 0)))


def adherence_rate(table: ScoreTable, micro: bool = False) -> float:
    """Share of positive/negative pairs where the positive scores higher
    (ties count one half), averaged per item then across items.

    ``micro=True`` pools all pairs across items instead.
    """
    grouped = table.by_item()
    if not grouped:
        raise StatsError("empty score table")
    credits, weights = [], []
    for item, variants in grouped.items():
        pos, neg = np.asarray(variants["positive"]), np.asarray(variants["negative"])
        if pos.size == 0 or neg.size == 0:
            raise StatsError(f"{item}: needs at least one positive and one negative score")
        credits.append(_pair_credit(pos, neg))
        weights.append(pos.size * neg.size)
    if micro:
        return float(np.average(credits, weights=weights))
    return float(np.mean(credits))


@dataclass(frozen=True)
class FaithfulnessReport:
    ar: float
    mean_sd_original: tuple[float, float]
    mean_sd_positive: tuple[float, float]
    mean_sd_negative: tuple[float, float]
    t1: dict
    t2: dict
    alpha: float
    n_items: int

    def to_json(self) -> dict:
        return asdict(self)

    def table_row(self, name: str = "SPAM") -> str:
        t1, t2 = self.t1, self.t2
        mark1 = "✓" if t1["rejected_h1"] else " "
        mark2 = "✓" if t2["accepted_h2"] else " "
        return (
            f"{name:<14}| {self.ar:5.3f} | "
            f"{self.mean_sd_original[0]:6.3f} ± {self.mean_sd_original[1]:5.3f} | "
            f"{self.mean_sd_positive[0]:6.3f} ± {self.mean_sd_positive[1]:5.3f} "
            f"{t1['t']:8.3f}{significance_stars(t1['p']):<3} {mark1} | "
            f"{self.mean_sd_negative[0]:6.3f} ± {self.mean_sd_negative[1]:5.3f} "
            f"{t2['t']:8.3f}{significance_stars(t2['p']):<3} {mark2}"
        )

    def format(self, name: str = "SPAM") -> str:
        header = (
            f"{'':<14}| {'AR':>5} | {'Original':>15} | {'Positive':>15} {'(H1 reject?)':>14} | "
            f"{'Negative':>15} {'(H2 accept?)':>14}"
        )
        footer = "* p<0.05, ** p<0.01, *** p<0.001"
        return "\n".join([header, "-" * len(header), self.table_row(name), footer])


def _mean_sd(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def faithfulness_report(table: ScoreTable, alpha: float = 0.05) -> FaithfulnessReport:
    table.validate_complete()
    grouped = table.by_item()
    items = sorted(grouped)
    s0 = np.array([grouped[i]["original"][0] for i in items])
    s_pos = np.array([np.mean(grouped[i]["positive"]) for i in items])
    s_neg = np.array([np.mean(grouped[i]["negative"]) for i in items])
    h1 = paired_t(s_pos - s0)
    h2 = paired_t(s_neg - s0)
    all_pos = [s for i in items for s in grouped[i]["positive"]]
    all_neg = [s for i in items for s in grouped[i]["negative"]]
    return FaithfulnessReport(
        ar=adherence_rate(table),
        mean_sd_original=_mean_sd(s0),
        mean_sd_positive=_mean_sd(all_pos),
        mean_sd_negative=_mean_sd(all_neg),
        t1={"t": h1.t, "p": h1.p_two_sided, "rejected_h1": h1.p_two_sided >= alpha},
        t2={"t": h2.t, "p": h2.p_one_sided_less, "accepted_h2": h2.t < 0 and h2.p_one_sided_less < alpha},
        alpha=alpha,
        n_items=len(items),
    )


@dataclass(frozen=True)
class PlausibilityReport:
    lcc: float
    srcc: float
    ktau: float
    n: int

    def to_json(self) -> dict:
        return asdict(self)

    def format(self, name: str = "SPAM") -> str:
        return (
            f"{'':<14}| {'LCC':>6} | {'SRCC':>6} | {'KTAU':>6} | {'n':>5}\n"
            f"{name:<14}| {self.lcc:6.3f} | {self.srcc:6.3f} | {self.ktau:6.3f} | {self.n:5d}"
        )


def plausibility_report(scores: Mapping[str, float], mos: MosTable | Mapping[str, float]) -> PlausibilityReport:
    mos_map = mos.mos if isinstance(mos, MosTable) else dict(mos)
    common = [k for k in scores if k in mos_map]
    if len(common) < 3:
        raise StatsError(f"need at least 3 items present in both tables, got {len(common)}")
    x = [scores[k] for k in common]
    y = [mos_map[k] for k in common]
    return PlausibilityReport(pearson(x, y), spearman(x, y), kendall_tau(x, y), len(common))


def write_report(report, text_path: str | Path, json_path: str | Path, name: str = "SPAM") -> None:
    Path(text_path).write_text(report.format(name) + "\n", encoding="utf-8")
    Path(json_path).write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
