# Listening-test statistics: MOS aggregation, two-sided
# Mann-Whitney U tests and Holm-Bonferroni correction over all
# system pairs.

import csv
import dataclasses
import itertools
import math

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from pym2a.error_classes import M2AInputError, M2AStatsError
from pym2a.s01_reporting_classes import module_logger
from pym2a.s03_file_formats import write_csv, write_image

logger = module_logger(__name__)

RATINGS_HEADER = ("listener_id", "system_id", "sample_id", "score")
SCORES = (1, 2, 3, 4, 5)
EXACT_LIMIT = 20
MW_METHODS = ("auto", "exact", "asymptotic")
UNITS = ("rating", "sample")
GRID_CELL = 16
GREY = (128, 128, 128)
WHITE = (255, 255, 255)


@dataclasses.dataclass(frozen=True)
class RatingRecord:
    listener_id: str
    system_id: str
    sample_id: str
    score: int

    def __post_init__(self):
        if self.score not in SCORES or isinstance(self.score, bool):
            raise M2AStatsError(f"score must be an integer 1..5, not {self.score!r}")


def read_ratings_csv(path):
    """
    :param path: CSV with header listener_id,system_id,sample_id,score
    :return: list of RatingRecord in file order
    :raises M2AInputError: unreadable file, wrong header or bad score
    """
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != RATINGS_HEADER:
                raise M2AInputError(
                    f"{path}: header must be {','.join(RATINGS_HEADER)}, got {header}"
                )
            records = []
            for line, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(RATINGS_HEADER):
                    raise M2AInputError(f"{path}:{line}: expected 4 fields, got {len(row)}")
                listener, system, sample, score = (cell.strip() for cell in row)
                try:
                    value = int(score)
                except ValueError:
                    raise M2AStatsError(f"{path}:{line}: score {score!r} is not an integer")
                records.append(RatingRecord(listener, system, sample, value))
    except OSError as err:
        raise M2AInputError(f"cannot read {path}: {err}")
    logger.debug("read %d ratings from %s", len(records), path)
    return records


@dataclasses.dataclass(frozen=True)
class MosSummary:
    mean: float
    count: int


def _scores_by_system(records):
    scores = {}
    for record in records:
        scores.setdefault(record.system_id, []).append(record.score)
    return scores


def aggregate_mos(records, systems=None):
    """
    :param records: iterable of RatingRecord
    :param systems: system ids to report, default every rated system
    :return: {system_id: MosSummary} in sorted or requested order
    :raises M2AStatsError: a requested system has no ratings
    """
    scores = _scores_by_system(records)
    names = sorted(scores) if systems is None else list(systems)
    summary = {}
    for name in names:
        values = scores.get(name)
        if not values:
            raise M2AStatsError(f"no ratings for system {name!r}")
        summary[name] = MosSummary(math.fsum(values) / len(values), len(values))
    return summary


def per_sample_means(records):
    """
    :return: {system_id: [mean score per sample, in sample-id order]}
    """
    grouped = {}
    for record in records:
        grouped.setdefault(record.system_id, {}).setdefault(record.sample_id, []).append(
            record.score
        )
    return {
        system: [math.fsum(vals) / len(vals) for _, vals in sorted(samples.items())]
        for system, samples in sorted(grouped.items())
    }


@dataclasses.dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    p: float


def _u_statistic(xs, ys):
    ranks = rankdata(np.concatenate((xs, ys)))
    return float(ranks[: len(xs)].sum() - len(xs) * (len(xs) + 1) / 2.0)


def _two_sided_exact(u, doubled_ranks, n_x):
    """
    Exact two-sided p from the distribution of the rank sum of
    ``n_x`` items drawn from ``doubled_ranks`` (twice the midranks,
    so ties stay integral).
    """
    # counts[k][s]: number of k-subsets with doubled rank sum s
    top = int(sum(sorted(doubled_ranks)[-n_x:])) if n_x else 0
    counts = np.zeros((n_x + 1, top + 1), dtype=object)
    counts[0][0] = 1
    for rank in doubled_ranks:
        rank = int(rank)
        for k in range(n_x, 0, -1):
            counts[k][rank:] = counts[k][rank:] + counts[k - 1][: top + 1 - rank]
    distribution = counts[n_x]
    total = sum(distribution)
    # R = U + n_x (n_x + 1) / 2, in doubled units
    observed = int(round(2.0 * u + n_x * (n_x + 1)))
    if observed <= n_x * (len(doubled_ranks) + 1):
        tail = sum(distribution[: observed + 1])
    else:
        tail = sum(distribution[observed:])
    return min(1.0, 2.0 * tail / total)


def _two_sided_asymptotic(u, xs, ys):
    n_x, n_y = len(xs), len(ys)
    total = n_x + n_y
    _, tie_counts = np.unique(np.concatenate((xs, ys)), return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts))
    variance = n_x * n_y / 12.0 * ((total + 1) - tie_term / (total * (total - 1)))
    if variance <= 0:
        return 1.0
    z = max(0.0, (abs(u - n_x * n_y / 2.0) - 0.5) / math.sqrt(variance))
    return float(min(1.0, max(2.0 * ndtr(-z), np.finfo(float).tiny)))


def mann_whitney_u(xs, ys, method="auto"):
    """
    Two-sided Mann-Whitney U test.

    U counts pairs with x > y, ties counting one half. ``auto`` uses
    the exact null distribution when n_x + n_y <= 20 and otherwise the
    normal approximation with tie-corrected variance and a 0.5
    continuity correction.

    :return: MannWhitneyResult(u, p) with p in (0, 1]
    :raises M2AStatsError: either sample is empty
    """
    if method not in MW_METHODS:
        raise M2AInputError(f"unknown method {method!r}, use one of {MW_METHODS}")
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size == 0 or ys.size == 0:
        raise M2AStatsError("Mann-Whitney U needs two non-empty samples")
    u = _u_statistic(xs, ys)
    exact = method == "exact" or (method == "auto" and xs.size + ys.size <= EXACT_LIMIT)
    if exact:
        doubled = np.round(2.0 * rankdata(np.concatenate((xs, ys)))).astype(int)
        p = _two_sided_exact(u, doubled, xs.size)
    else:
        p = _two_sided_asymptotic(u, xs, ys)
    return MannWhitneyResult(u, p)


def brute_force_p(xs, ys):
    """
    Two-sided permutation p-value by enumerating every split of the
    pooled sample. Exponential; for checking small cases.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    pooled = np.concatenate((xs, ys))
    n_x, total = xs.size, pooled.size
    u = _u_statistic(xs, ys)
    mean = n_x * ys.size / 2.0
    low = high = count = 0
    for chosen in itertools.combinations(range(total), n_x):
        mask = np.zeros(total, dtype=bool)
        mask[list(chosen)] = True
        other = _u_statistic(pooled[mask], pooled[~mask])
        count += 1
        low += other <= u
        high += other >= u
    tail = low if u <= mean else high
    return min(1.0, 2.0 * tail / count)


def holm_bonferroni(pvals, alpha=0.05):
    """
    Holm's step-down procedure.

    :param pvals: p-values in [0, 1]
    :param alpha: family-wise error rate in (0, 1)
    :return: list of rejection flags in input order
    """
    if not 0 < alpha < 1:
        raise M2AStatsError(f"alpha must lie in (0, 1), not {alpha}")
    pvals = list(pvals)
    if any(not 0 <= p <= 1 for p in pvals):
        raise M2AStatsError("p-values must lie in [0, 1]")
    m = len(pvals)
    rejected = [False] * m
    order = sorted(range(m), key=lambda index: pvals[index])
    for step, index in enumerate(order):
        if pvals[index] > alpha / (m - step):
            break
        rejected[index] = True
    return rejected


@dataclasses.dataclass(frozen=True, eq=False)
class SignificanceMatrix:
    systems: tuple
    raw_p: np.ndarray
    rejected: np.ndarray
    alpha: float

    def pairs(self):
        """(system_a, system_b, p, rejected) for the upper triangle"""
        return [
            (self.systems[i], self.systems[j], float(self.raw_p[i, j]), bool(self.rejected[i, j]))
            for i, j in itertools.combinations(range(len(self.systems)), 2)
        ]


def significance_matrix(records, alpha=0.05, unit="rating", systems=None, method="auto"):
    """
    Pairwise Mann-Whitney U tests over systems, Holm-Bonferroni
    corrected jointly across all pairs.

    :param records: iterable of RatingRecord
    :param alpha: family-wise error rate
    :param unit: "rating" uses every rating as an observation,
        "sample" uses per-sample mean scores
    :param systems: display order, default sorted system ids
    :raises M2AStatsError: fewer than 2 systems
    """
    if unit not in UNITS:
        raise M2AInputError(f"unit must be one of {UNITS}, not {unit!r}")
    records = list(records)
    scores = _scores_by_system(records) if unit == "rating" else per_sample_means(records)
    names = tuple(sorted(scores) if systems is None else systems)
    if len(names) < 2:
        raise M2AStatsError("significance testing needs at least 2 systems")
    missing = [name for name in names if not scores.get(name)]
    if missing:
        raise M2AStatsError(f"no ratings for systems {missing}")
    size = len(names)
    pairs = list(itertools.combinations(range(size), 2))
    pvals = [mann_whitney_u(scores[names[i]], scores[names[j]], method).p for i, j in pairs]
    decisions = holm_bonferroni(pvals, alpha)
    raw_p = np.ones((size, size))
    rejected = np.zeros((size, size), dtype=bool)
    for (i, j), p, decision in zip(pairs, pvals, decisions):
        raw_p[i, j] = raw_p[j, i] = p
        rejected[i, j] = rejected[j, i] = decision
    logger.info(
        "%d of %d pairs significant at alpha %.3f", sum(decisions), len(pairs), alpha
    )
    raw_p.setflags(write=False)
    rejected.setflags(write=False)
    return SignificanceMatrix(names, raw_p, rejected, alpha)


def write_mos_table(path, summary):
    write_csv(
        path,
        ("system", "mos", "count"),
        [(name, s.mean, s.count) for name, s in summary.items()],
    )


def write_significance_csv(out_dir, matrix):
    """
    significance.csv holds 0/1 rejections, significance_p.csv the
    raw p-values; both square with a header row of system ids.
    """
    header = ("system",) + matrix.systems
    write_csv(
        f"{out_dir}/significance.csv",
        header,
        [(name,) + tuple(bool(v) for v in row) for name, row in zip(matrix.systems, matrix.rejected)],
    )
    write_csv(
        f"{out_dir}/significance_p.csv",
        header,
        [(name,) + tuple(float(v) for v in row) for name, row in zip(matrix.systems, matrix.raw_p)],
    )


def render_significance_grid(path, matrix, cell=GRID_CELL):
    """
    Grey cells mark significant differences, white cells the rest.
    """
    size = len(matrix.systems)
    rgb = np.empty((size, size, 3), dtype=np.uint8)
    rgb[...] = WHITE
    rgb[matrix.rejected] = GREY
    rgb = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    # one-pixel grid lines
    rgb[::cell, :, :] = 0
    rgb[:, ::cell, :] = 0
    write_image(path, rgb)
