"""Fixed-length kinematic feature vectors and hypothesis-test feature selection.

Every procedure maps to the same feature catalogue: for each instrument class
and for all instruments pooled, 25 statistics on each of the speed,
acceleration-magnitude and jerk-magnitude channels, two trajectory-level
smoothness features, and the procedure duration. Statistics that are
undefined on the available data (e.g. skewness of a constant signal, an absent
instrument) are set to 0 and listed in ``FeatureVector.undefined``.

Selection runs a Kruskal-Wallis test per feature across skill classes and keeps
the Benjamini-Hochberg accepted set.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import IO, Optional, Sequence

import numpy as np
from scipy import stats

from .kinematics import KinematicSeries
from .types import ALL_CLASSES

MIN_VALID = 32
MIN_SPECTRAL_SEGMENT = 16
BANDS = ((0.0, 2.0), (2.0, 6.0), (6.0, 12.0))
ACF_LAGS = (1, 5, 10)
AR_ORDER = 3

CHANNELS = ("speed", "accel", "jerk")
STATISTICS = (
    "mean", "std", "skewness", "kurtosis", "min", "max", "median", "q10", "q25", "q75", "q90", "rms",
    "mean_abs_change", "count_above_mean", "longest_run_above_mean",
    "acf_lag1", "acf_lag5", "acf_lag10", "band_0_2", "band_2_6", "band_6_12", "spectral_entropy",
    "ar1", "ar2", "ar3",
)
TRAJECTORY_STATISTICS = ("path_length", "log_dimensionless_jerk")
GROUPS = tuple(c.value for c in ALL_CLASSES) + ("pooled",)


def feature_catalog() -> list[tuple[str, str, str]]:
    """(name, channel, statistic) for every feature, in vector order."""
    out = []
    for g in GROUPS:
        for ch in CHANNELS:
            for st in STATISTICS:
                out.append((f"{g}__{ch}__{st}", f"{g}/{ch}", st))
        for st in TRAJECTORY_STATISTICS:
            out.append((f"{g}__trajectory__{st}", f"{g}/trajectory", st))
    out.append(("duration_s", "procedure", "duration_s"))
    return out


FEATURE_NAMES: tuple[str, ...] = tuple(n for n, _, _ in feature_catalog())


@dataclass
class FeatureVector:
    names: tuple[str, ...]
    values: np.ndarray
    provenance: list[tuple[str, str]]
    undefined: set = field(default_factory=set)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


def _segments(x: np.ndarray, valid: np.ndarray) -> list[np.ndarray]:
    idx = np.flatnonzero(valid)
    if len(idx) == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks + 1, [len(idx)]])
    return [x[idx[s]:idx[e - 1] + 1] for s, e in zip(starts, ends)]


def _channel_stats(segs: list[np.ndarray], dt: float) -> tuple[dict[str, float], set[str]]:
    undefined: set[str] = set()
    x = np.concatenate(segs)
    n = len(x)
    mu = float(np.mean(x))
    sd = float(np.std(x))
    constant = sd <= 1e-12 * max(1.0, abs(mu))
    out = {"mean": mu, "std": 0.0 if constant else sd}
    if constant:
        out["skewness"] = out["kurtosis"] = 0.0
        undefined |= {"skewness", "kurtosis"}
    else:
        out["skewness"] = float(stats.skew(x))
        out["kurtosis"] = float(stats.kurtosis(x))
    q = np.quantile(x, [0.1, 0.25, 0.5, 0.75, 0.9])
    out.update(min=float(x.min()), max=float(x.max()), median=float(q[2]), q10=float(q[0]),
               q25=float(q[1]), q75=float(q[3]), q90=float(q[4]), rms=float(np.sqrt(np.mean(x * x))))

    diffs = [np.abs(np.diff(s)) for s in segs if len(s) > 1]
    n_diff = sum(len(d) for d in diffs)
    out["mean_abs_change"] = float(sum(d.sum() for d in diffs) / n_diff) if n_diff else 0.0
    if not n_diff:
        undefined.add("mean_abs_change")
    above = [s > mu for s in segs]
    out["count_above_mean"] = float(sum(int(a.sum()) for a in above))
    longest = 0
    for a in above:
        run = 0
        for v in a:
            run = run + 1 if v else 0
            longest = max(longest, run)
    out["longest_run_above_mean"] = float(longest)

    centred = [s - mu for s in segs]
    var = float(np.sum((x - mu) ** 2)) / n
    for lag in ACF_LAGS:
        pairs = [(c[:-lag] * c[lag:]) for c in centred if len(c) > lag]
        n_pairs = sum(len(p) for p in pairs)
        key = f"acf_lag{lag}"
        if constant or n_pairs == 0 or var == 0:
            out[key] = 0.0
            undefined.add(key)
        else:
            out[key] = float(sum(p.sum() for p in pairs) / n_pairs / var)

    band_energy = np.zeros(len(BANDS))
    total = 0.0
    entropy_acc = 0.0
    for s in segs:
        if len(s) < MIN_SPECTRAL_SEGMENT:
            continue
        y = (s - s.mean()) * np.hanning(len(s))
        power = np.abs(np.fft.rfft(y)) ** 2
        freqs = np.fft.rfftfreq(len(s), dt)
        power, freqs = power[1:], freqs[1:]
        e = float(power.sum())
        if e <= 0 or len(power) < 2:
            continue
        for b, (lo, hi) in enumerate(BANDS):
            upper = freqs <= hi if b == len(BANDS) - 1 else freqs < hi
            band_energy[b] += power[(freqs >= lo) & upper].sum()
        p = power / e
        nz = p[p > 0]
        entropy_acc += e * float(-(nz * np.log(nz)).sum() / math.log(len(power)))
        total += e
    for b, (lo, hi) in enumerate(BANDS):
        key = f"band_{lo:g}_{hi:g}"
        out[key] = float(band_energy[b] / total) if total > 0 else 0.0
    out["spectral_entropy"] = entropy_acc / total if total > 0 else 0.0
    if total <= 0:
        undefined |= {"band_0_2", "band_2_6", "band_6_12", "spectral_entropy"}

    rows, targets = [], []
    for c in centred:
        for t in range(AR_ORDER, len(c)):
            rows.append(c[t - AR_ORDER:t][::-1])
            targets.append(c[t])
    coef = None
    if len(rows) >= 4 * AR_ORDER and not constant:
        A = np.asarray(rows)
        if np.linalg.matrix_rank(A) == AR_ORDER:
            coef = np.linalg.lstsq(A, np.asarray(targets), rcond=None)[0]
    for k in range(AR_ORDER):
        key = f"ar{k + 1}"
        out[key] = float(coef[k]) if coef is not None else 0.0
        if coef is None:
            undefined.add(key)
    return out, undefined


def _trajectory_stats(series: Sequence[KinematicSeries]) -> tuple[dict[str, float], set[str]]:
    speeds, jerks, dts = [], [], []
    for s in series:
        speeds.append(s.speed[s.valid])
        jerks.append(s.jerk_magnitude[s.valid])
        dts.append(np.full(int(s.valid.sum()), s.dt))
    sp, jm, dt = np.concatenate(speeds), np.concatenate(jerks), np.concatenate(dts)
    out = {"path_length": float(np.sum(sp * dt))}
    undefined = set()
    T = float(dt.sum())
    v_peak = float(sp.max()) if len(sp) else 0.0
    J = float(np.sum(jm * jm * dt))
    if v_peak > 0 and J > 0 and T > 0:
        out["log_dimensionless_jerk"] = -math.log(T ** 3 / v_peak ** 2 * J)
    else:
        out["log_dimensionless_jerk"] = 0.0
        undefined.add("log_dimensionless_jerk")
    return out, undefined


def extract(series: Sequence[KinematicSeries]) -> FeatureVector:
    """Feature vector for one procedure from all of its kinematic series."""
    if not any(int(s.valid.sum()) >= MIN_VALID for s in series):
        raise ValueError(f"no kinematic series with at least {MIN_VALID} valid samples")
    groups = {g: [s for s in series if s.cls.value == g] for g in GROUPS[:-1]}
    groups["pooled"] = list(series)
    values: dict[str, float] = {}
    undefined: set[str] = set()
    for g, members in groups.items():
        n_valid = sum(int(s.valid.sum()) for s in members)
        if n_valid < MIN_VALID:
            for ch in CHANNELS:
                for st in STATISTICS:
                    values[f"{g}__{ch}__{st}"] = 0.0
                    undefined.add(f"{g}__{ch}__{st}")
            for st in TRAJECTORY_STATISTICS:
                values[f"{g}__trajectory__{st}"] = 0.0
                undefined.add(f"{g}__trajectory__{st}")
            continue
        dt = members[0].dt
        for ch in CHANNELS:
            segs = []
            for s in members:
                x = {"speed": s.speed, "accel": s.accel_magnitude, "jerk": s.jerk_magnitude}[ch]
                segs.extend(_segments(x, s.valid))
            st_vals, st_undef = _channel_stats(segs, dt)
            for st in STATISTICS:
                values[f"{g}__{ch}__{st}"] = st_vals[st]
            undefined |= {f"{g}__{ch}__{st}" for st in st_undef}
        tr, tr_undef = _trajectory_stats(members)
        for st in TRAJECTORY_STATISTICS:
            values[f"{g}__trajectory__{st}"] = tr[st]
        undefined |= {f"{g}__trajectory__{st}" for st in tr_undef}
    # span of measured samples, so unmeasured tails do not stretch the procedure
    first = min(int(s.frames[s.valid][0]) for s in series if s.valid.any())
    last = max(int(s.frames[s.valid][-1]) for s in series if s.valid.any())
    values["duration_s"] = (last - first + 1) * series[0].dt
    cat = feature_catalog()
    vec = np.array([values[n] for n, _, _ in cat])
    vec[~np.isfinite(vec)] = 0.0
    return FeatureVector(FEATURE_NAMES, vec, [(ch, st) for _, ch, st in cat], undefined)


# ---------------------------------------------------------------------------
# selection

@dataclass
class SelectionResult:
    names: tuple[str, ...]
    p_values: np.ndarray
    selected: np.ndarray  # bool
    q: float

    @property
    def selected_names(self) -> list[str]:
        return [n for n, s in zip(self.names, self.selected) if s]

    def to_json(self) -> dict:
        return {"q": self.q, "features": [
            {"name": n, "p_value": float(p), "selected": bool(s)}
            for n, p, s in zip(self.names, self.p_values, self.selected)]}


def benjamini_hochberg(p_values: Sequence[float], q: float, names: Optional[Sequence[str]] = None
                       ) -> np.ndarray:
    """Boolean mask of the BH-accepted hypotheses at FDR level q."""
    p = np.asarray(p_values, dtype=float)
    m = len(p)
    accepted = np.zeros(m, dtype=bool)
    if m == 0 or q <= 0:
        return accepted
    keys = names if names is not None else range(m)
    order = sorted(range(m), key=lambda i: (p[i], keys[i]))
    k_star = 0
    for rank, i in enumerate(order, start=1):
        if p[i] <= rank * q / m:
            k_star = rank
    accepted[order[:k_star]] = True
    return accepted


def kruskal_p_values(X: np.ndarray, labels: Sequence) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    groups = [labels == g for g in np.unique(labels)]
    out = np.ones(X.shape[1])
    for j in range(X.shape[1]):
        col = X[:, j]
        if np.all(col == col[0]):
            continue
        out[j] = float(stats.kruskal(*(col[g] for g in groups)).pvalue)
    return np.clip(np.nan_to_num(out, nan=1.0), 0.0, 1.0)


def select(X: np.ndarray, labels: Sequence, q: float = 0.05, names: Optional[Sequence[str]] = None
           ) -> SelectionResult:
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("feature selection needs at least two distinct labels")
    if X.shape[0] < 5:
        raise ValueError("feature selection needs at least 5 procedures")
    if names is None:
        names = tuple(f"f{j}" for j in range(X.shape[1]))
    p = kruskal_p_values(X, labels)
    return SelectionResult(tuple(names), p, benjamini_hochberg(p, q, names), q)


# ---------------------------------------------------------------------------
# I/O

def write_feature_matrix(fh: IO[str], procedures: Sequence[str], labels: Sequence[Optional[str]],
                         X: np.ndarray, names: Sequence[str] = FEATURE_NAMES,
                         comment: Optional[str] = None) -> None:
    if comment:
        fh.write(f"# {comment}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["procedure", "label", *names])
    for pid, lab, row in zip(procedures, labels, np.asarray(X, dtype=float)):
        w.writerow([pid, lab or "", *(repr(float(v)) for v in row)])


def read_feature_matrix(fh: IO[str]) -> tuple[list[str], list[str], np.ndarray, list[str]]:
    reader = csv.reader(line for line in fh if not line.startswith("#"))
    header = next(reader)
    if header[:2] != ["procedure", "label"]:
        raise ValueError("feature matrix must start with procedure,label columns")
    pids, labels, rows = [], [], []
    for r in reader:
        pids.append(r[0])
        labels.append(r[1])
        rows.append([float(v) for v in r[2:]])
    X = np.asarray(rows, dtype=float).reshape(len(rows), len(header) - 2)
    return pids, labels, X, header[2:]


def write_selection(fh: IO[str], result: SelectionResult, meta: Optional[dict] = None) -> None:
    obj = result.to_json()
    if meta:
        obj = {"meta": meta, **obj}
    json.dump(obj, fh, indent=1)
    fh.write("\n")
