"""Published study summaries and their likelihood-scale variances.

A :class:`StudyRecord` holds what a paper reports (point estimate, 95% CI,
sample size and optional age summaries).  :func:`prepare_study` turns it into
:class:`LikelihoodInputs`: the transformed target, its variance (or covariance
matrix for penetrance curves) and fully resolved age distributions.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dist import DEFAULT_AGE_DISTRIBUTION, AgeDistribution, logit

Z_975 = 1.959964
PROBABILITY_CLAMP = 1e-6
MIN_RETENTION = 1e-3
DEFAULT_COVARIANCE_DRAWS = 10_000_000

PENETRANCE = "Penetrance"
RR = "RR"
SIR = "SIR"
OR = "OR"
MODALITIES = (PENETRANCE, RR, SIR, OR)
SCALAR_MODALITIES = (RR, SIR, OR)

_AGE_FIELDS = ("onset_carriers", "onset_noncarriers", "onset_cases", "inclusion_controls")


class StudyFormatError(ValueError):
    """A study record is malformed; the message names the study and field."""

    def __init__(self, study_id, field_name, message):
        self.study_id = study_id
        self.field = field_name
        super().__init__(f"study {study_id!r}, field {field_name!r}: {message}")


class RetentionError(RuntimeError):
    pass


def normalize_modality(name: str) -> str:
    key = str(name).strip().lower()
    for m in MODALITIES:
        if key == m.lower():
            return m
    raise ValueError(f"unknown modality {name!r}; expected one of {MODALITIES}")


def clamp_probability(p, eps: float = PROBABILITY_CLAMP):
    return np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)


@dataclass(frozen=True)
class StudyRecord:
    id: str
    modality: str
    sample_size: int
    estimate: float | tuple[float, ...]
    ci_lower: float | tuple[float, ...]
    ci_upper: float | tuple[float, ...]
    ages: tuple[float, ...] | None = None
    onset_carriers: AgeDistribution | None = None
    onset_noncarriers: AgeDistribution | None = None
    onset_cases: AgeDistribution | None = None
    inclusion_controls: AgeDistribution | None = None
    carrier_prevalence: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "modality", normalize_modality(self.modality))
        if self.modality == PENETRANCE:
            for name in ("estimate", "ci_lower", "ci_upper", "ages"):
                val = getattr(self, name)
                if val is None:
                    raise StudyFormatError(self.id, name, "required for penetrance studies")
                object.__setattr__(self, name, tuple(float(v) for v in np.atleast_1d(val)))
        else:
            for name in ("estimate", "ci_lower", "ci_upper"):
                val = getattr(self, name)
                if val is None:
                    raise StudyFormatError(self.id, name, f"required for {self.modality} studies")
                object.__setattr__(self, name, float(val))
        self.validate()

    @property
    def is_penetrance(self) -> bool:
        return self.modality == PENETRANCE

    @property
    def m(self) -> int:
        return len(self.ages) if self.is_penetrance else 1

    def validate(self) -> None:
        if not (isinstance(self.sample_size, (int, np.integer)) and self.sample_size > 0):
            raise StudyFormatError(self.id, "n", "sample size must be a positive integer")
        if self.is_penetrance:
            ages = np.asarray(self.ages)
            est = np.asarray(self.estimate)
            lo = np.asarray(self.ci_lower)
            hi = np.asarray(self.ci_upper)
            if not (len(ages) == len(est) == len(lo) == len(hi)) or len(ages) == 0:
                raise StudyFormatError(self.id, "estimates", "ages, estimates and CI vectors must have equal non-zero length")
            if np.any(np.diff(ages) <= 0) or np.any(ages <= 0):
                raise StudyFormatError(self.id, "ages", "ages must be positive and strictly increasing")
            if np.any((est < 0) | (est > 1)) or np.any((lo < 0) | (hi > 1)):
                raise StudyFormatError(self.id, "estimates", "penetrance values must lie in [0, 1]")
            if np.any(np.diff(est) <= 0):
                raise StudyFormatError(self.id, "estimates", "penetrance must be strictly increasing in age")
            if np.any(~(lo < est)) or np.any(~(est < hi)):
                raise StudyFormatError(self.id, "ci_lower", "need ci_lower < estimate < ci_upper at every age")
        else:
            if not (0 < self.ci_lower < self.estimate < self.ci_upper) or not math.isfinite(self.ci_upper):
                raise StudyFormatError(self.id, "ci_lower", "need 0 < ci_lower < estimate < ci_upper")
        if self.carrier_prevalence is not None:
            if self.modality != SIR:
                raise StudyFormatError(self.id, "prevalence", "only meaningful for SIR studies")
            if not 0 < self.carrier_prevalence < 1:
                raise StudyFormatError(self.id, "prevalence", "carrier prevalence must lie in (0, 1)")

    def to_dict(self) -> dict:
        out: dict = {"id": self.id, "modality": self.modality, "n": int(self.sample_size)}
        if self.is_penetrance:
            out["ages"] = list(self.ages)
            out["estimates"] = list(self.estimate)
            out["ci_lower"] = list(self.ci_lower)
            out["ci_upper"] = list(self.ci_upper)
        else:
            out["estimate"] = self.estimate
            out["ci_lower"] = self.ci_lower
            out["ci_upper"] = self.ci_upper
        for name in _AGE_FIELDS:
            q = getattr(self, name)
            if q is not None:
                out[name] = q.to_dict()
        if self.carrier_prevalence is not None:
            out["prevalence"] = self.carrier_prevalence
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "StudyRecord":
        sid = d.get("id", "<missing id>")
        if "id" not in d:
            raise StudyFormatError(sid, "id", "missing")
        if "modality" not in d:
            raise StudyFormatError(sid, "modality", "missing")
        try:
            modality = normalize_modality(d["modality"])
        except ValueError as exc:
            raise StudyFormatError(sid, "modality", str(exc)) from None
        n = d.get("n", d.get("sample_size"))
        if n is None:
            raise StudyFormatError(sid, "n", "missing")
        if isinstance(n, float) and n.is_integer():
            n = int(n)
        key = "estimates" if modality == PENETRANCE else "estimate"
        estimate = d.get(key, d.get("estimate" if key == "estimates" else "estimates"))
        for name, val in ((key, estimate), ("ci_lower", d.get("ci_lower")), ("ci_upper", d.get("ci_upper"))):
            if val is None:
                raise StudyFormatError(sid, name, "missing")
        if modality == PENETRANCE and d.get("ages") is None:
            raise StudyFormatError(sid, "ages", "missing")
        ages_kw = {}
        for name in _AGE_FIELDS:
            q = d.get(name)
            if q is not None:
                try:
                    ages_kw[name] = AgeDistribution(float(q["mean"]), float(q["sd"]))
                except (KeyError, TypeError, ValueError) as exc:
                    raise StudyFormatError(sid, name, f"expected {{mean, sd}} with sd > 0 ({exc})") from None
        try:
            return cls(
                id=str(d["id"]),
                modality=modality,
                sample_size=n,
                estimate=estimate,
                ci_lower=d["ci_lower"],
                ci_upper=d["ci_upper"],
                ages=tuple(d["ages"]) if d.get("ages") is not None else None,
                carrier_prevalence=d.get("prevalence", d.get("carrier_prevalence")),
                **ages_kw,
            )
        except StudyFormatError:
            raise
        except (TypeError, ValueError) as exc:
            raise StudyFormatError(sid, key, str(exc)) from None


@dataclass(frozen=True)
class LikelihoodInputs:
    """A study ready for likelihood evaluation.

    For penetrance studies ``target`` is the logit-scale estimate vector and
    ``covariance`` the reconstructed matrix W*; for scalar modalities ``target``
    is the log estimate and ``variance`` is w*.  Age distributions are fully
    resolved: ``q1``/``q0`` for RR and SIR, ``qc1``/``qc0``/``qh1``/``qh0`` for OR.
    """

    record: StudyRecord
    target: np.ndarray | float
    variance: float | None = None
    covariance: np.ndarray | None = None
    ages: np.ndarray | None = None
    q1: AgeDistribution | None = None
    q0: AgeDistribution | None = None
    qc1: AgeDistribution | None = None
    qc0: AgeDistribution | None = None
    qh1: AgeDistribution | None = None
    qh0: AgeDistribution | None = None
    notes: tuple[str, ...] = field(default=())

    @property
    def id(self) -> str:
        return self.record.id

    @property
    def modality(self) -> str:
        return self.record.modality


def variance_from_ci(lower: float, upper: float, transform: str, study_id: str | None = None) -> float:
    """Variance on the transformed scale implied by a 95% CI.

    ``((T(upper) - T(lower)) / (2 * 1.959964))**2`` with ``T`` either ``log`` or
    ``logit``.
    """
    sid = study_id if study_id is not None else "<unnamed>"
    if not (lower < upper) or not lower > 0:
        raise StudyFormatError(sid, "ci_lower", f"need 0 < lower < upper, got ({lower}, {upper})")
    if transform == "log":
        width = math.log(upper) - math.log(lower)
    elif transform == "logit":
        if not upper < 1:
            raise StudyFormatError(sid, "ci_upper", f"logit transform needs upper < 1, got {upper}")
        width = float(logit(upper) - logit(lower))
    else:
        raise ValueError(f"unknown transform {transform!r}")
    return (width / (2.0 * Z_975)) ** 2


def nearest_psd(matrix: np.ndarray, floor: float = 0.0) -> tuple[np.ndarray, bool]:
    """Symmetrise and clip eigenvalues below ``floor``; returns (matrix, repaired)."""
    sym = 0.5 * (matrix + matrix.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() >= floor:
        return sym, False
    fixed = (vecs * np.maximum(vals, floor)) @ vecs.T
    return 0.5 * (fixed + fixed.T), True


def _logit_ci(record: StudyRecord) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    est = logit(clamp_probability(record.estimate))
    lo = clamp_probability(record.ci_lower)
    hi = clamp_probability(record.ci_upper)
    var = np.array([variance_from_ci(l, h, "logit", record.id) for l, h in zip(lo, hi)])
    return np.atleast_1d(est), var, np.asarray(record.ages, dtype=float)


def covariance_matrix_from_cis(
    record: StudyRecord,
    draws: int = DEFAULT_COVARIANCE_DRAWS,
    rng: np.random.Generator | None = None,
    chunk: int = 1_000_000,
) -> np.ndarray:
    """Reconstruct the logit-scale covariance W* of a penetrance curve.

    Diagonal entries come from the per-age CIs.  Off-diagonals are sample
    covariances of independent per-age normal draws that are kept only when
    increasing across ages.  The result is repaired to be positive definite
    if needed.
    """
    if not record.is_penetrance:
        raise ValueError(f"study {record.id!r} is not a penetrance study")
    mean, var, _ = _logit_ci(record)
    m = len(mean)
    if m == 1:
        return var.reshape(1, 1)
    if draws < 2:
        raise ValueError("need at least two draws")
    rng = np.random.default_rng() if rng is None else rng
    sd = np.sqrt(var)
    kept = 0
    s1 = np.zeros(m)
    s2 = np.zeros((m, m))
    remaining = int(draws)
    while remaining > 0:
        k = min(chunk, remaining)
        x = mean + sd * rng.standard_normal((k, m))
        x = x[np.all(np.diff(x, axis=1) > 0, axis=1)]
        kept += len(x)
        s1 += x.sum(axis=0)
        s2 += x.T @ x
        remaining -= k
    if kept < max(2, MIN_RETENTION * draws):
        raise RetentionError(
            f"study {record.id!r}: only {kept} of {draws} draws were monotone in age; "
            "the reported CIs look inconsistent with an increasing penetrance curve"
        )
    mu = s1 / kept
    cov = (s2 - kept * np.outer(mu, mu)) / (kept - 1)
    cov[np.diag_indices(m)] = var
    floor = 1e-12 * float(np.max(var))
    cov, _ = nearest_psd(cov, floor=floor)
    return cov


def resolve_age_distributions(record: StudyRecord, default: AgeDistribution = DEFAULT_AGE_DISTRIBUTION) -> StudyRecord:
    """Fill absent age summaries with ``default``.

    Controls of a case-control study inherit the case distribution when
    they are not reported.
    """
    if record.is_penetrance:
        return record
    if record.modality == OR:
        cases = record.onset_cases or default
        controls = record.inclusion_controls or record.onset_cases or default
        return replace(record, onset_cases=cases, inclusion_controls=controls)
    return replace(
        record,
        onset_carriers=record.onset_carriers or default,
        onset_noncarriers=record.onset_noncarriers or default,
    )


def prepare_study(
    record: StudyRecord,
    default_age: AgeDistribution = DEFAULT_AGE_DISTRIBUTION,
    covariance_draws: int = DEFAULT_COVARIANCE_DRAWS,
    rng: np.random.Generator | None = None,
) -> LikelihoodInputs:
    if record.is_penetrance:
        mean, _, ages = _logit_ci(record)
        cov = covariance_matrix_from_cis(record, covariance_draws, rng)
        return LikelihoodInputs(record=record, target=mean, covariance=cov, ages=ages)
    resolved = resolve_age_distributions(record, default_age)
    target = math.log(record.estimate)
    variance = variance_from_ci(record.ci_lower, record.ci_upper, "log", record.id)
    if record.modality == OR:
        return LikelihoodInputs(
            record=resolved,
            target=target,
            variance=variance,
            qc1=resolved.onset_cases,
            qc0=resolved.onset_cases,
            qh1=resolved.inclusion_controls,
            qh0=resolved.inclusion_controls,
        )
    return LikelihoodInputs(
        record=resolved,
        target=target,
        variance=variance,
        q1=resolved.onset_carriers,
        q0=resolved.onset_noncarriers,
    )


def prepare_studies(
    records: Sequence[StudyRecord],
    default_age: AgeDistribution = DEFAULT_AGE_DISTRIBUTION,
    covariance_draws: int = DEFAULT_COVARIANCE_DRAWS,
    seed=None,
) -> list[LikelihoodInputs]:
    """Prepare every record; each penetrance study gets its own child seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(len(records))
    return [
        prepare_study(r, default_age, covariance_draws, np.random.default_rng(c))
        for r, c in zip(records, children)
    ]


# --- files -----------------------------------------------------------------

def load_studies(path) -> list[StudyRecord]:
    """Read a JSON array of study objects, or a CSV of scalar-modality studies."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_csv(path)
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict) and "studies" in data:
        data = data["studies"]
    if not isinstance(data, list):
        raise StudyFormatError("<file>", "studies", "expected a JSON array of study objects")
    records = [StudyRecord.from_dict(d) for d in data]
    ids = [r.id for r in records]
    dupes = {i for i in ids if ids.count(i) > 1}
    if dupes:
        raise StudyFormatError(sorted(dupes)[0], "id", "duplicate study id")
    return records


def _load_csv(path: Path) -> list[StudyRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            row = {k.strip(): (v.strip() if isinstance(v, str) else v) for k, v in row.items() if k}
            d: dict = {
                "id": row.get("id"),
                "modality": row.get("modality"),
            }
            sid = d["id"] or "<missing id>"
            if d["modality"] and normalize_modality(d["modality"]) == PENETRANCE:
                raise StudyFormatError(sid, "modality", "penetrance studies need the JSON format")
            try:
                d["n"] = int(float(row["n"]))
                for k in ("estimate", "ci_lower", "ci_upper"):
                    d[k] = float(row[k])
            except (KeyError, TypeError, ValueError) as exc:
                raise StudyFormatError(sid, str(exc).strip("'"), "missing or non-numeric") from None
            for name in _AGE_FIELDS:
                mu, sd = row.get(f"{name}_mean"), row.get(f"{name}_sd")
                if mu and sd:
                    d[name] = {"mean": float(mu), "sd": float(sd)}
            if row.get("prevalence"):
                d["prevalence"] = float(row["prevalence"])
            records.append(StudyRecord.from_dict(d))
    return records


def dump_studies(records: Iterable[StudyRecord], path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in records], fh, indent=2)
