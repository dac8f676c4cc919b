"""Outpatient encounter data model and the synthetic corpus generator.

The generator produces a corpus with four controllable pathologies that
mirror how real outpatient coding data misbehaves:

* label frequencies follow a Zipf law, so most codes are rare;
* a "ditto" habit: with some probability an encounter copies the previous
  encounter's code set, metadata, and most of its text (copies of copies
  drift, so stale duplicates carry codes with thinning text evidence);
* a fraction of codes are "silent": they never emit text evidence, only
  deterministic medication/procedure entries (metadata-only signal);
* the department is a function of the primary code's chapter, and doctors
  belong to departments.

All randomness flows from CorpusConfig.seed; the same config yields a
bitwise-identical corpus.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

CODE_RE = re.compile(r"^[A-Z]\d{2}(\.[A-Za-z0-9]{1,4})?$")

# Probability that a chronic code is recorded as a same-chapter sibling
# instead of itself: models coder variability, which is what the level-3
# consistency check is designed to catch.
SIBLING_SWAP_PROB = 0.08

_ENCOUNTER_FIELDS = ("patient_id", "date", "dept", "doctor", "text", "codes", "meds", "procs")


def chapter(code: str) -> str:
    """First three characters: the code's chapter (e.g. 'E78' of 'E78.5')."""
    return code[:3]


@dataclass(frozen=True)
class Encounter:
    """One outpatient visit: note text, assigned codes, and metadata."""

    patient_id: str
    date: dt.date
    dept: str
    doctor: str
    text: str
    codes: frozenset[str]
    meds: tuple[str, ...] = ()
    procs: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "codes", frozenset(self.codes))
        object.__setattr__(self, "meds", tuple(self.meds))
        object.__setattr__(self, "procs", tuple(self.procs))
        if not self.codes:
            raise ValidationError(f"encounter {self.patient_id}/{self.date}: empty code set")
        for c in sorted(self.codes):
            if not CODE_RE.match(c):
                raise ValidationError(f"malformed code {c!r}")


@dataclass(frozen=True)
class LabelSpace:
    """Ordered code universe; the order fixes probability-vector indexing."""

    codes: tuple[str, ...]
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "codes", tuple(self.codes))
        if len(set(self.codes)) != len(self.codes):
            raise ValidationError("label space contains duplicate codes")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.codes)})

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, code: str) -> bool:
        return code in self._index

    def index(self, code: str) -> int:
        try:
            return self._index[code]
        except KeyError:
            raise ValidationError(f"code {code!r} not in label space") from None

    def train_count(self, code: str) -> int:
        return self.counts.get(code, 0)

    def with_train_counts(self, encounters) -> "LabelSpace":
        """Counts each document once per code (code sets are sets)."""
        counts: dict[str, int] = {}
        for enc in encounters:
            for c in enc.codes:
                if c in self._index:
                    counts[c] = counts.get(c, 0) + 1
        return LabelSpace(self.codes, counts)

    def to_json(self) -> str:
        payload = {"codes": list(self.codes), "counts": {c: self.counts[c] for c in sorted(self.counts)}}
        return json.dumps(payload, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "LabelSpace":
        payload = json.loads(text)
        return cls(tuple(payload["codes"]), dict(payload["counts"]))

    def sha256(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Split:
    train: list
    dev: list
    test: list


@dataclass(frozen=True)
class CorpusConfig:
    n_patients: int = 500
    n_codes: int = 300
    n_depts: int = 12
    n_doctors: int = 60
    tokens_per_code: int = 4
    vocab_size: int = 2000
    zipf_exponent: float = 1.1
    ditto_probability: float = 0.35
    omitted_evidence_fraction: float = 0.2
    mean_encounters_per_patient: float = 14.0
    mean_codes_per_encounter: float = 1.4
    seed: int = 42

    def __post_init__(self):
        for name in ("n_patients", "n_codes", "n_depts", "n_doctors", "tokens_per_code", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("ditto_probability", "omitted_evidence_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0,1], got {getattr(self, name)}")
        if self.zipf_exponent <= 0:
            raise ConfigError(f"zipf_exponent must be positive, got {self.zipf_exponent}")
        if self.mean_encounters_per_patient <= 0 or self.mean_codes_per_encounter < 1:
            raise ConfigError("encounter/code means out of range")
        if self.n_codes > 26 * 100:
            raise ConfigError(f"n_codes={self.n_codes} exhausts the letter+2-digit chapter namespace (max 2600)")
        if self.n_doctors < self.n_depts:
            raise ConfigError("need at least one doctor per department")


# --------------------------------------------------------------------------
# generator internals
# --------------------------------------------------------------------------


def _code_space(config: CorpusConfig) -> tuple[list[str], list[str]]:
    """Codes plus their chapters; chapters host 1-3 sibling codes each."""
    rng = np.random.default_rng([config.seed, 0])
    codes: list[str] = []
    chapters: list[str] = []
    ci = 0
    while len(codes) < config.n_codes:
        ch = f"{chr(65 + ci // 100)}{ci % 100:02d}"
        for k in range(int(rng.integers(1, 4))):
            if len(codes) == config.n_codes:
                break
            codes.append(f"{ch}.{k}")
            chapters.append(ch)
        ci += 1
    return codes, chapters


def silent_code_indices(config: CorpusConfig) -> set[int]:
    """The deterministic set of codes that emit no text evidence.

    Drawn from outside the most frequent few ranks so the corpus stays
    learnable from text alone.
    """
    head_protect = max(5, config.n_codes // 20)
    candidates = np.arange(head_protect, config.n_codes)
    want = round(config.omitted_evidence_fraction * config.n_codes)
    n_silent = min(want, candidates.size)
    if n_silent <= 0:
        return set()
    rng = np.random.default_rng([config.seed, 1])
    return set(int(i) for i in rng.choice(candidates, size=n_silent, replace=False))


def _zipf_probs(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -s
    return w / w.sum()


def _sample_code_set(rng, chronic: np.ndarray, zipf_p: np.ndarray, siblings: dict[int, list[int]], mean_codes: float) -> set[int]:
    n_draw = 1 + rng.poisson(mean_codes - 1.0)
    out: set[int] = set()
    for _ in range(int(n_draw)):
        if chronic.size and rng.random() < 0.6:
            j = int(chronic[rng.integers(0, chronic.size)])
            sibs = siblings[j]
            if sibs and rng.random() < SIBLING_SWAP_PROB:
                j = sibs[rng.integers(0, len(sibs))]
        else:
            j = int(rng.choice(zipf_p.size, p=zipf_p))
        out.add(j)
    return out


def _note_tokens(rng, code_idxs: set[int], silent: set[int], config: CorpusConfig, noise_p: np.ndarray) -> list[str]:
    toks: list[str] = []
    for j in sorted(code_idxs):
        if j in silent:
            continue
        variants = rng.integers(0, 3, size=config.tokens_per_code)
        toks.extend(f"c{j}v{int(k)}" for k in variants)
    n_noise = 2 + int(rng.poisson(3.0))
    noise_ids = rng.choice(config.vocab_size, size=n_noise, p=noise_p)
    toks.extend(f"n{int(i)}" for i in noise_ids)
    order = rng.permutation(len(toks))
    return [toks[i] for i in order]


def _ditto_text(rng, prev_text: str) -> str:
    """Copy the previous note, dropping at most 20% of its tokens."""
    toks = prev_text.split()
    budget = len(toks) // 5
    kept = []
    for tok in toks:
        if budget > 0 and rng.random() < 0.15:
            budget -= 1
            continue
        kept.append(tok)
    return " ".join(kept) if kept else prev_text


def generate_corpus(config: CorpusConfig) -> tuple[list[Encounter], LabelSpace]:
    """Seeded synthetic corpus; returns encounters plus the label space."""
    codes, code_chapters = _code_space(config)
    labels = LabelSpace(tuple(codes))
    silent = silent_code_indices(config)
    zipf_p = _zipf_probs(config.n_codes, config.zipf_exponent)
    noise_p = _zipf_probs(config.vocab_size, 1.2)

    # same-chapter siblings, for the coder-variability swap
    by_chapter: dict[str, list[int]] = {}
    for i, ch in enumerate(code_chapters):
        by_chapter.setdefault(ch, []).append(i)
    siblings = {i: [j for j in by_chapter[code_chapters[i]] if j != i] for i in range(config.n_codes)}

    distinct_chapters = sorted(set(code_chapters))
    dept_of_chapter = {ch: f"D{k % config.n_depts:02d}" for k, ch in enumerate(distinct_chapters)}
    doctors_of_dept: dict[str, list[str]] = {f"D{d:02d}": [] for d in range(config.n_depts)}
    for j in range(config.n_doctors):
        doctors_of_dept[f"D{j % config.n_depts:02d}"].append(f"DR{j:03d}")

    rng = np.random.default_rng([config.seed, 2])
    encounters: list[Encounter] = []
    for p in range(config.n_patients):
        pid = f"P{p:04d}"
        chronic_size = min(config.n_codes, 1 + int(rng.poisson(1.0)))
        chronic = rng.choice(config.n_codes, size=chronic_size, replace=False, p=zipf_p)
        date = dt.date(2018, 1, 1) + dt.timedelta(days=int(rng.integers(0, 365)))
        n_enc = max(1, int(rng.poisson(config.mean_encounters_per_patient)))
        prev: Encounter | None = None
        prev_idxs: set[int] = set()
        for _ in range(n_enc):
            if prev is not None:
                date = date + dt.timedelta(days=int(rng.integers(1, 45)))
            if prev is not None and rng.random() < config.ditto_probability:
                enc = Encounter(pid, date, prev.dept, prev.doctor, _ditto_text(rng, prev.text),
                                prev.codes, prev.meds, prev.procs)
                idxs = prev_idxs
            else:
                idxs = _sample_code_set(rng, chronic, zipf_p, siblings, config.mean_codes_per_encounter)
                for _attempt in range(50):
                    if idxs != prev_idxs:
                        break
                    idxs = _sample_code_set(rng, chronic, zipf_p, siblings, config.mean_codes_per_encounter)
                if idxs == prev_idxs:  # force a difference deterministically
                    missing = [j for j in range(config.n_codes) if j not in idxs]
                    if missing:
                        idxs = idxs | {missing[0]}
                    elif len(idxs) > 1:
                        idxs = idxs - {max(idxs)}
                primary = min(idxs)
                dept = dept_of_chapter[code_chapters[primary]]
                pool = doctors_of_dept[dept]
                doctor = pool[int(rng.integers(0, len(pool)))]
                text = " ".join(_note_tokens(rng, idxs, silent, config, noise_p))
                meds = tuple(f"M{j}" for j in sorted(idxs) if j in silent)
                procs = tuple(f"R{j}" for j in sorted(idxs) if j in silent)
                enc = Encounter(pid, date, dept, doctor, text,
                                frozenset(codes[j] for j in idxs), meds, procs)
            encounters.append(enc)
            prev, prev_idxs = enc, idxs
    return encounters, labels


def split_by_patient(corpus: list[Encounter], n_dev_patients: int, n_test_patients: int, seed: int) -> Split:
    """Assign whole patients to train/dev/test uniformly at random."""
    pids: list[str] = []
    seen = set()
    for enc in corpus:
        if enc.patient_id not in seen:
            seen.add(enc.patient_id)
            pids.append(enc.patient_id)
    if n_dev_patients < 0 or n_test_patients < 0:
        raise ValidationError("split sizes must be non-negative")
    if n_dev_patients + n_test_patients >= len(pids):
        raise ValidationError(
            f"cannot hold out {n_dev_patients}+{n_test_patients} of {len(pids)} patients"
        )
    order = np.random.default_rng(seed).permutation(len(pids))
    dev_ids = {pids[i] for i in order[:n_dev_patients]}
    test_ids = {pids[i] for i in order[n_dev_patients : n_dev_patients + n_test_patients]}
    split = Split(
        train=[e for e in corpus if e.patient_id not in dev_ids and e.patient_id not in test_ids],
        dev=[e for e in corpus if e.patient_id in dev_ids],
        test=[e for e in corpus if e.patient_id in test_ids],
    )
    return split


# --------------------------------------------------------------------------
# record file I/O: UTF-8, one JSON object per line, fixed field set
# --------------------------------------------------------------------------


def write_encounters(path, encounters: list[Encounter]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for enc in encounters:
            obj = {
                "patient_id": enc.patient_id,
                "date": enc.date.isoformat(),
                "dept": enc.dept,
                "doctor": enc.doctor,
                "text": enc.text,
                "codes": sorted(enc.codes),
                "meds": list(enc.meds),
                "procs": list(enc.procs),
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def read_encounters(path) -> list[Encounter]:
    out: list[Encounter] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{lineno}: expected an object")
            missing = [f for f in _ENCOUNTER_FIELDS if f not in obj]
            unknown = [f for f in obj if f not in _ENCOUNTER_FIELDS]
            if missing or unknown:
                raise ParseError(
                    f"{path}:{lineno}: missing fields {missing}, unknown fields {unknown}"
                )
            codes = obj["codes"]
            if not isinstance(codes, list):
                raise ParseError(f"{path}:{lineno}: codes must be a list")
            if len(set(codes)) != len(codes):
                raise ValidationError(f"{path}:{lineno}: duplicate codes in record")
            try:
                date = dt.date.fromisoformat(obj["date"])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad date {obj['date']!r}") from exc
            try:
                enc = Encounter(
                    obj["patient_id"], date, obj["dept"], obj["doctor"], obj["text"],
                    frozenset(codes), tuple(obj["meds"]), tuple(obj["procs"]),
                )
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            out.append(enc)
    return out


# --------------------------------------------------------------------------
# corpus statistics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusStats:
    n_documents: int
    n_patients: int
    n_distinct_codes: int
    mean_text_chars: float
    mean_codes_per_doc: float
    pct_codes_unseen: float | None = None

    def as_text(self) -> str:
        lines = [
            f"Documents                      {self.n_documents}",
            f"Patients                       {self.n_patients}",
            f"Distinct codes                 {self.n_distinct_codes}",
            f"Mean document length (chars)   {self.mean_text_chars:.2f}",
            f"Mean codes per document        {self.mean_codes_per_doc:.2f}",
        ]
        if self.pct_codes_unseen is not None:
            lines.append(f"Distinct % codes unseen        {self.pct_codes_unseen:.2f}")
        return "\n".join(lines) + "\n"


def corpus_stats(encounters: list[Encounter], train_reference: list[Encounter] | None = None) -> CorpusStats:
    n = len(encounters)
    distinct = set()
    for enc in encounters:
        distinct.update(enc.codes)
    mean_chars = sum(len(e.text) for e in encounters) / n if n else 0.0
    mean_codes = sum(len(e.codes) for e in encounters) / n if n else 0.0
    pct_unseen = None
    if train_reference is not None:
        train_codes = set()
        for enc in train_reference:
            train_codes.update(enc.codes)
        pct_unseen = 100.0 * len(distinct - train_codes) / len(distinct) if distinct else 0.0
    return CorpusStats(
        n_documents=n,
        n_patients=len({e.patient_id for e in encounters}),
        n_distinct_codes=len(distinct),
        mean_text_chars=mean_chars,
        mean_codes_per_doc=mean_codes,
        pct_codes_unseen=pct_unseen,
    )
