"""Survival records, contrast pairs, synthetic cohorts, file I/O and fold splits."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BAG_MAGIC = b"MOCB"
BAG_VERSION = 1


@dataclass(frozen=True)
class SurvivalRecord:
    id: str
    time: float
    event: bool  # True = death observed

    def __post_init__(self):
        if not self.time > 0:
            raise ValueError(f"record {self.id!r}: time must be positive, got {self.time}")


@dataclass(frozen=True, order=True)
class ContrastPair:
    higher_id: str  # shorter-lived, uncensored
    lower_id: str


@dataclass
class FeatureSet:
    bag: np.ndarray   # (n_i, d_p) patch features
    gene: np.ndarray  # (d_g,)


@dataclass
class Cohort:
    records: list[SurvivalRecord]
    features: dict[str, FeatureSet]
    latent: dict[str, float] | None = field(default=None, repr=False)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate record ids in cohort")
        missing = [i for i in ids if i not in self.features]
        if missing:
            raise ValueError(f"records without features: {missing[:5]}")
        if self.features:
            dg = {f.gene.shape for f in self.features.values()}
            dp = {f.bag.shape[1] for f in self.features.values()}
            if len(dg) > 1 or len(dp) > 1:
                raise ValueError("inconsistent feature dimensions across cohort")
            if any(f.bag.shape[0] < 1 for f in self.features.values()):
                raise ValueError("empty patch bag")

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def d_p(self) -> int:
        return next(iter(self.features.values())).bag.shape[1]

    @property
    def d_g(self) -> int:
        return next(iter(self.features.values())).gene.shape[0]

    def record(self, id_: str) -> SurvivalRecord:
        return self._index()[id_]

    def _index(self) -> dict[str, SurvivalRecord]:
        idx = getattr(self, "_idx", None)
        if idx is None or len(idx) != len(self.records):
            idx = {r.id: r for r in self.records}
            self._idx = idx
        return idx

    def subset(self, ids) -> "Cohort":
        keep = set(ids)
        recs = [r for r in self.records if r.id in keep]
        feats = {r.id: self.features[r.id] for r in recs}
        lat = None if self.latent is None else {r.id: self.latent[r.id] for r in recs}
        return Cohort(recs, feats, lat)


# ---------------------------------------------------------------------------
# contrast pairs


def build_pairs(records) -> list[ContrastPair]:
    """All oriented pairs whose relative risk is determined despite censoring.

    An uncensored record pairs with every record (censored or not) observed
    strictly later than its death.  Censored-censored pairs and tied times
    never pair.  Output is sorted by (higher_id, lower_id).
    """
    if hasattr(records, "records"):
        records = records.records
    if not records:
        return []
    ids = np.array([r.id for r in records], dtype=object)
    t = np.array([r.time for r in records], dtype=np.float64)
    e = np.array([r.event for r in records], dtype=bool)
    hi, lo = np.nonzero(e[:, None] & (t[:, None] < t[None, :]))
    return sorted(ContrastPair(h, l) for h, l in zip(ids[hi], ids[lo]))


# ---------------------------------------------------------------------------
# synthetic cohorts


@dataclass
class SynthConfig:
    n: int = 400
    censor_frac: float = 0.3
    beta: float = 3.0
    noise_sigma: float = 0.1
    d_p: int = 32
    d_g: int = 32
    bag_mean: float = 8.0
    seed: int = 1

    def __post_init__(self):
        if self.n < 4:
            raise ValueError("n must be at least 4")
        if not 0.0 <= self.censor_frac < 1.0:
            raise ValueError("censor_frac must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.d_p < 1 or self.d_g < 1 or self.bag_mean < 0:
            raise ValueError("feature dimensions must be positive")


# log-hazard is beta per standard deviation of the Uniform(0,1) latent
_LATENT_SD = 1.0 / np.sqrt(12.0)


def generate_synthetic(cfg: SynthConfig) -> Cohort:
    """Cohort whose hazard and features are driven by one latent risk u ~ U(0, 1).

    Event times are exponential with log-rate ``beta * (u - 0.5) / sd(u)``;
    a random ``censor_frac`` share of samples is censored at a uniform fraction
    of its event time.  Gene vectors and patch features are fixed random
    linear maps of u plus Gaussian noise.  The latent u is kept in
    ``Cohort.latent`` for oracle scoring only.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n
    u = rng.uniform(0.0, 1.0, size=n)
    rate = np.exp(cfg.beta * (u - 0.5) / _LATENT_SD)
    times = rng.exponential(1.0 / rate)
    events = np.ones(n, dtype=bool)
    n_cens = int(round(cfg.censor_frac * n))
    cens = rng.permutation(n)[:n_cens]
    events[cens] = False
    shrink = rng.uniform(0.0, 1.0, size=n_cens)
    times[cens] *= np.maximum(shrink, 1e-12)
    times = np.maximum(times, np.finfo(float).tiny)

    gene_slope = rng.normal(size=cfg.d_g)
    gene_icpt = rng.normal(size=cfg.d_g)
    patch_slope = rng.normal(size=cfg.d_p)
    patch_icpt = rng.normal(size=cfg.d_p)
    bag_sizes = rng.poisson(cfg.bag_mean, size=n) + 1

    width = len(str(n - 1))
    records, features, latent = [], {}, {}
    for i in range(n):
        pid = f"s{i:0{width}d}"
        gene = gene_slope * u[i] + gene_icpt + cfg.noise_sigma * rng.normal(size=cfg.d_g)
        bag = patch_slope * u[i] + patch_icpt + cfg.noise_sigma * rng.normal(size=(bag_sizes[i], cfg.d_p))
        records.append(SurvivalRecord(pid, float(times[i]), bool(events[i])))
        features[pid] = FeatureSet(bag.astype(np.float32).astype(np.float64), gene)
        latent[pid] = float(u[i])
    return Cohort(records, features, latent)


# ---------------------------------------------------------------------------
# folds


def kfold_split(ids, k: int, seed: int) -> list[tuple[list[str], list[str]]]:
    """Shuffle ids and cut them into k folds; the first ``n % k`` folds get one extra."""
    if hasattr(ids, "records"):
        ids = ids.ids
    ids = list(ids)
    n = len(ids)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"k={k} exceeds number of samples n={n}")
    order = np.random.default_rng(seed).permutation(n)
    sizes = [n // k + (1 if f < n % k else 0) for f in range(k)]
    out, pos = [], 0
    for size in sizes:
        val_idx = set(order[pos:pos + size].tolist())
        pos += size
        val = [ids[i] for i in sorted(val_idx)]
        train = [ids[i] for i in range(n) if i not in val_idx]
        out.append((train, val))
    return out


# ---------------------------------------------------------------------------
# file formats


class CohortLoadError(Exception):
    """Manifest validation failure; ``problems`` lists (row, message) pairs."""

    def __init__(self, problems: list[tuple[int, str]]):
        self.problems = problems
        lines = [f"row {r}: {m}" if r else m for r, m in problems]
        super().__init__("; ".join(lines))


def write_bag(path, bag: np.ndarray) -> None:
    bag = np.asarray(bag, dtype="<f4")
    n, d = bag.shape
    with open(path, "wb") as fh:
        fh.write(BAG_MAGIC + struct.pack("<III", BAG_VERSION, n, d))
        fh.write(np.ascontiguousarray(bag).tobytes())


def read_bag(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != BAG_MAGIC:
        raise ValueError(f"{path}: bad magic")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != BAG_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if n < 1 or d < 1:
        raise ValueError(f"{path}: empty bag")
    if len(raw) != 16 + 4 * n * d:
        raise ValueError(f"{path}: expected {n}x{d} floats, file size {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(n, d).astype(np.float64)


def write_gene(path, gene: np.ndarray) -> None:
    with open(path, "w") as fh:
        for v in np.asarray(gene, dtype=np.float64):
            fh.write(f"{float(v)!r}\n")


def read_gene(path) -> np.ndarray:
    with open(path) as fh:
        vals = [float(line) for line in fh if line.strip()]
    if not vals:
        raise ValueError(f"{path}: empty gene file")
    return np.array(vals, dtype=np.float64)


MANIFEST_HEADER = ["id", "time", "event", "gene_path", "bag_path"]


def save_cohort(cohort: Cohort, out_dir) -> Path:
    """Write manifest, gene/bag files and (if present) the latent sidecar."""
    out = Path(out_dir)
    (out / "genes").mkdir(parents=True, exist_ok=True)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in cohort.records:
            gp, bp = f"genes/{r.id}.txt", f"bags/{r.id}.bin"
            write_gene(out / gp, cohort.features[r.id].gene)
            write_bag(out / bp, cohort.features[r.id].bag)
            w.writerow([r.id, repr(r.time), int(r.event), gp, bp])
    if cohort.latent is not None:
        with open(out / "latent.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "latent_u"])
            for r in cohort.records:
                w.writerow([r.id, repr(cohort.latent[r.id])])
    return manifest


def load_latent(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row["id"]: float(row["latent_u"]) for row in csv.DictReader(fh)}


def load_cohort(manifest_path) -> Cohort:
    """Read a manifest and its feature files; paths resolve relative to the manifest."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    problems: list[tuple[int, str]] = []
    try:
        fh = open(manifest_path, newline="")
    except OSError as exc:
        raise CohortLoadError([(0, f"cannot open manifest {manifest_path}: {exc.strerror}")]) from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != MANIFEST_HEADER:
            raise CohortLoadError([(0, f"manifest header must be {','.join(MANIFEST_HEADER)}")])
        rows = list(reader)

    records, features, seen = [], {}, set()
    for rowno, row in enumerate(rows, start=2):  # header is line 1
        pid = (row["id"] or "").strip()
        if not pid:
            problems.append((rowno, "empty id"))
            continue
        if pid in seen:
            problems.append((rowno, f"duplicate id {pid!r}"))
            continue
        seen.add(pid)
        try:
            time = float(row["time"])
        except (TypeError, ValueError):
            problems.append((rowno, f"id {pid!r}: unparsable time {row['time']!r}"))
            continue
        if not (np.isfinite(time) and time > 0):
            problems.append((rowno, f"id {pid!r}: time must be positive, got {row['time']}"))
            continue
        ev = (row["event"] or "").strip()
        if ev not in ("0", "1"):
            problems.append((rowno, f"id {pid!r}: event must be 0 or 1, got {ev!r}"))
            continue
        gpath, bpath = base / row["gene_path"].strip(), base / row["bag_path"].strip()
        bad = False
        for p in (gpath, bpath):
            if not p.is_file():
                problems.append((rowno, f"id {pid!r}: missing feature file {p}"))
                bad = True
        if bad:
            continue
        try:
            feats = FeatureSet(read_bag(bpath), read_gene(gpath))
        except (ValueError, OSError) as exc:
            problems.append((rowno, f"id {pid!r}: {exc}"))
            continue
        records.append(SurvivalRecord(pid, time, ev == "1"))
        features[pid] = feats

    if not problems and records:
        dg = {features[r.id].gene.shape[0] for r in records}
        dp = {features[r.id].bag.shape[1] for r in records}
        if len(dg) > 1:
            problems.append((0, f"gene vectors have differing lengths {sorted(dg)}"))
        if len(dp) > 1:
            problems.append((0, f"patch features have differing widths {sorted(dp)}"))
    if not records and not problems:
        problems.append((0, "manifest has no rows"))
    if problems:
        raise CohortLoadError(problems)

    latent = None
    if (base / "latent.csv").is_file():
        lat = load_latent(base / "latent.csv")
        if all(r.id in lat for r in records):
            latent = {r.id: lat[r.id] for r in records}
    return Cohort(records, features, latent)
