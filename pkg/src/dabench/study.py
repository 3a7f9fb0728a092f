"""Experiment manifests, the run ledger and the end-to-end study driver.

Experiment manifest (JSON, ``schema_version`` 1)::

    {
      "schema_version": 1,
      "dataset": "bench/manifest.json",      # dataset manifest, relative to this file
      "domains": ["A", "B", "C"],            # default: every dataset domain
      "model": "desk",                       # named ModelSpec or a ModelSpec dict
      "profile": "desk",                     # "desk" | "paper"
      "overrides": {"source": {}, "finetune": {}},
      "strategies": ["all_layers", "first_layers", "last_layers"],
      "levels": ["3 scans", "1 scan", "1/2", ...],
      "seeds": [0, 1],                       # fine-tuning seeds, required
      "study_seed": 0,                       # source training, folds, splits
      "folds": 3,
      "adapt_scans": 3,                      # target scans reserved for adaptation
      "tolerance_mm": 1.0,
      "output_dir": "out"                    # relative to this file
    }

Output tree under ``output_dir``::

    manifest.resolved.json      validated manifest with defaults
    ledger.jsonl                run ledger (one JSON object per executed step)
    splits/<domain>.json        adaptation/test split and oracle folds
    checkpoints/source_<S>.ckpt, history/source_<S>.csv
    records/oracle_<T>.jsonl, records/baseline_<S>_<T>.jsonl
    finetune/<S>_<T>/<strategy>/<level>/seed<k>/{model.ckpt, model.ckpt.provenance.json,
                                                 history.csv, records.jsonl}
    records.jsonl               the study's record store (all records, canonical order)
    report/                     CSV tables and figures

Ledger entries: ``{"schema_version", "step", "kind", "inputs_hash",
"outputs": {relpath: sha256}, "status", "seed", "wall_clock_s", "error"}``.
A step whose latest ``ok`` entry has the same inputs hash and whose
outputs still hash to the recorded values is skipped on rerun.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from .adaptation import STRATEGIES, AvailabilityLevel, finetune
from .data import Dataset, load_dataset, slice_pool
from .evaluation import (
    RecordStore,
    aggregate_trend,
    build_transfer_matrix,
    cross_validate_oracle,
    emit_report,
    score_cases,
    split_target_cases,
    winner_counts,
)
from .evaluation.protocol import fold_assignment
from .models import ModelSpec, build_model, checkpoint_hash, load_checkpoint, save_checkpoint
from .training import TrainConfig, profile_config, train

__all__ = [
    "SCHEMA_VERSION",
    "MODEL_SPECS",
    "ManifestError",
    "ExperimentManifest",
    "validate_manifest",
    "RunLedger",
    "Study",
    "run_full_study",
    "report_from_records",
    "StepOutcome",
]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

MODEL_SPECS = {
    "residual_unet": ModelSpec(),
    "vanilla_unet": ModelSpec(variant="vanilla_unet"),
    "desk": ModelSpec(depth=3, base_filters=8),
    "vanilla_desk": ModelSpec(variant="vanilla_unet", depth=3, base_filters=8),
}

STANDARD_LEVELS = ("3 scans", "1 scan", "1/2", "1/3", "1/6", "1/12", "1/24", "1/36", "1/48")


class ManifestError(ValueError):
    """Schema violation in an experiment manifest."""

    def __init__(self, field_name: str, constraint: str):
        super().__init__(f"manifest field {field_name!r}: {constraint}")
        self.field = field_name
        self.constraint = constraint


@dataclass
class ExperimentManifest:
    path: Path
    dataset_path: Path
    domains: list[str]
    model: ModelSpec
    model_name: str
    profile: str
    source_config: TrainConfig
    finetune_config: TrainConfig
    strategies: list[str]
    levels: list[AvailabilityLevel]
    seeds: list[int]
    output_dir: Path
    study_seed: int = 0
    folds: int = 3
    adapt_scans: int = 3
    tolerance_mm: float = 1.0
    overrides: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset": str(self.dataset_path),
            "domains": self.domains,
            "model": self.model_name,
            "model_spec": asdict(self.model),
            "profile": self.profile,
            "overrides": self.overrides,
            "source_config": self.source_config.to_dict(),
            "finetune_config": self.finetune_config.to_dict(),
            "strategies": self.strategies,
            "levels": [lv.label for lv in self.levels],
            "seeds": self.seeds,
            "study_seed": self.study_seed,
            "folds": self.folds,
            "adapt_scans": self.adapt_scans,
            "tolerance_mm": self.tolerance_mm,
            "output_dir": str(self.output_dir),
        }


_KNOWN_FIELDS = {
    "schema_version", "dataset", "domains", "model", "profile", "overrides", "strategies",
    "levels", "seeds", "study_seed", "folds", "adapt_scans", "tolerance_mm", "output_dir",
}


def _require(cond: bool, field_name: str, constraint: str) -> None:
    if not cond:
        raise ManifestError(field_name, constraint)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def validate_manifest(path, *, profile: str | None = None, output_dir=None, seeds=None) -> ExperimentManifest:
    """Parse and check an experiment manifest, filling defaults.

    Keyword arguments override the corresponding manifest fields (used by
    the CLI's global flags).
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError("<root>", f"invalid JSON ({exc})") from None
    _require(isinstance(doc, dict), "<root>", "must be a JSON object")
    unknown = sorted(set(doc) - _KNOWN_FIELDS)
    _require(not unknown, unknown[0] if unknown else "", "unknown field")
    _require(doc.get("schema_version", SCHEMA_VERSION) == SCHEMA_VERSION, "schema_version",
             f"must be {SCHEMA_VERSION}")
    root = path.parent

    _require("dataset" in doc, "dataset", "required")
    dataset_path = (root / doc["dataset"]).resolve()
    if not dataset_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {dataset_path}")
    dataset = load_dataset(dataset_path)

    domains = doc.get("domains", list(dataset.domains))
    _require(isinstance(domains, list) and all(isinstance(d, str) for d in domains), "domains",
             "must be a list of domain names")
    _require(len(domains) >= 2, "domains", "at least 2 domains")
    _require(len(set(domains)) == len(domains), "domains", "names must be unique")
    for d in domains:
        _require(d in dataset.domains, "domains", f"unknown domain {d!r}")

    model_field = doc.get("model", "residual_unet")
    if isinstance(model_field, str):
        _require(model_field in MODEL_SPECS, "model", f"one of {sorted(MODEL_SPECS)}")
        model, model_name = MODEL_SPECS[model_field], model_field
    elif isinstance(model_field, dict):
        try:
            model = ModelSpec.from_dict(model_field)
        except (TypeError, ValueError) as exc:
            raise ManifestError("model", str(exc)) from None
        model_name = "custom"
    else:
        raise ManifestError("model", "must be a spec name or a ModelSpec object")

    profile = profile or doc.get("profile", "desk")
    _require(profile in ("desk", "paper"), "profile", "one of ['desk', 'paper']")
    overrides = doc.get("overrides", {})
    _require(isinstance(overrides, dict) and set(overrides) <= {"source", "finetune"}, "overrides",
             "object with optional 'source' and 'finetune' entries")
    configs = {}
    for phase in ("source", "finetune"):
        try:
            configs[phase] = profile_config(profile, phase, **overrides.get(phase, {}))
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"overrides.{phase}", str(exc)) from None

    strategies = doc.get("strategies", list(STRATEGIES))
    _require(isinstance(strategies, list) and strategies, "strategies", "non-empty list")
    for s in strategies:
        _require(s in STRATEGIES, "strategies", f"{s!r} is not one of {list(STRATEGIES)}")

    raw_levels = doc.get("levels", list(STANDARD_LEVELS))
    _require(isinstance(raw_levels, list) and raw_levels, "levels", "non-empty list")
    try:
        levels = [AvailabilityLevel.parse(lv) for lv in raw_levels]
    except ValueError as exc:
        raise ManifestError("levels", str(exc)) from None
    _require(len({lv.label for lv in levels}) == len(levels), "levels", "must be unique")

    seeds = seeds if seeds is not None else doc.get("seeds")
    _require(isinstance(seeds, list) and len(seeds) > 0, "seeds", "seeds nonempty")
    _require(all(_is_int(s) for s in seeds), "seeds", "integers")
    _require(len(set(seeds)) == len(seeds), "seeds", "must be unique")

    folds = doc.get("folds", 3)
    _require(_is_int(folds) and folds >= 2, "folds", "integer >= 2")
    max_scans = max((lv.scans for lv in levels if lv.kind == "scans"), default=1)
    adapt_scans = doc.get("adapt_scans", max(3, max_scans))
    _require(_is_int(adapt_scans) and adapt_scans >= max_scans, "adapt_scans",
             f"integer >= {max_scans} (largest scans level)")
    for d in domains:
        n = len(dataset.domain_cases(d))
        _require(n >= folds, "folds", f"domain {d!r} has {n} cases, fewer than {folds} folds")
        _require(n > adapt_scans, "adapt_scans", f"domain {d!r} has {n} cases; needs more than {adapt_scans}")
    study_seed = doc.get("study_seed", 0)
    _require(_is_int(study_seed), "study_seed", "integer")
    tol = doc.get("tolerance_mm", 1.0)
    _require(isinstance(tol, (int, float)) and tol >= 0, "tolerance_mm", "number >= 0")

    out = output_dir if output_dir is not None else doc.get("output_dir", "out")
    output_dir = (root / out).resolve() if not Path(out).is_absolute() else Path(out)

    return ExperimentManifest(
        path=path.resolve(),
        dataset_path=dataset_path,
        domains=list(domains),
        model=model,
        model_name=model_name,
        profile=profile,
        source_config=configs["source"],
        finetune_config=configs["finetune"],
        strategies=list(strategies),
        levels=levels,
        seeds=[int(s) for s in seeds],
        output_dir=output_dir,
        study_seed=int(study_seed),
        folds=int(folds),
        adapt_scans=int(adapt_scans),
        tolerance_mm=float(tol),
        overrides=overrides,
    )


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


class RunLedger:
    """Append-only JSON-lines log of executed study steps."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.path = self.root / "ledger.jsonl"

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]

    def latest(self) -> dict[str, dict]:
        out = {}
        for entry in self.entries():
            out[entry["step"]] = entry
        return out

    def append(self, entry: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def is_current(self, step: str, inputs_hash: str) -> bool:
        entry = self.latest().get(step)
        if not entry or entry["status"] != "ok" or entry["inputs_hash"] != inputs_hash:
            return False
        for rel, digest in entry["outputs"].items():
            p = self.root / rel
            if not p.exists() or _sha256(p) != digest:
                return False
        return True

    def outputs_of(self, step: str) -> dict:
        entry = self.latest().get(step)
        return entry["outputs"] if entry else {}


@dataclass
class StepOutcome:
    step: str
    status: str  # "ok", "skipped", "failed", "blocked"
    error: str | None = None


class Study:
    """Runs the study steps of one manifest, resuming via the ledger."""

    def __init__(self, manifest: ExperimentManifest, threads: int = 1):
        self.m = manifest
        self.root = manifest.output_dir
        self.ledger = RunLedger(self.root)
        self.dataset: Dataset = load_dataset(manifest.dataset_path)
        self.threads = int(threads)
        self.outcomes: list[StepOutcome] = []
        self._case_hashes: dict = {}

    # ---- helpers -------------------------------------------------------
    def rel(self, p: Path) -> str:
        return Path(p).relative_to(self.root).as_posix()

    def case_hash(self, case) -> str:
        if case.id not in self._case_hashes:
            self._case_hashes[case.id] = _hash_json(
                [_sha256(case.volume_path), _sha256(case.mask_path),
                 _sha256(case.volume_path.with_suffix(".raw")), _sha256(case.mask_path.with_suffix(".raw"))]
            )
        return self._case_hashes[case.id]

    def cases_hash(self, cases) -> list[str]:
        return [f"{c.id}:{self.case_hash(c)}" for c in cases]

    def split(self, domain: str):
        return split_target_cases(self.dataset.domain_cases(domain), self.m.adapt_scans, self.m.study_seed)

    def _run(self, step: str, kind: str, inputs: dict, seed: int, fn) -> StepOutcome:
        inputs_hash = _hash_json({"kind": kind, **inputs})
        if self.ledger.is_current(step, inputs_hash):
            log.info("skip %s (up to date)", step)
            outcome = StepOutcome(step, "skipped")
            self.outcomes.append(outcome)
            return outcome
        started = time.perf_counter()
        entry = {"schema_version": SCHEMA_VERSION, "step": step, "kind": kind, "inputs_hash": inputs_hash,
                 "seed": seed, "outputs": {}, "status": "ok", "error": None}
        try:
            outputs = fn()
            entry["outputs"] = {self.rel(p): _sha256(p) for p in sorted(outputs)}
        except Exception as exc:  # noqa: BLE001 - recorded in the ledger, branch halts
            log.exception("step %s failed", step)
            entry["status"] = "failed"
            entry["error"] = f"{type(exc).__name__}: {exc}"
        entry["wall_clock_s"] = round(time.perf_counter() - started, 3)
        self.ledger.append(entry)
        outcome = StepOutcome(step, entry["status"], entry["error"])
        self.outcomes.append(outcome)
        return outcome

    def _blocked(self, step: str, reason: str) -> StepOutcome:
        outcome = StepOutcome(step, "blocked", reason)
        self.outcomes.append(outcome)
        return outcome

    def _write_records(self, path: Path, records) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(r.to_json() + "\n" for r in records))
        return path

    # ---- steps ---------------------------------------------------------
    def prepare(self) -> StepOutcome:
        def fn():
            self.root.mkdir(parents=True, exist_ok=True)
            out = [self.root / "manifest.resolved.json"]
            out[0].write_text(json.dumps(self.m.to_json(), indent=2, sort_keys=True) + "\n")
            for d in self.m.domains:
                adapt, test = self.split(d)
                folds = fold_assignment(sorted(c.id for c in self.dataset.domain_cases(d)),
                                        self.m.folds, self.m.study_seed)
                p = self.root / "splits" / f"{d}.json"
                p.parent.mkdir(parents=True, exist_ok=True)
                p.write_text(json.dumps({"adapt": [c.id for c in adapt], "test": [c.id for c in test],
                                         "oracle_folds": folds}, indent=2) + "\n")
                out.append(p)
            return out

        return self._run("prepare", "prepare", {"manifest": self.m.to_json()}, self.m.study_seed, fn)

    def source_paths(self, domain: str) -> tuple[Path, Path]:
        return (self.root / "checkpoints" / f"source_{domain}.ckpt",
                self.root / "history" / f"source_{domain}.csv")

    def train_source(self, domain: str) -> StepOutcome:
        cases = self.dataset.domain_cases(domain)
        cfg = replace(self.m.source_config, seed=self.m.study_seed)
        ckpt, hist = self.source_paths(domain)

        def fn():
            model = build_model(self.m.model, seed=cfg.seed)
            model, history = train(model, slice_pool(cases), cfg)
            save_checkpoint(model, ckpt, extra={"domain": domain, "phase": "source"})
            history.write_csv(hist)
            return [ckpt, hist]

        inputs = {"domain": domain, "cases": self.cases_hash(cases), "config": cfg.to_dict(),
                  "model": asdict(self.m.model)}
        return self._run(f"source/{domain}", "train-source", inputs, cfg.seed, fn)

    def oracle(self, domain: str) -> StepOutcome:
        cases = self.dataset.domain_cases(domain)
        cfg = replace(self.m.source_config, seed=self.m.study_seed)
        out = self.root / "records" / f"oracle_{domain}.jsonl"

        def fn():
            records, _ = cross_validate_oracle(cases, self.m.model, cfg, self.m.folds,
                                               tolerance_mm=self.m.tolerance_mm)
            return [self._write_records(out, records)]

        inputs = {"domain": domain, "cases": self.cases_hash(cases), "config": cfg.to_dict(),
                  "model": asdict(self.m.model), "folds": self.m.folds, "tol": self.m.tolerance_mm}
        return self._run(f"oracle/{domain}", "oracle", inputs, cfg.seed, fn)

    def baseline(self, source: str, target: str) -> StepOutcome:
        step = f"baseline/{source}_{target}"
        ckpt, _ = self.source_paths(source)
        if not ckpt.exists():
            return self._blocked(step, f"missing source checkpoint for domain {source}")
        _, test = self.split(target)
        out = self.root / "records" / f"baseline_{source}_{target}.jsonl"

        def fn():
            model, _ = load_checkpoint(ckpt)
            records = score_cases(model, test, source_domain=source, target_domain=target,
                                  method="baseline", seed=self.m.study_seed, tolerance_mm=self.m.tolerance_mm)
            return [self._write_records(out, records)]

        inputs = {"checkpoint": checkpoint_hash(ckpt), "test": self.cases_hash(test), "tol": self.m.tolerance_mm}
        return self._run(step, "transfer", inputs, self.m.study_seed, fn)

    def finetune_dir(self, source, target, strategy, level: AvailabilityLevel, seed) -> Path:
        level_dir = level.label.replace("/", "_").replace(" ", "_")
        return self.root / "finetune" / f"{source}_{target}" / strategy / level_dir / f"seed{seed}"

    def finetune(self, source, target, strategy, level: AvailabilityLevel, seed: int) -> StepOutcome:
        d = self.finetune_dir(source, target, strategy, level, seed)
        step = self.rel(d)
        ckpt, _ = self.source_paths(source)
        if not ckpt.exists():
            return self._blocked(step, f"missing source checkpoint for domain {source}")
        adapt, test = self.split(target)
        cfg = replace(self.m.finetune_config, seed=seed)

        def fn():
            model_path = d / "model.ckpt"
            result = finetune(ckpt, adapt, strategy, level, cfg, source_domain=source,
                              target_domain=target, out_path=model_path)
            hist = result.history.write_csv(d / "history.csv")
            records = score_cases(result.model, test, source_domain=source, target_domain=target,
                                  method=strategy, availability=level.label, seed=seed,
                                  tolerance_mm=self.m.tolerance_mm)
            rec = self._write_records(d / "records.jsonl", records)
            return [model_path, model_path.with_name(model_path.name + ".provenance.json"), hist, rec]

        inputs = {"checkpoint": checkpoint_hash(ckpt), "adapt": self.cases_hash(adapt),
                  "test": self.cases_hash(test), "strategy": strategy, "level": level.to_json(),
                  "config": cfg.to_dict(), "tol": self.m.tolerance_mm}
        return self._run(step, "finetune", inputs, seed, fn)

    def record_parts(self) -> list[Path]:
        parts = [self.root / "records" / f"oracle_{d}.jsonl" for d in self.m.domains]
        pairs = [(s, t) for s in self.m.domains for t in self.m.domains if s != t]
        parts += [self.root / "records" / f"baseline_{s}_{t}.jsonl" for s, t in pairs]
        for s, t in pairs:
            for strategy in self.m.strategies:
                for level in self.m.levels:
                    for seed in self.m.seeds:
                        parts.append(self.finetune_dir(s, t, strategy, level, seed) / "records.jsonl")
        return parts

    def report(self) -> StepOutcome:
        parts = self.record_parts()
        missing = [self.rel(p) for p in parts if not p.exists()]
        if missing:
            return self._blocked("report", f"missing record files: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        store_path = self.root / "records.jsonl"

        def fn():
            records = []
            for p in parts:
                records += RecordStore(p).read()
            if store_path.exists():
                store_path.unlink()
            RecordStore(store_path).extend(records)
            return [store_path] + report_from_records(records, self.m.domains, self.m.levels,
                                                      self.m.strategies, self.root / "report")

        inputs = {"parts": [_sha256(p) for p in parts], "domains": self.m.domains,
                  "levels": [lv.label for lv in self.m.levels], "strategies": self.m.strategies}
        return self._run("report", "report", inputs, self.m.study_seed, fn)

    # ---- drivers -------------------------------------------------------
    def run(self, stages=("source", "oracle", "transfer", "finetune", "report"), filters=None) -> list[StepOutcome]:
        filters = filters or {}
        torch.set_num_threads(max(1, self.threads))
        self.prepare()
        doms = self.m.domains
        sources = [d for d in doms if filters.get("source") in (None, d)]
        targets = [d for d in doms if filters.get("target") in (None, d)]
        if "source" in stages:
            for d in sources:
                self.train_source(d)
        if "oracle" in stages:
            for d in targets:
                self.oracle(d)
        if "transfer" in stages:
            for s in sources:
                for t in targets:
                    if s != t:
                        self.baseline(s, t)
        if "finetune" in stages:
            for s in sources:
                for t in targets:
                    if s == t:
                        continue
                    for strategy in self.m.strategies:
                        if filters.get("strategy") not in (None, strategy):
                            continue
                        for level in self.m.levels:
                            for seed in self.m.seeds:
                                self.finetune(s, t, strategy, level, seed)
        if "report" in stages:
            self.report()
        return self.outcomes


def report_from_records(records, domains, levels, strategies, out_dir) -> list[Path]:
    """Transfer matrix, trends and winner counts from a record list, written as a report."""
    matrix = build_transfer_matrix(records, domains)
    pairs = [(s, t) for s in domains for t in domains if s != t]
    trends = aggregate_trend(records, levels, strategies, pairs)
    winners = winner_counts(records, levels, strategies, pairs)
    return emit_report(matrix, trends, winners, out_dir)


def run_full_study(manifest: ExperimentManifest | str | Path, threads: int = 1) -> list[StepOutcome]:
    """Execute every study step (resuming completed ones) and return the outcomes."""
    if not isinstance(manifest, ExperimentManifest):
        manifest = validate_manifest(manifest)
    return Study(manifest, threads=threads).run()

