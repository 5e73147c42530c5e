"""Continual-learning loop: label, sample control items, evaluate daily, fine-tune on decay.

Day ``t`` runs four steps in order:

1. every capture is labeled by a ``Labeler`` (captures it fails on are quarantined);
2. 5% of the day is moved into the cumulative control set, the rest is kept in a
   30-day retention store;
3. the champion is scored on the day's remaining items; a fine-tune is triggered
   when today's F2 is strictly below yesterday's;
4. a triggered fine-tune trains a dense-only candidate on everything stored since
   the last stable day.  The candidate replaces the champion only if its F2 on the
   full control set beats every control F2 recorded for earlier champions (the
   very first candidate is adopted unconditionally).

Models and decisions live in a ``Registry`` directory; see ``Registry`` for the layout.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import metrics
from .byte_image import RawCapture, encode_image
from .errors import NoDataToFineTune, PcapVisionError, SingleClassError, UnknownVersion
from .model_zoo import ModelState, load_model, predict_scores, save_model
from .trainer import LabeledSet, TrainConfig, fine_tune, train_and_calibrate

log = logging.getLogger(__name__)

CONTROL_FRACTION = 0.05
RETENTION_DAYS = 30

# rng purposes, mixed into per-day seeds
_CONTROL, _FINETUNE, _SPLIT, _INTAKE, _INITIAL = range(5)


class Labeler(Protocol):
    def label(self, capture: RawCapture) -> int: ...


@dataclass
class StoredItem:
    ref: str
    label: int
    day: int
    pixels: np.ndarray = field(repr=False)


@dataclass
class DayBatch:
    day_index: int
    items: list[StoredItem]
    control_items: list[StoredItem]
    eval_items: list[StoredItem]
    quarantined: list[str] = field(default_factory=list)


@dataclass
class RetentionStore:
    window_days: int = RETENTION_DAYS
    items: list[StoredItem] = field(default_factory=list)
    last_stable_day: int = -1

    def add(self, items: Iterable[StoredItem]) -> None:
        self.items.extend(items)

    def window(self, today: int) -> list[StoredItem]:
        """Stored items that arrived after the last stable day, up to ``today``."""
        return [it for it in self.items if self.last_stable_day < it.day <= today]

    def max_age(self, today: int) -> int:
        return max((today - it.day for it in self.items), default=0)


@dataclass
class ControlSet:
    items: list[StoredItem] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def as_labeled(self) -> LabeledSet:
        return _labeled(self.items, "control")


@dataclass
class DailyRecord:
    day_index: int
    f2: float | None
    trigger_fired: bool
    champion_version: str
    n_items: int = 0
    n_control: int = 0
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    note: str = ""


@dataclass
class DailyEvalLog:
    records: list[DailyRecord] = field(default_factory=list)

    def f2_on(self, day: int) -> float | None:
        for r in reversed(self.records):
            if r.day_index == day:
                return r.f2
        return None


@dataclass(frozen=True)
class ChampionRecord:
    version_id: str
    control_f2: float | None
    adopted_on: int
    threshold: float | None
    lineage: str | None


@dataclass
class CycleOutcome:
    day_index: int
    status: str  # adopted | discarded | skipped
    candidate_version: str | None = None
    control_f2: float | None = None
    best_prior_control_f2: float | None = None
    threshold: float | None = None
    window_size: int = 0
    window_start_day: int | None = None
    reason: str = ""

    @property
    def adopted(self) -> bool:
        return self.status == "adopted"


def _labeled(items: Sequence[StoredItem], split: str) -> LabeledSet:
    if not items:
        return LabeledSet([], split)
    stack = np.stack([it.pixels for it in items])
    return LabeledSet.from_arrays(stack, [it.label for it in items], split)


def control_count(n: int, fraction: float = CONTROL_FRACTION) -> int:
    """Round-half-up share of ``n``, at least 1 for a non-empty day."""
    if n <= 0:
        return 0
    k = int(np.floor(fraction * n + 0.5))
    return min(n, max(1, k))


# -------------------------------------------------------------------- registry

class Registry:
    """File-backed model registry with a single champion tag.

    Layout under ``root``::

        versions/<version_id>/manifest.json, weights.bin
        champion          -- the current champion's version id
        registry.jsonl    -- append-only register/tag events
        metrics.jsonl     -- append-only metric records
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        (self.root / "versions").mkdir(parents=True, exist_ok=True)
        self._versions: dict[str, dict] = {}
        self._order: list[str] = []
        self._champions: list[ChampionRecord] = []
        events = self.root / "registry.jsonl"
        if events.exists():
            for line in events.read_text().splitlines():
                if line.strip():
                    self._replay(json.loads(line))

    def _replay(self, ev: dict) -> None:
        if ev["event"] == "register":
            self._versions[ev["version_id"]] = ev
            self._order.append(ev["version_id"])
        elif ev["event"] == "tag":
            info = self._versions[ev["version_id"]]
            self._champions.append(
                ChampionRecord(ev["version_id"], ev.get("control_f2"), ev["day"], info.get("threshold"), info.get("parent"))
            )

    def _append(self, name: str, record: dict) -> None:
        with open(self.root / name, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def register(self, model: ModelState, day: int, status: str = "candidate") -> str:
        vid = model.version_id
        if vid in self._versions:
            raise ValueError(f"version {vid} already registered")
        save_model(model, self.root / "versions" / vid)
        ev = {
            "event": "register",
            "version_id": vid,
            "day": day,
            "status": status,
            "threshold": model.calibrated_threshold,
            "parent": model.metadata.get("parent"),
        }
        self._append("registry.jsonl", ev)
        self._replay(ev)
        return vid

    def tag_champion(self, version_id: str, day: int = 0, control_f2: float | None = None) -> None:
        if version_id not in self._versions:
            raise UnknownVersion(version_id)
        ev = {"event": "tag", "version_id": version_id, "day": day, "control_f2": control_f2}
        self._append("registry.jsonl", ev)
        self._replay(ev)
        (self.root / "champion").write_text(version_id + "\n")

    def get_champion(self) -> ChampionRecord | None:
        return self._champions[-1] if self._champions else None

    def load(self, version_id: str) -> ModelState:
        if version_id not in self._versions:
            raise UnknownVersion(version_id)
        return load_model(self.root / "versions" / version_id)

    def list_versions(self) -> list[str]:
        return list(self._order)

    def version_info(self, version_id: str) -> dict:
        return dict(self._versions[version_id])

    def champion_history(self) -> list[ChampionRecord]:
        return list(self._champions)

    def best_control_f2(self) -> float | None:
        scores = [c.control_f2 for c in self._champions if c.control_f2 is not None]
        return max(scores) if scores else None

    def append_metric(self, record: dict) -> None:
        self._append("metrics.jsonl", record)

    def read_metrics(self) -> list[dict]:
        path = self.root / "metrics.jsonl"
        if not path.exists():
            return []
        return [json.loads(l) for l in path.read_text().splitlines() if l.strip()]


# ------------------------------------------------------------------ procedures

def ingest_day(
    captures: Sequence[RawCapture],
    labeler: Labeler,
    day: int,
    rng: np.random.Generator,
    image_shape: tuple[int, int],
    store: RetentionStore | None = None,
    control: ControlSet | None = None,
    control_fraction: float = CONTROL_FRACTION,
) -> DayBatch:
    """Label a day's captures and split off its control sample."""
    height, width = image_shape
    items, quarantined = [], []
    for cap in captures:
        try:
            y = int(labeler.label(cap))
            if y not in (0, 1):
                raise ValueError(f"labeler returned {y!r}")
        except Exception as exc:  # labeler is external: never let one capture sink the day
            log.warning("day %d: quarantined %s (%s)", day, cap.source_path, exc)
            quarantined.append(cap.source_path)
            continue
        items.append(StoredItem(cap.source_path, y, day, encode_image(cap, width, height).pixels))
    k = control_count(len(items), control_fraction)
    chosen = set(rng.choice(len(items), size=k, replace=False).tolist()) if k else set()
    control_items = [it for i, it in enumerate(items) if i in chosen]
    eval_items = [it for i, it in enumerate(items) if i not in chosen]
    if control is not None:
        control.items.extend(control_items)
    if store is not None:
        store.add(eval_items)
    return DayBatch(day, items, control_items, eval_items, quarantined)


def daily_eval(champion: ModelState, batch: DayBatch, elog: DailyEvalLog) -> tuple[float | None, bool]:
    """Score the champion on the day's eval items; trigger iff F2 fell versus yesterday."""
    if champion.calibrated_threshold is None:
        raise ValueError("champion has no calibrated threshold")
    rec = DailyRecord(batch.day_index, None, False, champion.version_id, len(batch.eval_items), len(batch.control_items))
    labels = np.array([it.label for it in batch.eval_items])
    if len(labels) and labels.min() != labels.max():
        scores = predict_scores(champion, np.stack([it.pixels for it in batch.eval_items]))
        rep = metrics.evaluate_scores(scores, labels, champion.calibrated_threshold)
        rec.f2, rec.precision, rec.recall, rec.f1 = rep.f2, rep.precision, rep.recall, rep.f1
        prev = elog.f2_on(batch.day_index - 1)
        rec.trigger_fired = prev is not None and rep.f2 < prev
    else:
        rec.note = "single-class or empty day: F2 undefined, trigger skipped"
    elog.records.append(rec)
    return rec.f2, rec.trigger_fired


def prune_retention(store: RetentionStore, today: int) -> RetentionStore:
    """Drop captures older than the retention window (control data is unaffected)."""
    store.items = [it for it in store.items if it.day >= today - store.window_days]
    return store


def _split_window(items: Sequence[StoredItem], val_fraction: float, rng: np.random.Generator):
    """Stratified train/validation split; validation gets at least one item per class when possible."""
    train_idx, val_idx = [], []
    for cls in (0, 1):
        idx = [i for i, it in enumerate(items) if it.label == cls]
        idx = [idx[j] for j in rng.permutation(len(idx))]
        k = int(np.floor(val_fraction * len(idx) + 0.5))
        if len(idx) >= 2:
            k = max(1, k)
        k = min(k, len(idx) - 1) if idx else 0
        val_idx += idx[:k]
        train_idx += idx[k:]
    return sorted(train_idx), sorted(val_idx)


@dataclass
class ContinualConfig:
    seed: int = 0
    control_fraction: float = CONTROL_FRACTION
    window_days: int = RETENTION_DAYS
    finetune_mode: str = "finetune_dense"
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=40, patience=6))
    initial: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=100, patience=16))
    val_fraction: float = 0.35
    # share of non-control captures that get labeled; unlabeled ones are not kept
    label_fraction: float = 1.0


def finetune_cycle(
    champion: ModelState,
    store: RetentionStore,
    control: ControlSet,
    registry: Registry,
    cfg: ContinualConfig,
    today: int,
) -> CycleOutcome:
    """Fine-tune on the accumulation window and adopt or discard the candidate."""
    window = store.window(today)
    start = store.last_stable_day + 1
    out = CycleOutcome(today, "skipped", window_size=len(window), window_start_day=start)
    if not window:
        out.reason = NoDataToFineTune.__name__
        return out
    rng = np.random.default_rng([cfg.seed, today, _SPLIT])
    tr_idx, va_idx = _split_window(window, cfg.val_fraction, rng)
    train_set = _labeled([window[i] for i in tr_idx], "train")
    val_set = _labeled([window[i] for i in va_idx], "validation") if va_idx else train_set
    ft_cfg = dataclasses.replace(cfg.finetune, seed=int(np.random.default_rng([cfg.seed, today, _FINETUNE]).integers(2**31)))
    try:
        candidate, threshold = fine_tune(champion, train_set, val_set, cfg.finetune_mode, ft_cfg)
    except SingleClassError as exc:
        out.reason = f"SingleClassError: {exc}"
        return out

    if len(control):
        scores = predict_scores(candidate, np.stack([it.pixels for it in control.items]))
        ctrl_f2 = metrics.evaluate_scores(scores, [it.label for it in control.items], threshold).f2
    else:
        ctrl_f2 = 0.0
    prior = registry.best_control_f2()
    out.candidate_version = candidate.version_id
    out.control_f2 = ctrl_f2
    out.best_prior_control_f2 = prior
    out.threshold = threshold
    candidate.metadata["adopted_on"] = None
    if prior is None or ctrl_f2 > prior:
        candidate.metadata["adopted_on"] = today
        registry.register(candidate, today, status="champion")
        registry.tag_champion(candidate.version_id, today, ctrl_f2)
        store.last_stable_day = today
        out.status = "adopted"
    else:
        registry.register(candidate, today, status="archived")
        out.status = "discarded"
    return out


# -------------------------------------------------------------------- scenario

@dataclass
class ScenarioResult:
    log: DailyEvalLog
    registry: Registry
    outcomes: list[CycleOutcome]
    max_retention_age: list[int]
    control_refs: set[str]
    window_refs: set[str]

    def timeline(self) -> str:
        return format_timeline(self.log, self.outcomes, self.registry)


class ContinualLearner:
    """Single-writer state machine over (store, control set, log, registry)."""

    def __init__(self, registry: Registry, labeler: Labeler, cfg: ContinualConfig | None = None):
        self.registry = registry
        self.labeler = labeler
        self.cfg = cfg or ContinualConfig()
        self.store = RetentionStore(self.cfg.window_days)
        self.control = ControlSet()
        self.log = DailyEvalLog()
        self.outcomes: list[CycleOutcome] = []
        self.max_ages: list[int] = []
        self.window_refs: set[str] = set()
        rec = registry.get_champion()
        self._champion = registry.load(rec.version_id) if rec else None

    @property
    def champion(self) -> ModelState:
        if self._champion is None:
            raise UnknownVersion("registry has no champion")
        return self._champion

    def bootstrap(self, model: ModelState, day: int = 0) -> None:
        """Register and tag the initial champion (it has no control score)."""
        self.registry.register(model, day, status="champion")
        self.registry.tag_champion(model.version_id, day, None)
        self._champion = model

    def step(self, day: int, captures: Sequence[RawCapture]) -> DailyRecord:
        cfg = self.cfg
        spec = self.champion.spec
        prune_retention(self.store, day)
        self.max_ages.append(self.store.max_age(day))
        if cfg.label_fraction < 1.0 and captures:
            keep = np.random.default_rng([cfg.seed, day, _INTAKE]).random(len(captures)) < cfg.label_fraction
            captures = [c for c, k in zip(captures, keep) if k]
        rng = np.random.default_rng([cfg.seed, day, _CONTROL])
        batch = ingest_day(
            captures, self.labeler, day, rng, (spec.input_height, spec.input_width),
            self.store, self.control, cfg.control_fraction,
        )
        f2, trigger = daily_eval(self.champion, batch, self.log)
        rec = self.log.records[-1]
        self.registry.append_metric({
            "kind": "daily_eval",
            "day_index": day,
            "f2": f2,
            "precision": rec.precision,
            "recall": rec.recall,
            "f1": rec.f1,
            "trigger": trigger,
            "champion_version": rec.champion_version,
            "n_eval": rec.n_items,
            "n_control": rec.n_control,
            "n_quarantined": len(batch.quarantined),
        })
        if trigger:
            self.window_refs.update(it.ref for it in self.store.window(day))
            outcome = finetune_cycle(self.champion, self.store, self.control, self.registry, cfg, day)
            self.outcomes.append(outcome)
            self.registry.append_metric({"kind": "finetune_cycle", **dataclasses.asdict(outcome), "adopted": outcome.adopted})
            if outcome.adopted:
                self._champion = self.registry.load(outcome.candidate_version)
                rec.note = f"adopted {outcome.candidate_version}"
        else:
            self.store.last_stable_day = day
        return rec


def train_initial_champion(scenario, cfg: ContinualConfig) -> ModelState:
    from . import synth

    p = scenario.profile
    n_tr, n_va = scenario.initial_train, scenario.initial_val
    tr = synth.generate(p, n_tr - n_tr // 2, n_tr // 2, day=0, stream=_INITIAL * 10 + 1)
    va = synth.generate(p, n_va - n_va // 2, n_va // 2, day=0, stream=_INITIAL * 10 + 2)
    icfg = dataclasses.replace(cfg.initial, seed=cfg.seed)
    model, _ = train_and_calibrate(scenario.spec, LabeledSet(tr), LabeledSet(va, "validation"), icfg)
    model.metadata["origin"] = "initial"
    return model


def run_scenario(scenario, labeler: Labeler | None, cfg: ContinualConfig, root: str | os.PathLike, initial: ModelState | None = None) -> ScenarioResult:
    """Drive the loop over a scripted synthetic intake (see ``synth.Scenario``)."""
    from . import synth

    registry = Registry(root)
    labeler = labeler or synth.MotifLabeler.for_profile(scenario.profile)
    learner = ContinualLearner(registry, labeler, cfg)
    learner.bootstrap(initial if initial is not None else train_initial_champion(scenario, cfg), 0)
    for day in range(scenario.days):
        try:
            captures = scenario.captures_for(day)
            learner.step(day, captures)
        except PcapVisionError as exc:
            log.error("day %d failed: %s", day, exc)
            champ = registry.get_champion()
            learner.log.records.append(DailyRecord(day, None, False, champ.version_id if champ else "", note=f"error: {exc}"))
            registry.append_metric({"kind": "error", "day_index": day, "error": str(exc)})
    return ScenarioResult(
        learner.log, registry, learner.outcomes, learner.max_ages,
        {it.ref for it in learner.control.items}, learner.window_refs,
    )


def format_timeline(elog: DailyEvalLog, outcomes: Sequence[CycleOutcome], registry: Registry) -> str:
    labels = {c.version_id: f"V{i + 1}" for i, c in enumerate(registry.champion_history())}
    by_day = {o.day_index: o for o in outcomes}
    lines = [f"{'day':>4}  {'n':>4}  {'F2':>6}  {'trig':>4}  {'champion':>8}  event"]
    for r in elog.records:
        f2 = f"{r.f2:.3f}" if r.f2 is not None else "  -  "
        event = ""
        o = by_day.get(r.day_index)
        if o is not None:
            if o.status == "adopted":
                event = f"{labels.get(o.candidate_version, o.candidate_version)} adopted (control F2 {o.control_f2:.3f})"
            elif o.status == "discarded":
                event = f"candidate discarded (control F2 {o.control_f2:.3f} <= {o.best_prior_control_f2:.3f})"
            else:
                event = f"fine-tune skipped: {o.reason}"
        elif r.note:
            event = r.note
        lines.append(
            f"{r.day_index:>4}  {r.n_items:>4}  {f2:>6}  {'yes' if r.trigger_fired else 'no':>4}  "
            f"{labels.get(r.champion_version, r.champion_version):>8}  {event}"
        )
    return "\n".join(lines) + "\n"
