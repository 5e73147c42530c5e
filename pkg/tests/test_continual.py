import dataclasses

import numpy as np
import pytest

from pcapvision import continual, metrics, synth
from pcapvision.byte_image import RawCapture
from pcapvision.continual import (
    ContinualConfig,
    ControlSet,
    DailyEvalLog,
    DailyRecord,
    DayBatch,
    Registry,
    RetentionStore,
    StoredItem,
    control_count,
    daily_eval,
    finetune_cycle,
    ingest_day,
    prune_retention,
)
from pcapvision.errors import FormatError, SingleClassError, UnknownVersion
from pcapvision.model_zoo import (
    ArchitectureSpec, Conv, Dense, Dropout, Elu, Flatten, MaxPool, Pad, Sigmoid, init_params,
)
from pcapvision.trainer import TrainConfig

from invariants import (
    adopted_scores, discarded_never_champion, strictly_increasing, tree_bytes, trigger_violations,
)

MINI = ArchitectureSpec(
    "mini", 32, 32,
    (Pad(2, "reflect"), Dropout(0.2), Conv(2, 8, 8, 4, 4), Elu(), MaxPool(2, 2), Flatten(),
     Dense(8), Elu(), Dropout(0.1), Dense(1), Sigmoid()),
)


def mini_model(seed=0, threshold=0.5, vid="mbase0000"):
    m = init_params(MINI, np.random.default_rng(seed))
    m.calibrated_threshold = threshold
    m.version_id = vid
    return m


class ByteLabeler:
    def label(self, cap):
        return int(cap.bytes[:1] == b"\x01")


def caps(n, seed=0, pos_every=2):
    r = np.random.default_rng(seed)
    out = []
    for i in range(n):
        body = bytearray(r.integers(0, 255, 200, dtype=np.uint8).tobytes())
        body[0] = 1 if i % pos_every == 0 else 2
        out.append(RawCapture(bytes(body), f"c{seed}-{i}"))
    return out


def item(day, ref="x", label=0):
    return StoredItem(ref, label, day, np.zeros((32, 32), np.uint8))


# ---- P2: control sampling

@pytest.mark.parametrize("n,k", [(100, 5), (95, 5), (10, 1), (1, 1), (0, 0), (50, 3), (29, 1), (30, 2)])
def test_control_count(n, k):
    assert control_count(n) == k


def test_ingest_splits_and_updates():
    store, control = RetentionStore(), ControlSet()
    batch = ingest_day(caps(100), ByteLabeler(), 4, np.random.default_rng(0), (32, 32), store, control)
    assert len(batch.control_items) == 5 and len(batch.eval_items) == 95
    assert len(control) == 5 and len(store.items) == 95
    assert {i.ref for i in batch.control_items}.isdisjoint({i.ref for i in batch.eval_items})
    assert all(i.day == 4 for i in store.items)
    assert sum(i.label for i in batch.items) == 50


def test_ingest_ten_gives_one_control():
    batch = ingest_day(caps(10), ByteLabeler(), 0, np.random.default_rng(0), (32, 32))
    assert len(batch.control_items) == 1


def test_ingest_seeded_selection():
    a = ingest_day(caps(40), ByteLabeler(), 0, np.random.default_rng(7), (32, 32))
    b = ingest_day(caps(40), ByteLabeler(), 0, np.random.default_rng(7), (32, 32))
    assert [i.ref for i in a.control_items] == [i.ref for i in b.control_items]


def test_ingest_quarantines_labeler_failures():
    class Flaky:
        def label(self, cap):
            if cap.source_path.endswith("-3"):
                raise RuntimeError("analyzer timeout")
            return 0

    batch = ingest_day(caps(6), Flaky(), 0, np.random.default_rng(0), (32, 32))
    assert batch.quarantined == ["c0-3"]
    assert len(batch.items) == 5


# ---- P3: daily evaluation and trigger

def scripted_batch(day, f2_target):
    """Eval items whose labels make the scripted scores hit a chosen recall."""
    # 10 positives, no negatives predicted positive: F2 = recall-driven
    n_hit = int(round(f2_target * 10))
    items = [item(day, f"p{i}", 1) for i in range(10)] + [item(day, f"n{i}", 0) for i in range(10)]
    scores = np.r_[np.ones(n_hit), np.zeros(10 - n_hit), np.zeros(10)]
    return DayBatch(day, items, [], items), scores


def run_days(monkeypatch, targets):
    champ = mini_model()
    elog = DailyEvalLog()
    out = []
    for day, t in enumerate(targets):
        batch, scores = scripted_batch(day, t)
        monkeypatch.setattr(continual, "predict_scores", lambda m, x, s=scores: s)
        out.append(daily_eval(champ, batch, elog))
    return out, elog


def test_day_zero_never_triggers(monkeypatch):
    (res,), _ = run_days(monkeypatch, [0.3])
    assert res[1] is False


def test_drop_triggers(monkeypatch):
    out, elog = run_days(monkeypatch, [0.8, 0.7])
    assert out[0][1] is False and out[1][1] is True
    assert out[1][0] < out[0][0]
    assert not trigger_violations(elog)


def test_equal_does_not_trigger(monkeypatch):
    out, _ = run_days(monkeypatch, [0.7, 0.7])
    assert out[1][1] is False


def test_single_class_day_skips(monkeypatch):
    champ = mini_model()
    elog = DailyEvalLog([DailyRecord(0, 0.9, False, champ.version_id)])
    items = [item(1, f"n{i}", 0) for i in range(5)]
    f2, trig = daily_eval(champ, DayBatch(1, items, [], items), elog)
    assert f2 is None and not trig
    # the next day has no defined predecessor, so it cannot trigger either
    batch, scores = scripted_batch(2, 0.1)
    monkeypatch.setattr(continual, "predict_scores", lambda m, x: scores)
    assert daily_eval(champ, batch, elog)[1] is False


def test_daily_eval_needs_threshold():
    m = mini_model()
    m.calibrated_threshold = None
    with pytest.raises(ValueError):
        daily_eval(m, DayBatch(0, [], [], []), DailyEvalLog())


# ---- retention

def test_prune_examples():
    store = RetentionStore(items=[item(0, "a"), item(5, "b")])
    prune_retention(store, 31)
    assert [i.ref for i in store.items] == ["b"]
    assert prune_retention(RetentionStore(), 40).items == []
    store = RetentionStore(items=[item(1, "edge")])
    assert len(prune_retention(store, 31).items) == 1
    assert store.max_age(31) == 30


def test_window_since_stable_day():
    store = RetentionStore(items=[item(d, str(d)) for d in range(6)], last_stable_day=3)
    assert [i.ref for i in store.window(5)] == ["4", "5"]


# ---- registry

def test_registry_tagging(tmp_path):
    reg = Registry(tmp_path)
    v1, v2 = mini_model(vid="m00000001"), mini_model(1, vid="m00000002")
    reg.register(v1, 0)
    reg.register(v2, 3)
    reg.tag_champion("m00000002", 3, 0.7)
    assert reg.get_champion().version_id == "m00000002"
    reg.tag_champion("m00000001", 4, 0.9)
    assert reg.get_champion().version_id == "m00000001"
    assert (tmp_path / "champion").read_text().strip() == "m00000001"
    assert reg.list_versions() == ["m00000001", "m00000002"]
    assert reg.best_control_f2() == 0.9
    with pytest.raises(UnknownVersion):
        reg.tag_champion("mffffffff")
    # state survives a reopen
    again = Registry(tmp_path)
    assert again.get_champion() == reg.get_champion()
    assert again.load("m00000002").params[2]["weight"].tobytes() == v2.params[2]["weight"].tobytes()


def test_registry_metrics_append(tmp_path):
    reg = Registry(tmp_path)
    for i in range(3):
        reg.append_metric({"day_index": i, "f2": i / 10})
    assert [r["day_index"] for r in reg.read_metrics()] == [0, 1, 2]
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 3


def test_registry_duplicate_register(tmp_path):
    reg = Registry(tmp_path)
    reg.register(mini_model(), 0)
    with pytest.raises(ValueError):
        reg.register(mini_model(), 1)


# ---- P4: adopt or discard

@pytest.fixture
def cycle_env(tmp_path, monkeypatch):
    reg = Registry(tmp_path)
    champ = mini_model(vid="m0000000a")
    reg.register(champ, 0)
    reg.tag_champion(champ.version_id, 0, None)
    store = RetentionStore(items=[item(d, f"w{d}-{i}", i % 2) for d in range(1, 6) for i in range(4)])
    control = ControlSet([item(0, f"c{i}", int(i < 5)) for i in range(10)])
    counter = iter(range(100))

    def fake_fine_tune(champion, train, val, mode, cfg):
        assert mode == "finetune_dense"
        cand = champion.copy()
        cand.version_id = f"mcand{next(counter):04d}"
        cand.calibrated_threshold = 0.5
        cand.metadata = {"parent": champion.version_id}
        return cand, 0.5

    monkeypatch.setattr(continual, "fine_tune", fake_fine_tune)
    return reg, champ, store, control, monkeypatch


def control_scores(hits):
    # 5 positives then 5 negatives; 'hits' positives scored above threshold, one false alarm
    return np.r_[np.ones(hits), np.zeros(5 - hits), [1.0], np.zeros(4)]


def expected_f2(hits):
    return metrics.evaluate_scores(control_scores(hits), [1] * 5 + [0] * 5, 0.5).f2


def test_first_cycle_adopted_unconditionally(cycle_env):
    reg, champ, store, control, mp = cycle_env
    mp.setattr(continual, "predict_scores", lambda m, x: control_scores(1))
    out = finetune_cycle(champ, store, control, reg, ContinualConfig(), 2)
    assert out.status == "adopted" and out.best_prior_control_f2 is None
    assert reg.get_champion().version_id == out.candidate_version
    assert store.last_stable_day == 2


def test_strict_improvement_adopts(cycle_env):
    reg, champ, store, control, mp = cycle_env
    mp.setattr(continual, "predict_scores", lambda m, x: control_scores(3))
    finetune_cycle(champ, store, control, reg, ContinualConfig(), 2)
    mp.setattr(continual, "predict_scores", lambda m, x: control_scores(4))
    out = finetune_cycle(champ, store, control, reg, ContinualConfig(), 3)
    assert out.status == "adopted"
    assert out.control_f2 == expected_f2(4) > out.best_prior_control_f2 == expected_f2(3)


def test_equal_score_discarded(cycle_env):
    reg, champ, store, control, mp = cycle_env
    mp.setattr(continual, "predict_scores", lambda m, x: control_scores(4))
    first = finetune_cycle(champ, store, control, reg, ContinualConfig(), 2)
    before = store.last_stable_day
    out = finetune_cycle(champ, store, control, reg, ContinualConfig(), 3)
    assert out.status == "discarded"
    assert out.control_f2 == out.best_prior_control_f2
    assert reg.get_champion().version_id == first.candidate_version
    assert reg.version_info(out.candidate_version)["status"] == "archived"
    assert store.last_stable_day == before


def test_empty_window_skipped(cycle_env):
    reg, champ, _, control, _ = cycle_env
    out = finetune_cycle(champ, RetentionStore(), control, reg, ContinualConfig(), 2)
    assert out.status == "skipped" and out.reason == "NoDataToFineTune"


def test_finetune_window_range(cycle_env):
    reg, champ, _, control, mp = cycle_env
    seen = {}

    def spy(champion, train, val, mode, cfg):
        seen["n"] = len(train) + len(val)
        raise SingleClassError("stop here")

    mp.setattr(continual, "fine_tune", spy)
    store = RetentionStore(items=[item(d, f"{d}-{i}", i % 2) for d in range(6) for i in range(4)], last_stable_day=3)
    out = finetune_cycle(champ, store, control, reg, ContinualConfig(), 5)
    assert seen["n"] == 8 and out.window_start_day == 4 and out.status == "skipped"


def test_split_window_stratified():
    items = [item(0, str(i), int(i < 6)) for i in range(20)]
    tr, va = continual._split_window(items, 0.35, np.random.default_rng(0))
    assert sorted(tr + va) == list(range(20))
    assert {items[i].label for i in va} == {0, 1}
    assert {items[i].label for i in tr} == {0, 1}


# ---- whole loop on a miniature scenario

def mini_scenario(days=12, drift_day=5):
    profile = synth.CorpusProfile(
        seed=2, size_mean=700, size_std=200, size_min=256, size_max=1024, motif_count_range=(3, 6),
        background_high=31, image_width=32, image_height=32, align=4, jitter=4,
        drift_schedule=((drift_day, synth.BackgroundShift(0, 95)),),
    )
    return synth.Scenario(profile, MINI, days=days, daily_range=(20, 40), initial_train=60, initial_val=20)


MINI_CFG = ContinualConfig(
    seed=3,
    finetune=TrainConfig(max_epochs=6, patience=3, learning_rate=0.005),
    initial=TrainConfig(max_epochs=15, patience=5, learning_rate=0.005),
    window_days=4,
)


@pytest.fixture(scope="module")
def mini_runs(tmp_path_factory):
    a = tmp_path_factory.mktemp("run_a")
    b = tmp_path_factory.mktemp("run_b")
    ra = continual.run_scenario(mini_scenario(), None, MINI_CFG, a)
    rb = continual.run_scenario(mini_scenario(), None, MINI_CFG, b)
    return ra, rb, a, b


def test_loop_invariants(mini_runs):
    res, _, root, _ = mini_runs
    assert len(res.log.records) == 12
    assert not trigger_violations(res.log)
    assert strictly_increasing(adopted_scores(res.registry))
    assert discarded_never_champion(res)
    assert max(res.max_retention_age) <= MINI_CFG.window_days
    assert res.control_refs.isdisjoint(res.window_refs)
    assert (root / "champion").read_text().strip() == res.registry.get_champion().version_id
    kinds = [r["kind"] for r in res.registry.read_metrics()]
    assert kinds.count("daily_eval") == 12
    assert kinds.count("finetune_cycle") == len(res.outcomes)


def test_loop_bitwise_rerun(mini_runs):
    ra, rb, a, b = mini_runs
    assert tree_bytes(a) == tree_bytes(b)
    assert ra.timeline() == rb.timeline()
    assert [dataclasses.asdict(r) for r in ra.log.records] == [dataclasses.asdict(r) for r in rb.log.records]


def test_timeline_report(mini_runs):
    res = mini_runs[0]
    lines = res.timeline().splitlines()
    assert lines[0].split()[:3] == ["day", "n", "F2"]
    assert len(lines) == 13
    assert "V1" in lines[1]


def test_bad_day_does_not_halt(tmp_path, monkeypatch):
    sc = mini_scenario(days=3)
    real = synth.Scenario.captures_for

    def broken(self, day):
        if day == 1:
            raise FormatError("corrupt intake")
        return real(self, day)

    monkeypatch.setattr(synth.Scenario, "captures_for", broken)
    res = continual.run_scenario(sc, None, MINI_CFG, tmp_path)
    assert [r.day_index for r in res.log.records] == [0, 1, 2]
    assert res.log.records[1].note.startswith("error")
