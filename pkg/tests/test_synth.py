import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcapvision import synth
from pcapvision.model_zoo import DESK, build_pcapvision


def small_profile(**kw):
    base = dict(seed=3, size_mean=3000, size_std=1500, size_min=1024, size_max=8192,
                image_width=64, image_height=64, align=4, jitter=4)
    base.update(kw)
    return synth.CorpusProfile(**base)


def test_single_success_and_fail():
    p = small_profile()
    (ok, y0), = synth.generate(p, 1, 0)
    assert y0 == 0 and synth.count_occurrences(ok.bytes, p.motif) == 0
    (bad, y1), = synth.generate(p, 0, 1)
    assert y1 == 1 and synth.count_occurrences(bad.bytes, p.motif) >= 1


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.integers(0, 40))
def test_label_soundness(seed, day):
    p = small_profile(seed=seed, drift_schedule=((5, synth.MotifSubstitution(0, 0x11)),))
    family = synth.motif_family(p)
    today = synth.drift(p, day).motif
    for cap, y in synth.generate(p, 3, 3, day=day):
        if y:
            assert synth.count_occurrences(cap.bytes, today) >= 1
        else:
            assert all(synth.count_occurrences(cap.bytes, m) == 0 for m in family)


def test_motif_inside_image_cap():
    p = small_profile(size_mean=20_000, size_std=10, size_min=10_000, size_max=30_000)
    cap_len = p.image_width * p.image_height
    for cap, _ in synth.generate(p, 0, 10):
        assert p.motif in cap.bytes[:cap_len]


def test_deterministic():
    p = small_profile()
    a = synth.generate(p, 4, 4, day=2)
    b = synth.generate(p, 4, 4, day=2)
    assert [c.bytes for c, _ in a] == [c.bytes for c, _ in b]
    c = synth.generate(p, 4, 4, day=3)
    assert [x.bytes for x, _ in a] != [x.bytes for x, _ in c]


def test_size_distribution_mean():
    p = synth.CorpusProfile(seed=1)
    sizes = synth.sample_sizes(p, 1000, np.random.default_rng(0))
    assert sizes.min() >= 1024 and sizes.max() <= 2_560_000
    assert abs(sizes.mean() - 1_030_000) <= 0.1 * 1_030_000


def test_full_profile_files():
    p = synth.CorpusProfile(seed=4)
    items = synth.generate(p, 2, 2)
    for cap, _ in items:
        assert 1024 <= cap.byte_len <= 2_560_000


def test_drift_rules():
    p = small_profile()
    assert synth.drift(p, 50) == p
    q = dataclasses.replace(p, drift_schedule=((10, synth.MotifSubstitution(0, 0x00)),))
    assert synth.drift(q, 9).motif == q.motif
    m10 = synth.drift(q, 10).motif
    assert m10[0] == 0 and m10[1:] == q.motif[1:] and m10 != q.motif
    two = dataclasses.replace(
        p, drift_schedule=((10, synth.BackgroundShift(0, 40)), (5, synth.SizeShift(500)))
    )
    d12 = synth.drift(two, 12)
    assert d12.size_mean == p.size_mean + 500 and d12.background_high == 40
    assert synth.drift(two, 7).background_high == p.background_high
    with pytest.raises(ValueError):
        synth.drift(p, -1)


def test_profile_validation():
    with pytest.raises(ValueError):
        small_profile(motif=b"abc")
    with pytest.raises(ValueError):
        small_profile(motif_count_range=(0, 2))


def test_profile_dict_roundtrip():
    p = small_profile(drift_schedule=((3, synth.SizeShift(-10.0)), (8, synth.MotifSubstitution(2, 7))),
                      header_block=synth.PCAP_GLOBAL_HEADER)
    d = json.loads(json.dumps(p.to_dict()))
    assert synth.CorpusProfile.from_dict(d) == p


def test_header_block_placed():
    p = small_profile(header_block=synth.PCAP_GLOBAL_HEADER, header_period=1000)
    cap, _ = synth.generate(p, 1, 0)[0]
    assert cap.bytes.startswith(synth.PCAP_GLOBAL_HEADER)
    assert cap.bytes[1000 : 1000 + 24] == synth.PCAP_GLOBAL_HEADER


def test_scaled_profile():
    profile, spec = synth.scaled_profile()
    assert spec == build_pcapvision(DESK)
    assert spec.param_count() == 66_693
    assert profile.size_max <= 65_536
    assert (profile.image_width, profile.image_height) == (256, 256)
    # the motif fits inside one conv kernel row
    assert len(profile.motif) <= DESK.kernel


def test_labeler():
    p = small_profile(drift_schedule=((2, synth.MotifSubstitution(3, 0)),))
    lab = synth.MotifLabeler.for_profile(p)
    for day in (0, 2):
        for cap, y in synth.generate(p, 2, 2, day=day):
            assert lab.label(cap) == y


def test_write_corpus(tmp_path):
    p = small_profile()
    items = synth.generate(p, 2, 1, day=4)
    manifest = tmp_path / "m.jsonl"
    recs = synth.write_corpus(items, tmp_path, "train", day=4, manifest=manifest)
    rows = [json.loads(l) for l in manifest.read_text().splitlines()]
    assert rows == recs
    assert [r["label"] for r in rows] == [0, 0, 1]
    assert all(r["day"] == 4 and r["split"] == "train" for r in rows)
    assert open(rows[2]["path"], "rb").read() == items[2][0].bytes


def test_scenario_intake():
    sc = synth.default_scenario(0, days=12, drift_day=10)
    n = sc.daily_count(3)
    lo, hi = sc.daily_range
    assert lo <= n <= hi
    caps = sc.captures_for(3)
    assert len(caps) == n
    assert [c.bytes for c in caps] == [c.bytes for c in sc.captures_for(3)]
    assert synth.drift(sc.profile, 10).background_high > synth.drift(sc.profile, 9).background_high
    again = synth.Scenario.from_dict(json.loads(json.dumps(sc.to_dict())))
    assert again == sc
