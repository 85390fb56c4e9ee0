import json

import numpy as np
import pytest

from htlprune import reporting
from htlprune.metrics import DropRecord, SegMetrics
from htlprune.mining import HtlRecord
from htlprune.reporting import RunResult

META = {
    "a": {"sex": "female", "age_group": "<=30", "subgroup": "subtle"},
    "b": {"sex": "female", "age_group": "30-40", "subgroup": "typical"},
    "c": {"sex": "male", "age_group": "30-40", "subgroup": "typical"},
    "d": {"sex": "male", "subgroup": "typical"},
}


def recs(htl):
    return [HtlRecord(i, "supervised", 0.5 if i in htl else 0.1, i in htl, 0.4) for i in "abcd"]


def test_enrichment_hand_values():
    rep = reporting.demographic_report(recs({"a", "b"}), META)
    assert rep.enrichment("sex", "female") == pytest.approx(2.0)
    assert rep.enrichment("sex", "male") == 0.0
    assert rep.enrichment("subgroup", "subtle") == pytest.approx((1 / 2) / (1 / 4))
    assert rep.get("age_group", "unknown").n == 1
    for key in ("sex", "age_group", "subgroup"):
        rows = [r for r in rep.rows if r.group_by == key]
        assert sum(r.dataset_share for r in rows) == pytest.approx(1.0, abs=1e-9)
        assert sum(r.htl_share for r in rows) == pytest.approx(1.0, abs=1e-9)


def test_all_htl_gives_unit_enrichment():
    rep = reporting.demographic_report(recs(set("abcd")), META)
    assert all(r.enrichment == pytest.approx(1.0) for r in rep.rows)


def test_empty_htl_marks_shares_absent(tmp_path):
    rep = reporting.demographic_report(recs(set()), META)
    assert all(r.htl_share is None and r.enrichment is None for r in rep.rows)
    reporting.write_disparity(rep, tmp_path / "d")
    _, rows = reporting.read_table_csv(tmp_path / "d.csv")
    assert all(r["htl_share"] == "" for r in rows)
    assert json.loads((tmp_path / "d.json").read_text())["rows"][0]["htl_share"] is None


def test_groups_sorted_deterministically():
    rep = reporting.demographic_report(recs({"a"}), META)
    ages = [r.group for r in rep.rows if r.group_by == "age_group"]
    assert ages == sorted(ages)


def drop(i, fg, bg):
    return DropRecord(i, 1.0, 1.0 - fg, 1.0, 1.0 - bg, fg, bg)


def test_drop_summary_means_and_zero_ratio():
    rows = reporting.drop_summary({0.5: [drop("a", 0.2, 0.1), drop("b", 0.4, 0.0)], 0.0: [drop("a", 0, 0)]})
    assert [r.ratio for r in rows] == [0.0, 0.5]
    assert rows[0].mean_drop_fg == 0.0 and rows[0].mean_drop_bg == 0.0
    assert rows[1].mean_drop_fg == pytest.approx(0.3) and rows[1].pct_drop_bg == pytest.approx(5.0)


def test_drop_summary_single_sample_equals_record():
    row = reporting.drop_summary({0.25: [drop("a", 0.123, 0.045)]})[0]
    assert (row.mean_drop_fg, row.mean_drop_bg) == (0.123, 0.045)


def test_comparison_table_std_is_sample_std():
    vals = [0.60, 0.70, 0.65]
    runs = [RunResult("htl", s, SegMetrics(v, 0.9, (v + 0.9) / 2, v)) for s, v in zip((10, 20, 30), vals)]
    runs.append(RunResult("base", 10, SegMetrics(0.5, 0.9, 0.7, 0.5)))
    rows = reporting.comparison_table(runs)
    assert [r.method for r in rows] == ["htl", "base"]
    mean = sum(vals) / 3
    hand_std = (sum((v - mean) ** 2 for v in vals) / 2) ** 0.5
    assert rows[0].iou_foreground == pytest.approx(mean)
    assert rows[0].std_iou_foreground == pytest.approx(hand_std, abs=1e-15)
    assert rows[0].std_iou_background == 0.0
    assert rows[1].std_iou_foreground is None


def test_comparison_csv_header_and_schema(tmp_path):
    rows = reporting.comparison_table([RunResult("base", 1, SegMetrics(0.5, 0.9, 0.7, 0.6))])
    reporting.write_comparison(rows, tmp_path / "c")
    version, parsed = reporting.read_table_csv(tmp_path / "c.csv")
    assert version == reporting.SCHEMA_VERSION
    assert list(parsed[0]) == list(reporting.COMPARISON_COLUMNS)
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["schema_version"] == reporting.SCHEMA_VERSION and doc["rows"][0]["iou_foreground"] == 0.5


def test_ablation_full_row_has_zero_delta():
    from htlprune.unet import ArchConfig, build_unet

    class S:
        def __init__(self, i, rng):
            self.id, self.image = str(i), rng.random((1, 8, 8))
            self.mask = (rng.random((8, 8)) > 0.7).astype(np.uint8)

    rng = np.random.default_rng(0)
    model = build_unet(ArchConfig(depth=1, base_channels=2, input_size=8), seed=0)
    rep = reporting.ablation_report(model, [S(i, rng) for i in range(3)], ratios=(0.5,))
    assert rep.rows[0].prune_method == "full" and rep.rows[0].delta_vs_full == 0.0
    assert len(rep.rows) == 4
