import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routedlm.datagen import (TASKS, DatasetSplit, Sample, compute_stats,
                              current_profile, generate_dataset, linear_reward,
                              read_jsonl, read_samples, soh_oracle, write_jsonl,
                              write_samples)

RNG = np.random.default_rng(3)


class TestLinearReward:
    def test_zero_degradation(self):
        assert linear_reward(0.0, 0.2, 50.0, 0.7) == 10.0

    def test_all_zero(self):
        assert linear_reward(0.0, 0.0, 0.0, 0.0) == 0.0

    def test_hand_value(self):
        # 0.1*100 - 0.01*0.5*1200 = 10 - 6
        assert linear_reward(0.01, 0.1, 100.0, 0.5) == 4.0

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            linear_reward(0.06, 0.1, 100.0, 0.5)
        with pytest.raises(ValueError):
            linear_reward(0.01, 0.1, 251.0, 0.5)
        with pytest.raises(ValueError):
            linear_reward(0.01, -0.1, 100.0, 0.5)

    @given(st.integers(0, 3), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=60, deadline=None)
    def test_affine_in_each_coordinate(self, k, a, b, c):
        # 0.4*range keeps s, t and s+t inside the declared ranges
        base = [0.03, 0.3, 150.0, 0.6]
        ranges = [(0.0, 0.05), (0.0, 0.5), (0.0, 250.0), (0.0, 1.0)]
        hi = ranges[k][1] * 0.4
        s, t = a * hi, b * hi

        def at(v):
            x = list(base)
            x[k] = v
            return linear_reward(*x)

        lhs = at(s + t)
        rhs = at(s) + at(t) - at(0.0)
        assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


class TestSohOracle:
    def test_initial_health_is_one(self):
        assert soh_oracle([0.5] * 11, 0.0, 0.5) == 1.0

    def test_calendar_only(self):
        out = soh_oracle([0.0] * 11, 120.0, 0.0)
        assert abs(out - 0.9976) <= 1e-12

    def test_unit_current_window(self):
        # 1 - 2e-5*120 - 2e-4 * integral(|1|^1.5 over [0,120]) = 0.9736
        out = soh_oracle([1.0] * 11, 120.0, 1.0)
        assert abs(out - 0.9736) <= 1e-9

    def test_negative_time_rejected(self):
        with pytest.raises(ValueError):
            soh_oracle([0.0] * 11, -1.0, 0.0)

    def test_beyond_horizon_rejected(self):
        with pytest.raises(ValueError):
            soh_oracle([0.0] * 11, 481.0, 0.0)

    def test_current_range_enforced(self):
        with pytest.raises(ValueError):
            soh_oracle([2.5] + [0.0] * 10, 100.0, 0.0)
        with pytest.raises(ValueError):
            soh_oracle([0.0] * 11, 100.0, -2.5)

    def test_against_fine_quadrature(self):
        # independent oracle: trapezoid at a 100x finer step
        for _ in range(10):
            currents = RNG.uniform(-2, 2, size=11)
            t_query = float(RNG.uniform(120, 480))
            i_query = float(RNG.uniform(-2, 2))
            pts = np.linspace(0.0, 120.0, 120001)
            window = np.trapz(np.abs(current_profile(currents, pts)) ** 1.5, pts)
            tail = abs(i_query) ** 1.5 * (t_query - 120.0)
            expected = 1.0 - 2e-5 * t_query - 2e-4 * (window + tail)
            assert abs(soh_oracle(currents, t_query, i_query) - expected) <= 1e-6

    @given(st.floats(0, 480), st.floats(0, 480))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_time(self, t1, t2):
        currents = list(np.linspace(-1.5, 1.5, 11))
        lo, hi = sorted((t1, t2))
        assert soh_oracle(currents, hi, 0.8) <= soh_oracle(currents, lo, 0.8) + 1e-12


class TestGenerateDataset:
    def test_unknown_task_rejected(self):
        with pytest.raises(ValueError):
            generate_dataset("cubic", sizes=(10, 5), seed=0)

    def test_default_sizes_match_task_definitions(self):
        assert TASKS["linear"].default_sizes == (9000, 1000)
        assert TASKS["nonlinear"].default_sizes == (7200, 2400)

    def test_linear_default_split_sizes(self):
        split = generate_dataset("linear", seed=1)
        assert len(split.train) == 9000
        assert len(split.test) == 1000

    def test_determinism_byte_identical_files(self, tmp_path):
        for run in ("a", "b"):
            split = generate_dataset("nonlinear", sizes=(40, 10), seed=7)
            write_jsonl(split, tmp_path / run / "nl")
        for suffix in (".train.jsonl", ".test.jsonl", ".stats.json"):
            fa = (tmp_path / "a" / "nl").with_suffix(suffix)
            fb = (tmp_path / "b" / "nl").with_suffix(suffix)
            assert fa.read_bytes() == fb.read_bytes()

    def test_nonlinear_health_bounds(self):
        split = generate_dataset("nonlinear", sizes=(300, 50), seed=2)
        ys = split.y_array("train")
        assert ys.min() >= 0.70
        assert ys.max() <= 1.0

    def test_features_are_canonical_grid(self):
        split = generate_dataset("linear", sizes=(50, 10), seed=3)
        for s in split.train:
            for v in s.x:
                assert v == round(v, 4)

    def test_normalization_statistics(self):
        split = generate_dataset("linear", sizes=(500, 50), seed=4)
        Z = split.stats.normalize_x(split.x_array("train"))
        assert np.all(np.abs(Z.mean(axis=0)) <= 1e-9)
        assert np.all(np.abs(Z.std(axis=0) - 1.0) <= 1e-9)
        zy = split.stats.normalize_y(split.y_array("train"))
        assert abs(zy.mean()) <= 1e-9
        assert abs(zy.std() - 1.0) <= 1e-9

    def test_constant_feature_rejected(self):
        samples = [Sample("linear", [1.0, 2.0], 3.0), Sample("linear", [1.0, 5.0], 4.0)]
        with pytest.raises(ValueError):
            compute_stats(samples)


class TestJsonl:
    def test_roundtrip_exact(self, tmp_path):
        split = generate_dataset("linear", sizes=(10, 4), seed=5)
        write_jsonl(split, tmp_path / "lin")
        back = read_jsonl(tmp_path / "lin")
        assert back.task == "linear"
        for a, b in zip(split.train + split.test, back.train + back.test):
            assert a.x == b.x
            assert a.y == b.y
        assert back.stats.to_dict() == split.stats.to_dict()

    def test_nonlinear_record_field_count(self, tmp_path):
        split = generate_dataset("nonlinear", sizes=(3, 2), seed=6)
        write_jsonl(split, tmp_path / "nl")
        line = (tmp_path / "nl.train.jsonl").read_text().splitlines()[0]
        rec = json.loads(line)
        assert len(rec["x"]) + 1 == 14

    def test_empty_file_is_empty_split(self, tmp_path):
        (tmp_path / "e.train.jsonl").write_text("")
        (tmp_path / "e.test.jsonl").write_text("")
        (tmp_path / "e.stats.json").write_text(json.dumps({"task": "linear",
                                                           "stats": None}))
        split = read_jsonl(tmp_path / "e")
        assert split.train == [] and split.test == []

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"x": [1.0], "y": 2.0, "task": "linear"}\nnot json\n')
        with pytest.raises(ValueError, match="line 2"):
            read_samples(path)

    def test_template_id_preserved(self, tmp_path):
        s = Sample("linear", [0.0, 0.0, 0.0, 0.0], 0.0, template_id=3)
        write_samples([s], tmp_path / "one.jsonl")
        back = read_samples(tmp_path / "one.jsonl")
        assert back[0].template_id == 3
