import csv
import json

import numpy as np
import pytest

from helpers import tiny_model_config
from vitgru.data import ImageSample
from vitgru.errors import DataError
from vitgru.metrics import (
    ConfusionMatrix,
    aggregate,
    evaluate_model,
    export_embeddings,
    prf_per_class,
    render_table,
    report_from_confusion,
    report_to_json,
    topk_hit,
    topk_indices,
)
from vitgru.model import Model
from vitgru.rng import substream


def brute_force_prf(preds, labels, num_classes):
    # per-sample counting with plain ints
    out = []
    for c in range(num_classes):
        tp = sum(1 for p, t in zip(preds, labels) if p == c and t == c)
        fp = sum(1 for p, t in zip(preds, labels) if p == c and t != c)
        fn = sum(1 for p, t in zip(preds, labels) if p != c and t == c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out.append((precision, recall, f1))
    return out


def brute_force_topk(logits, label, k):
    # sort by (value desc, index asc) with plain python
    ranked = sorted(range(len(logits)), key=lambda i: (-logits[i], i))
    return label in ranked[:k]


def cm_from(preds, labels, num_classes):
    cm = ConfusionMatrix(num_classes)
    for p, t in zip(preds, labels):
        cm.add(t, p)
    return cm


class TestTopK:
    def test_argmax_hit(self):
        assert topk_hit([0.2, 0.5, 0.3], 1, 1)

    def test_second_largest(self):
        assert topk_hit([0.2, 0.5, 0.3], 2, 2)

    def test_tie_goes_to_lower_index(self):
        assert not topk_hit([1.0, 1.0, 0.0], 1, 1)
        assert topk_hit([1.0, 1.0, 0.0], 0, 1)

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            topk_hit([0.1, 0.2], 5, 1)

    def test_k_out_of_range(self):
        with pytest.raises(DataError):
            topk_hit([0.1, 0.2], 0, 3)

    def test_matches_brute_force_on_random_draws(self):
        rng = substream(1, "draws")
        for _ in range(1000):
            logits = np.round(rng.normal(size=3), 3)  # rounding forces occasional ties
            label = int(rng.integers(3))
            k = int(rng.integers(1, 4))
            assert topk_hit(logits, label, k) == brute_force_topk(list(logits), label, k)


class TestPrf:
    def test_perfect_diagonal(self):
        cm = ConfusionMatrix(3)
        cm.counts = np.diag([5, 5, 5]).astype(np.int64)
        for c in prf_per_class(cm):
            assert c.precision == c.recall == c.f1 == 1.0

    def test_hand_confusion_matrix(self):
        cm = ConfusionMatrix(2)
        cm.counts = np.array([[8, 2], [4, 6]], dtype=np.int64)
        c0, c1 = prf_per_class(cm)
        assert abs(c0.precision - 8 / 12) < 1e-12
        assert abs(c0.recall - 0.8) < 1e-12
        assert abs(c0.f1 - 2 * (8 / 12) * 0.8 / (8 / 12 + 0.8)) < 1e-12
        assert abs(c1.precision - 0.75) < 1e-12
        assert abs(c1.recall - 0.6) < 1e-12

    def test_never_predicted_class_flags_degenerate(self):
        cm = ConfusionMatrix(3)
        cm.counts = np.array([[3, 1, 0], [2, 2, 0], [1, 1, 0]], dtype=np.int64)
        metrics = prf_per_class(cm)
        assert metrics[2].precision == 0.0
        assert metrics[2].precision_degenerate

    def test_matches_brute_force_on_random_draws(self):
        rng = substream(2, "draws")
        for _ in range(200):
            n = int(rng.integers(1, 40))
            preds = rng.integers(0, 3, size=n)
            labels = rng.integers(0, 3, size=n)
            ours = prf_per_class(cm_from(preds, labels, 3))
            oracle = brute_force_prf(preds, labels, 3)
            for c, (p, r, f1) in zip(ours, oracle):
                assert c.precision == p and c.recall == r and c.f1 == f1

    def test_permuting_classes_permutes_metrics(self):
        rng = substream(3, "draws")
        preds = rng.integers(0, 3, size=60)
        labels = rng.integers(0, 3, size=60)
        perm = np.array([2, 0, 1])
        base = prf_per_class(cm_from(preds, labels, 3))
        permuted = prf_per_class(cm_from(perm[preds], perm[labels], 3))
        for c in range(3):
            assert permuted[perm[c]].precision == base[c].precision
            assert permuted[perm[c]].recall == base[c].recall


class TestAggregate:
    def test_equal_supports_macro_equals_weighted(self):
        cm = cm_from([0, 1, 2, 0, 1, 1], [0, 1, 2, 1, 0, 1], 3)
        per_class = prf_per_class(cm)
        macro, weighted = aggregate(per_class, [2, 2, 2])
        assert weighted.precision == pytest.approx(macro.precision, rel=1e-12)

    def test_weighted_recall_equals_accuracy_exactly(self):
        rng = substream(4, "draws")
        for _ in range(300):
            n = int(rng.integers(2, 60))
            preds = rng.integers(0, 3, size=n)
            labels = rng.integers(0, 3, size=n)
            cm = cm_from(preds, labels, 3)
            report = report_from_confusion(cm, top2_hits=0)
            assert report.weighted.recall == report.top1  # bit-exact

    def test_table_style_rates(self):
        # integer cm approximating per-class recalls (93, 82, 97)% over supports (219, 226, 885)
        supports = [219, 226, 885]
        tps = [204, 185, 858]
        cm = ConfusionMatrix(3)
        for c in range(3):
            cm.counts[c, c] = tps[c]
            spill = supports[c] - tps[c]
            other = (c + 1) % 3
            cm.counts[c, other] = spill
        per_class = prf_per_class(cm)
        _, weighted = aggregate(per_class)
        assert weighted.recall == sum(tps) / sum(supports)
        assert abs(weighted.recall - 0.9376) < 1e-3

    def test_single_class_aggregates_to_itself(self):
        cm = cm_from([0, 0, 0], [0, 0, 0], 1)
        per_class = prf_per_class(cm)
        macro, weighted = aggregate(per_class)
        assert macro.precision == weighted.precision == per_class[0].precision

    def test_all_zero_supports_rejected(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(DataError):
            aggregate(prf_per_class(cm), [0, 0])


def oracle_model_samples(n=12, size=32, seed=0):
    rng = substream(seed, "imgs")
    samples = []
    for i in range(n):
        samples.append(
            ImageSample(rng.uniform(0, 1, (size, size, 3)).astype(np.float32), int(rng.integers(3)),
                        path=f"sample_{i}", split="test")
        )
    return samples


class TestEvaluate:
    def test_reports_are_internally_consistent(self):
        model = Model(tiny_model_config(dtype="float32"), seed=1)
        report, cm = evaluate_model(model, oracle_model_samples())
        assert cm.total == report.sample_count == 12
        assert 0.0 <= report.top1 <= report.top2 <= 1.0
        assert report.weighted.recall == report.top1

    def test_constant_logits_hit_tie_break_class(self):
        model = Model(tiny_model_config(dtype="float32"), seed=2)
        for t in model.head_params.cls_w, model.head_params.cls_b:
            t.data[:] = 0.0
        samples = oracle_model_samples(seed=3)
        report, cm = evaluate_model(model, samples)
        freq0 = sum(1 for s in samples if s.label == 0) / len(samples)
        assert report.top1 == freq0
        assert cm.counts[:, 0].sum() == len(samples)  # everything predicted as class 0

    def test_empty_split_rejected(self):
        model = Model(tiny_model_config(dtype="float32"), seed=4)
        with pytest.raises(DataError):
            evaluate_model(model, [])

    def test_merge_matches_single_pass(self):
        model = Model(tiny_model_config(dtype="float32"), seed=5)
        samples = oracle_model_samples(seed=6)
        _, whole = evaluate_model(model, samples)
        _, left = evaluate_model(model, samples[:6])
        _, right = evaluate_model(model, samples[6:])
        left.merge(right)
        np.testing.assert_array_equal(left.counts, whole.counts)

    def test_json_output_is_stable(self):
        model = Model(tiny_model_config(dtype="float32"), seed=7)
        samples = oracle_model_samples(seed=8)
        names = ["a", "b", "c"]
        r1, _ = evaluate_model(model, samples)
        r2, _ = evaluate_model(model, samples)
        assert report_to_json(r1, names) == report_to_json(r2, names)
        parsed = json.loads(report_to_json(r1, names))
        assert parsed["schema_version"] == 1
        table = render_table(r1, names)
        assert "Top-1 accuracy" in table and "a" in table


class TestExportEmbeddings:
    def test_row_and_column_counts(self, tmp_path):
        model = Model(tiny_model_config(dtype="float32"), seed=9)
        samples = oracle_model_samples(n=5, seed=10)
        path = tmp_path / "emb.csv"
        count = export_embeddings(model, samples, path)
        assert count == 5
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 6
        width = model.config.head.bigru_width
        assert all(len(r) == 2 + width for r in rows)
        assert rows[0][:2] == ["sample_id", "label"]

    def test_empty_split_writes_header_only(self, tmp_path):
        model = Model(tiny_model_config(dtype="float32"), seed=11)
        path = tmp_path / "empty.csv"
        count = export_embeddings(model, [], path)
        assert count == 0
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 1

    def test_re_export_identical(self, tmp_path):
        model = Model(tiny_model_config(dtype="float32"), seed=12)
        samples = oracle_model_samples(n=3, seed=13)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        export_embeddings(model, samples, p1)
        export_embeddings(model, samples, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_values_round_trip_at_full_precision(self, tmp_path):
        model = Model(tiny_model_config(dtype="float32"), seed=14)
        samples = oracle_model_samples(n=1, seed=15)
        from vitgru.tensor import Tape

        pooled, _ = model.forward_pooled(Tape(record=False), samples[0].pixels)
        path = tmp_path / "one.csv"
        export_embeddings(model, samples, path)
        with open(path) as fh:
            row = list(csv.reader(fh))[1]
        recovered = np.array([float(v) for v in row[2:]])
        np.testing.assert_array_equal(recovered, pooled.data.astype(np.float64))
