"""Evaluation stack: ranking metrics, MMD, zero-shot / probe / fine-tune, sweeps."""

import numpy as np
import pytest

from helpers import make_pairs, tiny_config
from ecgtext.evaluate import (
    AblationCorpus,
    AblationPoint,
    AblationResult,
    EvalError,
    EvalReport,
    FineTuneConfig,
    ProbeHead,
    TaskSpec,
    _budgeted_config,
    binary_auc,
    cosine_scores,
    fine_tune,
    labels_to_matrix,
    linear_probe,
    macro_f1,
    metric_auc,
    mmd,
    pair_loss_report,
    params_digest,
    per_class_auc,
    prompt_for,
    random_init_checkpoint,
    run_ablation,
    zero_shot_classify,
    zero_shot_report,
)
from ecgtext.trainer import pretrain


@pytest.fixture(scope="module")
def trained():
    pairs = make_pairs(48)
    return pairs, pretrain(pairs, tiny_config())


@pytest.fixture(scope="module")
def rate_task():
    return TaskSpec(
        kind="multilabel-diagnosis",
        classes=("SLOW", "FAST"),
        prompts=(prompt_for("a slow sinus rate"), prompt_for("a fast sinus rate")),
    )


@pytest.fixture(scope="module")
def eval_split():
    pairs = make_pairs(24, seed=9)
    return [p.record for p in pairs], [p.record.labels for p in pairs]


def auc_pairwise_oracle(scores, labels):
    """Count positive-over-negative wins directly; ties are worth half a win."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestBinaryAuc:
    def test_matches_pairwise_oracle_with_ties(self, rng):
        scores = np.round(rng.normal(size=80), 1)  # coarse grid forces tied scores
        labels = rng.random(80) < 0.4
        labels[:2] = [True, False]
        assert binary_auc(scores, labels) == pytest.approx(
            auc_pairwise_oracle(scores, labels), abs=1e-9
        )

    def test_perfect_and_inverted_separation(self):
        scores = np.array([0.1, 0.2, 0.8, 0.9])
        labels = np.array([0, 0, 1, 1])
        assert binary_auc(scores, labels) == 1.0
        assert binary_auc(-scores, labels) == 0.0

    def test_random_scores_sit_near_chance(self, rng):
        scores = rng.normal(size=2000)
        labels = np.arange(2000) % 2 == 0
        assert abs(binary_auc(scores, labels) - 0.5) < 0.05

    def test_invariant_under_monotone_transforms(self, rng):
        scores = rng.normal(size=50)
        labels = rng.random(50) < 0.5
        labels[:2] = [True, False]
        base = binary_auc(scores, labels)
        assert binary_auc(3.0 * scores + 7.0, labels) == pytest.approx(base, abs=1e-12)
        assert binary_auc(np.tanh(scores), labels) == pytest.approx(base, abs=1e-12)

    def test_needs_both_classes(self):
        with pytest.raises(EvalError, match="positive and one negative"):
            binary_auc(np.array([0.1, 0.2]), np.array([1, 1]))

    def test_rejects_mismatched_shapes(self):
        with pytest.raises(ValueError, match="align"):
            binary_auc(np.zeros(3), np.zeros(4))


class TestPerClassMetrics:
    def test_per_class_matches_binary_auc_per_column(self, rng):
        scores = rng.normal(size=(40, 3))
        labels = (rng.random((40, 3)) < 0.5).astype(int)
        labels[0] = 1
        labels[1] = 0
        values = per_class_auc(scores, labels)
        for c in range(3):
            assert values[c] == pytest.approx(binary_auc(scores[:, c], labels[:, c]), abs=1e-12)

    def test_degenerate_column_is_nan(self):
        scores = np.array([[0.1, 0.9], [0.4, 0.2], [0.8, 0.5]])
        labels = np.array([[0, 1], [1, 1], [1, 1]])
        values = per_class_auc(scores, labels)
        assert not np.isnan(values[0])
        assert np.isnan(values[1])

    def test_macro_excludes_degenerate_classes_with_warning(self, caplog):
        scores = np.array([[0.1, 0.9], [0.9, 0.2]])
        labels = np.array([[0, 1], [1, 1]])
        with caplog.at_level("WARNING"):
            value = metric_auc(scores, labels)
        assert value == pytest.approx(1.0)
        assert "degenerate" in caplog.text

    def test_macro_raises_when_every_class_is_degenerate(self):
        with pytest.raises(EvalError, match="no class"):
            metric_auc(np.zeros((3, 2)), np.ones((3, 2)))

    def test_rejects_mismatched_shapes(self):
        with pytest.raises(ValueError, match="same shape"):
            per_class_auc(np.zeros((3, 2)), np.zeros((3, 3)))


class TestMacroF1:
    def test_hand_worked_example(self):
        pred = np.array([[1, 0], [1, 0], [0, 1], [0, 0]])
        labels = np.array([[1, 0], [0, 0], [0, 1], [0, 1]])
        # class 0: tp=1 fp=1 fn=0 -> 2/3; class 1: tp=1 fp=0 fn=1 -> 2/3
        assert macro_f1(pred, labels) == pytest.approx(2 / 3, abs=1e-12)

    def test_perfect_predictions(self):
        labels = np.array([[1, 0], [0, 1], [1, 1]])
        assert macro_f1(labels, labels) == 1.0

    def test_class_absent_everywhere_is_skipped(self):
        pred = np.array([[1, 0], [0, 0]])
        labels = np.array([[1, 0], [1, 0]])
        # second class never predicted nor labeled: average over class 0 only
        assert macro_f1(pred, labels) == pytest.approx(2 / 3, abs=1e-12)

    def test_no_signal_anywhere_gives_zero(self):
        assert macro_f1(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0


def mmd_brute_force(x, y):
    """Triple-loop Gaussian-kernel V-statistic with the median-distance bandwidth."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pooled = np.concatenate([x, y], axis=0)
    distances = [
        np.sqrt(np.sum((pooled[i] - pooled[j]) ** 2))
        for i in range(len(pooled))
        for j in range(i + 1, len(pooled))
    ]
    bandwidth = float(np.median(distances))
    if bandwidth <= 0.0:
        bandwidth = 1.0

    def kernel(a, b):
        return np.exp(-np.sum((a - b) ** 2) / (2.0 * bandwidth**2))

    k_xx = np.mean([[kernel(p, q) for q in x] for p in x])
    k_yy = np.mean([[kernel(p, q) for q in y] for p in y])
    k_xy = np.mean([[kernel(p, q) for q in y] for p in x])
    return max(k_xx + k_yy - 2.0 * k_xy, 0.0)


class TestMmd:
    def test_identical_sets_give_zero(self, rng):
        x = rng.normal(size=(15, 4))
        assert mmd(x, x.copy()) <= 1e-12

    def test_symmetric(self, rng):
        x = rng.normal(size=(20, 6))
        y = rng.normal(loc=0.5, size=(24, 6))
        assert abs(mmd(x, y) - mmd(y, x)) <= 1e-12

    def test_matches_brute_force_oracle(self, rng):
        x = rng.normal(size=(20, 5))
        y = rng.normal(loc=0.3, scale=1.4, size=(20, 5))
        assert mmd(x, y) == pytest.approx(mmd_brute_force(x, y), abs=1e-9)

    def test_grows_with_distribution_shift(self, rng):
        base = rng.normal(size=(200, 2))
        near = rng.normal(loc=1.0, size=(200, 2))
        far = rng.normal(loc=10.0, size=(200, 2))
        assert 0.0 <= mmd(base, near) < mmd(base, far)

    def test_zero_median_distance_falls_back_with_warning(self, caplog):
        x = np.zeros((5, 3))
        with caplog.at_level("WARNING"):
            value = mmd(x, np.zeros((4, 3)))
        assert value == 0.0
        assert "bandwidth" in caplog.text

    def test_rejects_dimension_mismatch_and_empty(self):
        with pytest.raises(ValueError, match="dimensionality"):
            mmd(np.zeros((3, 2)), np.zeros((3, 3)))
        with pytest.raises(ValueError, match="nonempty"):
            mmd(np.zeros((0, 2)), np.zeros((3, 2)))


class TestCosineScores:
    def test_invariant_to_positive_rescaling(self, rng):
        a = rng.normal(size=(5, 8))
        b = rng.normal(size=(7, 8))
        base = cosine_scores(a, b)
        assert np.allclose(cosine_scores(3.0 * a, 0.25 * b), base, atol=1e-12)

    def test_range_and_self_similarity(self, rng):
        a = rng.normal(size=(6, 4))
        scores = cosine_scores(a, a)
        assert scores.shape == (6, 6)
        assert np.all(scores <= 1.0 + 1e-12) and np.all(scores >= -1.0 - 1e-12)
        assert np.allclose(np.diag(scores), 1.0, atol=1e-12)


class TestLabelsToMatrix:
    def test_accepts_strings_and_collections(self, rate_task):
        matrix = labels_to_matrix(["SLOW", ("FAST",), ["SLOW", "FAST"]], rate_task)
        assert matrix.tolist() == [[1, 0], [0, 1], [1, 1]]

    def test_unknown_label_rejected(self, rate_task):
        with pytest.raises(EvalError, match="not a task class"):
            labels_to_matrix([("WILD",)], rate_task)

    def test_identification_requires_exactly_one_label(self):
        task = TaskSpec(kind="single-label-identification", classes=("a", "b"))
        assert labels_to_matrix(["a", "b"], task).tolist() == [[1, 0], [0, 1]]
        with pytest.raises(EvalError, match="exactly one"):
            labels_to_matrix([()], task)
        with pytest.raises(EvalError, match="exactly one"):
            labels_to_matrix([("a", "b")], task)


class TestTaskAndReportValidation:
    def test_task_rejects_bad_configurations(self):
        with pytest.raises(ValueError, match="kind"):
            TaskSpec(kind="ranking", classes=("a", "b"))
        with pytest.raises(ValueError, match="two classes"):
            TaskSpec(kind="multilabel-diagnosis", classes=("a",))
        with pytest.raises(ValueError, match="unique"):
            TaskSpec(kind="multilabel-diagnosis", classes=("a", "a"))
        with pytest.raises(ValueError, match="one-to-one"):
            TaskSpec(kind="multilabel-diagnosis", classes=("a", "b"), prompts=("p",))
        with pytest.raises(ValueError, match="nonempty"):
            TaskSpec(kind="multilabel-diagnosis", classes=("a", "b"), prompts=("p", " "))

    def test_report_rejects_out_of_range_metrics(self):
        with pytest.raises(ValueError, match="macro_auc"):
            EvalReport(
                setting="zero-shot", per_class_auc={}, macro_auc=1.2, macro_f1=0.0, accuracy=0.0, n_eval=1
            )

    def test_report_lines_layout(self):
        report = EvalReport(
            setting="linear-probe",
            per_class_auc={"SLOW": 0.9, "FAST": 0.8},
            macro_auc=0.85,
            macro_f1=0.5,
            accuracy=0.75,
            n_eval=24,
        )
        lines = report.lines()
        assert lines[0] == "setting\tlinear-probe"
        assert lines[1] == "n_eval\t24"
        assert "macro_auc\t0.850000" in lines
        assert "auc[SLOW]\t0.900000" in lines
        assert "auc[FAST]\t0.800000" in lines


class TestZeroShot:
    def test_requires_prompts(self, trained, eval_split):
        _, checkpoint = trained
        records, _ = eval_split
        task = TaskSpec(kind="multilabel-diagnosis", classes=("SLOW", "FAST"))
        with pytest.raises(EvalError, match="prompts"):
            zero_shot_classify(records, task, checkpoint)

    def test_scores_shape_range_and_determinism(self, trained, rate_task, eval_split):
        _, checkpoint = trained
        records, _ = eval_split
        scores = zero_shot_classify(records, rate_task, checkpoint)
        assert scores.shape == (len(records), 2)
        assert np.all(np.abs(scores) <= 1.0 + 1e-9)
        assert np.array_equal(scores, zero_shot_classify(records, rate_task, checkpoint))

    def test_separates_held_out_classes(self, trained, rate_task, eval_split):
        _, checkpoint = trained
        records, labels = eval_split
        report = zero_shot_report(records, labels, rate_task, checkpoint)
        assert report.setting == "zero-shot"
        assert report.n_eval == len(records)
        assert report.macro_auc >= 0.85
        assert set(report.per_class_auc) == {"SLOW", "FAST"}


class TestLinearProbe:
    def test_probing_leaves_the_encoder_untouched(self, trained, rate_task):
        pairs, checkpoint = trained
        records = [p.record for p in pairs]
        labels = [p.record.labels for p in pairs]
        digest_before = params_digest(checkpoint.to_model())
        linear_probe(records, labels, rate_task, checkpoint)
        assert params_digest(checkpoint.to_model()) == digest_before

    def test_deterministic_solution(self, trained, rate_task):
        pairs, checkpoint = trained
        records = [p.record for p in pairs]
        labels = [p.record.labels for p in pairs]
        head_a, report_a = linear_probe(records, labels, rate_task, checkpoint)
        head_b, report_b = linear_probe(records, labels, rate_task, checkpoint)
        assert np.array_equal(head_a.weight, head_b.weight)
        assert np.array_equal(head_a.bias, head_b.bias)
        assert report_a == report_b

    def test_separates_held_out_classes(self, trained, rate_task, eval_split):
        pairs, checkpoint = trained
        records = [p.record for p in pairs]
        labels = [p.record.labels for p in pairs]
        eval_records, eval_labels = eval_split
        _, report = linear_probe(
            records, labels, rate_task, checkpoint, eval_records=eval_records, eval_labels=eval_labels
        )
        assert report.setting == "linear-probe"
        assert report.macro_auc >= 0.95

    def test_defaults_to_evaluating_on_the_training_split(self, trained, rate_task):
        pairs, checkpoint = trained
        records = [p.record for p in pairs[:12]]
        labels = [p.record.labels for p in pairs[:12]]
        _, report = linear_probe(records, labels, rate_task, checkpoint)
        assert report.n_eval == 12

    def test_class_missing_from_training_is_excluded(self, trained, rate_task, eval_split, caplog):
        pairs, checkpoint = trained
        slow_only = [p.record for p in pairs if "SLOW" in p.record.labels]
        labels = [("SLOW",)] * len(slow_only)
        eval_records, eval_labels = eval_split
        with caplog.at_level("WARNING"):
            _, report = linear_probe(
                slow_only, labels, rate_task, checkpoint, eval_records=eval_records, eval_labels=eval_labels
            )
        assert "absent from probe training labels" in caplog.text
        assert set(report.per_class_auc) == {"SLOW"}

    def test_head_scores_are_an_affine_map(self, rng):
        head = ProbeHead(weight=rng.normal(size=(3, 5)), bias=rng.normal(size=3), classes=("a", "b", "c"))
        emb = rng.normal(size=(7, 5))
        assert np.allclose(head.scores(emb), emb @ head.weight.T + head.bias, atol=1e-12)


class TestFineTune:
    def test_zero_epochs_keeps_the_probe_solution(self, trained, rate_task):
        pairs, checkpoint = trained
        records = [p.record for p in pairs]
        labels = [p.record.labels for p in pairs]
        classifier, _ = fine_tune(records, labels, rate_task, checkpoint, FineTuneConfig(epochs=0))
        head, _ = linear_probe(records, labels, rate_task, checkpoint)
        assert np.allclose(classifier.head.weight.detach().numpy(), head.weight, atol=1e-6)
        assert np.allclose(classifier.head.bias.detach().numpy(), head.bias, atol=1e-6)

    def test_short_run_separates_held_out_classes(self, trained, rate_task, eval_split):
        pairs, checkpoint = trained
        records = [p.record for p in pairs]
        labels = [p.record.labels for p in pairs]
        eval_records, eval_labels = eval_split
        _, report = fine_tune(
            records,
            labels,
            rate_task,
            checkpoint,
            FineTuneConfig(epochs=2),
            eval_records=eval_records,
            eval_labels=eval_labels,
        )
        assert report.setting == "fine-tune"
        assert report.macro_auc >= 0.95

    def test_deterministic_given_the_seed(self, trained, rate_task):
        pairs, checkpoint = trained
        records = [p.record for p in pairs[:16]]
        labels = [p.record.labels for p in pairs[:16]]
        config = FineTuneConfig(epochs=2, seed=3)
        clf_a, report_a = fine_tune(records, labels, rate_task, checkpoint, config)
        clf_b, report_b = fine_tune(records, labels, rate_task, checkpoint, config)
        assert report_a == report_b
        for pa, pb in zip(clf_a.parameters(), clf_b.parameters()):
            assert pa.detach().equal(pb.detach())


class TestPairLossReport:
    def test_components_and_total_are_consistent(self, trained):
        pairs, checkpoint = trained
        report = pair_loss_report(checkpoint, make_pairs(16, seed=4))
        assert set(report) == {"contrastive", "captioning", "total"}
        assert all(np.isfinite(v) and v >= 0.0 for v in report.values())
        weights = checkpoint.config.weights
        expected = weights.lambda_con * report["contrastive"] + weights.lambda_cap * report["captioning"]
        assert report["total"] == pytest.approx(expected, rel=1e-6)


class TestBudgetedSchedule:
    def test_batch_is_capped_by_the_corpus(self):
        config = _budgeted_config(tiny_config(), size=5, update_budget=10)
        assert config.batch_size == 5

    def test_updates_cover_the_budget(self):
        base = tiny_config()
        for size in (8, 24, 48):
            config = _budgeted_config(base, size=size, update_budget=30)
            updates = config.epochs * (size // config.batch_size)
            assert updates >= 30
            assert config.epochs >= 2
            assert 0 <= config.warmup_epochs < config.epochs
            assert config.lr_decay_every >= 1

    def test_warmup_is_matched_in_updates_not_epochs(self):
        # The whole budget fits in two epochs here, so a proportional (whole-epoch)
        # warmup would burn half of it ramping up; matched in updates it rounds to 0.
        config = _budgeted_config(tiny_config(), size=9600, update_budget=1200)
        assert config.epochs == 2
        assert config.warmup_epochs == 0


def smoke_corpus(with_mmd: bool = False) -> AblationCorpus:
    pairs = make_pairs(48)
    probe = make_pairs(24, seed=5)
    held_out = make_pairs(24, seed=9)
    task = TaskSpec(kind="multilabel-diagnosis", classes=("SLOW", "FAST"))
    mmd_records = [p.record for p in make_pairs(16, seed=11)] if with_mmd else None
    return AblationCorpus(
        pretrain_pairs=pairs,
        probe_records=[p.record for p in probe],
        probe_labels=[p.record.labels for p in probe],
        eval_records=[p.record for p in held_out],
        eval_labels=[p.record.labels for p in held_out],
        task=task,
        mmd_test_records=mmd_records,
        mmd_sample_size=16,
    )


class TestRunAblation:
    def test_rejects_bad_arguments(self):
        corpus = smoke_corpus()
        with pytest.raises(ValueError, match="unknown ablation kind"):
            run_ablation("dropout", [0.1], tiny_config(), corpus)
        with pytest.raises(ValueError, match="nonempty"):
            run_ablation("misalignment", [], tiny_config(), corpus)
        with pytest.raises(ValueError, match="update_budget"):
            run_ablation("datasize", [0], tiny_config(), corpus, update_budget=0)

    def test_misalignment_sweep_reports_every_point_and_a_baseline(self):
        result = run_ablation("misalignment", [0.0, 1.0], tiny_config(epochs=2), smoke_corpus())
        assert result.kind == "misalignment"
        assert [p.x for p in result.points] == [0.0, 1.0]
        assert all(p.error is None and 0.0 <= p.auc <= 1.0 for p in result.points)
        assert result.baseline_auc is not None and 0.0 <= result.baseline_auc <= 1.0
        assert "# random-init baseline auc" in result.table()

    def test_datasize_sweep_reports_auc_and_mmd(self):
        result = run_ablation(
            "datasize", [0, 16], tiny_config(epochs=2), smoke_corpus(with_mmd=True), update_budget=4
        )
        assert result.baseline_auc is None
        for point in result.points:
            assert point.error is None
            assert 0.0 <= point.auc <= 1.0
            assert point.mmd is not None and point.mmd >= 0.0

    def test_bad_grid_points_are_recorded_without_killing_the_sweep(self):
        result = run_ablation(
            "datasize", [1, 9999, 0], tiny_config(epochs=2), smoke_corpus(with_mmd=True), update_budget=4
        )
        by_x = {p.x: p for p in result.points}
        assert "contrastive batch" in by_x[1].error
        assert "outside the pool" in by_x[9999].error
        assert by_x[0].error is None and by_x[0].auc is not None

    def test_datasize_needs_mmd_records(self):
        result = run_ablation("datasize", [0], tiny_config(epochs=2), smoke_corpus(), update_budget=4)
        assert "mmd_test_records" in result.points[0].error

    def test_table_formats_values_and_errors(self, tmp_path):
        result = AblationResult(
            kind="datasize",
            points=[AblationPoint(x=0.5, auc=0.9, mmd=0.25), AblationPoint(x=1.0, error="boom")],
            baseline_auc=0.75,
        )
        lines = result.table().splitlines()
        assert lines[0] == "x\tauc\tmmd\terror"
        assert lines[1] == "# random-init baseline auc\t0.750000"
        assert lines[2] == "0.5\t0.900000\t0.250000\t"
        assert lines[3] == "1\t\t\tboom"
        path = result.write(tmp_path / "sweep.tsv")
        assert path.read_text(encoding="utf-8") == result.table()

    def test_random_init_checkpoint_is_untrained(self):
        pairs = make_pairs(8)
        checkpoint = random_init_checkpoint(pairs, tiny_config())
        assert checkpoint.epoch == 0
        assert checkpoint.loss_history == []
        assert checkpoint.optimizer_state == {}
        checkpoint.to_model()  # must rebuild cleanly
