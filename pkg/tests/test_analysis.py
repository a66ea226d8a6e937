import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pih2t.analysis import (
    boundary_counts,
    export_embeddings,
    force_balance_counts,
    force_balance_report,
    force_oracle_correct,
    force_oracle_wrong,
    margin_audit,
    margin_gaps,
    oracle_report_csv,
    pca_2d,
)
from pih2t.longtail_data import LabeledDataset, build_exponential_profile, synth_gaussian_longtail
from pih2t.trainer import BackboneSpec, TrainConfig, init_checkpoint, train_stage1, train_stage2

SPEC = BackboneSpec("mlp", (8,), (32,), (2, 2, 8))


@pytest.fixture(scope="module")
def toy():
    prof = build_exponential_profile(200, 4, 20)
    ds = synth_gaussian_longtail(4, 8, prof, 6.0, 1.0, seed=3)
    cfg = TrainConfig(stage1_epochs=15, stage2_epochs=2, batch_size=32, lr=0.05, lr_decay_epochs=(12,), mode="pi_h2t")
    s1 = train_stage1(ds, SPEC, cfg)
    return ds, s1, train_stage2(s1, ds, cfg)


class TestMargin:
    def test_gaps_brute_force(self):
        rng = np.random.default_rng(0)
        W, P = rng.standard_normal((5, 3)), rng.standard_normal((3, 5))
        gaps = margin_gaps(W, P)
        for y in range(3):
            for i in range(3):
                if y == i:
                    assert math.isnan(gaps[y, i])
                else:
                    want = sum(W[k, y] * P[y, k] for k in range(5)) - sum(W[k, i] * P[y, k] for k in range(5))
                    assert abs(gaps[y, i] - want) < 1e-12

    def test_identical_columns_give_zero(self):
        W = np.array([[1.0, 1.0, 0.0], [2.0, 2.0, 1.0]])
        assert margin_gaps(W, np.ones((3, 2)))[0, 1] == 0.0

    @settings(max_examples=200)
    @given(st.integers(2, 12), st.integers(1, 6), st.integers(0, 2**31))
    def test_channel_constant_pi_features_split_pairs_evenly(self, C, d, seed):
        # pooled PI features are s_y * 1, so gap(y, i) = s_y (sum w_y - sum w_i):
        # with s_y > 0 exactly one of (y, i), (i, y) is positive
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((d, C))
        P = rng.uniform(0.1, 3.0, C)[:, None] * np.ones((C, d))
        pos = np.nan_to_num(margin_gaps(W, P), nan=0.0) > 0
        assert pos.sum() == C * (C - 1) // 2
        assert np.all(pos ^ pos.T | np.eye(C, dtype=bool))

    def test_audit_on_init_and_trained(self, toy):
        ds, s1, _ = toy
        init = init_checkpoint(SPEC, 4, TrainConfig(mode="pi_h2t"))
        pre = margin_audit(init, ds)
        assert not pre.trained and pre.pairs == 12
        np.testing.assert_array_equal(pre.scale, np.zeros(8))
        post = margin_audit(s1, ds)
        assert post.trained and np.isfinite(post.class_pi).all()
        # F_PI is broadcast over channels, so every class vector is constant
        np.testing.assert_allclose(post.class_pi, post.class_pi[:, :1] * np.ones((1, 8)), rtol=1e-12)
        lines = post.to_csv().splitlines()
        assert lines[0] == "target,rival,gap,positive" and len(lines) == 13

    def test_audit_requires_pif(self, toy):
        ds, _, _ = toy
        with pytest.raises(ValueError, match="PIF"):
            margin_audit(init_checkpoint(SPEC, 4, TrainConfig(mode="dr_baseline")), ds)


class TestOracles:
    @pytest.mark.parametrize("fn", [force_oracle_correct, force_oracle_wrong])
    def test_no_violations(self, fn):
        res = fn(10_000, 8, seed=0)
        assert res.kept == 10_000 and res.drawn > res.kept
        assert res.violations == 0 and res.angle_violations == 0
        assert res.max_slack < 1e-9
        assert 0 < res.rejection_rate < 1

    def test_thread_count_invariance(self, monkeypatch):
        a = force_oracle_correct(9000, 4, seed=3)
        monkeypatch.setenv("PIH2T_THREADS", "3")
        assert force_oracle_correct(9000, 4, seed=3) == a

    def test_hand_built_correct_tail(self):
        w_t, w_h = np.array([2.0, 0.0]), np.array([0.0, 1.0])
        f_t, f_h, r = np.array([1.0, 0.5]), np.array([0.0, 3.0]), 0.5
        assert w_t @ f_t > w_h @ f_t  # 2 > 0.5
        fused = r * f_h + (1 - r) * f_t  # [0.5, 1.75]
        assert w_h @ fused > w_t @ fused  # 1.75 > 1.0
        delta = f_t - f_h  # [1, -2.5]
        assert w_t @ delta > w_h @ delta  # 2 > -2.5

    def test_hand_built_wrong_tail(self):
        w_t, w_h = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        f_t, f_h, r = np.array([0.2, 1.0]), np.array([3.0, 0.0]), 0.5
        assert w_h @ f_t > w_t @ f_t  # 1 > 0.2
        fused = r * f_t + (1 - r) * f_h  # [1.6, 0.5]
        assert w_t @ fused > w_h @ fused
        delta = f_t - f_h  # [-2.8, 1]
        cos_h = w_h @ delta / (np.linalg.norm(w_h) * np.linalg.norm(delta))
        cos_t = w_t @ delta / (np.linalg.norm(w_t) * np.linalg.norm(delta))
        assert np.linalg.norm(w_h) * cos_h > np.linalg.norm(w_t) * cos_t

    def test_premise_filter_excludes(self):
        # a tuple whose tail sample is misclassified never counts as correct-type
        W = np.array([[1.0, 0.0], [0.0, 1.0]])  # columns: class 0 (head), class 1 (tail)
        res = force_balance_counts(W, [np.array([1.0, 0.2])], [1], [np.array([2.0, 0.0])], [0], [0.5], [100, 5])
        assert res.pairs == 1 and res.correct_type == 0

    def test_csv_and_errors(self):
        csv_text = oracle_report_csv([force_oracle_wrong(50, 2, seed=1)])
        head, row = csv_text.splitlines()
        assert head == "oracle,trials,kept,violations,max_slack" and row.startswith("wrong@dim2,")
        with pytest.raises(ValueError):
            force_oracle_correct(0, 4, seed=0)
        with pytest.raises(ValueError):
            force_oracle_wrong(10, 1, seed=0)


class TestForceBalance:
    def test_perfect_fit_has_no_wrong_type(self):
        # score = f itself: every sample is classified by its own axis
        W = np.eye(2)
        f_fused = [np.array([0.1, 1.0]), np.array([0.0, 2.0])]
        f_fusing = [np.array([3.0, 0.0]), np.array([1.0, 0.1])]
        res = force_balance_counts(W, f_fused, [1, 1], f_fusing, [0, 0], [0.5, 0.5], [100, 5])
        assert res.wrong_type == 0 and res.pairs == 2

    def test_same_label_pairs_skipped(self):
        res = force_balance_counts(np.eye(2), [np.ones(2)], [0], [np.ones(2)], [0], [0.5], [10, 5])
        assert res.pairs == 0 and math.isnan(res.ratio)

    def test_report_on_trained_model(self, toy):
        ds, _, s2 = toy
        res = force_balance_report(s2, ds, batches=5, batch_size=64)
        assert res.pairs > 0 and res.correct_type > res.wrong_type


class TestPCA:
    def test_single_point(self):
        proj, axes = pca_2d(np.array([[1.0, 2.0, 3.0]]))
        assert proj.tolist() == [[0.0, 0.0]] and not axes.any()

    def test_two_gaussians_align_with_mean_difference(self):
        rng = np.random.default_rng(4)
        mu = np.array([3.0, 1.0, -2.0, 0.5])
        X = np.vstack([rng.standard_normal((400, 4)) + mu, rng.standard_normal((400, 4)) - mu])
        _, axes = pca_2d(X)
        cos = abs(axes[0] @ mu) / np.linalg.norm(mu)
        assert math.degrees(math.acos(min(cos, 1.0))) < 5.0

    def test_matches_eigendecomposition(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((300, 5)) * np.array([5.0, 3.0, 1.0, 0.5, 0.1])
        _, axes = pca_2d(X)
        Xc = X - X.mean(0)
        vals, vecs = np.linalg.eigh(Xc.T @ Xc / len(X))
        for k, j in enumerate([-1, -2]):
            assert abs(abs(axes[k] @ vecs[:, j]) - 1) < 1e-6

    def test_2d_features_pass_through_none(self, toy):
        spec = BackboneSpec("mlp", (2,), (), (1, 1, 2))
        ck = init_checkpoint(spec, 2, TrainConfig(mode="ce_baseline"))
        ck.params["backbone.layers.0.weight"] = np.eye(2)
        ck.params["backbone.layers.0.bias"] = np.zeros(2)
        ds = LabeledDataset(np.array([[1.0, 2.0], [3.0, 0.5]]), [0, 1], 2)
        table = export_embeddings(ck, ds, "none")
        assert table.header[:5] == ("sample_id", "label", "prediction", "feat_0", "feat_1")
        assert [row[3:5] for row in table.rows] == [(1.0, 2.0), (3.0, 0.5)]


class TestExports:
    def test_pca_export_header_and_determinism(self, toy):
        ds, s1, _ = toy
        a = export_embeddings(s1, ds, "pca2d").to_csv()
        assert a == export_embeddings(s1, ds, "pca2d").to_csv()
        header = a.splitlines()[0].split(",")
        assert header == ["sample_id", "label", "prediction", "proj_x", "proj_y"] + [f"logit_{c}" for c in range(4)]
        assert len(a.splitlines()) == len(ds) + 1

    def test_single_point_export(self, toy):
        _, s1, _ = toy
        one = LabeledDataset(np.zeros((1, 8)), [0], 4)
        rows = export_embeddings(s1, one, "pca2d").rows
        assert len(rows) == 1 and rows[0][3:5] == (0.0, 0.0)

    def test_unknown_projector(self, toy):
        ds, s1, _ = toy
        with pytest.raises(ValueError):
            export_embeddings(s1, ds, "tsne")


class TestBoundary:
    def test_perfect(self):
        logits = np.array([[2.0, 0.0], [0.0, 2.0]])
        rep = boundary_counts(logits, [0, 1], 0, 1)
        assert (rep.a_to_b, rep.b_to_a) == (0, 0)

    def test_hand_built_four_points(self):
        logits = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [3.0, 1.0, 0.0], [0.0, 0.0, 5.0]])
        rep = boundary_counts(logits, [0, 0, 1, 1], 0, 1)
        # sample 1 (class 0) -> 1, sample 2 (class 1) -> 0, sample 3 (class 1) -> 2
        assert (rep.a_to_b, rep.b_to_a, rep.n_a, rep.n_b) == (1, 1, 2, 2)
        assert rep.mean_gap_a == (1.0 - 2.0) / 2 and rep.mean_gap_b == (2.0 + 0.0) / 2

    def test_errors(self):
        with pytest.raises(ValueError, match="unknown"):
            boundary_counts(np.zeros((2, 2)), [0, 1], 0, 5)
        with pytest.raises(ValueError):
            boundary_counts(np.zeros((2, 3)), [0, 0], 0, 2)
