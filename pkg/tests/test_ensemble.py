import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affectkit import ensemble as E
from affectkit import trainer as T
from affectkit.model import predict


def grid_rows(c=3, steps=10):
    for parts in itertools.product(range(steps + 1), repeat=c - 1):
        if sum(parts) <= steps:
            yield tuple(p / steps for p in parts) + ((steps - sum(parts)) / steps,)


def find_vote_counterexample():
    """First 3-member set (grid order) where argmax of the mean differs from the plurality vote."""
    rows = [r for r in grid_rows() if len(set(r)) == 3]  # no within-row ties
    for a in rows:
        for b in rows:
            for c in rows:
                members = [np.array([r]) for r in (a, b, c)]
                votes = {int(np.argmax(r)) for r in (a, b, c)}
                if len(votes) == 3:
                    continue  # three-way split: vote is only a tie rule
                mean = E.average_probs(members)
                if len(set(np.round(mean[0], 12))) < 3:
                    continue
                if predict(mean)[0][0] != E.majority_vote(members)[0]:
                    return members
    return None


def random_simplex(r, n, c):
    p = r.random((n, c)) + 1e-3
    return p / p.sum(axis=1, keepdims=True)


class TestAverageProbs:
    def test_single_member(self, rng):
        p = random_simplex(rng, 4, 6)
        np.testing.assert_array_equal(E.average_probs([p]), p)

    def test_midpoint(self):
        np.testing.assert_allclose(E.average_probs([[[0.6, 0.4]], [[0.2, 0.8]]]), [[0.4, 0.6]], atol=1e-12)

    def test_four_members(self):
        rows = [[0.1, 0.2, 0.7], [0.3, 0.3, 0.4], [0.25, 0.5, 0.25], [0.9, 0.05, 0.05]]
        expected = [(0.1 + 0.3 + 0.25 + 0.9) / 4, (0.2 + 0.3 + 0.5 + 0.05) / 4, (0.7 + 0.4 + 0.25 + 0.05) / 4]
        np.testing.assert_allclose(E.average_probs([[r] for r in rows])[0], expected, atol=1e-9)

    def test_simplex_preserved(self):
        r = np.random.default_rng(1)
        for _ in range(1000):
            k, n, c = int(r.integers(1, 6)), int(r.integers(1, 5)), int(r.integers(2, 9))
            avg = E.average_probs([random_simplex(r, n, c) for _ in range(k)])
            np.testing.assert_allclose(avg.sum(axis=1), 1, atol=1e-6)
            assert (avg >= 0).all()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 5))
    def test_idempotent_and_order_free(self, seed, k):
        r = np.random.default_rng(seed)
        p = random_simplex(r, 3, 6)
        np.testing.assert_allclose(E.average_probs([p] * k), p, atol=1e-15)
        members = [random_simplex(r, 3, 6) for _ in range(4)]
        perm = [members[i] for i in r.permutation(4)]
        np.testing.assert_allclose(E.average_probs(perm), E.average_probs(members), atol=1e-15)

    def test_rejects(self):
        with pytest.raises(ValueError, match="shape"):
            E.average_probs([[[0.5, 0.5]], [[1.0, 0.0, 0.0]]])
        with pytest.raises(ValueError, match="simplex"):
            E.average_probs([[[0.5, 0.6]]])
        with pytest.raises(ValueError):
            E.average_probs([])


class TestAverageVA:
    def test_identical(self, rng):
        v = rng.uniform(-1, 1, (5, 2))
        np.testing.assert_allclose(E.average_va([v, v, v]), v, rtol=0, atol=1e-15)
        # float32 members are summed exactly in 64-bit, so the mean is bit-identical
        v32 = v.astype(np.float32)
        np.testing.assert_array_equal(E.average_va([v32, v32, v32]), v32)

    def test_symmetry(self):
        np.testing.assert_array_equal(E.average_va([[[-1, 1]], [[1, -1]]]), [[0, 0]])

    def test_convexity(self):
        r = np.random.default_rng(2)
        for _ in range(1000):
            members = [r.uniform(-1, 1, (4, 2)) for _ in range(3)]
            avg = E.average_va(members)
            lo, hi = np.min(members, axis=0), np.max(members, axis=0)
            assert (avg >= lo - 1e-15).all() and (avg <= hi + 1e-15).all()
            assert (np.abs(avg) <= 1).all()

    def test_out_of_box(self):
        with pytest.raises(ValueError):
            E.average_va([[[1.5, 0]]])


class TestVoteCounterexample:
    def test_found_and_average_rule_applies(self):
        members = find_vote_counterexample()
        assert members is not None
        mean = np.mean([m[0] for m in members], axis=0)
        avg_class = int(predict(E.average_probs(members))[0][0])
        assert avg_class == int(np.argmax(mean))
        assert avg_class != int(E.majority_vote(members)[0])

    def test_majority_vote_plurality(self):
        members = [[[0.6, 0.4]], [[0.7, 0.3]], [[0.0, 1.0]]]
        assert E.majority_vote(members).tolist() == [0]
        assert predict(E.average_probs(members))[0].tolist() == [1]


@pytest.fixture(scope="module")
def members(lsd_dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("ens")
    paths = []
    for seed in range(4):
        cfg = T.TrainConfig(
            task="lsd", epochs=2, batch_size=32, base_lr=3e-3, seed=seed, checkpoint=str(root / f"m{seed}"),
            input_size=16, channels=(4, 8), feature_dim=16,
        )
        paths.append(T.fit(cfg, lsd_dataset).last)
    return paths


@pytest.fixture(scope="module")
def lsd_split(lsd_dataset):
    mean, std = T.manifest_stats(lsd_dataset, "lsd")
    return T.load_split(lsd_dataset, "lsd", mean, std, 16)


class TestEnsembleEvaluate:
    def test_single_member_matches_member(self, members, lsd_split):
        ens = E.EnsembleSet.load(members[:1])
        rep = E.ensemble_evaluate(ens, lsd_split, "lsd")
        solo = T.evaluate_model(T.load_model(members[0]), lsd_split)
        assert rep.ensemble.to_text() == solo.to_text() == rep.members[0][1].to_text()

    def test_copies_are_idempotent(self, members, lsd_split):
        rep = E.ensemble_evaluate(E.EnsembleSet.load([members[1]] * 4), lsd_split, "lsd", threads=2)
        solo = T.evaluate_model(T.load_model(members[1]), lsd_split)
        assert rep.ensemble.to_text() == solo.to_text()

    def test_table_layout(self, members, lsd_split):
        names = ["m0", "m1", "m2", "m3"]
        rep = E.ensemble_evaluate(E.EnsembleSet.load(members, names), lsd_split, "lsd")
        lines = rep.to_text().splitlines()
        assert lines[0] == "method,Anger,Disgust,Fear,Happiness,Sadness,Surprise,avg"
        assert [l.split(",")[0] for l in lines[1:]] == names + ["Ensemble"]
        for line in lines[1:]:
            cells = [float(v) for v in line.split(",")[1:]]
            assert cells[-1] == pytest.approx(sum(cells[:-1]) / 6, abs=1e-5)

    def test_incompatible_member_named(self, members, tmp_path, mtl_dataset):
        cfg = T.TrainConfig(task="mtl", epochs=1, checkpoint=str(tmp_path / "mtl"), input_size=16, channels=(4, 8), feature_dim=16)
        other = T.fit(cfg, mtl_dataset).last
        with pytest.raises(ValueError, match="member other"):
            E.EnsembleSet.load([members[0], other], names=["first", "other"])

    def test_task_mismatch(self, members, lsd_split):
        with pytest.raises(ValueError):
            E.ensemble_evaluate(E.EnsembleSet.load(members[:1]), lsd_split, "mtl")

    def test_unloadable_member(self, tmp_path):
        bad = tmp_path / "x.ckpt"
        bad.write_bytes(b"nope")
        with pytest.raises(ValueError, match="x.ckpt"):
            E.EnsembleSet.load([bad])
