import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcfs.data import (
    ClassicalDataset,
    gen_parity,
    gen_quantum_dataset,
    histogram_l1_delta,
    load_breast_cancer,
    parity_labels,
    read_wdbc,
)
from lcfs.sim import Binding, Circuit, Gate, apply, build_alternating_layered, build_brick_reuploading, load_states


class TestParity:
    def test_examples(self):
        assert parity_labels(np.array([[1, -1, 1, 1]]), [1, 2]).tolist() == [-1]
        assert parity_labels(-np.ones((1, 6)), range(1, 7)).tolist() == [1]

    def test_balance(self):
        ds = gen_parity(8, [1, 5], 10_000, np.random.default_rng(0))
        assert abs(ds.y.mean()) <= 0.05
        assert set(np.unique(ds.X)) == {-1.0, 1.0}

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_invariant_to_flips_outside_subset(self, seed):
        rng = np.random.default_rng(seed)
        ds = gen_parity(6, [2, 4], 50, rng)
        flip = np.ones(6)
        flip[[0, 2, 4, 5]] = rng.choice([-1, 1], 4)
        assert np.array_equal(parity_labels(ds.X * flip, [2, 4]), ds.y)

    def test_reproducible(self):
        a = gen_parity(8, [1, 2], 80, np.random.default_rng(9))
        b = gen_parity(8, [1, 2], 80, np.random.default_rng(9))
        assert a.to_json() == b.to_json()
        assert len(a) == 80 and a.n_features == 8 and a.feature_names[0] == "x1"

    def test_errors(self):
        rng = np.random.default_rng(0)
        for bad in ([], [0], [9], [1, 1]):
            with pytest.raises(ValueError):
                gen_parity(8, bad, 10, rng)

    def test_json_round_trip(self, tmp_path):
        ds = gen_parity(4, [1], 5, np.random.default_rng(1), seed=1)
        back = ClassicalDataset.from_json(ds.to_json(tmp_path / "d.json"))
        np.testing.assert_array_equal(back.X, ds.X)
        assert back.seed == 1 and json.loads((tmp_path / "d.json").read_text())["split"] == "train"

    def test_label_validation(self):
        with pytest.raises(ValueError):
            ClassicalDataset(np.zeros((2, 2)), np.array([1, 0]))


class TestBreastCancer:
    def test_class_counts(self):
        X, y, names = read_wdbc()
        assert X.shape == (569, 30)
        assert (int(np.sum(y == 1)), int(np.sum(y == -1))) == (212, 357)
        assert len(names) == 30

    def test_full_table_is_standardized(self):
        full, empty = load_breast_cancer(rng=np.random.default_rng(0), n_train=569, n_test=0)
        np.testing.assert_allclose(full.X.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(full.X.std(axis=0), 1.0, atol=1e-12)
        assert len(empty) == 0

    def test_split_statistics(self):
        # an 80-row draw without replacement has a per-feature mean with standard error
        # sqrt((1/80) * (569 - 80) / 568); single splits are held to four standard errors,
        # the 0.15 / [0.8, 1.2] bounds apply to averages over draws
        se = np.sqrt((569 - 80) / (80 * 568))
        means, stds = [], []
        for seed in range(50):
            tr, te = load_breast_cancer(rng=np.random.default_rng(seed))
            for ds in (tr, te):
                assert ds.X.shape == (80, 12)
                assert np.all(np.abs(ds.X.mean(axis=0)) <= 4 * se)
                means.append(ds.X.mean(axis=0))
                stds.append(ds.X.std(axis=0))
        assert np.all(np.abs(np.mean(means, axis=0)) <= 0.15)
        s = np.mean(stds, axis=0)
        assert np.all((s >= 0.8) & (s <= 1.2))

    def test_disjoint_and_reproducible(self):
        X, _, _ = read_wdbc()
        tr, te = load_breast_cancer(rng=np.random.default_rng(3))
        tr2, _ = load_breast_cancer(rng=np.random.default_rng(3))
        np.testing.assert_array_equal(tr.X, tr2.X)
        rows = {tuple(r) for r in tr.X}
        assert not rows.intersection(tuple(r) for r in te.X)

    def test_feature_subset(self):
        tr, _ = load_breast_cancer(feature_indices=[29, 0, 5], rng=np.random.default_rng(0))
        assert tr.X.shape == (80, 3)
        assert tr.feature_names[0] == read_wdbc()[2][29]

    def test_feature_index_errors(self):
        with pytest.raises(ValueError):
            load_breast_cancer(feature_indices=[0, 1, 1])
        with pytest.raises(ValueError):
            load_breast_cancer(feature_indices=[30])

    def _write(self, path, rows):
        path.write_text("\n".join(",".join(r) for r in rows) + "\n")
        return path

    def test_malformed_files(self, tmp_path):
        header = [f"f{i}" for i in range(30)] + ["diagnosis"]
        good = ["1.0"] * 30 + ["M"]
        with pytest.raises(ValueError, match="columns"):
            read_wdbc(self._write(tmp_path / "a.csv", [header[:-2] + ["diagnosis"], good[:-2] + ["M"]]))
        with pytest.raises(ValueError, match="non-numeric"):
            read_wdbc(self._write(tmp_path / "b.csv", [header, ["x"] + good[1:]]))
        with pytest.raises(ValueError, match="M or B"):
            read_wdbc(self._write(tmp_path / "c.csv", [header, good[:-1] + ["Q"]]))
        with pytest.raises(ValueError, match="cells"):
            read_wdbc(self._write(tmp_path / "d.csv", [header, good[:-1]]))
        X, y, _ = read_wdbc(self._write(tmp_path / "e.csv", [header, good, good[:-1] + ["B"]]))
        assert y.tolist() == [1, -1]


class TestHistogramDelta:
    def test_identical(self, rng):
        a = rng.normal(size=500)
        assert histogram_l1_delta(a, a.copy()) == 0.0

    def test_disjoint(self):
        assert histogram_l1_delta(np.zeros(10), np.ones(7)) == pytest.approx(2.0)

    def test_shifted_normals(self):
        rng = np.random.default_rng(0)
        assert histogram_l1_delta(rng.normal(size=10_000), rng.normal(5.0, size=10_000)) >= 1.9

    def test_bounded(self, rng):
        for _ in range(20):
            v = histogram_l1_delta(rng.normal(size=50), rng.normal(0.5, size=80), bins=int(rng.integers(2, 100)))
            assert 0.0 <= v <= 2.0 + 1e-12

    def test_empty(self):
        with pytest.raises(ValueError):
            histogram_l1_delta(np.array([]), np.ones(2))


class TestQuantumData:
    def test_labels_from_hidden_key_qubit(self):
        ds = gen_quantum_dataset(6, 200, np.random.default_rng(0))
        assert ds.key_qubit == 3
        f = ds.hidden[:, 3]
        z = np.abs(f[:, 0]) ** 2 - np.abs(f[:, 1]) ** 2
        np.testing.assert_array_equal(ds.y, np.where(z >= 0, 1, -1))
        np.testing.assert_array_equal(ds.recompute_labels(), ds.y)

    def test_balance(self):
        ds = gen_quantum_dataset(4, 1000, np.random.default_rng(1))
        assert abs(np.mean(ds.y == 1) - 0.5) <= 0.1

    def test_stored_states_are_scrambled_hidden_states(self):
        ds = gen_quantum_dataset(4, 10, np.random.default_rng(2))
        plain = np.stack([np.kron(np.kron(np.kron(h[0], h[1]), h[2]), h[3]) for h in ds.hidden])
        np.testing.assert_allclose(ds.states, apply(ds.scramble, None, ds.theta_star, plain), atol=1e-13)
        assert ds.scramble.n_params == 4 and np.all(np.abs(ds.theta_star) <= np.pi)

    def test_identity_scramble(self):
        c = Circuit(4, tuple(Gate("ry", (q,), Binding.trainable(q)) for q in range(4)))
        ds = gen_quantum_dataset(4, 8, np.random.default_rng(3), theta_star=np.zeros(4), scramble=c)
        plain = np.stack([np.kron(np.kron(np.kron(h[0], h[1]), h[2]), h[3]) for h in ds.hidden])
        np.testing.assert_allclose(ds.states, plain, atol=1e-15)

    def test_reproducible(self):
        a = gen_quantum_dataset(6, 20, np.random.default_rng(4), scramble_depth=2)
        b = gen_quantum_dataset(6, 20, np.random.default_rng(4), scramble_depth=2)
        assert a.states.tobytes() == b.states.tobytes()
        np.testing.assert_array_equal(a.theta_star, b.theta_star)

    def test_export(self, tmp_path):
        ds = gen_quantum_dataset(4, 5, np.random.default_rng(5))
        p = ds.export(tmp_path / "q.bin")
        states, meta = load_states(p)
        np.testing.assert_array_equal(states, ds.states)
        assert meta["labels"] == ds.y.tolist() and meta["key_qubit"] == 2
        assert meta["qubit_order"] == "big-endian"

    def test_errors(self):
        with pytest.raises(ValueError):
            gen_quantum_dataset(5, 4, np.random.default_rng(0))
        with pytest.raises(ValueError):
            gen_quantum_dataset(4, 4, np.random.default_rng(0), scramble=build_brick_reuploading(4, 1))

    def test_default_scramble_shape(self):
        ds = gen_quantum_dataset(8, 3, np.random.default_rng(6))
        assert ds.scramble.to_dict() == build_alternating_layered(8, 1).to_dict()
        assert ds.states.shape == (3, 256) and len(ds) == 3 and ds.n_qubits == 8
