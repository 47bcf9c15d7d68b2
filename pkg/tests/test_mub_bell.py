import itertools
import unittest

import numpy as np

from src.errors import DimensionError
from src.mub_bell import (bell_state, build_mub_bases, certify_outcome_sets, forward_statistics,
                          invert_statistics, outcome_class_table, outcome_probability, pcj_closed_form,
                          povm_element)


class TestBases(unittest.TestCase):
    def test_pairwise_overlaps(self):
        for d in (2, 3, 5):
            bases = build_mub_bases(d)
            self.assertEqual(len(bases), d + 1)
            for a, b in itertools.combinations(range(d + 1), 2):
                overlaps = np.abs(bases[a].conj().T @ bases[b]) ** 2
                np.testing.assert_allclose(overlaps, 1.0 / d, atol=1e-10)

    def test_bases_are_read_only(self):
        with self.assertRaises(ValueError):
            build_mub_bases(3)[1][0, 0] = 0

    def test_dimension_limits(self):
        with self.assertRaises(DimensionError):
            build_mub_bases(4)
        with self.assertRaises(DimensionError):
            build_mub_bases(17)


class TestBellStates(unittest.TestCase):
    def test_qubit_states(self):
        s = 1 / np.sqrt(2)
        np.testing.assert_allclose(bell_state(2, 0, 0), [s, 0, 0, s], atol=1e-12)
        np.testing.assert_allclose(bell_state(2, 1, 1), [0, s, -s, 0], atol=1e-12)

    def test_qutrit_state(self):
        w = np.exp(2j * np.pi / 3)
        expected = np.zeros(9, dtype=complex)
        expected[0 * 3 + 1] = 1
        expected[1 * 3 + 2] = w ** 2
        expected[2 * 3 + 0] = w ** 4
        np.testing.assert_allclose(bell_state(3, 1, 2), expected / np.sqrt(3), atol=1e-12)

    def test_label_range(self):
        with self.assertRaises(ValueError):
            bell_state(3, 3, 0)


class TestPovm(unittest.TestCase):
    def test_computational_basis_elements(self):
        np.testing.assert_allclose(povm_element(2, 0, 0), np.diag([1, 0, 0, 1]), atol=1e-12)
        np.testing.assert_allclose(povm_element(2, 0, 1), np.diag([0, 1, 1, 0]), atol=1e-12)

    def test_rank_and_projector(self):
        element = povm_element(3, 2, 1)
        self.assertAlmostEqual(np.trace(element).real, 3.0, places=10)
        np.testing.assert_allclose(element @ element, element, atol=1e-10)

    def test_hermitian_and_positive(self):
        for d in (2, 3, 5):
            for j in range(d + 1):
                for c in range(d):
                    element = povm_element(d, j, c)
                    np.testing.assert_allclose(element, element.conj().T, atol=1e-12)
                    self.assertGreaterEqual(np.linalg.eigvalsh(element).min(), -1e-10, msg=f"d={d} j={j} c={c}")

    def test_index_errors(self):
        with self.assertRaises(IndexError):
            povm_element(3, 4, 0)

    def test_basis_zero_probabilities(self):
        for alpha, beta, c in itertools.product(range(2), repeat=3):
            expected = 1.0 if c == alpha else 0.0
            self.assertAlmostEqual(outcome_probability(2, 0, c, alpha, beta), expected, places=10)

    def test_probabilities_are_deterministic(self):
        for alpha, beta in itertools.product(range(3), repeat=2):
            probs = [outcome_probability(3, 2, c, alpha, beta) for c in range(3)]
            self.assertAlmostEqual(sum(probs), 1.0, places=10)
            for p in probs:
                self.assertLess(min(abs(p), abs(1 - p)), 1e-10)


class TestOutcomeSets(unittest.TestCase):
    def test_closed_form_examples(self):
        self.assertEqual(pcj_closed_form(2, 0, 1), {(1, 0), (1, 1)})
        self.assertEqual(pcj_closed_form(3, 1, 2), {(0, 1), (1, 1), (2, 1)})
        labels = pcj_closed_form(5, 3, 0)
        self.assertEqual(len(labels), 5)
        self.assertTrue(all((2 * a - b) % 5 == 0 for a, b in labels))

    def test_sets_partition_labels(self):
        d = 5
        for j in range(d + 1):
            union = set()
            for c in range(d):
                labels = pcj_closed_form(d, j, c)
                self.assertEqual(len(labels), d)
                self.assertFalse(union & labels)
                union |= labels
            self.assertEqual(len(union), d * d)

    def test_class_table_matches_sets(self):
        d = 3
        table = outcome_class_table(d)
        for j, c in itertools.product(range(d + 1), range(d)):
            for a, b in pcj_closed_form(d, j, c):
                self.assertEqual(table[j, a, b], c)

    def test_oracle_certification(self):
        for d in (2, 3, 5, 7):
            report = certify_outcome_sets(d)
            self.assertLess(report["max_overlap_deviation"], 1e-9)
            self.assertLess(report["max_completeness_residual"], 1e-10)
            self.assertLess(report["max_determinism_residual"], 1e-9)
            self.assertEqual(report["mismatches"], [], msg=f"d={d}")


class TestStatistics(unittest.TestCase):
    def test_noiseless_forward(self):
        lam = np.zeros((3, 3))
        lam[0, 0] = 100.0
        Q = forward_statistics(lam, 3)
        np.testing.assert_allclose(Q[:, 0], 1.0)
        np.testing.assert_allclose(Q[:, 1:], 0.0)

    def test_six_state_forward(self):
        Q = forward_statistics(np.array([[0.85, 0.05], [0.05, 0.05]]), 2)
        np.testing.assert_allclose(Q, [[0.9, 0.1]] * 3, atol=1e-12)

    def test_maximally_mixed_forward(self):
        Q = forward_statistics(np.full((3, 3), 1 / 9), 3)
        np.testing.assert_allclose(Q, 1 / 3, atol=1e-12)

    def test_inversion_examples(self):
        lam = invert_statistics(np.column_stack([np.ones(4), np.zeros((4, 2))]), 50.0, 3)
        expected = np.zeros((3, 3))
        expected[0, 0] = 50.0
        np.testing.assert_allclose(lam, expected, atol=1e-10)

        lam = invert_statistics(np.array([[0.9, 0.1]] * 3), 1.0, 2)
        np.testing.assert_allclose(lam, [[0.85, 0.05], [0.05, 0.05]], atol=1e-12)

        lam = invert_statistics(np.array([[0.9, 0.05, 0.05]] * 4), 1.0, 3)
        self.assertAlmostEqual(lam[0, 0], 2.6 / 3, places=10)
        others = np.delete(lam.ravel(), 0)
        np.testing.assert_allclose(others, 0.1 / 6, atol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(11)
        for d in (2, 3, 5):
            for _ in range(1000):
                lam = rng.dirichlet(np.ones(d * d)).reshape(d, d) * 1000.0
                back = invert_statistics(forward_statistics(lam, d), lam.sum(), d)
                np.testing.assert_allclose(back, lam, atol=1e-10 * 1000.0)


if __name__ == "__main__":
    unittest.main()
