import numpy as np
import pytest

from finessl.pace import PaceState, refresh_margins, update_counts


def _rows(*pairs):
    return np.array(pairs, dtype=np.float64)


def test_subthreshold_rows_ignored():
    state = PaceState(num_classes=2, zeta=0.7, window=10)
    update_counts(state, _rows([0.69, 0.31], [0.69, 0.31], [0.31, 0.69]))
    np.testing.assert_array_equal(state.counts, [0.0, 0.0])


def test_confident_rows_counted():
    state = PaceState(num_classes=2, zeta=0.7, window=10)
    update_counts(state, _rows([0.8, 0.2], [0.75, 0.25]))
    np.testing.assert_array_equal(state.counts, [2.0, 0.0])


def test_ring_buffer_eviction_hand_simulated():
    # window 2, increments [1,0],[0,1],[0,1] -> oldest drops: counts [0,2]
    state = PaceState(num_classes=2, zeta=0.7, window=2)
    update_counts(state, _rows([0.9, 0.1]))
    update_counts(state, _rows([0.1, 0.9]))
    update_counts(state, _rows([0.1, 0.9]))
    np.testing.assert_array_equal(state.counts, [0.0, 2.0])


def test_refresh_direct_evaluation():
    state = PaceState(num_classes=3, alpha_base=8.0)
    state.counts = np.array([10.0, 5.0, 0.0])
    delta, alpha_t = refresh_margins(state)
    np.testing.assert_allclose(state.beta, [1.0, 0.5, 0.0], atol=1e-15)
    np.testing.assert_allclose(delta, [0.0, 0.5, 1.0], atol=1e-15)
    assert alpha_t == pytest.approx(8.0, abs=1e-15)


def test_equal_counts_zero_alpha():
    state = PaceState(num_classes=3, alpha_base=8.0)
    state.counts = np.array([7.0, 7.0, 7.0])
    delta, alpha_t = refresh_margins(state)
    np.testing.assert_array_equal(delta, [0.0, 0.0, 0.0])
    assert alpha_t == 0.0


def test_cold_start_full_margins():
    state = PaceState(num_classes=3, alpha_base=8.0)
    delta, alpha_t = refresh_margins(state)
    np.testing.assert_array_equal(delta, [1.0, 1.0, 1.0])
    assert alpha_t == 8.0


def test_refresh_scale_invariant():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = int(rng.integers(2, 10))
        counts = rng.uniform(0, 50, c)
        counts[int(rng.integers(0, c))] = 0.0
        state = PaceState(num_classes=c, alpha_base=5.0)
        state.counts = counts.copy()
        d1, a1 = refresh_margins(state)
        state.counts = counts * float(rng.uniform(0.1, 100))
        d2, a2 = refresh_margins(state)
        np.testing.assert_allclose(d1, d2, atol=1e-12)
        assert a1 == pytest.approx(a2, abs=1e-12)


def test_invariants_under_random_updates():
    rng = np.random.default_rng(1)
    state = PaceState(num_classes=4, zeta=0.7, window=7)
    history = []
    for _ in range(40):
        batch = rng.dirichlet(np.ones(4) * 0.5, size=int(rng.integers(1, 9)))
        # oracle tracks raw per-step increments
        conf = batch.max(axis=1)
        winners = batch.argmax(axis=1)
        inc = np.bincount(winners[conf >= 0.7], minlength=4).astype(float)
        history.append(inc)
        update_counts(state, batch)
        expected = np.sum(history[-7:], axis=0)
        np.testing.assert_array_equal(state.counts, expected)
        delta, alpha_t = refresh_margins(state)
        if state.counts.max() > 0:
            assert state.beta.max() == pytest.approx(1.0, abs=1e-12)
            assert delta.min() == pytest.approx(0.0, abs=1e-12)
            np.testing.assert_allclose(delta, 1.0 - state.beta, atol=1e-12)
        else:
            np.testing.assert_array_equal(delta, np.ones(4))
        assert 0.0 <= alpha_t <= state.alpha_base + 1e-12


def test_windowed_equals_full_pass_when_window_covers_history():
    # literal full-pass recount oracle over every step seen so far
    rng = np.random.default_rng(2)
    state = PaceState(num_classes=3, zeta=0.6, window=100)
    all_rows = []
    for _ in range(30):
        batch = rng.dirichlet(np.ones(3), size=5)
        all_rows.append(batch)
        update_counts(state, batch)
    stacked = np.vstack(all_rows)
    conf = stacked.max(axis=1)
    winners = stacked.argmax(axis=1)
    full_pass = np.bincount(winners[conf >= 0.6], minlength=3).astype(float)
    np.testing.assert_array_equal(state.counts, full_pass)


def test_ema_mode_tracks_decay():
    state = PaceState(num_classes=2, zeta=0.5, mode="ema", ema_decay=0.9)
    update_counts(state, _rows([0.9, 0.1]))
    np.testing.assert_allclose(state.counts, [0.1, 0.0], atol=1e-15)
    update_counts(state, _rows([0.9, 0.1]))
    np.testing.assert_allclose(state.counts, [0.9 * 0.1 + 0.1, 0.0], atol=1e-15)


def test_validation():
    with pytest.raises(ValueError):
        PaceState(num_classes=0)
    with pytest.raises(ValueError):
        PaceState(num_classes=2, zeta=0.0)
    with pytest.raises(ValueError):
        PaceState(num_classes=2, mode="sliding")
