import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mplab.replay import Batch, ReplayBuffer, Transition, TransitionLayout


LAYOUT = TransitionLayout(obs_dims=(3, 2), act_dims=(2, 2))


def make_transition(tag: float, terminal: bool = False) -> Transition:
    return Transition(
        x=np.full(5, tag),
        actions=[np.full(2, tag), np.full(2, tag)],
        rewards=np.array([tag, -tag]),
        x_next=np.full(5, tag + 0.5),
        terminal=terminal,
    )


class TestRingSemantics:
    def test_capacity_two_evicts_oldest(self):
        buf = ReplayBuffer(2, LAYOUT)
        for tag in (1.0, 2.0, 3.0):
            buf.push(make_transition(tag))
        assert buf.size == 2
        stored = buf.contents()
        np.testing.assert_array_equal(stored.x[:, 0], [2.0, 3.0])

    def test_empty_sample_rejected(self):
        buf = ReplayBuffer(4, LAYOUT)
        with pytest.raises(ValueError, match="empty"):
            buf.sample(1, np.random.default_rng(0))

    def test_layout_mismatch_rejected(self):
        buf = ReplayBuffer(4, LAYOUT)
        bad = make_transition(1.0)
        bad.x = np.zeros(4)
        with pytest.raises(ValueError, match="joint observation"):
            buf.push(bad)
        bad2 = make_transition(1.0)
        bad2.actions = [np.zeros(2)]
        with pytest.raises(ValueError, match="actions"):
            buf.push(bad2)

    def test_lazy_growth_preserves_order(self):
        buf = ReplayBuffer(100_000, LAYOUT)
        for tag in range(3000):
            buf.push(make_transition(float(tag)))
        stored = buf.contents()
        np.testing.assert_array_equal(stored.x[:, 0], np.arange(3000.0))

    def test_latest_window(self):
        buf = ReplayBuffer(5, LAYOUT)
        for tag in range(8):
            buf.push(make_transition(float(tag)))
        last3 = buf.latest(3)
        np.testing.assert_array_equal(last3.x[:, 0], [5.0, 6.0, 7.0])

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=120),
           st.integers(2, 7))
    @settings(max_examples=40, deadline=None)
    def test_fifo_invariants_under_random_sequences(self, ops, capacity):
        buf = ReplayBuffer(capacity, LAYOUT)
        rng = np.random.default_rng(0)
        pushed = []
        for k, op in enumerate(ops):
            if op == 0 or buf.size == 0:
                buf.push(make_transition(float(k)))
                pushed.append(float(k))
            else:
                batch = buf.sample(3, rng)
                window = pushed[-capacity:]
                assert all(v in window for v in batch.x[:, 0])
            assert buf.size == min(len(pushed), capacity)
        stored = buf.contents()
        np.testing.assert_array_equal(stored.x[:, 0], pushed[-capacity:])


class TestUniformSampling:
    def test_index_frequencies_within_three_sigma(self):
        buf = ReplayBuffer(10, LAYOUT)
        for tag in range(10):
            buf.push(make_transition(float(tag)))
        rng = np.random.default_rng(42)
        n = 100_000
        batch = buf.sample(n, rng)
        counts = np.bincount(batch.x[:, 0].astype(int), minlength=10)
        p = 0.1
        se = np.sqrt(p * (1 - p) / n)
        for c in counts:
            assert abs(c / n - p) < 3 * se

    def test_terminal_flags_round_trip(self):
        buf = ReplayBuffer(4, LAYOUT)
        buf.push(make_transition(1.0, terminal=False))
        buf.push(make_transition(2.0, terminal=True))
        stored = buf.contents()
        np.testing.assert_array_equal(stored.terminal, [False, True])

    def test_active_tags_tracked(self):
        buf = ReplayBuffer(4, LAYOUT, track_active=True)
        t = make_transition(1.0)
        t.active = (2, 0)
        buf.push(t)
        stored = buf.contents()
        np.testing.assert_array_equal(stored.active, [[2, 0]])
        missing = make_transition(2.0)
        with pytest.raises(ValueError, match="tags"):
            buf.push(missing)
