"""Selective scan: direction permutations, recurrence oracles, gradients,
and the bounded-state decay property."""
import numpy as np
import pytest

from fabme import tensor as T
from fabme.scan import (
    DIRECTIONS, ScanParams, cross_scan, direction_perm, flatten_direction,
    selective_scan, selective_scan_1d, ss2d, unflatten_direction,
)
from fabme.tensor import Tensor


class TestCrossScan:
    def test_2x2_permutation_oracle(self):
        # tokens a,b,c,d in row-major order
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        want = {"lr": [0, 1, 2, 3], "rl": [3, 2, 1, 0], "tb": [0, 2, 1, 3], "bt": [3, 1, 2, 0]}
        for d, order in want.items():
            seq = flatten_direction(x, d)
            assert seq.data[0, :, 0].tolist() == [float(v) for v in order], d

    def test_single_token(self, rng):
        x = Tensor(rng.standard_normal((1, 3, 1, 1)))
        seqs = cross_scan(x)
        assert len(seqs) == 4
        for s in seqs:
            assert s.tokens.data.shape == (1, 1, 3)
            assert np.array_equal(s.tokens.data[0, 0], x.data[0, :, 0, 0])

    def test_inverse_exhaustive_up_to_4(self):
        for h in range(1, 5):
            for w in range(1, 5):
                x = Tensor(np.random.default_rng(h * 8 + w).standard_normal((2, 3, h, w)))
                for d in DIRECTIONS:
                    back = unflatten_direction(flatten_direction(x, d), d, h, w)
                    assert np.array_equal(back.data, x.data), (h, w, d)

    def test_each_direction_is_bijection(self):
        for h in range(1, 5):
            for w in range(1, 5):
                for d in DIRECTIONS:
                    perm = direction_perm(h, w, d)
                    assert sorted(perm.tolist()) == list(range(h * w))

    def test_flatten_gradcheck(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 2)))
        m = Tensor(rng.standard_normal((1, 6, 2)))
        for d in DIRECTIONS:
            rep = T.grad_check(lambda a: T.tsum(T.mul(flatten_direction(a, d), m)),
                               [Tensor(x.data.copy())])
            assert rep.passed, (d, str(rep))


class TestSelectiveScan:
    def test_scalar_hand_unrolled(self):
        # d_model = d_state = 1, Abar = 0.5 (dt=1, A=ln 0.5), Bbar = C = 1, D = 0
        x = Tensor(np.array([1.0, 0.0, 0.0]).reshape(1, 3, 1))
        dt = Tensor(np.ones((1, 3, 1)))
        A = Tensor(np.array([[np.log(0.5)]]))
        B = Tensor(np.ones((1, 3, 1)))
        C = Tensor(np.ones((1, 3, 1)))
        D = Tensor(np.zeros(1))
        y = selective_scan(x, dt, A, B, C, D)
        assert np.allclose(y.data.reshape(-1), [1.0, 0.5, 0.25], atol=1e-15)

    def test_length_one_no_history(self, rng):
        x = Tensor(rng.standard_normal((2, 1, 3)))
        dt = Tensor(rng.random((2, 1, 3)) + 0.1)
        A = Tensor(-rng.random((3, 4)) - 0.5)
        B = Tensor(rng.standard_normal((2, 1, 4)))
        C = Tensor(rng.standard_normal((2, 1, 4)))
        D = Tensor(rng.standard_normal(3))
        y = selective_scan(x, dt, A, B, C, D)
        want = (np.einsum("nk,ndk->nd", C.data[:, 0],
                          (dt.data[:, 0] * x.data[:, 0])[:, :, None] * B.data[:, 0][:, None, :])
                + D.data * x.data[:, 0])
        assert np.allclose(y.data[:, 0], want, atol=1e-14)

    def test_zero_memory_limit(self, rng):
        # A -> -inf makes the recurrence memoryless: y_t = C_t.(dt B_t x_t) + D x_t
        x = Tensor(rng.standard_normal((1, 5, 2)))
        dt = Tensor(rng.random((1, 5, 2)) + 0.2)
        A = Tensor(np.full((2, 3), -1e9))
        B = Tensor(rng.standard_normal((1, 5, 3)))
        C = Tensor(rng.standard_normal((1, 5, 3)))
        D = Tensor(rng.standard_normal(2))
        y = selective_scan(x, dt, A, B, C, D)
        per_token = (np.einsum("nlk,nldk->nld", C.data,
                               (dt.data * x.data)[:, :, :, None] * B.data[:, :, None, :])
                     + D.data * x.data)
        assert np.allclose(y.data, per_token, atol=1e-12)

    def test_nonpositive_dt_rejected(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 2)))
        dt = Tensor(np.zeros((1, 2, 2)))
        A = Tensor(-np.ones((2, 2)))
        B = Tensor(rng.standard_normal((1, 2, 2)))
        C = Tensor(rng.standard_normal((1, 2, 2)))
        D = Tensor(np.ones(2))
        with pytest.raises(ValueError, match="step size"):
            selective_scan(x, dt, A, B, C, D)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_raw_scan_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 4, 2)))
        dt = Tensor(rng.random((2, 4, 2)) * 0.5 + 0.05)
        A = Tensor(-rng.random((2, 3)) - 0.2)
        B = Tensor(rng.standard_normal((2, 4, 3)))
        C = Tensor(rng.standard_normal((2, 4, 3)))
        D = Tensor(rng.standard_normal(2))
        rep = T.grad_check(lambda *ts: T.tsum(T.silu(selective_scan(*ts))),
                           [x, dt, A, B, C, D])
        assert rep.passed, str(rep)

    def test_state_decay_bound(self):
        # Abar in (0,1) with dt>0, A<0; scalar case bounded by geometric series
        L = 64
        x = Tensor(np.ones((1, L, 1)))
        dt = Tensor(np.full((1, L, 1), 0.7))
        A = Tensor(np.array([[-1.0]]))
        B = Tensor(np.full((1, L, 1), 0.9))
        C = Tensor(np.full((1, L, 1), 0.8))
        D = Tensor(np.array([0.5]))
        abar = np.exp(0.7 * -1.0)
        assert 0.0 < abar < 1.0
        bound = 0.8 * (0.7 * 0.9) / (1.0 - abar) + 0.5
        y = selective_scan(x, dt, A, B, C, D)
        assert np.all(np.abs(y.data) <= bound + 1e-12)

    def test_abar_in_unit_interval(self, rng):
        p = ScanParams.create(4, d_state=3, rng=rng)
        seq = Tensor(rng.standard_normal((1, 6, 4)))
        dt_pre = seq.data @ p.w_dt_down.data.T @ p.w_dt_up.data.T + p.dt_bias.data
        dt = np.logaddexp(0.0, dt_pre)
        A = -np.exp(p.a_log.data)
        abar = np.exp(dt[:, :, :, None] * A[None, None])
        assert np.all(abar > 0.0) and np.all(abar < 1.0)


class TestSS2D:
    def test_shape_preserved(self, rng):
        x = Tensor(rng.standard_normal((2, 16, 8, 8)))
        p = ScanParams.create(16, rng=rng)
        assert ss2d(x, p).data.shape == (2, 16, 8, 8)

    def test_memoryless_limit_directions_agree(self, rng):
        p = ScanParams.create(4, d_state=2, rng=rng)
        p.a_log.data[:] = np.log(1e9)  # A = -1e9 -> Abar ~ 0
        x = Tensor(rng.standard_normal((1, 4, 3, 3)))
        outs = [unflatten_direction(selective_scan_1d(s.tokens, p), s.direction, s.h, s.w).data
                for s in cross_scan(x)]
        for o in outs[1:]:
            assert np.allclose(outs[0], o, atol=1e-12)
        assert np.allclose(ss2d(x, p).data, 4.0 * outs[0], atol=1e-10)

    def test_channel_mismatch_rejected(self, rng):
        p = ScanParams.create(4, rng=rng)
        with pytest.raises(T.ShapeError, match="d_model"):
            ss2d(Tensor(rng.standard_normal((1, 3, 2, 2))), p)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_ss2d_full_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        p = ScanParams.create(4, d_state=2, rng=rng)
        x = Tensor(rng.standard_normal((1, 4, 3, 3)))
        wrt = [x] + [t for _, t in p.named_parameters()]
        rep = T.grad_check(lambda *ts: T.tsum(T.silu(ss2d(ts[0], p))), wrt)
        assert rep.passed, str(rep)
