"""State-space kernel tests: ZOH discretization against a long Taylor series,
scan equivalence against the materialized convolution filter, selective
projections against direct formulas."""

import math

import numpy as np
import pytest

import ssmflow.autodiff as ad
import ssmflow.ssm as ssm
from ssmflow.autodiff import Tape, Tensor, backward, grad_check
from ssmflow.errors import ContractError, DimensionError, DomainError


def taylor_phi(z, terms=64):
    """phi(z) = sum_{k>=0} z^k / (k+1)!, truncated, by Horner. Frozen oracle."""
    out = np.zeros_like(z)
    for k in range(terms - 1, -1, -1):
        out = out * z + 1.0 / math.factorial(k + 1)
    return out


class TestDiscretizeZoh:
    def test_closed_form_half_life(self):
        """A=-1 and delta=ln 2 halve the state per step."""
        abar, bbar = ssm.discretize_zoh(
            Tensor(np.full((1, 1), -1.0)), Tensor(np.full((1, 1), 3.0)), math.log(2.0)
        )
        np.testing.assert_allclose(abar.data, [[0.5]], rtol=1e-15)
        np.testing.assert_allclose(bbar.data, [[1.5]], rtol=1e-14)

    def test_a_to_zero_limit(self):
        """The series branch serves the A -> 0 limit: abar=1, bbar=delta*B."""
        abar, bbar = ssm.discretize_zoh(
            Tensor(np.zeros((2, 2))), Tensor(np.full((2, 2), 0.7)), 0.25
        )
        np.testing.assert_array_equal(abar.data, np.ones((2, 2)))
        np.testing.assert_allclose(bbar.data, np.full((2, 2), 0.175), rtol=1e-15)

    def test_against_taylor_series_oracle(self):
        rng = np.random.default_rng(42)
        a = -np.exp(rng.uniform(np.log(1e-8), np.log(5.0), (4, 8)))
        b = rng.uniform(-1, 1, (4, 8))
        abar, bbar = ssm.discretize_zoh(Tensor(a), Tensor(b), 1.0)
        expect_b = taylor_phi(a) * b
        np.testing.assert_allclose(abar.data, np.exp(a), rtol=1e-15)
        np.testing.assert_allclose(bbar.data, expect_b, rtol=1e-12)

    def test_both_sides_of_series_cutoff(self):
        z = -np.array([2e-4, 1.2e-4, 1e-4, 0.8e-4, 1e-5, 1e-8])
        abar, bbar = ssm.discretize_zoh(Tensor(z), Tensor(np.ones_like(z)), 1.0)
        np.testing.assert_allclose(bbar.data, taylor_phi(z), rtol=1e-13)

    def test_negative_delta_rejected(self):
        with pytest.raises(DomainError):
            ssm.discretize_zoh(Tensor(np.ones((1, 1))), Tensor(np.ones((1, 1))), -0.5)
        with pytest.raises(DomainError):
            ssm.discretize_zoh(Tensor(np.ones((1, 1))), Tensor(np.ones((1, 1))), 0.0)


def _random_dssm(rng, channels, state):
    return ssm.random_time_invariant_ssm(rng, channels, state)


class TestScanSequential:
    def test_zero_input(self):
        rng = np.random.default_rng(42)
        d = _random_dssm(rng, 3, 4)
        y = ssm.scan_sequential(d, Tensor(np.zeros((10, 3))))
        np.testing.assert_array_equal(y.data, np.zeros((10, 3)))

    def test_impulse_unrolls_the_recurrence(self):
        """Impulse response at lag j is c * abar^j * bbar for a scalar SSM."""
        d = ssm.DiscreteSSM(
            abar=Tensor([[0.8]]), bbar=Tensor([[0.6]]), c_out=Tensor([[1.3]]), delta=1.0
        )
        x = np.zeros((12, 1))
        x[0, 0] = 1.0
        y = ssm.scan_sequential(d, Tensor(x))
        expect = 1.3 * 0.8 ** np.arange(12) * 0.6
        np.testing.assert_allclose(y.data[:, 0], expect, rtol=1e-13)

    def test_matches_kernel_convolution(self):
        rng = np.random.default_rng(42)
        d = _random_dssm(rng, 3, 8)
        x = rng.uniform(-1, 1, (64, 3))
        y_scan = ssm.scan_sequential(d, Tensor(x))
        kernel = ssm.materialize_kernel(d, 64)
        y_conv = ssm.causal_conv_apply(kernel, Tensor(x))
        np.testing.assert_allclose(y_scan.data, y_conv.data, rtol=0, atol=1e-10)

    def test_selective_length_mismatch(self):
        rng = np.random.default_rng(42)
        proj = ssm.init_selective_proj(rng, 3, 4)
        sel = ssm.selective_project(Tensor(rng.uniform(-1, 1, (5, 3))), proj)
        with pytest.raises(DimensionError):
            ssm.scan_sequential(sel, Tensor(np.zeros((6, 3))))


class TestMaterializeKernel:
    def test_lag_zero_tap(self):
        """K_0 = c . bbar."""
        rng = np.random.default_rng(42)
        d = _random_dssm(rng, 2, 4)
        k = ssm.materialize_kernel(d, 5)
        np.testing.assert_allclose(
            k.data[0], (d.c_out.data * d.bbar.data).sum(axis=1), rtol=1e-14
        )

    def test_unit_transition_gives_constant_kernel(self):
        d = ssm.DiscreteSSM(
            abar=Tensor(np.ones((1, 2))),
            bbar=Tensor([[0.3, 0.4]]),
            c_out=Tensor([[1.0, 2.0]]),
            delta=1.0,
        )
        k = ssm.materialize_kernel(d, 6)
        np.testing.assert_allclose(k.data[:, 0], np.full(6, 1.1), rtol=1e-15)

    def test_convolution_equals_recurrence_scalar(self):
        rng = np.random.default_rng(42)
        d = _random_dssm(rng, 1, 1)
        x = rng.uniform(-1, 1, (16, 1))
        y_conv = ssm.causal_conv_apply(ssm.materialize_kernel(d, 16), Tensor(x))
        y_seq = ssm.scan_sequential(d, Tensor(x))
        np.testing.assert_allclose(y_conv.data, y_seq.data, atol=1e-12)

    def test_selective_inputs_rejected(self):
        rng = np.random.default_rng(42)
        proj = ssm.init_selective_proj(rng, 2, 3)
        sel = ssm.selective_project(Tensor(rng.uniform(-1, 1, (4, 2))), proj)
        with pytest.raises(ContractError):
            ssm.materialize_kernel(sel, 4)


class TestScanParallel:
    def test_single_step(self):
        rng = np.random.default_rng(42)
        d = _random_dssm(rng, 2, 3)
        x = rng.uniform(-1, 1, (1, 2))
        y = ssm.scan_parallel(d, Tensor(x))
        np.testing.assert_allclose(
            y.data, ssm.scan_sequential(d, Tensor(x)).data, atol=1e-14
        )

    def test_prefix_sum(self):
        """abar=1 with unit drive counts steps."""
        d = ssm.DiscreteSSM(
            abar=Tensor(np.ones((1, 1))),
            bbar=Tensor(np.ones((1, 1))),
            c_out=Tensor(np.ones((1, 1))),
            delta=1.0,
        )
        y = ssm.scan_parallel(d, Tensor(np.ones((200, 1))))
        np.testing.assert_allclose(y.data[:, 0], np.arange(1, 201), atol=1e-11)

    def test_matches_sequential_non_power_of_two(self):
        rng = np.random.default_rng(42)
        d = _random_dssm(rng, 2, 4)
        x = rng.uniform(-1, 1, (257, 2))
        yp = ssm.scan_parallel(d, Tensor(x))
        ys = ssm.scan_sequential(d, Tensor(x))
        np.testing.assert_allclose(yp.data, ys.data, rtol=0, atol=1e-12)

    def test_selective_matches_sequential(self):
        rng = np.random.default_rng(42)
        proj = ssm.init_selective_proj(rng, 3, 4)
        x = Tensor(rng.uniform(-1, 1, (130, 3)))
        sel = ssm.selective_project(x, proj)
        yp = ssm.scan_parallel(sel, x)
        ys = ssm.scan_sequential(sel, x)
        np.testing.assert_allclose(yp.data, ys.data, rtol=0, atol=1e-12)


class TestSelectiveProject:
    def test_zero_weights_give_constant_delta_and_zero_bc(self):
        channels, state = 3, 4
        beta = 0.3
        proj = ssm.SelectiveProjParams(
            w_delta=Tensor(np.zeros((channels, channels))),
            b_delta=Tensor(np.full(channels, beta)),
            w_b=Tensor(np.zeros((channels, state))),
            w_c=Tensor(np.zeros((channels, state))),
            a_log=Tensor(np.zeros((channels, state))),
        )
        rng = np.random.default_rng(42)
        sel = ssm.selective_project(Tensor(rng.uniform(-1, 1, (6, channels))), proj)
        np.testing.assert_allclose(
            sel.delta.data, np.full((6, channels), np.log1p(np.exp(beta))), rtol=1e-15
        )
        np.testing.assert_array_equal(sel.b.data, np.zeros((6, state)))
        np.testing.assert_array_equal(sel.c.data, np.zeros((6, state)))

    def test_large_delta_bias_is_overflow_safe(self):
        proj = ssm.SelectiveProjParams(
            w_delta=Tensor(np.zeros((1, 1))),
            b_delta=Tensor([100.0]),
            w_b=Tensor(np.zeros((1, 2))),
            w_c=Tensor(np.zeros((1, 2))),
            a_log=Tensor(np.zeros((1, 2))),
        )
        sel = ssm.selective_project(Tensor(np.ones((3, 1))), proj)
        np.testing.assert_array_equal(sel.delta.data, np.full((3, 1), 100.0))

    def test_against_direct_formula_oracle(self):
        rng = np.random.default_rng(42)
        channels, state = 4, 3
        proj = ssm.init_selective_proj(rng, channels, state)
        x = rng.uniform(-1, 1, (7, channels))
        sel = ssm.selective_project(Tensor(x), proj)
        pre = x @ proj.w_delta.data + proj.b_delta.data
        np.testing.assert_allclose(sel.delta.data, np.log1p(np.exp(pre)), rtol=1e-12)
        np.testing.assert_allclose(sel.b.data, x @ proj.w_b.data, rtol=1e-12)
        np.testing.assert_allclose(sel.c.data, x @ proj.w_c.data, rtol=1e-12)
        np.testing.assert_allclose(sel.a.data, -np.exp(proj.a_log.data), rtol=1e-15)


class TestBidirectionalScan:
    def test_single_step_sums_both_directions(self):
        rng = np.random.default_rng(42)
        df = _random_dssm(rng, 2, 3)
        db = _random_dssm(rng, 2, 3)
        x = rng.uniform(-1, 1, (1, 2))
        y = ssm.bidirectional_scan(df, db, Tensor(x))
        expect = (
            (df.c_out.data * df.bbar.data).sum(axis=1)
            + (db.c_out.data * db.bbar.data).sum(axis=1)
        ) * x[0]
        np.testing.assert_allclose(y.data[0], expect, rtol=1e-13)

    def test_tied_parameters_palindrome(self):
        rng = np.random.default_rng(42)
        d = _random_dssm(rng, 2, 3)
        half = rng.uniform(-1, 1, (5, 2))
        x = np.concatenate([half, half[::-1]], axis=0)
        y = ssm.bidirectional_scan(d, d, Tensor(x))
        np.testing.assert_allclose(y.data, y.data[::-1], atol=1e-13)

    def test_tied_parameters_reversal_symmetry(self):
        rng = np.random.default_rng(42)
        d = _random_dssm(rng, 3, 4)
        x = rng.uniform(-1, 1, (20, 3))
        y = ssm.bidirectional_scan(d, d, Tensor(x))
        y_rev = ssm.bidirectional_scan(d, d, Tensor(x[::-1].copy()))
        assert np.abs(y_rev.data - y.data[::-1]).max() < 1e-12


class TestInvariants:
    def test_constant_selective_inputs_equal_time_invariant_scan(self):
        """Freezing the selective inputs in time must reproduce the scan
        built from those constants."""
        rng = np.random.default_rng(42)
        channels, state, length = 3, 4, 40
        delta_c = np.exp(rng.uniform(np.log(1e-2), np.log(0.5), channels))
        a = -rng.uniform(0.5, 3.0, (channels, state))
        b_row = rng.uniform(-1, 1, state)
        c_row = rng.uniform(-1, 1, state)
        x = rng.uniform(-1, 1, (length, channels))

        sel = ssm.SelectiveInputs(
            delta=Tensor(np.tile(delta_c, (length, 1))),
            b=Tensor(np.tile(b_row, (length, 1))),
            c=Tensor(np.tile(c_row, (length, 1))),
            a=Tensor(a),
        )
        y_sel = ssm.scan_sequential(sel, Tensor(x))

        z = delta_c[:, None] * a
        abar = np.exp(z)
        bbar = (np.expm1(z) / z) * (delta_c[:, None] * b_row[None, :])
        d = ssm.DiscreteSSM(
            abar=Tensor(abar),
            bbar=Tensor(bbar),
            c_out=Tensor(np.tile(c_row, (channels, 1))),
            delta=1.0,
        )
        y_ti = ssm.scan_sequential(d, Tensor(x))
        np.testing.assert_allclose(y_sel.data, y_ti.data, rtol=0, atol=1e-12)

    def test_stability_bound_on_long_run(self):
        """|abar| < 1 keeps the hidden state under the geometric bound."""
        rng = np.random.default_rng(42)
        d = _random_dssm(rng, 2, 4)
        x = rng.uniform(-1, 1, (4096, 2))
        abar_t = ad.tile_l(d.abar, 4096)
        bx = ad.outer_lc_cs(Tensor(x), d.bbar)
        h = ad.linear_recurrence(abar_t, bx, impl="parallel")
        assert (np.abs(d.abar.data) < 1).all()
        bound = np.abs(bx.data).max() / (1.0 - np.abs(d.abar.data).max()) + 1e-9
        assert np.isfinite(h.data).all()
        assert np.abs(h.data).max() <= bound

    @pytest.mark.parametrize("impl", ["sequential", "parallel"])
    def test_full_selective_scan_gradients(self, impl):
        """Gradient of the scan through projections, ZOH, and recurrence."""
        rng = np.random.default_rng(42)
        proj = ssm.init_selective_proj(rng, 3, 2)
        x = Tensor(rng.uniform(-1, 1, (9, 3)), requires_grad=True)
        probe = Tensor(rng.uniform(-1, 1, (9, 3)))
        params = [x, proj.w_delta, proj.b_delta, proj.w_b, proj.w_c, proj.a_log]

        def fn():
            sel = ssm.selective_project(x, proj)
            y = ssm.scan_parallel(sel, x) if impl == "parallel" else ssm.scan_sequential(sel, x)
            return ad.sum_all(ad.mul(y, probe))

        report = grad_check(fn, params, h=1e-6, tol=1e-5)
        assert report.passed, report.worst

    def test_sequential_and_parallel_gradients_agree(self):
        rng = np.random.default_rng(42)
        d = _random_dssm(rng, 2, 3)
        d.abar.requires_grad = True
        d.bbar.requires_grad = True
        d.c_out.requires_grad = True
        x = Tensor(rng.uniform(-1, 1, (70, 2)))
        probe = Tensor(rng.uniform(-1, 1, (70, 2)))
        grads = {}
        for impl in ("sequential", "parallel"):
            for p in (d.abar, d.bbar, d.c_out):
                p.grad = None
            with Tape() as tape:
                y = ssm._scan(d, x, impl)
                loss = ad.sum_all(ad.mul(y, probe))
            backward(tape, loss)
            grads[impl] = [p.grad.copy() for p in (d.abar, d.bbar, d.c_out)]
        for gs, gp in zip(grads["sequential"], grads["parallel"]):
            np.testing.assert_allclose(gs, gp, rtol=0, atol=1e-11)
