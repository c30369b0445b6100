from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bealab import calculus, flows
from bealab.calculus import FD_ONLY
from bealab.problems import (
    full_batch,
    make_bilinear_game,
    make_dirac_gan,
    make_logistic,
    make_quadratic,
    make_quadratic_game,
    make_rng,
    repeat_schedule,
    split_schedule,
)
from bealab.regularizers import (
    MAX_BRUTE_FORCE_N,
    expected_shuffled_loss,
    game_modified_losses,
    gan_interaction_coeffs,
    modified_loss_igr,
    modified_loss_sgd,
)

from conftest import random_points


class TestModifiedLossSGD:
    def test_single_batch_is_igr_loss(self, quad, rng):
        s = split_schedule(quad, 1)
        theta = rng.standard_normal(3)
        b = modified_loss_sgd(quad, theta, s, 0.1, rng.standard_normal(3))
        g = calculus.grad(quad, theta, s[0])
        assert b.alignment_term == 0.0
        assert b.total == pytest.approx(quad.loss(theta, s[0]) + 0.025 * float(g @ g), rel=1e-15)

    def test_two_centres_hand_values(self, two_centers):
        b = modified_loss_sgd(two_centers, [1.0], split_schedule(two_centers, 2), 0.1, [1.0])
        assert b.base_loss == 0.5 and b.norm_term == 0.0
        assert b.alignment_term == pytest.approx(0.05, abs=1e-16)
        assert b.total == pytest.approx(0.55, abs=1e-15)

    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_identical_batches_closed_form(self, quad, n, rng):
        # E + (nh/4)‖g(θ)‖² - (h/n)·(n(n-1)/2)·g(θ)·g(anchor)
        h = 0.1
        one = full_batch(quad)
        for theta in random_points(rng, 3, 5):
            anchor = rng.standard_normal(3)
            g, ga = calculus.grad(quad, theta, one), calculus.grad(quad, anchor, one)
            expected = quad.loss(theta, one) + 0.25 * n * h * g @ g - 0.5 * h * (n - 1) * g @ ga
            got = modified_loss_sgd(quad, theta, repeat_schedule(one, n), h, anchor).total
            assert got == pytest.approx(expected, rel=1e-13, abs=1e-15)

    def test_two_step_alignment_remark(self, logistic, rng):
        s = split_schedule(logistic, 2, seed=4)
        h = 0.2
        for _ in range(5):
            theta, anchor = rng.standard_normal(2), rng.standard_normal(2)
            b = modified_loss_sgd(logistic, theta, s, h, anchor)
            expected = -(h / 2) * float(calculus.grad(logistic, theta, s[1]) @ calculus.grad(logistic, anchor, s[0]))
            assert b.alignment_term == expected

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.floats(0.0, 0.5), st.integers(0, 2**31))
    def test_total_is_sum_of_parts(self, n, h, seed):
        p = make_logistic(2, 8, 1)
        r = make_rng(seed)
        b = modified_loss_sgd(p, r.standard_normal(2), split_schedule(p, n), h, r.standard_normal(2))
        assert abs(b.total - (b.base_loss + b.norm_term + b.alignment_term)) <= 1e-12

    def test_missing_anchor(self, quad):
        with pytest.raises(ValueError):
            modified_loss_sgd(quad, np.zeros(3), split_schedule(quad, 2), 0.1, None)

    def test_negative_h(self, quad):
        with pytest.raises(ValueError):
            modified_loss_sgd(quad, np.zeros(3), split_schedule(quad, 2), -0.1, np.zeros(3))


class TestModifiedLossIGR:
    def test_half_square(self, half_square):
        b = modified_loss_igr(half_square, [1.0], repeat_schedule(full_batch(half_square), 1), 0.1)
        assert b.total == pytest.approx(0.525, abs=1e-16) and b.alignment_term == 0.0

    def test_zero_h_is_base(self, quad, rng):
        s = split_schedule(quad, 2)
        theta = rng.standard_normal(3)
        assert modified_loss_igr(quad, theta, s, 0.0).total == quad.pooled_loss(theta, s)


class TestShufflingExpectation:
    def test_single_batch(self, quad, rng):
        s = split_schedule(quad, 1)
        theta, anchor = rng.standard_normal(3), rng.standard_normal(3)
        ref = modified_loss_sgd(quad, theta, s, 0.1, anchor).total
        for method in ("closed_form", "brute_force"):
            assert expected_shuffled_loss(quad, theta, s, 0.1, anchor, method).total == pytest.approx(ref, rel=1e-15)

    @pytest.mark.parametrize("n", [2, 3, 4])
    @pytest.mark.parametrize("factory", [lambda: make_quadratic(3, 12, 7), lambda: make_logistic(3, 12, 3)])
    def test_closed_form_matches_enumeration(self, n, factory, rng):
        p = factory()
        s = split_schedule(p, n, seed=1)
        for _ in range(5):
            theta, anchor = rng.standard_normal(3), rng.standard_normal(3)
            cf = expected_shuffled_loss(p, theta, s, 0.1, anchor, "closed_form").total
            bf = expected_shuffled_loss(p, theta, s, 0.1, anchor, "brute_force").total
            assert abs(cf - bf) <= 1e-10

    @pytest.mark.parametrize("n", [2, 3])
    def test_closed_form_matches_enumeration_fd(self, n, rng):
        p = make_logistic(2, 12, 5)
        s = split_schedule(p, n, seed=1)
        theta, anchor = rng.standard_normal(2), rng.standard_normal(2)
        cf = expected_shuffled_loss(p, theta, s, 0.1, anchor, "closed_form", FD_ONLY).total
        bf = expected_shuffled_loss(p, theta, s, 0.1, anchor, "brute_force", FD_ONLY).total
        assert abs(cf - bf) <= 1e-6

    def test_independent_enumeration(self, quad, rng):
        # enumeration written out from the per-batch gradients, no library averaging
        s = split_schedule(quad, 3, seed=0)
        theta, anchor, h = rng.standard_normal(3), rng.standard_normal(3), 0.15
        g = [calculus.grad(quad, theta, b) for b in s]
        a = [calculus.grad(quad, anchor, b) for b in s]
        aligns = []
        for perm in itertools.permutations(range(3)):
            aligns.append(-(h / 3) * sum(g[perm[mu]] @ a[perm[tau]] for mu in range(3) for tau in range(mu)))
        got = expected_shuffled_loss(quad, theta, s, h, anchor, "closed_form").alignment_term
        assert got == pytest.approx(math.fsum(aligns) / 6, rel=1e-12)

    def test_identical_batches_permutation_invariant(self, quad, rng):
        s = repeat_schedule(full_batch(quad), 3)
        theta, anchor = rng.standard_normal(3), rng.standard_normal(3)
        ref = modified_loss_sgd(quad, theta, s, 0.1, anchor).total
        assert expected_shuffled_loss(quad, theta, s, 0.1, anchor).total == pytest.approx(ref, rel=1e-13)

    def test_enumeration_bound(self):
        p = make_quadratic(1, MAX_BRUTE_FORCE_N + 1, 0)
        with pytest.raises(ValueError, match="n <= 6"):
            expected_shuffled_loss(p, [0.0], split_schedule(p, MAX_BRUTE_FORCE_N + 1), 0.1, [0.0], "brute_force")

    def test_unknown_method(self, quad):
        with pytest.raises(ValueError):
            expected_shuffled_loss(quad, np.zeros(3), split_schedule(quad, 2), 0.1, np.zeros(3), "monte_carlo")


GAMES = [make_bilinear_game(), make_quadratic_game(2, 3, 11), make_quadratic_game(2, 2, 3, zero_sum=True),
         make_dirac_gan("non_saturating"), make_dirac_gan("saturating")]


def _fd_block(scalar, x, step=1e-5):
    out = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step * (1.0 + abs(x[k]))
        out[k] = (scalar(x + e) - scalar(x - e)) / (2 * e[k])
    return out


class TestGameLosses:
    def test_zero_h(self, rng):
        g = make_quadratic_game(2, 3, 11)
        phi, theta = rng.standard_normal(2), rng.standard_normal(3)
        bp, bt = game_modified_losses(g, phi, theta, 0.0, phi, theta)
        assert bp.total == g.loss_phi(phi, theta) and bt.total == g.loss_theta(phi, theta)

    def test_missing_anchor(self):
        with pytest.raises(ValueError):
            game_modified_losses(make_bilinear_game(), [1.0], [1.0], 0.1, None, [0.0])

    @pytest.mark.parametrize("game", GAMES, ids=lambda g: f"{g.descriptor['name']}-{g.descriptor.get('variant')}")
    def test_potential_consistency(self, game, rng):
        h = 0.1
        for _ in range(20):
            phi, theta = rng.standard_normal(game.dim_phi), rng.standard_normal(game.dim_theta)
            ap, at = phi + 0.3 * rng.standard_normal(game.dim_phi), theta + 0.3 * rng.standard_normal(game.dim_theta)
            dphi, dtheta = flows.game_anchored_flow(game, h, ap, at)(phi, theta)
            fd_phi = _fd_block(lambda x: game_modified_losses(game, x, theta, h, ap, at)[0].total, phi)
            fd_theta = _fd_block(lambda x: game_modified_losses(game, phi, x, h, ap, at)[1].total, theta)
            assert np.linalg.norm(dphi + fd_phi) <= max(1e-6, 1e-4 * np.linalg.norm(dphi))
            assert np.linalg.norm(dtheta + fd_theta) <= max(1e-6, 1e-4 * np.linalg.norm(dtheta))

    def test_zero_sum_versus_common_payoff_sign(self, rng):
        zs = make_quadratic_game(2, 3, 6, zero_sum=True)
        cp = make_quadratic_game(2, 3, 6, common_payoff=True)
        for _ in range(5):
            phi, theta = rng.standard_normal(2), rng.standard_normal(3)
            ap, at = rng.standard_normal(2), rng.standard_normal(3)
            i_zs = game_modified_losses(zs, phi, theta, 0.1, ap, at)[0].interaction_term
            i_cp = game_modified_losses(cp, phi, theta, 0.1, ap, at)[0].interaction_term
            assert i_zs == pytest.approx(-i_cp, rel=1e-13)

    def test_zero_sum_identity(self, rng):
        g = make_quadratic_game(3, 2, 9, zero_sum=True)
        for _ in range(5):
            phi, theta = rng.standard_normal(3), rng.standard_normal(2)
            ap, at = rng.standard_normal(3), rng.standard_normal(2)
            _, gtp, _, gtt = calculus.game_grads(g, phi, theta)
            gtt_a = calculus.game_grads(g, ap, at)[3]
            assert np.array_equal(gtp, -gtt)
            bp = game_modified_losses(g, phi, theta, 0.1, ap, at)[0]
            assert bp.interaction_term == pytest.approx(-0.05 * float(gtt @ gtt_a), rel=1e-13)


class TestGanCoefficients:
    @pytest.mark.parametrize("mode", ["non_saturating", "saturating"])
    def test_half_gives_four(self, mode):
        assert gan_interaction_coeffs([0.5], [0.5], mode).entries[0, 0] == 4.0

    def test_exact_formulas_on_grid(self, rng):
        dc, dp = rng.uniform(0.01, 0.99, 16), rng.uniform(0.01, 0.99, 16)
        ns = gan_interaction_coeffs(dc, dp, "non_saturating").entries
        sat = gan_interaction_coeffs(dc, dp, "saturating").entries
        for i, j in itertools.product(range(16), range(16)):
            assert ns[i, j] == 1.0 / ((1.0 - dc[i]) * dp[j])
            assert sat[i, j] == 1.0 / ((1.0 - dc[i]) * (1.0 - dp[j]))
        assert ns.shape == (16, 16) and np.all(ns > 0) and np.all(sat > 0)

    def test_non_saturating_grows_as_discriminator_fooled(self):
        dc = np.linspace(0.05, 0.999, 50)
        col = gan_interaction_coeffs(dc, [0.3], "non_saturating").entries[:, 0]
        assert np.all(np.diff(col) > 0)

    def test_saturating_dominates_where_generator_fools(self):
        dp = np.linspace(0.01, 0.99, 99)
        ns = gan_interaction_coeffs([0.4], dp, "non_saturating").entries[0]
        sat = gan_interaction_coeffs([0.4], dp, "saturating").entries[0]
        assert np.all(sat[dp > 0.5] > ns[dp > 0.5]) and np.all(sat[dp < 0.5] < ns[dp < 0.5])

    @pytest.mark.parametrize("dc,dp", [([0.0], [0.5]), ([0.5], [1.0]), ([1.5], [0.5]), ([], [0.5])])
    def test_domain(self, dc, dp):
        with pytest.raises(ValueError):
            gan_interaction_coeffs(dc, dp, "saturating")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            gan_interaction_coeffs([0.5], [0.5], "wasserstein")

    def test_csv_layout(self):
        csv = gan_interaction_coeffs([0.5, 0.75], [0.5], "saturating").to_csv()
        assert csv == "current_index,prev_0\n0,4\n1,8\n"
