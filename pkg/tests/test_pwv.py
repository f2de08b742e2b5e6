import math

import numpy as np
import pytest

from icon_sod import pwv
from icon_sod import tensor as T
from icon_sod.errors import ConfigError, DimensionError
from conftest import assert_grads_close
from oracles import em_routing_scalar


def t(data, grad=False):
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


class TestGridReduction:
    def test_identity_when_already_at_grid(self, rng):
        f = t(rng.normal(size=(1, 3, 22, 22)))
        assert np.array_equal(pwv.reduce_to_grid(f, 22).data, f.data)

    def test_constant_preserved(self):
        f = t(np.full((1, 2, 16, 16), 1.5))
        assert np.allclose(pwv.reduce_to_grid(f, 5).data, 1.5, atol=1e-12)

    def test_block_means_on_divisible_input(self, rng):
        f = rng.normal(size=(1, 1, 44, 44))
        out = pwv.reduce_to_grid(t(f), 22).data
        expected = f.reshape(1, 1, 22, 2, 22, 2).mean(axis=(3, 5))
        assert np.max(np.abs(out - expected)) < 1e-12

    def test_grid_larger_than_input_rejected(self, rng):
        with pytest.raises(DimensionError):
            pwv.reduce_to_grid(t(rng.normal(size=(1, 1, 4, 4))), 8)


class TestCapsulePacking:
    def test_partition_arithmetic(self, rng):
        f = t(rng.normal(size=(2, 68, 3, 3)))  # 4 types x (16 + 1)
        state = pwv.make_primary_capsules(f, pose_shape=(4, 4), n_types=4)
        assert state.poses.shape == (2, 3, 3, 4, 4, 4)
        assert state.activations.shape == (2, 3, 3, 4)

    def test_zero_input_gives_half_activations(self):
        f = t(np.zeros((1, 34, 2, 2)))
        state = pwv.make_primary_capsules(f, pose_shape=(4, 4), n_types=2)
        assert np.allclose(state.activations.data, 0.5, atol=0)
        assert np.max(np.abs(state.poses.data)) == 0.0

    def test_channel_layout_per_type(self, rng):
        f = rng.normal(size=(1, 18, 1, 1))  # 2 types x (8 + 1), pose 2x4
        state = pwv.make_primary_capsules(t(f), pose_shape=(2, 4), n_types=2)
        assert np.allclose(state.poses.data[0, 0, 0, 0].reshape(-1), f[0, :8, 0, 0])
        assert np.allclose(state.poses.data[0, 0, 0, 1].reshape(-1), f[0, 9:17, 0, 0])
        assert state.activations.data[0, 0, 0, 1] == pytest.approx(
            1.0 / (1.0 + math.exp(-f[0, 17, 0, 0]))
        )

    def test_roundtrip_identity(self, rng):
        f = t(rng.normal(size=(2, 51, 4, 4)))  # 3 types x (16+1)
        poses, logits = pwv.split_capsule_channels(f, (4, 4), 3)
        back = pwv.merge_capsule_channels(poses, logits)
        assert np.array_equal(back.data, f.data)

    def test_indivisible_channels_rejected(self, rng):
        with pytest.raises(ConfigError):
            pwv.make_primary_capsules(t(rng.normal(size=(1, 67, 2, 2))), (4, 4), 4)


class TestVotes:
    def _state(self, rng, lead=(1, 2, 2), n_lower=3, pose=(4, 4)):
        poses = t(rng.normal(size=lead + (n_lower,) + pose))
        acts = t(rng.uniform(0.1, 1.0, size=lead + (n_lower,)))
        return pwv.CapsuleState(poses=poses, activations=acts)

    def test_identity_transform_votes_equal_poses(self, rng):
        state = self._state(rng)
        tp = pwv.TransformParams(
            transforms=t(np.broadcast_to(np.eye(4), (3, 5, 4, 4)).copy()),
            beta_a=t(np.zeros(5)),
            beta_u=t(np.zeros(5)),
        )
        votes = pwv.compute_votes(state, tp)
        assert votes.shape == (1, 2, 2, 3, 5, 4, 4)
        for j in range(5):
            assert np.array_equal(votes.data[:, :, :, :, j], state.poses.data)

    def test_single_capsule_hand_multiplied(self, rng):
        m = rng.normal(size=(4, 4))
        tr = rng.normal(size=(4, 4))
        state = pwv.CapsuleState(
            poses=t(m.reshape(1, 1, 1, 1, 4, 4)), activations=t(np.ones((1, 1, 1, 1)))
        )
        tp = pwv.TransformParams(
            transforms=t(tr.reshape(1, 1, 4, 4)), beta_a=t(np.zeros(1)), beta_u=t(np.zeros(1))
        )
        votes = pwv.compute_votes(state, tp)
        assert np.max(np.abs(votes.data[0, 0, 0, 0, 0] - tr @ m)) < 1e-12

    def test_vote_count(self, rng):
        state = self._state(rng, lead=(1, 1, 1), n_lower=4)
        tp = pwv.TransformParams(
            transforms=t(rng.normal(size=(4, 6, 4, 4))),
            beta_a=t(np.zeros(6)),
            beta_u=t(np.zeros(6)),
        )
        votes = pwv.compute_votes(state, tp)
        assert votes.data[0, 0, 0].shape[:2] == (4, 6)  # lower x higher


class TestEmRouting:
    def _transform(self, n_lower, n_higher, beta_a=None, beta_u=None):
        return pwv.TransformParams(
            transforms=t(np.zeros((n_lower, n_higher, 4, 4))),  # unused by routing
            beta_a=t(np.zeros(n_higher) if beta_a is None else beta_a),
            beta_u=t(np.zeros(n_higher) if beta_u is None else beta_u),
        )

    def test_single_capsule_degenerate_exact(self, rng):
        vote = rng.normal(size=(1, 1, 2, 2))
        state, assign = pwv.em_routing(
            t(vote.reshape(1, 1, 2, 2)), t(np.ones(1)), self._transform(1, 1), iterations=3
        )
        assert np.array_equal(state.poses.data, vote.reshape(1, 2, 2))
        assert np.array_equal(assign.r.data, np.ones((1, 1)))
        assert 0.0 <= state.activations.data[0] <= 1.0

    def test_identical_pair_clusters_against_outlier(self, rng):
        # lowers 0,1 agree tightly for higher 0 and disperse for higher 1;
        # the outlier agrees with itself only for higher 1
        votes = np.zeros((3, 2, 1, 4))
        votes[0, 0] = votes[1, 0] = [0.0, 0.1, -0.1, 0.05]
        votes[2, 0] = [8.0, -8.0, 8.0, -8.0]
        votes[0, 1] = [-6.0, -6.0, 6.0, 6.0]
        votes[1, 1] = [6.0, 6.0, -6.0, -6.0]
        votes[2, 1] = [1.0, 2.0, 3.0, 4.0]
        acts = np.array([1.0, 1.0, 1.0])
        state, assign = pwv.em_routing(
            t(votes.reshape(3, 2, 1, 4)), t(acts), self._transform(3, 2), iterations=3
        )
        r = assign.r.data
        assert r[0, 0] > 0.99 and r[1, 0] > 0.99
        assert r[2, 1] > 0.99
        mu_o, act_o, r_o = em_routing_scalar(
            votes.reshape(3, 2, 4), acts, np.zeros(2), np.zeros(2), iterations=3
        )
        assert np.max(np.abs(r - r_o)) < 1e-10
        assert np.max(np.abs(state.poses.data.reshape(2, 4) - mu_o)) < 1e-10
        assert np.max(np.abs(state.activations.data - act_o)) < 1e-10

    def test_row_sums_after_every_e_step(self, rng):
        votes = t(rng.normal(size=(2, 3, 3, 5, 4, 2, 2)))
        acts = t(rng.uniform(0.05, 1.0, size=(2, 3, 3, 5)))
        trace = []
        pwv.em_routing(votes, acts, self._transform(5, 4), iterations=3, trace=trace)
        assert len(trace) == 2  # E-steps run between M-steps
        for r in trace:
            assert np.max(np.abs(r.sum(axis=-1) - 1.0)) < 1e-6
            assert r.min() >= 0.0 and r.max() <= 1.0

    def test_activations_bounded(self, rng):
        votes = t(rng.normal(0, 3, size=(4, 6, 5, 2, 2)))
        acts = t(rng.uniform(0.0, 1.0, size=(4, 6)))
        state, _ = pwv.em_routing(votes, acts, self._transform(6, 5), iterations=2)
        assert state.activations.data.min() >= 0.0
        assert state.activations.data.max() <= 1.0

    def test_one_iteration_closed_form(self, rng):
        votes = rng.normal(size=(5, 3, 2, 2))
        acts = rng.uniform(0.1, 1.0, size=5)
        state, _ = pwv.em_routing(
            t(votes), t(acts), self._transform(5, 3), iterations=1
        )
        expected = (acts[:, None, None, None] * votes).sum(axis=0) / acts.sum()
        assert np.max(np.abs(state.poses.data - expected)) < 1e-10

    def test_matches_scalar_oracle_random(self, rng):
        for trial in range(5):
            votes = rng.normal(0, 2, size=(4, 3, 1, 6))
            acts = rng.uniform(0.05, 1.0, size=4)
            beta_a = rng.normal(size=3)
            beta_u = rng.normal(0, 0.3, size=3)
            state, assign = pwv.em_routing(
                t(votes),
                t(acts),
                self._transform(4, 3, beta_a=beta_a, beta_u=beta_u),
                iterations=3,
            )
            mu_o, act_o, r_o = em_routing_scalar(
                votes.reshape(4, 3, 6), acts, beta_a, beta_u, iterations=3
            )
            assert np.max(np.abs(state.poses.data.reshape(3, 6) - mu_o)) < 1e-9
            assert np.max(np.abs(state.activations.data - act_o)) < 1e-9
            assert np.max(np.abs(assign.r.data - r_o)) < 1e-9

    def test_higher_type_permutation_equivariance(self, rng):
        votes = rng.normal(size=(1, 2, 2, 4, 3, 2, 2))
        acts = rng.uniform(0.1, 1.0, size=(1, 2, 2, 4))
        beta_a = rng.normal(size=3)
        beta_u = rng.normal(0, 0.2, size=3)
        perm = np.array([2, 0, 1])

        out1, _ = pwv.em_routing(
            t(votes), t(acts), self._transform(4, 3, beta_a, beta_u), iterations=3
        )
        out2, _ = pwv.em_routing(
            t(votes[:, :, :, :, perm]),
            t(acts),
            self._transform(4, 3, beta_a[perm], beta_u[perm]),
            iterations=3,
        )
        assert np.max(np.abs(out2.poses.data - out1.poses.data[:, :, :, perm])) < 1e-12
        assert np.max(np.abs(out2.activations.data - out1.activations.data[:, :, :, perm])) < 1e-12

    def test_zero_mass_uniform_fallback(self):
        votes = t(np.ones((2, 2, 1, 4)))
        acts = t(np.zeros(2))  # no assignment mass at all
        state, _ = pwv.em_routing(votes, acts, self._transform(2, 2), iterations=2)
        assert np.all(np.isfinite(state.poses.data))
        assert np.all(np.isfinite(state.activations.data))

    def test_iterations_must_be_positive(self, rng):
        with pytest.raises(ConfigError):
            pwv.em_routing(
                t(np.zeros((1, 1, 2, 2))), t(np.ones(1)), self._transform(1, 1), iterations=0
            )


class TestPwvLayer:
    def test_output_channel_count(self, rng):
        p = pwv.make_pwv_params(rng, decoder_width=8, n_lower=3, n_higher=5)
        f = t(rng.normal(size=(1, 3 * 17, 2, 2)))
        out = pwv.pwv_layer(f, p)
        assert out.shape == (1, 5 * 17, 2, 2)

    def test_matches_straight_line_oracle_on_2x2(self, rng):
        n_lower, n_higher = 3, 2
        p = pwv.make_pwv_params(
            rng, decoder_width=8, pose_shape=(2, 2), n_lower=n_lower, n_higher=n_higher,
            iterations=3,
        )
        d = 4
        f = rng.normal(size=(1, n_lower * (d + 1), 2, 2))
        out = pwv.pwv_layer(t(f), p).data

        tr = p.transform.transforms.data
        beta_a = p.transform.beta_a.data
        beta_u = p.transform.beta_u.data
        expected = np.zeros((1, n_higher * (d + 1), 2, 2))
        for y in range(2):
            for x in range(2):
                poses, acts = [], []
                for tl in range(n_lower):
                    vals = f[0, tl * (d + 1) : (tl + 1) * (d + 1), y, x]
                    poses.append(vals[:d].reshape(2, 2))
                    acts.append(1.0 / (1.0 + math.exp(-vals[d])))
                votes = np.zeros((n_lower, n_higher, d))
                for i in range(n_lower):
                    for j in range(n_higher):
                        votes[i, j] = (tr[i, j] @ poses[i]).reshape(-1)
                mu, act, _ = em_routing_scalar(votes, acts, beta_a, beta_u, iterations=3)
                for j in range(n_higher):
                    expected[0, j * (d + 1) : j * (d + 1) + d, y, x] = mu[j]
                    expected[0, j * (d + 1) + d, y, x] = act[j]
        assert np.max(np.abs(out - expected)) < 1e-8

    def test_gradient_through_routing(self, rng):
        p = pwv.make_pwv_params(
            rng, decoder_width=4, pose_shape=(2, 2), n_lower=2, n_higher=2, iterations=2
        )
        f = T.Tensor(rng.normal(0, 1.2, size=(1, 10, 2, 2)), requires_grad=True)
        ref = T.Tensor(rng.normal(size=(1, 10, 2, 2)))

        def build():
            return T.tsum(T.mul(pwv.pwv_layer(f, p), ref))

        assert_grads_close(
            build,
            [f, p.transform.transforms, p.transform.beta_a, p.transform.beta_u],
            rtol=1e-3,
        )


class TestBottomUpFuse:
    def test_single_level_identity(self, rng):
        f = t(rng.normal(size=(1, 4, 3, 3)))
        out = pwv.bottomup_fuse([f])
        assert len(out) == 1
        assert np.array_equal(out[0].data, f.data)

    def test_zero_deeper_level_leaves_shallower(self, rng):
        deep = t(np.zeros((1, 2, 2, 2)))
        shallow = t(rng.normal(size=(1, 2, 4, 4)))
        out = pwv.bottomup_fuse([deep, shallow])
        assert np.array_equal(out[1].data, shallow.data)

    def test_constant_addition(self):
        deep = t(np.full((1, 1, 2, 2), 1.0))
        shallow = t(np.full((1, 1, 4, 4), 2.0))
        out = pwv.bottomup_fuse([deep, shallow])
        assert np.allclose(out[1].data, 3.0, atol=1e-12)

    def test_three_levels_deep_to_shallow(self, rng):
        feats = [
            t(rng.normal(size=(1, 2, 2, 2))),
            t(rng.normal(size=(1, 2, 4, 4))),
            t(rng.normal(size=(1, 2, 8, 8))),
        ]
        out = pwv.bottomup_fuse(feats)
        assert [f.shape[2] for f in out] == [2, 4, 8]
