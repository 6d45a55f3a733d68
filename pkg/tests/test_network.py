"""Model-layer checks: penalties against closed forms, attention wiring
against a plain-numpy reimplementation, loss oracles, and gradient checks."""

import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canet import autodiff as ad
from canet import corpus as cp
from canet import network as nw


def vec(*xs):
    return ad.Tensor(np.array(xs, dtype=np.float64))


def make_config(**overrides):
    base = dict(variant="at", multi_task=True, reg_alsc="Ro", reg_acd="Ro",
                lam=0.1, n_classes=3, d=4, vocab_size=40, n_categories=4)
    base.update(overrides)
    return nw.ModelConfig(**base)


def randomize(params: nw.ModelParams, seed: int, scale: float = 0.5):
    rng = np.random.default_rng(seed)
    for p in params.all_params():
        p.data = rng.uniform(-scale, scale, p.data.shape)


def make_net(config: nw.ModelConfig, seed: int = 0, scale: float = 0.5):
    params = nw.ModelParams(config)
    randomize(params, seed, scale)
    return nw.Network(config, params)


@pytest.fixture
def synth():
    insts, cats = cp.make_synthetic_corpus(8, 4, 25, seed=13)
    vocab = cp.build_vocab(insts)
    encoded = cp.encode_instances(insts, vocab, cats, mode="3way")
    return encoded, len(vocab), cats


class TestModelConfig:
    def test_acd_reg_needs_multi_task(self):
        with pytest.raises(nw.ConfigError):
            make_config(multi_task=False, reg_acd="Rs", reg_alsc="Rs")

    def test_aspect_concat_excludes_multi_task(self):
        with pytest.raises(nw.ConfigError):
            make_config(variant="atae", multi_task=True, reg_acd="none")

    def test_bad_values_rejected(self):
        with pytest.raises(nw.ConfigError):
            make_config(variant="gru")
        with pytest.raises(nw.ConfigError):
            make_config(lam=-0.5)
        with pytest.raises(nw.ConfigError):
            make_config(gram="KxL")
        with pytest.raises(nw.ConfigError):
            make_config(n_classes=5)

    def test_named_variants_all_valid(self):
        for name in nw.VARIANTS:
            cfg = nw.config_for_variant(name, lam=0.1, n_classes=3, d=4,
                                        vocab_size=10, n_categories=4)
            assert cfg.variant in nw.VARIANT_KINDS

    def test_unknown_variant_name(self):
        with pytest.raises(nw.ConfigError):
            nw.config_for_variant("CAN-XXL", lam=0.1, n_classes=3, d=4,
                                  vocab_size=10, n_categories=4)


class TestSparseReg:
    def test_one_hot_is_zero(self):
        assert nw.sparse_reg(vec(0.0, 1.0, 0.0)).item() == 0.0

    def test_uniform_l4(self):
        assert nw.sparse_reg(vec(0.25, 0.25, 0.25, 0.25)).item() == pytest.approx(0.75)

    def test_hand_computed_point(self):
        assert nw.sparse_reg(vec(0.5, 0.3, 0.2)).item() == pytest.approx(0.62)

    def test_uniform_is_maximal(self):
        rng = np.random.default_rng(3)
        ell = 6
        uniform_val = nw.sparse_reg(ad.Tensor(np.full(ell, 1 / ell))).item()
        for _ in range(1000):
            alpha = rng.dirichlet(np.ones(ell))
            assert nw.sparse_reg(ad.Tensor(alpha)).item() <= uniform_val + 1e-12


class TestOrthogonalReg:
    def test_disjoint_one_hot_rows_zero(self):
        m = ad.Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert nw.orthogonal_reg(m).item() == 0.0

    def test_duplicated_one_hot_rows_sqrt2(self):
        m = ad.Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
        assert nw.orthogonal_reg(m).item() == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_single_row_equals_sparse(self):
        alpha = np.array([0.5, 0.3, 0.2])
        single = nw.orthogonal_reg(ad.Tensor(alpha[None, :])).item()
        assert single == pytest.approx(nw.sparse_reg(ad.Tensor(alpha)).item(), abs=1e-12)

    def test_one_hot_single_row_zero(self):
        assert nw.orthogonal_reg(ad.Tensor(np.array([[0.0, 1.0, 0.0]]))).item() == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            k = rng.integers(1, 6)
            ell = rng.integers(2, 21)
            m = rng.dirichlet(np.ones(ell), size=k)
            got = nw.orthogonal_reg(ad.Tensor(m)).item()
            want = np.linalg.norm(m @ m.T - np.eye(k), ord="fro")
            assert abs(got - want) < 1e-10

    def test_column_gram_variant(self):
        m = np.array([[0.6, 0.4], [0.1, 0.9]])
        got = nw.orthogonal_reg(ad.Tensor(m), gram="LxL").item()
        want = np.linalg.norm(m.T @ m - np.eye(2), ord="fro")
        assert got == pytest.approx(want, abs=1e-12)


class TestDispatch:
    def test_ro_single_row_falls_back_to_sparse(self):
        rows = [vec(0.5, 0.3, 0.2)]
        got = nw.attention_regularizer("Ro", rows, cp.SINGLE).item()
        assert got == pytest.approx(0.62)

    def test_ro_non_overlapping_uses_gram(self):
        rows = [vec(1.0, 0.0), vec(0.0, 1.0)]
        assert nw.attention_regularizer("Ro", rows, cp.NON_OVERLAPPING).item() == 0.0

    def test_ro_overlapping_sums_sparse(self):
        rows = [vec(0.25, 0.25, 0.25, 0.25), vec(0.25, 0.25, 0.25, 0.25)]
        got = nw.attention_regularizer("Ro", rows, cp.OVERLAPPING).item()
        assert got == pytest.approx(1.5)

    def test_rs_ignores_flag(self):
        rows = [vec(0.25, 0.25, 0.25, 0.25), vec(0.25, 0.25, 0.25, 0.25)]
        for flag in (cp.SINGLE, cp.OVERLAPPING, cp.NON_OVERLAPPING):
            assert nw.attention_regularizer("Rs", rows, flag).item() == pytest.approx(1.5)

    def test_unknown_kind(self):
        with pytest.raises(nw.ConfigError):
            nw.attention_regularizer("L1", [vec(1.0)], cp.SINGLE)


class TestAcdMatrix:
    def test_mean_of_unmentioned(self):
        rows = nw.build_acd_matrix([vec(0.2, 0.8)], [vec(1.0, 0.0), vec(0.0, 1.0)])
        assert len(rows) == 2
        npt.assert_allclose(rows[1].data, [0.5, 0.5])

    def test_shape_k2_n5(self):
        mentioned = [vec(*np.full(6, 1 / 6)) for _ in range(2)]
        unmentioned = [vec(*np.full(6, 1 / 6)) for _ in range(3)]
        rows = nw.build_acd_matrix(mentioned, unmentioned)
        assert len(rows) == 3
        assert all(r.data.shape == (6,) for r in rows)

    def test_pooled_row_still_sums_to_one(self):
        rng = np.random.default_rng(5)
        unmentioned = [ad.Tensor(rng.dirichlet(np.ones(7))) for _ in range(4)]
        rows = nw.build_acd_matrix([ad.Tensor(rng.dirichlet(np.ones(7)))], unmentioned)
        assert rows[-1].data.sum() == pytest.approx(1.0, abs=1e-12)

    def test_all_mentioned_no_pooled_row(self):
        rows = nw.build_acd_matrix([vec(1.0, 0.0), vec(0.0, 1.0)], [])
        assert len(rows) == 2


class TestLosses:
    def test_alsc_uniform_three_way(self):
        got = nw.alsc_loss([vec(1 / 3, 1 / 3, 1 / 3)], [0]).item()
        assert got == pytest.approx(1.0986, abs=1e-4)

    def test_alsc_perfect_is_zero(self):
        assert nw.alsc_loss([vec(0.0, 1.0, 0.0)], [1]).item() == pytest.approx(0.0, abs=1e-9)

    def test_alsc_additive_over_aspects(self):
        a, b = vec(0.7, 0.2, 0.1), vec(0.1, 0.1, 0.8)
        combined = nw.alsc_loss([a, b], [0, 2]).item()
        assert combined == pytest.approx(
            nw.alsc_loss([a], [0]).item() + nw.alsc_loss([b], [2]).item())

    def test_acd_point_oracle(self):
        got = nw.acd_loss([ad.Tensor(np.asarray(0.25))], np.array([1.0])).item()
        assert got == pytest.approx(1.3863, abs=1e-4)

    def test_acd_all_half(self):
        scores = [ad.Tensor(np.asarray(0.5)) for _ in range(5)]
        got = nw.acd_loss(scores, np.array([1.0, 0.0, 1.0, 0.0, 0.0])).item()
        assert got == pytest.approx(5 * math.log(2))

    def test_acd_binary_labels_enforced(self):
        with pytest.raises(ad.DomainError):
            nw.acd_loss([ad.Tensor(np.asarray(0.5))], np.array([0.4]))

    def test_total_loss_arithmetic(self):
        la, lb = vec(1.0), vec(5.0)
        la = ad.reduce_sum(la)
        lb = ad.reduce_sum(lb)
        reg = ad.reduce_sum(vec(2.0))
        got = nw.total_loss(la, lb, reg, lam=0.1, n_categories=5, multi_task=True)
        assert got.item() == pytest.approx(2.2)

    def test_total_loss_single_task_drops_lb(self):
        la = ad.reduce_sum(vec(1.5))
        got = nw.total_loss(la, None, None, lam=0.0, n_categories=5, multi_task=False)
        assert got.item() == pytest.approx(1.5)

    def test_total_loss_monotone_in_reg(self):
        la = ad.reduce_sum(vec(1.0))
        vals = [nw.total_loss(la, None, ad.reduce_sum(vec(r)), 0.5, 4, False).item()
                for r in (0.0, 0.3, 1.7)]
        assert vals == sorted(vals)


class TestEncoder:
    def test_zero_params_give_zero_states(self):
        cfg = make_config(multi_task=False, reg_alsc="none", reg_acd="none")
        net = nw.Network(cfg, nw.ModelParams(cfg))
        h = net.encode(np.array([1]), nw.full_mask(1))
        npt.assert_array_equal(h.data, np.zeros((cfg.d, 1)))

    def test_deterministic(self):
        net = make_net(make_config(), seed=4)
        ids = np.array([1, 5, 2, 9])
        a = net.encode(ids, nw.full_mask(4)).data
        b = net.encode(ids, nw.full_mask(4)).data
        npt.assert_array_equal(a, b)

    def test_empty_sentence_rejected(self):
        net = make_net(make_config())
        with pytest.raises(ad.ShapeError):
            net.encode(np.array([], dtype=np.intp), np.zeros(0, dtype=bool))

    def test_aspect_concat_requires_aspect(self):
        cfg = make_config(variant="atae", multi_task=False, reg_acd="none")
        net = make_net(cfg)
        with pytest.raises(nw.ConfigError):
            net.encode(np.array([1, 2]), nw.full_mask(2))
        cfg2 = make_config(multi_task=False, reg_acd="none")
        net2 = make_net(cfg2)
        with pytest.raises(nw.ConfigError):
            net2.encode(np.array([1, 2]), nw.full_mask(2), aspect=0)

    def test_unroll_gradient_matches_finite_differences(self):
        cfg = make_config(multi_task=False, reg_alsc="none", reg_acd="none",
                          d=3, vocab_size=12)
        net = make_net(cfg, seed=8)
        ids = np.array([3, 1, 7, 2, 5, 9])

        def f():
            return ad.reduce_sum(net.encode(ids, nw.full_mask(6)))

        assert ad.finite_diff_check(f, net.params.all_params()) < 1e-4


class TestAttention:
    def test_zero_weights_uniform(self):
        cfg = make_config()
        net = nw.Network(cfg, nw.ModelParams(cfg))
        hidden = ad.Tensor(np.random.default_rng(0).normal(size=(cfg.d, 4)))
        alpha = net.alsc_attend(hidden, 0, nw.full_mask(4))
        npt.assert_allclose(alpha.data, np.full(4, 0.25), atol=1e-15)

    def test_forced_scores_saturate(self):
        # diag weights and identity states make the scores exactly z * tanh(5)
        cfg = make_config(d=3, n_categories=3)
        params = nw.ModelParams(cfg)
        params.alsc_W1.data = 5.0 * np.eye(3)
        params.alsc_z.data = np.array([10.0, -10.0, -10.0]) / np.tanh(5.0)
        net = nw.Network(cfg, params)
        hidden = ad.Tensor(np.eye(3))
        alpha = net.alsc_attend(hidden, 0, nw.full_mask(3)).data
        e = np.exp(np.array([10.0, -10.0, -10.0]) - 10.0)
        npt.assert_allclose(alpha, e / e.sum(), atol=1e-12)
        assert alpha[0] > 0.999999

    def test_matches_plain_numpy(self):
        cfg = make_config(d=5, vocab_size=30)
        net = make_net(cfg, seed=21)
        ids = np.array([4, 9, 1, 16])
        hidden = net.encode(ids, nw.full_mask(4))
        for k in range(cfg.n_categories):
            got = net.alsc_attend(hidden, k, nw.full_mask(4)).data
            p = net.params
            u = p.aspect_emb.data[k]
            scores = p.alsc_z.data @ np.tanh(
                p.alsc_W1.data @ hidden.data + (p.alsc_W2.data @ u)[:, None])
            e = np.exp(scores - scores.max())
            npt.assert_allclose(got, e / e.sum(), atol=1e-12)

    def test_rows_sum_to_one_many_draws(self):
        cfg = make_config(d=4)
        for trial in range(100):
            net = make_net(cfg, seed=trial, scale=1.0)
            hidden = net.encode(np.array([1, 2, 3]), nw.full_mask(3))
            alpha = net.alsc_attend(hidden, trial % cfg.n_categories, nw.full_mask(3))
            assert alpha.data.sum() == pytest.approx(1.0, abs=1e-12)

    def test_task_attentions_differ(self):
        net = make_net(make_config(), seed=2)
        hidden = net.encode(np.array([1, 2, 3, 4]), nw.full_mask(4))
        alpha = net.alsc_attend(hidden, 1, nw.full_mask(4)).data
        beta = net.acd_attend(hidden, 1, nw.full_mask(4)).data
        assert not np.allclose(alpha, beta)

    def test_uniform_attention_variant_ignores_scoring_params(self):
        cfg = make_config(variant="lstm-avg")
        net = make_net(cfg, seed=3)
        hidden = net.encode(np.array([5, 6, 7]), nw.full_mask(3))
        alpha = net.alsc_attend(hidden, 0, nw.full_mask(3))
        npt.assert_allclose(alpha.data, np.full(3, 1 / 3), atol=1e-15)

    def test_masked_tail_gets_zero(self):
        net = make_net(make_config(), seed=6)
        ids = np.array([1, 2, 0, 0])
        mask = np.array([True, True, False, False])
        hidden = net.encode(ids, mask)
        alpha = net.alsc_attend(hidden, 0, mask).data
        assert alpha[2] == 0.0 and alpha[3] == 0.0
        assert alpha.sum() == pytest.approx(1.0, abs=1e-12)


class TestHeads:
    def test_one_hot_attention_selects_state(self):
        cfg = make_config(d=3)
        params = nw.ModelParams(cfg)
        params.repr_W1.data = np.eye(3)
        net = nw.Network(cfg, params)
        hidden = ad.Tensor(np.arange(9, dtype=np.float64).reshape(3, 3))
        alpha = vec(0.0, 1.0, 0.0)
        h_last = ad.col(hidden, 2)
        rep = net.represent(hidden, alpha, h_last)
        npt.assert_allclose(rep.data, np.tanh(hidden.data[:, 1]), atol=1e-15)

    def test_zero_weights_zero_representation(self):
        cfg = make_config(d=3)
        net = nw.Network(cfg, nw.ModelParams(cfg))
        hidden = ad.Tensor(np.ones((3, 2)))
        rep = net.represent(hidden, vec(0.5, 0.5), ad.col(hidden, 1))
        npt.assert_array_equal(rep.data, np.zeros(3))

    def test_zero_head_uniform_polarity(self):
        cfg = make_config()
        net = nw.Network(cfg, nw.ModelParams(cfg))
        probs = net.predict_polarity(vec(*np.zeros(cfg.d))).data
        npt.assert_allclose(probs, np.full(3, 1 / 3), atol=1e-15)

    def test_zero_head_half_category_score(self):
        cfg = make_config()
        net = nw.Network(cfg, nw.ModelParams(cfg))
        hidden = ad.Tensor(np.ones((cfg.d, 2)))
        score = net.predict_category(hidden, vec(0.5, 0.5))
        assert score.item() == 0.5

    def test_category_score_in_open_interval(self):
        net = make_net(make_config(), seed=9, scale=2.0)
        hidden = net.encode(np.array([1, 2, 3]), nw.full_mask(3))
        beta = net.acd_attend(hidden, 2, nw.full_mask(3))
        s = net.predict_category(hidden, beta).item()
        assert 0.0 < s < 1.0


class TestInstanceLoss:
    def test_parts_recompose(self, synth):
        encoded, vocab_size, cats = synth
        cfg = make_config(vocab_size=vocab_size, n_categories=len(cats))
        net = make_net(cfg, seed=1)
        for inst in encoded[:4]:
            loss, parts = net.instance_loss(inst)
            want = parts.la + parts.lb / cfg.n_categories + cfg.lam * parts.reg
            assert parts.total == pytest.approx(want, abs=1e-12)
            assert parts.reg == pytest.approx(parts.reg_s + parts.reg_o, abs=1e-12)
            assert np.isfinite(loss.item())

    def test_single_task_has_no_lb(self, synth):
        encoded, vocab_size, cats = synth
        cfg = make_config(vocab_size=vocab_size, n_categories=len(cats),
                          multi_task=False, reg_acd="none")
        net = make_net(cfg, seed=1)
        _, parts = net.instance_loss(encoded[0])
        assert parts.lb == 0.0

    def test_lambda_zero_ignores_reg_value(self, synth):
        encoded, vocab_size, cats = synth
        base = dict(vocab_size=vocab_size, n_categories=len(cats))
        with_reg = make_net(make_config(lam=0.0, **base), seed=5)
        without = make_net(make_config(reg_alsc="none", reg_acd="none",
                                       lam=0.0, **base), seed=5)
        for inst in encoded[:3]:
            a, _ = with_reg.instance_loss(inst)
            b, _ = without.instance_loss(inst)
            assert a.item() == pytest.approx(b.item(), abs=1e-15)

    def test_gradient_check_full_model(self, synth):
        encoded, vocab_size, cats = synth
        cfg = make_config(vocab_size=vocab_size, n_categories=len(cats))
        net = make_net(cfg, seed=3, scale=0.3)
        inst = next(e for e in encoded if len(e.mention_cats) == 2)

        def f():
            return net.instance_loss(inst)[0]

        assert ad.finite_diff_check(f, net.params.all_params()) < 1e-4


class TestPredict:
    def test_output_shapes(self, synth):
        encoded, vocab_size, cats = synth
        cfg = make_config(vocab_size=vocab_size, n_categories=len(cats))
        net = make_net(cfg, seed=7)
        inst = next(e for e in encoded if len(e.mention_cats) == 2)
        out = net.predict(inst)
        k, n, ell = 2, len(cats), inst.length
        assert out.alsc_probs.shape == (k, 3)
        assert out.acd_scores.shape == (n,)
        assert out.alsc_attention.shape == (k, ell)
        assert out.acd_attention.shape == (n, ell)
        assert out.reg_value >= 0.0

    def test_single_task_outputs_empty_acd(self, synth):
        encoded, vocab_size, cats = synth
        cfg = make_config(vocab_size=vocab_size, n_categories=len(cats),
                          multi_task=False, reg_acd="none")
        net = make_net(cfg, seed=7)
        out = net.predict(encoded[0])
        assert out.acd_scores.size == 0
        assert out.acd_attention.shape[0] == 0

    def test_padded_batch_rows_keep_zero_mass(self, synth):
        encoded, vocab_size, cats = synth
        cfg = make_config(vocab_size=vocab_size, n_categories=len(cats))
        net = make_net(cfg, seed=8)
        batch = cp.make_batches(encoded, batch_size=len(encoded), seed=0)[0]
        for i, inst in enumerate(batch.instances):
            out = net.predict(inst, batch.token_matrix[i], batch.mask[i])
            pad = ~batch.mask[i]
            assert np.all(out.alsc_attention[:, pad] == 0.0)
            assert np.all(out.acd_attention[:, pad] == 0.0)
            npt.assert_allclose(out.alsc_attention.sum(axis=1), 1.0, atol=1e-9)

    def test_padding_does_not_change_predictions(self, synth):
        encoded, vocab_size, cats = synth
        cfg = make_config(vocab_size=vocab_size, n_categories=len(cats))
        net = make_net(cfg, seed=8)
        inst = encoded[0]
        bare = net.predict(inst)
        padded_ids = np.concatenate([inst.token_ids, np.zeros(3, dtype=np.intp)])
        mask = np.concatenate([nw.full_mask(inst.length), np.zeros(3, dtype=bool)])
        padded = net.predict(inst, padded_ids, mask)
        npt.assert_allclose(padded.alsc_probs, bare.alsc_probs, atol=1e-12)
        npt.assert_allclose(padded.acd_scores, bare.acd_scores, atol=1e-12)


class TestAttentionRowCheck:
    def test_accepts_valid_row(self):
        nw.check_attention_row(np.array([0.3, 0.7, 0.0]),
                               np.array([True, True, False]))

    def test_rejects_bad_sum(self):
        with pytest.raises(ad.DomainError):
            nw.check_attention_row(np.array([0.3, 0.3]), np.array([True, True]))

    def test_rejects_mass_on_padding(self):
        with pytest.raises(ad.DomainError):
            nw.check_attention_row(np.array([0.9, 0.1]), np.array([True, False]))


class TestSerialization:
    def test_round_trip_bit_exact(self, synth):
        _, vocab_size, cats = synth
        cfg = make_config(vocab_size=vocab_size, n_categories=len(cats))
        net = make_net(cfg, seed=14)
        text = nw.save_params(net.params)
        loaded_cfg, loaded = nw.load_params(text)
        assert loaded_cfg == cfg
        for a, b in zip(net.params.all_params(), loaded.all_params()):
            npt.assert_array_equal(a.data, b.data)
        assert nw.save_params(loaded) == text

    def test_byte_stable(self):
        cfg = make_config()
        net = make_net(cfg, seed=2)
        assert nw.save_params(net.params) == nw.save_params(net.params)

    def test_bad_header_rejected(self):
        with pytest.raises(nw.ConfigError):
            nw.load_params("something else\n")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=0.01, max_value=1.0), min_size=2, max_size=8))
def test_sparse_reg_bounds(weights):
    alpha = np.array(weights) / np.sum(weights)
    val = nw.sparse_reg(ad.Tensor(alpha)).item()
    assert -1e-12 <= val <= 1 - 1 / len(alpha) + 1e-12
