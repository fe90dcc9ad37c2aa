"""Recommendation-loop tests: ranking, episodes, training, baselines."""

import numpy as np
import pytest

from morec import autodiff as ad
from morec.pipeline import (
    ABLATION_VARIANTS,
    EpisodeResult,
    Learners,
    PipelineConfig,
    PipelineError,
    SupExample,
    encode_state,
    evaluate,
    init_learners,
    log_to_examples,
    predictor_update,
    run_ablation,
    run_baseline_fixed,
    run_episode,
    score_candidates,
    train,
)
from morec.rng import substream
from morec.simenv import WorldConfig, build_world, context_vec, simulate_log


def tiny_config(**overrides) -> PipelineConfig:
    base = dict(
        train_steps=40,
        batch_size=8,
        hidden=8,
        embed_dim=4,
        enc_input_dim=6,
        gen_hidden=8,
        target_hidden=4,
        embed_e=4,
        trunk_hidden=8,
        eval_steps=5,
        history_window=4,
        seed=11,
    )
    base.update(overrides)
    return PipelineConfig(**base)


def tiny_world(**overrides):
    base = dict(n_users=6, n_items=12, user_hetero_spread=0.3, context_amplitude=0.3, seed=3)
    base.update(overrides)
    return build_world(WorldConfig(**base))


WORLD = tiny_world()


# -- config validation ----------------------------------------------------------


def test_config_rejects_bad_mode():
    with pytest.raises(ValueError):
        tiny_config(mode="greedy").validate()


def test_config_rejects_top_k_above_pool():
    with pytest.raises(ValueError):
        tiny_config(top_k=5, candidate_pool=3).validate()


def test_config_rejects_top_k_above_catalog():
    with pytest.raises(ValueError):
        init_learners(WORLD, tiny_config(top_k=13))


def test_fixed_mode_requires_simplex_alpha():
    with pytest.raises(ValueError):
        tiny_config(mode="fixed", alpha_fixed=(0.9, 0.9)).validate()
    with pytest.raises(ValueError):
        tiny_config(mode="fixed", alpha_fixed=None).validate()
    tiny_config(mode="fixed", alpha_fixed=(0.3, 0.7)).validate()


def test_objective_count_must_match_world():
    with pytest.raises(ValueError):
        init_learners(WORLD, tiny_config(n_objectives=3))


# -- learner wiring ---------------------------------------------------------------


def test_adaptive_learners_have_hypernet_and_policy():
    ln = init_learners(WORLD, tiny_config())
    assert ln.hyper is not None and ln.shared is None and ln.policy is not None
    names = set(ln.stores())
    assert {"encoder", "predictor", "actor", "critic"} <= names


def test_fixed_mode_uses_shared_bottom_without_policy():
    ln = init_learners(WORLD, tiny_config(mode="fixed", alpha_fixed=(0.5, 0.5)))
    assert ln.shared is not None and ln.hyper is None and ln.policy is None


def test_ablation_flags_reach_encoder_and_predictor():
    ln1 = init_learners(WORLD, tiny_config(attention_off=True))
    assert ln1.encoder.config.attention is False
    ln2 = init_learners(WORLD, tiny_config(time_gate_off=True))
    assert ln2.encoder.config.time_gate is False
    ln4 = init_learners(WORLD, tiny_config(shared_bottom_on=True))
    assert ln4.shared is not None and ln4.hyper is None and ln4.policy is not None


def test_informed_flag_adds_extra_input():
    ln = init_learners(WORLD, tiny_config(informed=True))
    assert ln.hyper.config.extra_dim == 1


# -- ranking ---------------------------------------------------------------------


def test_score_candidates_sorted_by_utility_with_id_tiebreak():
    ln = init_learners(WORLD, tiny_config())
    s_u = encode_state(ln, [], context_vec(WORLD.config, 0))
    ids, utils, y_hat = score_candidates(ln, s_u, range(12), np.array([0.5, 0.5]))
    assert sorted(ids.tolist()) == list(range(12))
    assert np.all(np.diff(utils) <= 1e-12)
    for j in range(len(ids) - 1):  # equal utility must keep ascending ids
        if abs(utils[j] - utils[j + 1]) < 1e-15:
            assert ids[j] < ids[j + 1]
    np.testing.assert_allclose(y_hat @ np.array([0.5, 0.5]), utils, atol=1e-12)


def test_score_candidates_utility_is_linear_in_alpha():
    ln = init_learners(WORLD, tiny_config())
    s_u = encode_state(ln, [], context_vec(WORLD.config, 3))
    cand = np.arange(12)
    a1, a2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    mix = 0.3 * a1 + 0.7 * a2
    got = {}
    for a in (a1, a2, mix):
        ids, utils, _ = score_candidates(ln, s_u, cand, a)
        got[a.tobytes()] = dict(zip(ids.tolist(), utils.tolist()))
    for i in range(12):
        expect = 0.3 * got[a1.tobytes()][i] + 0.7 * got[a2.tobytes()][i]
        assert abs(got[mix.tobytes()][i] - expect) < 1e-9


def test_score_candidates_rejects_bad_inputs():
    ln = init_learners(WORLD, tiny_config())
    s_u = encode_state(ln, [], context_vec(WORLD.config, 0))
    with pytest.raises(LookupError):
        score_candidates(ln, s_u, [0, 99], np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        score_candidates(ln, s_u, [], np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        score_candidates(ln, s_u, [0, 1], np.array([0.9, 0.9]))


# -- episodes ----------------------------------------------------------------------


def test_episode_shapes_and_slate_validity():
    ln = init_learners(WORLD, tiny_config(top_k=3))
    res = run_episode(WORLD, ln, ln.config, 0, 6, substream(5, "ep"))
    assert res.realized.shape == (6, 2) and res.alphas.shape == (6, 2)
    assert len(res.slates) == 6 and len(res.consumed) == 6
    for slate in res.slates:
        assert len(slate) == 3 and len(set(slate)) == 3
        assert all(0 <= i < 12 for i in slate)
    assert res.consumed == [s[0] for s in res.slates]
    np.testing.assert_allclose(res.means, res.realized.mean(axis=0), atol=1e-15)
    assert np.all(res.alphas >= 0)
    np.testing.assert_allclose(res.alphas.sum(axis=1), 1.0, atol=1e-9)


def test_episode_same_seed_is_identical():
    ln = init_learners(WORLD, tiny_config())
    r1 = run_episode(WORLD, ln, ln.config, 2, 5, substream(9, "ep"))
    r2 = run_episode(WORLD, ln, ln.config, 2, 5, substream(9, "ep"))
    assert r1.consumed == r2.consumed
    np.testing.assert_array_equal(r1.realized, r2.realized)
    np.testing.assert_array_equal(r1.alphas, r2.alphas)


def test_episode_collect_fills_buffers():
    ln = init_learners(WORLD, tiny_config())
    run_episode(WORLD, ln, ln.config, 1, 5, substream(2, "ep"), collect=True)
    assert len(ln.replay) == 5 and len(ln.supervised) == 5
    assert ln.replay.sample(1, substream(0, "s"))[0].state.shape == (8,)
    # last transition of an episode is terminal
    assert [t.terminal for t in ln.replay.sample(0, substream(0, "s"))] == []


def test_episode_marks_only_last_transition_terminal():
    ln = init_learners(WORLD, tiny_config())
    run_episode(WORLD, ln, ln.config, 1, 4, substream(2, "ep"), collect=True)
    flags = [t.terminal for t in ln.replay._buf]
    assert flags == [False, False, False, True]


def test_random_mode_episode_has_nan_predictions():
    cfg = tiny_config(mode="random")
    ln = init_learners(WORLD, cfg)
    res = run_episode(WORLD, ln, cfg, 0, 5, substream(1, "ep"))
    assert np.isnan(res.predicted).all()
    assert np.isfinite(res.realized).all()


def test_random_baseline_matches_population_means():
    # many random-slate episodes should average to the catalog-wide objective means
    world = tiny_world(n_users=30, n_items=40, seed=12)
    cfg = tiny_config(mode="random", eval_steps=40)
    ln = init_learners(world, cfg)
    means, _ = evaluate(world, ln, cfg, range(30), seed=77, steps=40)
    pop = []
    rng = substream(81, "pop")
    from morec.simenv import sample_objectives

    for u in range(30):
        for i in range(40):
            pop.append(sample_objectives(world, u, i, int(rng.integers(0, 24)), rng))
    pop = np.mean(pop, axis=0)
    np.testing.assert_allclose(means, pop, atol=0.05)


# -- supervised update ---------------------------------------------------------------


def test_predictor_update_trains_encoder_and_predictor_jointly():
    ln = init_learners(WORLD, tiny_config())
    run_episode(WORLD, ln, ln.config, 0, 10, substream(4, "ep"), collect=True)
    batch = list(ln.supervised)
    before_embed = ln.encoder.store["encoder/embed"].data.copy()
    before_gen = ln.hyper.store["hyper/0/g1_w"].data.copy()
    losses = [predictor_update(ln, batch, lr=0.05) for _ in range(60)]
    assert losses[-1] < losses[0]
    assert not np.array_equal(before_embed, ln.encoder.store["encoder/embed"].data)
    assert not np.array_equal(before_gen, ln.hyper.store["hyper/0/g1_w"].data)


def test_predictor_update_rejects_empty_batch():
    ln = init_learners(WORLD, tiny_config())
    with pytest.raises(ValueError):
        predictor_update(ln, [], lr=0.1)


def test_log_to_examples_uses_preceding_history_only():
    world = tiny_world()
    recs = simulate_log(world, 5, substream(3, "log"))
    ex = log_to_examples(recs, window=4)
    assert len(ex) == len(recs)
    # first example per user has an all-padding history
    seen = set()
    for e, r in zip(ex, recs):
        if r.user_id not in seen:
            np.testing.assert_array_equal(e.ids, np.zeros(4))
            np.testing.assert_array_equal(e.deltas, np.zeros(4))
            seen.add(r.user_id)
        assert e.item == r.item_id
        np.testing.assert_array_equal(e.y, r.objectives)


# -- training ------------------------------------------------------------------------


def test_train_zero_steps_returns_untouched_init():
    ln0 = init_learners(WORLD, tiny_config())
    ln, log = train(WORLD, tiny_config(train_steps=0))
    assert log == []
    for name, store in ln.stores().items():
        ref = ln0.stores()[name]
        for pname, t in store.items():
            np.testing.assert_array_equal(t.data, ref[pname].data)


def test_train_is_bit_identical_across_runs():
    def once():
        world = tiny_world()
        ln, log = train(world, tiny_config(train_steps=30))
        means, results = evaluate(world, ln, ln.config, [0, 1], seed=5)
        return ln, log, means, results

    a_ln, a_log, a_means, a_res = once()
    b_ln, b_log, b_means, b_res = once()
    np.testing.assert_array_equal(a_means, b_means)
    for name, store in a_ln.stores().items():
        for pname, t in store.items():
            np.testing.assert_array_equal(t.data, b_ln.stores()[name][pname].data)
    for ra, rb in zip(a_log, b_log):
        for k in ra:
            assert ra[k] == rb[k] or (np.isnan(ra[k]) and np.isnan(rb[k]))
    for ea, eb in zip(a_res, b_res):
        assert ea.consumed == eb.consumed
        np.testing.assert_array_equal(ea.realized, eb.realized)


def test_train_logs_one_row_per_step_with_updates_after_warmup():
    ln, log = train(WORLD, tiny_config(train_steps=30, batch_size=8))
    assert len(log) == 30
    assert all(np.isnan(row["pred_loss"]) for row in log[:7])
    assert all(np.isfinite(row["pred_loss"]) for row in log[8:])
    assert all(np.isfinite(row["critic_loss"]) for row in log[8:])
    assert {"step", "reward", "noise", "alpha_0", "alpha_1"} <= set(log[0])


def test_train_random_mode_never_updates_learners():
    cfg = tiny_config(mode="random", train_steps=25)
    ln0 = init_learners(WORLD, cfg)
    ln, log = train(WORLD, cfg)
    for name, store in ln.stores().items():
        for pname, t in store.items():
            np.testing.assert_array_equal(t.data, ln0.stores()[name][pname].data)
    assert all(np.isnan(row["pred_loss"]) for row in log)


def test_train_fixed_mode_constant_alpha_and_no_policy():
    cfg = tiny_config(mode="fixed", alpha_fixed=(0.25, 0.75), train_steps=20)
    ln, log = train(WORLD, cfg)
    assert ln.policy is None
    for row in log:
        assert row["alpha_0"] == 0.25 and row["alpha_1"] == 0.75
        assert np.isnan(row["critic_loss"])


def test_train_restricted_users_only_touches_those_users():
    ln, log = train(WORLD, tiny_config(train_steps=12), users=[2, 4])
    # round robin between the two users; replay transitions alternate
    assert len(ln.replay) == 12


def test_evaluate_does_not_mutate_learners():
    ln, _ = train(WORLD, tiny_config(train_steps=20))
    before = {n: {p: t.data.copy() for p, t in s.items()} for n, s in ln.stores().items()}
    evaluate(WORLD, ln, ln.config, [0, 1, 2], seed=3)
    for name, store in ln.stores().items():
        for pname, t in store.items():
            np.testing.assert_array_equal(t.data, before[name][pname])
    assert len(ln.replay) == 20  # eval pushed nothing


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_guard_raises_pipeline_error():
    # absurd learning rate blows the predictor up within a few updates
    cfg = tiny_config(train_steps=40, lr=1e6)
    with pytest.raises(PipelineError):
        train(WORLD, cfg)


# -- baselines and ablations -----------------------------------------------------------


def test_run_baseline_fixed_trains_shared_bottom():
    ln, log, means, results = run_baseline_fixed(
        WORLD, tiny_config(train_steps=20), (0.5, 0.5), users=[0, 1], eval_users=[0], eval_seed=4
    )
    assert ln.shared is not None and ln.policy is None
    assert means.shape == (2,)
    assert results[0].metadata["mode"] == "fixed"
    assert results[0].metadata["alpha_fixed"].startswith("0.5")


def test_run_ablation_variants_configure_learners():
    for variant, flags in ABLATION_VARIANTS.items():
        ln, _, means, results = run_ablation(
            WORLD, tiny_config(train_steps=16), variant, users=[0, 1], eval_users=[0], eval_seed=4
        )
        assert results[0].metadata["variant"] == str(variant)
        assert np.all(means >= 0.0) and means.shape == (2,)
        if flags.get("attention_off"):
            assert ln.encoder.config.attention is False
        if flags.get("time_gate_off"):
            assert ln.encoder.config.time_gate is False
        if flags.get("shared_bottom_on"):
            assert ln.shared is not None and ln.policy is not None


def test_run_ablation_rejects_unknown_variant():
    with pytest.raises(ValueError):
        run_ablation(WORLD, tiny_config(), 3)


def test_no_tape_left_active_after_training():
    train(WORLD, tiny_config(train_steps=12))
    with ad.Tape():
        pass  # raises if a tape leaked
