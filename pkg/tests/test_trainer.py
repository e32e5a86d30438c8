import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from sne import numerics as nx
from sne.codec import QuantTable, encode_image
from sne.corpus import desk_split
from sne.errors import ParameterError, ShapeError
from sne.estimator import SkipMode, SneConfig, init_params, prepare_sequence
from sne.trainer import (LOG_COLUMNS, OptimizerState, TrainSchedule, comm_loss, dihedral_variants,
                         episode_mse, epoch_plan, make_chunks, noise_variance, optimizer_mode,
                         reg_comm_loss, sequence_loss, step, total_loss, train)


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


class TestChannel:
    def test_coincident_states(self):
        z = rand(1, 5)
        assert nx.value_of(comm_loss(z, z, np.eye(5)))[0, 0] == 0.0

    def test_annihilated_co_state(self):
        z = rand(1, 5)
        assert_allclose(comm_loss(z, rand(1, 5, seed=1), np.zeros((5, 5))), np.linalg.norm(z), atol=1e-15)

    def test_matches_direct_norm(self):
        zs, zc, W = rand(1, 6), rand(1, 6, seed=1), rand(6, 6, seed=2)
        assert_allclose(comm_loss(zs, zc, W), np.linalg.norm(W @ zc[0] - zs[0]), atol=1e-12)

    def test_rows_are_averaged(self):
        zs, zc, W = rand(4, 3), rand(4, 3, seed=1), rand(3, 3, seed=2)
        expect = np.mean([np.linalg.norm(W @ zc[i] - zs[i]) for i in range(4)])
        assert_allclose(comm_loss(zs, zc, W), expect, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            comm_loss(rand(1, 4), rand(1, 3), np.eye(3))

    def test_zero_variance_reduces_to_plain_channel(self):
        zs, zc, W = rand(3, 5), rand(3, 5, seed=1), rand(5, 5, seed=2)
        reg = reg_comm_loss(zs, zc, W, nx.RngStream(0, 2), 0.0, 0.0)
        assert abs(nx.value_of(reg)[0, 0] - nx.value_of(comm_loss(zs, zc, W))[0, 0]) <= 1e-12

    def test_reg_deterministic_and_rejects_negative_variance(self):
        zs, zc, W = rand(3, 5), rand(3, 5, seed=1), rand(5, 5, seed=2)
        a = reg_comm_loss(zs, zc, W, nx.RngStream(4, 2), 0.1, 0.3)
        b = reg_comm_loss(zs, zc, W, nx.RngStream(4, 2), 0.1, 0.3)
        assert_array_equal(a, b)
        with pytest.raises(ParameterError):
            reg_comm_loss(zs, zc, W, nx.RngStream(4, 2), 0.0, -0.1)

    def test_chi_square_expectation(self):
        D, sigma2 = 8, 0.04
        z = rand(1, D)
        rng = nx.RngStream(9, 2)
        h2 = [nx.value_of(reg_comm_loss(z, z, np.eye(D), rng, 0.0, sigma2))[0, 0] ** 2
              for _ in range(4000)]
        assert np.mean(h2) == pytest.approx(sigma2 * D, rel=0.05)


class TestEpisodeMse:
    def test_perfect(self):
        t = rand(3, 4)
        assert nx.value_of(episode_mse(t, [t, t]))[0, 0] == 0.0

    def test_half_factor(self):
        assert nx.value_of(episode_mse(np.zeros((1, 1)), [np.ones((1, 1))]))[0, 0] == 0.5

    def test_loop_oracle(self):
        B, K, E = 3, 4, 5
        t = rand(B, E)
        preds = [rand(B, E, seed=k + 1) for k in range(K)]
        expect = 0.0
        for k in range(K):
            for b in range(B):
                for i in range(E):
                    expect += (preds[k][b, i] - t[b, i]) ** 2
        expect /= 2 * B * K
        assert abs(nx.value_of(episode_mse(t, preds))[0, 0] - expect) <= 1e-12

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            episode_mse(np.zeros((2, 3)), [np.zeros((2, 4))])
        with pytest.raises(ShapeError):
            episode_mse(np.zeros((2, 3)), [])


# ---------------------------------------------------------------------------
# miniature model fixtures
# ---------------------------------------------------------------------------


def mini_config(**kw):
    base = dict(block_edge=4, state_dim=3, init_scale=0.5)
    base.update(kw)
    return SneConfig(**base)


def mini_batch(config, n=2, size=12, seed=0):
    rng = np.random.default_rng(seed)
    seqs = []
    for _ in range(n):
        img = rng.uniform(size=(size, size))
        rep = encode_image(img, QuantTable.standard(config.block_edge, 0.5))
        seqs.append(prepare_sequence(rep, config, 0, img))
    return seqs


def test_total_loss_zero_for_perfect_siblings():
    cfg = mini_config()
    batch = mini_batch(cfg)
    for seq in batch:
        seq.targets = seq.anchor.copy()
    params = {k: np.zeros_like(v) for k, v in init_params(cfg, nx.RngStream(0)).items()}
    assert nx.value_of(total_loss(batch, params, cfg, 2, "comm", 0.0))[0, 0] == 0.0


def test_total_loss_is_mean_of_sequences():
    cfg = mini_config()
    batch = mini_batch(cfg, n=3)
    p = init_params(cfg, nx.RngStream(1))
    each = [nx.value_of(sequence_loss(s, p, cfg, 2, 0.1))[0, 0] for s in batch]
    assert_allclose(total_loss(batch, p, cfg, 2, "comm", 0.1), np.mean(each), atol=1e-14)


def test_source_gradients_ignore_co_state_without_channel():
    cfg = mini_config()
    batch = mini_batch(cfg)
    p = init_params(cfg, nx.RngStream(2))
    q = dict(p)
    q["co.lstm.W"] = p["co.lstm.W"] + 0.3
    _, ga = nx.tape_gradients(lambda v: total_loss(batch, v, cfg, 2, "comm", 0.0), p)
    _, gb = nx.tape_gradients(lambda v: total_loss(batch, v, cfg, 2, "comm", 0.0), q)
    for k in ga:
        if k.startswith("src."):
            assert_array_equal(ga[k], gb[k])


@pytest.mark.parametrize("cell", ["lstm", "elman"])
def test_total_loss_gradient_check(cell):
    cfg = mini_config(cell=cell)
    batch = mini_batch(cfg, n=1, size=8, seed=3)
    p = init_params(cfg, nx.RngStream(5))
    errs = nx.gradient_errors(lambda v: total_loss(batch, v, cfg, 2, "reg_comm", 0.1,
                                                   nx.RngStream(1, 2), 0.0, 0.01), p, epsilon=1e-5)
    assert max(errs.values()) <= 1e-5, errs


def test_channel_gradient_reaches_co_estimator():
    cfg = mini_config()
    batch = mini_batch(cfg, n=1, seed=4)
    p = init_params(cfg, nx.RngStream(6))
    for alpha, nonzero in ((0.1, True), (0.0, False)):
        _, g = nx.tape_gradients(
            lambda v: total_loss(batch, v, cfg, 2, "comm", alpha, co_mse=False), p)
        norm = np.sqrt(sum(np.sum(g[k] ** 2) for k in g if k.startswith("co.") or k == "comm.W_err"))
        assert (norm > 0) == nonzero


def test_skip_gate_receives_straight_through_gradient():
    cfg = mini_config(skip=SkipMode.SKIP_BOTH)
    batch = mini_batch(cfg, n=1, seed=5)
    p = init_params(cfg, nx.RngStream(7))
    _, g = nx.tape_gradients(lambda v: total_loss(batch, v, cfg, 3, "comm", 0.1), p)
    assert np.abs(g["src.skip.Wp"]).sum() > 0
    assert np.abs(g["co.skip.Wp"]).sum() > 0


def test_regularized_channel_needs_rng():
    cfg = mini_config()
    with pytest.raises(ParameterError):
        total_loss(mini_batch(cfg, 1), init_params(cfg, nx.RngStream(0)), cfg, 2, "reg_comm", 0.1)


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------


def test_noise_variance():
    assert noise_variance(0, 0.01, 120) == 0.01
    assert noise_variance(120, 0.01, 120) == 0.0
    assert noise_variance(200, 0.01, 120) == 0.0
    assert noise_variance(60, 0.01, 120) == pytest.approx(0.005, abs=1e-15)


def test_epoch_plan():
    s = TrainSchedule()
    assert epoch_plan(7, s) == ("reg_comm", 3)
    assert epoch_plan(0, s) == ("comm", 2)
    assert epoch_plan(127, s) == ("comm", 2)
    assert [e for e in range(300) if epoch_plan(e, s)[0] == "reg_comm"] == list(range(7, 120, 8))


def test_schedule_validation():
    with pytest.raises(ParameterError):
        TrainSchedule(total_epochs=10, switch_epoch=10)
    with pytest.raises(ParameterError):
        TrainSchedule(K_plain=0)
    with pytest.raises(ParameterError):
        TrainSchedule(clip=0)
    assert TrainSchedule().sgd_lr == pytest.approx(2e-5)


def test_sgd_fixed_point_and_clipping():
    s = TrainSchedule(total_epochs=4, switch_epoch=2, lr_sgd=1.0)
    p = {"w": np.array([[1.0, -2.0]])}
    opt = OptimizerState(mode="sgd")
    assert_array_equal(step(p, {"w": np.zeros((1, 2))}, opt, 3, s)["w"], p["w"])
    out = step(p, {"w": np.array([[100.0, -100.0]])}, opt, 3, s)
    assert_array_equal(out["w"], [[1.0 - 15.0, -2.0 + 15.0]])


def test_adam_first_step_oracle():
    s = TrainSchedule(total_epochs=10, switch_epoch=4, lr0=0.1)
    p = {"w": np.array([[0.5, -0.5, 1.0]])}
    g = np.array([[0.2, -3.0, 20.0]])
    out = step(p, {"w": g}, OptimizerState(), 1, s)
    lr = 0.1 * (1 - 1 / 4) ** 0.5
    gc = np.clip(g, -15, 15)
    m_hat = 0.1 * gc / (1 - 0.9)
    v_hat = 0.001 * gc ** 2 / (1 - 0.999)
    assert_allclose(out["w"], p["w"] - lr * m_hat / (np.sqrt(v_hat) + 1e-8), atol=1e-15)


def test_optimizer_switches_once():
    s = TrainSchedule(total_epochs=12, switch_epoch=5)
    opt = OptimizerState()
    p = {"w": np.ones((1, 1))}
    modes = []
    for epoch in range(12):
        p = step(p, {"w": np.ones((1, 1))}, opt, epoch, s)
        modes.append(opt.mode)
    assert modes == [optimizer_mode(e, s) for e in range(12)] == ["adam"] * 5 + ["sgd"] * 7
    assert opt.transitions == 1
    with pytest.raises(ParameterError):
        step(p, {"w": np.ones((1, 1))}, opt, 0, s)


def test_step_shape_check():
    with pytest.raises(ShapeError):
        step({"w": np.ones((1, 2))}, {"w": np.ones((2, 1))}, OptimizerState(), 0, TrainSchedule())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def tiny_images(n=2, size=8, seed=0):
    rng = np.random.default_rng(seed)
    return [np.round(rng.uniform(size=(size, size)) * 255) / 255 for _ in range(n)]


def test_train_is_deterministic():
    cfg = mini_config()
    sched = TrainSchedule(total_epochs=3, switch_epoch=2, batch=2, lr0=1e-2)
    a = train(tiny_images(), sched, cfg, seed=4, quality=0.5)
    b = train(tiny_images(), sched, cfg, seed=4, quality=0.5)
    assert a.log_text() == b.log_text()
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_worker_count_does_not_change_result():
    cfg = mini_config()
    sched = TrainSchedule(total_epochs=2, switch_epoch=1, batch=5, chunk=1, lr0=1e-2)
    imgs = tiny_images(5, seed=1)
    a = train(imgs, sched, cfg, seed=2, quality=0.5, workers=1)
    b = train(imgs, sched, cfg, seed=2, quality=0.5, workers=3)
    assert a.log_text() == b.log_text()
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_log_marks_regularized_epochs():
    cfg = mini_config()
    sched = TrainSchedule(total_epochs=25, switch_epoch=24, batch=2, lr0=1e-2)
    res = train(tiny_images(2, seed=5), sched, cfg, seed=0, quality=0.5)
    reg = [r["epoch"] for r in res.log if r["channel"] == "reg_comm"]
    assert reg == [7, 15, 23]
    assert all(r["K"] == (3 if r["epoch"] in reg else 2) for r in res.log)
    header = res.log_text().splitlines()[0].split("\t")
    assert tuple(header) == LOG_COLUMNS
    assert len(res.log_text().splitlines()) == 26


def test_desk_loss_decreases_and_stays_finite():
    train_imgs, _ = desk_split()
    cfg = SneConfig(state_dim=8)
    sched = TrainSchedule(total_epochs=21, switch_epoch=16, batch=6, lr0=1e-2)
    res = train(train_imgs, sched, cfg, seed=0, quality=0.15)
    assert res.log[20]["train_loss"] < res.log[0]["train_loss"]
    assert all(np.isfinite(v).all() for v in res.params.values())


def test_train_rejects_empty_corpus():
    with pytest.raises(ParameterError):
        train([], TrainSchedule(total_epochs=2, switch_epoch=1), mini_config(), seed=0)


def test_dihedral_variants():
    sq = np.arange(16.0).reshape(4, 4)
    variants = dihedral_variants(sq)
    assert len(variants) == 8
    assert len({v.tobytes() for v in variants}) == 8
    assert len(dihedral_variants(np.arange(8.0).reshape(2, 4))) == 4


def test_make_chunks_groups_by_grid():
    cfg = mini_config()
    seqs = mini_batch(cfg, 3, size=8) + mini_batch(cfg, 2, size=12)
    chunks = make_chunks(seqs, 2)
    assert [c.batch for c in chunks] == [2, 1, 2]
    assert [c.grid_shape for c in chunks] == [(2, 2), (2, 2), (3, 3)]


def test_schedule_is_frozen():
    with pytest.raises(dataclasses.FrozenInstanceError):
        TrainSchedule().alpha = 1.0
