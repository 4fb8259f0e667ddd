import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cshift.edges import (Arch, EdgeModel, OptimizerState, SchedulerState, col2im,
                          composite_loss, fit, im2col, init_edge, load_edge, plateau_step,
                          save_edge, sgd_nesterov_step, train_edge)
from cshift.errors import ConfigError, FormatError, NumericsError, ShapeError
from cshift.imaging import C1
from cshift.maps import Kind, PredictionMap, TaskSpec
from cshift.world import SceneConfig, ground_truth_store, roster

RGB = TaskSpec("rgb", 3)
GRAY = TaskSpec("grayscale", 1)
SEG = TaskSpec("seg", 4, Kind.CLASSIFICATION)


def gradient_rel_error(model, x, y, coords, h=1e-6):
    """Max abs deviation from central differences, relative to the largest FD entry."""
    _, grad = model.loss_and_grad(x, y)
    fd = np.empty(len(coords))
    for k, i in enumerate(coords):
        p = model.params.copy()
        p[i] += h
        up = model.loss_and_grad(x, y, p)[0]
        p[i] -= 2 * h
        down = model.loss_and_grad(x, y, p)[0]
        fd[k] = (up - down) / (2 * h)
    return np.max(np.abs(grad[coords] - fd)) / max(np.max(np.abs(fd)), 1e-12)


def random_problem(rng, arch, dst, size=6, batch=2):
    model = init_edge(RGB, dst, arch, seed=int(rng.integers(1 << 30)), patch=3, width=5)
    x = rng.random((batch, size, size, 3))
    if dst.is_classification:
        y = rng.dirichlet(np.ones(dst.channels), size=(batch, size, size))
    else:
        y = rng.random((batch, size, size, dst.channels))
    return model, x, y


@settings(max_examples=12)
@given(st.sampled_from(list(Arch)), st.sampled_from([GRAY, SEG]), st.integers(0, 2 ** 31))
def test_gradients_match_finite_differences(arch, dst, seed):
    rng = np.random.default_rng(seed)
    model, x, y = random_problem(rng, arch, dst)
    coords = rng.choice(model.n_params, size=min(12, model.n_params), replace=False)
    assert gradient_rel_error(model, x, y, coords) < 1e-4


def test_composite_loss_constants():
    pred = PredictionMap(GRAY, np.zeros((12, 12, 1)))
    target = PredictionMap(GRAY, np.ones((12, 12, 1)))
    value, _ = composite_loss(pred, target)
    assert value == pytest.approx(0.5 * 1 + 0.5 * (1 - C1 / (1 + C1)), abs=1e-12)
    with pytest.raises(ShapeError):
        composite_loss(pred, PredictionMap(GRAY, np.ones((4, 4, 1))))


def test_im2col_adjoint():
    rng = np.random.default_rng(0)
    x = rng.random((2, 5, 6, 3))
    g = rng.random((2, 5, 6, 27))
    assert np.isclose((im2col(x, 3) * g).sum(), (x * col2im(g, 3, 3)).sum())


def test_nesterov_step_by_hand():
    opt = OptimizerState(lr=0.1, momentum=0.9, weight_decay=0.0)
    p, opt = sgd_nesterov_step(np.array([1.0]), np.array([2.0]), opt)
    assert p[0] == pytest.approx(1 - 0.1 * (2 + 0.9 * 2))
    p, opt = sgd_nesterov_step(p, np.array([1.0]), opt)
    buf = 0.9 * 2 + 1
    assert opt.buffer[0] == pytest.approx(buf)
    assert p[0] == pytest.approx(1 - 0.38 - 0.1 * (1 + 0.9 * buf))
    with pytest.raises(NumericsError):
        sgd_nesterov_step(p, np.array([np.nan]), opt)


def test_plateau_halves_after_patience():
    sched, opt = SchedulerState(patience=2), OptimizerState(lr=1.0)
    for loss in (1.0, 1.0, 1.0):
        sched, opt = plateau_step(sched, loss, opt)
    assert opt.lr == 1.0
    sched, opt = plateau_step(sched, 1.0, opt)
    assert opt.lr == 0.5


def test_training_is_seed_deterministic():
    rng = np.random.default_rng(5)
    model, x, y = random_problem(rng, Arch.PATCH_MLP, GRAY, size=8, batch=4)
    a = fit(model, x, y, epochs=3, batch=2, seed=11)
    b = fit(model, x, y, epochs=3, batch=2, seed=11)
    c = fit(model, x, y, epochs=3, batch=2, seed=12)
    assert np.array_equal(a.model.params, b.model.params)
    assert not np.array_equal(a.model.params, c.model.params)
    before = model.params.copy()
    fit(model, x, y, epochs=1, batch=2, seed=0)
    assert np.array_equal(model.params, before)


def test_grayscale_edge_learns_linear_map():
    s = ground_truth_store(SceneConfig(), roster(("rgb", "grayscale")), range(64))
    x, y = s.views["rgb"], s.views["grayscale"]
    model = init_edge(RGB, GRAY, Arch.PATCH_LINEAR, seed=0)
    res = fit(model, x, y, epochs=30, batch=2, seed=0)
    assert res.trace[-1] < 1e-3
    assert 100 * np.abs(res.model.predict(x) - y).mean() < 1.0


def test_zero_linear_edge_predicts_half():
    m = EdgeModel(RGB, GRAY, Arch.PATCH_LINEAR)
    assert np.all(m.predict(np.random.default_rng(0).random((4, 4, 3))) == 0.5)


def test_predict_shapes_and_ranges():
    rng = np.random.default_rng(1)
    for arch in Arch:
        m = init_edge(RGB, SEG, arch, seed=1)
        p = m.predict(rng.random((7, 9, 3)))
        assert p.shape == (1, 7, 9, 4)
        assert np.allclose(p.sum(-1), 1)
        sharp = m.predict(rng.random((7, 9, 3)), temperature=0.25)
        assert np.allclose(sharp.sum(-1), 1)
        g = init_edge(RGB, GRAY, arch, seed=1).predict(rng.random((2, 5, 5, 3)))
        assert np.all((g > 0) & (g < 1))
    with pytest.raises(ConfigError):
        m.predict(rng.random((5, 5, 3)), temperature=0)
    with pytest.raises(ShapeError):
        m.predict(rng.random((5, 5, 2)))


def test_checkpoint_round_trip(tmp_path):
    for arch in Arch:
        m = init_edge(RGB, SEG, arch, seed=3, patch=3, width=4)
        save_edge(m, tmp_path / "e.csprm")
        back = load_edge(tmp_path / "e.csprm")
        assert (back.src, back.dst, back.arch, back.patch, back.width) == (
            m.src, m.dst, m.arch, m.patch, m.width)
        assert np.array_equal(back.params, m.params.astype(np.float32))
    blob = (tmp_path / "e.csprm").read_bytes()
    (tmp_path / "bad.csprm").write_bytes(b"XXXXX\0" + blob[6:])
    with pytest.raises(FormatError):
        load_edge(tmp_path / "bad.csprm")
    (tmp_path / "short.csprm").write_bytes(blob[:-2])
    with pytest.raises(FormatError):
        load_edge(tmp_path / "short.csprm")


def test_train_edge_checks_tasks():
    m = init_edge(RGB, GRAY, seed=0)
    inp = [PredictionMap(RGB, np.zeros((4, 4, 3)))]
    with pytest.raises(ShapeError):
        train_edge(m, inp, [PredictionMap(SEG, np.full((4, 4, 4), 0.25))], 1, 1, 0)
    res = train_edge(m, inp, [PredictionMap(GRAY, np.zeros((4, 4, 1)))], 2, 1, 0)
    assert len(res.trace) == 2


def test_parameter_count_validated():
    with pytest.raises(ShapeError):
        EdgeModel(RGB, GRAY, Arch.PATCH_LINEAR, np.zeros(3))
