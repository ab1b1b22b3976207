import math

import numpy as np
import pytest

import gradshield as gs


def softplus_net(seed=3):
    spec = gs.ModelSpec.mlp(2, [8], 2, gs.Activation.Softplus)
    return spec, gs.Parameters.initialize(spec, seed)


def numpy_logits(spec, params, x):
    # Dense [in, out] weight then bias, per layer.
    v = params.values
    w1, b1 = v[:16].reshape(2, 8), v[16:24]
    w2, b2 = v[24:40].reshape(8, 2), v[40:42]
    hidden = np.logaddexp(0.0, x @ w1 + b1)
    return hidden @ w2 + b2


def test_version_and_spec():
    assert gs.__version__ == "0.1.0"
    spec, params = softplus_net()
    assert spec.parameter_count == 42 == len(params)
    assert spec.smooth
    assert gs.ModelSpec.from_json(spec.to_json()) == spec


def test_logits_match_numpy():
    spec, params = softplus_net()
    x = np.random.default_rng(0).uniform(size=(5, 2))
    np.testing.assert_allclose(gs.logits(spec, params, x), numpy_logits(spec, params, x), rtol=1e-12)


def test_input_gradient_matches_central_differences():
    spec, params = softplus_net()
    x = np.array([[0.3, 0.7]])
    labels = [1]

    def ce(z):
        lg = numpy_logits(spec, params, z)[0]
        return np.log(np.exp(lg).sum()) - lg[1]

    h = 1e-6
    fd = [(ce(x + h * e) - ce(x - h * e)) / (2 * h) for e in np.eye(2)[:, None, :]]
    np.testing.assert_allclose(gs.input_gradient(spec, params, x, labels)[0], fd, rtol=1e-6, atol=1e-9)


def test_penalty_modes_agree_for_small_h():
    spec, params = softplus_net()
    x = np.random.default_rng(1).uniform(size=(8, 2))
    labels = [0, 1] * 4
    g = gs.input_gradient(spec, params, x, labels)
    exact = float(np.mean(np.sum(g * g, axis=1)))
    db, db_grad = gs.penalty(spec, params, x, labels, mode=gs.PenaltyMode.DoubleBackprop)
    fd, fd_grad = gs.penalty(spec, params, x, labels, mode=gs.PenaltyMode.FiniteDifference, h=1e-4)
    assert db == pytest.approx(exact, rel=1e-12)
    assert fd == pytest.approx(exact, rel=1e-3)
    assert db_grad.shape == fd_grad.shape == (42,)


def test_training_reduces_loss():
    train = gs.two_moons(100, 0.1, seed=1)
    assert len(train) == 100 and train.inputs.shape == (100, 2)
    assert train.inputs.min() >= 0.0 and train.inputs.max() <= 1.0
    spec = gs.ModelSpec.mlp(2, [16], 2, gs.Activation.Relu)
    cfg = gs.RegConfig()
    cfg.lam, cfg.epochs, cfg.learning_rate, cfg.seed = 0.1, 30, 0.3, 5
    params, epochs = gs.train(spec, train, cfg)
    assert len(epochs) == 30
    assert epochs[-1]["loss"] < epochs[0]["loss"]
    again, _ = gs.train(spec, train, cfg)
    assert again == params


def test_attacks_and_certificate_are_consistent():
    train = gs.two_moons(100, 0.1, seed=1)
    test = gs.two_moons(20, 0.1, seed=2)
    spec = gs.ModelSpec.mlp(2, [16], 2, gs.Activation.Softplus)
    cfg = gs.RegConfig()
    cfg.epochs, cfg.learning_rate = 30, 0.3
    params, _ = gs.train(spec, train, cfg)
    model = gs.Classifier(spec, params)

    x, y = test.inputs[0], test.labels[0]
    model.reset_counters()
    r = gs.grad_free_attack(model, x, y, 0.2, gs.Norm.L2, budget=100, seed=4)
    assert model.gradient_queries == 0 and r["queries"] <= 100
    assert r["perturbation_norm"] <= 0.2 + 1e-12

    distances = gs.min_adv_distances(model, test, gs.Norm.L2, seed=9)
    sampler = gs.SamplerConfig()
    sampler.n_blocks, sampler.block_size = 30, 10
    report = gs.certify(model, test, [0.0, 0.05, 0.1], gs.Norm.L2, sampler)
    # A lower bound never exceeds a distance an attack actually reached;
    # 0.5 is the search cap and means nothing was found.
    found = distances < 0.5
    assert found.any()
    assert np.all(report["l_bounds"][found] <= distances[found] + 1e-9)
    assert report["certified_error"][0] == pytest.approx(report["clean_error"])
    assert list(report["certified_error"]) == sorted(report["certified_error"])


def test_bound_helpers_and_gev():
    assert gs.l_bound(-2.0, 0.0, 4.0) == 0.5
    assert gs.l_bound(1.0, 0.0, 4.0) == 0.0
    assert gs.omega_bound_certified(-1.0, 2.0, 0.0, 0.2, 0.4)
    assert not gs.omega_bound_certified(-1.0, 2.0, 0.0, 0.2, 0.41)
    q = gs.gev_upper_quantile(gs.GevParams(0.0, 1.0, 0.0), 0.001)
    assert q == pytest.approx(-math.log(-math.log(0.999)), rel=1e-12)
    samples = np.random.default_rng(2).gumbel(size=2000)
    fit = gs.gev_fit(samples)
    assert abs(fit.mu) < 0.1 and abs(fit.sigma - 1) < 0.1 and abs(fit.xi) < 0.1


def test_checkpoint_round_trip_and_errors(tmp_path):
    spec, params = softplus_net()
    path = tmp_path / "m.ckpt"
    gs.save_checkpoint(spec, params, "seed=3\n", path)
    spec2, params2, echo = gs.load_checkpoint(path)
    assert spec2 == spec and echo == "seed=3\n"
    np.testing.assert_allclose(params2.values, params.values, rtol=1e-7)
    data = bytearray(path.read_bytes())
    data[-1] ^= 1
    path.write_bytes(bytes(data))
    with pytest.raises(gs.CheckpointError):
        gs.load_checkpoint(path)
    with pytest.raises(gs.CheckpointError):
        gs.load_checkpoint(tmp_path / "missing.ckpt")


def test_shape_and_range_errors():
    spec, params = softplus_net()
    with pytest.raises(gs.ShapeError):
        gs.logits(spec, params, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        gs.Dataset(np.full((2, 2), 1.5), [0, 1])


def test_pipeline_commands(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "[data]\ntrain_n=60\ntest_n=10\n"
        "[model]\nhidden=8\n"
        "[train]\nepochs=3\n"
        "[attack]\nbudget=30\n"
        "[certify]\nn_blocks=30\nblock_size=10\nradii=0,0.1\n"
    )
    out = tmp_path / "run"
    files = gs.run_train(cfg, out=out, threads=1)
    assert (out / "model.ckpt").exists()
    assert any(str(f).endswith("train_summary.csv") for f in files)
    gs.run_certify(cfg, out=out, threads=2)
    assert (out / "certify_summary.csv").read_text().startswith("schema_version")
    with pytest.raises(gs.ConfigError):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[train]\nlamda=1\n")
        gs.run_train(bad, out=out)
