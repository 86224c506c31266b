import numpy as np
import pytest
from scipy.signal import correlate

from advcompose.classifier import (
    AdversarialConfig, ConvNet, LinearClassifier, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train,
)
from advcompose.attacks import builtin_configs
from advcompose.errors import FormatError, TrainingDiverged
from advcompose.gradcheck import _net_input_case, _net_param_case, check_case
from advcompose.imagecore import LabeledDataset, synth_dataset
from advcompose.losses import cross_entropy


def test_forward_shapes_and_determinism(rng):
    net = ConvNet(seed=3)
    x = rng.uniform(0, 1, (3, 16, 16))
    logits = net.logits(x)
    assert logits.shape == (3,) and np.all(np.isfinite(logits))
    assert np.array_equal(logits, net.logits(x.copy()))
    assert net.logits(x[None]).shape == (1, 3)
    with pytest.raises(ValueError):
        net.logits(np.zeros((3, 8, 8)))


def test_zero_upstream_gives_zero_gradient(rng):
    net = ConvNet(seed=1)
    g = net.input_gradient(rng.uniform(0, 1, (3, 16, 16)), np.zeros(3))
    assert g.shape == (3, 16, 16) and not g.any()


def test_max_logit_gradient_on_8x8(rng):
    net = ConvNet(size=8, seed=2)
    x = rng.uniform(0, 1, (3, 8, 8))
    k = int(np.argmax(net.logits(x)))
    up = np.zeros(3)
    up[k] = 1.0
    g = net.input_gradient(x, up)
    h = 1e-5
    for _ in range(20):
        d = rng.standard_normal(x.shape)
        d /= np.linalg.norm(d)
        if not (np.array_equal(net.kink_signature(x + h * d), net.kink_signature(x))
                and np.array_equal(net.kink_signature(x - h * d), net.kink_signature(x))):
            continue
        fd = (net.logits(x + h * d)[k] - net.logits(x - h * d)[k]) / (2 * h)
        assert abs(np.sum(g * d) - fd) / max(abs(fd), 1e-300) < 1e-4


def _linear_map(net, x):
    """Jacobian of the identity-activation net at ``x``, built with scipy correlation and the
    max-pool selections of ``x`` (the net is affine on that pooling region)."""
    _, cache = net.forward(x)
    p = net.params

    def conv(a, w):
        return np.stack([sum(correlate(a[c], w[o, c], mode="same") for c in range(a.shape[0]))
                         for o in range(w.shape[0])])

    def pool(a, arg):
        c, h, w = a.shape
        win = a.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    cols = []
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = 1.0
        a = pool(conv(e.reshape(x.shape), p["conv1_w"]), cache["arg1"][0])
        a = pool(conv(a, p["conv2_w"]), cache["arg2"][0])
        cols.append(p["fc_w"] @ a.ravel())
    return np.array(cols).T


def test_identity_activation_gradient_equals_linear_map(rng):
    net = ConvNet(size=8, seed=4, activation="identity")
    x = rng.uniform(0, 1, (3, 8, 8))
    w = rng.standard_normal(3)
    a = _linear_map(net, x)
    assert np.allclose(net.input_gradient(x, w).ravel(), a.T @ w, atol=1e-12)


def test_linear_classifier_gradient(rng):
    w = rng.standard_normal((3, 12))
    clf = LinearClassifier(w, np.zeros(3), (3, 2, 2))
    up = rng.standard_normal(3)
    assert np.allclose(clf.input_gradient(rng.uniform(0, 1, (3, 2, 2)), up).ravel(), w.T @ up)


@pytest.mark.parametrize("builder", [_net_input_case, _net_param_case])
def test_network_gradients_match_finite_differences(trained_net, builder):
    rng = np.random.default_rng(5)
    errors = [e for e in (check_case(builder(trained_net, rng), rng) for _ in range(30)) if e is not None]
    assert len(errors) >= 25
    assert max(errors) < 1e-4


def test_maxpool_tie_routes_to_first():
    net = ConvNet(size=8, seed=0, activation="identity")
    net.params["conv1_w"][:] = 0.0
    net.params["conv1_b"][:] = 1.0  # constant activations: every pool window is a 4-way tie
    _, cache = net.forward(np.zeros((3, 8, 8)))
    assert not cache["arg1"].any()


def test_training_reaches_accuracy(trained_net, test_set):
    acc, mask = evaluate(trained_net, test_set)
    assert acc >= 0.90
    assert mask.shape == (300,)
    assert trained_net.trained


def test_single_sample_step_reduces_loss():
    data = synth_dataset(7, 1).subset([0])
    net = ConvNet(seed=0)
    before = cross_entropy(net.logits(data.images[0]), data.labels[0])[0]
    train(net, data, TrainConfig(epochs=1, batch_size=1, learning_rate=0.01))
    after = cross_entropy(net.logits(data.images[0]), data.labels[0])[0]
    assert after < before


def test_training_is_deterministic():
    data = synth_dataset(1, 10)
    a, log_a = train(ConvNet(seed=1), data, TrainConfig(epochs=2, seed=3))
    b, log_b = train(ConvNet(seed=1), data, TrainConfig(epochs=2, seed=3))
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert log_a.epoch_loss == log_b.epoch_loss


def test_mix_zero_equals_plain_training():
    data = synth_dataset(1, 10)
    attack = builtin_configs()["delta"]
    a, _ = train(ConvNet(seed=1), data, TrainConfig(epochs=2))
    b, _ = train(ConvNet(seed=1), data, TrainConfig(epochs=2, adversarial=AdversarialConfig(attack, 0.0)))
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_adversarial_training_changes_weights():
    data = synth_dataset(1, 4)
    attack = builtin_configs(min_iterations=2, max_iterations=2)["delta"]
    a, _ = train(ConvNet(seed=1), data, TrainConfig(epochs=1))
    b, _ = train(ConvNet(seed=1), data, TrainConfig(epochs=1, adversarial=AdversarialConfig(attack, 0.5)))
    assert any(a.params[k].tobytes() != b.params[k].tobytes() for k in a.params)


def test_training_errors():
    empty = LabeledDataset(np.zeros((0, 3, 16, 16)), np.zeros(0, dtype=np.int64), 3)
    with pytest.raises(ValueError):
        train(ConvNet(), empty, TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        AdversarialConfig(builtin_configs()["delta"], 1.5)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    net = ConvNet(seed=0)
    with pytest.raises(TrainingDiverged):
        train(net, synth_dataset(1, 4), TrainConfig(epochs=5, learning_rate=1e200))


def test_evaluate_examples(trained_net, test_set):
    idx = np.flatnonzero(evaluate(trained_net, test_set)[1])
    assert evaluate(trained_net, test_set.subset(idx))[0] == 1.0
    wrong = np.flatnonzero(~evaluate(trained_net, test_set)[1])
    if wrong.size:
        assert evaluate(trained_net, test_set.subset(wrong[:1]))[0] == 0.0
    perm = np.random.default_rng(0).permutation(len(test_set))
    assert evaluate(trained_net, test_set.subset(perm))[0] == evaluate(trained_net, test_set)[0]


def test_checkpoint_round_trip(tmp_path, trained_net):
    path = tmp_path / "net.ckpt"
    save_checkpoint(trained_net, path)
    back = load_checkpoint(path)
    assert back.trained
    assert all(back.params[k].tobytes() == trained_net.params[k].tobytes() for k in trained_net.params)
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_corruption(tmp_path, trained_net):
    path = tmp_path / "net.ckpt"
    save_checkpoint(trained_net, path)
    data = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXXXX" + data[6:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(data[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "short.ckpt")


def test_train_config_dict_round_trip():
    cfg = TrainConfig(epochs=3, adversarial=AdversarialConfig(builtin_configs()["stadv"], 0.25))
    back = TrainConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epoch": 3})
