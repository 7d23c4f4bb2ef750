import math

import numpy as np
import pytest
import torch

from mitocam.model import (CoralHead, ForwardCache, build_tiny_cnn, checkpoint_id, forward, grad_wrt_features,
                           load_checkpoint, positive_probability, save_checkpoint, to_input)


def _pixels(rng, n=2, size=64):
    return rng.integers(0, 256, (n, size, size, 3), dtype=np.uint8)


def test_batch_of_one_shape(rng):
    m = build_tiny_cnn(0)
    cache = forward(m, _pixels(rng, 1, 240))
    assert cache.logits.shape == (1, 1)
    c, h, w = cache.feature_maps.shape[1:]
    assert h >= 4 and w >= 4


def test_k3_head_shape_and_64_input(rng):
    m = build_tiny_cnn(0, num_ranks=3, input_size=64)
    assert m.head.biases.shape == (2,)
    assert forward(m, _pixels(rng, 1, 64)).logits.shape == (1, 2)


def test_duplicated_sample_identical_logits(rng):
    m = build_tiny_cnn(1)
    x = _pixels(rng, 1)
    logits = forward(m, np.concatenate([x, x]), differentiable=False).logits
    assert torch.equal(logits[0], logits[1])


def test_shape_mismatch_errors():
    m = build_tiny_cnn(0)
    with pytest.raises(ValueError):
        forward(m, torch.zeros(1, 4, 64, 64))
    with pytest.raises(ValueError):
        to_input(np.zeros((2, 64, 64), np.uint8))


def test_hand_computed_forward_on_constant_input():
    m = build_tiny_cnn(0, channels=(1, 1, 1, 1), coords=False).double()
    value = 0.6
    with torch.no_grad():
        convs = [mod for mod in m.features.modules() if isinstance(mod, torch.nn.Conv2d)]
        taps = [(0.5, -0.25, 1.0), (2.0,), (0.75,), (1.5,)]
        for conv, t in zip(convs, taps):
            conv.weight.zero_()
            for c, v in enumerate(t):
                # center tap only: stride-2 sampling never reads the zero padding
                conv.weight[0, c, 1, 1] = v
        for bn in (mod for mod in m.features.modules() if isinstance(mod, torch.nn.BatchNorm2d)):
            bn.running_mean.fill_(0.1)
            bn.running_var.fill_(4.0)
            bn.weight.fill_(1.0)
            bn.bias.fill_(0.2)
        m.head.fc.weight.fill_(-3.0)
        m.head.biases.fill_(0.5)
    m.eval()

    # replay by hand
    mean, std = (0.485, 0.456, 0.406), (0.229, 0.224, 0.225)
    # the descriptor constants are stored as float32 buffers
    norm = [(value - float(np.float32(mu))) / float(np.float32(s)) for mu, s in zip(mean, std)]

    def bn(a):
        return max(0.0, (a - 0.1) / math.sqrt(4.0 + 1e-5) * 1.0 + 0.2)

    a = bn(sum(t * v for t, v in zip(taps[0], norm)))
    for t in taps[1:]:
        a = bn(t[0] * a)
    expected = -3.0 * a + 0.5

    x = torch.full((1, 3, 64, 64), value, dtype=torch.float64)
    got = forward(m, x).logits
    assert got.item() == pytest.approx(expected, abs=1e-12)


def test_positive_probability_examples():
    assert positive_probability(np.array([0.0])) == 0.5
    assert positive_probability(np.array([20.0])) >= 0.9999
    assert positive_probability(np.array([1.0, -0.5])) == pytest.approx(1 / (1 + math.exp(-1.0)))
    assert positive_probability(np.array([1.0, -0.5])) == pytest.approx(0.7311, abs=1e-4)
    t = positive_probability(torch.tensor([[1.0, -0.5], [-40.0, -41.0]]))
    assert 0 < float(t[1]) < 1 and float(t[0]) == pytest.approx(0.7311, abs=1e-4)


def test_linear_toy_head_gradient_is_weight():
    g = torch.Generator().manual_seed(0)
    w = torch.randn(3, 4, 5, generator=g, dtype=torch.float64)
    A = torch.randn(1, 3, 4, 5, generator=g, dtype=torch.float64, requires_grad=True)
    logits = (A * w).sum(dim=(1, 2, 3)).view(1, 1)
    grad = grad_wrt_features(ForwardCache(logits, A), 0)
    assert torch.equal(grad, w)


def test_tiny_cnn_gradient_matches_finite_differences(rng):
    m = build_tiny_cnn(3, input_size=64).double()
    with torch.no_grad():
        m.head.fc.weight.normal_()
    cache = forward(m, to_input(_pixels(rng, 1), torch.float64))
    grad = grad_wrt_features(cache, 0)
    maps = cache.feature_maps.detach()
    h = 1e-4
    fd = torch.zeros_like(maps[0])
    with torch.no_grad():
        for idx in np.ndindex(*maps.shape[1:]):
            plus, minus = maps.clone(), maps.clone()
            plus[(0,) + idx] += h
            minus[(0,) + idx] -= h
            fd[idx] = (m.head_from_features(plus)[0, 0] - m.head_from_features(minus)[0, 0]) / (2 * h)
    rel = (grad - fd).abs().max() / fd.abs().max()
    assert rel < 1e-3


def test_gradcheck_every_tiny_cnn_layer(rng):
    m = build_tiny_cnn(4, input_size=32).double().eval()
    x = to_input(_pixels(rng, 1, 32), torch.float64).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda t: m(t), (x,), eps=1e-6, atol=1e-5, rtol=1e-3)


def test_zero_head_gives_zero_gradient(rng):
    m = build_tiny_cnn(0)
    with torch.no_grad():
        m.head.fc.weight.zero_()
    grad = grad_wrt_features(forward(m, _pixels(rng, 1)), 0)
    assert torch.count_nonzero(grad) == 0


def test_non_differentiable_cache_errors(rng):
    cache = forward(build_tiny_cnn(0), _pixels(rng, 1), differentiable=False)
    with pytest.raises(RuntimeError):
        grad_wrt_features(cache, 0)


def test_seed_determinism():
    a, b, c = build_tiny_cnn(7), build_tiny_cnn(7), build_tiny_cnn(8)
    for (_, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q)
    assert checkpoint_id(a) == checkpoint_id(b) != checkpoint_id(c)


def test_checkpoint_roundtrip(tmp_path, rng):
    m = build_tiny_cnn(2, num_ranks=3)
    cid = save_checkpoint(m, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert checkpoint_id(back) == cid and back.num_ranks == 3
    x = _pixels(rng, 2)
    assert torch.equal(forward(m, x, False).logits, forward(back, x, False).logits)


def test_checkpoint_tamper_detected(tmp_path):
    save_checkpoint(build_tiny_cnn(2), tmp_path / "ck")
    blob = bytearray((tmp_path / "ck" / "params.bin").read_bytes())
    blob[100] ^= 0xFF
    (tmp_path / "ck" / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(tmp_path / "ck")


def test_sort_biases():
    head = CoralHead(4, 4)
    with torch.no_grad():
        head.biases.copy_(torch.tensor([0.1, 0.5, -0.2]))
    head.sort_biases_()
    assert head.biases.tolist() == pytest.approx([0.5, 0.1, -0.2])
    z = head(torch.randn(5, 4))
    p = torch.sigmoid(z)
    assert torch.all(p[:, :-1] >= p[:, 1:])


def test_sanity_training_reaches_95_percent():
    from mitocam.augment import AugmentConfig
    from mitocam.training import TrainConfig, predict_proba, train_round

    from conftest import separable_patches

    train, val = separable_patches(64, seed=0), separable_patches(32, seed=1)
    m = build_tiny_cnn(0, input_size=64)
    cfg = TrainConfig(epochs_per_round=10, lr_max=0.05, restart_period=10, ousm_drop_fraction=0.0, seed=0)
    train_round(train, val, m, cfg, AugmentConfig.disabled())
    x, y = val.arrays()
    acc = np.mean((predict_proba(m, x) > 0.5) == (y == 1))
    assert acc >= 0.95
