import numpy as np
import pytest
from helpers import randomize_norms

from paam import cnn, ops, pruning
from paam.tensor import ShapeError, Tensor

TOY = {"kind": "resnet", "widths": [8, 16, 32], "blocks_per_stage": 1, "shortcut": "pad"}


@pytest.fixture
def toy(rng):
    net = cnn.build_network(TOY, (3, 16, 16), 4, rng)
    randomize_norms(net, rng)
    return net


def test_toy_structure(toy):
    assert toy.L == 7
    assert [u.layer_index for u in toy.units] == list(range(7))
    assert [u.bank.F for u in toy.units] == [8, 8, 8, 16, 16, 32, 32]
    assert [u.bank.spatial_dims for u in toy.units] == [(16, 16)] * 3 + [(8, 8)] * 2 + [(4, 4)] * 2
    # Stem and every second conv write into the residual stream.
    assert [u.structural for u in toy.units] == [False, True, False, True, False, True, False]
    assert toy.feeders() == [None, 0, 1, 2, 3, 4, 5]


def test_resnet20_shape_constructible(rng):
    net = cnn.build_network({"kind": "resnet", "widths": [16, 32, 64], "blocks_per_stage": 3}, (3, 32, 32), 10, rng)
    assert net.L == 19 and len(net.blocks) == 9
    assert cnn.forward(net, rng.normal(size=(1, 3, 32, 32))).shape == (1, 10)


def test_analog_all_ones_equals_off(toy, rng):
    x = rng.normal(size=(4, 3, 16, 16))
    ones = [np.ones(u.bank.F) for u in toy.units]
    assert np.array_equal(cnn.forward(toy, x, ones, "analog").data, cnn.forward(toy, x).data)


def test_binary_all_below_threshold_leaves_bias_path(toy, rng):
    x = rng.normal(size=(3, 3, 16, 16))
    low = [np.full(u.bank.F, 0.2) for u in toy.units]
    logits = cnn.forward(toy, x, low, "binary", threshold=0.5).data
    np.testing.assert_array_equal(logits, np.broadcast_to(toy.head_bias.data, logits.shape))


def test_binary_mode_thresholds_analog_scores(toy, rng):
    x = rng.normal(size=(2, 3, 16, 16))
    s = [rng.uniform(0, 1, u.bank.F) for u in toy.units]
    masks = [(a >= 0.4).astype(float) for a in s]
    a = cnn.forward(toy, x, s, "binary", threshold=0.4).data
    b = cnn.forward(toy, x, masks, "analog").data
    np.testing.assert_array_equal(a, b)


def test_score_length_mismatch_names_layer(toy):
    s = [np.ones(u.bank.F) for u in toy.units]
    s[3] = np.ones(5)
    with pytest.raises(ShapeError, match="layer 3"):
        cnn.forward(toy, np.zeros((1, 3, 16, 16)), s, "analog")
    with pytest.raises(ValueError):
        cnn.forward(toy, np.zeros((1, 3, 16, 16)), s, "sideways")
    with pytest.raises(ValueError):
        cnn.forward(toy, np.zeros((1, 3, 16, 16)), None, "analog")


def test_score_applied_after_nonlinearity(rng):
    net = cnn.build_network({"kind": "plain", "widths": [4]}, (2, 5, 5), 3, rng)
    randomize_norms(net, rng)
    x = rng.normal(size=(2, 2, 5, 5))
    s = rng.uniform(0.1, 2.0, size=4)
    u = net.stem
    ref = ops.relu(u.norm(ops.conv2d(Tensor(x), u.bank.weights, 1, 1))).data * s[None, :, None, None]
    np.testing.assert_allclose(u(Tensor(x), Tensor(s)).data, ref, rtol=1e-14)


def test_eval_output_is_batch_independent(toy, rng):
    x = rng.normal(size=(6, 3, 16, 16))
    full = cnn.forward(toy, x).data
    np.testing.assert_allclose(cnn.forward(toy, x[2:3]).data, full[2:3], rtol=1e-12, atol=1e-12)


def test_train_mode_updates_running_stats(toy, rng):
    before = toy.stem.norm.running_mean.copy()
    cnn.forward(toy, rng.normal(size=(4, 3, 16, 16)) + 3.0, train=True)
    assert not np.array_equal(before, toy.stem.norm.running_mean)


def test_count_examples(rng):
    net = cnn.build_network({"kind": "plain", "widths": [16]}, (3, 32, 32), 10, rng)
    assert cnn.count(net).params == [432] and cnn.count(net).flops == [442368]
    toy = cnn.build_network(TOY, (3, 16, 16), 4, rng)
    zero = cnn.count(toy, [0] * toy.L)
    assert zero.total_params == 0 and zero.total_flops == 0
    dense = cnn.count(toy)
    half = cnn.count(toy, [u.bank.F // 2 for u in toy.units])
    for l, fd in enumerate(toy.feeders()):
        if fd is not None:
            assert half.params[l] * 4 == dense.params[l]
    with pytest.raises(ValueError):
        cnn.count(toy, [9] + [1] * (toy.L - 1))
    with pytest.raises(ValueError):
        cnn.count(toy, [-1] + [1] * (toy.L - 1))


def test_state_round_trip(toy, rng):
    x = rng.normal(size=(2, 3, 16, 16))
    clone = cnn.from_state(cnn.describe(toy), cnn.state_arrays(toy))
    np.testing.assert_array_equal(cnn.forward(clone, x).data, cnn.forward(toy, x).data)


def test_projection_shortcut(rng):
    net = cnn.build_network({"kind": "resnet", "widths": [4, 8], "shortcut": "projection"}, (3, 8, 8), 2, rng)
    assert net.blocks[0].projection is None and net.blocks[1].projection is not None
    assert cnn.forward(net, rng.normal(size=(1, 3, 8, 8))).shape == (1, 2)


def test_predict_batches_consistently(toy, rng):
    x = rng.normal(size=(10, 3, 16, 16))
    np.testing.assert_allclose(cnn.predict(toy, x, batch_size=3), cnn.predict(toy, x, batch_size=10),
                               rtol=1e-12, atol=1e-12)


def test_extract_identity_and_index_bookkeeping(rng):
    net = cnn.build_network({"kind": "plain", "widths": [4, 3]}, (2, 6, 6), 3, rng)
    randomize_norms(net, rng)
    same = pruning.extract(net, [np.ones(4), np.ones(3)])
    assert cnn.count_physical(same).to_dict() == cnn.count(net).to_dict()
    x = rng.normal(size=(5, 2, 6, 6))
    np.testing.assert_array_equal(cnn.predict(same, x), cnn.predict(net, x))
    small = pruning.extract(net, [np.array([1.0, 0, 1, 0]), np.ones(3)])
    assert small.units[0].bank.F == 2 and small.units[1].bank.C == 2
    np.testing.assert_array_equal(small.units[1].bank.weights.data, net.units[1].bank.weights.data[:, [0, 2]])
    np.testing.assert_array_equal(small.units[0].norm.running_var, net.units[0].norm.running_var[[0, 2]])


def test_extract_errors(toy):
    masks = [np.ones(u.bank.F) for u in toy.units]
    with pytest.raises(pruning.StructureError, match="expected 7"):
        pruning.extract(toy, masks[:-1])
    bad = list(masks)
    bad[2] = np.ones(3)
    with pytest.raises(pruning.StructureError, match="layer 2"):
        pruning.extract(toy, bad)
    bad[2] = np.full(8, 0.5)
    with pytest.raises(pruning.StructureError, match="0/1"):
        pruning.extract(toy, bad)


def test_extract_empty_first_conv_gives_identity_pass(toy, rng):
    masks = [np.ones(u.bank.F) for u in toy.units]
    masks[1][:] = 0
    small = pruning.extract(toy, masks)
    assert small.blocks[0].identity_pass
    x = rng.normal(size=(3, 3, 16, 16))
    np.testing.assert_allclose(cnn.predict(small, x), cnn.predict(toy, x, scores=masks, score_mode="binary"),
                               atol=1e-10)
    report = pruning.BudgetReport.build(toy, masks, 0.5, small)
    assert report.layers[1]["layer_removed"] and report.layers[1]["F_surviving"] == 0
