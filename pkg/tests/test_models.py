import numpy as np
import pytest

from shapecpc.gradcheck import check_gradients
from shapecpc.imaging import DESK_GRID, GridSpec, extract_grid
from shapecpc.loss import contrastive_loss
from shapecpc.models import (
    Autoregressor,
    AutoregressorConfig,
    Encoder,
    EncoderConfig,
    ModelConfig,
    build_models,
    encode_grid,
    encode_grids,
    encode_patch,
    predict_targets,
)
from shapecpc.sequencing import AnchorSpec, build_sequences, enumerate_anchors
from shapecpc.tensor import DimensionError, Tensor, take


@pytest.fixture
def encoder():
    return Encoder(EncoderConfig(), DESK_GRID, np.random.default_rng(0))


def test_zero_patch_maps_to_zero_vector(encoder):
    v = encode_patch(encoder, np.zeros((16, 16, 3), np.float32)).data
    assert v.shape == (64,)
    assert np.all(v == 0)


def test_encoder_deterministic(encoder):
    patch = np.random.default_rng(1).random((16, 16, 3)).astype(np.float32)
    a = encode_patch(encoder, patch).data
    b = encode_patch(encoder, patch).data
    assert np.array_equal(a, b)


def test_unit_norm(encoder):
    patches = np.random.default_rng(2).random((10, 16, 16, 3)).astype(np.float32)
    norms = np.linalg.norm(encoder(patches).data, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-5)


def test_wrong_patch_size(encoder):
    with pytest.raises(DimensionError):
        encoder(np.zeros((2, 8, 8, 3), np.float32))


def test_pad_to_full_differs_from_direct():
    rng = np.random.default_rng(3)
    direct = Encoder(EncoderConfig(), DESK_GRID, np.random.default_rng(0))
    full = Encoder(EncoderConfig(padding_mode="pad_to_full"), DESK_GRID, np.random.default_rng(0))
    patch = rng.random((16, 16, 3)).astype(np.float32)
    a = encode_patch(direct, patch).data
    b = encode_patch(full, patch, offset=(24, 16)).data
    assert not np.allclose(a, b)


def test_pad_to_full_sees_position():
    full = Encoder(EncoderConfig(padding_mode="pad_to_full"), DESK_GRID, np.random.default_rng(0))
    patch = np.random.default_rng(4).random((16, 16, 3)).astype(np.float32)
    assert not np.allclose(encode_patch(full, patch, (0, 0)).data, encode_patch(full, patch, (48, 48)).data)


def test_encode_grid_shape_and_order(encoder):
    img = np.random.default_rng(5).random((64, 64, 3)).astype(np.float32)
    grid = extract_grid(img, DESK_GRID)
    reps = encode_grid(encoder, grid).data
    assert reps.shape == (7, 7, 64)
    np.testing.assert_allclose(reps[2, 5], encode_patch(encoder, grid.patches[2, 5]).data, rtol=1e-5, atol=1e-6)


def test_encode_grids_stacks(encoder):
    rng = np.random.default_rng(6)
    grids = [extract_grid(rng.random((64, 64, 3)).astype(np.float32), DESK_GRID, t) for t in range(3)]
    both = encode_grids(encoder, grids).data
    assert both.shape == (3, 49, 64)
    np.testing.assert_allclose(both[1], encode_grid(encoder, grids[1]).data.reshape(49, 64), rtol=1e-5, atol=1e-6)


class TestAutoregressor:
    @pytest.fixture
    def ar(self):
        return Autoregressor(AutoregressorConfig(), 64, 7, np.random.default_rng(0))

    def _inputs(self, seed=0):
        anchor = AnchorSpec(1, 2, 3, "forward", 7)
        train, target = build_sequences(anchor)
        reps = np.random.default_rng(seed).normal(size=(9, 64)).astype(np.float32)
        return Tensor(reps), train.coords, target.coords

    def test_k3_gives_16_unit_predictions(self, ar):
        reps, tr, tg = self._inputs()
        out = predict_targets(ar, reps, tr, tg).data
        assert out.shape == (16, 64)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-5)

    def test_target_permutation_equivariance(self, ar):
        reps, tr, tg = self._inputs()
        perm = np.random.default_rng(1).permutation(16)
        base = predict_targets(ar, reps, tr, tg).data
        permuted = predict_targets(ar, reps, tr, [tg[i] for i in perm]).data
        np.testing.assert_allclose(permuted, base[perm], rtol=1e-4, atol=1e-5)

    def test_train_permutation_invariance(self, ar):
        reps, tr, tg = self._inputs()
        perm = np.random.default_rng(2).permutation(9)
        base = predict_targets(ar, reps, tr, tg).data
        shuffled = predict_targets(ar, Tensor(reps.data[perm]), [tr[i] for i in perm], tg).data
        np.testing.assert_allclose(shuffled, base, rtol=1e-4, atol=1e-5)

    def test_zero_output_weight_gives_identical_rows(self, ar):
        ar.params["out.weight"].data[...] = 0
        ar.params["out.bias"].data[...] = np.linspace(-1, 1, 64)
        reps, tr, tg = self._inputs()
        out = predict_targets(ar, reps, tr, tg).data
        assert np.all(out == out[0])

    def test_cell_out_of_range(self, ar):
        reps, tr, _ = self._inputs()
        with pytest.raises(IndexError):
            predict_targets(ar, reps, tr, [(7, 0)])

    def test_width_must_split_into_heads(self):
        with pytest.raises(ValueError):
            Autoregressor(AutoregressorConfig(heads=3), 64, 7, np.random.default_rng(0))

    def test_batched_matches_single(self, ar):
        anchors = enumerate_anchors(7, 3, "forward")[:3]
        rng = np.random.default_rng(7)
        reps = rng.normal(size=(3, 9, 64)).astype(np.float32)
        trs, tgs = zip(*(build_sequences(a) for a in anchors))
        batched = ar(Tensor(reps), [t.flat(7) for t in trs], [t.flat(7) for t in tgs]).data
        for i in range(3):
            single = predict_targets(ar, Tensor(reps[i]), trs[i].coords, tgs[i].coords).data
            np.testing.assert_allclose(batched[i], single, rtol=1e-4, atol=1e-5)


def test_model_config_roundtrip():
    cfg = ModelConfig(GridSpec(224, 56, 28), EncoderConfig((8, 8), padding_mode="pad_to_full"), AutoregressorConfig(1, 2, 16))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def end_to_end_loss(encoder, ar, img, spec, k):
    grid = extract_grid(img, spec)
    s = spec.grid_side
    anchor = enumerate_anchors(s, k, "forward")[0]
    train, target = build_sequences(anchor)
    reps = encode_grids(encoder, [grid]).reshape(s * s, encoder.dim)
    tr = take(reps, np.array(train.flat(s)))
    tg = take(reps, np.array(target.flat(s)))
    pred = predict_targets(ar, tr, train.coords, target.coords)
    return contrastive_loss(pred, tg, tr, tau=0.5)


def test_end_to_end_gradcheck_5x5():
    # 5×5 grid: S=24, p=8, stride=4; d=8, one layer, two heads
    spec = GridSpec(24, 8, 4)
    cfg = ModelConfig(spec, EncoderConfig((4, 8)), AutoregressorConfig(1, 2, 16))
    encoder, ar = build_models(cfg, np.random.default_rng(0))
    img = np.random.default_rng(1).random((24, 24, 3)).astype(np.float32)
    params = encoder.parameters() + ar.parameters()
    errors = check_gradients(lambda: end_to_end_loss(encoder, ar, img, spec, 3), params, step=1e-5, floor=1e-4)
    assert max(errors) < 1e-2, dict(zip(list(encoder.params) + list(ar.params), errors))


def test_encode_grid_patch_permutation_equivariance(encoder):
    from shapecpc.imaging import PatchGrid

    rng = np.random.default_rng(9)
    grid = extract_grid(rng.random((64, 64, 3)).astype(np.float32), DESK_GRID)
    perm = rng.permutation(49)
    shuffled = PatchGrid(DESK_GRID, grid.patches.reshape(49, 16, 16, 3)[perm].reshape(7, 7, 16, 16, 3), 0)
    base = encode_grid(encoder, grid).data.reshape(49, 64)
    moved = encode_grid(encoder, shuffled).data.reshape(49, 64)
    np.testing.assert_allclose(moved, base[perm], rtol=1e-5, atol=1e-6)
