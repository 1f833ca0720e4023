import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xcap.captioner import CaptionerParams, ModelConfig
from xcap.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from xcap.synthdata import SynthConfig, generate_dataset, load_dataset
from xcap.tensor import RngStream
from xcap.training import Adam, TrainConfig, TrainingError, clip_gradients, mean_loss, stack_features, train

TINY = ModelConfig(hidden=8, embed=8, attention=8)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_dataset(SynthConfig(train=12, val=4, test=0, seed=5), root)
    return load_dataset(root, "train"), load_dataset(root, "val")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 10.0))
def test_clipped_norm_never_exceeds_limit(seed, scale):
    rng = RngStream(seed)
    grads = {"a": rng.normal((3, 4), scale), "b": rng.normal((5,), scale)}
    clipped, before = clip_gradients(grads, 1.0)
    after = np.sqrt(sum(np.sum(g ** 2) for g in clipped.values()))
    assert after <= 1.0 + 1e-9
    if before <= 1.0:
        assert all(np.array_equal(clipped[k], grads[k]) for k in grads)


def test_adam_first_step_moves_by_learning_rate():
    w = {"w": np.array([1.0, -1.0, 0.0])}
    Adam(w, lr=0.1).step(w, {"w": np.array([3.0, -0.5, 0.0])})
    np.testing.assert_allclose(w["w"], [0.9, -0.9, 0.0], atol=1e-8)


def test_zero_learning_rate_keeps_validation_loss(data):
    tr, va = data
    init = CaptionerParams.init(TINY, seed=1)
    before = mean_loss(init, stack_features(va), [r.tokens for r in va])
    params, history = train(tr, va, TrainConfig(epochs=2, batch_size=4, learning_rate=0.0), TINY, init=init)
    assert all(abs(e.val_loss - before) <= 1e-12 for e in history.epochs)
    assert all(np.array_equal(params.arrays[k], init.arrays[k]) for k in init.arrays)


def test_training_is_reproducible(data, tmp_path):
    tr, va = data
    cfg = TrainConfig(epochs=3, batch_size=5, learning_rate=1e-2, seed=4)
    p1, h1 = train(tr, va, cfg, TINY)
    p2, h2 = train(tr, va, cfg, TINY)
    h1.to_csv(tmp_path / "a.csv")
    h2.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert all(np.array_equal(p1.arrays[k], p2.arrays[k]) for k in p1.arrays)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 4


def test_small_steps_usually_descend(data):
    # a plain gradient step with a small rate lowers the batch loss in the vast majority of trials
    from xcap.captioner import batch_loss, pad_targets
    from xcap.tensor import backward, no_grad
    tr, _ = data
    feats = stack_features(tr).astype(np.float64)
    targets = pad_targets([r.tokens for r in tr])
    cfg = ModelConfig(hidden=4, embed=4, attention=4)
    wins = 0
    for trial in range(100):
        params = CaptionerParams.init(cfg, seed=trial, dtype=np.float64)
        tensors = params.tensors()
        loss = batch_loss(feats, targets, tensors, cfg)
        grads = backward(loss, tensors.values())
        stepped = params.copy()
        for k in stepped.arrays:
            stepped.arrays[k] -= 1e-3 * grads[k]
        with no_grad():
            after = batch_loss(feats, targets, stepped.constants(), cfg).item()
        wins += after < loss.item()
    assert wins >= 95


def test_nan_parameters_abort_with_location(data):
    tr, va = data
    init = CaptionerParams.init(TINY, seed=0)
    init.arrays["out.bias"][0] = np.nan
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        train(tr, va, TrainConfig(epochs=1, batch_size=4), TINY, init=init)


def test_target_loss_and_patience_stop_early(data):
    tr, va = data
    _, history = train(tr, va, TrainConfig(epochs=5, batch_size=6, target_loss=100.0), TINY)
    assert len(history.epochs) == 1
    _, history = train(tr, va, TrainConfig(epochs=6, batch_size=6, learning_rate=0.0,
                                           early_stop_patience=2), TINY)
    assert len(history.epochs) == 3 and history.best_epoch == 1


def test_empty_splits(data):
    tr, _ = data
    with pytest.raises(TrainingError, match="empty"):
        train([], [], TrainConfig(epochs=1), TINY)
    _, history = train(tr, [], TrainConfig(epochs=1, batch_size=6), TINY)
    assert np.isfinite(history.epochs[0].val_loss)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    params = CaptionerParams.init(TINY, seed=3)
    save_checkpoint(params, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt", vocab_size=32)
    assert loaded.config == TINY
    assert list(loaded.arrays) == list(params.arrays)
    for k, v in params.arrays.items():
        assert loaded.arrays[k].tobytes() == v.tobytes()
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "m.ckpt").read_bytes()


def test_truncated_checkpoint_names_missing_tensor(tmp_path):
    save_checkpoint(CaptionerParams.init(TINY, seed=3), tmp_path / "m.ckpt")
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(blob[:-10])
    with pytest.raises(CheckpointError, match="out.b_logits"):
        load_checkpoint(tmp_path / "cut.ckpt")


def test_checkpoint_vocab_mismatch_reports_both_sizes(tmp_path):
    save_checkpoint(CaptionerParams.init(TINY, seed=3), tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError, match=r"K=32.*K=30"):
        load_checkpoint(tmp_path / "m.ckpt", vocab_size=30)


def test_checkpoint_bad_magic_and_trailing_bytes(tmp_path):
    save_checkpoint(CaptionerParams.init(TINY, seed=3), tmp_path / "m.ckpt")
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "long.ckpt").write_bytes(blob + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "long.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt", config=ModelConfig())
