import itertools

import numpy as np
import pytest
import torch

from pointerpatch.attention import ConfigurationError, DenseAttentionTrace
from pointerpatch.criterion import hungarian_match, model_loss
from pointerpatch.detector import DenseReferenceEncoder, DetectionOutput
from pointerpatch.io import CheckpointError, read_checkpoint
from pointerpatch.training import TrainConfig, load_detector, save_detector, train_toy_detector
from pointerpatch.data.shapes import SceneSpec, generate_dataset

from conftest import tiny_config


def test_output_and_trace_shapes(tiny_model):
    out, traces = tiny_model(torch.rand(2, 3, 64, 64))
    assert out.logits.shape == (2, 3, 3) and out.boxes.shape == (2, 3, 4)
    assert len(traces) == 2                                  # one encoder, one decoder layer
    enc, dec = traces
    assert enc.shape == (2, 64, 1, 2) and dec.shape == (2, 3, 1, 2)
    assert ((out.boxes >= 0) & (out.boxes <= 1)).all()


def test_multi_level_trace_shape():
    from pointerpatch.detector import build_model
    m = build_model(tiny_config(num_levels=2, num_layers=2), seed=0).eval()
    out, traces = m(torch.rand(1, 3, 64, 64))
    assert len(traces) == 4 and len(out.aux) == 1
    assert traces[0].shape == (2, 16 * 16 + 8 * 8, 2, 2)
    assert traces[0].stage.startswith("encoder") and traces[-1].stage.startswith("decoder")


def test_zero_image_is_finite(tiny_model):
    out, traces = tiny_model(torch.zeros(1, 3, 64, 64))
    assert torch.isfinite(out.logits).all() and all(torch.isfinite(t.offsets).all() for t in traces)


def test_identical_batch_items_give_identical_outputs(tiny_model):
    x = torch.rand(1, 3, 64, 64).expand(3, -1, -1, -1).contiguous()
    out, _ = tiny_model(x)
    assert torch.allclose(out.logits[0], out.logits[2], atol=1e-6)
    assert torch.allclose(out.boxes[1], out.boxes[2], atol=1e-6)


def test_bad_configs_and_inputs(tiny_model):
    with pytest.raises(ConfigurationError):
        tiny_config(channel_dim=10, num_heads=4)
    with pytest.raises(ConfigurationError):
        tiny_config(image_size=(60, 64))
    with pytest.raises(ConfigurationError):
        tiny_config(global_context="median")
    with pytest.raises(ConfigurationError):
        tiny_model(torch.rand(1, 3, 32, 32))
    with pytest.raises(ConfigurationError):
        tiny_model(torch.rand(1, 1, 64, 64))


def test_checkpoint_round_trip(tmp_path, tiny_model):
    save_detector(tmp_path / "m.npz", tiny_model, meta={"note": "x"})
    header, _ = read_checkpoint(tmp_path / "m.npz")
    assert header["kind"] == "detector" and header["meta"] == {"note": "x"}
    back = load_detector(tmp_path / "m.npz")
    x = torch.rand(1, 3, 64, 64)
    assert torch.equal(tiny_model(x)[0].logits, back(x)[0].logits)
    np.savez(tmp_path / "bad.npz", a=np.zeros(2))
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "bad.npz")


def test_model_loss_no_objects_is_no_object_ce():
    logits = torch.tensor([[[0.0, 0.0, 0.0]]])               # Q=1, two classes + no-object
    det = DetectionOutput(logits, torch.full((1, 1, 4), 0.5))
    loss = model_loss(det, [{"boxes": torch.zeros(0, 4), "labels": torch.zeros(0, dtype=torch.long)}])
    assert loss.item() == pytest.approx(np.log(3))


def test_model_loss_perfect_box():
    logits = torch.tensor([[[10.0, -10.0, -10.0]]])
    box = torch.tensor([[[0.5, 0.5, 0.2, 0.2]]])
    loss = model_loss(DetectionOutput(logits, box), [{"boxes": box[0], "labels": torch.tensor([0])}])
    assert loss.item() < 1e-3


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q, n = int(rng.integers(1, 5)), int(rng.integers(0, 4))
        n = min(n, q)
        cost = torch.as_tensor(rng.normal(size=(q, n)))
        rows, cols = hungarian_match(cost)
        got = float(cost[rows, cols].sum()) if n else 0.0
        best = min((sum(float(cost[p[j], j]) for j in range(n))
                    for p in itertools.permutations(range(q), n)), default=0.0)
        assert got == pytest.approx(best)
        assert sorted(cols.tolist()) == list(range(n))


def test_dense_reference_encoder_traces():
    enc = DenseReferenceEncoder(tiny_config())
    x, traces = enc(torch.rand(2, 3, 64, 64))
    assert x.shape == (2, 64, 8)
    assert isinstance(traces[0], DenseAttentionTrace)
    assert traces[0].weights.shape == (2, 2, 64, 64) and traces[0].key_coords.shape == (64, 2)


def test_training_is_seeded():
    data = generate_dataset(SceneSpec(), 8)
    cfg = TrainConfig(epochs=1, batch_size=4, log_every=0)
    a = train_toy_detector(data, tiny_config(num_classes=3), cfg)
    b = train_toy_detector(data, tiny_config(num_classes=3), cfg)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
