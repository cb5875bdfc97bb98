import dataclasses

import numpy as np
import pytest

from matl import autodiff as ad
from matl.boxlabels import BoxAnnotation, BoxLabeler
from matl.data import Tile, generate_synthetic
from matl.errors import ConfigError, TrainingError
from matl.nn import ForwardOutput, ModelConfig
from matl.train import ExperimentConfig, evaluate, train

TINY = ModelConfig(input_size=32, encoder_filters=[4, 8, 16], embedding_dim=8,
                   classifier_hidden=[16, 16, 8, 8], decoder_filters=[8, 4])


@pytest.fixture(scope="module")
def tiles():
    ts = generate_synthetic(20, 32, seed=2)
    labeler = BoxLabeler.fit([t.box for t in ts])
    return [dataclasses.replace(t, box_label=int(b)) for t, b in zip(ts, labeler.labels([t.box for t in ts]))]


def cfg(**kw):
    base = dict(model=TINY, epochs=2, batch_size=16, learning_rate=3e-3)
    if kw.get("loss_mode", "MATL") != "MATL":
        base["lam"] = None
    return ExperimentConfig(**{**base, **kw})


def test_config_lambda_rule():
    with pytest.raises(ConfigError, match="lambda"):
        ExperimentConfig(loss_mode="CLTL", lam=0.25).validate()
    with pytest.raises(ConfigError, match="lambda"):
        ExperimentConfig(loss_mode="MATL", lam=None).validate()
    with pytest.raises(ConfigError, match="folds"):
        ExperimentConfig(folds=1).validate()
    with pytest.raises(ConfigError, match="train_fraction"):
        ExperimentConfig(train_fraction=1.0).validate()


def test_training_reduces_loss(tiles):
    res = train(cfg(epochs=20, loss_mode="CLTL"), tiles)
    assert len(res.history) == 20
    assert all(np.isfinite(res.history))
    assert res.history[-1] < res.history[0]


def test_loss_mode_does_not_change_data_order(tiles):
    a = train(cfg(loss_mode="WTL"), tiles, stream=3)
    b = train(cfg(loss_mode="CLTL"), tiles, stream=3)
    assert [e["samples"] for e in a.batch_log] == [e["samples"] for e in b.batch_log]
    c = train(cfg(loss_mode="WTL"), tiles, stream=4)
    assert [e["samples"] for e in a.batch_log] != [e["samples"] for e in c.batch_log]


def test_matl_lambda_zero_matches_cltl(tiles):
    a = train(cfg(loss_mode="MATL", lam=0.0), tiles)
    b = train(cfg(loss_mode="CLTL"), tiles)
    for x, y in zip(a.batch_log, b.batch_log):
        assert abs(x["total"] - y["total"]) < 1e-6
        assert abs(x["embedding"] - y["embedding"]) < 1e-6


def test_batch_log_components(tiles):
    res = train(cfg(model_mode="single_task_mask", loss_mode="WTL", epochs=1), tiles)
    assert set(res.batch_log[0]) == {"epoch", "batch", "samples", "mask", "total"}
    res = train(cfg(model_mode="multi_task", loss_mode="MATL", lam=0.5, epochs=1), tiles)
    e = res.batch_log[0]
    assert e["total"] == pytest.approx(e["classification"] + e["mask"] + e["embedding"], rel=1e-5)


def test_training_deterministic(tiles):
    a = train(cfg(loss_mode="CLTL"), tiles)
    b = train(cfg(loss_mode="CLTL"), tiles)
    assert a.history == b.history
    assert all(np.array_equal(a.model.params[k].data, b.model.params[k].data) for k in a.model.params)


def test_matl_requires_box_labels(tiles):
    bare = [dataclasses.replace(t, box_label=None) for t in tiles]
    with pytest.raises(ConfigError, match="box labels"):
        train(cfg(loss_mode="MATL", lam=0.25), bare)


def test_nonfinite_loss_aborts_with_location(tiles):
    bad = [dataclasses.replace(t, image=np.full_like(t.image, np.nan)) for t in tiles[:4]]
    with pytest.raises(TrainingError, match="epoch 0, batch 0"):
        train(cfg(loss_mode="WTL"), bad)


# ------------------------------------------------------------- evaluate

class StubModel:
    """Returns fixed head outputs; asserts inference mode."""

    dtype = np.dtype(np.float32)

    def __init__(self, probs=None, masks=None):
        self.probs, self.masks = probs, masks

    def forward(self, images, training=False):
        assert training is False
        n = images.shape[0]
        p = None if self.probs is None else ad.Tensor(self.probs[:n])
        m = None if self.masks is None else ad.Tensor(self.masks[:n])
        return ForwardOutput(ad.Tensor(np.zeros((n, 2))), p, m)


def toy_tiles(labels, box=BoxAnnotation(1, 1, 3, 2)):
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[box.y:box.y + box.h, box.x:box.x + box.w] = 1
    return [Tile(np.zeros((8, 8, 3), np.float32), mask, box, c) for c in labels]


def test_evaluate_accuracy_toy():
    probs = np.eye(3, dtype=np.float32)[[0, 1, 1]]
    m = evaluate(StubModel(probs=probs), toy_tiles([0, 1, 2]))
    assert m.accuracy == pytest.approx(2 / 3) and m.iou is None


def test_evaluate_perfect_and_empty_masks():
    ts = toy_tiles([0, 0])
    masks = np.stack([ts[0].mask.astype(np.float32), np.zeros((8, 8), np.float32)])
    m = evaluate(StubModel(masks=masks), ts)
    assert m.iou == pytest.approx(0.5)  # 1.0 for the exact mask, 0 for the empty prediction
