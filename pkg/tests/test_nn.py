import numpy as np
import pytest

from matl import autodiff as ad
from matl.errors import ConfigError, TrainingError, UsageError
from matl.nn import (Adam, Model, ModelConfig, build_classifier, build_decoder, build_encoder, forward,
                     load_checkpoint, save_checkpoint)

SMALL = dict(input_size=8, encoder_filters=[2, 3], embedding_dim=3, classifier_hidden=[3, 3, 3, 2],
             decoder_filters=[3, 2])


def small_cfg(**kw):
    return ModelConfig(**{**SMALL, **kw})


def images(n, size=8, seed=0, dtype=np.float64):
    return ad.Tensor(np.random.default_rng(seed).random((n, 3, size, size)).astype(dtype))


def projector(shape, seed=1):
    w = ad.Tensor(np.random.default_rng(seed).normal(size=shape))
    return lambda t: ad.sum_(ad.mul(t, w))


# ------------------------------------------------------------------ config

def test_default_config_valid():
    cfg = ModelConfig().validate()
    assert cfg.encoder_grid() == 4 and cfg.decoder_grid() == 4


@pytest.mark.parametrize("field,value,path", [
    ("encoder_filters", [8, 8], "model.encoder_filters"),
    ("decoder_filters", [4, 8], "model.decoder_filters"),
    ("classifier_hidden", [8, 8, 8], "model.classifier_hidden"),
    ("num_classes", 1, "model.num_classes"),
])
def test_invalid_config_names_field(field, value, path):
    with pytest.raises(ConfigError, match=path):
        ModelConfig(**{field: value}).validate()


def test_spatial_underflow():
    with pytest.raises(ConfigError, match="underflow"):
        ModelConfig(input_size=8, encoder_filters=[1, 2, 3, 4, 5]).validate()


# ----------------------------------------------------------------- encoder

def test_encoder_shape_default():
    enc = build_encoder(ModelConfig())
    assert enc(images(2, 64, dtype=np.float32)).shape == (2, 32)


def test_encoder_deterministic():
    x = images(2, 64, dtype=np.float32)
    a = build_encoder(ModelConfig(seed=5))(x).data
    b = build_encoder(ModelConfig(seed=5))(x).data
    assert np.array_equal(a, b)


def test_encoder_dilation_cycle():
    cfg = small_cfg(encoder_filters=[2, 3, 4], input_size=16)
    enc = build_encoder(cfg, np.float64)
    with ad.Tape() as tape:
        x = ad.Tensor(np.zeros((1, 3, 16, 16)), requires_grad=True)
        enc(x)
    assert tape.op_counts()["conv2d"] == 3


@pytest.mark.parametrize("training", [True, False])
def test_encoder_input_gradient(training):
    enc = build_encoder(small_cfg(), np.float64)
    p = projector((2, 3))
    err = ad.grad_check(lambda x: p(enc(x, training)), images(2).data)
    assert err < 1e-5


# ----------------------------------------------------------------- decoder

def test_decoder_range_and_shape():
    dec = build_decoder(ModelConfig())
    m = dec(ad.Tensor(np.random.default_rng(0).normal(size=(3, 32)).astype(np.float32))).data
    assert m.shape == (3, 64, 64)
    assert np.all((m >= 0) & (m <= 1))  # float32 sigmoid may round to the endpoints
    assert 0 < m.mean() < 1


def test_decoder_zero_embedding_uniform():
    dec = build_decoder(ModelConfig())
    m = dec(ad.Tensor(np.zeros((2, 32), dtype=np.float32))).data
    assert np.all(np.isfinite(m))
    assert np.ptp(m) == 0.0


def test_decoder_gradient():
    dec = build_decoder(small_cfg(), np.float64)
    p = projector((2, 8, 8))
    emb = np.random.default_rng(2).normal(size=(2, 3))
    assert ad.grad_check(lambda e: p(dec(e, True)), emb) < 1e-5


# -------------------------------------------------------------- classifier

def test_classifier_simplex():
    clf = build_classifier(ModelConfig())
    p = clf(ad.Tensor(np.random.default_rng(0).normal(size=(5, 32)).astype(np.float32))).data
    assert p.shape == (5, 3)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_classifier_parameter_count_formula():
    cfg = ModelConfig()
    widths = [cfg.embedding_dim] + cfg.classifier_hidden
    expected = sum(a * b + 2 * b for a, b in zip(widths, widths[1:]))
    expected += widths[-1] * cfg.num_classes + cfg.num_classes
    assert sum(t.size for t in build_classifier(cfg).params.values()) == expected


def test_classifier_gradient():
    clf = build_classifier(small_cfg(), np.float64)
    p = projector((4, 3))
    emb = np.random.default_rng(3).normal(size=(4, 3))
    assert ad.grad_check(lambda e: p(clf(e, True)), emb) < 1e-5


# ------------------------------------------------------------------ models

def test_parameter_count_is_config_function():
    assert Model(ModelConfig()).parameter_count() == Model(ModelConfig()).parameter_count() == 114_696
    assert Model(ModelConfig(seed=9)).parameter_count() == 114_696


def test_multi_task_shapes():
    out = Model(ModelConfig()).forward(images(4, 64, dtype=np.float32))
    assert out.embedding.shape == (4, 32)
    assert out.class_probs.shape == (4, 3)
    assert out.mask.shape == (4, 64, 64)


def test_single_task_heads():
    x = images(2, 64, dtype=np.float32)
    clf = Model(ModelConfig(), "single_task_classify").forward(x)
    seg = Model(ModelConfig(), "single_task_mask").forward(x)
    assert clf.mask is None and clf.class_probs is not None
    assert seg.class_probs is None and seg.mask is not None


def test_mode_mismatch():
    with pytest.raises(UsageError):
        forward("multi_task", Model(small_cfg(), "single_task_mask"), images(2))


def test_classifier_parameter_does_not_touch_mask():
    model = Model(small_cfg(), dtype=np.float64)
    x = images(3)
    before = model.forward(x).mask.data.copy()
    model.params["classifier.fc0.weight"].data += 1.0
    after = model.forward(x)
    assert np.array_equal(before, after.mask.data)


def test_encoder_runs_once_in_multi_task():
    model = Model(small_cfg(), dtype=np.float64)
    n_enc, n_dec = len(model.cfg.encoder_filters), len(model.cfg.decoder_filters)
    with ad.Tape() as tape:
        model.forward(images(2), training=True)
    counts = tape.op_counts()
    # encoder convs + one skip projection per decoder block + output conv
    assert counts["conv2d"] == n_enc + n_dec + 1
    assert counts["conv2d_transpose"] == n_dec
    enc_params = {id(t) for name, t in model.params.items() if name.startswith("encoder.")}
    uses = sum(1 for node in tape.nodes for t in node.inputs if id(t) in enc_params)
    assert uses == len(enc_params)  # every encoder parameter consumed exactly once


# ------------------------------------------------------------------- adam

def test_adam_zero_gradient_keeps_params():
    p = {"w": ad.Tensor(np.array([1.0, -2.0]))}
    opt = Adam(0.1)
    opt.step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert opt.t == 1


def test_adam_first_step():
    p = {"w": ad.Tensor(np.array([0.5]))}
    Adam(0.1).step(p, {"w": np.array([1.0])})
    assert p["w"].data[0] == pytest.approx(0.4, abs=1e-6)


def test_adam_nonfinite_names_parameter():
    p = {"enc.w": ad.Tensor(np.zeros(2))}
    with pytest.raises(TrainingError, match="enc.w"):
        Adam().step(p, {"enc.w": np.array([0.0, np.nan])})


def test_adam_trajectories_identical():
    def run():
        model = Model(small_cfg(), "single_task_classify", np.float64)
        opt = Adam(0.01)
        for step in range(3):
            with ad.Tape() as tape:
                out = model.forward(images(4, seed=step), training=True)
                loss = ad.cross_entropy(out.class_probs, [0, 1, 2, 0])
            names = list(model.params)
            grads = ad.backward(tape, loss, [model.params[n] for n in names])
            opt.step(model.params, dict(zip(names, grads)))
        return {k: v.data.copy() for k, v in model.params.items()}

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


# ------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path):
    model = Model(small_cfg(), "multi_task")
    x = images(2, dtype=np.float32)
    model.forward(x, training=True)  # move the running statistics away from their init
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, model, extra={"note": 1})
    restored, extra = load_checkpoint(path)
    assert extra == {"note": 1}
    a, b = model.forward(x), restored.forward(x)
    assert np.array_equal(a.mask.data, b.mask.data)
    assert np.array_equal(a.class_probs.data, b.class_probs.data)


def test_checkpoint_mismatch(tmp_path):
    import json
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, Model(small_cfg(), "single_task_mask"))
    doc = json.loads(path.read_text())
    doc["model_config"]["embedding_dim"] = 5
    path.write_text(json.dumps(doc))
    with pytest.raises(UsageError):
        load_checkpoint(path)
