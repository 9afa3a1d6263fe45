import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from alesal.model import AlesalModel, ModelConfig, ablate, eca_kernel_size
from alesal.nn import grad_check, ops
from alesal.nn.checkpoint import CheckpointError, dumps, loads
from alesal.nn.tensor import Tensor

TINY = ModelConfig(P=2, series_len=27, n_frames=3, n_bins=5, me_channels=2, me_kernel=3, gru_hidden=4, d_k=4,
                   ta_latent=3, pa_latent=4, head_hidden=5)


def inputs(config, B=3, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    series = rng.normal(size=(B, config.P, config.series_len)).astype(dtype)
    specs = np.abs(rng.normal(size=(B, config.P, config.n_frames, config.n_bins))).astype(dtype)
    return series, specs


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# -- kernel size --------------------------------------------------------------


@pytest.mark.parametrize("N, k", [(64, 3), (2, 1), (256, 5), (16, 3), (1024, 5)])
def test_eca_kernel_examples(N, k):
    assert eca_kernel_size(N, 2, 1) == k


@given(N=st.integers(2, 1 << 20), gamma=st.floats(0.25, 8), b=st.floats(-4, 4))
def test_eca_kernel_odd_and_positive(N, gamma, b):
    k = eca_kernel_size(N, gamma, b)
    assert k >= 1 and k % 2 == 1


def test_eca_kernel_rejects_bad_arguments():
    with pytest.raises(ValueError):
        eca_kernel_size(1)
    with pytest.raises(ValueError):
        eca_kernel_size(64, 0.0)


# -- morphology extractor ---------------------------------------------------------


def test_default_shapes():
    cfg = ModelConfig()
    assert (cfg.N, cfg.me_length, cfg.pa_kernel) == (64, 22, 3)
    model = AlesalModel(cfg, seed=0)
    series, specs = inputs(cfg, B=2)
    E = model.morphology_features(series, training=True)
    assert E.shape == (2, 64, 22)
    # each pair contributes a 16 x 22 block
    per_pair = E.data.reshape(2, 4, 16, 22)
    assert per_pair.shape[2:] == (16, 22)
    out = model.forward(series, specs, training=True)
    assert out.ta_weights.shape == (2, 4, 11, 11)
    assert out.pa_weights.shape == (2, 64)


def test_me_zero_input_gives_zero_output():
    model = AlesalModel(ModelConfig(), seed=1)
    for i in (1, 2):
        model.params[f"me.conv{i}.bias"].data[:] = 0
        model.params[f"me.bn{i}.beta"].data[:] = 0
    E = model.morphology_features(np.zeros((2, 4, 200), np.float32), training=True)
    assert not E.data.any()


def test_me_rejects_wrong_length():
    model = AlesalModel(ModelConfig(), seed=0)
    with pytest.raises(ValueError, match="200"):
        model.morphology_features(np.zeros((1, 4, 150), np.float32))


def test_me_gradcheck():
    model = AlesalModel(TINY, seed=2, dtype=np.float64)
    series, _ = inputs(TINY, dtype=np.float64)
    w = np.random.default_rng(3).normal(size=(3, TINY.N, TINY.me_length))
    names = [k for k in sorted(model.params) if k.startswith("me.")]

    def loss():
        E = model.morphology_features(series, training=True)
        return ops.mean(ops.reshape(ops.mul(E, w), (-1,)), axis=0)

    report = grad_check(loss, [model.params[k] for k in names], names=names)
    assert report.max_rel_error <= 1e-3, report


# -- pair attention ------------------------------------------------------------------


def test_pa_zero_kernel_gives_half_weights():
    model = AlesalModel(TINY, seed=3, dtype=np.float64)
    model.params["pa.conv"].data[:] = 0
    E = np.random.default_rng(4).normal(size=(2, TINY.N, TINY.me_length))
    u, w = model.pair_attention(Tensor(E))
    np.testing.assert_array_equal(w, 0.5)
    expected = (0.5 * E).reshape(2, -1) @ model.params["pa.Wd"].data + model.params["pa.bd"].data
    np.testing.assert_allclose(u.data, expected, atol=1e-12)


def test_pa_matches_direct_evaluation_with_a_silenced_pair():
    cfg = ModelConfig()
    model = AlesalModel(cfg, seed=5, dtype=np.float64)
    E = np.random.default_rng(6).normal(size=(2, 64, 22))
    E[:, :16] = 0.0  # pair 1 silenced before pooling
    u, w = model.pair_attention(Tensor(E))
    kernel = model.params["pa.conv"].data
    pooled = E.mean(axis=2)
    padded = np.pad(pooled, ((0, 0), (1, 1)))
    gate = np.empty_like(pooled)
    for b in range(2):
        for n in range(64):
            gate[b, n] = _sigmoid(sum(kernel[j] * padded[b, n + j] for j in range(3)))
    np.testing.assert_allclose(w, gate, atol=1e-12)
    # interior channels of the silenced pair only see zero pooled values
    np.testing.assert_allclose(w[:, 1:15], 0.5, atol=1e-12)
    expected = (E * gate[:, :, None]).reshape(2, -1) @ model.params["pa.Wd"].data + model.params["pa.bd"].data
    np.testing.assert_allclose(u.data, expected, atol=1e-10)
    assert np.all((w > 0) & (w < 1))


# -- time attention ------------------------------------------------------------------


def test_single_frame_attention_is_one():
    cfg = replace(TINY, n_frames=1)
    model = AlesalModel(cfg, seed=7)
    series, specs = inputs(cfg)
    out = model.forward(series, specs, training=True)
    np.testing.assert_allclose(out.ta_weights, 1.0)


def test_time_attention_rows_sum_to_one():
    cfg = ModelConfig()
    model = AlesalModel(cfg, seed=8)
    _, specs = inputs(cfg, B=3)
    r, weights = model.time_attention(specs)
    assert r.shape == (3, 4 * cfg.ta_latent)
    assert weights.shape == (3, 4, 11, 11)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)


# -- full network -----------------------------------------------------------------------


def test_forward_probabilities_and_determinism():
    cfg = ModelConfig()
    model = AlesalModel(cfg, seed=9)
    series, specs = inputs(cfg, B=4)
    a = model.forward(series, specs, training=True)
    b = model.forward(series, specs, training=True)
    assert a.probs.shape == (4, 3)
    assert np.all(a.probs >= 0)
    np.testing.assert_allclose(a.probs.sum(axis=1), 1.0, atol=1e-6)
    assert a.probs.tobytes() == b.probs.tobytes()
    assert AlesalModel(cfg, seed=9).to_bytes() == AlesalModel(cfg, seed=9).to_bytes()


def test_end_to_end_gradcheck_float64():
    model = AlesalModel(TINY, seed=10, dtype=np.float64)
    series, specs = inputs(TINY, B=4, dtype=np.float64)
    labels = np.array([0, 1, 2, 1])
    names = sorted(model.params)

    def loss():
        return ops.softmax_cross_entropy(model.forward(series, specs, training=True).logits, labels)

    report = grad_check(loss, [model.params[k] for k in names], names=names, tol=1e-3)
    print(f"end-to-end gradcheck: max relative error {report.max_rel_error:.2e} across {len(report.checked)} parameter tensors")
    assert report.passed, report.failures


def test_shared_gru_variant():
    cfg = replace(TINY, shared_gru=True)
    model = AlesalModel(cfg, seed=11)
    assert model.params["gru.W"].shape[0] == 1
    series, specs = inputs(cfg)
    np.testing.assert_allclose(model.forward(series, specs, training=True).probs.sum(axis=1), 1.0, atol=1e-6)


# -- ablations -------------------------------------------------------------------------------


def test_identity_ablation():
    assert ablate(ModelConfig()) == ModelConfig()
    cfg = ModelConfig()
    series, specs = inputs(cfg)
    a = AlesalModel(cfg, seed=12).forward(series, specs, training=True)
    b = AlesalModel(ablate(cfg), seed=12).forward(series, specs, training=True)
    assert a.logits.data.tobytes() == b.logits.data.tobytes()


def test_without_ta_has_no_attention_maps():
    model = AlesalModel(ablate(TINY, with_TA=False), seed=13)
    out = model.forward(*inputs(TINY), training=True)
    assert out.ta_weights is None and out.pa_weights is not None


def test_without_pa_equals_unweighted_pipeline():
    cfg = ablate(TINY, with_PA=False)
    model = AlesalModel(cfg, seed=14, dtype=np.float64)
    series, specs = inputs(cfg, dtype=np.float64)
    out = model.forward(series, specs, training=True)
    assert out.pa_weights is None
    p = {k: v.data for k, v in model.params.items()}
    E = model.morphology_features(series, training=True).data
    u = E.reshape(len(E), -1) @ p["pa.Wd"] + p["pa.bd"]
    r, _ = model.time_attention(specs)
    h = np.maximum(np.concatenate([r.data, u], axis=1) @ p["head.W1"] + p["head.b1"], 0)
    np.testing.assert_allclose(out.logits.data, h @ p["head.W2"] + p["head.b2"], atol=1e-12)


def test_single_branch_variants():
    series, specs = inputs(TINY)
    amp = AlesalModel(ablate(TINY, amplitude_only=True), seed=15)
    assert not any(k.startswith(("gru.", "ta.")) for k in amp.params)
    assert amp.forward(series, specs, training=True).ta_weights is None
    spec_only = AlesalModel(ablate(TINY, spectrum_only=True), seed=15)
    assert not any(k.startswith(("me.", "pa.")) for k in spec_only.params)
    assert spec_only.forward(series, specs).pa_weights is None
    with pytest.raises(RuntimeError, match="running stats"):
        AlesalModel(ablate(TINY, amplitude_only=True), seed=15).forward(series, specs)
    with pytest.raises(ValueError, match="every input branch"):
        ablate(TINY, amplitude_only=True, spectrum_only=True)


# -- checkpoints -------------------------------------------------------------------------------


def test_model_checkpoint_roundtrip():
    cfg = TINY
    model = AlesalModel(cfg, seed=16)
    series, specs = inputs(cfg)
    model.forward(series, specs, training=True)  # populate running statistics
    blob = model.to_bytes({"note": "x"})
    clone, meta = AlesalModel.from_bytes(blob)
    assert meta["note"] == "x" and clone.config == cfg
    assert clone.to_bytes({"note": "x"}) == blob
    np.testing.assert_array_equal(clone.forward(series, specs).probs, model.forward(series, specs).probs)


def test_checkpoint_container_errors():
    arrays = {"b": np.arange(3, dtype=np.int64), "a": np.ones((2, 2), np.float32), "c": np.zeros(0)}
    blob = dumps(arrays, {"k": 1})
    back, cfg = loads(blob)
    assert cfg == {"k": 1} and list(back) == ["a", "b", "c"]
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
        assert back[k].dtype == arrays[k].dtype
    with pytest.raises(CheckpointError, match="magic"):
        loads(b"XXXX" + blob[4:])
    corrupt = bytearray(blob)
    corrupt[20] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        loads(bytes(corrupt))
    with pytest.raises(CheckpointError, match="dtype"):
        dumps({"x": np.ones(2, np.complex64)}, {})


def test_parameter_count_is_stable():
    model = AlesalModel(ModelConfig(), seed=0)
    total = sum(v.data.size for v in model.params.values())
    me = 4 * (16 * 7 + 16 + 16 * 16 * 7 + 16 + 4 * 16)
    pa = 3 + 64 * 22 * 32 + 32
    gru = 4 * (51 * 96 + 32 * 96 + 96)
    ta = 4 * (32 * 32 * 3 + 32 * 16 + 16)
    head = (64 + 32) * 64 + 64 + 64 * 3 + 3
    assert total == me + pa + gru + ta + head
    assert math.isclose(total, 106150, rel_tol=0.05)
