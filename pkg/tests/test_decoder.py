"""Decoder contracts: query assembly, leakage invariance, equivariance,
prediction shapes and the end-to-end gradient check."""

import numpy as np
import pytest

from multiseg3d import autodiff as ad
from multiseg3d.decoder import (assemble_queries, decode, init_decoder,
                                init_task_embeddings, predict, sample_query_count,
                                sample_query_indices, superpoint_to_point)
from multiseg3d.errors import ContractError
from multiseg3d.prompts import ClassEmbeddings, embed_class_names
from multiseg3d.rng import make_rng

from util import check_op_grad

D = 8


def _weights(seed=0, d_out=16, layers=2):
    return init_decoder(make_rng(seed, "w"), D, d_out, layers, n_heads=4)


def _features(rng, m_total=10):
    return ad.Tensor(rng.normal(size=(m_total, D)))


def _emb(zero=False):
    emb = init_task_embeddings(D)
    if not zero:
        rng = make_rng(9)
        for t in (emb.unified, emb.vision, emb.text):
            t.data = rng.normal(size=D)
    return emb


def _prompt_rows(f_sp, rows):
    from multiseg3d.prompts import VisionPromptFeature
    return [VisionPromptFeature(feature=ad.gather_rows(f_sp, np.array([r])),
                                superpoint=r, point=-1) for r in rows]


# ---------------------------------------------------------------------------
# assembly


def test_zero_embeddings_give_raw_features():
    rng = make_rng(81)
    f_sp = _features(rng)
    bundle = assemble_queries(f_sp, 10, _emb(zero=True), seed=0,
                              vision_prompts=_prompt_rows(f_sp, [2]),
                              text_features=ad.Tensor(rng.normal(size=(1, D))))
    np.testing.assert_array_equal(bundle.unified.data, f_sp.data)
    np.testing.assert_array_equal(bundle.prompts.data[0], f_sp.data[2])


def test_inference_uses_all_superpoints():
    m = sample_query_count(40, seed=0, training=False)
    assert m == 40
    idx = sample_query_indices(40, m, seed=0)
    np.testing.assert_array_equal(idx, np.arange(40))


def test_inference_cap_applies():
    assert sample_query_count(5000, seed=0, training=False) == 3500


def test_training_count_in_band():
    for seed in range(50):
        m = sample_query_count(64, seed=seed, training=True)
        assert 32 <= m <= 64


def test_sampling_without_replacement():
    idx = sample_query_indices(50, 25, seed=3)
    assert len(np.unique(idx)) == 25


def test_m_exceeding_superpoints_rejected():
    rng = make_rng(82)
    with pytest.raises(ContractError):
        assemble_queries(_features(rng), 11, _emb(), seed=0)


# ---------------------------------------------------------------------------
# leakage invariance


def test_leakage_bit_identity_across_prompt_changes():
    rng = make_rng(83)
    f_sp = _features(rng, 12)
    weights = _weights(layers=3)
    emb = _emb()
    e_cls = embed_class_names(["a", "b"], 16)

    def run(vision_rows, text):
        bundle = assemble_queries(f_sp, 8, emb, seed=5,
                                  vision_prompts=_prompt_rows(f_sp, vision_rows),
                                  text_features=text)
        f_u, f_p = decode(bundle, f_sp, weights)
        return predict(f_u, f_p, f_sp, e_cls, bundle, weights)

    base = run([1, 2], ad.Tensor(rng.normal(size=(2, D))))
    other = run([7], ad.Tensor(rng.normal(size=(3, D))))       # different K_v, K_t
    none = run([], None)
    m = base.m
    for preds in (other, none):
        assert np.array_equal(base.f_out.data[:m], preds.f_out.data[:m])
        assert np.array_equal(base.mask_logits.data[:m], preds.mask_logits.data[:m])
        assert np.array_equal(base.cls_pred.data[:m], preds.cls_pred.data[:m])


def test_prompt_permutation_equivariance():
    rng = make_rng(84)
    f_sp = _features(rng, 12)
    weights = _weights()
    emb = _emb()
    text = ad.Tensor(rng.normal(size=(2, D)))
    text_swapped = ad.Tensor(text.data[::-1].copy())

    def run(text_feats):
        bundle = assemble_queries(f_sp, 12, emb, seed=0, text_features=text_feats)
        _, f_p = decode(bundle, f_sp, weights)
        return f_p.data

    a = run(text)
    b = run(text_swapped)
    assert np.array_equal(a[0], b[1]) and np.array_equal(a[1], b[0])


def test_determinism():
    rng = make_rng(85)
    f_sp = _features(rng, 12)
    weights = _weights()
    emb = _emb()

    def run():
        bundle = assemble_queries(f_sp, 9, emb, seed=11)
        f_u, _ = decode(bundle, f_sp, weights)
        return f_u.data

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------------------
# predictions


def test_prediction_shapes_and_simplex():
    rng = make_rng(86)
    f_sp = _features(rng, 10)
    weights = _weights()
    e_cls = embed_class_names(["a", "b", "c"], 16)
    bundle = assemble_queries(f_sp, 6, _emb(), seed=1,
                              vision_prompts=_prompt_rows(f_sp, [0]),
                              text_features=ad.Tensor(rng.normal(size=(2, D))))
    f_u, f_p = decode(bundle, f_sp, weights)
    preds = predict(f_u, f_p, f_sp, e_cls, bundle, weights)
    assert preds.mask_logits.shape == (9, 6)
    assert preds.cls_pred.shape == (9, 4)
    np.testing.assert_allclose(preds.cls_pred.data.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(preds.cls_pred.data >= 0)


def test_aligned_output_dominates_class():
    rng = make_rng(87)
    rows = np.linalg.qr(rng.normal(size=(16, 16)))[0][:4]
    e_cls = ClassEmbeddings(matrix=rows, names=["a", "b", "c"])
    f_out = ad.Tensor(10.0 * rows[2][None, :])
    logits = ad.matmul(f_out, ad.transpose(ad.Tensor(e_cls.matrix)))
    assert int(np.argmax(ad.softmax_rows(logits).data)) == 2


def test_empty_prompts_valid():
    rng = make_rng(88)
    f_sp = _features(rng, 10)
    weights = _weights()
    bundle = assemble_queries(f_sp, 10, _emb(), seed=0)
    f_u, f_p = decode(bundle, f_sp, weights)
    assert f_p is None
    assert f_u.shape == (10, 16)


# ---------------------------------------------------------------------------
# superpoint -> point broadcast


def test_superpoint_to_point_constant():
    sp_id = np.array([0, 0, 1, 2, 1])
    out = superpoint_to_point(np.ones(3), sp_id, np.arange(3), 3)
    np.testing.assert_array_equal(out, 1.0)


def test_superpoint_to_point_one_hot():
    sp_id = np.array([0, 0, 1, 2, 1])
    values = np.array([0.0, 5.0, 0.0])
    out = superpoint_to_point(values, sp_id, np.arange(3), 3)
    np.testing.assert_array_equal(out, [0, 0, 5, 0, 5])


def test_superpoint_to_point_unsampled_minus_inf():
    sp_id = np.array([0, 1, 2])
    out = superpoint_to_point(np.array([1.0, 2.0]), sp_id, np.array([0, 2]), 3)
    assert out[0] == 1.0 and out[2] == 2.0 and out[1] == -np.inf


def test_pool_roundtrip_on_superpoint_constant_field():
    from multiseg3d.backbone import pool_superpoints
    rng = make_rng(89)
    sp_id = rng.integers(0, 4, size=20)
    sp_values = rng.normal(size=4)
    field = sp_values[sp_id]
    pooled = pool_superpoints(ad.Tensor(field[:, None]), sp_id, 4).data[:, 0]
    np.testing.assert_allclose(pooled, sp_values, atol=1e-12)
    back = superpoint_to_point(pooled, sp_id, np.arange(4), 4)
    np.testing.assert_allclose(back, field, atol=1e-12)


# ---------------------------------------------------------------------------
# gradients


def test_end_to_end_gradient_small():
    # 6 superpoints, m=4, one prompt of each kind
    rng = make_rng(90)
    f_sp_param = ad.parameter(rng.normal(size=(6, D)))
    weights = _weights(layers=2, d_out=8)
    emb = _emb()
    e_cls = embed_class_names(["a", "b"], 8)
    text = ad.parameter(rng.normal(size=(1, D)))
    params = [f_sp_param, text] + list(weights.named_params().values()) \
        + list(emb.named_params().values())

    def build():
        bundle = assemble_queries(f_sp_param, 4, emb, seed=2,
                                  vision_prompts=_prompt_rows(f_sp_param, [1]),
                                  text_features=text)
        f_u, f_p = decode(bundle, f_sp_param, weights)
        preds = predict(f_u, f_p, f_sp_param, e_cls, bundle, weights)
        return ad.add(ad.tmean(preds.mask_logits),
                      ad.tmean(ad.ce_logits(preds.cls_logits,
                                            np.zeros(preds.n_queries, dtype=int))))

    check_op_grad(build, params)
