"""Named finite-difference suites over every differentiable op.

Shared by the command-line `gradcheck` command and the acceptance tests.
Each suite returns (name, worst relative error) pairs; test points are
seeded and chosen away from kinks of |.|, relu, min and max.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import losses as L
from . import pipeline as P
from . import tensor as T
from .attention import (
    AttentionParams,
    EncoderLayerParams,
    depth_encoder_layer,
    mhca,
    mhsa,
    visual_encoder_layer,
)
from .decouple import DecoupleParams, decouple_features, reverse_cross_attention
from .tensor import Tensor, grad_check

SCOPES = ("attention", "decouple", "losses", "pipeline", "all")
THRESHOLD = 1e-5


def attention_suite(seed: int = 0) -> list[tuple[str, float]]:
    rng = np.random.default_rng(seed)
    p = AttentionParams.create(rng, 4, 2)
    layer = EncoderLayerParams.create(rng, 4, 2, 8)
    q_in = Tensor(rng.standard_normal((2, 4)))
    kv = Tensor(rng.standard_normal((3, 4)))
    readout = Tensor(rng.standard_normal((2, 4)))
    results = [
        ("mhca/q_in", grad_check(lambda t: T.mean(mhca(t, kv, p)), q_in)),
        ("mhca/kv_in", grad_check(lambda t: T.mean(mhca(q_in, t, p)), kv)),
        ("mhca/w_q", grad_check(
            lambda w: T.mean(mhca(q_in, kv, dataclasses.replace(p, w_q=w))), p.w_q)),
        ("mhsa/x", grad_check(lambda t: T.mean(mhsa(t, p)), kv)),
        ("visual_encoder_layer/x", grad_check(
            lambda t: T.total(T.mul(visual_encoder_layer(t, kv, layer), readout)), q_in)),
        ("visual_encoder_layer/text", grad_check(
            lambda t: T.mean(visual_encoder_layer(q_in, t, layer)), kv)),
        ("depth_encoder_layer/x", grad_check(
            lambda t: T.total(T.mul(depth_encoder_layer(t, kv, layer), readout)), q_in)),
        ("depth_encoder_layer/text", grad_check(
            lambda t: T.mean(depth_encoder_layer(q_in, t, layer)), kv)),
    ]
    return results


def decouple_suite(seed: int = 0) -> list[tuple[str, float]]:
    rng = np.random.default_rng(seed)
    results = []
    for mode in ("scaled_dot", "cosine"):
        p = DecoupleParams.create(rng, m=2, d=4, heads=2, d_ff=8, similarity=mode)
        tokens = Tensor(rng.standard_normal((3, 4)))
        readout = Tensor(rng.standard_normal((2, 4)))

        def forward_sum(t, p=p, readout=readout):
            t2d, t3d = decouple_features(t, p)
            return T.total(T.mul(T.add(t2d, t3d), readout))

        results.append((f"decouple_features[{mode}]/tokens",
                        grad_check(forward_sum, tokens)))
        results.append((f"decouple_features[{mode}]/query_2d", grad_check(
            lambda q, p=p, tokens=tokens, readout=readout: T.total(T.mul(
                T.sub(*decouple_features(tokens, dataclasses.replace(p, query_2d=q))),
                readout)),
            p.query_2d)))
        q_self = Tensor(rng.standard_normal((3, 4)))
        k_other = Tensor(rng.standard_normal((3, 4)))
        results.append((f"reverse_cross_attention[{mode}]/q", grad_check(
            lambda t, p=p, k=k_other, mode=mode: T.mean(
                reverse_cross_attention(t, k, p.refine_ffn_2d, mode)), q_self)))
        results.append((f"reverse_cross_attention[{mode}]/k", grad_check(
            lambda t, p=p, q=q_self, mode=mode: T.mean(
                reverse_cross_attention(q, t, p.refine_ffn_2d, mode)), k_other)))
    return results


def losses_suite(seed: int = 0) -> list[tuple[str, float]]:
    rng = np.random.default_rng(seed)
    results = []

    logits = Tensor(rng.standard_normal((3, 9)))
    results.append(("focal_loss/logits", grad_check(
        lambda t: L.focal_loss(T.softmax_rows(t), [1, 0, 7]), logits)))

    target = L.BoxRegression(Tensor(rng.uniform(1, 3, (2, 4))),
                             Tensor(rng.uniform(-1, 1, (2, 2))))
    raw = Tensor(rng.uniform(0.5, 2.0, (2, 4)))
    pred_xy = Tensor(rng.standard_normal((2, 2)) * 0.1)

    def reg_all(t):
        pred = L.BoxRegression(T.add(T.absolute(t), 0.4), pred_xy)
        out = L.regression_losses(pred, target)
        return T.add(T.add(out.lrtb, out.xy3d), out.giou)

    results.append(("regression_losses/lrtb", grad_check(reg_all, raw)))

    bins = L.OrientationBins(12)
    olog = Tensor(rng.standard_normal((2, 12)))
    ores = Tensor(rng.standard_normal((2, 12)))
    angles = [0.7, -1.9]
    results.append(("multibin_loss/logits", grad_check(
        lambda t: L.multibin_loss(t, ores, angles, bins), olog)))
    results.append(("multibin_loss/residuals", grad_check(
        lambda t: L.multibin_loss(olog, t, angles, bins), ores)))

    sig_raw = Tensor(rng.uniform(-0.5, 0.5, (3, 1)))
    results.append(("laplacian_depth_loss/sigma", grad_check(
        lambda t: L.laplacian_depth_loss(Tensor([[4.0], [5.0], [6.0]]), T.exp(t),
                                         Tensor([[4.4], [5.6], [5.1]])), sig_raw)))
    results.append(("laplacian_depth_loss/depth", grad_check(
        lambda t: L.laplacian_depth_loss(t, Tensor([[1.0], [2.0], [0.5]]),
                                         Tensor([[4.4], [5.6], [5.1]])),
        Tensor(rng.uniform(6, 7, (3, 1))))))

    dims_raw = Tensor(rng.uniform(-0.4, 0.4, (2, 3)))
    dims_target = Tensor(rng.uniform(0.8, 2.0, (2, 3)))
    results.append(("size3d_iou_loss/dims", grad_check(
        lambda t: L.size3d_iou_loss(T.exp(t), dims_target), dims_raw)))

    dmap = Tensor(rng.standard_normal((4, 6)))
    results.append(("depth_map_focal_loss/logits", grad_check(
        lambda t: L.depth_map_focal_loss(T.softmax_rows(t), [0, 2, 5, 3]), dmap)))

    comps = Tensor(rng.uniform(0.5, 1.5, (1, 8)))
    results.append(("aggregate/components", grad_check(
        lambda t: L.aggregate(*(T.slice_cols(t, i, i + 1) for i in range(8))).node,
        comps)))
    return results


def pipeline_suite(seed: int = 0) -> list[tuple[str, float]]:
    cfg = P.ToyConfig(seed=seed, width=8, queries=2, heads=2, ffn_width=12,
                      head_hidden=8, n_tokens=4, n_visual=3, pixels=3,
                      k2=2, k3=2, k2_visible=1, k3_visible=1, depth_bins=4,
                      n_train=4, epochs=0)
    params = P.init_toy_params(cfg)
    sample = P.synth_generate(1, cfg, seed=seed + 50)[0]

    def loss_from_tokens(tokens):
        out = P.toy_forward(sample, params, cfg, tokens=tokens)
        return P.toy_loss(out, sample.targets, cfg).node

    results = [("toy_forward+loss/tokens",
                grad_check(loss_from_tokens, Tensor(sample.tokens)))]

    for name in ("decoupler.query_2d", "decoder.query", "heads.depth.w1",
                 "visual_encoder.cross_attn.w_v"):
        leaf = P.named_parameters(params)[name]

        def loss_from_param(t, name=name):
            p2 = P.replace_parameters(params, {name: t})
            return P.toy_loss(P.toy_forward(sample, p2, cfg), sample.targets, cfg).node

        results.append((f"toy_forward+loss/{name}", grad_check(loss_from_param, leaf)))
    return results


def run_scope(scope: str, seed: int = 0) -> list[tuple[str, float]]:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES}")
    suites = {
        "attention": attention_suite,
        "decouple": decouple_suite,
        "losses": losses_suite,
        "pipeline": pipeline_suite,
    }
    if scope == "all":
        out = []
        for fn in suites.values():
            out.extend(fn(seed))
        return out
    return suites[scope](seed)
