"""Self-test and gradient-check suites shared by the CLI and the acceptance tests.

Each self-test check is a small function that raises ``AssertionError`` with
a message naming the property.  Functions are looked up through their
modules at call time, so a patched implementation is what gets tested.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention, dynamic_head, geometry, losses, pipeline, roi_align, synth_data
from . import tensor as T
from .layers import Linear
from .tensor import Tensor, grad_check

PRIMITIVE_TOL = 1e-5
MODULE_TOL = 1e-5
FULL_TOL = 1e-4


def _close(a, b, tol, what):
    if not np.allclose(a, b, atol=tol, rtol=0.0):
        raise AssertionError(f"{what}: got {a!r}, expected {b!r}")


# ---------------------------------------------------------------------------
# self-test checks, grouped by module


def _tensor_checks():
    def matmul():
        _close(T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]], 0, "matmul hand value")

    def softmax():
        out = T.softmax_rows(Tensor([[0.0, math.log(2.0)]])).data
        _close(out, [[1 / 3, 2 / 3]], 1e-15, "softmax hand value")

    def backward():
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.backward(T.tsum(x ** 2))
        _close(x.grad, [2.0, 4.0, 6.0], 0, "backward of sum of squares")

    def gradients():
        worst = max(err for _, err in primitive_grad_errors(seeds=1))
        if worst >= PRIMITIVE_TOL:
            raise AssertionError(f"primitive grad_check error {worst:.3g}")

    return [("matmul", matmul), ("softmax", softmax), ("backward", backward), ("grad_check", gradients)]


def _raster_iou(a, b, res=50):
    lo_x, hi_x = min(a[0], b[0]), max(a[2], b[2])
    lo_y, hi_y = min(a[1], b[1]), max(a[3], b[3])
    xs = lo_x + (np.arange(int(round((hi_x - lo_x) * res))) + 0.5) / res
    ys = lo_y + (np.arange(int(round((hi_y - lo_y) * res))) + 0.5) / res
    gx, gy = np.meshgrid(xs, ys)
    in_a = (gx > a[0]) & (gx < a[2]) & (gy > a[1]) & (gy < a[3])
    in_b = (gx > b[0]) & (gx < b[2]) & (gy > b[1]) & (gy < b[3])
    return np.count_nonzero(in_a & in_b) / np.count_nonzero(in_a | in_b)


def _geometry_checks():
    Box = geometry.Box

    def iou():
        _close(geometry.iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)), _raster_iou((0, 0, 2, 2), (1, 1, 3, 3)), 1e-6,
               "iou vs raster oracle")
        _close(geometry.iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)), 0.0, 0, "iou of disjoint boxes")

    def giou():
        _close(geometry.giou(Box(0, 0, 1, 1), Box(2, 0, 3, 1)), -1 / 3, 1e-12, "giou hand value")
        _close(geometry.giou(Box(0, 0, 2, 2), Box(0, 0, 2, 2)), 1.0, 0, "giou of identical boxes")
        rng = np.random.default_rng(0)
        for _ in range(200):
            xy = rng.uniform(0, 10, (2, 2))
            wh = rng.uniform(0.1, 5, (2, 2))
            a, b = Box(*xy[0], *(xy[0] + wh[0])), Box(*xy[1], *(xy[1] + wh[1]))
            g = geometry.giou(a, b)
            if not -1.0 - 1e-12 <= g <= geometry.iou(a, b) + 1e-12:
                raise AssertionError(f"giou bound violated: giou={g}, iou={geometry.iou(a, b)}")

    def deltas():
        grown = geometry.apply_deltas(Box(400, 400, 402, 404), [0, 0, 100, 0], 1e6, 1e6)
        _close(grown.width, 2 * math.exp(geometry.DELTA_CLAMP), 1e-9, "delta clamp")

    return [("iou", iou), ("giou", giou), ("apply_deltas", deltas)]


def _attention_checks():
    rng = np.random.default_rng(1)
    cfg = attention.AttnConfig(16, 4)
    params = attention.MhsaParams.init(cfg, rng)
    q = Tensor(rng.normal(size=(6, 16)))

    def reduction():
        a = attention.standard_msa(q, params, cfg).data
        b = attention.iou_esa(q, np.ones((6, 6)), params, cfg).data
        if not np.array_equal(a, b):
            raise AssertionError("iou_esa with all-ones IoU differs from standard_msa")

    def hand_value():
        c = attention.AttnConfig(2, 1)
        p = attention.MhsaParams.init(c, rng)
        p.W_qkv.data[:] = 0.0
        w = attention.attention_weights(Tensor(np.ones((2, 2))), np.array([[1.0, 0.5], [0.5, 1.0]]), p, c,
                                        attention.AttnMode.IOU_ESA).data[0, 0]
        _close(w, [2 / 3, 1 / 3], 1e-12, "enhanced weights hand value")

    def rows():
        iou = rng.uniform(size=(6, 6))
        w = attention.attention_weights(q, iou, params, cfg, attention.AttnMode.IOU_ESA).data
        _close(w.sum(-1), 1.0, 1e-9, "enhanced rows sum to one")

    return [("all_ones_reduction", reduction), ("hand_value", hand_value), ("row_normalisation", rows)]


def _roi_checks():
    def constant():
        fm = roi_align.FeatureMap(Tensor(np.full((2, 5, 5), 3.0)), 8.0)
        _close(roi_align.roi_align(fm, [[3, 4, 30, 33]], 7, 2).data, 3.0, 1e-12, "constant map pools to constant")

    def one_cell():
        data = np.arange(25.0).reshape(1, 5, 5)
        fm = roi_align.FeatureMap(Tensor(data), 8.0)
        _close(roi_align.roi_align(fm, [[16, 8, 24, 16]], 1, 1).data[0, 0, 0], data[0, 1, 2], 1e-12,
               "box covering one cell")

    def midpoint():
        fm = roi_align.FeatureMap(Tensor(np.array([[[0.0, 1.0]]])), 1.0)
        _close(roi_align.bilinear_sample(fm, 0.5, 0.0)[0], 0.5, 0, "bilinear midpoint")

    return [("constant_map", constant), ("one_cell", one_cell), ("bilinear", midpoint)]


def _dynamic_head_checks():
    def dcw_broadcast():
        out = dynamic_head.apply_dcw(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), Tensor([[0.5, 1.0]])).data
        _close(out, [[[0.5, 2.0], [1.5, 4.0]]], 0, "apply_dcw hand broadcast")

    def zero_masks():
        heads = dynamic_head.ChannelMaskHeads.init(8, 2, np.random.default_rng(0), "m")
        for p in heads.parameters():
            p.data = np.zeros_like(p.data)
        m_c, _ = dynamic_head.dcw_masks(Tensor(np.ones((2, 8))), heads)
        _close(m_c.data, 0.5, 0, "zero bottleneck gives 0.5 masks")

    def zero_rois():
        conv = dynamic_head.DynamicConv.init(8, 8, 2, 8, np.random.default_rng(0), "c")
        out = conv(Tensor(np.ones((2, 8))), Tensor(np.zeros((2, 4, 8)))).data
        _close(out, 0.0, 0, "dynamic conv of zero features")

    return [("apply_dcw", dcw_broadcast), ("dcw_masks", zero_masks), ("dynamic_conv", zero_rois)]


def _brute_force(cost):
    n, m = cost.shape
    return min(sum(cost[p, t] for t, p in enumerate(v)) for v in itertools.permutations(range(n), m))


def _loss_checks():
    def focal():
        _close(losses.focal_loss(0.0, True), 0.043322, 1e-6, "focal positive at p=0.5")
        _close(losses.focal_loss(0.0, False), 0.129966, 1e-6, "focal negative at p=0.5")

    def hungarian():
        rng = np.random.default_rng(2)
        for _ in range(20):
            n = int(rng.integers(1, 7))
            c = rng.uniform(size=(n, int(rng.integers(1, n + 1))))
            _close(losses.hungarian(c).total_cost, _brute_force(c), 1e-9, "hungarian vs brute force")

    def giou_loss():
        _close(losses.giou_loss(geometry.Box(0, 0, 1, 1), geometry.Box(2, 0, 3, 1)), 4 / 3, 1e-12,
               "giou loss hand value")

    return [("focal_loss", focal), ("hungarian", hungarian), ("giou_loss", giou_loss)]


def _synth_checks():
    def determinism():
        a = synth_data.generate_scene(synth_data.SceneSpec(seed=5))
        b = synth_data.generate_scene(synth_data.SceneSpec(seed=5))
        if not np.array_equal(a.feature_map.data.data, b.feature_map.data.data):
            raise AssertionError("same seed gave different scenes")

    def ap():
        t = losses.Targets(geometry.BoxSet([[10, 10, 40, 40]], 100, 100), [0])
        d = synth_data.Detections([[60, 60, 90, 90], [10, 10, 40, 40]], [0.9, 0.8])
        _close(synth_data.evaluate_ap([d], [t]), 0.5, 1e-12, "AP hand PR curve")

    def prng():
        if synth_data.SplitMix64(0).next_u64() != 0xE220A8397B1DCDAF:
            raise AssertionError("SplitMix64 reference vector")

    return [("determinism", determinism), ("evaluate_ap", ap), ("splitmix64", prng)]


def _pipeline_checks():
    cfg = pipeline.DetectorConfig(num_queries=4, d_model=16, heads=2, pool_size=3, in_channels=8)
    spec = synth_data.SceneSpec(seed=1, image_w=64, image_h=64, channels=8, size_range=(12, 30))

    def reduction():
        state = pipeline.ModelState.init(cfg, 0)
        sc = synth_data.generate_scene(spec)
        boxes = Tensor(np.tile([[5.0, 6.0, 40.0, 50.0]], (4, 1)))
        a = pipeline.forward_stage(state.q0, boxes, sc.feature_map, state.stages[0], cfg, 64, 64)
        b = pipeline.forward_stage(state.q0, boxes, sc.feature_map, state.stages[0], cfg.with_mode("full"),
                                   64, 64)
        if not np.array_equal(a.class_logits.data, b.class_logits.data):
            raise AssertionError("IOU_ESA != FULL_MSA with coinciding boxes")

    def zero_lr():
        state = pipeline.ModelState.init(cfg, 0)
        before = state.state_dict()
        pipeline.train_step(synth_data.generate_scene(spec), state, cfg, pipeline.OptimizerState(), lr=0.0)
        after = state.state_dict()
        if not all(np.array_equal(before[k], after[k]) for k in before):
            raise AssertionError("zero learning rate changed parameters")

    def full_grad():
        err = full_model_grad_error()
        if err >= FULL_TOL:
            raise AssertionError(f"full model grad_check error {err:.3g}")

    return [("all_ones_reduction", reduction), ("zero_lr", zero_lr), ("full_grad_check", full_grad)]


SELFTEST_MODULES: list[tuple[str, Callable]] = [
    ("tensor", _tensor_checks),
    ("geometry", _geometry_checks),
    ("attention", _attention_checks),
    ("roi_align", _roi_checks),
    ("dynamic_head", _dynamic_head_checks),
    ("matcher_losses", _loss_checks),
    ("synth_data", _synth_checks),
    ("pipeline", _pipeline_checks),
]


@dataclass
class CheckResult:
    module: str
    name: str
    ok: bool
    message: str = ""


def run_selftest() -> list[CheckResult]:
    results = []
    for module, build in SELFTEST_MODULES:
        for name, fn in build():
            try:
                fn()
                results.append(CheckResult(module, name, True))
            except Exception as exc:   # a crash is a failure of that property too
                results.append(CheckResult(module, name, False, f"{type(exc).__name__}: {exc}"))
    return results


def format_selftest(results: list[CheckResult], seconds: float) -> str:
    lines = [f"{'module':<16}{'passed':>8}{'failed':>8}"]
    for module, _ in SELFTEST_MODULES:
        mine = [r for r in results if r.module == module]
        lines.append(f"{module:<16}{sum(r.ok for r in mine):>8}{sum(not r.ok for r in mine):>8}")
    for r in results:
        if not r.ok:
            lines.append(f"FAIL {r.module}.{r.name}: {r.message}")
    lines.append(f"{'ok' if all(r.ok for r in results) else 'FAILED'} in {seconds:.1f}s")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# gradient checks


def _primitive_cases(rng):
    c = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    gamma, beta = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    other = Tensor(rng.normal(size=(3, 4)))
    x = rng.normal(size=(3, 4))
    return [
        ("add", lambda t: T.tsum((t + other) * c), x),
        ("sub", lambda t: T.tsum((other - t) * c), x),
        ("mul", lambda t: T.tsum(t * other * c), x),
        ("div", lambda t: T.tsum(other / t * c), pos),
        ("pow", lambda t: T.tsum(t ** 3 * c), x),
        ("exp", lambda t: T.tsum(T.exp(t) * c), x),
        ("log", lambda t: T.tsum(T.log(t) * c), pos),
        ("sigmoid", lambda t: T.tsum(T.sigmoid(t) * c), 3 * x),
        ("softplus", lambda t: T.tsum(T.softplus(t) * c), 3 * x),
        ("relu", lambda t: T.tsum(T.relu(t) * c), x),
        ("abs", lambda t: T.tsum(T.tabs(t) * c), x),
        ("maximum", lambda t: T.tsum(T.maximum(t, other) * c), x),
        ("minimum", lambda t: T.tsum(T.minimum(other, t) * c), x),
        ("clip", lambda t: T.tsum(T.clip(t, -0.5, 0.5) * c), x),
        ("sum", lambda t: T.tsum(T.tsum(t, axis=0) ** 2), x),
        ("mean", lambda t: T.mean(t, axis=1).sum() * 2.0, x),
        ("reshape", lambda t: T.tsum(T.reshape(t, (4, 3)) * c.reshape(4, 3)), x),
        ("transpose", lambda t: T.tsum(T.transpose(t) * c.T), x),
        ("getitem", lambda t: T.tsum(t[np.array([0, 2, 2])] * c), x),
        ("concat", lambda t: T.tsum(T.concat([t, other], axis=0) ** 2), x),
        ("matmul", lambda t: T.tsum(t @ other.data.T @ c), x),
        ("softmax", lambda t: T.tsum(T.softmax_rows(t) * c), x),
        ("softmax_prior", lambda t: T.tsum(T.softmax_rows(t, prior=pos) * c), x),
        ("layer_norm", lambda t: T.tsum(T.layer_norm(t, gamma, beta) * c), x),
    ]


def primitive_grad_errors(seeds: int = 3) -> list[tuple[str, float]]:
    worst: dict[str, float] = {}
    for seed in range(seeds):
        for name, fn, x in _primitive_cases(np.random.default_rng(seed)):
            worst[name] = max(worst.get(name, 0.0), grad_check(fn, Tensor(x)))
    return list(worst.items())


def module_grad_errors(seed: int = 0) -> list[tuple[str, float]]:
    rng = np.random.default_rng(seed)
    out = []

    cfg = attention.AttnConfig(8, 2)
    params = attention.MhsaParams.init(cfg, rng)
    q = Tensor(rng.normal(size=(4, 8)))
    iou = rng.uniform(0.1, 1.0, (4, 4))
    c = rng.normal(size=(4, 8))
    for mode in (attention.AttnMode.FULL_MSA, attention.AttnMode.IOU_ESA):
        out.append((f"attention[{mode.value}]", grad_check(
            lambda _, m=mode: T.tsum(attention.self_attention(q, iou, params, cfg, m) * c),
            [q] + params.parameters())))

    fm_data = Tensor(rng.normal(size=(3, 5, 5)))
    cr = rng.normal(size=(2, 9, 3))
    out.append(("roi_align", grad_check(
        lambda x: T.tsum(roi_align.roi_align(roi_align.FeatureMap(x, 8.0), [[2, 3, 30, 25], [9, 1, 38, 39]], 3, 2)
                         * cr), fm_data)))

    conv = dynamic_head.DynamicConv.init(8, 8, 2, 8, rng, "conv")
    r = Tensor(rng.normal(size=(4, 4, 8)))
    cc = rng.normal(size=(4, 4, 8))
    out.append(("dynamic_conv", grad_check(lambda _: T.tsum(conv(q, r) * cc), [q, r] + conv.parameters())))

    masks = dynamic_head.ChannelMaskHeads.init(8, 2, rng, "dcw")
    W_c, W_r = Linear.init(32, 8, rng, "pc"), Linear.init(32, 8, rng, "pr")

    def dcw(_):
        m_c, m_r = dynamic_head.dcw_masks(q, masks)
        o = dynamic_head.project_embeddings(dynamic_head.apply_dcw(r, m_c), dynamic_head.apply_dcw(r, m_r), W_c, W_r)
        return T.tsum(o.o_c * c) + T.tsum(o.o_r * c[::-1])

    out.append(("dcw", grad_check(dcw, [q, r] + masks.parameters() + W_c.parameters() + W_r.parameters())))

    logits = Tensor(rng.normal(size=(5, 1)))
    xy = rng.uniform(0, 50, (5, 2))
    boxes = Tensor(np.hstack([xy, xy + rng.uniform(5, 40, (5, 2))]))
    targets = losses.Targets(geometry.BoxSet([[10, 12, 40, 50], [30, 5, 70, 45]], 100, 100), [0, 0])
    preds = pipeline.StageOutput(logits, boxes, None, 100.0, 100.0)
    match = losses.stage_loss(preds, targets, losses.CostConfig()).match
    out.append(("set_loss", grad_check(
        lambda _: losses.set_loss([preds], targets, losses.CostConfig(), matches=[match]), [logits, boxes])))
    return out


def full_model_grad_error(seed: int = 6) -> float:
    """Tiny two-stage detector (N=3, d=8, H=2, s=3, one target).

    Box geometry feeding the IoU matrix and RoI pooling carries no gradient,
    so the finite-difference function holds it at its baseline values.
    """
    cfg = pipeline.DetectorConfig(num_queries=3, d_model=8, heads=2, pool_size=3, in_channels=8)
    state = pipeline.ModelState.init(cfg, seed)
    rng = np.random.default_rng(seed)
    fm = roi_align.FeatureMap(Tensor(rng.normal(size=(8, 4, 4))), 8.0)
    targets = losses.Targets(geometry.BoxSet([[6.0, 5.0, 22.0, 27.0]], 32, 32), [0])
    outs = pipeline.forward(fm, state, cfg, 32, 32)
    matches = [losses.stage_loss(o, targets, cfg.cost).match for o in outs]
    frozen = [pipeline.initial_boxes(state, 32, 32).data.copy(), outs[0].boxes.data.copy()]

    def f(_):
        o0 = pipeline.forward_stage(state.q0, pipeline.initial_boxes(state, 32, 32), fm, state.stages[0], cfg,
                                    32, 32, sample_boxes=frozen[0])
        o1 = pipeline.forward_stage(o0.queries_out, Tensor(frozen[1]), fm, state.stages[1], cfg, 32, 32, 1,
                                    sample_boxes=frozen[1])
        return losses.set_loss([o0, o1], targets, cfg.cost, matches=matches)

    return grad_check(f, state.parameters())


GRADCHECK_SCOPES = {
    "primitives": (lambda: primitive_grad_errors(), PRIMITIVE_TOL),
    "modules": (lambda: module_grad_errors(), MODULE_TOL),
    "full": (lambda: [("detector[2 stages]", full_model_grad_error())], FULL_TOL),
}


def run_gradcheck(scope: str) -> tuple[list[tuple[str, float]], float, float]:
    """``(per-op worst errors, tolerance, seconds)`` for one scope."""
    fn, tol = GRADCHECK_SCOPES[scope]
    start = time.perf_counter()
    errors = fn()
    return errors, tol, time.perf_counter() - start
