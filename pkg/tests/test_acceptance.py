"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v``; a summary line per
criterion is printed at the end of the session. The training criteria
(7, 8, 9) take several minutes on one core.
"""

import time

import numpy as np
import pytest
from scipy.optimize import minimize

from ecoweednet import ops
from ecoweednet.attention import SimAMConfig, SpabLayer, energy, simam_energy, simam_optimal_params, simam_refine, spab_forward
from ecoweednet.blocks import C2PSA, C3K2, SPPF, ConvBNAct
from ecoweednet.cli import main as cli_main
from ecoweednet.data import encode_checkpoint, load_checkpoint, load_model, save_checkpoint, synth_corpus
from ecoweednet.detection import DetectionBox, assign_targets, detection_loss, dfl_loss
from ecoweednet.errors import GraphBuildError
from ecoweednet.explain import gradcam_pp, peak
from ecoweednet.graph import account, build_graph, insertion_points, reference_config
from ecoweednet.metrics import IOU_THRESHOLDS, average_precision, class_statistics, map_range
from ecoweednet.tensor import GradTape, Parameter, Tensor, default_dtype
from ecoweednet.train import TrainSettings, evaluate_model, train

from gradcheck import check_gradients, check_module_gradients, numeric_grad
import test_tensor

TOY = reference_config("toy")
SIMAM_PINNED = (8, 11, 15)
EPOCHS = 30


# -- 1. SimAM closed form vs a numeric minimizer ---------------------------


def test_criterion_1(acceptance):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_min = worst_eval = 0.0
    for _ in range(1000):
        m1 = int(rng.integers(1, 64))
        surround = rng.normal(rng.normal(0, 2), rng.uniform(0.05, 3), size=m1)
        t = float(rng.normal(0, 3))
        lam = float(10 ** rng.uniform(-4, 0))
        mu, var = surround.mean(), surround.var()
        e_star = float(simam_energy(t, mu, var, lam))

        def f(p):
            return float(energy(p[0], p[1], t, surround, lam))

        res = minimize(f, np.zeros(2), method="BFGS", options={"gtol": 1e-11})
        worst_min = max(worst_min, abs(res.fun - e_star) / e_star)
        w, b = simam_optimal_params(t, mu, var, lam)
        worst_eval = max(worst_eval, abs(f((w, b)) - e_star) / e_star)
    elapsed = time.perf_counter() - start
    acceptance(1, f"minimizer rel err {worst_min:.1e}, energy at (w,b) rel err {worst_eval:.1e}, {elapsed:.1f} s")
    assert worst_min < 1e-6
    assert worst_eval < 1e-9
    assert elapsed < 10.0


# -- 2. SimAM adds no parameters or MACs -----------------------------------


def random_config(rng):
    cfg = reference_config("ecoweednet-n" if rng.uniform() < 0.5 else "toy")
    scale = rng.choice([0.25, 0.5, 0.75, 1.0, 1.5])
    for node in cfg.nodes:
        if node.out_channels is not None:
            node.out_channels = max(8, int(round(node.out_channels * scale / 8)) * 8)
        if node.kind == "c3k2":
            node.repeat = int(rng.integers(0, 3))
            node.expansion = float(rng.choice([0.25, 0.5, 1.0]))
    cfg.resolution = int(rng.integers(2, 11)) * 32
    cfg.num_classes = int(rng.integers(1, 21))
    spab = rng.choice(23, size=int(rng.integers(0, 3)), replace=False)
    return cfg.with_attention(spab=spab)


def test_criterion_2(acceptance):
    rng = np.random.default_rng(7)
    configs, checks = 0, 0
    while configs < 20:
        cfg = random_config(rng)
        try:
            base = account(build_graph(cfg, seed=0))
        except GraphBuildError:
            continue
        configs += 1
        for idx in insertion_points(cfg):
            rep = account(build_graph(cfg.with_attention(cfg.spab_indices, {idx}), seed=0))
            assert rep.total_params == base.total_params
            assert rep.total_macs == base.total_macs
            checks += 1
    acceptance(2, f"{configs} configs, {checks} SimAM insertions, all deltas exactly 0")


# -- 3. SPAB parameter delta -----------------------------------------------


def test_criterion_3(acceptance):
    deltas = {}
    for c in (8, 16, 32, 64):
        layer = SpabLayer(c)
        deltas[c] = layer.num_params()
        assert deltas[c] == 3 * c * c * 9
        # and as an edge insertion in a graph whose node 1 has c channels
        cfg = reference_config("toy")
        cfg.nodes[1].out_channels = c
        base = account(build_graph(cfg))
        assert account(build_graph(cfg.with_attention(spab=[1]))).total_params - base.total_params == 3 * c * c * 9
    acceptance(3, "delta params " + ", ".join(f"C={c}: {d}" for c, d in deltas.items()))


# -- 4. reference-scale accounting -----------------------------------------


def test_criterion_4(acceptance):
    ref = reference_config("ecoweednet-n")
    base = account(build_graph(ref))
    best = account(build_graph(ref.with_attention([1, 3], SIMAM_PINNED)))
    acceptance(
        4,
        f"baseline {base.total_params / 1e6:.3f}M; best {best.total_params / 1e6:.3f}M, {best.gflops:.2f} GFLOPs",
    )
    assert abs(base.total_params - 2.6e6) <= 0.15 * 2.6e6
    assert abs(best.total_params - 2.78e6) <= 0.15 * 2.78e6
    assert abs(best.gflops - 9.3) <= 0.20 * 9.3


# -- 5. gradient integrity -------------------------------------------------


def model_loss_check():
    """FD check of detection loss through a small attention-equipped model.

    Early layers see large third derivatives (training-mode batch norm,
    SimAM with a small lambda), so the central-difference truncation error
    at eps=1e-4 is itself ~1e-4; eps=1e-6 keeps it well below the bar.
    """
    cfg = TOY.with_attention([1, 3], SIMAM_PINNED)
    with default_dtype(np.float64):
        model = build_graph(cfg, seed=0)
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 1, size=(2, 3, 64, 64))
    labels = [np.array([[0, 0.3, 0.35, 0.3, 0.25]]), np.array([[1, 0.6, 0.6, 0.4, 0.5], [0, 0.2, 0.8, 0.15, 0.15]])]
    t = assign_targets(labels, 64, 2)
    picked = [model.layers[0].weight, model.spab[1].w1, model.spab[3].w3, model.layers[10].m[0].qkv.weight,
              model.head.levels[0].cls_pred.weight, model.head.levels[1].box_pred.weight]
    with default_dtype(np.float64):
        xin = Parameter(x)
        with GradTape() as tape:
            loss, _ = detection_loss(model(xin), t, 2, 16)
        analytic = tape.gradient(loss, [xin, *picked])

        def scalar(*_):
            return detection_loss(model(Tensor(x)), t, 2, 16)[0].item()

        ana_all, num_all = [], []
        rng = np.random.default_rng(0)
        for arr, ana in zip([x, *[p.data for p in picked]], analytic):
            pos, num = numeric_grad(scalar, [arr], 0, 1e-6, 8, rng)
            ana_all.append(ana.reshape(-1)[pos])
            num_all.append(num)
    ana, num = np.concatenate(ana_all), np.concatenate(num_all)
    return float(np.abs(ana - num).max() / max(np.abs(ana).max(), np.abs(num).max()))


def test_criterion_5(acceptance):
    start = time.perf_counter()
    errors = {}
    for name, (fn, x) in test_tensor.UNARY_CASES.items():
        errors[name] = check_gradients(fn, x)
    for name, fn in test_tensor.BINARY_CASES.items():
        errors[name] = check_gradients(fn, test_tensor.A, test_tensor.B)
    rng = np.random.default_rng(5)
    w = test_tensor.weighted
    errors["matmul"] = check_gradients(lambda a, b: w(ops.matmul(a, b)), rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5)))
    for stride, pad, groups in [(1, 1, 1), (2, 1, 1), (1, 0, 3)]:
        errors[f"conv{stride}{pad}{groups}"] = check_gradients(
            lambda x, k, b: w(ops.conv2d(x, k, b, stride, pad, groups)),
            rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(6, 3 // groups, 3, 3)), rng.normal(size=6))
    for training in (True, False):
        errors[f"batch_norm_{training}"] = check_gradients(
            lambda x, g, b: w(ops.batch_norm(x, g, b, np.zeros(2), np.ones(2), training)),
            rng.normal(size=(3, 2, 3, 3)), rng.normal(size=2), rng.normal(size=2))
    for mode in ("leave-one-out", "whole-channel"):
        cfg = SimAMConfig(lam=0.1, moments_mode=mode)
        errors[f"simam_{mode}"] = check_gradients(lambda x: w(simam_refine(x, cfg)), rng.uniform(-2, 2, size=(2, 2, 3, 3)))

    def spab_fn(x, w1, w2, w3):
        layer = SpabLayer(2)
        layer.w1, layer.w2, layer.w3 = w1, w2, w3
        return w(spab_forward(x, layer))

    errors["spab"] = check_gradients(spab_fn, rng.uniform(-2, 2, size=(1, 2, 4, 4)),
                                     *[rng.uniform(-0.5, 0.5, size=(2, 2, 3, 3)) for _ in range(3)])
    with default_dtype(np.float64):
        blocks = {"conv_bn_act": (ConvBNAct(2, 3, 3, 2), (2, 2, 5, 5)), "c3k2": (C3K2(2, 4, 1, 1.0), (2, 2, 4, 4)),
                  "sppf": (SPPF(4, 2), (2, 4, 5, 5)), "c2psa": (C2PSA(4, 1), (2, 4, 2, 3))}
    for name, (block, shape) in blocks.items():
        errors[name] = check_module_gradients(block, rng.uniform(-2, 2, size=shape), sample=30)
    dfl_target = rng.uniform(0, 15, size=(3, 4))
    errors["dfl_loss"] = check_gradients(lambda x: dfl_loss(x, dfl_target), rng.normal(size=(3, 4, 16)))
    labels = np.array([[0, 0.3, 0.35, 0.25, 0.2], [1, 0.7, 0.65, 0.4, 0.5]])
    targets = assign_targets([labels], 64, 2)
    maps = [rng.normal(size=(1, 66, 64 // s, 64 // s)) for s in (8, 16, 32)]
    errors["detection_loss"] = check_gradients(lambda *p: detection_loss(p, targets, 2, 16)[0], *maps, sample=150)
    errors["model+loss"] = model_loss_check()
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    acceptance(5, f"{len(errors)} checks, worst {worst} {errors[worst]:.1e}, {elapsed:.1f} s")
    assert all(e < 1e-4 for e in errors.values()), {k: v for k, v in errors.items() if v >= 1e-4}
    assert elapsed < 60.0


# -- 6. AP / mAP vs brute force --------------------------------------------


def brute_iou(a, b):
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw, ih = min(ax2, bx2) - max(ax1, bx1), min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def brute_ap(dets_per_image, gts_per_image, cls, thr):
    """Plain-loop matching, then the PR staircase walked point by point."""
    scored = []
    n_gt = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        gts = [g for g in gts if int(g[0]) == cls]
        n_gt += len(gts)
        used = [False] * len(gts)
        for d in sorted([d for d in dets if d.class_id == cls], key=lambda d: -d.confidence):
            best, best_j = thr, -1
            for j, g in enumerate(gts):
                v = brute_iou(d.box, g[1:])
                if not used[j] and v >= best and (best_j < 0 or v > best):
                    best, best_j = v, j
            if best_j >= 0:
                used[best_j] = True
            scored.append((d.confidence, best_j >= 0))
    if n_gt == 0:
        return None if not scored else 0.0
    scored.sort(key=lambda s: -s[0])
    precision = []
    tp = 0
    for k, (_, hit) in enumerate(scored):
        tp += hit
        precision.append(tp / (k + 1))
    return sum(max(precision[k:]) / n_gt for k, (_, hit) in enumerate(scored) if hit)


def random_scene(rng, nc):
    n_img = int(rng.integers(1, 4))
    gts, dets = [], []
    budget = int(rng.integers(0, 13))
    for i in range(n_img):
        g = [[int(rng.integers(nc)), *rng.uniform(0.2, 0.8, size=2), *rng.uniform(0.05, 0.3, size=2)]
             for _ in range(int(rng.integers(0, 4)))]
        d = []
        share = budget if i == n_img - 1 else int(rng.integers(0, budget + 1))
        budget -= share
        for _ in range(share):
            if g and rng.uniform() < 0.7:
                src = g[int(rng.integers(len(g)))]
                box = np.abs(np.array(src[1:]) + rng.normal(0, 0.03, size=4))
                cls = src[0] if rng.uniform() < 0.85 else int(rng.integers(nc))
            else:
                box = np.array([*rng.uniform(0.2, 0.8, size=2), *rng.uniform(0.05, 0.3, size=2)])
                cls = int(rng.integers(nc))
            d.append(DetectionBox(int(cls), float(rng.uniform()), tuple(box)))
        gts.append(np.array(g).reshape(-1, 5))
        dets.append(d)
    return dets, gts


def test_criterion_6(acceptance):
    assert average_precision([True, False], [0.9, 0.8], 1) == 1.0
    assert average_precision([False, True], [0.9, 0.8], 1) == 0.5
    assert average_precision([], [], 2) == 0.0
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(500):
        nc = int(rng.integers(1, 4))
        dets, gts = random_scene(rng, nc)
        stats = class_statistics(dets, gts, nc)
        per_thr = []
        for ti, thr in enumerate(IOU_THRESHOLDS):
            row = []
            for k in range(nc):
                ref = brute_ap(dets, gts, k, thr)
                got = stats.ap[k, ti]
                if ref is None:
                    assert np.isnan(got)
                else:
                    worst = max(worst, abs(got - ref))
                row.append(np.nan if ref is None else ref)
            per_thr.append(row)
        ref_ap = np.array(per_thr).T
        valid = ~np.isnan(ref_ap[:, 0])
        m50, m5095 = map_range(dets, gts, nc)
        ref50 = ref_ap[valid, 0].mean() if valid.any() else 0.0
        ref5095 = ref_ap[valid].mean(axis=1).mean() if valid.any() else 0.0
        worst = max(worst, abs(m50 - ref50), abs(m5095 - ref5095))
    acceptance(6, f"500 scenes, max |AP - oracle| = {worst:.1e}; hand examples exact")
    assert worst < 1e-9


# -- training-based criteria -----------------------------------------------


def held_out(seed, n=50, **kw):
    return synth_corpus(10_000 + seed, n, **kw)


@pytest.fixture(scope="module")
def smoke_runs():
    """Baseline and SimAM toy models trained on 200 images, for 3 seeds."""
    runs = {}
    for seed in (0, 1, 2):
        corpus = synth_corpus(seed, 200)
        test = held_out(seed)
        for name, cfg in (("base", TOY), ("simam", TOY.with_attention(simam=SIMAM_PINNED))):
            start = time.perf_counter()
            res = train(cfg, corpus, seed=seed, settings=TrainSettings(epochs=EPOCHS),
                        val_samples=test if seed == 0 and name == "base" else None)
            runs[seed, name] = {
                "history": res.history,
                "seconds": time.perf_counter() - start,
                "map50": evaluate_model(res.model, test).map50,
            }
    return runs


def test_criterion_7(acceptance, smoke_runs):
    run = smoke_runs[0, "base"]
    hist = run["history"]
    best = max(hist, key=lambda h: h.map50)
    first = hist[0]
    drops = {k: 1 - getattr(best, k) / getattr(first, k) for k in ("box_loss", "cls_loss", "dfl_loss")}
    acceptance(
        7,
        f"best mAP50 {best.map50:.3f} at epoch {best.epoch}, loss drops "
        + ", ".join(f"{k.split('_')[0]} {v:.0%}" for k, v in drops.items())
        + f", {run['seconds']:.0f} s",
    )
    assert best.map50 >= 0.80
    assert all(d >= 0.5 for d in drops.values())
    assert run["seconds"] < 30 * 60


def test_criterion_8(acceptance, smoke_runs):
    base = [smoke_runs[s, "base"]["map50"] for s in (0, 1, 2)]
    sim = [smoke_runs[s, "simam"]["map50"] for s in (0, 1, 2)]
    acceptance(8, f"mean mAP50 simam {np.mean(sim):.3f} vs base {np.mean(base):.3f} "
                  f"(per seed {', '.join(f'{a:.3f}/{b:.3f}' for a, b in zip(sim, base))})")
    assert np.mean(sim) >= np.mean(base) - 0.02


def test_criterion_9(acceptance):
    corpus = synth_corpus(0, 200, objects_per_image=(1, 1))
    res = train(TOY, corpus, seed=0, settings=TrainSettings(epochs=EPOCHS))
    hits, in_range = 0, True
    samples = held_out(0, objects_per_image=(1, 1))
    for s in samples:
        cls, cx, cy, w, h = s.labels[0]
        sal = gradcam_pp(res.model, s.image, int(cls))
        in_range &= bool(sal.heat.min() >= 0.0 and sal.heat.max() <= 1.0)
        r, c = peak(sal)
        size = s.image.shape[1]
        x, y = (c + 0.5) / size, (r + 0.5) / size
        hits += abs(x - cx) <= w / 2 and abs(y - cy) <= h / 2
    acceptance(9, f"peak inside GT box on {hits}/{len(samples)} images, all maps in [0,1]: {in_range}")
    assert hits >= 0.8 * len(samples)
    assert in_range


# -- 10. determinism -------------------------------------------------------


def test_criterion_10(acceptance, tmp_path):
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert cli_main(["train", "--synthetic", "24", "--epochs", "2", "--seed", "3", "--out", str(d / "train")]) == 0
        assert cli_main(["eval", "--checkpoint", str(d / "train" / "model.ckpt"), "--synthetic", "24",
                         "--seed", "3", "--out", str(d / "eval")]) == 0
        assert cli_main(["split", "--synthetic", "30", "--kfolds", "5", "--seed", "7", "--out", str(d / "split")]) == 0
        outputs.append({
            "metrics": (d / "train" / "metrics.txt").read_bytes(),
            "checkpoint": (d / "train" / "model.ckpt").read_bytes(),
            "report": (d / "eval" / "report.kv").read_bytes() + (d / "eval" / "report.txt").read_bytes(),
            "folds": (d / "split" / "folds.txt").read_bytes(),
        })
    same = {k: outputs[0][k] == outputs[1][k] for k in outputs[0]}
    ckpt_path = tmp_path / "a" / "train" / "model.ckpt"
    model, ckpt = load_model(ckpt_path)
    save_checkpoint(tmp_path / "resaved.ckpt", model, ckpt.config_text, ckpt.metadata)
    same["checkpoint_round_trip"] = (tmp_path / "resaved.ckpt").read_bytes() == ckpt_path.read_bytes()
    same["decode_encode"] = encode_checkpoint(load_checkpoint(ckpt_path)) == ckpt_path.read_bytes()
    acceptance(10, ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert all(same.values())
