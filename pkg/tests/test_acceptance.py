"""Acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (with the measured numbers and wall time)
that is printed in the terminal summary, then asserts. The desk benchmark
(criteria 7 and 10) shares one session fixture and takes roughly 15 minutes.
"""
import json
import time

import numpy as np
import pytest
from scipy import stats

from asp_fscil import checkpoint as C
from asp_fscil import data as D
from asp_fscil import tensor as T
from asp_fscil.cli import main
from asp_fscil.exceptions import FormatError
from asp_fscil.learner import (ABLATIONS, Ablation, ASPModel, OptimConfig, evaluate,
                               incremental_step, train_base_task)
from asp_fscil.metrics import a_avg, hacc, mean_report_value, pd
from asp_fscil.objective import LossConfig, gaussian_kl_logvar
from asp_fscil.prompts import Hyperparams, compute_p_avg, ema_update, make_tsp
from asp_fscil.prototypes import PROTOTYPICAL, PrototypeClassifier
from asp_fscil.runner import DataSource, RunConfig, build_backbone, prepare_data, run_experiment
from asp_fscil.vit import ViTConfig, VisionTransformer, prompt_attention_spread

from conftest import RESULTS, tiny_run_config

pytestmark = pytest.mark.acceptance


def record(n, title, ok, detail, seconds, limit=None):
    timing = f"{seconds:.1f}s" + (f" (limit {limit:.0f}s)" if limit else "")
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}; {timing}")


# ---------------------------------------------------------------------------

def test_c01_metric_arithmetic():
    t0 = time.perf_counter()
    row = [92.2, 90.7, 90.0, 88.7, 88.7, 88.2, 88.2, 87.8, 86.7]
    avg, drop = a_avg(row), pd(row[0], row[-1])
    ok = abs(avg - 89.0) <= 0.05 and abs(drop - 5.5) <= 0.05
    rng = np.random.default_rng(0)
    for _ in range(1000):
        b, n = rng.uniform(0, 1, 2)
        if rng.random() < 0.05:
            b = 0.0
        h = hacc(b, n)
        ok &= abs(h - hacc(n, b)) < 1e-15
        ok &= min(b, n) - 1e-12 <= h <= max(b, n) + 1e-12
        ok &= h <= (b + n) / 2 + 1e-12
        ok &= (h == 0.0) if min(b, n) == 0 else abs(h - stats.hmean([b, n])) < 1e-12
    dt = time.perf_counter() - t0
    ok &= dt < 1.0
    record(1, "metric arithmetic", ok, f"a_avg {avg:.3f}, pd {drop:.3f}, 1000 hacc trials", dt, 1)
    assert ok


def test_c02_attention_uniformity_over_tied_prompts():
    t0 = time.perf_counter()
    cfg = ViTConfig()  # 6 layers, the full-size geometry
    vit = VisionTransformer(cfg, T.make_rng(0, 1)).freeze()
    ds = D.generate(4, 15, seed=0)
    model = ASPModel(vit, [0, 1, 2, 3], Hyperparams(encoder_hidden=64), LossConfig(), Ablation(),
                     T.make_rng(0, 2))
    x = ds.images[:60]

    def spread():
        prompts, _ = model.build_prompts(model.backbone_features(x), len(x))
        with T.no_grad():
            _, acts = vit.forward(x, prompts, keep_activations=True)
        return prompt_attention_spread(acts, 0, model.hyper.prompt_length)

    model.refresh_p_avg(x)
    at_init = spread()
    train_base_task(model, ds.images, ds.labels, OptimConfig(epochs=5, batch_size=30), T.make_rng(0, 3))
    trained = spread()
    dt = time.perf_counter() - t0
    ok = at_init < 1e-6 and trained < 1e-6 and dt < 120
    record(2, "tied-prompt attention uniformity", ok,
           f"spread {at_init:.2e} at init, {trained:.2e} after 5 epochs, 60 inputs", dt, 120)
    assert ok


def test_c03_kl_closed_form_vs_monte_carlo():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst, n = 0.0, 100_000
    for _ in range(20):
        d = int(rng.integers(1, 9))
        mu = rng.normal(0, 1, d)
        logvar = rng.uniform(-1.5, 1.0, d)
        closed = float(gaussian_kl_logvar(T.Tensor(mu[None]), T.Tensor(logvar[None])).data[0])
        sd = np.exp(0.5 * logvar)
        z = mu + sd * rng.standard_normal((n, d))
        diff = stats.norm.logpdf(z, mu, sd).sum(1) - stats.norm.logpdf(z).sum(1)
        se = diff.std(ddof=1) / np.sqrt(n)
        worst = max(worst, abs(closed - diff.mean()) / se)
    dt = time.perf_counter() - t0
    ok = worst < 3 and dt < 30
    record(3, "closed-form KL vs Monte Carlo", ok, f"worst deviation {worst:.2f} SE over 20 configs", dt, 30)
    assert ok


def _relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if scale == 0 else float(np.linalg.norm(analytic - numeric) / scale)


def test_c04_full_loss_gradient_check():
    t0 = time.perf_counter()
    cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=16, num_layers=2, num_heads=2,
                    prompt_layers=(0, 1))
    vit = VisionTransformer(cfg, T.make_rng(4, 1)).freeze()
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, (4, 8, 8, 3))
    y = np.array([0, 1, 0, 1])
    model = ASPModel(vit, [0, 1], Hyperparams(encoder_hidden=8), LossConfig(), Ablation(),
                     T.make_rng(4, 2)).astype(np.float64)
    model.p_avg.blocks = {l: rng.normal(0, 0.1, (3, 16)) for l in (0, 1)}
    # move the variance heads off zero so their gradients are exercised generically
    for k, p in model.encoder.params.items():
        if "logvar" in k:
            p.data = rng.normal(0, 0.05, p.shape)
    noise = model.draw_noise(T.make_rng(4, 3), x.astype(np.float32))
    noise.inputs = noise.inputs.astype(np.float64)
    noise.prompts = {l: v.astype(np.float64) for l, v in noise.prompts.items()}
    anchors = rng.normal(0, 1, (4, 16))
    params = model.trainable_parameters()
    loss = lambda: model.step_loss(x, y, noise, anchors)
    T.zero_grads(params)
    T.backward(loss())
    errors, h = {}, 1e-4
    for p in params:
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat, grad = p.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss().item()
            flat[i] = orig - h
            fm = loss().item()
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * h)
        errors[p.name] = _relative_error(analytic, numeric)
    dt = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and dt < 60 and len(errors) == len(params)
    record(4, "full-loss gradient check (float64)", ok,
           f"{len(params)} tensors, worst {worst} rel err {errors[worst]:.2e}", dt, 60)
    assert ok


def test_c05_freeze_and_rehearsal_discipline(monkeypatch):
    t0 = time.perf_counter()
    cfg = tiny_run_config(num_tasks=4)
    dataset, stream = prepare_data(cfg)
    source = DataSource(dataset)
    backbone, _ = build_backbone(cfg, dataset, stream, source)
    before = {k: v.copy() for k, v in backbone.state_dict().items()}
    calls = {"backward": 0, "sgd": 0}
    snaps, sizes, reads_at_base_end = [], [], []

    def learned(m):
        out = [p.data.copy() for p in m.tip.parameters() + m.encoder.parameters()]
        return out + [m.classifier.weight.data[:cfg.split.base_classes].copy()]

    def on_task(t, m):
        if t == 0:
            reads_at_base_end.append(len(source.log))
            # from here on, count any optimisation call
            real_backward, real_sgd = T.backward, T.sgd_step
            monkeypatch.setattr(T, "backward", lambda *a, **k: (calls.__setitem__("backward", calls["backward"] + 1), real_backward(*a, **k))[1])
            monkeypatch.setattr(T, "sgd_step", lambda *a, **k: (calls.__setitem__("sgd", calls["sgd"] + 1), real_sgd(*a, **k))[1])
        snaps.append(learned(m))
        sizes.append(m.classifier.num_classes)

    res = run_experiment(cfg, dataset=dataset, backbone=backbone, source=source, on_task=on_task)
    a = all(v.tobytes() == before[k].tobytes() for k, v in backbone.state_dict().items())
    b = calls == {"backward": 0, "sgd": 0} and all(
        all(x.tobytes() == y.tobytes() for x, y in zip(snaps[0], s)) for s in snaps[1:])
    c = source.reads_of(np.concatenate([stream.pretrain_idx, stream.base.train_idx]),
                        after=reads_at_base_end[0]) == 0
    want = [cfg.split.base_classes + t * cfg.split.ways for t in range(cfg.split.num_tasks + 1)]
    d = sizes == want == res.classifier_sizes
    dt = time.perf_counter() - t0
    ok = a and b and c and d
    record(5, "freeze and rehearsal discipline", ok,
           f"(a) backbone untouched {a}, (b) no updates {b}, (c) no base reads {c}, (d) K={sizes} {d}", dt)
    assert ok


def test_c06_ema_and_mixing_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    ident = alpha_one = True
    worst = 0.0
    for trial in range(100):
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 33)))
        # crafted tensors: float32 values of magnitude below 0.5
        old = compute_p_avg([{0: rng.uniform(-0.5, 0.5, (3,) + shape).astype(np.float32)}])
        new = [{0: rng.uniform(-0.5, 0.5, (5,) + shape).astype(np.float32)}]
        p = old.blocks[0]
        mu = rng.uniform(-0.5, 0.5, (4,) + shape).astype(np.float32)
        big = rng.normal(0, 10, (4,) + shape).astype(np.float32)
        ident &= ema_update(old, [{0: big}], 1.0).blocks[0].tobytes() == p.tobytes()
        alpha_one &= make_tsp(big, p, 1.0).tobytes() == np.broadcast_to(p, big.shape).tobytes()
        a, b = (0.8, 0.99) if trial < 50 else tuple(rng.uniform(0, 1, 2))
        mix = make_tsp(mu, p, float(a)).astype(np.float64)
        ref = a * p.astype(np.float64) + (1 - a) * mu.astype(np.float64)
        blend = ema_update(old, new, float(b)).blocks[0].astype(np.float64)
        ref_b = b * p.astype(np.float64) + (1 - b) * new[0][0].astype(np.float64).mean(0)
        worst = max(worst, np.abs(mix - ref).max(), np.abs(blend - ref_b).max())
    dt = time.perf_counter() - t0
    ok = ident and alpha_one and worst <= 1e-7
    record(6, "EMA and mixing algebra", ok,
           f"beta=1 bitwise {ident}, alpha=1 bitwise {alpha_one}, worst blend error {worst:.1e}", dt)
    assert ok


# ---------------------------------------------------------------------------
# desk benchmark: 5 ablations x 3 seeds, plus K in {1, 10} reusing the base task

SEEDS = (0, 1, 2)
SHOTS = (1, 5, 10)


@pytest.fixture(scope="session")
def desk():
    t0 = time.perf_counter()
    cfg = RunConfig()
    ablations = {name: [] for name in ABLATIONS}
    shots = {k: [] for k in SHOTS}
    for seed in SEEDS:
        scfg = cfg.replace(seed=seed)
        dataset, stream = prepare_data(scfg)
        backbone, _ = build_backbone(scfg, dataset, stream)
        base_full = None
        for name, ab in ABLATIONS.items():
            res = run_experiment(scfg.replace(ablation=ab), dataset=dataset, backbone=backbone)
            ablations[name].append(res.report)
            if name == "full":
                base_full = res.base_model
                shots[scfg.split.shots].append(res.report)
        for k in SHOTS:
            if k == scfg.split.shots:
                continue
            split = dict(scfg.to_dict()["split"], shots=k)
            kcfg = scfg.replace(split=split)
            res = run_experiment(kcfg, dataset=dataset, backbone=backbone, base_model=base_full)
            shots[k].append(res.report)
    return {"ablations": ablations, "shots": shots, "seconds": time.perf_counter() - t0}


def test_c07_desk_benchmark_ablation_ordering(desk):
    ab = desk["ablations"]
    means = {n: mean_report_value(r, "a_avg") for n, r in ab.items()}
    h_full, h_tsp = mean_report_value(ab["full"], "hacc"), mean_report_value(ab["no_tsp"], "hacc")
    beaten = [n for n in ("no_tip", "no_tsp", "no_anchor", "diff_tip") if not means["full"] > means[n]]
    ok = not beaten and h_full > h_tsp
    detail = ", ".join(f"{n} {100 * v:.2f}" for n, v in means.items())
    detail += f"; HAcc full {100 * h_full:.2f} vs no_tsp {100 * h_tsp:.2f}"
    if beaten:
        detail += f"; full not above {beaten}"
    record(7, "desk benchmark A_avg ordering (3 seeds)", ok, detail, desk["seconds"], 1200)
    assert ok


def test_c08_prediction_and_evaluation_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    ids = rng.permutation(50)[:10]
    clf = PrototypeClassifier(ids, 12, weight=rng.normal(0, 1, (10, 12)), mode=PROTOTYPICAL)
    feats = rng.normal(0, 1, (100, 12))
    pred = clf.predict(feats)
    exhaustive = []
    for f in feats:
        scores = [float(np.dot(f, w) / (np.linalg.norm(f) * np.linalg.norm(w))) for w in clf.weight.data.astype(np.float64)]
        exhaustive.append(ids[int(np.argmax(scores))])
    a = np.array_equal(pred, exhaustive)
    cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=16, num_layers=2, num_heads=2, prompt_layers=(0, 1))
    vit = VisionTransformer(cfg, T.make_rng(8)).freeze()
    ds = D.generate(3, 24, image_size=8, seed=8)
    model = ASPModel(vit, [0, 1, 2], Hyperparams(encoder_hidden=8), LossConfig(), Ablation(), T.make_rng(8, 1))
    train_base_task(model, ds.images[::2], ds.labels[::2], OptimConfig(epochs=1, batch_size=8), T.make_rng(8, 2))
    x, yv = ds.images[1::2][:30], ds.labels[1::2][:30]
    res = evaluate(model, x, yv)
    p = model.predict(x)
    recount = sum(1 for i in range(30) if p[i] == yv[i]) / 30
    b = res.accuracy == recount and res.num_samples == 30
    dt = time.perf_counter() - t0
    ok = a and b
    record(8, "predict/evaluate exactness", ok,
           f"100x10 argmax identical {a}, evaluate {res.accuracy:.4f} vs recount {recount:.4f}", dt)
    assert ok


def test_c09_determinism_and_file_formats(tmp_path):
    t0 = time.perf_counter()
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps(tiny_run_config().to_dict()))
    for name in ("a", "b"):
        assert main(["run", "--config", str(cfgp), "--seed", "3", "--out-dir", str(tmp_path / name),
                     "--no-resume"]) == 0
    same_report = (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    ds = D.generate(5, 6, image_size=8, seed=9)
    D.save(ds, str(tmp_path / "d.aspd"))
    raw = (tmp_path / "d.aspd").read_bytes()
    D.save(D.load(str(tmp_path / "d.aspd")), str(tmp_path / "e.aspd"))
    aspd_rt = D.load(str(tmp_path / "d.aspd")) == ds and (tmp_path / "e.aspd").read_bytes() == raw
    ck = (tmp_path / "a" / "ckpt_task2.aspc").read_bytes()
    model, extra = C.loads(ck)
    ckpt_rt = C.dumps(model, extra) == ck
    corrupt_ok = True
    for bad in (raw[:-4], b"XXXX" + raw[4:]):
        try:
            D.loads(bad)
            corrupt_ok = False
        except FormatError:
            pass
    for bad in (ck[:-9], ck[:50] + bytes([ck[50] ^ 0xFF]) + ck[51:]):
        try:
            C.loads(bad)
            corrupt_ok = False
        except FormatError:
            pass
    (tmp_path / "bad.aspd").write_bytes(raw[:-4])
    (tmp_path / "bad.aspc").write_bytes(ck[:-9])
    codes = (main(["run", "--config", str(cfgp), "--seed", "0", "--out-dir", str(tmp_path / "c"),
                   "--data", str(tmp_path / "bad.aspd")]),
             main(["metrics", "--checkpoint", str(tmp_path / "bad.aspc")]))
    dt = time.perf_counter() - t0
    ok = same_report and aspd_rt and ckpt_rt and corrupt_ok and codes == (3, 3)
    record(9, "determinism and file formats", ok,
           f"report bytes equal {same_report}, ASPD rt {aspd_rt}, ASPC rt {ckpt_rt}, "
           f"corruption detected {corrupt_ok}, exit codes {codes}", dt)
    assert ok


def test_c10_shots_monotonicity(desk):
    means = {k: mean_report_value(r, "a_avg") for k, r in desk["shots"].items()}
    ks = sorted(means)
    ok = all(means[a] <= means[b] for a, b in zip(ks, ks[1:]))
    record(10, "A_avg non-decreasing in shots", ok,
           ", ".join(f"K={k} {100 * means[k]:.2f}" for k in ks), 0.0)
    assert ok
