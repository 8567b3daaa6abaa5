"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end criteria (7, 8, 10) train real models and take several
minutes on one CPU core; they are marked ``slow``.
"""

import json
import time

import numpy as np
import pytest
from _oracles import dine_operator, interp_operator, rel_error, repa_operator, transposed_operator, unpool_operator

from sphunet import autodiff as ad
from sphunet import cli, dataio, icosphere, layers as L, models, training
from sphunet import neighborhood as nb

F64 = np.float64


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def test_criterion_01_mesh_hierarchy(report):
    icosphere.generate.cache_clear()
    expected = [12, 42, 162, 642, 2562, 10242, 40962, 163842]
    t = time.perf_counter()
    counts = []
    for level in range(8):
        mesh = icosphere.generate(level)
        icosphere.validate(mesh)
        counts.append(mesh.n_vertices)
    dt = time.perf_counter() - t
    report(1, counts == expected and dt < 10, f"vertex counts {counts}, {dt:.2f} s (< 10 s)")


def test_criterion_02_neighbor_table(report):
    t = time.perf_counter()
    problems = []
    for level in range(1, 6):
        mesh = icosphere.generate(level)
        a, b = nb.build_dine_table(mesh), nb.build_dine_table(mesh)
        if not np.array_equal(a.slots, b.slots):
            problems.append(f"level {level} nondeterministic")
        if a.pentagon_flags.sum() != 12:
            problems.append(f"level {level} has {a.pentagon_flags.sum()} pentagon rows")
        hexa = np.flatnonzero(~a.pentagon_flags)
        ring = a.slots[hexa, 1:]
        if not np.all(np.sort(ring, axis=1)[:, 1:] != np.sort(ring, axis=1)[:, :-1]):
            problems.append(f"level {level} hexagon rows with repeated neighbors")
        # recompute tangent angles from scratch; they must increase along the row
        c = mesh.vertices[hexa]
        ref = np.where(np.abs(c[:, :1]) > nb.AXIS_FALLBACK, [[0.0, 1.0, 0.0]], [[1.0, 0.0, 0.0]])
        e1 = ref - np.sum(ref * c, axis=1, keepdims=True) * c
        e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
        e2 = np.cross(c, e1)
        d = mesh.vertices[ring] - c[:, None, :]
        ang = np.arctan2(np.einsum("nkj,nj->nk", d, e2), np.einsum("nkj,nj->nk", d, e1)) % (2 * np.pi)
        ang[ang > 2 * np.pi - 1e-6] = 0.0
        if not np.all(np.diff(ang, axis=1) > 0):
            problems.append(f"level {level} rows not angle-sorted")
    dt = time.perf_counter() - t
    report(2, not problems and dt < 10, f"{'; '.join(problems) or 'all rows valid'}, {dt:.2f} s (< 10 s)")


def test_criterion_03_dense_operator_oracles(report):
    t = time.perf_counter()
    h = nb.Hierarchy()
    t1, sampler, parents = h.table(1), h.sampler(1), h.parents(1)
    rng = np.random.default_rng(0)
    d, f, trials = 3, 2, 20
    worst = {}
    with ad.precision(F64):
        ops = {
            "dine_conv": lambda w: (dine_operator(t1.slots, w, d, f), lambda x: L.dine_conv(x, w, None, t1), (42, d)),
            "strided_dine_conv": lambda w: (
                dine_operator(t1.slots, w, d, f, rows=12), lambda x: L.strided_dine_conv(x, w, None, t1), (42, d)
            ),
            "transposed_conv": lambda w: (transposed_operator(t1.slots, w, d, f), lambda y: L.transposed_conv(y, w, t1), (12, f)),
        }
        for name, make in ops.items():
            w = rng.normal(size=(7 * d, f))
            a, fn, shape = make(w)
            errs = []
            for _ in range(trials):
                x = rng.normal(size=shape)
                errs.append(rel_error(fn(x).data.ravel(), a @ x.ravel()))
            worst[name] = max(errs)
        w = rng.normal(size=(9 * d, f))
        a = repa_operator(sampler.weights, sampler.anchors, w, d, f)
        worst["repa_conv"] = max(
            rel_error(L.repa_conv(x, sampler, w, None).data.ravel(), a @ x.ravel())
            for x in (rng.normal(size=(42, d)) for _ in range(trials))
        )
        a = interp_operator(parents, 12, d)
        worst["interp_upsample"] = max(
            rel_error(L.interp_upsample(y, parents).data.ravel(), a @ y.ravel())
            for y in (rng.normal(size=(12, d)) for _ in range(trials))
        )
        _, idx = L.pool(rng.normal(size=(42, d)), t1, "max")
        a = unpool_operator(t1.slots, idx, 42)
        worst["max_unpool"] = max(
            rel_error(L.max_unpool(y, idx, t1).data.ravel(), a @ y.ravel())
            for y in (rng.normal(size=(12, d)) for _ in range(trials))
        )
    dt = time.perf_counter() - t
    ok = max(worst.values()) <= 1e-10 and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(3, ok, f"max relative error over {trials} inputs: {detail} (<= 1e-10), {dt:.1f} s")


def test_criterion_04_adjointness(report):
    h = nb.Hierarchy()
    rng = np.random.default_rng(1)
    worst = 0.0
    with ad.precision(F64):
        for trial in range(100):
            t = h.table(1 + trial % 3)
            n = t.n_vertices
            d, f = rng.integers(1, 5, size=2)
            w = rng.normal(size=(7 * d, f))
            x, y = rng.normal(size=(n, d)), rng.normal(size=(L.coarse_count(n), f))
            lhs = float(np.sum(L.strided_dine_conv(x, w, None, t).data * y))
            rhs = float(np.sum(x * L.transposed_conv(y, w, t).data))
            worst = max(worst, abs(lhs - rhs) / abs(lhs))
    report(4, worst <= 1e-10, f"max relative gap {worst:.1e} over 100 trials at levels 1-3 (<= 1e-10)")


def _layer_checks(h, rng):
    t = h.table(2)
    x = ad.Parameter(rng.normal(size=(162, 3)))
    proj = {}

    def p(shape):
        return proj.setdefault(shape, ad.Value(rng.normal(size=shape)))

    def w(*shape):
        return ad.Parameter(rng.normal(size=shape))

    wd, bd = w(21, 4), w(4)
    wr, br = w(27, 4), w(4)
    yt, wt = w(42, 4), w(21, 4)
    wv, bv = w(3, 5), w(5)
    bn = L.BatchNorm(3)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[:] = rng.normal(size=3)

    def bn_train():
        bn.train()
        bn.running_mean[:], bn.running_var[:] = 0.0, 1.0
        return ad.sum(ad.mul(bn(x), p((162, 3))))

    return {
        "dine_conv": (lambda: ad.sum(ad.mul(L.dine_conv(x, wd, bd, t), p((162, 4)))), [x, wd, bd]),
        "strided_dine_conv": (lambda: ad.sum(ad.mul(L.strided_dine_conv(x, wd, bd, t), p((42, 4)))), [x, wd, bd]),
        "repa_conv": (lambda: ad.sum(ad.mul(L.repa_conv(x, h.sampler(2), wr, br), p((162, 4)))), [x, wr, br]),
        "transposed_conv": (lambda: ad.sum(ad.mul(L.transposed_conv(yt, wt, t), p((162, 3)))), [yt, wt]),
        "vertexwise_linear": (lambda: ad.sum(ad.mul(L.vertexwise_linear(x, wv, bv), p((162, 5)))), [x, wv, bv]),
        "batch_norm": (bn_train, [x, bn.gamma, bn.beta]),
    }


def test_criterion_05_gradient_checks(report):
    t = time.perf_counter()
    h = nb.Hierarchy()
    rng = np.random.default_rng(2)
    worst, failed = {}, []
    with ad.precision(F64):
        for name, (fn, inputs) in _layer_checks(h, rng).items():
            rep = ad.gradcheck(fn, inputs, eps=1e-5, tolerance=1e-4, n_coords=20)
            worst[name] = rep.max_rel_error
            if not rep.passed:
                failed.append(name)
    for variant in models.VARIANTS:
        kw = {} if variant == "naive_dine" else {"depth": 2}
        m = models.build(models.ModelSpec(variant, 3, 4, 1, base_channels=4, **kw), h, dtype=F64)
        x = rng.normal(size=(42, 3))
        y = rng.integers(0, 4, 42)
        with ad.precision(F64):
            m(x)
            m.eval()
            rep = ad.gradcheck(lambda: L.cross_entropy(m(x), y), m.parameters(), eps=1e-5, tolerance=1e-4, n_coords=20)
        worst[variant] = rep.max_rel_error
        if not rep.passed:
            failed.append(variant)
    dt = time.perf_counter() - t
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(5, not failed and dt < 300, f"max relative error {detail}; failed {failed or 'none'}; {dt:.0f} s (< 300 s)")


def test_criterion_06_architecture_counts(report):
    h = nb.Hierarchy()
    counts = {}
    for v in ("unet18_dine", "unet18_repa"):
        counts[v] = models.conv_layer_count(models.build(models.ModelSpec(v, 3, 36, 5), h))["convolution_class"]
    naive = models.conv_layer_count(models.build(models.ModelSpec("naive_dine", 3, 36, 5), h))
    p18 = models.param_count(models.build(models.ModelSpec("unet18_dine", 3, 36, 5), h))
    pu = models.param_count(models.build(models.ModelSpec("unet", 3, 36, 5), h))
    ok = (
        all(c == 18 for c in counts.values())
        and naive["conv_blocks"] == 16
        and p18["total"] < pu["total"]
        and p18["total"] == p18["shape_walk"]
        and pu["total"] == pu["shape_walk"]
    )
    report(
        6,
        ok,
        f"U-Net18 conv layers {counts}; Naive-DiNe conv blocks {naive['conv_blocks']}; "
        f"params unet18_dine {p18['total']:,} < unet {pu['total']:,}; formula == shape walk",
    )


# ---------------------------------------------------------------------------
# end-to-end criteria


@pytest.fixture(scope="module")
def parcellation(tmp_path_factory):
    root = tmp_path_factory.mktemp("parc")
    argv = ["data", "synth", "--task", "parcellation", "--level", "4", "--n", "80", "--k", "8"]
    assert cli.main(argv + ["--split", "60,0,20", "--out", str(root / "data"), "--seed", "0"]) == 0
    return root, root / "data" / "manifest.json"


def _train_parcellation(root, manifest, name, *extra):
    ck = root / f"{name}.sunw"
    t = time.perf_counter()
    argv = ["train", "--task", "parcellation", "--data", str(manifest), "--out", str(ck), "--seed", "0", "--threads", "1"]
    assert cli.main(argv + list(extra)) == 0
    dt = time.perf_counter() - t
    rep = cli.evaluate(ck, dataio.load_dataset(manifest), "test")
    return ck, rep, dt


@pytest.fixture(scope="module")
def unet18_run(parcellation):
    root, manifest = parcellation
    return _train_parcellation(root, manifest, "unet18_a", "--variant", "unet18_dine")


@pytest.mark.slow
def test_criterion_07_parcellation(report, parcellation, unet18_run):
    root, manifest = parcellation
    _, rep_u, dt_u = unet18_run
    _, rep_s, dt_s = _train_parcellation(
        root, manifest, "segnet", "--variant", "segnet_inter", "--base-channels", "32", "--depth", "4"
    )
    ok = rep_u.mean_dice >= 0.90 and rep_u.mean_dice >= rep_s.mean_dice and dt_u < 1800
    report(
        7,
        ok,
        f"unet18_dine test Dice {rep_u.mean_dice:.4f} (>= 0.90) in {dt_u:.0f} s (< 1800 s); "
        f"segnet_inter {rep_s.mean_dice:.4f} (<= unet18_dine)",
    )


@pytest.mark.slow
def test_criterion_08_regression(report, tmp_path):
    data = tmp_path / "data"
    argv = ["data", "synth", "--task", "regression", "--level", "3", "--n", "100", "--split", "60,20,20"]
    assert cli.main(argv + ["--out", str(data), "--seed", "0"]) == 0
    manifest = data / "manifest.json"
    ds = dataio.load_dataset(manifest)
    train, test = ds.fold("train"), ds.fold("test")
    coef = models.linear_baseline_fit(np.stack([s.features for s in train]), np.stack([s.target for s in train]))
    pred = models.linear_baseline_predict(coef, np.stack([s.features for s in test]))
    base_mae, base_mre = training.regression_metrics(list(pred), [s.target for s in test])

    ck = tmp_path / "reg.sunw"
    t = time.perf_counter()
    argv = ["train", "--task", "regression", "--data", str(manifest), "--out", str(ck), "--variant", "unet"]
    assert cli.main(argv + ["--depth", "2", "--seed", "0", "--threads", "1"]) == 0
    dt = time.perf_counter() - t
    cfg = json.load(open(f"{ck}.report.json"))["config"]
    assert (cfg["optimizer"], cfg["lr"], cfg["schedule"], cfg["factor"], cfg["every"], cfg["epochs"]) == (
        "adam", 1e-4, "step", 10.0, 3, 15,
    )
    rep = cli.evaluate(ck, ds, "test")
    ok = rep.mre < base_mre and dt < 1800
    report(
        8,
        ok,
        f"U-Net test MRE {rep.mre:.2f}% (MAE {rep.mae:.4f} mm) vs linear baseline MRE {base_mre:.2f}% "
        f"(MAE {base_mae:.4f} mm), {dt:.0f} s (< 1800 s)",
    )


def test_criterion_09_benchmark(report):
    dine = cli.bench_conv(5, 64, 64, "dine", iterations=10)
    repa = cli.bench_conv(5, 64, 64, "repa", iterations=10)
    ratio = dine["throughput_vps"] / repa["throughput_vps"]
    ok = ratio >= 2 and dine["peak_bytes"] < repa["peak_bytes"]
    report(
        9,
        ok,
        f"DiNe {dine['throughput_vps']:.3g} vs RePa {repa['throughput_vps']:.3g} vertices/s (ratio {ratio:.2f} >= 2); "
        f"working set {dine['peak_bytes'] / 2**20:.1f} MiB < {repa['peak_bytes'] / 2**20:.1f} MiB",
    )


@pytest.mark.slow
def test_criterion_10_determinism(report, parcellation, unet18_run):
    root, manifest = parcellation
    ck_a, _, _ = unet18_run
    ck_b, _, _ = _train_parcellation(root, manifest, "unet18_b", "--variant", "unet18_dine")
    same = {}
    for label, suffix in (("checkpoint", ""), ("log", ".log.jsonl")):
        same[label] = open(f"{ck_a}{suffix}", "rb").read() == open(f"{ck_b}{suffix}", "rb").read()
    epochs = len(open(f"{ck_a}.log.jsonl").read().splitlines())
    report(10, all(same.values()), f"bit-identical across two runs: {same} ({epochs} logged epochs)")

