"""Acceptance criteria 1-8, one test each.

Every test prints a single PASS/FAIL line, and the run ends with a summary
section listing all criteria. Tolerances and budgets are pinned below.
"""
import itertools
import math
import time

import numpy as np
import pytest

from conftest import criterion
from ecn import evaluation as E
from ecn import inference, kernels as K, patchnet, sampler, synth, trainer
from ecn.gradcheck import numeric_gradient, relative_error
from ecn.tensor import precision
from ecn.verify import run_gradient_suite

GRAD_TOL = 1e-4
GRAD_H = 1e-5
GRAD_BUDGET_S = 60.0
IDENTITY_TOL = 1e-12
STATED_PARAMS = 24e6
PARAM_REL_TOL = 0.05
SIMPLE_MIN_ACC = 0.90
SIMPLE_MAX_ITERS = 5000
ECN_MAX_ITERS = 2000
BENCH_BUDGET_S = 15 * 60
SUM_TOL = 1e-6

# benchmark schedule, scaled down from 250k / 35k iterations
SIMPLE_SGD = trainer.SgdConfig(base_lr=0.01, lr_drop_every=2000, max_iterations=3000, batch_size=64, seed=1)
ECN_N = 4
ECN_SGD = trainer.SgdConfig(base_lr=0.001, lr_drop_every=1000, max_iterations=1000, batch_size=16, seed=2)
CHECKPOINT_EVERY = 250
VAL_IMAGES = 80


@pytest.fixture(scope="module")
def bench():
    t0 = time.perf_counter()
    data = synth.generate(synth.SynthConfig(seed=42, num_classes=4, n_train=800, n_test=200))

    def sets(rows):
        return [sampler.extract_patches(sampler.preprocess(px, lab, sid)) for px, lab, sid in rows]

    train, test = sets(data["train"]), sets(data["test"])
    return {"train": train[VAL_IMAGES:], "val": train[:VAL_IMAGES], "test": test,
            "setup_s": time.perf_counter() - t0}


def test_criterion_1_gradient_suite():
    with criterion(1, "gradient suite") as d:
        t0 = time.perf_counter()
        reports = dict(run_gradient_suite(tolerance=GRAD_TOL))
        d["runtime_s"] = round(time.perf_counter() - t0, 2)
        d["max_rel_err"] = f"{max(r.max_error for r in reports.values()):.2e}"
        d["cases"] = len(reports)
        failed = [name for name, r in reports.items() if not r.passed]
        assert not failed, failed
        assert {"conv", "maxpool", "lrn", "relu", "fc", "dropout", "network-mini"} <= set(reports)
        assert d["runtime_s"] < GRAD_BUDGET_S


def test_criterion_2_joint_loss_identities():
    with criterion(2, "joint loss identities") as d:
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(1000):
            z = rng.normal(0, 4, 7)
            lab = int(rng.integers(7))
            worst = max(worst, abs(trainer.ecn_loss(z[None], lab)[0] - K.softmax_xent(z, lab)[0]))
        d["n1_max_diff"] = f"{worst:.1e}"
        assert worst <= IDENTITY_TOL

        z = rng.standard_normal((6, 5))
        for perm in itertools.islice(itertools.permutations(range(6)), 50):
            perm = list(perm)
            la, ga = trainer.ecn_loss(z, 1)
            lb, gb = trainer.ecn_loss(z[perm], 1)
            assert abs(la - lb) <= IDENTITY_TOL
            np.testing.assert_allclose(ga[perm], gb, atol=IDENTITY_TOL)

        with precision("float64"):
            net = patchnet.build("mini", 4, 0)
            x = rng.standard_normal((1, 32, 32))
            single = patchnet.forward(net, x).logits
            branch = patchnet.forward(net, np.stack([x] * 3)).logits
            _, g = trainer.ecn_loss(branch, 2)
            p = K.softmax(3 * single)
            p[2] -= 1
            np.testing.assert_allclose(g[0], p, atol=1e-10)

            batch = rng.standard_normal((3, 1, 32, 32))

            def loss():
                return trainer.ecn_loss(patchnet.forward(net, batch).logits, 0)[0]

            net.zero_grad()
            tr = patchnet.forward(net, batch)
            patchnet.backward(tr, trainer.ecn_loss(tr.logits, 0)[1])
            errs = []
            probe = np.random.default_rng(9)
            for name in ("conv1.weight", "conv2.weight", "conv4.bias", "fc6.weight", "fc7.weight"):
                arr = net.tensors[name].data
                idx = np.sort(probe.choice(arr.size, min(8, arr.size), replace=False))
                num = numeric_gradient(loss, arr, GRAD_H, idx)
                errs.append(relative_error(net.tensors[name].grad.reshape(-1)[idx], num))
        d["shared_grad_rel_err"] = f"{max(errs):.2e}"
        assert max(errs) < GRAD_TOL


def test_criterion_3_shape_conformance():
    expected = [("conv1", (96, 28, 28)), ("pool1", (96, 15, 15)), ("conv2", (256, 13, 13)),
                ("pool2", (256, 7, 7)), ("conv3", (384, 5, 5)), ("pool3", (384, 3, 3)),
                ("conv4", (512, 3, 3)), ("fc5", (4096,)), ("fc6", (1024,)), ("fc7", (13,))]
    with criterion(3, "full-size profile shapes and size") as d:
        arch = patchnet.ArchitectureSpec.profile("paper", 13)
        shapes = dict(arch.shapes())
        for name, shape in expected:
            assert shapes[name] == shape, (name, shapes[name])
        count = sum(int(np.prod(s)) for _, s in arch.param_shapes())
        d["params"] = count
        d["rel_dev"] = round(abs(count - STATED_PARAMS) / STATED_PARAMS, 4)
        assert d["rel_dev"] < PARAM_REL_TOL


def test_criterion_4_sampler_formulas(bench):
    with criterion(4, "sampler counts") as d:
        for width in range(40, 4001):
            windows = len(range(0, width - 39, 8)) + 2 * len(range(0, width - 31, 8))
            assert sum(sampler.patch_counts(width)) == windows, width
        d["widths"] = "40-4000"
        sets = bench["train"]
        for n in (1, 4, 10, 60):
            ds = sampler.make_ensemble_dataset(sets, n, seed=0)
            assert len(ds) == 2 * sum(len(ps) for ps in sets)
        d["ensemble_samples_n10"] = len(sampler.make_ensemble_dataset(sets, 10, seed=0))
        small = sampler.PatchSet(np.zeros((3, 1, 32, 32)), 0, [(40, 0, 0)] * 3, "small")
        ds = sampler.make_ensemble_dataset([small], 10, seed=0)
        assert len(ds) == 6
        assert all(len(s.indices) == 10 and len(set(s.indices.tolist())) < 10 for s in ds)


def _accuracy(params, sets, rule):
    scores = inference.classify_dataset(params, sets, (rule,))[rule]
    return float(np.mean([s.predicted == ps.label for s, ps in zip(scores, sets)]))


@pytest.mark.slow
def test_criterion_5_synthetic_benchmark(bench, tmp_path):
    with criterion(5, "synthetic benchmark") as d:
        t0 = time.perf_counter()
        x, y = sampler.patch_arrays(bench["train"])
        xv, yv = sampler.patch_arrays(bench["val"])
        net = patchnet.build("mini", 4, 0)
        res = trainer.train_simple(net, x, y, SIMPLE_SGD, checkpoint_dir=tmp_path,
                                   checkpoint_every=CHECKPOINT_EVERY,
                                   evaluate=lambda p: trainer.patch_accuracy(p, xv, yv))
        assert SIMPLE_SGD.max_iterations <= SIMPLE_MAX_ITERS
        first = np.mean([r.batch_accuracy for r in res.reports[:100]])
        last = np.mean([r.batch_accuracy for r in res.reports[-100:]])
        assert last > first
        simple_acc = _accuracy(net, bench["test"], "avg-softmax")
        d["simple_avg_softmax"] = round(simple_acc, 3)
        d["simple_fc7_sum"] = round(_accuracy(net, bench["test"], "fc7-sum"), 3)

        attainable = max(a for _, _, a in res.checkpoints)
        warm_it, warm_path, warm_acc = next(c for c in res.checkpoints
                                            if 0.925 * attainable <= c[2] < attainable)
        d["attainable"] = round(attainable, 3)
        d["warm"] = f"{warm_it}@{warm_acc:.3f}"
        warm = patchnet.load(warm_path)
        ens = sampler.make_ensemble_dataset(bench["train"], ECN_N, seed=3)
        trainer.finetune_ecn(warm, ens, trainer.EcnConfig(n=ECN_N, sgd=ECN_SGD), attainable=attainable)
        assert ECN_SGD.max_iterations <= ECN_MAX_ITERS
        ecn_acc = _accuracy(warm, bench["test"], "fc7-sum")
        d["ecn_fc7_sum"] = round(ecn_acc, 3)
        d["runtime_s"] = round(time.perf_counter() - t0 + bench["setup_s"], 1)

        assert simple_acc >= SIMPLE_MIN_ACC
        assert ecn_acc >= simple_acc
        assert d["runtime_s"] < BENCH_BUDGET_S


def test_criterion_6_metric_oracles():
    with criterion(6, "metric oracles") as d:
        def dp(a, b):
            prev = list(range(len(b) + 1))
            for i, ca in enumerate(a, 1):
                cur = [i] + [0] * len(b)
                for j, cb in enumerate(b, 1):
                    cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
                prev = cur
            return prev[-1]

        words = ["".join(p) for n in range(6) for p in itertools.product("abc", repeat=n)]
        for a in words:
            for b in words:
                assert E.levenshtein(a, b) == dp(a, b)
        d["levenshtein_pairs"] = len(words) ** 2

        box = lambda x, y, w, h: E.BoxRecord("i", x, y, w, h, "s")  # noqa: E731
        assert E.iou(box(0, 0, 10, 10), box(0, 0, 10, 10)) == 1.0
        assert E.iou(box(0, 0, 10, 10), box(5, 0, 10, 10)) == pytest.approx(1 / 3, abs=1e-15)
        assert E.iou(box(0, 0, 10, 10), box(30, 30, 5, 5)) == 0.0

        rep = E.JointEvalReport(395, 376, 245)
        prf = (round(rep.precision, 2), round(rep.recall, 2), round(rep.fscore, 2))
        d["prf"] = prf
        assert prf == (0.51, 0.62, 0.56)

        a = [True] * 10 + [False] * 2
        b = [False] * 10 + [True] * 2
        m, s = E.mcnemar(a, b), E.mcnemar(b, a)
        d["mcnemar"] = f"{m.statistic:.4f}/p={m.p_value:.4f}"
        assert m.statistic == pytest.approx(49 / 12, abs=1e-12)
        assert (m.statistic, m.p_value) == (s.statistic, s.p_value)


def test_criterion_7_determinism_and_persistence(bench, tmp_path):
    with criterion(7, "determinism and persistence") as d:
        x, y = sampler.patch_arrays(bench["train"])
        cfg = trainer.SgdConfig(max_iterations=100, seed=7)
        runs = [trainer.train_simple(patchnet.build("mini", 4, 0), x, y, cfg) for _ in range(2)]
        la, lb = ([r.loss for r in run.reports] for run in runs)
        assert len(la) == 100 and la == lb
        d["losses_bit_identical"] = 100

        patchnet.save(runs[0].params, tmp_path / "a.ecn")
        back = patchnet.load(tmp_path / "a.ecn")
        for k, t in runs[0].params.tensors.items():
            assert np.array_equal(back.tensors[k].data, t.data)
        patchnet.save(back, tmp_path / "b.ecn")
        assert (tmp_path / "a.ecn").read_bytes() == (tmp_path / "b.ecn").read_bytes()

        cfg = trainer.SgdConfig(max_iterations=40, seed=7)
        full = trainer.train_simple(patchnet.build("mini", 4, 0), x, y, cfg,
                                    checkpoint_dir=tmp_path, checkpoint_every=20)
        resumed = patchnet.load(tmp_path / "simple_0000020.ecn")
        rest = trainer.train_simple(resumed, x, y, cfg)
        assert [r.loss for r in rest.reports] == [r.loss for r in full.reports[20:]]
        for k, t in full.params.tensors.items():
            assert np.array_equal(resumed.tensors[k].data, t.data)
        d["resume"] = "bit-identical"


def test_criterion_8_aggregation_invariants():
    with criterion(8, "aggregation invariants") as d:
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(1000):
            n, k = int(rng.integers(1, 30)), int(rng.integers(2, 14))
            z = rng.normal(0, 6, (n, k))
            avg = inference.avg_softmax_rule(z)
            worst = max(worst, abs(avg.values.sum() - 1.0))
            dup = inference.avg_softmax_rule(np.concatenate([z, z, z]))
            np.testing.assert_allclose(dup.values, avg.values, atol=1e-12)
            base = inference.fc7_sum_rule(z)
            shifted = inference.fc7_sum_rule(z + rng.normal(0, 50))
            assert shifted.predicted == base.predicted
            one = z[:1]
            assert inference.avg_softmax_rule(one).predicted == int(np.argmax(one[0]))
            assert inference.fc7_sum_rule(one).predicted == int(np.argmax(one[0]))
        d["max_sum_dev"] = f"{worst:.1e}"
        assert worst < SUM_TOL
        assert math.isfinite(worst)
