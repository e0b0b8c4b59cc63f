"""Acceptance checks, one per headline requirement.

Each ``check_*`` function returns ``(passed, detail)``. Under pytest every
check is a test that prints a single ``PASS``/``FAIL`` line (run with ``-s``
to see them); run this file directly to print the full report.
"""

import contextlib
import io
import math
import re
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import fd_param_error, fd_relative_error  # noqa: E402
from switchunet import ops  # noqa: E402
from switchunet.blocks import (  # noqa: E402
    AttentionGateParams,
    CbrParams,
    RclParams,
    ResidualParams,
    attention_gate,
    cbr_block,
    rcl_block,
    residual_filter_count,
    residual_wrap,
)
from switchunet.cli import main as cli_main  # noqa: E402
from switchunet.losses import LossWeights, cross_entropy_loss, hybrid_loss  # noqa: E402
from switchunet.metrics import boxplot_stats, confusion_counts, metrics  # noqa: E402
from switchunet.network import named_config  # noqa: E402
from switchunet.patches import extract_patches, load_manifest, plan_patches, stitch  # noqa: E402
from switchunet.synthetic import make_blob_dataset  # noqa: E402
from switchunet.tensor import Parameter, Tensor  # noqa: E402
from switchunet.trainer import TrainRun, evaluate, train  # noqa: E402

GRAD_TOL = 1e-4
TOY_BASE = (4, 8, 16, 32, 64)


def report(name, passed, detail):
    print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return passed


# -- 1. parameter counts ----------------------------------------------------

def _cli_total(model):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli_main(["params", "--model", model])
    assert code == 0
    return int(re.search(r"total parameters: (\d+)", buf.getvalue()).group(1))


def check_param_counts():
    targets = {"s-r2f2u-net": 59.12e6, "s-r2u-net": 77.17e6, "s-r2f2-attn-u-net": 59.25e6}
    totals = {m: _cli_total(m) for m in (*targets, "r2u-net")}
    parts, ok = [], True
    for model, target in targets.items():
        dev = totals[model] / target - 1
        ok &= abs(dev) <= 0.05
        parts.append(f"{model} {totals[model] / 1e6:.2f}M ({dev:+.1%})")
    ratio = totals["r2u-net"] / totals["s-r2f2u-net"] - 1
    ok &= ratio >= 0.40
    reduction = 1 - totals["s-r2f2u-net"] / totals["r2u-net"]
    parts.append(f"r2u-net exceeds s-r2f2u-net by {ratio:.1%} (a {reduction:.1%} reduction)")
    return ok, "; ".join(parts)


# -- 2. gradient suite ------------------------------------------------------

def _randomized(bundle, rng):
    for p in bundle.parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.5
    return bundle


def _gradient_cases():
    rng = np.random.default_rng(2024)
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    cases = {}
    cases["conv2d"] = lambda: fd_relative_error(lambda x, w, b: ops.conv2d(x, w, b), r(2, 3, 6, 6), r(4, 3, 3, 3), r(4))
    cases["relu"] = lambda: fd_relative_error(ops.relu, r(2, 3, 6, 6))
    cases["sigmoid"] = lambda: fd_relative_error(ops.sigmoid, r(2, 3, 6, 6))
    cases["softmax_channels"] = lambda: fd_relative_error(ops.softmax_channels, r(2, 3, 6, 6))
    cases["maxpool2"] = lambda: fd_relative_error(ops.maxpool2, r(2, 3, 6, 6))
    cases["upsample2"] = lambda: fd_relative_error(ops.upsample2, r(2, 3, 3, 3))
    cases["concat_channels"] = lambda: fd_relative_error(ops.concat_channels, r(2, 3, 6, 6), r(2, 2, 6, 6))
    cases["add"] = lambda: fd_relative_error(ops.add, r(2, 3, 6, 6), r(2, 3, 6, 6))
    cases["mul"] = lambda: fd_relative_error(ops.mul, r(2, 3, 6, 6), r(2, 1, 6, 6))

    def bn(mode):
        state = ops.BatchNormState.create(3, np.float64)
        state.running_var[...] = 1.7
        return lambda: fd_relative_error(
            lambda x, g, b: ops.batchnorm(x, g, b, state, mode), r(2, 3, 6, 6), r(3), r(3)
        )

    cases["batchnorm[train]"] = bn("train")
    cases["batchnorm[infer]"] = bn("infer")

    def cbr():
        p = _randomized(CbrParams.create("cbr", 3, 2, rng, np.float64), rng)
        x = Parameter(r(2, 3, 6, 6))
        return fd_param_error(lambda: cbr_block(x, p, "train"), [x, *p.parameters()])

    def rcl(t):
        def run():
            p = _randomized(RclParams.create("rcl", 2, 3, rng, steps=t, dtype=np.float64), rng)
            x = Parameter(r(2, 2, 6, 6))
            return fd_param_error(lambda: rcl_block(x, p, "train"), [x, *p.parameters()])

        return run

    def residual():
        p = _randomized(ResidualParams.create("res", 2, 3, rng, np.float64), rng)
        s0, s2 = Parameter(r(2, 2, 6, 6)), Parameter(r(2, 3, 6, 6))
        return fd_param_error(lambda: residual_wrap(s0, s2, p), [s0, s2, *p.parameters()])

    def attention():
        p = _randomized(AttentionGateParams.create("att", 3, 2, rng, np.float64), rng)
        x, g = Parameter(r(2, 3, 6, 6)), Parameter(r(2, 2, 6, 6))
        return fd_param_error(lambda: attention_gate(x, g, p), [x, g, *p.parameters()])

    def hybrid():
        logits = r(2, 2, 6, 6)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        y = (rng.random((2, 1, 6, 6)) > 0.5).astype(float)
        onehot = Tensor(np.concatenate([1 - y, y], axis=1))
        return fd_relative_error(lambda q: hybrid_loss(q, onehot), probs)

    cases["cbr_block"] = cbr
    for t in (0, 1, 2):
        cases[f"rcl_block[t={t}]"] = rcl(t)
    cases["residual_wrap"] = residual
    cases["attention_gate"] = attention
    cases["hybrid_loss"] = hybrid
    return cases


def check_gradient_suite():
    start = time.perf_counter()
    errors = {name: fn() for name, fn in _gradient_cases().items()}
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = all(e <= GRAD_TOL for e in errors.values()) and elapsed < 60
    bad = [n for n, e in errors.items() if e > GRAD_TOL]
    detail = f"{len(errors)} cases, worst {worst} rel err {errors[worst]:.2e}, {elapsed:.1f}s"
    return ok, detail + (f"; over tolerance: {bad}" if bad else "")


# -- 3. RCL degeneracy ------------------------------------------------------

def check_rcl_degeneracy():
    rng = np.random.default_rng(3)
    worst = 0.0
    for dtype in (np.float32, np.float64):
        p = RclParams.create("rcl", 3, 6, rng, steps=0, dtype=dtype)
        cbr = CbrParams(p.feedforward, p.norms[0], 6)
        u = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(dtype))
        for mode in ("train", "infer"):
            worst = max(worst, float(np.abs(rcl_block(u, p, mode).data - cbr_block(u, cbr, mode).data).max()))
    return worst <= 1e-6, f"max |rcl(t=0) - cbr| = {worst:.1e}"


# -- 4. residual filter count -----------------------------------------------

def check_residual_filter_count():
    value = residual_filter_count(32, 3)
    return value == 128, f"residual_filter_count(32, 3) = {value}"


# -- 5. metric oracle -------------------------------------------------------

def _oracle_ratios(tp, fp, tn, fn):
    def ratio(a, b):
        return 1.0 if b == 0 else a / b

    return (
        ratio(tp + tn, tp + fp + tn + fn),
        ratio(tn, tn + fp),
        ratio(tp, tp + fp),
        ratio(tp, tp + fn),
        ratio(2 * tp, 2 * tp + fp + fn),
    )


def check_metric_oracle():
    rng = np.random.default_rng(5)
    count_mismatch, worst = 0, 0.0
    for _ in range(1000):
        density = rng.random(2)
        pred = rng.random((16, 16)) < density[0]
        gt = rng.random((16, 16)) < density[1]
        tp = fp = tn = fn = 0
        for i in range(16):
            for j in range(16):
                a, b = bool(pred[i, j]), bool(gt[i, j])
                tp += a and b
                fp += a and not b
                fn += b and not a
                tn += not a and not b
        c = confusion_counts(pred, gt)
        count_mismatch += (c.tp, c.fp, c.tn, c.fn) != (tp, fp, tn, fn)
        got = metrics(c).as_tuple()
        worst = max(worst, max(abs(x - y) for x, y in zip(got, _oracle_ratios(tp, fp, tn, fn))))
    return count_mismatch == 0 and worst <= 1e-12, f"1000 pairs, {count_mismatch} count mismatches, max ratio err {worst:.1e}"


# -- 6. patch round trip ----------------------------------------------------

def _enumerate(size, patch, overlap):
    if size <= patch:
        return [0]
    out, x = [], 0
    while x + patch < size:
        out.append(x)
        x += patch - overlap
    out.append(size - patch)
    return sorted(set(out))


def check_patch_round_trip():
    rng = np.random.default_rng(6)
    failures = 0
    for _ in range(50):
        w, h = (int(v) for v in rng.integers(512, 2200, size=2))
        img = rng.random((1, 1, h, w)).astype(np.float32)
        grid = plan_patches(w, h, 512, 10)
        failures += stitch(extract_patches(img, grid), grid).data.tobytes() != img.tobytes()
    grid = plan_patches(1991, 1127, 512, 10)
    expected = [(x, y) for y in _enumerate(1127, 512, 10) for x in _enumerate(1991, 512, 10)]
    grid_ok = grid.origins == expected and len(expected) == 12
    return failures == 0 and grid_ok, (
        f"{50 - failures}/50 random sizes exact; 1991x1127 grid xs={grid.xs} ys={grid.ys} ({len(grid)} patches)"
    )


# -- 7. hybrid loss recomposition -------------------------------------------

def check_hybrid_recomposition():
    rng = np.random.default_rng(7)
    logits = rng.standard_normal((2, 2, 16, 16))
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    y = (rng.random((2, 1, 16, 16)) > 0.4).astype(float)
    onehot = np.concatenate([1 - y, y], axis=1)
    # independent component evaluation
    ce = float(-(onehot * np.log(p + 1e-7)).sum() / (2 * 16 * 16))
    inter = (p * onehot).sum(axis=(0, 2, 3))
    dl = float((1 - (2 * inter + 1) / (p.sum(axis=(0, 2, 3)) + onehot.sum(axis=(0, 2, 3)) + 1)).mean())
    P, Y = Tensor(p), Tensor(onehot)
    err = abs(hybrid_loss(P, Y, LossWeights(1, 0.5)).item() - (ce + 0.5 * dl))
    exact = hybrid_loss(P, Y, LossWeights(1, 0)).item() == cross_entropy_loss(P, Y).item()
    return err <= 1e-9 and exact, f"|hybrid - (CE + 0.5 dice)| = {err:.1e}; lambda2=0 equals CE exactly: {exact}"


# -- 8. overfit capability --------------------------------------------------

OVERFIT_EPOCHS = 125  # 8 images / batch 2 = 4 steps per epoch -> 500 steps


def check_overfit(workdir):
    manifest = load_manifest(make_blob_dataset(Path(workdir) / "blobs"))
    cfg = named_config("s-r2f2u-net", base_filters=TOY_BASE)
    run = TrainRun(epochs=OVERFIT_EPOCHS, batch_size=2, seed=0, patch=64, overlap=0)
    steps = OVERFIT_EPOCHS * math.ceil(len(manifest.split("train")) / run.batch_size)
    start = time.perf_counter()
    net, rows = train(cfg, manifest, run)
    dice = evaluate(net, manifest, "train", patch=64, overlap=0).table.overall.dice
    elapsed = time.perf_counter() - start
    ok = steps <= 500 and dice >= 0.95 and elapsed <= 600
    return ok, f"{steps} steps, training dice {dice:.4f}, {elapsed:.0f}s", rows


# -- 9. determinism ---------------------------------------------------------

def check_determinism(workdir):
    workdir = Path(workdir)
    manifest = load_manifest(make_blob_dataset(workdir / "blobs-det", n_train=4, n_val=2, n_test=1))
    cfg = named_config("s-r2f2-attn-u-net", base_filters=(2, 4, 8, 16))
    for tag in ("a", "b"):
        train(cfg, manifest, TrainRun(epochs=3, seed=11, patch=64, overlap=0, out_dir=workdir / tag))
    same = {
        name: (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()
        for name in ("train_log.csv", "last.ckpt", "best.ckpt")
    }
    return all(same.values()), ", ".join(f"{n} {'identical' if s else 'DIFFERENT'}" for n, s in same.items())


# -- 10. boxplot statistics -------------------------------------------------

def _box_oracle(values):
    s = sorted(values)

    def q(frac):
        pos = frac * (len(s) - 1)
        lo = math.floor(pos)
        hi = min(lo + 1, len(s) - 1)
        return s[lo] + (pos - lo) * (s[hi] - s[lo])

    q1, med, q3 = q(0.25), q(0.5), q(0.75)
    lo_f, hi_f = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
    inside = [v for v in s if lo_f <= v <= hi_f]
    return q1, med, q3, inside[0], inside[-1], [v for v in s if v < lo_f or v > hi_f]


def check_boxplot():
    rng = np.random.default_rng(10)
    constructed = {
        "high outlier": ([1, 2, 3, 4, 100], [100]),
        "low outlier": ([-50, 10, 11, 12, 13, 14], [-50]),
        "both sides": ([0.91, 0.93, 0.92, 0.94, 0.95, 0.2, 1.9], [0.2, 1.9]),
        "none": (list(range(1, 10)), []),
    }
    ok = True
    for values, outliers in constructed.values():
        b = boxplot_stats(values)
        ok &= b.outliers == sorted(outliers)
        ok &= min(values) <= b.lower_whisker and b.upper_whisker <= max(values)
    mismatches = 0
    for _ in range(200):
        values = list(rng.normal(0.9, 0.05, size=int(rng.integers(1, 60))))
        values += list(rng.uniform(-1, 3, size=int(rng.integers(0, 3))))
        b = boxplot_stats(values)
        q1, med, q3, lw, uw, out = _box_oracle(values)
        close = all(abs(x - y) <= 1e-12 for x, y in ((b.q1, q1), (b.median, med), (b.q3, q3)))
        mismatches += not (close and (b.lower_whisker, b.upper_whisker) == (lw, uw) and b.outliers == out)
    ok &= mismatches == 0
    return ok, f"{len(constructed)} constructed cases, 200 random sets vs order-statistic oracle, {mismatches} mismatches"


# -- pytest entry points ----------------------------------------------------

def test_parameter_counts():
    ok, detail = check_param_counts()
    assert report("parameter counts", ok, detail), detail


def test_gradient_suite():
    ok, detail = check_gradient_suite()
    assert report("gradient suite", ok, detail), detail


def test_rcl_degeneracy():
    ok, detail = check_rcl_degeneracy()
    assert report("RCL t=0 degeneracy", ok, detail), detail


def test_residual_filter_count():
    ok, detail = check_residual_filter_count()
    assert report("residual filter count", ok, detail), detail


def test_metric_oracle():
    ok, detail = check_metric_oracle()
    assert report("metric oracle", ok, detail), detail


def test_patch_round_trip():
    ok, detail = check_patch_round_trip()
    assert report("patch round trip", ok, detail), detail


def test_hybrid_recomposition():
    ok, detail = check_hybrid_recomposition()
    assert report("hybrid loss recomposition", ok, detail), detail


@pytest.mark.slow
def test_overfit(tmp_path):
    ok, detail, _ = check_overfit(tmp_path)
    assert report("overfit capability", ok, detail), detail


def test_determinism(tmp_path):
    ok, detail = check_determinism(tmp_path)
    assert report("determinism", ok, detail), detail


def test_boxplot():
    ok, detail = check_boxplot()
    assert report("boxplot statistics", ok, detail), detail


if __name__ == "__main__":
    results = []
    with tempfile.TemporaryDirectory() as tmp:
        checks = [
            ("parameter counts", check_param_counts),
            ("gradient suite", check_gradient_suite),
            ("RCL t=0 degeneracy", check_rcl_degeneracy),
            ("residual filter count", check_residual_filter_count),
            ("metric oracle", check_metric_oracle),
            ("patch round trip", check_patch_round_trip),
            ("hybrid loss recomposition", check_hybrid_recomposition),
            ("overfit capability", lambda: check_overfit(tmp)[:2]),
            ("determinism", lambda: check_determinism(tmp)),
            ("boxplot statistics", check_boxplot),
        ]
        for name, fn in checks:
            results.append(report(name, *fn()))
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
