"""Acceptance criteria, one test each.

Every test prints a single PASS/FAIL line, also collected into the terminal
summary.  Run alone with ``pytest tests/test_acceptance.py -s``.
"""

import contextlib
import time

import numpy as np
import pytest

from adknet import tensor as T
from adknet.data import synth_pairs, split_validation
from adknet.metrics import psnr, ssim
from adknet.model import ModelConfig, build, forward, predict_kernels, stream_of
from adknet.resample import _gather_patches, apply_kernels, classic_downscale
from adknet.train import TrainConfig, Trainer, l1_loss

from conftest import ACCEPTANCE_LINES
from gradcheck import numeric_grad, rel_err
from test_metrics import naive_mse, naive_ssim
from test_resample import box_kernels, one_hot

# desk-scale convergence setup, pinned after the first verified run
CONVERGENCE = dict(
    data=dict(count=32, hr_size=96, s=2, generator="box", rng=0),
    model=dict(scale=2, width=16),
    train=dict(lr0=1e-4, batch=4, patch=48, epochs=10**6, plateau_patience=20, min_lr=1e-7, seed=0),
    max_steps=5000,
    target_db=40.0,
)
ABLATION_BUDGET = 200


@contextlib.contextmanager
def criterion(number, title):
    start = time.perf_counter()
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        line = f"[FAIL] criterion {number}: {title} ({time.perf_counter() - start:.1f}s) {type(exc).__name__}: {exc}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        raise
    extra = " ".join(f"{k}={v}" for k, v in detail.items())
    line = f"[PASS] criterion {number}: {title} ({time.perf_counter() - start:.1f}s) {extra}".rstrip()
    print(line)
    ACCEPTANCE_LINES.append(line)


def test_1_kernel_validity():
    with criterion(1, "kernel validity under minmax_sum") as d:
        rng = np.random.default_rng(101)
        slices = 0
        for s in (2, 3, 4):
            for i in range(100):
                cfg = ModelConfig(scale=s, width=8, backbone_blocks=1, trunk_blocks=1, branch_blocks=1, seed=100 * s + i)
                n = s * int(rng.integers(3, 6))
                k = predict_kernels(rng.random((n, n, 3)), build(cfg), cfg).data.astype(np.float64)
                assert k.min() >= 0 and k.max() <= 1, f"weights outside [0, 1] at s={s}"
                sums = k.sum(axis=(-2, -1))
                assert np.abs(sums - 1).max() <= 1e-5, f"sum error {np.abs(sums - 1).max():.2e} at s={s}"
                slices += sums.size
        d["slices"] = slices


def test_2_gradient_correctness():
    with criterion(2, "finite-difference check of the full tiny model") as d:
        cfg = ModelConfig(scale=2, width=8, backbone_blocks=1, trunk_blocks=1, branch_blocks=1, seed=2)
        rng = np.random.default_rng(202)
        with T.precision(np.float64):
            params = build(cfg)
            for name, p in params.items():  # non-zero biases so every group has a generic gradient
                if name.endswith(".bias"):
                    p.data[:] = rng.uniform(-0.1, 0.1, p.shape)
            x = rng.random((8, 8, 3))
            # the target sits above every prediction, so |pred - target| stays off its kink
            target = rng.random((4, 4, 3)) + 2.0

            T.backward(l1_loss(forward(x, params, cfg)[0], target))
            grads = {n: p.grad.copy() for n, p in params.items()}

            def value():
                return float(np.mean(np.abs(forward(x, params, cfg)[0].data - target)))

            worst, checked, groups = 0.0, 0, set()
            for name, p in params.items():
                for _ in range(2):
                    idx = tuple(int(rng.integers(0, n)) for n in p.shape)
                    num = numeric_grad(value, p.data, idx, step=1e-4)
                    err = float(rel_err(grads[name][idx], num))
                    assert err < 1e-3, f"{name}{list(idx)}: analytic {grads[name][idx]:.6e} numeric {num:.6e}"
                    worst = max(worst, err)
                    checked += 1
                groups.add(name.rsplit(".", 2)[0])
        assert checked >= 50
        d.update(parameters=checked, groups=len(groups), worst_rel=f"{worst:.1e}")


def test_3_resampler_oracles():
    with criterion(3, "one-hot = nearest, sub-window = box") as d:
        rng = np.random.default_rng(303)
        worst = 0.0
        for s in (2, 3, 4):
            k = 2 * s + 1
            for _ in range(50):
                h, w = (int(v) for v in rng.integers(3, 7, size=2))
                img = rng.random((h * s, w * s, 3)).astype(np.float32)
                near = apply_kernels(T.tensor(img), T.tensor(one_hot(h, w, k)), s).data
                assert np.array_equal(near, classic_downscale(img, s, "nearest")), f"nearest mismatch at s={s}"
                out = apply_kernels(T.tensor(img), T.tensor(box_kernels(h, w, s)), s).data
                ref = classic_downscale(img.astype(np.float64), s, "box")
                err = np.abs(out - ref)[1:-1, 1:-1].max()
                assert err <= 1e-6, f"box error {err:.2e} at s={s}"
                worst = max(worst, float(err))
        d["box_max_err"] = f"{worst:.1e}"


def test_4_structural_identities():
    with criterion(4, "structural identities") as d:
        rng = np.random.default_rng(404)
        for s in (2, 3, 4):
            x = rng.random((4 * s, 3 * s, 5)).astype(np.float32)
            assert np.array_equal(T.pixel_shuffle(T.pixel_unshuffle(T.tensor(x), s), s).data, x)
            assert np.array_equal(T.reflect_pad(T.tensor(x), 0).data, x)

            cfg = ModelConfig(scale=s, width=8, backbone_blocks=1, trunk_blocks=1, branch_blocks=1, seed=s)
            params = build(cfg)
            v = float(rng.random())
            flat, _ = forward(np.full((3 * s, 3 * s, 3), v), params, cfg)
            assert np.abs(flat.data - v).max() <= 1e-5, f"constant drift at s={s}"

            img = rng.random((4 * s, 4 * s, 3)).astype(np.float32)
            out, kernels = forward(img, params, cfg)
            patches = _gather_patches(img[None], s, cfg.kernel_size)[0]
            lo, hi = patches.min(axis=(-2, -1)), patches.max(axis=(-2, -1))
            assert (out.data >= lo - 1e-6).all() and (out.data <= hi + 1e-6).all(), f"convexity violated at s={s}"
        d["scales"] = "2,3,4"


def _convergence_trainer(variant="full"):
    c = CONVERGENCE
    data = synth_pairs(c["data"]["count"], c["data"]["hr_size"], c["data"]["s"], c["data"]["generator"], c["data"]["rng"])
    train_set, val_set = split_validation(data)
    return Trainer(ModelConfig(variant=variant, **c["model"]), train_set, val_set, TrainConfig(**c["train"]))


@pytest.mark.slow
def test_5_convergence_surrogate():
    with criterion(5, "synthetic box task reaches 40 dB validation PSNR") as d:
        trainer = _convergence_trainer()
        trainer.fit(max_steps=CONVERGENCE["max_steps"], callback=lambda t, rec: rec["val_psnr"] >= CONVERGENCE["target_db"])
        val = trainer.validate()
        d.update(steps=trainer.state.step, val_psnr=f"{val['val_psnr']:.2f}dB")
        assert val["val_psnr"] >= CONVERGENCE["target_db"], f"{val['val_psnr']:.2f} dB after {trainer.state.step} steps"
        assert trainer.state.step <= CONVERGENCE["max_steps"]


@pytest.mark.slow
def test_6_ablation_direction():
    # recorded as an observation: a reversal on synthetic data is reported, not failed
    with criterion(6, f"full vs single_stream at {ABLATION_BUDGET} steps (observation)") as d:
        losses = {}
        for variant in ("full", "single_stream"):
            trainer = _convergence_trainer(variant)
            trainer.fit(max_steps=ABLATION_BUDGET)
            assert trainer.state.step == ABLATION_BUDGET
            losses[variant] = trainer.validate()["val_loss"]
        holds = losses["full"] <= losses["single_stream"]
        d.update(
            full_l1=f"{losses['full']:.5f}",
            single_l1=f"{losses['single_stream']:.5f}",
            direction="holds" if holds else "REVERSED (observation)",
        )


def test_7_metrics_conformance():
    with criterion(7, "metrics conformance") as d:
        a = np.full((32, 32, 3), 0.5)
        offset = psnr(a + 1 / 255, a)
        assert abs(offset - 48.13) <= 0.01, offset
        r = np.random.default_rng(707)
        x = r.random((32, 32, 1))
        assert ssim(x, x) == 1.0
        y = np.clip(x + 0.05 * r.standard_normal(x.shape), 0, 1)
        ps_err = abs(psnr(x, y) - 10 * np.log10(1 / naive_mse(x, y)))
        ss_err = abs(ssim(x, y) - naive_ssim(x, y))
        assert ps_err <= 1e-6 and ss_err <= 1e-6, (ps_err, ss_err)
        d.update(offset_db=f"{offset:.4f}", ssim_err=f"{ss_err:.1e}")


def test_8_determinism_and_resume(tmp_path):
    with criterion(8, "bit-identical checkpoints and exact resume") as d:
        data = synth_pairs(8, 32, 2, "box", 8)
        train_set, val_set = split_validation(data)
        mc = ModelConfig(scale=2, width=8, backbone_blocks=1, trunk_blocks=1, branch_blocks=1, seed=8)
        tc = TrainConfig(batch=2, patch=16, epochs=3, seed=8)
        for name in ("a", "b"):
            t = Trainer(mc, train_set, val_set, tc)
            t.fit()
            t.save(tmp_path / f"{name}.adkn")
        assert (tmp_path / "a.adkn").read_bytes() == (tmp_path / "b.adkn").read_bytes()

        ref = Trainer(mc, train_set, val_set, tc)
        ref.fit(max_steps=5)
        ref.save(tmp_path / "mid.adkn")
        trajectory = []
        for _ in range(10):
            ref.fit(max_steps=ref.state.step + 1)
            trajectory.append({n: p.data.copy() for n, p in ref.params.items()})
        resumed = Trainer.from_checkpoint(tmp_path / "mid.adkn", train_set, val_set)
        for i in range(10):
            resumed.fit(max_steps=resumed.state.step + 1)
            for n, p in resumed.params.items():
                assert np.array_equal(p.data, trajectory[i][n]), f"diverged at resumed step {i + 1} in {n}"
        d["resumed_steps"] = 10


def test_9_channel_independence():
    with criterion(9, "R-only loss and R-stream perturbation leave G/B untouched") as d:
        rng = np.random.default_rng(909)
        cfg = ModelConfig(scale=2, width=8, backbone_blocks=1, trunk_blocks=1, branch_blocks=1, seed=9)
        params = build(cfg)
        x = rng.random((12, 12, 3)).astype(np.float32)
        target = rng.random((6, 6, 3)).astype(np.float32)
        out, kernels = forward(x, params, cfg)
        T.backward(l1_loss(out[:, :, 0], target[:, :, 0]))
        for name, p in params.items():
            if stream_of(name) in ("G", "B"):
                assert p.grad is None or not p.grad.any(), f"non-zero gradient in {name}"
        assert any(p.grad is not None and p.grad.any() for n, p in params.items() if stream_of(n) == "R")

        for name, p in params.items():
            if stream_of(name) == "R":
                p.data = p.data + rng.standard_normal(p.shape).astype(np.float32) * 0.1
        _, perturbed = forward(x, params, cfg)
        assert not np.array_equal(perturbed.data[..., 0, :, :], kernels.data[..., 0, :, :])
        for c in (1, 2):
            assert np.array_equal(perturbed.data[..., c, :, :], kernels.data[..., c, :, :])
        d["checked_tensors"] = sum(stream_of(n) in ("G", "B") for n in params)
