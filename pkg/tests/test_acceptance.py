"""Acceptance gate: every criterion at its stated tolerance, one pass/fail
line each (run with `pytest tests/test_acceptance.py -v -s`).

The trained fixtures are desk-scale: synthetic blobs for segmentation overfit
and the two-mode toy for diffusion. Budgets: gradient suite < 5 min, overfit
< 10 min, diffusion fixture < 15 min on one CPU core.
"""
from contextlib import contextmanager

import numpy as np
import pytest

from helpers import brute_force_kan, oracle_bases
from test_tensor import GRAD_CASES

from ukan import tensor as T
from ukan.checkpoint import load_checkpoint
from ukan.config import make_config
from ukan.data import make_blob_dataset, make_two_mode_dataset, two_mode_images
from ukan.diffusion import ddpm_sample, linear_schedule, q_sample
from ukan.kan import KanLayer, SplineSpec, bspline_basis
from ukan.losses import seg_loss
from ukan.metrics import f1, iou
from ukan.model import Ukan, UkanConfig
from ukan.optim import Adam, cosine_lr
from ukan.tensor import Tensor, clear_graph, grad_check, no_grad
from ukan.train import (
    evaluate, generate, inspect, load_model_for_inference, train,
)


@contextmanager
def criterion(num: int, desc: str):
    try:
        yield
    except Exception:
        print(f"\n[acceptance] criterion {num:2d} FAIL  {desc}")
        raise
    print(f"\n[acceptance] criterion {num:2d} PASS  {desc}")


def small_seg_config(tmp, **over):
    base = dict(task="segment", profile="custom", conv_channels=(8, 12, 16),
                kan_dims=(20, 24), data_dir=str(tmp / "blobs"),
                out_dir=str(tmp / "run"), image_size=32, epochs=2,
                batch_size=4, seed=3, lr=1e-3)
    base.update(over)
    return make_config(None, **base)


@pytest.fixture(scope="module")
def blob_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    make_blob_dataset(root / "blobs", n=8, size=32, seed=11, split_ratio=1.0)
    make_blob_dataset(root / "blobs_val", n=6, size=32, seed=1, split_ratio=0.67)
    return root


class TestCriterion1GradientSuite:
    def test_every_primitive_op(self, rng):
        with criterion(1, "primitive ops pass finite-difference checks at 1e-4"):
            for name in sorted(GRAD_CASES):
                f, shape = GRAD_CASES[name](rng)
                report = grad_check(f, Tensor(rng.normal(size=shape)),
                                    h=1e-5, tol=1e-4)
                assert report.passed, f"{name}: {report}"
            # composite layer ops ride on the same primitives
            spec = SplineSpec()
            w = Tensor(rng.normal(size=(10, spec.n_bases)))
            x = Tensor(rng.uniform(-0.9, 0.9, size=(10,)))
            assert grad_check(lambda t: (bspline_basis(t, spec) * w).sum(),
                              x, h=1e-5, tol=1e-4).passed

    def test_end_to_end_sampled_parameters(self):
        with criterion(1, "end-to-end 3x32x32 gradients at 1e-3 (20 params)"):
            T.set_default_dtype("float64")
            rng = np.random.default_rng(99)
            model = Ukan(UkanConfig.from_profile("small"),
                         rng=np.random.default_rng(5)).eval()  # BN eval mode
            x0 = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, 32, 32)))
            mask = Tensor((rng.random((1, 1, 32, 32)) > 0.5).astype(float))

            def loss_fn(m):
                return seg_loss(m(x0), mask)

            with T.scoped_graph():
                loss = loss_fn(model)
                loss.backward()
            named = dict(model.named_parameters())
            picks = []
            names = sorted(named)
            order = rng.permutation(len(names))
            for j in order[:20]:
                name = names[j]
                idx = int(rng.integers(named[name].size))
                picks.append((name, idx))
            h = 1e-5
            with no_grad():
                for name, idx in picks:
                    p = named[name]
                    analytic = p.grad.reshape(-1)[idx]
                    flat = p.data.reshape(-1)
                    keep = flat[idx]
                    flat[idx] = keep + h
                    up = loss_fn(model).item()
                    flat[idx] = keep - h
                    down = loss_fn(model).item()
                    flat[idx] = keep
                    numeric = (up - down) / (2 * h)
                    rel = abs(analytic - numeric) / max(1.0, abs(analytic),
                                                        abs(numeric))
                    assert rel <= 1e-3, f"{name}[{idx}]: rel {rel:.2e}"
            model.zero_grad()
            clear_graph()


class TestCriterion2Splines:
    def test_partition_of_unity_and_cardinal_values(self, rng):
        with criterion(2, "partition of unity 1e-10; cubic cardinal 2/3, 1/6 "
                          "vs recursive oracle at 1e-12"):
            spec = SplineSpec()
            x = Tensor(rng.uniform(spec.low, spec.high, size=(1000,)))
            sums = bspline_basis(x, spec).data.sum(axis=-1)
            assert np.max(np.abs(sums - 1.0)) <= 1e-10

            unit = SplineSpec(grid_size=8, order=3, low=-4.0, high=4.0)
            t = unit.knots()
            center = int(np.where(np.isclose(t, -2.0))[0][0])
            got = bspline_basis(Tensor([0.0, 1.0, -1.0]), unit).data[:, center]
            ref = np.array([oracle_bases(v, unit)[center] for v in (0.0, 1.0, -1.0)])
            assert np.max(np.abs(got - ref)) <= 1e-12
            assert np.max(np.abs(got - [2 / 3, 1 / 6, 1 / 6])) <= 1e-12


class TestCriterion3KanOracle:
    def test_fifty_random_configurations(self, rng):
        with criterion(3, "50 random KAN layers match brute-force double sum "
                          "at 1e-12 (up to 16x16)"):
            for _ in range(50):
                layer = KanLayer(int(rng.integers(1, 17)), int(rng.integers(1, 17)),
                                 rng=rng)
                x = rng.uniform(-1.2, 1.2, size=(2, layer.n_in))
                got = layer(Tensor(x)).data
                assert np.max(np.abs(got - brute_force_kan(layer, x))) <= 1e-12


class TestCriterion4ShapeContract:
    def test_default_resolution_ladder_at_256(self):
        with criterion(4, "default 256px ladder 128/64/32/16/8 and mirror"):
            T.set_default_dtype("float32")
            model = Ukan(UkanConfig.from_profile("base"),
                         rng=np.random.default_rng(0)).eval()
            with no_grad():
                out = model(Tensor(np.zeros((1, 3, 256, 256))))
            assert out.shape == (1, 1, 256, 256)
            assert model.last_ladder["encoder"] == [128, 64, 32, 16, 8]
            assert model.last_ladder["decoder"] == [16, 32, 64, 128, 256]

    def test_all_profiles_run_one_train_step(self, rng):
        with criterion(4, "profiles S/base/L build and run one train step"):
            T.set_default_dtype("float32")
            for profile in ("small", "base", "large"):
                model = Ukan(UkanConfig.from_profile(profile),
                             rng=np.random.default_rng(1))
                x = Tensor(rng.uniform(0, 1, size=(2, 3, 32, 32)))
                mask = Tensor((rng.random((2, 1, 32, 32)) > 0.5).astype(float))
                opt = Adam(model.named_parameters(), lr=1e-4)
                before = model.head.weight.data.copy()
                loss = seg_loss(model(x), mask)
                loss.backward()
                opt.step()
                opt.zero_grad()
                clear_graph()
                assert np.isfinite(loss.item())
                assert not np.array_equal(before, model.head.weight.data)
                del model, opt


class TestCriterion5Overfit:
    def test_blob_overfit_reaches_iou(self, blob_dir):
        with criterion(5, "U-KAN-S reaches IoU >= 0.95 on 8 blobs in 300 steps"):
            cfg = make_config(None, task="segment", profile="small",
                              data_dir=str(blob_dir / "blobs"),
                              out_dir=str(blob_dir / "overfit"), image_size=32,
                              epochs=300, batch_size=8, seed=7, lr=1e-3,
                              precision="float32")
            result = train(cfg)
            metrics = evaluate(result.best_path, split="train")
            print(f"\n[acceptance] overfit train IoU {metrics.iou:.4f} "
                  f"F1 {metrics.f1:.4f}")
            assert metrics.iou >= 0.95


class TestCriterion6AblationSwitches:
    def test_block_kinds_and_depths_train_one_epoch(self, blob_dir):
        with criterion(6, "block_kind {kan,mlp} x N in 1..5 train one epoch; "
                          "inspect counts differ (KAN > MLP)"):
            probe = Tensor(np.linspace(0, 1, 2 * 3 * 32 * 32, dtype=np.float32)
                           .reshape(2, 3, 32, 32))
            for kind in ("kan", "mlp"):
                for n_layers in range(1, 6):
                    cfg = small_seg_config(
                        blob_dir, data_dir=str(blob_dir / "blobs_val"),
                        out_dir=str(blob_dir / f"abl_{kind}_{n_layers}"),
                        block_kind=(kind,), n_kan_layers=n_layers, epochs=1)
                    result = train(cfg)
                    assert np.isfinite(result.log_rows[0]["train_loss"])
                    # checkpoint round-trips bit-exactly for every variant
                    m1, _ = load_model_for_inference(result.last_path)
                    m2, _ = load_model_for_inference(result.last_path)
                    with no_grad():
                        assert np.array_equal(m1.eval()(probe).data,
                                              m2.eval()(probe).data)
            kan_info = inspect(small_seg_config(
                blob_dir, data_dir=str(blob_dir / "blobs_val"),
                block_kind=("kan",)))
            mlp_info = inspect(small_seg_config(
                blob_dir, data_dir=str(blob_dir / "blobs_val"),
                block_kind=("mlp",)))
            # per-edge spline tables make KAN blocks the larger variant
            assert kan_info["params"] > mlp_info["params"]
            assert kan_info["flops"] != mlp_info["flops"]
            print(f"\n[acceptance] params kan={kan_info['params']} "
                  f"mlp={mlp_info['params']}")


class TestCriterion7Scheduler:
    def test_cosine_endpoints_and_midpoint(self):
        with criterion(7, "cosine lr endpoints 1e-4/1e-5 and midpoint 5.5e-5 "
                          "at 1e-9"):
            assert abs(cosine_lr(0, 400, 1e-4, 1e-5) - 1e-4) <= 1e-9
            assert abs(cosine_lr(400, 400, 1e-4, 1e-5) - 1e-5) <= 1e-9
            assert abs(cosine_lr(200, 400, 1e-4, 1e-5) - 5.5e-5) <= 1e-9


class TestCriterion8DiffusionStats:
    def test_terminal_marginals_and_alpha_bar(self, rng):
        with criterion(8, "q_sample at t=1000: |mean|<0.1, |std-1|<0.1 over "
                          "1e4 samples; alpha_bar strictly decreasing"):
            schedule = linear_schedule(T=1000)
            assert np.all(np.diff(schedule.alpha_bars) < 0.0)
            x0 = rng.uniform(-1.0, 1.0, size=(1, 8, 8))
            xs = np.stack([
                q_sample(x0, 1000, rng.standard_normal(x0.shape), schedule)
                for _ in range(10_000)])
            assert np.max(np.abs(xs.mean(axis=0))) < 0.1
            assert np.max(np.abs(xs.std(axis=0) - 1.0)) < 0.1


class TestCriterion9DiffusionFixture:
    def test_two_mode_learning_and_sample_quality(self, tmp_path):
        with criterion(9, "two-mode toy: 4 loss windows decreasing; samples' "
                          "nearest-mode MSE <= 50% of noise baseline"):
            make_two_mode_dataset(tmp_path / "modes", size=8, seed=0, copies=8)
            timesteps, beta_end = 100, 0.2  # noise-reaching ramp at toy scale
            cfg = make_config(None, task="diffuse", profile="custom",
                              conv_channels=(64, 96), kan_dims=(128,),
                              in_channels=1, data_dir=str(tmp_path / "modes"),
                              out_dir=str(tmp_path / "diff"), image_size=8,
                              epochs=200, batch_size=8, seed=5, lr=2e-3,
                              timesteps=timesteps, beta_end=beta_end,
                              precision="float32")
            result = train(cfg)
            losses = [r["train_loss"] for r in result.log_rows]
            windows = [float(np.mean(losses[i * 50:(i + 1) * 50]))
                       for i in range(4)]
            print(f"\n[acceptance] diffusion loss windows "
                  f"{[round(w, 4) for w in windows]}")
            assert all(a > b for a, b in zip(windows, windows[1:]))

            model, _ = load_model_for_inference(result.last_path)
            schedule = linear_schedule(timesteps, beta_end=beta_end)
            samples = ddpm_sample(model, schedule, 16, (1, 8, 8), seed=123)
            modes = 2.0 * two_mode_images(8) - 1.0

            def nearest_mode_mse(batch):
                return float(np.mean([
                    min(((img[0] - m) ** 2).mean() for m in modes)
                    for img in batch]))

            noise = np.clip(np.random.default_rng(321)
                            .standard_normal((16, 1, 8, 8)), -1.0, 1.0)
            ratio = nearest_mode_mse(samples) / nearest_mode_mse(noise)
            print(f"[acceptance] nearest-mode MSE ratio {ratio:.3f}")
            assert ratio <= 0.5


class TestCriterion10Determinism:
    def test_logs_checkpoints_resume(self, blob_dir, rng):
        with criterion(10, "bit-identical logs; checkpoint round-trip; "
                           "resume equals uninterrupted (4 epochs)"):
            cfg_a = small_seg_config(blob_dir, data_dir=str(blob_dir / "blobs_val"),
                                     out_dir=str(blob_dir / "det_a"), epochs=4)
            cfg_b = small_seg_config(blob_dir, data_dir=str(blob_dir / "blobs_val"),
                                     out_dir=str(blob_dir / "det_b"), epochs=4)
            res_a = train(cfg_a)
            train(cfg_b)
            assert ((blob_dir / "det_a" / "metrics.tsv").read_bytes()
                    == (blob_dir / "det_b" / "metrics.tsv").read_bytes())

            model_a, _ = load_model_for_inference(res_a.last_path)
            model_b, _ = load_model_for_inference(res_a.last_path)
            probe = Tensor(rng.uniform(0, 1, (2, 3, 32, 32)).astype(np.float32))
            with no_grad():
                out_a = model_a.eval()(probe).data
                out_b = model_b.eval()(probe).data
            assert np.array_equal(out_a, out_b)

            cfg_c = small_seg_config(blob_dir, data_dir=str(blob_dir / "blobs_val"),
                                     out_dir=str(blob_dir / "det_c"), epochs=4)
            train(cfg_c, stop_after=2)
            res_c = train(cfg_c, resume=str(blob_dir / "det_c" / "last.ckpt"))
            _, arrays_a = load_checkpoint(res_a.last_path)
            _, arrays_c = load_checkpoint(res_c.last_path)
            for key in arrays_a:
                assert np.array_equal(arrays_a[key], arrays_c[key]), key
            assert ((blob_dir / "det_a" / "metrics.tsv").read_text()
                    == (blob_dir / "det_c" / "metrics.tsv").read_text())


class TestCriterion11Metrics:
    def test_dice_jaccard_identity_and_fixture(self, rng):
        with criterion(11, "f1 == 2*iou/(1+iou) on 1e3 random pairs at 1e-12; "
                           "hand-counted IoU 1/3, F1 1/2 exact"):
            for _ in range(1000):
                a = rng.random((6, 6)) > rng.random()
                b = rng.random((6, 6)) > rng.random()
                i, d = iou(a, b), f1(a, b)
                assert abs(d - 2.0 * i / (1.0 + i)) <= 1e-12
            pred = np.zeros(10, dtype=bool)
            gt = np.zeros(10, dtype=bool)
            pred[:3] = True
            gt[1:6] = True
            assert iou(pred, gt) == 1.0 / 3.0
            assert f1(pred, gt) == 0.5


class TestSampleCountContract:
    def test_generate_2048_files(self, tmp_path):
        # large-batch generation contract: exactly 2048 zero-padded files;
        # micro model and short schedule keep it desk-testable
        make_two_mode_dataset(tmp_path / "modes", size=8, seed=0, copies=4)
        cfg = make_config(None, task="diffuse", profile="custom",
                          conv_channels=(4, 6), kan_dims=(8,), in_channels=1,
                          data_dir=str(tmp_path / "modes"),
                          out_dir=str(tmp_path / "micro"), image_size=8,
                          epochs=1, batch_size=8, seed=0, timesteps=8,
                          time_embed_dim=8, precision="float32")
        result = train(cfg)
        paths = generate(result.last_path, n=2048, seed=4,
                         out_dir=str(tmp_path / "gen2048"))
        assert len(paths) == 2048
        names = sorted(p.split("/")[-1] for p in paths)
        assert names[0] == "00000.png" and names[-1] == "02047.png"
        assert all((tmp_path / "gen2048" / n).exists() for n in names)
        print("\n[acceptance] supplementary: 2048-sample emission PASS")
