"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The ablation sweep (criterion 3) trains three 32x32 models and takes roughly
half an hour on one CPU core. Set ``FADIFF_ACCEPTANCE_DIR`` to keep its
artifacts; an interrupted run resumes from the models already trained.
"""

import csv
import json
import math
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch

from fadiff.alignment import AlignmentHead
from fadiff.checkpoint import Checkpoint
from fadiff.cli import main
from fadiff.evaluation import per_seed_csv
from fadiff.experiment import seed_sweep
from fadiff.expert import Expert, ExpertConfig
from fadiff.schedule import add_noise, build_linear_schedule
from fadiff.ssim import SSIMParams, ssim
from fadiff.trainer import TrainConfig, compute_losses, train_diffusion
from fadiff.unet import UNet, UNetConfig

from test_ssim import BACKENDS, brute_force_ssim

REPO = Path(__file__).resolve().parents[1]
SWEEP_CONFIG = REPO / "configs" / "acceptance_sweep.yaml"

TINY = """\
seed: 11
data: {samples_per_class: 12, image_size: 16}
expert: {epochs: 2, batch_size: 16}
diffusion: {base_channels: 8, time_embed_dim: 16, norm_groups: 4, T: 10, epochs: 2,
            batch_size: 16, learning_rate: 0.001}
sample: {count: 3}
"""


@contextmanager
def criterion(record, number, title):
    start = time.time()
    try:
        yield
    except BaseException:
        record(number, title, False, f"{time.time() - start:.1f}s")
        raise
    record(number, title, True, f"{time.time() - start:.1f}s")


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """Procedural data plus an expert, produced through the CLI."""
    root = tmp_path_factory.mktemp("accept")
    (root / "tiny.yaml").write_text(TINY)
    assert main(["make-data", "--config", str(root / "tiny.yaml"), "--out", str(root / "data")]) == 0
    assert main(["train-expert", "--config", str(root / "tiny.yaml"), "--data",
                 str(root / "data"), "--out", str(root / "expert")]) == 0
    return root


def _train(root, out, *extra):
    return main(["train-diffusion", "--config", str(root / "tiny.yaml"), "--data",
                 str(root / "data"), "--out", str(root / out), *extra])


# -- 1. gradient correctness -----------------------------------------------------------

def test_criterion_1_gradients(acceptance_record):
    with criterion(acceptance_record, 1, "L_noise/L_align/L_total gradients vs finite differences"):
        torch.manual_seed(0)
        cfg = UNetConfig(image_size=8, base_channels=8, norm_groups=4, time_embed_dim=16)
        unet = UNet(cfg).double()
        gen = torch.Generator().manual_seed(0)
        unet.reset_parameters(gen)
        with torch.no_grad():
            # Zero-initialised output would zero every upstream gradient.
            unet.conv_out.weight.normal_(0, 0.2, generator=gen)
        expert = Expert(ExpertConfig(num_classes=8, image_size=8)).double()
        head = AlignmentHead(expert.config.feature_dim, cfg.feature_dim, w1=1.0, w2=1.0).double()
        head.reset_parameters(gen)
        s = build_linear_schedule(10)
        x0 = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1
        y = torch.tensor([1, 6])
        t = torch.tensor([2, 8])
        eps = torch.randn(2, 1, 8, 8, generator=gen, dtype=torch.float64)

        def losses():
            lb = compute_losses(unet, x0, y, t, eps, s, head, expert)
            return {"l_noise": lb.l_noise, "l_align": lb.l_align, "l_total": lb.l_total}

        names = ("l_noise", "l_align", "l_total")
        analytic = {}
        for key in names:
            unet.zero_grad()
            head.zero_grad()
            losses()[key].backward()
            # A missing gradient means the loss does not depend on that tensor.
            analytic[key] = {n: torch.zeros_like(p) if p.grad is None else p.grad.clone()
                             for n, p in list(unet.named_parameters()) + [("w_p", head.w_p)]}

        # 50 entries drawn uniformly over U-Net scalars plus 10 from W_p.
        rng = np.random.default_rng(0)
        params = dict(unet.named_parameters())
        sizes = np.array([p.numel() for p in params.values()])
        flat_ids = rng.choice(sizes.sum(), 50, replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        picks = []
        for fid in flat_ids:
            k = int(np.searchsorted(offsets, fid, side="right") - 1)
            picks.append((list(params)[k], int(fid - offsets[k])))
        picks += [("w_p", int(i)) for i in rng.choice(head.w_p.numel(), 10, replace=False)]
        params["w_p"] = head.w_p

        h = 1e-5
        worst = {k: 0.0 for k in names}
        nonzero = 0
        for name, i in picks:
            flat = params[name].data.view(-1)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = {k: v.item() for k, v in losses().items()}
                flat[i] = orig - h
                down = {k: v.item() for k, v in losses().items()}
                flat[i] = orig
            for key in names:
                fd = (up[key] - down[key]) / (2 * h)
                an = analytic[key][name].view(-1)[i].item()
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
                worst[key] = max(worst[key], rel)
                assert rel <= 1e-3, (key, name, i, an, fd)
            nonzero += abs(analytic["l_total"][name].view(-1)[i].item()) > 1e-8
        assert len(picks) >= 50
        # Guard against a vacuous pass on all-zero gradients.
        assert nonzero >= 0.8 * len(picks)


# -- 2. baseline equivalence ---------------------------------------------------------

def test_criterion_2_baseline_equivalence(tiny_run, acceptance_record):
    with criterion(acceptance_record, 2, "aligned mode with w2=0 reproduces the baseline"):
        expert = str(tiny_run / "expert" / "expert.ckpt")
        assert _train(tiny_run, "eq_base", "--mode", "baseline") == 0
        assert _train(tiny_run, "eq_w2zero", "--mode", "aligned", "--w2", "0", "--expert",
                      expert) == 0
        base = Checkpoint.load(tiny_run / "eq_base" / "diffusion.ckpt")
        al = Checkpoint.load(tiny_run / "eq_w2zero" / "diffusion.ckpt")
        unet_keys = sorted(k for k in base.tensors if k.startswith("unet."))
        assert unet_keys == sorted(k for k in al.tensors if k.startswith("unet."))
        assert set(al.tensors) - set(unet_keys) == {"align.w_p"}
        for k in unet_keys:
            assert base.tensors[k].tobytes() == al.tensors[k].tobytes(), k
        # Stripping the projection head and the two mode switches leaves the same file.
        stripped = Checkpoint("diffusion", json.loads(json.dumps(al.meta)),
                              {k: al.tensors[k] for k in unet_keys})
        for key in ("mode", "w2"):
            stripped.meta["train_config"][key] = base.meta["train_config"][key]
        assert stripped.to_bytes() == (tiny_run / "eq_base" / "diffusion.ckpt").read_bytes()

        rows = {name: list(csv.DictReader((tiny_run / name / "losses.csv").open()))
                for name in ("eq_base", "eq_w2zero")}
        assert [r["l_noise"] for r in rows["eq_base"]] == [r["l_noise"] for r in rows["eq_w2zero"]]
        assert [r["l_total"] for r in rows["eq_base"]] == [r["l_total"] for r in rows["eq_w2zero"]]


# -- 3. ablation sweep --------------------------------------------------------------

@pytest.mark.slow
def test_criterion_3_ablation_sweep(tmp_path, acceptance_record):
    with criterion(acceptance_record, 3, "baseline / aligned-noisy / aligned-clean sweep"):
        out = Path(os.environ.get("FADIFF_ACCEPTANCE_DIR") or tmp_path / "sweep")
        started = time.time()
        assert main(["sweep", "--config", str(SWEEP_CONFIG), "--out", str(out)]) == 0
        summary = json.loads((out / "eval_report.json").read_text())
        run = json.loads((out / "run.json").read_text())
        assert run["config"]["data"]["image_size"] == 32
        assert run["config"]["data"]["samples_per_class"] == 200
        assert run["config"]["diffusion"]["T"] == 200
        assert run["config"]["diffusion"]["epochs"] == 20
        assert len(run["seeds"]) >= 5

        # (a) the expert is a reliable judge.
        assert summary["expert_val_accuracy"] >= 0.95
        # (b) every arm beats chance over 7 evaluated classes.
        assert summary["chance_accuracy"] == pytest.approx(1 / 7)
        models = summary["models"]
        assert set(models) == {"baseline", "aligned-noisy", "aligned-clean"}
        for name, m in models.items():
            assert m["mean_accuracy"] > 1 / 7, (name, m["mean_accuracy"])
            assert len(m["seeds"]) >= 5
            assert np.sum(m["confusion"]["counts"]) == 70 * len(m["seeds"])
        # (c) the headline comparison is reported; a miss is flagged, not failed.
        head = summary["headline"]
        assert head["comparison"] == "aligned-noisy vs baseline"
        diff = models["aligned-noisy"]["mean_accuracy"] - models["baseline"]["mean_accuracy"]
        assert head["mean_accuracy_difference"] == pytest.approx(diff)
        assert head["directional_expectation_met"] == (diff >= 0)
        assert ("flag" in head) == (diff < 0)
        report = (out / "report.md").read_text()
        assert ("FLAG:" in report) == (diff < 0)

        # Same training draws in every arm; aligned arms make progress on L_align.
        assert len(set(summary["timestep_sha256"].values())) == 1
        for arm in ("aligned-noisy", "aligned-clean"):
            rows = list(csv.DictReader((out / "models" / arm / "losses.csv").open()))
            epochs = sorted({int(r["epoch"]) for r in rows})
            means = [np.mean([float(r["l_align"]) for r in rows if int(r["epoch"]) == e])
                     for e in epochs]
            assert means[-1] < means[0], (arm, means[0], means[-1])
        print(f"sweep finished in {time.time() - started:.0f}s")


# -- 4. SSIM oracle -----------------------------------------------------------------

def test_criterion_4_ssim_oracle(acceptance_record):
    with criterion(acceptance_record, 4, "SSIM against the direct definition"):
        rng = np.random.default_rng(2024)
        params = SSIMParams()
        for backend in BACKENDS:
            for _ in range(20):
                a, b = rng.random((16, 16)), rng.random((16, 16))
                assert abs(ssim(a, b, params, backend) - brute_force_ssim(a, b, params)) <= 1e-6
                assert abs(ssim(a, a, params, backend) - 1.0) <= 1e-9
                assert abs(ssim(a, b, params, backend) - ssim(b, a, params, backend)) <= 1e-12


# -- 5. forward-process statistics -----------------------------------------------------

def test_criterion_5_forward_statistics(acceptance_record):
    with criterion(acceptance_record, 5, "x_t mean and variance over 1e5 draws"):
        T, n = 200, 100_000
        s = build_linear_schedule(T)
        gen = torch.Generator().manual_seed(5)
        x0 = torch.tensor([0.7, -0.3, 0.0], dtype=torch.float64).view(1, 3).expand(n, 3)
        for t in (1, T // 2, T - 1):
            eps = torch.randn(n, 3, generator=gen, dtype=torch.float64)
            x_t = add_noise(x0, eps, t, s).x_t.numpy()
            ab = s.alpha_bar[t]
            var = 1.0 - ab
            mean_se = math.sqrt(var / n)
            # Standard error of a Gaussian sample variance.
            var_se = math.sqrt(2.0 * var ** 2 / (n - 1))
            for j in range(3):
                expected_mean = math.sqrt(ab) * float(x0[0, j])
                assert abs(x_t[:, j].mean() - expected_mean) <= 3 * mean_se, (t, j)
                assert abs(x_t[:, j].var(ddof=1) - var) <= 3 * var_se, (t, j)


# -- 6. determinism -----------------------------------------------------------------

def test_criterion_6_determinism(tiny_run, acceptance_record):
    with criterion(acceptance_record, 6, "bit-identical retraining, PNGs and shared x_T"):
        expert = str(tiny_run / "expert" / "expert.ckpt")
        assert _train(tiny_run, "det_a") == 0
        assert _train(tiny_run, "det_b") == 0
        ck = tiny_run / "det_a" / "diffusion.ckpt"
        assert ck.read_bytes() == (tiny_run / "det_b" / "diffusion.ckpt").read_bytes()
        assert _train(tiny_run, "det_aligned", "--mode", "aligned", "--expert", expert) == 0

        def gen(ckpt, out):
            assert main(["generate", "--config", str(tiny_run / "tiny.yaml"), "--checkpoint",
                         str(ckpt), "--seed", "3", "--out", str(tiny_run / out),
                         "--dump-noise"]) == 0
            return {p.name: p.read_bytes() for p in sorted((tiny_run / out).glob("*.png"))}

        first, second = gen(ck, "gen_1"), gen(ck, "gen_2")
        assert len(first) == 7 * 3 and first == second
        aligned = gen(tiny_run / "det_aligned" / "diffusion.ckpt", "gen_aligned")
        assert aligned.keys() == first.keys()
        x_base = np.load(tiny_run / "gen_1" / "initial_noise.npy")
        x_al = np.load(tiny_run / "gen_aligned" / "initial_noise.npy")
        assert x_base.tobytes() == x_al.tobytes()


# -- 7. protocol fidelity ------------------------------------------------------------

def test_criterion_7_protocol(tiny_dataset, tiny_unet_config, tiny_expert, acceptance_record):
    with criterion(acceptance_record, 7, "evaluation counts and confusion identities"):
        ck = train_diffusion(tiny_dataset, TrainConfig(epochs=1, batch_size=72, T=5),
                             tiny_unet_config).checkpoint
        seeds = list(range(15))
        rep = seed_sweep({"m": ck}, seeds, tiny_expert, per_class=10)["m"]
        constant = tiny_dataset.class_names.index("constant")
        assert [r.seed for r in rep.per_seed] == seeds
        for r in rep.per_seed:
            rows = r.confusion.row_sums()
            assert r.total == 70 and rows.sum() == 70
            assert rows[constant] == 0
            assert all(rows[c] == 10 for c in range(8) if c != constant)
            assert int(np.trace(r.confusion.counts)) == r.correct
            assert r.accuracy == r.correct / r.total
            assert len(r.ssim_per_class) == 7 and "constant" not in r.ssim_per_class
        agg = rep.confusion
        assert agg.total == 70 * 15
        assert agg.correct == sum(r.correct for r in rep.per_seed)
        assert agg.row_sums().tolist() == [0 if c == constant else 150 for c in range(8)]
        assert rep.mean_accuracy == pytest.approx(agg.correct / agg.total, abs=1e-15)
        assert len(per_seed_csv([rep]).splitlines()) == 16
