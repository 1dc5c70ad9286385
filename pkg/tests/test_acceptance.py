"""The twelve acceptance criteria, one test each, at their stated tolerances.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import csv
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from conftest import SMALL_AUG, SMALL_UNET

import oracles
from cinessp.data import extract_slices, sample_subset
from cinessp.evaluation import DSCReport, dsc3d, evaluate
from cinessp.phantom import PhantomSpec, generate
from cinessp.presets import preset_table
from cinessp.schedules import ema_momentum
from cinessp.ssp import (MaskSpec, PretrainConfig, dino_loss, dino_step, make_teacher, mim_loss, mim_mask, nt_xent_loss,
                         pcl_loss, pcl_pair_mask, pretrain)
from cinessp.ssp.pretrain import SSP_METHODS, masked_mse
from cinessp.supervised import TrainRunConfig, segmentation_loss, train
from cinessp.unet import UNetConfig, build_unet, transfer_weights

GOLDEN = Path(__file__).parent / "golden"


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-12)


def t64(x):
    return torch.from_numpy(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------- 1


@pytest.mark.acceptance(1, "loss oracles")
def test_loss_oracles(record_property):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {"nt_xent": 0.0, "pcl": 0.0, "mim": 0.0, "dino": 0.0}
    for _ in range(120):
        n, d = int(rng.integers(2, 9)), int(rng.integers(1, 9))
        emb = rng.normal(size=(2 * n, d))
        temp = float(rng.uniform(0.05, 1.0))
        worst["nt_xent"] = max(worst["nt_xent"], rel_err(float(nt_xent_loss(t64(emb), temp)), oracles.nt_xent(emb, temp)))

        pos = rng.random(n)
        thr = float(rng.uniform(0.01, 0.6))
        worst["pcl"] = max(worst["pcl"], rel_err(float(pcl_loss(t64(emb), pos, thr, temp)),
                                                 oracles.pcl(emb, pos, thr, temp)))

        p = int(rng.integers(1, 5))
        gh, gw = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        grid = rng.random((gh, gw)) < 0.5
        grid.flat[rng.integers(grid.size)] = True
        pred, orig = rng.normal(size=(gh * p, gw * p)), rng.normal(size=(gh * p, gw * p))
        worst["mim"] = max(worst["mim"], rel_err(float(mim_loss(t64(pred), orig, grid)),
                                                 oracles.masked_mse(pred, orig, grid)))

        k, b, n_local = int(rng.integers(2, 9)), int(rng.integers(1, 9)), int(rng.integers(0, 4))
        s = [rng.normal(size=(b, k)) for _ in range(2 + n_local)]
        t = [rng.normal(size=(b, k)) for _ in range(2)]
        c = rng.normal(size=(1, k))
        got = float(dino_loss([t64(x) for x in s], [t64(x) for x in t], t64(c), 0.1, 0.04))
        worst["dino"] = max(worst["dino"], rel_err(got, oracles.dino_ce(s, t, c, 0.1, 0.04)))
    elapsed = time.perf_counter() - start
    record_property("detail", ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s")
    assert max(worst.values()) <= 1e-6
    assert elapsed < 60


# ---------------------------------------------------------------------------- 2


@pytest.mark.acceptance(2, "PCL degenerates to NT-Xent; pair masks exact")
def test_pcl_degeneration(record_property):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        n, d = int(rng.integers(2, 9)), int(rng.integers(1, 9))
        emb = t64(rng.normal(size=(2 * n, d)))
        pos = rng.random(n)
        worst = max(worst, rel_err(float(pcl_loss(emb, pos, threshold=1e-12)), float(nt_xent_loss(emb))))
        thr = float(rng.uniform(0, 1))
        assert np.array_equal(pcl_pair_mask(pos, thr).numpy(), oracles.pair_mask(pos, thr))
    record_property("detail", f"max rel err {worst:.1e}")
    assert worst <= 1e-6


# ---------------------------------------------------------------------------- 3


@pytest.mark.acceptance(3, "MIM masking geometry")
def test_mim_geometry(record_property):
    rng = np.random.default_rng(3)
    img = rng.normal(size=(256, 256))
    masked, grid = mim_mask(img, MaskSpec(patch_size=(32, 32), mask_ratio=0.75), rng)
    pix = np.repeat(np.repeat(grid, 32, 0), 32, 1)
    assert grid.shape == (8, 8) and int(grid.sum()) == 48
    assert np.array_equal(masked[~pix], img[~pix])
    assert (masked[pix] == 0.0).all()

    pred = rng.normal(size=(256, 256))
    base = float(mim_loss(t64(pred), img, grid))
    worst = 0.0
    for _ in range(10):
        noise = rng.normal(scale=10, size=img.shape) * ~pix
        worst = max(worst, abs(float(mim_loss(t64(pred + noise), img + noise[::-1, ::-1] * ~pix, grid)) - base))
    record_property("detail", f"48/64 masked; max loss change {worst:.1e}")
    assert worst < 1e-12


# ---------------------------------------------------------------------------- 4


class Toy(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor([[0.7, -0.4]], dtype=torch.float64))

    def forward(self, x):
        return x @ self.w


@pytest.mark.acceptance(4, "DINO teacher follows the EMA recursion")
def test_dino_ema(record_property):
    torch.manual_seed(0)
    student = Toy()
    teacher = make_teacher(student, out_dim=2, momentum=0.9)
    theta0 = teacher.network.w.detach().clone().numpy()
    opt = torch.optim.SGD(student.parameters(), lr=0.5)
    g = torch.Generator().manual_seed(1)
    traj, momenta = [], []
    for k in range(10):
        m = ema_momentum(0.9, k, 10)
        crops_g = [torch.randn(4, 1, generator=g, dtype=torch.float64) for _ in range(2)]
        crops_l = [torch.randn(4, 1, generator=g, dtype=torch.float64) for _ in range(3)]
        _, teacher = dino_step(student, teacher, crops_g, crops_l, opt, ema_m=m)
        traj.append(student.w.detach().clone().numpy())
        momenta.append(m)
        assert teacher.network.w.grad is None or not teacher.network.w.grad.any()
    err = float(np.abs(teacher.network.w.detach().numpy() - oracles.ema_closed_form(theta0, traj, momenta)).max())
    record_property("detail", f"max abs err {err:.1e}; teacher grad none")
    assert err <= 1e-10
    assert not np.allclose(traj[0], traj[-1])


# ---------------------------------------------------------------------------- 5


def _grad_check(loss_fn, x):
    x_t = t64(x).requires_grad_(True)
    loss_fn(x_t).backward()
    analytic = x_t.grad.numpy()
    numeric = oracles.central_difference(lambda v: float(loss_fn(t64(v))), x)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))


@pytest.mark.acceptance(5, "gradients match central differences")
def test_gradient_checks(record_property):
    rng = np.random.default_rng(5)
    pos = rng.random(4)
    grid = np.array([[True, False], [False, True]])
    orig = rng.normal(size=(6, 6))
    target = torch.from_numpy(rng.integers(0, 4, size=(2, 5, 5)))
    center = t64(rng.normal(size=(1, 6)))
    teacher = [t64(rng.normal(size=(3, 6))) for _ in range(2)]
    checks = {
        "nt_xent": (lambda e: nt_xent_loss(e, 0.5), rng.normal(size=(8, 5))),
        "pcl": (lambda e: pcl_loss(e, pos, 0.3, 0.5), rng.normal(size=(8, 5))),
        "mim": (lambda p: mim_loss(p, orig, grid), rng.normal(size=(6, 6))),
        "dino": (lambda s: dino_loss(list(s.split(3)), teacher, center, 0.1, 0.04), rng.normal(size=(12, 6))),
        "segmentation": (lambda lg: segmentation_loss(lg, target), rng.normal(size=(2, 4, 5, 5))),
    }
    errs = {name: _grad_check(fn, x) for name, (fn, x) in checks.items()}
    record_property("detail", ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))
    assert max(errs.values()) <= 1e-3


# ---------------------------------------------------------------------------- 6


@pytest.mark.acceptance(6, "weight transfer policies")
def test_weight_transfer(record_property):
    vols = generate(PhantomSpec(n_subjects=2, slices=3, frames=4, image_size=64, seed=1))
    slices = [s for v in vols for s in extract_slices(v)]
    cfg = PretrainConfig.from_preset("mim", epochs=1, steps_per_epoch=2, batch_size=4, unet=SMALL_UNET,
                                     augmentation=SMALL_AUG, mask={"patch_size": [16, 16]})
    source, _ = pretrain("mim", slices, cfg)
    target_cfg = UNetConfig(**SMALL_UNET)

    target = build_unet(target_cfg, seed=9)
    fresh = {k: v.clone() for k, v in target.state_dict().items()}
    report = transfer_weights(source, target, "encoder_decoder_no_output")
    state = target.state_dict()
    assert {n.split(".")[0] for n in report.transferred} == {"encoder", "decoder"}
    assert {n.split(".")[0] for n in report.initialized} == {"output_heads"}
    assert all(torch.equal(state[n], source.tensors[n]) for n in report.transferred)
    assert all(torch.equal(state[n], fresh[n]) for n in report.initialized)
    assert report.n_transferred + report.n_initialized == len(state)
    mim_counts = (report.n_transferred, report.n_initialized)

    target = build_unet(target_cfg, seed=9)
    report = transfer_weights(source, target, "encoder_only")
    state = target.state_dict()
    assert {n.split(".")[0] for n in report.transferred} == {"encoder"}
    assert {n.split(".")[0] for n in report.initialized} == {"decoder", "output_heads"}
    assert all(torch.equal(state[n], fresh[n]) for n in report.initialized)
    assert all(torch.equal(state[n], source.tensors[n]) for n in report.transferred)
    assert report.n_transferred + report.n_initialized == len(state)
    record_property("detail", f"mim {mim_counts[0]}+{mim_counts[1]}, encoder-only "
                              f"{report.n_transferred}+{report.n_initialized} of {len(state)}")


# ---------------------------------------------------------------------------- 7


@pytest.mark.acceptance(7, "3D Dice equals the confusion-matrix formula")
def test_dsc_oracle(record_property):
    rng = np.random.default_rng(11)
    for _ in range(1000):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=3))
        pred, gt = rng.integers(0, 4, size=shape), rng.integers(0, 4, size=shape)
        c = int(rng.integers(1, 4))
        assert dsc3d(pred, gt, c) == oracles.dice_confusion(pred, gt, c)
    hand = dsc3d(np.array([[[1, 1, 0]]]), np.array([[[0, 1, 1]]]), 1)
    record_property("detail", f"1000 volumes exact; hand case {hand}")
    assert hand == 0.5


# ---------------------------------------------------------------------------- 8


def _tiny(method, seed):
    kw = dict(epochs=2, steps_per_epoch=2, batch_size=4, unet=SMALL_UNET, augmentation=SMALL_AUG, seed=seed)
    if method == "scratch":
        return TrainRunConfig.from_preset("baseline", **kw)
    extra = {"mask": {"patch_size": [16, 16]}, "projection": {"out_dim": 16, "hidden_dim": 32}}
    if method == "dino":
        extra.update(dino={"out_dim": 64, "hidden_dim": 32, "bottleneck_dim": 16},
                     multicrop={"n_local": 2, "global_size": [32, 32], "local_size": [16, 16]})
    return PretrainConfig.from_preset(method, mixed_precision=False, **kw, **extra)


def _run(method, data, seed):
    if method == "scratch":
        return train(_tiny(method, seed), data).final
    return pretrain(method, [s for v in data for s in extract_slices(v)], _tiny(method, seed))[0]


@pytest.mark.acceptance(8, "determinism and seed contract")
def test_determinism(phantoms, record_property):
    data = phantoms[:3]
    for method in ("scratch",) + SSP_METHODS:
        a, b, other = _run(method, data, 4), _run(method, data, 4), _run(method, data, 5)
        assert a.tensors.keys() == b.tensors.keys()
        assert all(torch.equal(a.tensors[k], b.tensors[k]) for k in a.tensors), method
        assert not all(torch.equal(a.tensors[k], other.tensors[k]) for k in a.tensors), method
    ids = [f"s{i:03d}" for i in range(40)]
    assert sample_subset(ids, 10, 0) == sample_subset(ids, 10, 0)
    distinct = {tuple(sorted(sample_subset(ids, 10, s))) for s in range(3)}
    record_property("detail", f"5 methods bit-identical; {len(distinct)} distinct subsets over 3 seeds")
    assert len(distinct) > 1


# ---------------------------------------------------------------------------- 9


@pytest.mark.slow
@pytest.mark.acceptance(9, "phantom overfit reaches DSC >= 0.9")
def test_phantom_overfit(record_property):
    vols = generate(PhantomSpec(n_subjects=5, seed=0))
    cfg = TrainRunConfig.from_preset("baseline", epochs=100, steps_per_epoch=10, batch_size=8, unet=SMALL_UNET,
                                     augmentation={**SMALL_AUG, "enabled": False}, seed=0)
    start = time.perf_counter()
    model = train(cfg, vols).final.build_model()
    dsc = evaluate(model, vols, input_size=(64, 64)).mean_dsc
    record_property("detail", f"train DSC {dsc:.3f} after 1000 steps; {time.perf_counter() - start:.0f}s")
    assert dsc >= 0.9


# --------------------------------------------------------------------------- 10


@pytest.mark.slow
@pytest.mark.acceptance(10, "MIM pretraining helps (stochastic)")
def test_pretraining_efficacy(record_property):
    vols = generate(PhantomSpec(n_subjects=60, slices=6, frames=8, image_size=64, seed=123))
    unlabeled, held = vols[:50], vols[50:]
    unet = {**SMALL_UNET, "feature_cap": 64}
    mask = {"patch_size": [16, 16], "mask_ratio": 0.75, "mask_value": 0.0}
    cfg = PretrainConfig.from_preset("mim", epochs=20, steps_per_epoch=10, batch_size=16, unet=unet,
                                     augmentation=SMALL_AUG, mask=mask, mixed_precision=False)
    ckpt, _ = pretrain("mim", [s for v in unlabeled for s in extract_slices(v)], cfg)

    images = [s.image2d for v in held for s in extract_slices(v)][:200]
    spec = MaskSpec(patch_size=(16, 16), mask_ratio=0.75, mask_value=0.0)
    trained = masked_mse(ckpt, images, spec)
    untrained = masked_mse(build_unet(ckpt.unet_config, seed=0), images, spec)

    labeled, val = held[:2], held[2:6]
    scores = {"scratch": [], "mim": []}
    for init in scores:
        for seed in (0, 1, 2):
            run = TrainRunConfig.from_preset("baseline" if init == "scratch" else "finetune", epochs=30,
                                             steps_per_epoch=10, batch_size=8, seed=seed, unet=unet,
                                             augmentation=SMALL_AUG, init="scratch" if init == "scratch" else "ckpt",
                                             policy=None if init == "scratch" else "encoder_decoder_no_output")
            result = train(run, labeled, val, init_checkpoint=None if init == "scratch" else ckpt)
            scores[init].append(result.history[-1]["val_dsc"])
    scratch, mim = float(np.mean(scores["scratch"])), float(np.mean(scores["mim"]))
    record_property("detail", f"masked MSE {trained:.3f} vs untrained {untrained:.3f}; "
                              f"val DSC mim {mim:.3f} vs scratch {scratch:.3f}")
    assert trained < untrained
    assert mim >= scratch - 0.02


# --------------------------------------------------------------------------- 11


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


@pytest.mark.acceptance(11, "grid tables match golden layouts")
def test_table_fidelity(grid_run, record_property):
    checked = 0
    for experiment in ("subsets", "phase", "vendor", "augmentation"):
        result = grid_run(experiment)
        for stem, path in result.tables.items():
            got, want = _rows(path), _rows(GOLDEN / f"{stem}.csv")
            assert got[0] == want[0] and len(got) == len(want), stem
            for g, w in zip(got[1:], want[1:]):
                assert [c for c, m in zip(g, w) if m != "*"] == [m for m in w if m != "*"], stem
            checked += 1

    # each cell is mean ± sample std (n - 1) over the per-seed reports
    result = grid_run("augmentation")
    reports = {}
    for man in result.manifests:
        d = Path(man["path"]).parent
        label = d.name.split("-")[0]
        reports.setdefault(label, []).extend(
            DSCReport.from_csv(d / a["path"]) for k, a in man["artifacts"].items() if k.startswith("report"))
    ed = [r.filter(phase="ED").mean_dsc for r in reports["augYes"]]
    row = _rows(result.tables["table_augmentation"])[1]
    assert row[1] == f"{statistics.mean(ed):.2f} ± {statistics.stdev(ed):.3f}"
    record_property("detail", f"{checked} tables")


# --------------------------------------------------------------------------- 12


@pytest.mark.acceptance(12, "hyperparameter presets")
def test_presets(record_property):
    expected = {
        "baseline": (1000, 0.01, "polynomial", "sgd", True, 0.99, 3e-5, 32, False),
        "simclr": (100, 0.1, "cosine", "sgd", False, 0.9, 1e-4, 224, True),
        "pcl": (100, 0.1, "cosine", "sgd", False, 0.9, 1e-5, 64, False),
        "dino": (100, 0.0075, "cosine", "sgd", False, 0.9, 1e-4, 64, True),
        "mim": (100, 0.01, "cosine", "sgd", True, 0.99, 3e-5, 128, True),
        "finetune": (1000, 0.005, "polynomial", "sgd", True, 0.99, 3e-5, 32, False),
    }
    keys = ("epochs", "lr", "scheduler", "optimizer", "nesterov", "momentum", "weight_decay", "batch_size",
            "mixed_precision")
    for name, row in expected.items():
        table = preset_table(name)
        assert set(table) == set(keys)
        assert tuple(table[k] for k in keys) == row, name
    record_property("detail", "9 rows x 6 columns")
