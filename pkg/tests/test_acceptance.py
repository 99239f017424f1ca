"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The benchmark dataset and the ablation run are shared module fixtures, so the
expensive training happens once. Run with ``-s`` to see lines as they are produced;
they are also repeated in the terminal summary.
"""
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from marseg.bev import BevConfig, pillarize
from marseg.cli import main
from marseg.core import DEFAULT_TAXONOMY as TAX, PointCloud
from marseg.mars import MarsConfig, MarsModel
from marseg.render import discrepancy_activation
from marseg.render import error_raster
from marseg.synth import generate_dataset
from marseg.train_eval import (
    ABLATIONS,
    TrainConfig,
    ablation_suite,
    evaluate_samples,
    load_samples,
    predict_samples,
    train_samples,
)

from e2e_gradcheck import KINK_FREE_SEED, full_check, kink_margins, micro_sample
from oracles import pillarize_oracle
from test_mars import hand_count

# standard synthetic benchmark
BENCH_BEV = BevConfig(40, 40, 0.5)  # covers the +-10 m scene extent
BENCH_POINTS = 2000
BENCH_EPOCHS = 8
BENCH_SEEDS = (0, 1, 2)
BENCH_BUDGET_S = 30 * 60


def sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- 1


def test_1_gradient_integrity(criterion):
    model, sample, _ = micro_sample(KINK_FREE_SEED)
    margin_relu, margin_pool = kink_margins(model, sample)
    res = full_check(KINK_FREE_SEED)
    n = len(res.rel_errors)
    passed = int(np.sum(res.rel_errors < 1e-4))
    ok = passed == n and res.seconds < 60 and res.base_mismatch < 1e-12
    criterion(1, ok, f"{passed}/{n} parameters within rel. error 1e-4 (max {res.rel_errors.max():.2e}), "
                     f"{res.seconds:.1f} s, {len(sample.descriptors)} points, 8x8 BEV, "
                     f"kink margins relu {margin_relu:.1e} pool {margin_pool:.1e}")
    assert len(sample.descriptors) == 50 and sample.bev_frames.shape == (3, 3, 8, 8)
    assert ok


# ---------------------------------------------------------------- 2


def test_2_pillarization_oracle(criterion):
    rng = np.random.default_rng(2024)
    worst, bound = 0.0, 0.0
    for _ in range(1000):
        cfg = BevConfig(int(rng.integers(1, 16)), int(rng.integers(1, 16)), float(rng.uniform(0.1, 2.0)),
                        origin=tuple(rng.uniform(-5.0, 0.0, 2)))
        n = int(rng.integers(0, 300))
        xyz = np.column_stack([rng.uniform(-6, 25, (n, 2)), rng.normal(size=n)])
        inten = rng.uniform(0, 1, n)
        grid = pillarize(PointCloud(xyz, inten), cfg).data
        expected = pillarize_oracle(xyz, inten, cfg.height, cfg.width, cfg.cell_size, cfg.origin)
        worst = max(worst, float(np.abs(grid - expected).max(initial=0.0)))
        bound = max(bound, float(np.abs(grid[..., :2]).max(initial=0.0)))
    ok = worst <= 1e-12 and bound <= 1.0
    criterion(2, ok, f"1000 clouds, max |pillarize - oracle| = {worst:.1e}, max |offset channel| = {bound:.6f}")
    assert ok


# ---------------------------------------------------------------- 6


def test_6_parameter_overhead(criterion):
    report = MarsModel(MarsConfig()).parameter_report()
    hand = hand_count()
    matches = all(report[g] == n for g, n in hand.items()) and report["module"] == hand["cffe"] + hand["bev"] + hand["heads"]
    share = report["module"] / report["backbone"]
    ok = matches and share < 0.25
    criterion(6, ok, f"report matches hand count: {matches}; module {report['module']} "
                     f"(cffe {report['cffe']} + bev {report['bev']} + heads {report['heads']}) vs backbone "
                     f"{report['backbone']} = {100 * share:.1f}% (needs < 25%)")
    assert matches, "parameter report disagrees with the hand count"
    assert share < 0.25, f"module/backbone parameter share {share:.3f}"


# ---------------------------------------------------------------- 7


def test_7_determinism(tmp_path, criterion):
    digests = []
    for run in ("a", "b"):
        d = tmp_path / run
        flags = ["--bev-size", "16x16", "--cell", "1.25", "--epochs", "2", "--seed", "5"]
        assert main(["gen", "--out", str(d / "data"), "--seed", "5", "--scenes", "3", "--points", "300"]) == 0
        assert main(["train", "--dataset", str(d / "data"), "--out", str(d / "run")] + flags) == 0
        assert main(["eval", "--dataset", str(d / "data"), "--checkpoint", str(d / "run" / "model.ckpt"),
                     "--out", str(d / "report.csv")]) == 0
        digests.append((sha(d / "run" / "model.ckpt"), sha(d / "report.csv"), sha(d / "run" / "train_log.csv")))
    ok = digests[0] == digests[1]
    criterion(7, ok, f"checkpoint {digests[0][0][:12]} / {digests[1][0][:12]}, "
                     f"report {digests[0][1][:12]} / {digests[1][1][:12]}")
    assert ok


# ---------------------------------------------------------------- 8


def test_8_overfit(tmp_path, criterion):
    generate_dataset(tmp_path / "five", scenes=5, seed=11, points_per_frame=BENCH_POINTS)
    cfg = TrainConfig(epochs=300, bev=BENCH_BEV)
    mcfg = cfg.model_config(TAX)
    samples = load_samples(tmp_path / "five", mcfg)
    start = time.monotonic()
    result = train_samples(samples, cfg, mcfg)
    rep = evaluate_samples(result.model, samples)
    ok = rep.miou > 0.95
    criterion(8, ok, f"5 scenes, 300 epochs, training mIoU {rep.miou:.4f} (needs > 0.95), "
                     f"{time.monotonic() - start:.0f} s")
    assert ok


# ---------------------------------------------------------------- benchmark (3, 4, 5)


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    generate_dataset(root / "train", scenes=200, seed=1, points_per_frame=BENCH_POINTS)
    generate_dataset(root / "eval", scenes=50, seed=2, points_per_frame=BENCH_POINTS)
    base = TrainConfig(epochs=BENCH_EPOCHS, bev=BENCH_BEV)
    models: dict = {}
    start = time.monotonic()
    rows = ablation_suite(root / "train", root / "eval", base, BENCH_SEEDS, models=models,
                          progress=lambda m: print(m, flush=True))
    elapsed = time.monotonic() - start
    return {"root": root, "rows": rows, "models": models, "elapsed": elapsed, "base": base}


def test_4_ablation_trend(bench, criterion):
    rows = bench["rows"]
    mean = lambda name, key: float(np.mean([getattr(r, key) for r in rows if r.config == name]))
    by_seed = {s: {r.config: r.miou for r in rows if r.seed == s} for s in BENCH_SEEDS}
    gain = 100 * (mean("full", "moving_miou") - mean("baseline", "moving_miou"))
    best = sum(max(by_seed[s], key=by_seed[s].get) == "full" for s in BENCH_SEEDS)
    floor = mean("baseline", "miou") - 0.005
    single = {n: mean(n, "miou") for n in ("+cffe", "+bev")}
    a, b, c = gain >= 5.0, best >= 2, all(v >= floor for v in single.values())
    in_budget = bench["elapsed"] <= BENCH_BUDGET_S
    ladder = ", ".join(f"{n} {mean(n, 'miou'):.4f}/{mean(n, 'moving_miou'):.4f}" for n in ABLATIONS)
    ok = a and b and c and in_budget
    criterion(4, ok, f"(a) moving IoU +{gain:.1f} pts, (b) full best in {best}/3 seeds, "
                     f"(c) +cffe {single['+cffe']:.4f} +bev {single['+bev']:.4f} vs floor {floor:.4f}; "
                     f"{bench['elapsed'] / 60:.1f} min; mIoU/moving: {ladder}")
    assert len({(r.train_hash, r.eval_hash) for r in rows}) == 1
    assert ok


def test_3_discrepancy_contrast(bench, tmp_path, criterion):
    model = bench["models"][("full", 0)]
    model.save(tmp_path / "full.ckpt")
    model = MarsModel.load(tmp_path / "full.ckpt", TAX)
    samples = load_samples(bench["root"] / "eval", model.config)[:20]
    channels = (model.config.frames - 1) * model.config.d_u
    wins, gaps = 0, []
    for s in samples:
        act = discrepancy_activation(model, s, channels=channels).reshape(-1)
        moving = s.labels >= TAX.num_classes
        inside = s.target_pixels >= 0
        mov_pix = np.unique(s.target_pixels[inside & moving])
        static_pix = np.setdiff1d(np.unique(s.target_pixels[inside & ~moving]), mov_pix)
        if len(mov_pix) and len(static_pix):
            a, b = act[mov_pix].mean(), act[static_pix].mean()
            wins += a > b
            gaps.append(a / max(b, 1e-300))
    ok = wins >= 18
    criterion(3, ok, f"moving pillars brighter in {wins}/20 held-out scenes (needs >= 18); "
                     f"median moving/static ratio {np.median(gaps):.2f}")
    assert ok


def test_5_gating_safety(bench, criterion):
    rows = bench["rows"]
    reported = sum(r.gating_violations for r in rows)
    # independent count from raw predictions of every trained model
    C = TAX.num_classes
    recount, points = 0, 0
    cache = {}
    for (name, seed), model in bench["models"].items():
        key = (model.config.use_bev, model.config.mafl_active)
        if key not in cache:
            cache[key] = load_samples(bench["root"] / "eval", model.config)
        for pred in predict_samples(model, cache[key]):
            sem, mov = pred % C, pred >= C
            recount += int(np.sum(mov & ~TAX.movable_mask[sem]))
            points += len(pred)
    ok = reported == 0 and recount == 0
    criterion(5, ok, f"{len(rows)} evaluation runs, {points} predicted points, "
                     f"violations reported {reported}, recounted {recount}")
    assert ok


def test_trained_model_has_fewer_error_pillars(bench):
    trained = bench["models"][("full", 0)]
    untrained = MarsModel(trained.config, seed=0)
    samples = load_samples(bench["root"] / "eval", trained.config)[:10]

    def red(model):
        total = 0
        for s, pred in zip(samples, predict_samples(model, samples)):
            total += error_raster(pred, s.labels, s.target_pixels, model.config.bev)[1]["red_pixels"]
        return total

    assert red(trained) < red(untrained)
