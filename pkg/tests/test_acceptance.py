"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]`` or ``[FAIL]`` line with its runtime
against the budget. Run ``pytest tests/test_acceptance.py -v`` to see them.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from test_data import handmade_nifti
from test_gradients import GRADIENT_CASES, OP_TOL, run_case
from test_metrics import compare_with_oracle
from test_model import end_to_end_gradient_error

from gliomaseg.cli import main
from gliomaseg.data import (
    BatchGenerator,
    case_samples,
    extract_slices,
    generate_phantom,
    one_hot,
    read_nifti,
    remap_labels,
    split_dataset,
    write_nifti,
)
from gliomaseg.explain import GradCamConfig, Heatmap, gaussian_smooth, gradcam, normalize_heatmap, write_explanation
from gliomaseg.model import ModelConfig, build_model, forward, load_weights, save_weights
from gliomaseg.tensor import Tensor, softmax_channels
from gliomaseg.training import (
    CallbackState,
    History,
    HistoryRow,
    TrainConfig,
    early_stop_update,
    evaluate,
    evaluate_accumulator,
    plateau_update,
    read_history_csv,
    train,
    write_history_csv,
)


@contextmanager
def criterion(capsys, number, title, budget):
    """Print one PASS/FAIL line for the enclosed checks and enforce the time budget."""
    detail = {}
    start = time.perf_counter()
    ok = False
    try:
        yield detail
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        status = "PASS" if ok and elapsed <= budget else "FAIL"
        extra = " ".join(f"{k}={v}" for k, v in detail.items())
        with capsys.disabled():
            print(f"\n[{status}] {number}. {title} ({elapsed:.1f}s, budget {budget}s) {extra}".rstrip())
    assert elapsed <= budget, f"criterion {number} took {elapsed:.1f}s, budget {budget}s"


def test_1_gradient_suite(capsys):
    with criterion(capsys, 1, "gradient suite", 120) as d:
        worst = max(run_case(name, seed) for name in GRADIENT_CASES for seed in (0, 1, 2))
        e2e = end_to_end_gradient_error(seed=0)
        d["op_rel_err"] = f"{worst:.2e}"
        d["model_rel_err"] = f"{e2e:.2e}"
        assert worst <= OP_TOL
        assert e2e <= 1e-3


@pytest.mark.slow
def test_2_overfit(capsys):
    with criterion(capsys, 2, "overfit 8 slices", 600) as d:
        cases = generate_phantom(7, 2, (64, 64, 8), (2, 4))
        samples = [s for c in cases for s in case_samples(c, 2, 4, size=64)]
        assert len(samples) == 8
        gen = BatchGenerator(samples, batch_size=2, seed=0)
        model = build_model(ModelConfig(base_filters=8, depth=4, seed=0))
        cfg = TrainConfig(lr=1e-4, batch_size=2, max_epochs=300, early_stopping=False, reduce_on_plateau=False)
        model, history = train(model, gen, gen, cfg)
        acc = evaluate_accumulator(model, gen)
        d["train_dice"] = f"{acc.dice():.4f}"
        d["loss"] = f"{acc.loss('combined'):.4f}"
        assert acc.dice() >= 0.95
        assert acc.loss("combined") < 0.1


@pytest.mark.slow
def test_3_ablation_direction(capsys):
    with criterion(capsys, 3, "ablation direction", 1800) as d:
        cases = {c.case_id: c for c in generate_phantom(2024, 20, (64, 64, 8), (2, 4))}
        split = split_dataset(sorted(cases), exclusions=(), seed=0)

        def val_dice(modalities, attention):
            def samples(ids):
                return [s for i in ids for s in case_samples(cases[i], 2, 4, modalities, 32)]
            train_gen = BatchGenerator(samples(split.train), 8, seed=0)
            val_gen = BatchGenerator(samples(split.validation), 8, shuffle=False)
            model = build_model(ModelConfig(in_channels=len(modalities), base_filters=8, depth=3,
                                            attention_enabled=attention, seed=0))
            cfg = TrainConfig(lr=1e-3, batch_size=8, max_epochs=40, early_stopping=False, reduce_on_plateau=False)
            model, _ = train(model, train_gen, val_gen, cfg)
            return evaluate(model, val_gen).dice

        dual = val_dice(("flair", "t1ce"), True)
        flair = val_dice(("flair",), True)
        t1ce = val_dice(("t1ce",), True)
        plain = val_dice(("flair", "t1ce"), False)
        d.update(dual=f"{dual:.4f}", flair=f"{flair:.4f}", t1ce=f"{t1ce:.4f}", no_attention=f"{plain:.4f}")
        assert dual >= max(flair, t1ce) - 0.02
        assert dual >= plain - 0.02


def test_4_metric_oracle(capsys):
    with criterion(capsys, 4, "metric oracle equivalence", 60) as d:
        rng = np.random.default_rng(4)
        worst = 0.0
        for k in range(1000):
            t = rng.integers(0, 4, size=(16, 16))
            keep = rng.uniform(size=(16, 16)) < rng.uniform()
            p = np.where(keep, t, rng.integers(0, 4, size=(16, 16)))
            if k % 10 == 0:
                t[t == k // 10 % 4] = (k // 10 + 1) % 4  # leave a class empty now and then
            counts_ok, diff = compare_with_oracle(t, p)
            assert counts_ok, f"confusion counts differ on instance {k}"
            worst = max(worst, diff)
        d["max_ratio_diff"] = f"{worst:.1e}"
        assert worst <= 1e-12


def test_5_structural_invariants(capsys):
    with criterion(capsys, 5, "structural invariants", 120) as d:
        rng = np.random.default_rng(5)
        for scale in (1.0, 10.0, 80.0):
            probs = softmax_channels(Tensor(rng.normal(scale=scale, size=(3, 4, 9, 9)).astype(np.float32))).data
            assert np.abs(probs.sum(axis=1) - 1).max() <= 1e-6
        model = build_model(ModelConfig(base_filters=4, depth=3, seed=5))
        out = forward(model, rng.uniform(size=(2, 2, 32, 32)).astype(np.float32)).data
        d["model_sum_err"] = f"{np.abs(out.sum(axis=1) - 1).max():.1e}"
        assert np.abs(out.sum(axis=1) - 1).max() <= 1e-6

        labels = rng.integers(0, 4, size=(16, 16))
        np.testing.assert_array_equal(one_hot(labels).argmax(axis=0), labels)

        case = generate_phantom(5, 1, (32, 32, 155), (22, 100))[0]
        slices = extract_slices(case)
        assert len(slices) == 100
        samples = case_samples(case, size=32)
        assert len(samples) == 100
        remapped = remap_labels(case.volume("seg").voxels)
        assert 4 not in np.unique(remapped) and 3 in np.unique(remapped)
        assert all(s.mask.shape[0] == 4 for s in samples)


def test_6_gradcam_properties(capsys, tmp_path):
    with criterion(capsys, 6, "Grad-CAM properties", 120):
        case = generate_phantom(6, 1, (32, 32, 6), (1, 3))[0]
        image = case_samples(case, 1, 3, size=32)[1].image
        model = build_model(ModelConfig(base_filters=4, depth=2, seed=6))
        for target in ("tumor", 0, 1, 2, 3):
            raw = gradcam(model, image[None], GradCamConfig(target=target))
            assert raw.values.min() >= 0
            norm = normalize_heatmap(raw)
            assert norm.values.max() == 1.0 or not norm.values.any()
            for scale in (0.5, 4.0, 256.0):
                scaled = normalize_heatmap(gradcam(model, image[None], GradCamConfig(target=target, score_scale=scale)))
                assert scaled.values.tobytes() == norm.values.tobytes()
        for sigma in (0.5, 1.0, 2.0, 5.0):
            out = gaussian_smooth(Heatmap(np.full((40, 40), 0.7)), sigma)
            assert np.abs(out.values - 0.7).max() <= 1e-6
        outputs = []
        for name in ("a", "b"):
            write_explanation(model, image, tmp_path / name, GradCamConfig(), size=128)
            outputs.append({p.name: p.read_bytes() for p in (tmp_path / name).iterdir()})
        assert outputs[0] == outputs[1] and len(outputs[0]) == 6


def test_7_callback_traces(capsys):
    with criterion(capsys, 7, "callback state machines", 120):
        state, lr, trace = CallbackState(), 1e-4, []
        for loss in [1.0, 0.9, 0.8]:
            lr = plateau_update(state, loss, lr, 0.2, 2, 1e-7)
            trace.append(lr)
        assert trace == [1e-4] * 3

        state, lr, trace = CallbackState(), 1e-4, []
        for loss in [1.0] * 6:
            lr = plateau_update(state, loss, lr, 0.2, 5, 1e-7)
            trace.append(lr)
        assert trace[:5] == [1e-4] * 5 and trace[5] == pytest.approx(2e-5, rel=1e-12)

        state, decisions = CallbackState(), []
        for epoch, loss in enumerate([1.0, 0.9, 0.91, 0.92, 0.93], start=1):
            decisions.append(early_stop_update(state, loss, 2, {"w": np.array([epoch])}, epoch))
            if decisions[-1] == "stop":
                break
        assert decisions == ["continue"] * 3 + ["stop"]
        assert state.best_epoch == 2 and state.best_weights["w"][0] == 2

        state = CallbackState()
        assert [early_stop_update(state, v, 1) for v in (1.0, 1.0)] == ["continue", "stop"]

        # end to end: a vanishing lr never improves, so epoch 1 weights come back
        cases = generate_phantom(8, 2, (32, 32, 6), (1, 3))
        gen = BatchGenerator([s for c in cases for s in case_samples(c, 1, 3, size=32)], 4, seed=0)
        model = build_model(ModelConfig(base_filters=2, depth=2, seed=7))
        snapshots = {}
        cfg = TrainConfig(lr=1e-11, min_lr=1e-12, max_epochs=6, early_stop_patience=1, reduce_on_plateau=False)
        model, history = train(model, gen, gen, cfg, on_epoch=lambda r: snapshots.setdefault(r.epoch, model.state()))
        assert len(history) == 2
        assert all(np.array_equal(v, snapshots[1][k]) for k, v in model.state().items())
        assert abs(evaluate_accumulator(model, gen).loss() - history.rows[0].val_loss) <= 1e-6


def test_8_persistence(capsys, tmp_path):
    with criterion(capsys, 8, "persistence", 120):
        rng = np.random.default_rng(8)
        config = ModelConfig(base_filters=4, depth=3, seed=8)
        model = build_model(config)
        for p in model.params.values():
            p.data[...] = rng.normal(size=p.data.shape)
        save_weights(model, tmp_path / "m.weights")
        loaded = load_weights(tmp_path / "m.weights", expected=config)
        assert all(loaded.params[k].data.tobytes() == p.data.tobytes() for k, p in model.params.items())
        save_weights(loaded, tmp_path / "again.weights")
        assert (tmp_path / "again.weights").read_bytes() == (tmp_path / "m.weights").read_bytes()

        vox = rng.normal(size=(6, 5, 4)).astype(np.float32)
        for endian in ("<", ">"):
            fixture = tmp_path / f"fixture{endian == '>'}.nii"
            fixture.write_bytes(handmade_nifti(vox, "float32", endian))
            assert read_nifti(fixture).voxels.tobytes() == vox.astype(np.float64).tobytes()
            ours = tmp_path / f"ours{endian == '>'}.nii"
            write_nifti(ours, vox, "float32", big_endian=endian == ">")
            assert read_nifti(ours).voxels.tobytes() == vox.astype(np.float64).tobytes()

        rows = [HistoryRow(e, 1 / e, 2 / e, 0.5, 0.25 * e, 1e-4 / e, 0.0) for e in range(1, 6)]
        write_history_csv(History(rows), tmp_path / "h.csv")
        back = read_history_csv(tmp_path / "h.csv")
        assert [r.epoch for r in back.rows] == [1, 2, 3, 4, 5]
        for a, b in zip(rows, back.rows):
            assert np.allclose([a.train_loss, a.val_loss, a.train_dice, a.val_dice, a.lr],
                               [b.train_loss, b.val_loss, b.train_dice, b.val_dice, b.lr], rtol=1e-5, atol=0)


def test_9_train_determinism(capsys, tmp_path):
    with criterion(capsys, 9, "cmd_train determinism", 300):
        data = tmp_path / "data"
        assert main(["gen-phantom", "--out", str(data), "--cases", "7", "--seed", "9",
                     "--dims", "32,32,6", "--window", "1,3"]) == 0
        runs = []
        for name in ("first", "second"):
            cfg = {
                "model": {"base_filters": 4, "depth": 2, "seed": 9},
                "train": {"max_epochs": 3, "batch_size": 4, "lr": 1e-3, "record_wall_time": False},
                "data": {"root": str(data), "slice_start": 1, "slice_count": 3, "image_size": 32, "exclusions": []},
                "output_dir": str(tmp_path / name),
            }
            (tmp_path / f"{name}.json").write_text(json.dumps(cfg))
            assert main(["train", "--config", str(tmp_path / f"{name}.json")]) == 0
            runs.append({f: (tmp_path / name / f).read_bytes() for f in ("history.csv", "best.weights")})
        assert runs[0] == runs[1]
