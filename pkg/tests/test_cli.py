"""End-to-end runs of every subcommand through the in-process entry point."""

import csv
import json

import numpy as np
import pytest

from dance.cli import main
from dance.config import run_config_from_dict
from dance.formats import load_checkpoint, load_dataset, read_ply, save_checkpoint, write_xyz
from dance.model import init_model_params

MICRO_DOC = {
    "model": {"d_en": 8, "n_heads": 2, "n_layers": 1, "c": 2, "r": 2,
              "mlp_widths": [4, 6]},
    "train": {"epochs": 1, "batch_size": 2, "seed": 0,
              "max_input_points": 64, "loss_gt_points": 64},
}


@pytest.fixture()
def micro_config(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(MICRO_DOC))
    return str(p)


@pytest.fixture()
def data_dir(tmp_path):
    out = tmp_path / "data"
    rc = main(["gen-data", "--out", str(out), "--n-per-class", "1",
               "--categories", "sphere,cuboid", "--points", "300", "--seed", "0"])
    assert rc == 0
    return str(out)


def _untrained_ckpt(tmp_path, name="init.ckpt"):
    run = run_config_from_dict(MICRO_DOC)
    params = init_model_params(run.model, 0)
    path = tmp_path / name
    save_checkpoint(path, {n: t.data for n, t in params.tensors.items()}, run.to_dict())
    return str(path)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# gen-data / train
# ---------------------------------------------------------------------------

def test_gen_data_writes_deterministic_dataset(tmp_path):
    args = ["gen-data", "--n-per-class", "2", "--categories", "sphere,cylinder",
            "--points", "256", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    samples = load_dataset(tmp_path / "a")
    assert len(samples) == 4 and sorted({s.label for s in samples}) == [0, 1]
    for sub in ("sample_00000", "sample_00002"):
        a = (tmp_path / "a" / sub / "partial.ply").read_bytes()
        b = (tmp_path / "b" / sub / "partial.ply").read_bytes()
        assert a == b


def test_train_writes_checkpoint_and_history(tmp_path, micro_config, data_dir):
    out = tmp_path / "model.ckpt"
    rc = main(["train", "--config", micro_config, "--data", data_dir,
               "--out", str(out)])
    assert rc == 0
    tensors, cfg = load_checkpoint(out)
    assert cfg["model"]["d_en"] == 8 and cfg["train"]["epochs"] == 1
    assert "encoder.l0.w" in tensors

    hist = _read_csv(str(out) + ".history.csv")
    assert hist[0] == ["epoch", "loss", "cd", "cls_accuracy"]
    assert len(hist) == 2 and hist[1][0] == "0"
    assert all(np.isfinite(float(v)) for v in hist[1][1:])


def test_train_is_reproducible_byte_for_byte(tmp_path, micro_config, data_dir):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    assert main(["train", "--config", micro_config, "--data", data_dir, "--out", str(a)]) == 0
    assert main(["train", "--config", micro_config, "--data", data_dir, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.ckpt.history.csv").read_bytes() == \
        (tmp_path / "b.ckpt.history.csv").read_bytes()


# ---------------------------------------------------------------------------
# complete
# ---------------------------------------------------------------------------

def test_complete_resolution_override_bounds_output(tmp_path, data_dir):
    ckpt = _untrained_ckpt(tmp_path)
    partial = load_dataset(data_dir)[0].partial
    inp = tmp_path / "partial.xyz"
    write_xyz(inp, partial)

    out = tmp_path / "completed.ply"
    rc = main(["complete", "--input", str(inp), "--ckpt", ckpt,
               "--out", str(out), "--r", "3", "--threshold", "0.4"])
    assert rc == 0
    completion = read_ply(out)
    union = read_ply(tmp_path / "completed_union.ply")  # default --out-pred name
    assert len(completion) <= 6 * 3 * 3
    assert len(union) == len(partial) + len(completion)
    # the union's leading rows are the input, untouched
    assert np.array_equal(union.points[:len(partial)],
                          partial.points.astype(np.float32).astype(np.float64))


def test_complete_rejects_unknown_extension(tmp_path, capsys):
    ckpt = _untrained_ckpt(tmp_path)
    bad = tmp_path / "cloud.obj"
    bad.write_text("whatever")
    rc = main(["complete", "--input", str(bad), "--ckpt", ckpt,
               "--out", str(tmp_path / "o.ply")])
    assert rc == 2
    assert "unsupported extension" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval and benches
# ---------------------------------------------------------------------------

def _identity_dataset(tmp_path):
    """Dataset dir whose partial clouds equal their ground truth."""
    src = tmp_path / "src"
    assert main(["gen-data", "--out", str(src), "--n-per-class", "1",
                 "--categories", "sphere,cuboid", "--points", "300", "--seed", "1"]) == 0
    dst = tmp_path / "ident"
    for sub in sorted(src.iterdir()):
        (dst / sub.name).mkdir(parents=True)
        complete = (sub / "complete.ply").read_bytes()
        (dst / sub.name / "partial.ply").write_bytes(complete)
        (dst / sub.name / "complete.ply").write_bytes(complete)
        (dst / sub.name / "meta.json").write_bytes((sub / "meta.json").read_bytes())
    return str(dst)


def test_eval_identity_dataset_scores_perfectly(tmp_path):
    ckpt = _untrained_ckpt(tmp_path)
    data = _identity_dataset(tmp_path)
    out = tmp_path / "metrics.csv"
    # threshold 1.0 keeps no candidates, so the prediction is the input itself
    rc = main(["eval", "--data", data, "--ckpt", ckpt, "--out", str(out),
               "--threshold", "1.0"])
    assert rc == 0
    rows = _read_csv(out)
    assert rows[0] == ["sample_id", "cd_l1", "cd_l2", "dcd", "f1", "precision", "recall"]
    assert len(rows) == 4  # header + 2 samples + mean
    assert rows[-1][0] == "mean"
    for row in rows[1:]:
        assert float(row[1]) == 0.0 and float(row[2]) == 0.0
        assert float(row[4]) == 1.0 and float(row[5]) == 1.0 and float(row[6]) == 1.0


def test_eval_paper_scale_multiplies_cd_columns(tmp_path, data_dir):
    ckpt = _untrained_ckpt(tmp_path)
    plain, scaled = tmp_path / "plain.csv", tmp_path / "scaled.csv"
    base = ["eval", "--data", data_dir, "--ckpt", ckpt, "--seed", "4"]
    assert main(base + ["--out", str(plain)]) == 0
    assert main(base + ["--out", str(scaled), "--paper-scale"]) == 0
    for p_row, s_row in zip(_read_csv(plain)[1:], _read_csv(scaled)[1:]):
        assert float(s_row[1]) == float(p_row[1]) * 1000.0
        assert float(s_row[2]) == float(p_row[2]) * 1000.0
        assert s_row[3:] == p_row[3:]  # dcd/f1/precision/recall untouched


def test_noise_bench_csv(tmp_path, data_dir):
    ckpt = _untrained_ckpt(tmp_path)
    out = tmp_path / "noise.csv"
    rc = main(["noise-bench", "--data", data_dir, "--ckpt", ckpt,
               "--out", str(out), "--sigmas", "0,0.01"])
    assert rc == 0
    rows = _read_csv(out)
    assert rows[0] == ["sigma", "cd_avg"]
    assert [r[0] for r in rows[1:]] == ["0.0", "0.01"]
    assert all(np.isfinite(float(r[1])) for r in rows[1:])


def test_density_bench_csv(tmp_path, data_dir):
    ckpt = _untrained_ckpt(tmp_path)
    out = tmp_path / "density.csv"
    rc = main(["density-bench", "--data", data_dir, "--ckpt", ckpt,
               "--out", str(out), "--r-values", "2,3", "--n-values", "16,32"])
    assert rc == 0
    rows = _read_csv(out)
    assert rows[0] == ["r", "n", "cd_avg", "output_count"]
    assert len(rows) == 5
    for r in rows[1:]:
        assert float(r[3]) <= 6 * int(r[0]) ** 2
        assert np.isfinite(float(r[2]))


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------

def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["complete"]) == 1  # missing required arguments
    assert main(["no-such-command"]) == 1
    capsys.readouterr()


def test_data_and_config_errors_exit_two(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "nowhere"),
               "--out", str(tmp_path / "m.ckpt")])
    assert rc == 2

    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"train": {"lambda": 2.0}}))
    rc = main(["train", "--config", str(bad_cfg),
               "--data", str(tmp_path), "--out", str(tmp_path / "m.ckpt")])
    assert rc == 2
    assert "train.lambda" in capsys.readouterr().err


def test_checkpoint_name_mismatch_exits_two(tmp_path, data_dir, capsys):
    run = run_config_from_dict(MICRO_DOC)
    path = tmp_path / "wrong.ckpt"
    save_checkpoint(path, {"bogus.w": np.zeros((2, 2))}, run.to_dict())
    rc = main(["eval", "--data", data_dir, "--ckpt", str(path),
               "--out", str(tmp_path / "m.csv")])
    assert rc == 2
    assert "tensor names" in capsys.readouterr().err
