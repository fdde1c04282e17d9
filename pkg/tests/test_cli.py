import json
import subprocess
import sys

import pytest

from permssl.cli import main

TINY = ["--encoder-widths", "8,4", "--head-width", "8", "--epochs", "2", "--batch-size", "8"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(out), "--train", "40", "--valid", "10", "--test", "30",
                 "--F", "24", "--T", "8", "--seed", "1"]) == 0
    return out / "manifest.json"


@pytest.fixture(scope="module")
def model(dataset):
    out = dataset.parent.parent / "m.ckpt"
    assert main(["pretrain", "--data", str(dataset), "--out", str(out), *TINY]) == 0
    return out


def test_gen_data_deterministic(tmp_path, dataset):
    out = tmp_path / "again"
    main(["gen-data", "--out", str(out), "--train", "40", "--valid", "10", "--test", "30",
          "--F", "24", "--T", "8", "--seed", "1"])
    for name in ("train.bin", "valid.bin", "test.bin", "manifest.json"):
        assert (out / name).read_bytes() == (dataset.parent / name).read_bytes()


def test_pretrain_outputs_reproducible(tmp_path, dataset, model):
    out = tmp_path / "m.ckpt"
    assert main(["pretrain", "--data", str(dataset), "--out", str(out), *TINY]) == 0
    assert out.read_bytes() == model.read_bytes()
    m1 = model.with_name("m.ckpt.metrics.jsonl").read_text()
    assert (tmp_path / "m.ckpt.metrics.jsonl").read_text() == m1
    rows = [json.loads(l) for l in m1.splitlines()]
    assert [r["split"] for r in rows] == ["valid", "train", "valid", "train", "valid"]
    assert "wall_time" not in rows[0]
    sidecar = json.loads(model.with_name("m.ckpt.metrics.jsonl.config.json").read_text())
    assert sidecar["pretrain"]["epochs"] == 2


def test_config_file_and_flag_precedence(tmp_path, dataset):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"pretrain": {"epochs": 1, "seed": 4, "head_width": 8, "encoder_widths": [8, 4]}}))
    out = tmp_path / "x.ckpt"
    assert main(["pretrain", "--config", str(cfg), "--data", str(dataset), "--out", str(out), "--seed", "6"]) == 0
    meta = json.loads((tmp_path / "x.ckpt.metrics.jsonl.config.json").read_text())["pretrain"]
    assert meta["epochs"] == 1 and meta["seed"] == 6


def test_checkpoint_every(tmp_path, dataset):
    out = tmp_path / "c.ckpt"
    assert main(["pretrain", "--data", str(dataset), "--out", str(out), *TINY, "--checkpoint-every", "1"]) == 0
    assert (tmp_path / "c.epoch1.ckpt").exists() and (tmp_path / "c.epoch2.ckpt").exists()


def test_log_wall_time(tmp_path, dataset):
    out = tmp_path / "w.ckpt"
    assert main(["pretrain", "--data", str(dataset), "--out", str(out), *TINY, "--log-wall-time"]) == 0
    assert "wall_time" in json.loads((tmp_path / "w.ckpt.metrics.jsonl").read_text().splitlines()[0])


def test_evaluate_and_probe_deterministic(tmp_path, dataset, model):
    for i in range(2):
        assert main(["evaluate", "--model", str(model), "--data", str(dataset), "--out", str(tmp_path / f"e{i}.jsonl")]) == 0
        assert main(["probe", "--model", str(model), "--data", str(dataset), "--task", "pitch", "--train-size", "20",
                     "--epochs", "3", "--out", str(tmp_path / f"p{i}.jsonl")]) == 0
    assert (tmp_path / "e0.jsonl").read_bytes() == (tmp_path / "e1.jsonl").read_bytes()
    assert (tmp_path / "p0.jsonl").read_bytes() == (tmp_path / "p1.jsonl").read_bytes()
    assert json.loads((tmp_path / "p0.jsonl").read_text())["metric"] == "mse"


def test_grid_outputs_reproducible(tmp_path, dataset, model, monkeypatch):
    args = ["grid", "--models", str(model), "--data", str(dataset), "--tasks", "family", "instrument",
            "--train-sizes", "10", "20", "--seeds", "0", "1", "--epochs", "2", "--hidden", "4,4"]
    monkeypatch.setenv("PERMSSL_THREADS", "1")
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("PERMSSL_THREADS", "2")
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    for ext in (".jsonl", ".csv"):
        assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == 8
    assert len((tmp_path / "a.csv").read_text().splitlines()) == 5


@pytest.mark.parametrize("argv", [
    ["pretrain", "--data", "d", "--out", "o", "--loss", "fy", "--fixed-set-size", "10"],
    ["pretrain", "--data", "d"],
    ["gen-data"],
    ["gen-data", "--out", "x", "--train", "0"],
    ["gradcheck", "--epsilon", "0"],
    ["bench", "--min-exp", "5", "--max-exp", "3"],
    ["probe", "--model", "m", "--data", "d", "--train-size", "0"],
    ["grid", "--models", "m", "--data", "d"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["pretrain", "--bogus"])
    assert exc.value.code == 2


def test_corrupted_magic_exits_1(tmp_path, dataset, model, capsys):
    bad = tmp_path / "bad"
    bad.mkdir()
    for name in ("train.bin", "valid.bin", "test.bin", "manifest.json"):
        (bad / name).write_bytes((dataset.parent / name).read_bytes())
    raw = bytearray((bad / "train.bin").read_bytes())
    raw[0:1] = b"X"
    (bad / "train.bin").write_bytes(bytes(raw))
    assert main(["pretrain", "--data", str(bad / "manifest.json"), "--out", str(tmp_path / "z.ckpt"), *TINY]) == 1
    assert "FormatError" in capsys.readouterr().err

    ck = bytearray(model.read_bytes())
    ck[0:1] = b"Z"
    (tmp_path / "bad.ckpt").write_bytes(bytes(ck))
    assert main(["evaluate", "--model", str(tmp_path / "bad.ckpt"), "--data", str(dataset)]) == 1


def test_missing_file_exits_1(tmp_path):
    assert main(["evaluate", "--model", str(tmp_path / "none.ckpt"), "--data", str(tmp_path / "m.json")]) == 1


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--trials", "3"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out


def test_bench_csv(tmp_path, capsys):
    assert main(["bench", "--min-exp", "4", "--max-exp", "6", "--repeats", "1", "--mc-samples", "2",
                 "--out", str(tmp_path / "b.csv")]) == 0
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "n,mc_samples,soft_rank_reg_s,soft_rank_perturbed_s"
    assert [int(l.split(",")[0]) for l in lines[1:]] == [16, 32, 64]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "permssl", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()


def test_zero_epochs_checkpoint_is_initialization(tmp_path, dataset):
    import numpy as np

    from permssl.network import load_checkpoint
    from permssl.patches import NoteArrays, load_split
    from permssl.pretext import PretrainConfig, init_for_config, input_stats

    out = tmp_path / "z.ckpt"
    assert main(["pretrain", "--data", str(dataset), "--out", str(out), *TINY[:4], "--epochs", "0", "--seed", "3"]) == 0
    params, meta = load_checkpoint(out)
    cfg = PretrainConfig.from_dict(meta["pretrain"])
    train = NoteArrays.from_records(load_split(dataset, "train"))
    ref = init_for_config(cfg, params.d, stats=input_stats(train))
    assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), ref.arrays()))


def test_perturbed_timing_roughly_linear_in_samples():
    from permssl.cli import bench_table

    small = bench_table(12, 12, 16, 5)[0]["soft_rank_perturbed_s"]
    large = bench_table(12, 12, 128, 5)[0]["soft_rank_perturbed_s"]
    # 8x the samples; allow generous slack for a shared machine
    assert 3.0 < large / small < 20.0
