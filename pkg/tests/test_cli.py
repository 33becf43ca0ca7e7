import json
import os
import subprocess
import sys

import pytest

from t2diff.cli import InputError, main, parse_ks


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    path = root / "split.t2df"
    assert main(["prepare-data", "--dataset", "synthetic", "--users", "40", "--items", "30",
                 "--max-len", "12", "--out", str(path)]) == 0
    cfg = root / "small.txt"
    cfg.write_text("d = 8\nmax_len = 12\nk_max = 4\nT = 5\nbatch_size = 32\nepochs = 1\n")
    return root, path, cfg


def train(prepared, out, *extra, config=None):
    root, path, cfg = prepared
    return main(["train", "--data", str(path), "--config", str(config or cfg), "--out", str(out),
                 "--max-steps", "2", *extra])


def run_dir(out):
    (d,) = [p for p in out.iterdir() if p.is_dir()]
    return d


def test_parse_ks():
    assert parse_ks("20,2") == [2, 20]
    assert parse_ks("5,5") == [5]
    for bad in ("0", "a,2", "", "-1"):
        with pytest.raises(InputError):
            parse_ks(bad)


def test_prepare_is_reproducible(prepared, tmp_path, capsys):
    _, path, _ = prepared
    main(["prepare-data", "--dataset", "synthetic", "--users", "40", "--items", "30",
          "--max-len", "12", "--out", str(tmp_path / "again.t2df")])
    out = capsys.readouterr().out
    assert "users /" in out and "items /" in out
    assert (tmp_path / "again.t2df").read_bytes() == path.read_bytes()


def test_prepare_ml1m_file(tmp_path, capsys):
    lines = [f"{u}::{i}::4::{1000 + 10 * i}" for u in (1, 2) for i in range(1, 8)]
    (tmp_path / "ratings.dat").write_text("\n".join(lines) + "\n")
    assert main(["prepare-data", "--dataset", "ml1m", "--input", str(tmp_path / "ratings.dat"),
                 "--out", str(tmp_path / "s.t2df")]) == 0
    assert capsys.readouterr().out.startswith("2 users / 7 items / 14 interactions")


def test_prepare_missing_input(tmp_path):
    assert main(["prepare-data", "--dataset", "ml1m", "--input", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "s")]) == 2


def test_train_twice_is_byte_identical(prepared, tmp_path):
    assert train(prepared, tmp_path / "a") == 0
    assert train(prepared, tmp_path / "b") == 0
    a, b = run_dir(tmp_path / "a"), run_dir(tmp_path / "b")
    for name in ("checkpoint.t2pw", "loss_trace.csv", "similarity_trace.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_ablation_flag_in_config(prepared, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text(prepared[2].read_text() + "ablation = mixed_attention_only\n")
    assert train(prepared, tmp_path / "out", config=cfg) == 0
    manifest = json.loads((run_dir(tmp_path / "out") / "manifest.json").read_text())
    assert manifest["unet_params"] == 0


def test_invalid_config_key_is_named(prepared, tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("d = 8\nwidth = 3\n")
    assert train(prepared, tmp_path / "out", config=cfg) == 2
    assert "'width'" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_exits_3(prepared, tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text(prepared[2].read_text() + "lr = 1e30\nepochs = 5\n")
    code = main(["train", "--data", str(prepared[1]), "--config", str(cfg), "--out", str(tmp_path / "o"),
                 "--max-steps", "30"])
    assert code == 3
    assert "diverged at step" in capsys.readouterr().err


def test_eval_k_order_is_normalised(prepared, tmp_path, capsys):
    train(prepared, tmp_path / "out")
    ckpt = run_dir(tmp_path / "out") / "checkpoint.t2pw"
    capsys.readouterr()
    outputs = []
    for ks in ("2,20", "20,2"):
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(prepared[1]), "--k", ks,
                     "--out", str(tmp_path / ks)]) == 0
        outputs.append(capsys.readouterr().out)
    assert outputs[0] == outputs[1]
    rows = outputs[0].splitlines()[1:]
    assert [r.split()[0] for r in rows] == ["2", "20"] and all(len(r.split()) == 3 for r in rows)
    report = json.loads((tmp_path / "2,20" / "report.json").read_text())
    assert sorted(report["recall"]) == ["2", "20"]


def test_eval_bad_k(prepared, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "x"), "--data", str(prepared[1]), "--k", "0"]) == 2


def test_eval_bad_magic(prepared, tmp_path):
    train(prepared, tmp_path / "out")
    ckpt = run_dir(tmp_path / "out") / "checkpoint.t2pw"
    ckpt.write_bytes(b"NOPE" + ckpt.read_bytes()[4:])
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(prepared[1])]) == 4


def test_bad_dataset_magic(tmp_path):
    (tmp_path / "s").write_bytes(b"JUNKJUNKJUNK")
    assert main(["popularity", "--data", str(tmp_path / "s")]) == 4


def test_popularity(prepared, capsys):
    assert main(["popularity", "--data", str(prepared[1]), "--k", "5,20"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3


def test_dump_schedule_rows(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["dump-schedule", "--a", "1e-4", "--b", "0.1", "--T", "50", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "t,beta,alpha_bar,beta_tilde" and len(lines) == 51
    assert lines[1].split(",")[3] == "0.0"


def test_dump_schedule_rejects_bad_T():
    assert main(["dump-schedule", "--T", "0"]) == 2


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--samples", "3"]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("PASS max_rel_err=")


def test_ablate_steps_axis(prepared, tmp_path):
    assert main(["ablate", "--data", str(prepared[1]), "--config", str(prepared[2]), "--out", str(tmp_path),
                 "--axis", "steps", "--max-steps", "1"]) == 0
    rows = (tmp_path / "ablation_steps.csv").read_text().splitlines()[1:]
    per_seed = [r for r in rows if r.split(",")[2] != "mean"]
    assert [r.split(",")[1] for r in per_seed] == ["T=10", "T=50", "T=200"]


def test_console_entry_point_without_numba(tmp_path):
    env = dict(os.environ, T2DIFF_NO_NUMBA="1")
    proc = subprocess.run([sys.executable, "-m", "t2diff.cli", "dump-schedule", "--T", "3"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0 and len(proc.stdout.splitlines()) == 4
