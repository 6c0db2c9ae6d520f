import csv
import json

import pytest

from rcnmer.cli import main, parse_args
from rcnmer.data import read_pgm_raw
from rcnmer.evaluation import load_checkpoint, read_report
from rcnmer.models import named_descriptor

FAST_SOLVER = ["--pyramid-levels", "2", "--warps", "1", "--irls-iters", "3", "--jacobi-sweeps", "5"]
FAST_TRAIN = ["--lr", "0.01", "--batch-size", "4", "--max-epochs", "2", "--dropout", "0",
              "--feature-maps", "4", "--pool", "3", "--resolution", "20"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synth", "--out", str(root / "ds"), "--subjects", "3", "--samples", "3", "--seed", "2"]) == 0
    manifest = root / "ds" / "manifest.jsonl"
    assert main(["extract-flow", "--manifest", str(manifest), "--resolutions", "20,24", *FAST_SOLVER]) == 0
    return root, manifest


def test_gen_and_extract(dataset):
    root, manifest = dataset
    assert manifest.exists()
    assert len(list((root / "ds" / "flows").glob("*.rcnf"))) == 9 * 2


def test_extract_is_idempotent(dataset, capsys):
    _, manifest = dataset
    code, out, _ = run(capsys, "extract-flow", "--manifest", manifest, "--resolutions", "20,24", *FAST_SOLVER)
    assert code == 0
    assert json.loads(out) == {"cache": str(manifest.parent / "flows"), "computed": 0, "written": 0, "reused": 18}


def test_train_and_cam(dataset, tmp_path, capsys):
    _, manifest = dataset
    ckpt = tmp_path / "m.rcnm"
    code, out, _ = run(capsys, "train", "--manifest", manifest, "--out", ckpt, "--model", "rcn-a", *FAST_TRAIN)
    assert code == 0 and json.loads(out)["epochs"] == 2
    model, cfg = load_checkpoint(ckpt)
    assert model.descriptor == named_descriptor("rcn-a", 4, 3, 3, 20) and cfg["max_epochs"] == 2
    code, out, _ = run(capsys, "cam", "--manifest", manifest, "--checkpoint", ckpt, "--out", tmp_path / "cams",
                       "--samples", "sub00_00,sub01_02")
    assert code == 0
    raw, _ = read_pgm_raw(tmp_path / "cams" / "sub01_02_cam.pgm")
    assert raw.shape == (20, 20)
    code, _, err = run(capsys, "cam", "--manifest", manifest, "--checkpoint", ckpt, "--out", tmp_path / "c2",
                       "--samples", "nobody")
    assert code == 2 and "unknown sample" in err


def test_eval_loso_config_file_and_determinism(dataset, tmp_path, capsys):
    _, manifest = dataset
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# training\nlr = 0.01\nbatch-size=4\nmax_epochs=2\ndropout=0\n"
                   "feature-maps=4\npool=3\nresolution=20\nno-timings=true\n")
    for name in ("a", "b"):
        code, _, _ = run(capsys, "eval-loso", "--manifest", manifest, "--config", cfg, "--out", tmp_path / name)
        assert code == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    summary = read_report(tmp_path / "a")["summary"]
    assert summary["train_config"]["max_epochs"] == 2 and "seconds" not in summary


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("max-epochs=7\nlr=0.5\n")
    args = parse_args(["train", "--config", str(cfg), "--lr", "0.25"])
    assert args.max_epochs == 7 and args.lr == 0.25


def test_sweep_csv(dataset, tmp_path, capsys):
    _, manifest = dataset
    out = tmp_path / "sweep.csv"
    code, _, _ = run(capsys, "sweep", "--manifest", manifest, "--out", out, "--models", "model1,model2",
                     "--resolutions", "20,24", "--seeds", "0,1", *FAST_TRAIN)
    assert code == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2 * 2
    assert (tmp_path / "sweep_summary.csv").exists()


def test_search_contrived(tmp_path, capsys):
    out = tmp_path / "search.jsonl"
    code, stdout, _ = run(capsys, "search", "--contrived", "--epochs", "1", "--feature-maps", "4", "--out", out)
    assert code == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert recs[-1]["type"] == "final" and len(recs[-1]["ranking"]) == 28
    assert len(json.loads(stdout)["top3"]) == 3


@pytest.mark.parametrize("argv", [
    [],
    ["fly"],
    ["train", "--model", "resnet"],
    ["sweep", "--out", "x.csv", "--models", "model9", "--manifest", "m"],
    ["train", "--manifest", "m.jsonl"],  # no --out
    ["train", "--lr", "abc"],
])
def test_usage_errors(argv, capsys):
    code, _, err = run(capsys, *argv)
    assert code == 1 and "usage error" in err


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("learning_rate=3\n")
    code, _, err = run(capsys, "train", "--config", cfg)
    assert code == 1 and "unknown option" in err
    cfg.write_text("just words\n")
    assert run(capsys, "train", "--config", cfg)[0] == 1


def test_data_errors(dataset, tmp_path, capsys):
    _, manifest = dataset
    assert run(capsys, "eval-loso", "--manifest", tmp_path / "missing.jsonl")[0] == 2
    # flows were never extracted at R=40
    assert run(capsys, "train", "--manifest", manifest, "--out", tmp_path / "m.rcnm", "--resolution", "40")[0] == 2
    assert run(capsys, "train", "--config", tmp_path / "nope.cfg")[0] == 2
    (tmp_path / "bad.rcnm").write_bytes(b"nope")
    assert run(capsys, "cam", "--manifest", manifest, "--checkpoint", tmp_path / "bad.rcnm", "--out", tmp_path)[0] == 2


def test_numeric_failure(dataset, tmp_path, capsys):
    _, manifest = dataset
    code, _, err = run(capsys, "train", "--manifest", manifest, "--out", tmp_path / "m.rcnm",
                       *FAST_TRAIN, "--lr", "1e30", "--max-epochs", "5")
    assert code == 3 and "numeric failure" in err
