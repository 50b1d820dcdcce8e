import json

import numpy as np
import pytest

from slicevol.cli import fnv1a64, replay, run
from slicevol.volume import load_volume

DEMO = """\
dims = 16,16,16
count = 12
holdout_count = 3
num_samples = 8
ras_pairs = k:3
reg_iters = 40
mmd_tests = 5
mmd_batch = 4
msssim_pairs = 4
latent_dim = 8
"""


def _strip_time(text):
    return [line for line in text.splitlines() if not line.startswith("timestamp")]


@pytest.fixture
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def test_fnv1a64_reference_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_phantom_twice_is_identical(in_tmp):
    for d in ("a", "b"):
        assert run(["phantom", "--dims", "16,16,16", "--count", "2", "--seed", "1", "--out", f"{d}/"]) == 0
    for name in ("phantom_0000.svol", "phantom_0001.slab", "phantoms.txt"):
        assert (in_tmp / "a" / name).read_bytes() == (in_tmp / "b" / name).read_bytes()
    ma = (in_tmp / "a" / "run.manifest").read_text().replace("a/", "X/")
    mb = (in_tmp / "b" / "run.manifest").read_text().replace("b/", "X/")
    assert _strip_time(ma) == _strip_time(mb)
    assert "tool = slicevol" in ma and "seed.phantom = 1" in ma


def test_unknown_flag_exit_1(in_tmp, capsys):
    assert run(["phantom", "--dims", "4,4,4", "--count", "1", "--out", "x", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--bogus" in err


def test_unknown_subcommand_exit_1(capsys):
    assert run(["frobnicate"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_validation_error_exit_1(in_tmp, capsys):
    assert run(["phantom", "--dims", "4,4,4", "--count", "1", "--out", "x"]) == 1
    assert "too small" in capsys.readouterr().err


def test_missing_file_exit_2(in_tmp, capsys):
    assert run(["register", "--moving", "nope.svol", "--fixed", "nope2.svol", "--out", "t.saff"]) == 2
    assert "nope.svol" in capsys.readouterr().err


def test_bad_format_exit_1(in_tmp, capsys):
    (in_tmp / "x.svol").write_bytes(b"XXXX" + bytes(28))
    assert run(["register", "--moving", "x.svol", "--fixed", "x.svol", "--out", "t.saff"]) == 1
    assert "x.svol" in capsys.readouterr().err


def test_threads_env_default(in_tmp, monkeypatch):
    monkeypatch.setenv("SLICEVOL_THREADS", "3")
    assert run(["phantom", "--dims", "16,16,16", "--count", "3", "--out", "t3"]) == 0
    assert run(["--threads", "1", "phantom", "--dims", "16,16,16", "--count", "3", "--out", "t1"]) == 0
    for i in range(3):
        assert (in_tmp / "t3" / f"phantom_{i:04d}.svol").read_bytes() == (in_tmp / "t1" / f"phantom_{i:04d}.svol").read_bytes()


def test_full_chain_of_subcommands(in_tmp, capsys):
    steps = [
        ["phantom", "--dims", "16,16,16", "--count", "10", "--seed", "3", "--out", "raw"],
        ["preprocess", "--in", "raw", "--out", "pp"],
        ["train-codec", "--kind", "linear", "--latent", "6", "--slices", "pp", "--out", "models/codec.scdc"],
        ["encode", "--codec", "models/codec.scdc", "--volumes", "pp", "--out", "codes"],
        ["fit-latent", "--codec", "models/codec.scdc", "--volumes", "pp", "--out", "models/latent.slgm"],
        ["sample", "--latent", "models/latent.slgm", "--codec", "models/codec.scdc", "--count", "4", "--seed", "9",
         "--out", "gen"],
        ["segment-train", "--volumes", "pp", "--out", "models/seg.sseg"],
        ["segment", "--segmenter", "models/seg.sseg", "--in", "gen", "--out", "gen_seg"],
        ["register", "--moving", "gen/sample_0000.svol", "--fixed", "pp/phantom_0000.svol", "--out", "reg/t.saff"],
        ["warp", "--in", "gen_seg/sample_0000.slab", "--transform", "reg/t.saff", "--like", "pp/phantom_0000.svol",
         "--out", "reg/warped.slab"],
        ["metrics", "mmd", "--generated", "gen", "--real", "pp", "--tests", "3", "--batch", "4"],
        ["metrics", "msssim", "--generated", "gen", "--pairs", "3", "--out", "m/msssim.txt"],
        ["ras", "--generated", "gen", "--real", "pp", "--labels", "pp", "--segmenter", "models/seg.sseg",
         "--pairs", "k:2", "--reference", "ground-truth", "--out", "ras/report.txt"],
    ]
    for argv in steps:
        assert run(argv) == 0, argv
    out = capsys.readouterr().out
    assert "metric=mmd mean=" in out and "test=2 value=" in out
    assert np.load(in_tmp / "codes" / "phantom_0000.npy").shape == (16, 6)
    assert load_volume(in_tmp / "pp" / "phantom_0000.svol").data.max() == 1.0
    assert (in_tmp / "m" / "msssim.txt").read_text().splitlines()[-1].startswith("metric=msssim mean=")
    report = (in_tmp / "ras" / "report.txt").read_text().splitlines()
    assert len(report) == 3 and report[-1].startswith("ras=") and report[-1].endswith("pairs=2 failed=0")
    for d in ("raw", "pp", "models", "codes", "gen", "gen_seg", "reg", "ras"):
        assert (in_tmp / d / "run.manifest").exists(), d


def test_dice_metric_on_identical_dirs(in_tmp, capsys):
    run(["phantom", "--dims", "16,16,16", "--count", "2", "--out", "p"])
    capsys.readouterr()
    assert run(["metrics", "dice", "--generated", "p", "--real", "p"]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "metric=dice mean=1.0 stderr=0.0"


def test_manifest_replay_reproduces(in_tmp):
    assert run(["phantom", "--dims", "16,16,16", "--count", "2", "--seed", "4", "--out", "r"]) == 0
    first = (in_tmp / "r" / "phantom_0001.svol").read_bytes()
    (in_tmp / "r" / "phantom_0001.svol").unlink()
    assert replay(in_tmp / "r" / "run.manifest") == 0
    assert (in_tmp / "r" / "phantom_0001.svol").read_bytes() == first


def test_manifest_records_digests(in_tmp):
    run(["phantom", "--dims", "16,16,16", "--count", "1", "--out", "p"])
    run(["train-codec", "--kind", "linear", "--latent", "2", "--slices", "p", "--out", "c/codec.scdc"])
    text = (in_tmp / "c" / "run.manifest").read_text()
    digest = f"{fnv1a64((in_tmp / 'p' / 'phantom_0000.svol').read_bytes()):016x}"
    assert f"input p/phantom_0000.svol fnv1a64={digest}" in text
    assert "output c/codec.scdc fnv1a64=" in text
    assert json.loads(text.split("argv = ")[1].splitlines()[0])[0] == "train-codec"


def test_pipeline_summary_and_determinism(in_tmp, capsys):
    (in_tmp / "demo.cfg").write_text(DEMO)
    assert run(["pipeline", "--config", "demo.cfg", "--out", "one"]) == 0
    assert run(["pipeline", "--config", "demo.cfg", "--out", "two"]) == 0
    s1 = (in_tmp / "one" / "summary.txt").read_text()
    s2 = (in_tmp / "two" / "summary.txt").read_text()
    assert s1 == s2
    for key in ("ras = ", "mmd = ", "msssim = "):
        assert key in s1
    for line in s1.splitlines():
        if line.startswith("artifact "):
            assert (in_tmp / "one" / line.split()[1]).exists()
    assert (in_tmp / "one" / "samples" / "sample_0007.svol").read_bytes() == (
        in_tmp / "two" / "samples" / "sample_0007.svol").read_bytes()


def test_pipeline_stage_named_on_failure(in_tmp, capsys):
    (in_tmp / "big.cfg").write_text("dims = 16,16,16\ncount = 4\nlatent_dim = 1000\n")
    assert run(["pipeline", "--config", "big.cfg", "--out", "big"]) == 1
    assert "stage train-codec" in capsys.readouterr().err


def test_pipeline_rejects_unknown_key(in_tmp, capsys):
    (in_tmp / "bad.cfg").write_text("dims = 16,16,16\nlatent = 4\n")
    assert run(["pipeline", "--config", "bad.cfg"]) == 1
    assert "bad.cfg:2: unknown key 'latent'" in capsys.readouterr().err


def test_help_lists_config_defaults(capsys):
    with pytest.raises(SystemExit):
        run(["pipeline", "--help"])
    out = capsys.readouterr().out
    assert "latent_dim = 16" in out and "reference_mode = ground-truth" in out
