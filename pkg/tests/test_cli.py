import filecmp
import os

import numpy as np
import pytest

from outpaint import cli
from outpaint import ppm
from outpaint import synthdata as SD
from outpaint import trainer as TR


def run(argv):
    return cli.main(argv)


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            out[os.path.relpath(path, root)] = open(path, "rb").read()
    return out


TOY_FLAGS = [
    "--iterations", "3",
    "--batch-size", "2",
    "--t-steps", "10",
    "--infer-steps", "4",
    "--image-size", "12",
    "--center-size", "8",
    "--patch-size", "3",
    "--d-model", "16",
    "--n-blocks", "1",
    "--d-text", "8",
    "--l-center", "4",
    "--l-surround", "4",
    "--checkpoint-every", "2",
]


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("toyrun")
    data = str(root / "data")
    run_dir = str(root / "run")
    assert run(["gen-data", "--out", data, "--n", "10", "--seed", "3",
                "--image-size", "12", "--center-size", "8"]) == 0
    assert run(["train", "--data", data, "--out", run_dir] + TOY_FLAGS) == 0
    return data, run_dir


def test_gen_data_twice_is_byte_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        assert run(["gen-data", "--out", str(out), "--n", "12", "--seed", "7"]) == 0
    assert tree_bytes(a) == tree_bytes(b)


def test_gen_data_uncond_fraction_count(tmp_path):
    out = tmp_path / "d"
    assert run(["gen-data", "--out", str(out), "--n", "100", "--seed", "1",
                "--uncond-fraction", "0.2"]) == 0
    lines = (out / "manifest.tsv").read_text().splitlines()
    assert len(lines) == 100
    uncond = [l for l in lines if l.endswith("Center:; Surrounding:")]
    assert len(uncond) == 20


def test_gen_data_paper_geometry_mask_fraction(tmp_path):
    out = tmp_path / "g"
    assert run(["gen-data", "--out", str(out), "--n", "2", "--seed", "1",
                "--image-size", "192", "--center-size", "128"]) == 0
    mask = ppm.read_pgm(out / "masks" / "00000.pgm")
    assert mask.mean() == pytest.approx(1 - (128 / 192) ** 2)


def test_gen_data_bad_geometry_exit_code(tmp_path):
    assert run(["gen-data", "--out", str(tmp_path / "x"), "--n", "2",
                "--image-size", "15", "--center-size", "8"]) == cli.EXIT_DATA


def test_gen_data_irregular_masks(tmp_path):
    out = tmp_path / "irr"
    assert run(["gen-data", "--out", str(out), "--n", "4", "--seed", "2", "--irregular"]) == 0
    mask = ppm.read_pgm(out / "masks" / "00000.pgm")
    center_block = SD.make_center_mask(16, 8)
    assert not np.array_equal(mask, center_block)
    assert set(np.unique(mask)) <= {0.0, 1.0}


def test_train_writes_log_and_checkpoints(toy_run):
    _, run_dir = toy_run
    log_lines = open(os.path.join(run_dir, "train_log.tsv")).read().splitlines()
    assert len(log_lines) == 3
    step, loss, fusion = log_lines[-1].split("\t")
    assert step == "3" and float(loss) > 0
    assert os.path.exists(os.path.join(run_dir, "model.ckpt"))
    assert os.path.exists(os.path.join(run_dir, "ckpt_000002.bin"))


def test_train_rejects_unknown_config_key(tmp_path, toy_run):
    data, _ = toy_run
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_a_key = 1\n")
    code = run(["train", "--data", data, "--out", str(tmp_path / "r"), "--config", str(cfg)])
    assert code == cli.EXIT_USAGE


def test_sample_deterministic_and_copy(tmp_path, toy_run):
    data, run_dir = toy_run
    ckpt = os.path.join(run_dir, "model.ckpt")
    src = os.path.join(data, "images", "00000.ppm")
    outs = [str(tmp_path / f"s{i}.ppm") for i in range(2)]
    for out in outs:
        code = run(["sample", "--ckpt", ckpt, "--image", src,
                    "--prompt", "Center:circle,red,large; Surrounding:solid,blue,bright",
                    "--steps", "4", "--seed", "11", "--out", out])
        assert code == 0
    assert open(outs[0], "rb").read() == open(outs[1], "rb").read()

    copied = str(tmp_path / "copy.ppm")
    assert run(["sample", "--ckpt", ckpt, "--image", src, "--steps", "4",
                "--seed", "11", "--copy", "--out", copied]) == 0
    gen = ppm.read_ppm(copied)
    source = ppm.read_ppm(src)
    mask = SD.make_center_mask(12, 8)
    np.testing.assert_array_equal(gen[:, mask == 0], source[:, mask == 0])


def test_sample_unconditional_prompt_accepted(tmp_path, toy_run):
    _, run_dir = toy_run
    ckpt = os.path.join(run_dir, "model.ckpt")
    out = str(tmp_path / "u.ppm")
    assert run(["sample", "--ckpt", ckpt, "--prompt", "Center:; Surrounding:",
                "--steps", "3", "--seed", "5", "--out", out]) == 0
    assert os.path.exists(out)


def test_sample_malformed_prompt_exit_code(tmp_path, toy_run):
    _, run_dir = toy_run
    code = run(["sample", "--ckpt", os.path.join(run_dir, "model.ckpt"),
                "--prompt", "not a cs prompt", "--out", str(tmp_path / "x.ppm")])
    assert code == cli.EXIT_DATA


def test_sample_corrupt_checkpoint_exit_code(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    code = run(["sample", "--ckpt", str(bad), "--out", str(tmp_path / "x.ppm")])
    assert code == cli.EXIT_CHECKPOINT


def test_eval_runs_and_is_deterministic(tmp_path, toy_run):
    data, run_dir = toy_run
    ckpt = os.path.join(run_dir, "model.ckpt")
    reports = []
    for name in ("e1", "e2"):
        out = str(tmp_path / name)
        assert run(["eval", "--ckpt", ckpt, "--data", data, "--n", "3",
                    "--steps", "3", "--seed", "2", "--out", out]) == 0
        reports.append(open(os.path.join(out, "report.json")).read())
    assert reports[0] == reports[1]
    assert tree_bytes(tmp_path / "e1") == tree_bytes(tmp_path / "e2")


def test_eval_swapped_mode(tmp_path, toy_run):
    data, run_dir = toy_run
    out = str(tmp_path / "sw")
    assert run(["eval", "--ckpt", run_dir + "/model.ckpt", "--data", data, "--n", "2",
                "--mode", "swapped", "--steps", "3", "--seed", "2", "--out", out]) == 0
    assert os.path.exists(os.path.join(out, "report.txt"))


def test_usage_errors_exit_2():
    assert run([]) == cli.EXIT_USAGE
    assert run(["gen-data"]) == cli.EXIT_USAGE  # missing required flags
    assert run(["train", "--data", "x", "--out", "y", "--bogus"]) == cli.EXIT_USAGE


def test_ablate_smoke(tmp_path, toy_run):
    data, _ = toy_run
    out = str(tmp_path / "ab")
    code = run(["ablate", "--data", data, "--out", out, "--eval-n", "2"] + TOY_FLAGS)
    assert code == 0
    text = open(os.path.join(out, "ablation.tsv")).read()
    assert text.splitlines()[0].startswith("a_mode")
    assert len(text.splitlines()) == 4
