import json
from pathlib import Path

import numpy as np
import pytest

from paravox.cli import EXIT_CHECK, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from paravox.fileformats import read_mel

from conftest import TINY_TRAIN_KW


def write_tiny_corpus_spec(path: Path, seed=3):
    path.write_text(
        f"num_speakers = 3\nmin_tokens = 5\nmax_tokens = 8\nmel_bins = 8\nseed = {seed}\n"
        "frame_rate = 80\n")
    return path


def write_tiny_train_config(path: Path, **overrides):
    kw = dict(TINY_TRAIN_KW)
    kw.update(total_steps=12, batch_size=4)
    kw.update(overrides)
    path.write_text("\n".join(f"{k} = {v}" for k, v in kw.items()) + "\n")
    return path


@pytest.fixture()
def corpus_dir(tmp_path):
    spec = write_tiny_corpus_spec(tmp_path / "corpus.spec")
    out = tmp_path / "corpus"
    assert main(["gen", "--spec", str(spec), "--count", "6", "--out", str(out)]) == EXIT_OK
    return out


def test_gen_outputs_and_manifest(corpus_dir):
    assert (corpus_dir / "corpus.bin").exists()
    assert (corpus_dir / "corpus.txt").exists()
    assert (corpus_dir / "phonemes.txt").exists()
    manifests = list(corpus_dir.glob("manifest*"))
    assert len(manifests) == 1
    manifest = json.loads(manifests[0].read_text())
    assert manifest["command"] == "gen"
    assert manifest["final_metrics"]["utterances"] == 6


def test_gen_same_seed_identical_files(tmp_path, corpus_dir):
    spec = write_tiny_corpus_spec(tmp_path / "again.spec")
    out2 = tmp_path / "corpus2"
    assert main(["gen", "--spec", str(spec), "--count", "6", "--out", str(out2)]) == EXIT_OK
    assert (out2 / "corpus.bin").read_bytes() == (corpus_dir / "corpus.bin").read_bytes()


def test_gen_zero_count_usage_error(tmp_path):
    rc = main(["gen", "--count", "0", "--out", str(tmp_path / "x")])
    assert rc == EXIT_USAGE


def test_gen_refuses_nonempty_out_without_force(tmp_path, corpus_dir):
    rc = main(["gen", "--count", "2", "--out", str(corpus_dir)])
    assert rc == EXIT_USAGE
    rc = main(["gen", "--count", "2", "--out", str(corpus_dir), "--force"])
    assert rc == EXIT_OK


def test_gen_bad_spec_key_is_config_error(tmp_path):
    spec = tmp_path / "bad.spec"
    spec.write_text("bogus_key = 3\nmel_bins = owl\n")
    rc = main(["gen", "--spec", str(spec), "--count", "2", "--out", str(tmp_path / "o")])
    assert rc == EXIT_USAGE


def test_train_synth_round_trip(tmp_path, corpus_dir):
    cfg = write_tiny_train_config(tmp_path / "run.cfg")
    run = tmp_path / "run"
    rc = main(["train", "--config", str(cfg), "--corpus", str(corpus_dir),
               "--variant", "novae", "--out", str(run)])
    assert rc == EXIT_OK
    assert (run / "metrics.csv").exists()
    assert (run / "model.ckpt").exists()
    assert (run / "config.txt").exists()
    assert (run / "dataset.txt").exists()
    assert len(list(run.glob("manifest*"))) == 1
    rows = (run / "metrics.csv").read_text().splitlines()
    assert rows[0].startswith("step,lr,beta,total")
    assert len(rows) == 13  # header + 12 steps

    # untrained gates block synthesis: runtime error, not a crash
    mel_out = tmp_path / "synth" / "utt.mel"
    rc = main(["synth", "--ckpt", str(run / "model.ckpt"), "--text", "aa b sil k .",
               "--speaker", "1", "--out", str(mel_out)])
    assert rc == EXIT_RUNTIME

    # force the gate open by editing the checkpoint, then synthesis works
    from paravox.fileformats import read_arrays, write_arrays
    arrays = read_arrays(run / "model.ckpt")
    arrays["duration_predictor.gate_proj.bias"][:] = 8.0
    write_arrays(run / "model.ckpt", arrays)
    rc = main(["synth", "--ckpt", str(run / "model.ckpt"), "--text", "aa b sil k .",
               "--speaker", "1", "--out", str(mel_out)])
    assert rc == EXIT_OK
    mel = read_mel(mel_out)
    assert mel.shape[1] == 8
    assert mel_out.with_suffix(".mel.txt").exists()

    # bit-identical repetition
    mel_out2 = tmp_path / "synth" / "utt2.mel"
    rc = main(["synth", "--ckpt", str(run / "model.ckpt"), "--text", "aa b sil k .",
               "--speaker", "1", "--out", str(mel_out2)])
    assert rc == EXIT_OK
    assert mel_out.read_bytes()[9:] == mel_out2.read_bytes()[9:]

    # unknown phoneme symbol: usage error naming the symbol
    rc = main(["synth", "--ckpt", str(run / "model.ckpt"), "--text", "aa qq",
               "--speaker", "1", "--out", str(tmp_path / "x.mel")])
    assert rc == EXIT_USAGE


def test_train_fine_requires_beta_keys(tmp_path, corpus_dir):
    cfg = tmp_path / "run.cfg"
    kw = {k: v for k, v in TINY_TRAIN_KW.items() if not k.startswith("kl_beta")}
    kw.update(total_steps=4, batch_size=4)
    cfg.write_text("\n".join(f"{k} = {v}" for k, v in kw.items()) + "\n")
    rc = main(["train", "--config", str(cfg), "--corpus", str(corpus_dir),
               "--variant", "fine", "--out", str(tmp_path / "runf")])
    assert rc == EXIT_USAGE


def test_train_config_problems_listed_all_at_once(tmp_path, corpus_dir, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus = 1\ntotal_steps = soon\nwarmup_steps = 50\n"
                   "decay_start = 10\ndecay_end = 40\n")
    rc = main(["train", "--config", str(cfg), "--corpus", str(corpus_dir),
               "--out", str(tmp_path / "r")])
    assert rc == EXIT_USAGE
    err = capsys.readouterr().err
    assert "bogus" in err and "total_steps" in err


def test_train_resume_reproduces_trajectory(tmp_path, corpus_dir):
    cfg_full = write_tiny_train_config(tmp_path / "full.cfg", total_steps=12)
    run_a = tmp_path / "run_a"
    assert main(["train", "--config", str(cfg_full), "--corpus", str(corpus_dir),
                 "--variant", "novae", "--out", str(run_a)]) == EXIT_OK

    cfg_half = write_tiny_train_config(tmp_path / "half.cfg", total_steps=6)
    run_b1 = tmp_path / "run_b1"
    assert main(["train", "--config", str(cfg_half), "--corpus", str(corpus_dir),
                 "--variant", "novae", "--out", str(run_b1)]) == EXIT_OK

    run_b2 = tmp_path / "run_b2"
    assert main(["train", "--config", str(cfg_full), "--corpus", str(corpus_dir),
                 "--variant", "novae", "--out", str(run_b2),
                 "--resume", str(run_b1 / "state.ckpt")]) == EXIT_OK

    def rows_by_step(path):
        lines = [l for l in Path(path).read_text().splitlines() if l and not l.startswith("step,")]
        return {line.split(",")[0]: line for line in lines}

    full_rows = rows_by_step(run_a / "metrics.csv")
    resumed_rows = rows_by_step(run_b2 / "metrics.csv")
    assert set(resumed_rows) == {"7", "8", "9", "10", "11", "12"}
    for step, line in resumed_rows.items():
        assert full_rows[step] == line


def test_gradcheck_scoped_module(capsys):
    rc = main(["gradcheck", "--module", "upsampler"])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "upsampler" in out and "ok" in out
    assert "decoder" not in out


def test_gradcheck_injected_fault_exits_nonzero(monkeypatch, capsys):
    # corrupt one backward closure: the checker must flag it and exit 3
    import paravox.checks as checks
    import paravox.tensor as pt
    from paravox.gradcheck import grad_check
    from paravox.tensor import Parameter, Tensor

    def broken_check():
        w = Parameter(np.array([[1.0, 2.0]]), "w")
        x = Tensor(np.array([[0.5], [1.5]]))

        def scaled(p):  # backward deliberately off by 1%
            return Tensor(p.data.copy(), (p,), lambda g: p._accum(1.01 * g))

        return grad_check(lambda: (pt.matmul(x, scaled(w)) ** 2.0).sum(), [w])

    monkeypatch.setitem(checks.REGISTRY, "upsampler", broken_check)
    rc = main(["gradcheck", "--module", "upsampler"])
    assert rc == EXIT_CHECK
    assert "FAIL" in capsys.readouterr().out


def test_bench_csv_and_validation(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    rc = main(["bench", "--decoder", "lconv,ar-sim", "--frames", "8,16", "--repeats", "2",
               "--d-model", "16", "--blocks", "1", "--kernel", "3", "--out", str(out)])
    assert rc == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "decoder,frames,mean_ms,stddev_ms,madds"
    assert len(lines) == 5
    rc = main(["bench", "--decoder", "wavenet", "--frames", "8"])
    assert rc == EXIT_USAGE
    rc = main(["bench", "--frames", "8", "--repeats", "0", "--d-model", "16"])
    assert rc == EXIT_USAGE


def test_missing_corpus_is_runtime_error(tmp_path):
    rc = main(["train", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "r"),
               "--steps", "2"])
    assert rc == EXIT_RUNTIME


def test_unknown_subcommand_usage(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
