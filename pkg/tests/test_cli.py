from pathlib import Path

import pytest

from sparselm.api.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write_config(path: Path, train_path, **extra) -> Path:
    lines = [
        "task: lm",
        "seed: 2",
        f"train_path: {train_path}",
        f"output_dir: {path.parent / 'runs'}",
        "embedding_size: 6",
        "hidden_size: 8",
        "num_layers: 1",
        "epochs: 1",
        "batch size: 4",
        "bptt_len: 10",
        "learning rate: 1.0",
    ]
    lines += [f"{k}: {v}" for k, v in extra.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_plan_prints_matched_windows(capsys):
    code = run(["plan", "--i", "1150", "--h", "1150", "--n", "5", "--match-dense", "575"])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "344->230" in out
    assert "parameters: 2649600" in out


def test_plan_rejects_infeasible_segments(capsys):
    assert run(["plan", "--i", "10", "--h", "4", "--n", "5"]) == EXIT_USAGE


def test_solve_alpha(capsys):
    code = run(["solve-alpha", "--k", "20", "--delta", "0.2", "--vocab-size", "44000"])
    out = capsys.readouterr().out.splitlines()
    assert code == EXIT_OK
    assert out[0].startswith("alpha=")
    assert float(out[0].split("=")[1]) == pytest.approx(0.751, abs=0.003)
    assert out[2] == "length,words,share"
    assert out[3].startswith("1,")


def test_solve_alpha_writes_allocation(tmp_path, lm_corpus, capsys):
    train_path, _ = lm_corpus
    target = tmp_path / "alloc.csv"
    code = run(["solve-alpha", "--k", "4", "--delta", "0.5", "--corpus", str(train_path), "--output", str(target)])
    assert code == EXIT_OK
    lines = target.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "word_rank,frequency,length"
    assert lines[1].startswith("0,")


def test_solve_alpha_infeasible_density(capsys):
    assert run(["solve-alpha", "--k", "20", "--delta", "0.01"]) == EXIT_USAGE


def test_params_reports_dense_24m(capsys):
    code = run(["params", "-c", str(CONFIGS / "recite-dense-24m.yaml")])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "24,221,600" in out
    assert "(24.22M)" in out


def test_params_reports_widened_1725_model(capsys):
    code = run(["params", "-c", str(CONFIGS / "lm-sparse-1725.yaml")])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "24,222,300" in out
    assert "(24.22M)" in out


def test_eval_without_checkpoint_is_a_data_error(tmp_path, capsys):
    assert run(["eval", "--checkpoint", str(tmp_path), "--split", "valid"]) == EXIT_DATA


def test_params_with_infeasible_override(capsys):
    code = run(["params", "-c", str(CONFIGS / "recite-dense-24m.yaml"), "-o", "segments=[2000, 1, 1]"])
    assert code == EXIT_USAGE


def test_unknown_subcommand_and_missing_args(capsys):
    assert run(["fit"]) == EXIT_USAGE
    assert run([]) == EXIT_USAGE
    assert run(["train"]) == EXIT_USAGE


def test_missing_corpus_is_a_data_error(tmp_path, capsys):
    config = write_config(tmp_path / "run.yaml", tmp_path / "absent.txt")
    assert run(["train", "-c", str(config)]) == EXIT_DATA


def test_train_then_eval(tmp_path, lm_corpus, capsys):
    train_path, valid_path = lm_corpus
    config = write_config(tmp_path / "run.yaml", train_path, valid_path=valid_path)
    assert run(["train", "-c", str(config), "-o", "run_id=cli"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "cli: best valid_loss=" in out

    checkpoint = tmp_path / "runs" / "cli"
    assert run(["eval", "--checkpoint", str(checkpoint), "--split", "valid"]) == EXIT_OK
    fields = capsys.readouterr().out.strip().split(",")
    assert fields[:4] == ["cli", "lm", "0", "valid"]


def test_recite_forces_the_task(tmp_path, lm_corpus, capsys):
    train_path, _ = lm_corpus
    config = write_config(tmp_path / "run.yaml", train_path, run_id="memo")
    assert run(["recite", "-c", str(config)]) == EXIT_OK
    assert "memo: best memorization_accuracy=" in capsys.readouterr().out


def test_train_sweep_writes_summary(tmp_path, lm_corpus, capsys):
    train_path, valid_path = lm_corpus
    config = write_config(tmp_path / "run.yaml", train_path, valid_path=valid_path, run_id="grid")
    with open(config, "a", encoding="utf-8") as f:
        f.write("sweep:\n  seed: [1, 2]\n")
    assert run(["train", "-c", str(config), "--workers", "1"]) == EXIT_OK
    summary = tmp_path / "runs" / "grid-sweep.csv"
    lines = summary.read_text(encoding="utf-8").splitlines()
    assert lines[1].startswith("base,2,0,valid_loss,")


def test_fetch_data_converts_the_recite_text(tmp_path, monkeypatch, capsys):
    from sparselm.services import datasets

    def fake_download(url, path, client=None):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("*** START OF THE PROJECT GUTENBERG EBOOK X ***\none two three\nfour five\n"
                              "*** END OF THE PROJECT GUTENBERG EBOOK X ***\n", encoding="utf-8")
        return path

    monkeypatch.setattr(datasets, "download", fake_download)
    code = run(["fetch-data", "--only", "recite", "--data-dir", str(tmp_path), "--recite-tokens", "3"])
    assert code == EXIT_OK
    assert (tmp_path / "recite-50k.txt").read_text(encoding="utf-8") == "one two three\n"
    assert "recite train: 3 tokens" in capsys.readouterr().out


def test_fetch_data_download_failure_is_a_data_error(tmp_path, monkeypatch):
    from sparselm.errors import CorpusError
    from sparselm.services import datasets

    def failing_download(url, path, client=None):
        raise CorpusError(f"download of {url} failed: offline")

    monkeypatch.setattr(datasets, "download", failing_download)
    assert run(["fetch-data", "--only", "pos", "--data-dir", str(tmp_path)]) == EXIT_DATA
