import numpy as np
import pytest

FD_STEP = 1e-5


def rel_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def numeric_grad(f, array: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar f() with respect to ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = array[idx]
        array[idx] = old + h
        plus = f()
        array[idx] = old - h
        minus = f()
        array[idx] = old
        grad[idx] = (plus - minus) / (2 * h)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def lm_corpus(tmp_path):
    words = "the cat sat on the mat and the dog sat on the log".split()
    gen = np.random.default_rng(7)
    lines = [" ".join(gen.choice(words, size=8)) for _ in range(40)]
    train = tmp_path / "train.txt"
    train.write_text("\n".join(lines) + "\n", encoding="utf-8")
    valid = tmp_path / "valid.txt"
    valid.write_text("\n".join(lines[:6]) + "\nthe zebra sat\n", encoding="utf-8")
    return train, valid


@pytest.fixture
def tagged_corpus(tmp_path):
    sentences = [
        (["the", "cat", "sat"], ["DT", "NN", "VBD"]),
        (["a", "dog", "ran"], ["DT", "NN", "VBD"]),
        (["the", "dog", "sat", "down"], ["DT", "NN", "VBD", "RB"]),
        (["cats", "run"], ["NNS", "VBP"]),
    ] * 5
    train = tmp_path / "train.tsv"
    train.write_text(
        "".join("".join(f"{w}\t{t}\n" for w, t in zip(ws, ts)) + "\n" for ws, ts in sentences),
        encoding="utf-8",
    )
    valid = tmp_path / "valid.tsv"
    valid.write_text("the\tDT\ncat\tNN\nran\tVBD\n!\tUH\n\n", encoding="utf-8")
    return train, valid
