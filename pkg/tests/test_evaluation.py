import sys

import numpy as np
import pytest

from pcbmerge.baselines import average_merge
from pcbmerge.checkpoint_io import Checkpoint, load_checkpoint, save_checkpoint
from pcbmerge.errors import (
    ConfigError,
    EvaluationTimeout,
    InfeasibleSupports,
    NonZeroExit,
    SchemaMismatch,
    UnparsableOutput,
)
from pcbmerge.evaluation import (
    ExternalEvaluator,
    closed_form_average_loss,
    evaluate_external,
    external_fitness,
    gen_synthetic_suite,
    parse_score,
    score_synthetic,
    synthetic_fitness,
)
from pcbmerge.pcb import PcbConfig, pcb_merge

PY = sys.executable


@pytest.fixture
def ckpt_file(tmp_path):
    p = tmp_path / "m.st"
    save_checkpoint(Checkpoint.from_arrays({"w": np.arange(4, dtype=np.float32)}), p)
    return p


def script(tmp_path, body):
    s = tmp_path / "score.py"
    s.write_text(body)
    return s


@pytest.mark.parametrize(
    "out, expected",
    [("score: 0.73\n", 0.73), ("loading\nacc 12\n0.5\n", 0.5), ("score: 1\nnoise\n\n", 1.0), ("SCORE : -2e-3", -0.002)],
)
def test_parse_score(out, expected):
    assert parse_score(out) == expected


def test_parse_score_failure():
    with pytest.raises(UnparsableOutput):
        parse_score("nothing here\n")


def test_placeholder_required():
    with pytest.raises(ConfigError):
        ExternalEvaluator("python eval.py")
    with pytest.raises(ConfigError):
        ExternalEvaluator("x {checkpoint} {checkpoint}")


def test_external_success(tmp_path, ckpt_file):
    s = script(tmp_path, "import sys\nprint('log line')\nprint('score: 0.73')\n")
    ev = ExternalEvaluator(f"{PY} {s} {{checkpoint}}")
    assert evaluate_external(ev, ckpt_file) == 0.73


def test_external_reads_checkpoint(tmp_path, ckpt_file):
    s = script(tmp_path, "import sys\nfrom pcbmerge import load_checkpoint\n"
                         "print(float(load_checkpoint(sys.argv[1])['w'].to_numpy().sum()))\n")
    ev = ExternalEvaluator(f"{PY} {s} {{checkpoint}}")
    assert evaluate_external(ev, ckpt_file) == 6.0
    assert evaluate_external(ev, ckpt_file) == 6.0


def test_external_failures(tmp_path, ckpt_file):
    s = script(tmp_path, "import sys\nsys.stderr.write('bad things')\nsys.exit(1)\n")
    with pytest.raises(NonZeroExit) as exc:
        evaluate_external(ExternalEvaluator(f"{PY} {s} {{checkpoint}}"), ckpt_file)
    assert exc.value.code == 1 and "bad things" in exc.value.stderr_tail
    s = script(tmp_path, "import time\ntime.sleep(5)\n")
    with pytest.raises(EvaluationTimeout):
        evaluate_external(ExternalEvaluator(f"{PY} {s} {{checkpoint}}", timeout_seconds=0.3), ckpt_file)
    s = script(tmp_path, "print('no score')\n")
    with pytest.raises(UnparsableOutput):
        evaluate_external(ExternalEvaluator(f"{PY} {s} {{checkpoint}}"), ckpt_file)
    with pytest.raises(NonZeroExit):
        evaluate_external(ExternalEvaluator("/definitely/not/here {checkpoint}"), ckpt_file)


def test_external_fitness_cleans_up(tmp_path):
    s = script(tmp_path, "print(1.5)\n")
    scratch = tmp_path / "scratch"
    ev = ExternalEvaluator(f"{PY} {s} {{checkpoint}}")
    build = lambda p: Checkpoint.from_arrays({"w": np.full(3, p[0], np.float32)})
    assert external_fitness(ev, build, scratch)([1.0]) == 1.5
    assert list(scratch.iterdir()) == []
    external_fitness(ev, build, scratch, keep=True)([2.0])
    (kept,) = scratch.iterdir()
    np.testing.assert_array_equal(load_checkpoint(kept)["w"].to_numpy(), [2, 2, 2])


def test_scratch_env(tmp_path, monkeypatch):
    monkeypatch.setenv("PCBMERGE_SCRATCH", str(tmp_path / "env"))
    s = script(tmp_path, "print(1)\n")
    ev = ExternalEvaluator(f"{PY} {s} {{checkpoint}}")
    external_fitness(ev, lambda p: Checkpoint.from_arrays({"w": np.zeros(1, np.float32)}), keep=True)([0])
    assert len(list((tmp_path / "env").iterdir())) == 1


def test_suite_construction():
    s = gen_synthetic_suite(2, 10, 0.2, 0.0, seed=1)
    assert [len(x) for x in s.supports] == [2, 2]
    assert not set(s.supports[0]) & set(s.supports[1])
    for i in range(2):
        tau = s.task_vector(i)
        assert set(np.flatnonzero(tau)) == set(s.supports[i])
    t = gen_synthetic_suite(2, 10, 0.2, 0.0, seed=1)
    for a, b in zip(s.task_checkpoints, t.task_checkpoints):
        assert a.equals(b)
    full = gen_synthetic_suite(3, 50, 0.2, 1.0, seed=0)
    assert all(np.array_equal(full.supports[0], x) for x in full.supports)
    half = gen_synthetic_suite(3, 100, 0.2, 0.5, seed=0)
    assert len(set(half.supports[0]) & set(half.supports[1])) == 10


def test_suite_errors():
    with pytest.raises(InfeasibleSupports):
        gen_synthetic_suite(6, 10, 0.2, 0.0)
    with pytest.raises(ConfigError):
        gen_synthetic_suite(2, 10, 0.0)


def test_score_definitions():
    s = gen_synthetic_suite(3, 60, 0.1, 0.0, seed=4)
    losses, _ = score_synthetic(s, s.task_checkpoints[1])
    assert losses[1] == 0
    for j in (0, 2):
        tau = s.task_vector(j)[s.supports[j]]
        assert losses[j] == pytest.approx(float(tau @ tau))
    losses, mean = score_synthetic(s, s.pretrained)
    assert mean == pytest.approx(np.mean([float(s.task_vector(i) @ s.task_vector(i)) for i in range(3)]))
    with pytest.raises(SchemaMismatch):
        score_synthetic(s, Checkpoint.from_arrays({"w": np.zeros(60, np.float32)}))


def test_pcb_vs_average_on_disjoint_suite():
    for n in (2, 4):
        s = gen_synthetic_suite(n, 1024, 0.05, 0.0, seed=11)
        pcb = score_synthetic(s, pcb_merge(s.pretrained, s.task_checkpoints, PcbConfig(mask_ratio=0.05)))[1]
        avg = score_synthetic(s, average_merge(s.task_checkpoints))[1]
        assert pcb <= 1e-10
        assert avg == pytest.approx(closed_form_average_loss(s), rel=1e-6)
        assert avg > pcb


def test_synthetic_fitness_is_negative_mean_loss():
    s = gen_synthetic_suite(2, 40, 0.1, seed=2)
    f = synthetic_fitness(s, lambda p: s.pretrained)
    assert f([1.0]) == -score_synthetic(s, s.pretrained)[1]
