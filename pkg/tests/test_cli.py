import json
import os

import numpy as np
import pytest

from sleepegan import cli, edf
from sleepegan.data import Stage, load_store
from sleepegan.edf import EdfHeader, Interval, SignalHeader

FS = 10
# (token, seconds) for one 20-epoch night
SCRIPT = [("Sleep stage W", 90), ("Sleep stage 1", 90), ("Sleep stage 2", 180), ("Sleep stage 3", 60),
          ("Sleep stage R", 120), ("Sleep stage W", 60)]


def night(seed):
    n_sec = sum(d for _, d in SCRIPT)
    sig = SignalHeader(label="EEG Fpz-Cz", samples_per_record=FS)
    hdr = EdfHeader(patient_id="X", n_records=n_sec, record_duration=1, signals=[sig])
    digital = np.random.default_rng(seed).integers(-2048, 2048, n_sec * FS)
    onset, ivs = 0.0, []
    for token, dur in SCRIPT:
        ivs.append(Interval(onset, dur, token))
        onset += dur
    return edf.write_edf(hdr, [digital]), edf.hypnogram_edf(ivs)


@pytest.fixture
def edf_dir(tmp_path):
    d = tmp_path / "edf"
    d.mkdir()
    for i, name in enumerate(["SC4001", "SC4002", "SC4011"]):
        psg, hyp = night(i)
        (d / f"{name}E0-PSG.edf").write_bytes(psg)
        (d / f"{name}EC-Hypnogram.edf").write_bytes(hyp)
    return d


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_subject_of():
    assert cli.subject_of("/x/SC4001E0-PSG.edf") == "SC400"
    assert cli.subject_of("SC4012E0-PSG.edf") == "SC401"
    assert cli.subject_of("rec7-PSG.edf") == "rec7"


def test_inspect_single_file(edf_dir, capsys):
    psg = edf_dir / "SC4001E0-PSG.edf"
    code, out, _ = run(capsys, "inspect-edf", psg, "--hypnogram", edf_dir / "SC4001EC-Hypnogram.edf")
    assert code == 0
    assert "EEG Fpz-Cz" in out
    rows = dict(line.split("\t")[:2] for line in out.splitlines() if line.split("\t")[0] in ("W", "N1", "total"))
    assert rows == {"W": "5", "N1": "3", "total": "20"}


def test_inspect_directory_aggregates(edf_dir, capsys):
    code, out, _ = run(capsys, "inspect-edf", edf_dir)
    assert code == 0
    assert "recordings\t3" in out
    assert "total\t60\t100.0" in out


def test_ingest_builds_store(edf_dir, tmp_path, capsys):
    store = tmp_path / "e.segd"
    code, out, err = run(capsys, "ingest", "--set", f"data.dir={edf_dir}", "--set", f"data.store={store}",
                         "--out", tmp_path / "run")
    assert code == 0, err
    es = load_store(str(store))
    assert len(es) == 60
    assert es.epoch_length == 30 * FS
    assert sorted(es.subject_ids()) == ["SC400", "SC401"]
    assert np.abs(es.samples).max() <= 1.0
    # two nights of SC400 stay separate recordings
    sc400 = es.select_subjects(["SC400"])
    assert np.sum(np.diff(sc400.index) != 1) == 1
    assert es.class_counts()[Stage.N1] == 9
    manifest = json.loads((tmp_path / "run" / "manifest_ingest.json").read_text())
    assert set(manifest["files"]) == {"e.segd"}


def test_exit_code_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    code, _, err = run(capsys, "synth", "--config", bad, "--out", tmp_path / "r")
    assert code == cli.EXIT_CONFIG
    assert "unknown key" in err


def test_exit_code_data_error(tmp_path, capsys):
    broken = tmp_path / "broken.edf"
    broken.write_bytes(b"0       " + b"x" * 40)
    code, _, err = run(capsys, "inspect-edf", broken)
    assert code == cli.EXIT_DATA
    assert err.startswith("error: data:")
    code, _, _ = run(capsys, "train-clf", "--set", f"data.store={tmp_path / 'missing.segd'}", "--out", tmp_path)
    assert code == cli.EXIT_DATA


def test_exit_code_runtime_failure(tmp_path, capsys, monkeypatch):
    def boom(args, cfg):
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(cli.COMMANDS, "synth", boom)
    code, _, err = run(capsys, "synth", "--out", tmp_path)
    assert code == cli.EXIT_RUNTIME
    assert "disk on fire" in err


def test_generate_without_gan_is_config_error(tmp_path, capsys):
    code, _, err = run(capsys, "generate", "--out", tmp_path)
    assert code == cli.EXIT_CONFIG


def tiny_config(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    here = os.path.dirname(os.path.abspath(__file__))
    cfg.write_text(
        f"include = {os.path.join(here, '..', 'configs', 'desk.cfg')}\n"
        "data.store = epochs.segd\n"
        "synthetic.subjects = 8\n"
        "k_folds = 2\n"
        "clf.epochs = 2\n"
        "gan.epochs = 1\n"
        "gan.batch_size = 4\n"
        "gan.target_stage = N2\n"
        "gan.checkpoint_every = 1\n"
        "ensemble.M = 2\n"
        "ensemble.cache_members = 2\n"
    )
    return cfg


def test_pipeline_commands_and_determinism(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    commands = [["synth"], ["train-gan"], ["generate", "--n", "8"], ["train-clf", "--ablation", "naive"],
                ["cv", "--ablation", "ensemble"]]
    for run_name in ("a", "b"):
        for c in commands:
            code, _, err = run(capsys, *c, "--config", cfg, "--out", tmp_path / run_name)
            assert code == 0, (c, err)
    for name in ("manifest_train-gan.json", "manifest_generate.json", "manifest_train-clf.json", "manifest_cv.json"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes(), name
    manifest = json.loads((tmp_path / "a" / "manifest_cv.json").read_text())
    assert "cv/cv_report.tsv" in manifest["files"]
    assert "seed = 0" in manifest["config"]
    # the sweep needs ten cached members
    code, _, err = run(capsys, "sweep-m", "--config", cfg, "--out", tmp_path / "a")
    assert code == cli.EXIT_CONFIG
