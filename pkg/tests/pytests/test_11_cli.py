import argparse
import json
from concurrent.futures.process import BrokenProcessPool
from types import SimpleNamespace

import mido
import numpy as np
import pytest
from PIL import Image

from pym2a import *
from pym2a.s11_cli import run

pytestmark = pytest.mark.usefixtures("initialize_pym2a")

ZERO_4096 = "4096,18,0 1 2 3 4 5 8 9 10 11 12 15 16 17 20 21 24 29"
ZERO_8192 = "8192,8,0 3 4 5 8 9 12 17"
ZERO_16384 = "16384,2,0 5"


def lines_of(path):
    return path.read_text(encoding="utf-8").splitlines()


@pytest.fixture()
def midi_file(tmp_path, make_smf):
    path = tmp_path / "a4.mid"
    track = [
        mido.Message("note_on", note=69, velocity=100, time=0),
        mido.Message("note_off", note=69, velocity=0, time=480),
        mido.MetaMessage("end_of_track", time=0),
    ]
    path.write_bytes(make_smf([track]))
    return path


@pytest.fixture()
def tone_wav(tmp_path, make_tone):
    path = tmp_path / "tone.wav"
    write_wav(path, 24000, make_tone(440.0, 0.5))
    return path


def test_zero_filters_default(capsys):
    assert run(["zero-filters"]) == 0
    assert capsys.readouterr().out.splitlines() == ["n_fft,count,indices", ZERO_16384]


def test_zero_filters_all(capsys):
    assert run(["zero-filters", "--all"]) == 0
    assert capsys.readouterr().out.splitlines() == [
        "n_fft,count,indices",
        ZERO_4096,
        ZERO_8192,
        ZERO_16384,
    ]


def test_zero_filters_to_file(tmp_path):
    out = tmp_path / "zero.csv"
    assert run(["zero-filters", "--nfft", "4096", "--out", str(out)]) == 0
    assert lines_of(out) == ["n_fft,count,indices", ZERO_4096]


def test_config_file_and_flags(tmp_path, capsys):
    config = tmp_path / "run.ini"
    config.write_text("[stft]\nn_fft = 4096\n", encoding="utf-8")
    assert run(["zero-filters", "--config", str(config)]) == 0
    assert capsys.readouterr().out.splitlines()[1] == ZERO_4096
    # flags override the file
    assert run(["zero-filters", "--config", str(config), "--nfft", "8192"]) == 0
    assert capsys.readouterr().out.splitlines()[1] == ZERO_8192


@pytest.mark.parametrize(
    "argv",
    [[], ["bogus"], ["roll"], ["roll", "--midi", "a.mid"], ["zero-filters", "--nfft", "many"]],
)
def test_usage_errors(argv, capsys):
    assert run(argv) == 1
    assert "usage error:" in capsys.readouterr().err


def test_help(capsys):
    assert run(["--help"]) == 0
    assert "zero-filters" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv",
    [
        ["zero-filters", "--nfft", "2048"],
        ["zero-filters", "--window", "32768"],
        ["zero-filters", "--workers", "-1"],
        ["stats", "--ratings", "r.csv", "--out", "o", "--alpha", "2"],
    ],
)
def test_invalid_configuration(argv, capsys):
    assert run(argv) == 1
    assert "invalid configuration:" in capsys.readouterr().err


def test_invalid_config_file(tmp_path, capsys):
    config = tmp_path / "run.ini"
    config.write_text("[network]\nport = 80\n", encoding="utf-8")
    assert run(["zero-filters", "--config", str(config)]) == 1
    assert "unknown section" in capsys.readouterr().err


def test_input_error(tmp_path, capsys):
    argv = ["roll", "--midi", str(tmp_path / "absent.mid"), "--out", str(tmp_path / "r.bin")]
    assert run(argv) == 1
    assert "input error:" in capsys.readouterr().err
    assert not (tmp_path / "r.bin").exists()


def test_internal_failure(monkeypatch, capsys):
    def boom(self):
        raise RuntimeError("boom")

    monkeypatch.setattr(ZeroFiltersCommand, "run_phase", boom)
    assert run(["zero-filters"]) == 2
    assert "internal failure: RuntimeError: boom" in capsys.readouterr().err


def test_roll(tmp_path, midi_file):
    out = tmp_path / "roll.bin"
    notes = tmp_path / "notes.json"
    argv = ["roll", "--midi", str(midi_file), "--out", str(out), "--notes", str(notes)]
    assert run(argv) == 0
    values = read_matrix(out)
    assert values.shape == (42, 128)
    assert np.allclose(values[:, 69], 100 / 127)
    assert np.count_nonzero(values) == 42
    [note] = json.loads(notes.read_text(encoding="utf-8"))
    assert note["pitch"] == 69
    assert note["velocity"] == 100


def test_roll_chunks(tmp_path, midi_file):
    config = tmp_path / "run.ini"
    config.write_text("[frame]\nframes_per_chunk = 20\n", encoding="utf-8")
    chunks = tmp_path / "chunks"
    argv = [
        "roll",
        "--config",
        str(config),
        "--midi",
        str(midi_file),
        "--out",
        str(tmp_path / "roll.bin"),
        "--chunk-dir",
        str(chunks),
    ]
    assert run(argv) == 0
    assert lines_of(chunks / "chunks.csv") == ["chunk,valid_frames", "0,20", "1,20", "2,2"]
    last = read_matrix(chunks / "chunk_0002.bin")
    assert last.shape == (20, 128)
    assert np.count_nonzero(last) == 2


def test_segment(tmp_path, make_smf):
    track = [
        mido.Message("note_on", note=60, velocity=90, time=0),
        mido.Message("note_off", note=60, velocity=0, time=960),
        mido.Message("note_on", note=62, velocity=90, time=960),
        mido.Message("note_off", note=62, velocity=0, time=960),
        mido.MetaMessage("end_of_track", time=0),
    ]
    midi = tmp_path / "two.mid"
    midi.write_bytes(make_smf([track]))
    out = tmp_path / "segments.csv"
    argv = ["segment", "--midi", str(midi), "--out", str(out)]
    argv += ["--min-length", "0.5", "--max-length", "5"]
    assert run(argv) == 0
    assert lines_of(out) == [
        "segment,start,end,notes",
        "0,0.000000,1.000000,1",
        "1,2.000000,3.000000,1",
    ]
    # a longer minimum length merges them
    assert run(argv[:5] + ["--min-length", "2", "--max-length", "5"]) == 0
    assert lines_of(out) == ["segment,start,end,notes", "0,0.000000,3.000000,2"]


def test_featurize(tmp_path, tone_wav):
    out = tmp_path / "features"
    assert run(["featurize", "--wav", str(tone_wav), "--out", str(out), "--nfft", "4096"]) == 0
    spec = read_matrix(out / "midi_spectrogram.bin")
    assert spec.shape == (42, 128)
    assert int(np.argmax(spec[21])) == 69
    assert read_matrix(out / "chroma.bin").shape == (42, 12)
    posterior = read_matrix(out / "pitch_posterior.bin")
    assert posterior.shape == (42, 360)
    assert np.allclose(posterior.sum(axis=1), 1.0)
    table = lines_of(out / "pitch.csv")
    assert table[0] == "frame_index,hz,confidence"
    assert len(table) == 43


@pytest.mark.parametrize("method", ["additive", "source-filter", "griffin-lim"])
def test_synth_from_midi(method, tmp_path, midi_file):
    out = tmp_path / "out.wav"
    argv = ["synth", "--midi", str(midi_file), "--method", method, "--out", str(out)]
    argv += ["--nfft", "4096", "--iterations", "2"]
    assert run(argv) == 0
    waveform = load_audio(out, 24000)
    assert waveform.size == 42 * 288
    assert np.any(waveform != 0.0)


def test_synth_from_features(tmp_path, tone_wav):
    features = tmp_path / "features"
    assert run(["featurize", "--wav", str(tone_wav), "--out", str(features), "--nfft", "4096"]) == 0
    out = tmp_path / "out.wav"
    argv = ["synth", "--features", str(features / "midi_spectrogram.bin"), "--nfft", "4096"]
    argv += ["--method", "source-filter", "--out", str(out), "--subtype", "float32"]
    assert run(argv) == 0
    sample_rate, data = read_wav(out)
    assert sample_rate == 24000
    assert data.size == 41 * 288


def test_synth_needs_input(tmp_path, capsys):
    assert run(["synth", "--out", str(tmp_path / "o.wav")]) == 1
    assert "additive synthesis needs --midi" in capsys.readouterr().err
    assert run(["synth", "--method", "griffin-lim", "--out", str(tmp_path / "o.wav")]) == 1


def test_rainbow(tmp_path, tone_wav):
    out = tmp_path / "rainbow"
    image = tmp_path / "rainbow.png"
    argv = ["rainbow", "--wav", str(tone_wav), "--out", str(out), "--nfft", "4096"]
    argv += ["--image", str(image), "--max-freq", "2000"]
    assert run(argv) == 0
    assert read_matrix(out / "amplitude_db.bin").shape == (42, 2049)
    assert read_matrix(out / "inst_freq.bin").shape == (42, 2049)
    with Image.open(image) as rendered:
        assert rendered.size[0] == 42


def eval_argv(manifest, out, *extra):
    return ["eval", "--manifest", str(manifest), "--out", str(out), "--nfft", "4096", *extra]


def test_eval(tmp_path, two_sample_manifest, write_ratings):
    out = tmp_path / "report"
    ratings = write_ratings(tmp_path / "ratings.csv", {"bright": 4.5, "noisy": 2.25})
    assert run(eval_argv(two_sample_manifest, out, "--workers", "1", "--ratings", str(ratings))) == 0
    table = lines_of(out / "metrics.csv")
    assert table[0] == "system,pitch,chroma,spec,mos"
    assert [row.split(",")[0] for row in table[1:]] == ["bright", "noisy"]
    assert table[1].endswith(",4.500000")
    rows = json.loads((out / "metrics.json").read_text(encoding="utf-8"))
    assert rows[1]["mos"] == 2.25
    for row in rows:
        assert row["pitch"] >= 0.0
        assert row["spec"] > 0.0


def test_eval_outputs_are_reproducible(tmp_path, two_sample_manifest, write_ratings):
    ratings = write_ratings(tmp_path / "ratings.csv", {"bright": 4.5, "noisy": 2.25})
    first = tmp_path / "first"
    second = tmp_path / "second"
    for out in (first, second):
        argv = eval_argv(two_sample_manifest, out, "--workers", "1", "--ratings", str(ratings))
        assert run(argv) == 0
    for name in ("metrics.csv", "metrics.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


@pytest.mark.slow
def test_eval_worker_pool_matches_inline(tmp_path, two_sample_manifest):
    inline = tmp_path / "inline"
    pooled = tmp_path / "pooled"
    assert run(eval_argv(two_sample_manifest, inline, "--workers", "1")) == 0
    assert run(eval_argv(two_sample_manifest, pooled, "--workers", "2")) == 0
    assert lines_of(inline / "metrics.csv") == lines_of(pooled / "metrics.csv")
    assert lines_of(inline / "metrics.csv")[1].endswith(",")


def test_eval_failed_sample(tmp_path, two_sample_manifest, capsys):
    (tmp_path / "s2_noisy.wav").unlink()
    out = tmp_path / "report"
    assert run(eval_argv(two_sample_manifest, out, "--workers", "1")) == 1
    assert "sample s2 failed (input)" in capsys.readouterr().err
    assert len(lines_of(out / "metrics.csv")) == 3


def test_notelevel(tmp_path, two_sample_manifest):
    ratings = tmp_path / "ratings.csv"
    ratings.write_text(
        "listener_id,system_id,sample_id,score\n"
        "l1,bright,s1,4\nl1,bright,s2,2\nl1,noisy,s1,1\n",
        encoding="utf-8",
    )
    out = tmp_path / "notes.csv"
    argv = ["notelevel", "--manifest", str(two_sample_manifest), "--system", "bright"]
    argv += ["--out", str(out), "--ratings", str(ratings), "--nfft", "4096", "--workers", "1"]
    assert run(argv) == 0
    table = lines_of(out)
    assert table[0] == "note,mos,pitch_ce,spec_mse,support"
    rows = [row.split(",") for row in table[1:]]
    assert [(row[0], row[1], row[4]) for row in rows] == [
        ("60", "4.000000", "1"),
        ("67", "2.000000", "1"),
    ]


def test_notelevel_errors(tmp_path, two_sample_manifest, capsys):
    argv = ["notelevel", "--manifest", str(two_sample_manifest), "--out", str(tmp_path / "n.csv")]
    assert run(argv + ["--system", "wavenet"]) == 1
    assert "no sample has system 'wavenet'" in capsys.readouterr().err
    ratings = tmp_path / "ratings.csv"
    ratings.write_text("listener_id,system_id,sample_id,score\nl1,bright,s9,4\n", encoding="utf-8")
    assert run(argv + ["--system", "bright", "--ratings", str(ratings)]) == 1
    assert "['s9']" in capsys.readouterr().err


def test_stats(tmp_path, write_ratings):
    ratings = write_ratings(tmp_path / "ratings.csv", {"a": 4.1, "b": 1.88, "c": 4.1})
    out = tmp_path / "stats"
    assert run(["stats", "--ratings", str(ratings), "--out", str(out)]) == 0
    assert lines_of(out / "mos.csv") == [
        "system,mos,count",
        "a,4.100000,100",
        "b,1.880000,100",
        "c,4.100000,100",
    ]
    assert lines_of(out / "significance.csv") == [
        "system,a,b,c",
        "a,0,1,0",
        "b,1,0,1",
        "c,0,1,0",
    ]
    assert len(lines_of(out / "significance_p.csv")) == 4
    with Image.open(out / "significance.png") as image:
        assert image.size == (48, 48)


def test_stats_by_sample(tmp_path, write_ratings):
    ratings = write_ratings(tmp_path / "ratings.csv", {"a": 4.1, "b": 1.88})
    out = tmp_path / "stats"
    assert run(["stats", "--ratings", str(ratings), "--out", str(out), "--unit", "sample"]) == 0
    # ten fully separated per-sample means each: p = 2 / C(20, 10)
    assert lines_of(out / "significance_p.csv")[1] == "a,1.000000,0.000011"


def write_manifest(tmp_path, entries):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"entries": entries}), encoding="utf-8")
    return path


def entry(sample_id, **systems):
    return {
        "sample_id": sample_id,
        "midi_path": f"{sample_id}.mid",
        "natural_wav_path": f"{sample_id}.wav",
        "systems": systems,
    }


def test_manifest_load(tmp_path, two_sample_manifest):
    manifest = Manifest.load(two_sample_manifest)
    assert manifest.root == str(tmp_path)
    assert [e.sample_id for e in manifest.entries] == ["s1", "s2"]
    assert manifest.system_ids() == ["bright", "noisy"]
    first = manifest.entries[0]
    assert first.system_path("bright") == str(tmp_path / "s1_bright.wav")
    with pytest.raises(M2AManifestError):
        first.system_path("wavenet")


def test_manifest_sorted_by_sample_id(tmp_path):
    manifest = Manifest.load(write_manifest(tmp_path, [entry("b", x="b.wav"), entry("a")]))
    assert [e.sample_id for e in manifest.entries] == ["a", "b"]
    with pytest.raises(M2AManifestError, match="missing file"):
        manifest.entries[0].resolve("a.wav")


@pytest.mark.parametrize(
    "entries",
    [
        [entry("a"), entry("a")],
        [{"sample_id": "a", "midi_path": "a.mid"}],
        [{**entry("a"), "systems": ["x.wav"]}],
        [{**entry("a"), "midi_path": 3}],
        ["a"],
    ],
)
def test_manifest_errors(entries, tmp_path):
    with pytest.raises(M2AManifestError):
        Manifest.load(write_manifest(tmp_path, entries))


def test_manifest_needs_entries(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"root": "."}), encoding="utf-8")
    with pytest.raises(M2AManifestError):
        Manifest.load(path)
    path.write_text("{", encoding="utf-8")
    with pytest.raises(M2AInputError):
        Manifest.load(path)


def test_map_samples_order_and_failures():
    def work(item):
        if item.sample_id == "b":
            raise M2AStatsError("no ratings")
        if item.sample_id == "c":
            raise ValueError("bad value")
        return item.sample_id.upper()

    items = [SimpleNamespace(sample_id=name) for name in ("d", "c", "b", "a")]
    assert map_samples(work, items, workers=1) == [
        ("a", "A", None),
        ("b", None, ("input", "no ratings")),
        ("c", None, ("internal", "ValueError: bad value")),
        ("d", "D", None),
    ]


def test_command_exit_code():
    cmd = ZeroFiltersCommand(argparse.Namespace())
    assert cmd.exit_code == 0
    cmd.failures.append(("s1", "input", "missing file"))
    assert cmd.exit_code == 1
    cmd.failures.append(("s2", "internal", "ValueError"))
    assert cmd.exit_code == 2
    cmd.close()


def test_apply_flags():
    config_db = ConfigDB()
    config_db.set("stft", "n_fft", "8192", ConfigDB.FILE_PRECEDENCE)
    args = argparse.Namespace(nfft=4096, sustain=True, seed=None)
    apply_flags(args, RollCommand)
    assert config_db.get("stft", "n_fft") == 4096
    assert config_db.get("frame", "sustain") is True
    cfg = RunConfig.from_config_db()
    assert (cfg.n_fft, cfg.sustain, cfg.seed) == (4096, True, 0)


def test_build_parser():
    args = build_parser().parse_args(["synth", "--midi", "a.mid", "--out", "o.wav", "--stft-hop", "144"])
    assert args.command == "synth"
    assert args.method == "additive"
    assert args.stft_hop == 144
    assert args.sustain is None
    with pytest.raises(M2AUsageError):
        build_parser().parse_args(["synth", "--method", "wavenet", "--out", "o.wav"])


class broken_pool:
    def __init__(self, max_workers):
        self.max_workers = max_workers

    def __enter__(self):
        raise BrokenProcessPool("worker killed")

    def __exit__(self, *exc_info):
        return False


def test_map_samples_broken_pool(monkeypatch):
    monkeypatch.setattr("pym2a.s11_cli.ProcessPoolExecutor", broken_pool)
    items = [SimpleNamespace(sample_id=name) for name in ("a", "b")]
    with pytest.raises(M2AFatalError, match="worker pool died"):
        map_samples(str, items, workers=2)


def test_zero_filters_refine_with_fft_size(capsys):
    assert run(["zero-filters", "--sr", "24000", "--nfft", "4096"]) == 0
    coarse = capsys.readouterr().out.splitlines()[1].split(",")[2].split()
    assert run(["zero-filters", "--sr", "24000", "--nfft", "16384"]) == 0
    fine = capsys.readouterr().out.splitlines()[1].split(",")[2].split()
    assert set(fine) < set(coarse)


def test_stats_outputs_are_reproducible(tmp_path, write_ratings):
    mos = {name: metrics.mos_mean for name, metrics in REFERENCE_METRICS.items()}
    ratings = write_ratings(tmp_path / "ratings.csv", mos)
    first, second = tmp_path / "first", tmp_path / "second"
    assert run(["stats", "--ratings", str(ratings), "--out", str(first)]) == 0
    assert run(["stats", "--ratings", str(ratings), "--out", str(second)]) == 0
    names = sorted(path.name for path in first.iterdir())
    assert names == ["mos.csv", "significance.csv", "significance.png", "significance_p.csv"]
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes()
    assert "Pianoteq,4.100000,100" in lines_of(first / "mos.csv")
