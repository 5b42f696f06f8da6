import json
import math

import numpy as np
import pytest

from fixedprint import Template, compress
from fixedprint.cli import build_parser, main, run
from fixedprint.minutiae import MinutiaeSet, random_separated_set

from conftest import unit

SUBCOMMANDS = [["enroll"], ["search"], ["pq-train"], ["pq-search"], ["verify"], ["mmap"],
               ["mmap", "encode"], ["mmap", "decode"], ["bench"], ["synth"]]


@pytest.fixture
def workspace(tmp_path, rng):
    rows = unit(rng, 40)
    lines = []
    for i, r in enumerate(rows):
        t = tmp_path / f"t{i}.bin"
        if i % 2:
            t.write_bytes(compress(Template(r)).to_bytes())
        else:
            t = tmp_path / f"t{i}.npy"
            np.save(t, r)
        m = tmp_path / f"m{i}.txt"
        m.write_text(random_separated_set(rng, 20, 12.0, 448, 448).to_text())
        lines.append(f"subj{i} {i % 10} {t.name} {m.name}")
    (tmp_path / "enroll.txt").write_text("# id finger template minutiae\n" + "\n".join(lines) + "\n")
    (tmp_path / "probe.f32").write_bytes(rows[7].astype("<f4").tobytes())
    return tmp_path


@pytest.mark.parametrize("cmd", SUBCOMMANDS, ids=lambda c: " ".join(c))
def test_help_for_every_subcommand(cmd, capsys):
    assert run(cmd + ["--help"]) == 0
    assert "usage:" in capsys.readouterr().out


def test_unknown_flag_is_usage_error(capsys):
    assert run(["verify", "--a", "x", "--b", "y", "--nope"]) == 2
    assert run([]) == 2


def test_verify_identical(tmp_path, rng, capsys):
    p = tmp_path / "a.bin"
    p.write_bytes(compress(Template(unit(rng, 1)[0])).to_bytes())
    assert main(["verify", "--a", str(p), "--b", str(p)]) == 0
    out = capsys.readouterr().out.split("\t")
    assert out[0] == "score" and float(out[1]) == 1.0 and out[2].strip() == "cosine"
    assert main(["verify", "--a", str(p), "--b", str(p), "--integer", "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["score"] == pytest.approx(1.0, abs=1e-6)


def test_verify_fused(tmp_path, rng, capsys):
    p = tmp_path / "a.f32"
    p.write_bytes(unit(rng, 1)[0].astype("<f4").tobytes())
    m = tmp_path / "m.txt"
    m.write_text(random_separated_set(rng, 15, 12.0, 448, 448).to_text())
    assert main(["verify", "--a", str(p), "--b", str(p), "--a-minutiae", str(m),
                 "--b-minutiae", str(m)]) == 0
    _, score, tag = capsys.readouterr().out.strip().split("\t")
    assert float(score) == pytest.approx(2.0) and tag == "fused"
    assert main(["verify", "--a", str(p), "--b", str(p), "--a-minutiae", str(m)]) == 2


def test_missing_gallery_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.dpg"
    probe = tmp_path / "p.f32"
    probe.write_bytes(np.eye(192, dtype="<f4")[0].tobytes())
    assert main(["search", "--gallery", str(missing), "--probe", str(probe)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_bad_template_size_names_path(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x00" * 17)
    assert main(["verify", "--a", str(bad), "--b", str(bad)]) == 1
    assert str(bad) in capsys.readouterr().err


def test_corrupt_gallery_is_io_error(tmp_path, capsys):
    g = tmp_path / "g.dpg"
    g.write_bytes(b"DPGL\x01\x00" + b"\x05" + b"\x00" * 7)
    probe = tmp_path / "p.f32"
    probe.write_bytes(np.eye(192, dtype="<f4")[0].tobytes())
    assert main(["search", "--gallery", str(g), "--probe", str(probe)]) == 1
    assert "g.dpg" in capsys.readouterr().err


def test_enroll_search_pipeline(workspace, capsys):
    g = workspace / "g.dpg"
    assert main(["enroll", "--manifest", str(workspace / "enroll.txt"), "--gallery", str(g)]) == 0
    assert "enrolled\t40" in capsys.readouterr().out
    assert main(["search", "--gallery", str(g), "--probe", str(workspace / "probe.f32"),
                 "--k", "5"]) == 0
    first = capsys.readouterr().out
    rows = [ln.split("\t") for ln in first.strip().splitlines()]
    assert rows[0] == ["rank", "subject_id", "finger", "ordinal", "score", "tag"]
    assert rows[1][1] == "subj7" and len(rows) == 6
    # byte-identical on rerun and across thread counts
    assert main(["search", "--gallery", str(g), "--probe", str(workspace / "probe.f32"),
                 "--k", "5", "--threads", "3"]) == 0
    assert capsys.readouterr().out == first
    # duplicate enrollment via --append is a conflict
    assert main(["enroll", "--manifest", str(workspace / "enroll.txt"), "--gallery", str(g),
                 "--append"]) == 1


def test_rerank_and_pq(workspace, capsys):
    g = workspace / "g.dpg"
    idx = workspace / "i.dppq"
    main(["enroll", "--manifest", str(workspace / "enroll.txt"), "--gallery", str(g)])
    assert main(["pq-train", "--gallery", str(g), "--output", str(idx), "--z", "16",
                 "--iterations", "5", "--seed", "4"]) == 0
    blob = idx.read_bytes()
    assert main(["pq-train", "--gallery", str(g), "--output", str(idx), "--z", "16",
                 "--iterations", "5", "--seed", "4"]) == 0
    assert idx.read_bytes() == blob
    capsys.readouterr()
    assert main(["pq-search", "--index", str(idx), "--gallery", str(g), "--probe",
                 str(workspace / "probe.f32"), "--k", "3", "--format", "json"]) == 0
    cands = json.loads(capsys.readouterr().out)["candidates"]
    assert len(cands) == 3 and cands[0]["tag"] == "pq-distance"
    assert main(["search", "--gallery", str(g), "--probe", str(workspace / "probe.f32"),
                 "--rerank", "--probe-minutiae", str(workspace / "m7.txt"), "--k", "10",
                 "--fusion", "minmax"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[1].split("\t")[1] == "subj7" and rows[1].endswith("fused")
    assert main(["search", "--gallery", str(g), "--probe", str(workspace / "probe.f32"),
                 "--rerank"]) == 2
    assert main(["search", "--gallery", str(g), "--probe", str(workspace / "probe.f32"),
                 "--backend", "pq"]) == 2


def test_mmap_round_trip(tmp_path, rng, capsys):
    s = random_separated_set(rng, 12, 8.0, 128, 128, border=8)
    src, mp, dst = tmp_path / "s.txt", tmp_path / "s.map", tmp_path / "d.txt"
    src.write_text(s.to_text())
    assert main(["mmap", "encode", "--input", str(src), "--output", str(mp)]) == 0
    assert main(["mmap", "decode", "--input", str(mp), "--output", str(dst)]) == 0
    dec = MinutiaeSet.from_text(dst.read_text()).array
    assert dec.shape[0] == 12
    for x, y, th in s.array:
        d = np.hypot(dec[:, 0] - x, dec[:, 1] - y)
        j = int(np.argmin(d))
        assert d[j] <= 1.0
        assert min(abs(dec[j, 2] - th), 2 * math.pi - abs(dec[j, 2] - th)) <= math.pi / 12


def test_synth_and_bench(tmp_path, capsys):
    out = tmp_path / "syn"
    assert main(["synth", "--n", "300", "--probes", "4", "--output", str(out), "--seed", "2"]) == 0
    lines = (out / "probes.tsv").read_text().strip().splitlines()
    assert len(lines) == 5
    first = (out / "gallery.dpg").read_bytes()
    assert main(["synth", "--n", "300", "--probes", "4", "--output", str(out), "--seed", "2"]) == 0
    assert (out / "gallery.dpg").read_bytes() == first
    rep = tmp_path / "r.json"
    assert main(["bench", "--n", "500", "--probes", "30", "--backend", "exact", "--report",
                 str(rep), "--seed", "1", "--imposters", "10"]) == 0
    data = json.loads(rep.read_text())
    assert data["version"] == 1 and data["backend"] == "exact" and data["n_probes"] == 30
    assert len(data["cmc"]) == 100
    assert main(["bench"]) == 2


def test_bench_manifest(tmp_path, capsys):
    man = tmp_path / "m.json"
    man.write_text(json.dumps({"version": 1, "name": "tiny", "kind": "integer", "seed": 0,
                               "config": {"pairs": 50},
                               "expected": {"max_abs_diff": {"op": "<=", "value": 1e-6}}}))
    rep = tmp_path / "r.json"
    assert main(["bench", "--manifest", str(man), "--report", str(rep)]) == 0
    assert json.loads(rep.read_text())["passed"] is True
    man.write_text(json.dumps({"version": 1, "name": "tiny", "kind": "integer", "seed": 0,
                               "config": {"pairs": 50},
                               "expected": {"max_abs_diff": {"op": "<=", "value": -1}}}))
    assert main(["bench", "--manifest", str(man), "--report", str(rep)]) == 3
    assert "max_abs_diff" in capsys.readouterr().err
    assert main(["bench", "--manifest", str(tmp_path / "none.json")]) == 1


def test_parser_builds():
    assert build_parser().prog == "fixedprint"
