"""Command-line interface.

Exit codes: 0 success, 1 I/O or file-format error (the message names the
path), 2 usage error, 3 a benchmark manifest ran but missed a tolerance.

Template files are either 200-byte compressed templates, 768-byte raw
little-endian float32 vectors, or ``.npy`` arrays of 192 values. Minutiae
files use the text format of ``MinutiaeSet.to_text``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, InvalidInputError
from .gallery import Gallery, GalleryRecord
from .matcher import minutiae_score
from .minutiae import (DEFAULT_NMS_RADIUS, DEFAULT_PEAK_THRESHOLD, DEFAULT_SIGMA, MAP_SIZE,
                       MinutiaeMap, MinutiaeSet, decode_map, encode_map, scale_set)
from .pq import DEFAULT_M, DEFAULT_Z, PQIndex
from .rerank import FusionConfig, two_stage_search
from .search import ExactSearcher, default_threads
from .template import (COMPRESSED_SIZE, DIM, CompressedTemplate, MatchScore, Template, compress,
                       cosine_score, decompress, integer_score)

RAW_SIZE = DIM * 4
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_TOLERANCE = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_IO):
        super().__init__(message)
        self.code = code


# -- file helpers -------------------------------------------------------------


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _write_bytes(path, data: bytes) -> None:
    try:
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _parse(path, fn):
    try:
        return fn()
    except FormatError as exc:
        raise CliError(f"{path}: {exc}") from exc
    except InvalidInputError as exc:
        raise CliError(f"{path}: {exc}") from exc


def read_template_file(path):
    """Return a ``CompressedTemplate`` or a ``Template`` depending on the file."""
    data = _read_bytes(path)
    if str(path).endswith(".npy"):
        def load_npy():
            try:
                arr = np.load(path, allow_pickle=False)
            except ValueError as exc:
                raise FormatError(f"not a numpy array file: {exc}") from exc
            return Template.from_vector(np.asarray(arr, dtype=np.float64).reshape(-1))
        return _parse(path, load_npy)
    if len(data) == COMPRESSED_SIZE:
        return _parse(path, lambda: CompressedTemplate.from_bytes(data))
    if len(data) == RAW_SIZE:
        return _parse(path, lambda: Template.from_vector(np.frombuffer(data, "<f4")))
    raise CliError(f"{path}: expected {COMPRESSED_SIZE} (compressed) or {RAW_SIZE} "
                   f"(float32) bytes, got {len(data)}")


def as_template(t) -> Template:
    return decompress(t) if isinstance(t, CompressedTemplate) else t


def as_compressed(t) -> CompressedTemplate:
    return t if isinstance(t, CompressedTemplate) else compress(t)


def read_minutiae_file(path) -> MinutiaeSet:
    data = _read_bytes(path)
    return _parse(path, lambda: MinutiaeSet.from_text(data.decode("utf-8")))


def load_gallery(path) -> Gallery:
    data = _read_bytes(path)
    return _parse(path, lambda: Gallery.from_bytes(data))


def load_index(path, keys=None) -> PQIndex:
    data = _read_bytes(path)
    return _parse(path, lambda: PQIndex.from_bytes(data, keys))


def read_enroll_manifest(path):
    """Yield ``(subject_id, finger, template_path, minutiae_path or None)``.

    One record per line, whitespace separated; ``#`` starts a comment.
    Relative paths resolve against the manifest's directory.
    """
    base = Path(path).parent
    text = _read_bytes(path).decode("utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise CliError(f"{path}:{lineno}: expected 'subject finger template [minutiae]'")
        try:
            finger = int(parts[1])
        except ValueError:
            raise CliError(f"{path}:{lineno}: finger index must be an integer") from None
        mpath = base / parts[3] if len(parts) == 4 else None
        yield parts[0], finger, base / parts[2], mpath


# -- output -------------------------------------------------------------------


def _emit_candidates(cands, fmt: str, out) -> None:
    rows = []
    for rank, c in enumerate(cands, start=1):
        sid, finger = c.key if c.key is not None else ("", -1)
        rows.append({"rank": rank, "subject_id": sid, "finger": finger, "ordinal": c.ordinal,
                     "score": c.score.value, "tag": c.score.tag})
    if fmt == "json":
        json.dump({"version": 1, "candidates": rows}, out, indent=2)
        out.write("\n")
        return
    out.write("rank\tsubject_id\tfinger\tordinal\tscore\ttag\n")
    for r in rows:
        out.write(f"{r['rank']}\t{r['subject_id']}\t{r['finger']}\t{r['ordinal']}\t"
                  f"{r['score']:.6f}\t{r['tag']}\n")


def _emit_score(score: MatchScore, fmt: str, out) -> None:
    if fmt == "json":
        json.dump({"version": 1, "score": score.value, "tag": score.tag}, out)
        out.write("\n")
    else:
        out.write(f"score\t{score.value:.6f}\t{score.tag}\n")


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        _write_bytes(path, text.encode("utf-8"))


# -- subcommands --------------------------------------------------------------


def cmd_enroll(args) -> int:
    gallery = load_gallery(args.gallery) if args.append and os.path.exists(args.gallery) \
        else Gallery()
    added = 0
    for sid, finger, tpath, mpath in read_enroll_manifest(args.manifest):
        t = as_compressed(read_template_file(tpath))
        m = read_minutiae_file(mpath) if mpath is not None else None
        try:
            gallery.enroll(GalleryRecord(sid, finger, t, m))
        except KeyError as exc:
            raise CliError(f"{args.manifest}: {exc.args[0]}") from exc
        added += 1
    _write_bytes(args.gallery, gallery.to_bytes())
    sys.stdout.write(f"enrolled\t{added}\ntotal\t{len(gallery)}\n")
    return 0


def cmd_search(args) -> int:
    gallery = load_gallery(args.gallery)
    probe = as_template(read_template_file(args.probe))
    if args.rerank:
        if args.probe_minutiae is None:
            raise CliError("--rerank needs --probe-minutiae", EXIT_USAGE)
        if args.backend == "pq" and args.index is None:
            raise CliError("--backend pq needs --index", EXIT_USAGE)
        pm = read_minutiae_file(args.probe_minutiae)
        idx = load_index(args.index, gallery.keys) if args.backend == "pq" else None
        cfg = FusionConfig(k=args.k, normalization=args.fusion, backend=args.backend)
        cands = two_stage_search(probe, pm, gallery, cfg, pq_index=idx, threads=args.threads)
    elif args.backend == "pq":
        if args.index is None:
            raise CliError("--backend pq needs --index", EXIT_USAGE)
        cands = load_index(args.index, gallery.keys).search(probe, args.k, args.threads)
    else:
        cands = ExactSearcher.from_gallery(gallery).search(probe, args.k, args.threads)
    _emit_candidates(cands, args.format, sys.stdout)
    return 0


def cmd_pq_train(args) -> int:
    gallery = load_gallery(args.gallery)
    if len(gallery) == 0:
        raise CliError(f"{args.gallery}: gallery is empty")
    idx = PQIndex.build(gallery.matrix(), args.m, args.z, seed=args.seed, max_iter=args.iterations)
    _write_bytes(args.output, idx.to_bytes())
    sys.stdout.write(f"records\t{len(idx)}\ncode_bytes\t{idx.code_bytes}\n")
    return 0


def cmd_pq_search(args) -> int:
    keys = load_gallery(args.gallery).keys if args.gallery else None
    idx = load_index(args.index, keys)
    if keys is not None and len(keys) != len(idx):
        raise CliError(f"{args.index}: index has {len(idx)} records, gallery has {len(keys)}")
    probe = as_template(read_template_file(args.probe))
    _emit_candidates(idx.search(probe, args.k, args.threads), args.format, sys.stdout)
    return 0


def cmd_verify(args) -> int:
    a, b = read_template_file(args.a), read_template_file(args.b)
    if (args.a_minutiae is None) != (args.b_minutiae is None):
        raise CliError("give both --a-minutiae and --b-minutiae or neither", EXIT_USAGE)
    if args.integer:
        score = integer_score(as_compressed(a), as_compressed(b))
    else:
        score = cosine_score(as_template(a), as_template(b))
    if args.a_minutiae is not None:
        m = minutiae_score(read_minutiae_file(args.a_minutiae), read_minutiae_file(args.b_minutiae))
        score = MatchScore(score.value + m, "fused")
    _emit_score(score, args.format, sys.stdout)
    return 0


def cmd_mmap_encode(args) -> int:
    s = read_minutiae_file(args.input)
    m = encode_map(s, args.map_size, args.map_size, args.sigma, args.squared_orientation)
    _write_bytes(args.output, m.to_bytes())
    return 0


def cmd_mmap_decode(args) -> int:
    data = _read_bytes(args.input)
    m = _parse(args.input, lambda: MinutiaeMap.from_bytes(data))
    s = decode_map(m, args.threshold, args.nms_radius)
    if args.frame:
        s = scale_set(s, (m.width, m.height), tuple(args.frame))
    text = s.to_text()
    if args.output:
        _write_bytes(args.output, text.encode("utf-8"))
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    from .synth import SynthConfig, generate

    cfg = SynthConfig(identities=args.n, probe_identities=min(args.probes, args.n), seed=args.seed)
    data = generate(cfg)
    out = Path(args.output)
    try:
        (out / "probes").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc.strerror or exc}") from exc
    _write_bytes(out / "gallery.dpg", data.gallery.to_bytes())
    lines = ["template\tminutiae\tmate_subject\tmate_finger"]
    for i, p in enumerate(data.probes):
        tname, mname = f"probes/p{i:06d}.f32", f"probes/p{i:06d}.min"
        _write_bytes(out / tname, p.template.features.astype("<f4").tobytes())
        _write_bytes(out / mname, p.minutiae.to_text().encode("utf-8"))
        lines.append(f"{tname}\t{mname}\t{p.mate_key[0]}\t{p.mate_key[1]}")
    _write_bytes(out / "probes.tsv", ("\n".join(lines) + "\n").encode("utf-8"))
    sys.stdout.write(f"gallery\t{out / 'gallery.dpg'}\nprobes\t{len(data.probes)}\n")
    return 0


def cmd_bench(args) -> int:
    if args.manifest:
        from .experiments import run_experiment

        try:
            result = run_experiment(args.manifest)
        except OSError as exc:
            raise CliError(f"cannot read {args.manifest}: {exc.strerror or exc}") from exc
        except FormatError as exc:
            raise CliError(f"{args.manifest}: {exc}") from exc
        sys.stderr.write(result.table() + "\n")
        _write_json(args.report, result.to_dict())
        return 0 if result.passed else EXIT_TOLERANCE
    if args.n is None:
        raise CliError("bench needs --n or --manifest", EXIT_USAGE)

    from .synth import Backend, SynthConfig, evaluate, generate

    cfg = SynthConfig(identities=args.n, probe_identities=min(args.probes, args.n), seed=args.seed)
    data = generate(cfg, with_minutiae=args.backend == "rerank")
    idx = None
    if args.backend == "pq":
        idx = PQIndex.build(data.gallery.matrix(), seed=args.seed, keys=data.gallery.keys)
    fusion = FusionConfig(k=args.k, normalization=args.fusion) if args.backend == "rerank" else None
    backend = Backend(args.backend, data.gallery, pq_index=idx, fusion=fusion, shards=args.threads)
    report = evaluate(data.gallery, data.probes, backend, max_rank=args.max_rank,
                      imposters_per_probe=args.imposters, seed=args.seed)
    out = report.to_dict()
    out["config"] = {"n": args.n, "probes": len(data.probes), "seed": args.seed,
                     "threads": args.threads}
    _write_json(args.report, out)
    return 0


# -- parser -------------------------------------------------------------------


def _positive(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    common.add_argument("--threads", type=_positive, default=default_threads(),
                        help="worker threads (default: available cores)")
    fmt = argparse.ArgumentParser(add_help=False)
    fmt.add_argument("--format", choices=("tsv", "json"), default="tsv")

    p = argparse.ArgumentParser(prog="fixedprint",
                                description="Fixed-length fingerprint template matching and search.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("enroll", parents=[common], help="build a gallery file from a manifest",
                       description="Each manifest line: subject finger template [minutiae].")
    s.add_argument("--manifest", required=True)
    s.add_argument("--gallery", required=True, help="gallery file to write")
    s.add_argument("--append", action="store_true", help="add to an existing gallery file")
    s.set_defaults(func=cmd_enroll)

    s = sub.add_parser("search", parents=[common, fmt], help="top-k search of one probe")
    s.add_argument("--gallery", required=True)
    s.add_argument("--probe", required=True, help="probe template file")
    s.add_argument("--k", type=_positive, default=10)
    s.add_argument("--backend", choices=("exact", "pq"), default="exact")
    s.add_argument("--index", help="PQ index file (for --backend pq)")
    s.add_argument("--rerank", action="store_true", help="re-rank top-k by fused minutiae score")
    s.add_argument("--probe-minutiae", help="probe minutiae file (for --rerank)")
    s.add_argument("--fusion", choices=("none", "minmax"), default="none")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("pq-train", parents=[common], help="train a PQ index over a gallery")
    s.add_argument("--gallery", required=True)
    s.add_argument("--output", required=True, help="index file to write")
    s.add_argument("--m", type=_positive, default=DEFAULT_M, help="sub-spaces")
    s.add_argument("--z", type=_positive, default=DEFAULT_Z, help="centroids per sub-space")
    s.add_argument("--iterations", type=_positive, default=100, help="max k-means iterations")
    s.set_defaults(func=cmd_pq_train)

    s = sub.add_parser("pq-search", parents=[common, fmt], help="top-k search over a PQ index")
    s.add_argument("--index", required=True)
    s.add_argument("--gallery", help="gallery the index was built from (for identity labels)")
    s.add_argument("--probe", required=True)
    s.add_argument("--k", type=_positive, default=10)
    s.set_defaults(func=cmd_pq_search)

    s = sub.add_parser("verify", parents=[common, fmt], help="1:1 comparison of two templates")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--a-minutiae")
    s.add_argument("--b-minutiae")
    s.add_argument("--integer", action="store_true", help="score in the integer domain")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("mmap", help="minutiae-map encode/decode")
    msub = s.add_subparsers(dest="mmap_command", required=True, metavar="action")
    e = msub.add_parser("encode", parents=[common], help="minutiae set -> map file")
    e.add_argument("--input", required=True)
    e.add_argument("--output", required=True)
    e.add_argument("--map-size", type=_positive, default=MAP_SIZE)
    e.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    e.add_argument("--squared-orientation", action="store_true",
                   help="square the orientation distance in the channel weight")
    e.set_defaults(func=cmd_mmap_encode)
    d = msub.add_parser("decode", parents=[common], help="map file -> minutiae set")
    d.add_argument("--input", required=True)
    d.add_argument("--output", help="default: stdout")
    d.add_argument("--threshold", type=float, default=DEFAULT_PEAK_THRESHOLD)
    d.add_argument("--nms-radius", type=float, default=DEFAULT_NMS_RADIUS)
    d.add_argument("--frame", type=float, nargs=2, metavar=("W", "H"),
                   help="rescale decoded coordinates to this frame")
    d.set_defaults(func=cmd_mmap_decode)

    s = sub.add_parser("bench", parents=[common],
                       help="synthetic accuracy/latency benchmark or a manifest experiment")
    s.add_argument("--n", type=_positive, help="gallery size")
    s.add_argument("--backend", choices=("exact", "pq", "rerank"), default="exact")
    s.add_argument("--probes", type=_positive, default=1000)
    s.add_argument("--k", type=_positive, default=500, help="re-rank depth")
    s.add_argument("--fusion", choices=("none", "minmax"), default="none")
    s.add_argument("--max-rank", type=_positive, default=100)
    s.add_argument("--imposters", type=int, default=100, help="imposter comparisons per probe")
    s.add_argument("--report", help="JSON report path (default: stdout)")
    s.add_argument("--manifest", help="run an experiment manifest instead")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic gallery and probe set")
    s.add_argument("--n", type=_positive, required=True)
    s.add_argument("--probes", type=_positive, default=100)
    s.add_argument("--output", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"fixedprint: error: {exc}", file=sys.stderr)
        return exc.code
    except (InvalidInputError, ConfigurationError) as exc:
        print(f"fixedprint: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def run(argv) -> int:
    """Like ``main`` but returns the usage exit code instead of raising SystemExit."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
