"""Command-line front end: simulate | separate | evaluate | inspect-model.

Every subcommand resolves its configuration from built-in defaults, then an
optional ``--config`` key/value file, then explicit flags, and writes the
fully-resolved config next to its outputs so any run can be reproduced from
that file alone. All randomness flows from the single ``seed`` key.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation, roomsim, separation
from .config import read_kv_config, write_kv_config
from .neural import load_bundle
from .signal_io import Spectrogram, istft, read_wav, stft_stack, write_wav

log = logging.getLogger("fastsep")

_DEFAULTS = {
    "simulate": {
        "out": None,
        "scenes": 10,
        "classes": 4,
        "rt60": 0.078,
        "utterance_s": 5.0,
        "sample_rate": 16000,
        "seed": 0,
        "position_jitter": 0.08,
        "export_corpus": None,
        "corpus_utterances": 12,
    },
    "separate": {
        "input": None,
        "out": None,
        "method": "ilrma",
        "model": None,
        "iterations": None,
        "init_iterations": 30,
        "n_basis": 2,
        "win_ms": 256.0,
        "hop_ms": 128.0,
        "seed": 0,
        "reference_channel": 0,
        "timings": False,
    },
    "evaluate": {
        "scenes": None,
        "out": None,
        "methods": "ilrma,fmvae",
        "model": None,
        "iterations": None,
        "init_iterations": 30,
        "n_basis": 2,
        "win_ms": 256.0,
        "hop_ms": 128.0,
        "seed": 0,
        "reference_channel": 0,
        "jobs": 1,
        "filter_length": 512,
    },
}

_METHOD_ITERATIONS = {"ilrma": 100, "fmvae": 40}


def _resolve_config(subcommand, args):
    """defaults <- config file <- explicit flags; unknown keys rejected."""
    resolved = dict(_DEFAULTS[subcommand])
    if args.config:
        file_cfg = read_kv_config(args.config)
        file_cfg.pop("subcommand", None)
        unknown = set(file_cfg) - set(resolved)
        if unknown:
            raise ValueError(
                f"unknown config keys for {subcommand}: {', '.join(sorted(unknown))}"
            )
        resolved.update(file_cfg)
    for key in resolved:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            resolved[key] = value
    return resolved


def _write_resolved(cfg, subcommand, out_dir):
    payload = {"subcommand": subcommand}
    payload.update(cfg)
    write_kv_config(Path(out_dir) / "run.cfg", payload)


def _stft_geometry(cfg, sample_rate):
    win = int(round(cfg["win_ms"] * sample_rate / 1000.0))
    hop = int(round(cfg["hop_ms"] * sample_rate / 1000.0))
    if win % 2:
        win += 1
    return win, hop


def _separate_mixture(wave, cfg, bundle=None):
    """Run the configured method on a mixture Waveform.

    Returns (estimates (J, L) at the reference channel, traces dict holding
    the main trace and, for the fast method, the initializer trace).
    """
    method = cfg["method"]
    win, hop = _stft_geometry(cfg, wave.sample_rate)
    mixture = stft_stack(wave, win, hop)
    n_src = wave.n_channels
    iterations = cfg["iterations"] or _METHOD_ITERATIONS[method]
    ref = int(cfg["reference_channel"])

    traces = {}
    if method == "ilrma":
        stack, _, trace = separation.ilrma_separate(
            mixture, n_src, iterations, n_basis=int(cfg["n_basis"]),
            seed=int(cfg["seed"]), reference_channel=ref,
        )
    elif method == "fmvae":
        if bundle is None:
            raise ValueError("method 'fmvae' requires a model bundle (--model)")
        init, _, init_trace = separation.ilrma_separate(
            mixture, n_src, int(cfg["init_iterations"]),
            n_basis=int(cfg["n_basis"]), seed=int(cfg["seed"]), reference_channel=ref,
        )
        traces["init"] = init_trace
        stack, _, trace = separation.fmvae_separate(mixture, bundle, init, iterations)
    else:
        raise ValueError(f"unknown separation method {method!r}")
    traces["main"] = trace

    demixed = separation.demix(stack.matrices, mixture)
    projected = separation.back_project(demixed, stack, mixture)
    estimates = np.stack(
        [
            istft(
                Spectrogram(projected[j], hop, win, wave.sample_rate),
                original_length=wave.n_samples,
            )
            for j in range(n_src)
        ]
    )
    return estimates, traces


def _load_mixture(path):
    path = Path(path)
    if path.is_dir():
        scene = roomsim.load_scene(path)
        return scene.mixture, scene
    return read_wav(path), None


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    n_classes = int(cfg["classes"])
    fs = int(cfg["sample_rate"])

    scenes = roomsim.build_toy_suite(
        int(cfg["scenes"]), n_classes, float(cfg["utterance_s"]),
        seed=int(cfg["seed"]), rt60=float(cfg["rt60"]), sample_rate=fs,
        position_jitter=float(cfg["position_jitter"]),
    )
    for index, scene in enumerate(scenes):
        roomsim.save_scene(scene, out / f"scene{index:03d}")
        log.info("wrote scene %03d (classes %s)", index, scene.labels)

    if cfg["export_corpus"]:
        corpus_dir = Path(cfg["export_corpus"])
        corpus = roomsim.toy_corpus(
            n_classes, int(cfg["corpus_utterances"]), float(cfg["utterance_s"]),
            seed=int(cfg["seed"]) + 99991, sample_rate=fs,
        )
        entries = []
        for idx, (wave, label) in enumerate(corpus):
            rel = Path(f"class{label}") / f"utt{idx:04d}.wav"
            (corpus_dir / rel.parent).mkdir(parents=True, exist_ok=True)
            write_wav(corpus_dir / rel, wave)
            entries.append({"path": str(rel), "label": label})
        (corpus_dir / "corpus.json").write_text(
            json.dumps(
                {"class_count": n_classes, "sample_rate": fs, "files": entries},
                indent=2, sort_keys=True,
            )
        )
        log.info("wrote %d corpus utterances to %s", len(entries), corpus_dir)

    _write_resolved(cfg, "simulate", out)
    return 0


def cmd_separate(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    bundle = load_bundle(cfg["model"]) if cfg["model"] else None
    wave, _ = _load_mixture(cfg["input"])
    estimates, traces = _separate_mixture(wave, cfg, bundle)

    for j in range(estimates.shape[0]):
        write_wav(out / f"src{j}.wav", type(wave)(estimates[j : j + 1], wave.sample_rate))
    with open(out / "trace.jsonl", "w") as fh:
        fh.write(traces["main"].to_jsonl(include_timings=bool(cfg["timings"])))
    _write_resolved(cfg, "separate", out)
    print(f"wrote {estimates.shape[0]} sources and trace.jsonl to {out}")
    return 0


def _evaluate_one_scene(packed):
    scene_dir, cfg = packed
    scene = roomsim.load_scene(scene_dir)
    bundle = load_bundle(cfg["model"]) if cfg["model"] else None
    ref = int(cfg["reference_channel"])
    references = [img.channel(ref) for img in scene.source_images]

    results = {}
    for method in cfg["methods"].split(","):
        method = method.strip()
        run_cfg = dict(cfg, method=method)
        estimates, traces = _separate_mixture(scene.mixture, run_cfg, bundle)
        scores = evaluation.bss_eval(
            list(estimates), references, filter_length=int(cfg["filter_length"])
        )
        entry = {
            "scores": scores,
            "trace": traces["main"],
            "labels": scene.labels,
        }
        if method == "fmvae":
            entry["accuracy_all"] = evaluation.classification_accuracy(
                traces["main"], scene.labels, "all", scores.permutation
            )
            entry["accuracy_final"] = evaluation.classification_accuracy(
                traces["main"], scene.labels, "final", scores.permutation
            )
        results[method] = entry
    return Path(scene_dir).name, results


def cmd_evaluate(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    scene_dirs = sorted(
        p for p in Path(cfg["scenes"]).iterdir() if (p / "scene.json").exists()
    )
    if not scene_dirs:
        raise ValueError(f"no scene directories under {cfg['scenes']!r}")
    methods = [m.strip() for m in cfg["methods"].split(",")]
    if "fmvae" in methods and not cfg["model"]:
        raise ValueError("evaluating 'fmvae' requires a model bundle (--model)")

    jobs = int(cfg["jobs"])
    work = [(str(d), cfg) for d in scene_dirs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            all_results = list(pool.map(_evaluate_one_scene, work))
    else:
        all_results = [_evaluate_one_scene(w) for w in work]

    per_scene_rows = []
    score_rows, runtime_rows, class_rows = [], [], []
    for method in methods:
        sdr, sir, sar = [], [], []
        acc_all, acc_final = [], []
        traces = []
        for scene_name, results in all_results:
            entry = results[method]
            scores = entry["scores"]
            traces.append(entry["trace"])
            sdr.extend(scores.sdr)
            sir.extend(scores.sir)
            sar.extend(scores.sar)
            if "accuracy_all" in entry:
                acc_all.append(entry["accuracy_all"])
                acc_final.append(entry["accuracy_final"])
            per_scene_rows.append(
                {
                    "scene": scene_name,
                    "method": method,
                    "sdr": float(np.mean(scores.sdr)),
                    "sir": float(np.mean(scores.sir)),
                    "sar": float(np.mean(scores.sar)),
                }
            )
        score_rows.append(
            {
                "method": method,
                "sdr": float(np.mean(sdr)),
                "sir": float(np.mean(sir)),
                "sar": float(np.mean(sar)),
            }
        )
        runtime_rows.extend(evaluation.runtime_report({method: traces}))
        if acc_all:
            class_rows.append(
                {
                    "method": method,
                    "all_iterations": float(np.mean(acc_all)),
                    "final_estimation": float(np.mean(acc_final)),
                }
            )

    evaluation.write_csv(out / "scene_scores.csv",
                         ["scene", "method", "sdr", "sir", "sar"], per_scene_rows)
    tables = [
        ("table_scores", ["method", "sdr", "sir", "sar"], score_rows),
        ("table_runtime", ["method", "runtime_per_iteration_s", "total_s"], runtime_rows),
    ]
    if class_rows:
        tables.append(
            ("table_classification", ["method", "all_iterations", "final_estimation"],
             class_rows)
        )
    for name, headers, rows in tables:
        evaluation.write_csv(out / f"{name}.csv", headers, rows)
        text = evaluation.format_table(headers, rows)
        (out / f"{name}.txt").write_text(text)
        print(text)
    _write_resolved(cfg, "evaluate", out)
    return 0


def cmd_inspect_model(path):
    bundle = load_bundle(path)
    info = {
        "format": bundle.manifest["format"],
        "class_count": bundle.class_count,
        "latent_channels": bundle.latent_channels,
        "freq_bins": bundle.freq_bins,
        "networks": {
            name: bundle.manifest["networks"][name]["layers"]
            for name in ("encoder", "decoder", "classifier")
        },
        "tensor_count": len(bundle.tensors),
        "parameter_count": int(sum(t.size for t in bundle.tensors.values())),
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(parser):
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="master random seed")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fastsep",
        description="Determined blind source separation: simulation, "
        "separation, evaluation.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("simulate", help="generate toy scenes (and a labeled corpus)")
    _add_common(p)
    p.add_argument("--out", help="scene output directory")
    p.add_argument("--scenes", type=int, help="number of scenes")
    p.add_argument("--classes", type=int, help="toy class count")
    p.add_argument("--rt60", type=float, help="target reverberation time [s]")
    p.add_argument("--utterance-s", type=float, dest="utterance_s",
                   help="utterance duration [s]")
    p.add_argument("--sample-rate", type=int, dest="sample_rate")
    p.add_argument("--position-jitter", type=float, dest="position_jitter")
    p.add_argument("--export-corpus", dest="export_corpus",
                   help="also write a labeled training corpus here")
    p.add_argument("--corpus-utterances", type=int, dest="corpus_utterances",
                   help="training utterances per class")

    p = sub.add_parser("separate", help="separate a mixture WAV or scene directory")
    _add_common(p)
    p.add_argument("--input", help="mixture WAV file or scene directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--method", choices=["ilrma", "fmvae"])
    p.add_argument("--model", help="FMVAE01 bundle (required for fmvae)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--init-iterations", type=int, dest="init_iterations")
    p.add_argument("--n-basis", type=int, dest="n_basis")
    p.add_argument("--win-ms", type=float, dest="win_ms")
    p.add_argument("--hop-ms", type=float, dest="hop_ms")
    p.add_argument("--reference-channel", type=int, dest="reference_channel")
    p.add_argument("--timings", action="store_const", const=True,
                   help="record wall-clock durations in trace.jsonl "
                   "(breaks byte-reproducibility)")

    p = sub.add_parser("evaluate", help="score methods over a scene directory")
    _add_common(p)
    p.add_argument("--scenes", help="directory of scene subdirectories")
    p.add_argument("--out", help="output directory for tables")
    p.add_argument("--methods", help="comma-separated: ilrma,fmvae")
    p.add_argument("--model", help="FMVAE01 bundle (required for fmvae)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--init-iterations", type=int, dest="init_iterations")
    p.add_argument("--n-basis", type=int, dest="n_basis")
    p.add_argument("--win-ms", type=float, dest="win_ms")
    p.add_argument("--hop-ms", type=float, dest="hop_ms")
    p.add_argument("--reference-channel", type=int, dest="reference_channel")
    p.add_argument("--filter-length", type=int, dest="filter_length")
    p.add_argument("--jobs", type=int, help="scene-level parallel workers")

    p = sub.add_parser("inspect-model", help="dump an FMVAE01 manifest")
    p.add_argument("path", help="bundle file")
    return parser


_REQUIRED = {
    "simulate": ("out",),
    "separate": ("input", "out"),
    "evaluate": ("scenes", "out"),
}


def main(argv=None):
    logging.basicConfig(level=os.environ.get("FASTSEP_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.subcommand == "inspect-model":
        try:
            return cmd_inspect_model(args.path)
        except Exception as exc:  # noqa: BLE001 - single structured exit point
            print(f"fastsep: error: {exc}", file=sys.stderr)
            return 1

    try:
        cfg = _resolve_config(args.subcommand, args)
        for key in _REQUIRED[args.subcommand]:
            if not cfg[key]:
                parser.error(f"{args.subcommand} requires --{key.replace('_', '-')}")
        if args.subcommand == "separate" and cfg["method"] == "fmvae" and not cfg["model"]:
            parser.error("separate --method fmvae requires --model")
        handler = {
            "simulate": cmd_simulate,
            "separate": cmd_separate,
            "evaluate": cmd_evaluate,
        }[args.subcommand]
        return handler(cfg)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - single structured exit point
        log.debug("unhandled error", exc_info=True)
        print(f"fastsep: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
