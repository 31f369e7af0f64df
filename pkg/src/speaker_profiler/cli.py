"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
Settings come from defaults, then an optional key-value config file
(``key = value`` lines, ``#`` comments), then explicit command-line flags.
The default output directory can be set via SPEAKER_PROFILER_OUTPUT_DIR.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import agreement as agreement_mod
from . import corpus as corpus_mod
from .corpus import CorpusError, PersonaType
from .neural import EncoderConfig, seed_all

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

OUTPUT_DIR_ENV = "SPEAKER_PROFILER_OUTPUT_DIR"

log = logging.getLogger(__name__)

ENCODER_KEYS = (
    "embed_dim", "hidden_dim", "num_layers", "num_heads",
    "dropout_rate", "max_sequence_length", "seed",
)


def parse_config_file(path) -> dict:
    """Flat ``key = value`` file; values autodetected as bool/int/float/str."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CorpusError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        value = value.strip().strip("\"'")
        if value.lower() in ("true", "false"):
            out[key] = value.lower() == "true"
        else:
            for cast in (int, float):
                try:
                    out[key] = cast(value)
                    break
                except ValueError:
                    continue
            else:
                out[key] = value
    return out


def _merged_settings(args: argparse.Namespace) -> dict:
    settings: dict = {}
    if getattr(args, "config", None):
        settings.update(parse_config_file(args.config))
    for key, value in vars(args).items():
        if value is not None and key not in ("func", "config"):
            settings[key] = value
    return settings


def _encoder_config(settings: dict) -> EncoderConfig:
    kwargs = {k: settings[k] for k in ENCODER_KEYS if k in settings}
    return EncoderConfig(**kwargs)


def _output_dir(settings: dict) -> Path:
    out = settings.get("output_dir") or os.environ.get(OUTPUT_DIR_ENV) or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(settings: dict, key: str) -> object:
    if key not in settings or settings[key] is None:
        raise UsageError(f"missing required setting: {key.replace('_', '-')}")
    return settings[key]


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# subcommand handlers
# --------------------------------------------------------------------------

def cmd_stats(args) -> int:
    settings = _merged_settings(args)
    corpus = corpus_mod.load_corpus(_require(settings, "corpus"))
    stats = corpus_mod.corpus_stats(corpus)
    print(f"{'split':<7}{'dialogues':>10}{'utterances':>12}{'spk/dlg':>9}"
          f"{'persona':>9}{'per/dlg':>9}")
    for split in corpus_mod.SPLITS:
        if split not in stats.per_split:
            print(f"{split:<7}{'(absent)':>10}")
            continue
        s = stats.per_split[split]
        print(f"{split:<7}{s.dialogues:>10}{s.utterances:>12}"
              f"{s.mean_speakers_per_dialogue:>9.2f}{s.persona_utterances:>9}"
              f"{s.mean_persona_per_dialogue:>9.2f}")
    print()
    print(f"{'split':<7}" + "".join(f"{t.value:>12}" for t in PersonaType.order()))
    for split in corpus_mod.SPLITS:
        if split not in stats.per_split:
            continue
        s = stats.per_split[split]
        print(f"{split:<7}" + "".join(
            f"{s.per_type[t]:>12}" for t in PersonaType.order()
        ))
    return EXIT_OK


def cmd_validate(args) -> int:
    settings = _merged_settings(args)
    corpus = corpus_mod.load_corpus(_require(settings, "corpus"))
    violations = corpus_mod.validate_annotations(corpus)
    if violations:
        for v in violations:
            print(v, file=sys.stderr)
        print(f"{len(violations)} violation(s) found", file=sys.stderr)
        return EXIT_DATA
    print("corpus is valid")
    return EXIT_OK


def cmd_agreement(args) -> int:
    settings = _merged_settings(args)
    annotations = agreement_mod.load_annotations(_require(settings, "annotations"))
    alpha = agreement_mod.krippendorff_alpha(annotations)
    print(f"krippendorff_alpha = {alpha:.4f}")
    return EXIT_OK


def cmd_train_discovery(args) -> int:
    from .discovery import save_discovery, train_discovery

    settings = _merged_settings(args)
    corpus = corpus_mod.load_corpus(_require(settings, "corpus"))
    config = _encoder_config(settings)
    model, vocab = train_discovery(
        corpus, config,
        epochs=settings.get("epochs", 200),
        lr=settings.get("lr", 5e-3),
        smote_k=settings.get("smote_k", 3),
        smote_ratio=settings.get("smote_ratio", 1.0),
        decision_threshold=settings.get("threshold", 0.5),
    )
    out = _output_dir(settings) / settings.get("checkpoint", "discovery.ckpt")
    save_discovery(out, model, vocab)
    _write_sidecar(out, settings, config)
    print(f"saved {out}")
    return EXIT_OK


def cmd_train_typeid(args) -> int:
    from .typeid import ExternalContextEncoder, save_typeid, train_typeid

    settings = _merged_settings(args)
    corpus = corpus_mod.load_corpus(_require(settings, "corpus"))
    config = _encoder_config(settings)
    instances = [
        inst for dlg in corpus.get("train", [])
        for inst in corpus_mod.build_instances(dlg)
    ]
    external = None
    if settings.get("context_vectors"):
        external = ExternalContextEncoder.from_file(settings["context_vectors"])
    model, boundaries, vocab = train_typeid(
        instances, config,
        epochs=settings.get("epochs", 150),
        lr=settings.get("lr", 5e-3),
        boundary_steps=settings.get("boundary_steps", 300),
        boundary_lr=settings.get("boundary_lr", 0.05),
        use_speaker_module=not settings.get("disable_speaker_module", False),
        use_context_encoder=not settings.get("disable_pretrained_context", False),
        external_context=external,
    )
    out = _output_dir(settings) / settings.get("checkpoint", "typeid.ckpt")
    save_typeid(out, model, boundaries, vocab)
    _write_sidecar(out, settings, config)
    print(f"saved {out}")
    return EXIT_OK


def cmd_train_valueex(args) -> int:
    from .valueex import DecodeConfig, save_valueex, train_valueex

    settings = _merged_settings(args)
    corpus = corpus_mod.load_corpus(_require(settings, "corpus"))
    config = _encoder_config(settings)
    pairs = [
        (inst, dlg) for dlg in corpus.get("train", [])
        for inst in corpus_mod.build_instances(dlg)
    ]
    decode = DecodeConfig(
        max_length=settings.get("max_length", 16),
        strategy=settings.get("strategy", "greedy"),
        beam_width=settings.get("beam_width", 1),
    )
    model, vocab = train_valueex(
        pairs, config,
        epochs=settings.get("epochs", 150),
        lr=settings.get("lr", 5e-3),
        decode=decode,
        prepend_type_token=settings.get("prepend_type_token", False),
    )
    out = _output_dir(settings) / settings.get("checkpoint", "valueex.ckpt")
    save_valueex(out, model, vocab)
    _write_sidecar(out, settings, config)
    print(f"saved {out}")
    return EXIT_OK


def _write_sidecar(checkpoint_path: Path, settings: dict, config: EncoderConfig) -> None:
    sidecar = checkpoint_path.with_suffix(checkpoint_path.suffix + ".cfg")
    lines = [f"{k} = {v}" for k, v in sorted(config.to_json().items())]
    for key in ("epochs", "lr", "threshold", "smote_k", "smote_ratio"):
        if key in settings:
            lines.append(f"{key} = {settings[key]}")
    sidecar.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_stages(settings: dict):
    from .pipeline import model_stages
    from .typeid import ExternalContextEncoder

    external = None
    if settings.get("context_vectors"):
        external = ExternalContextEncoder.from_file(settings["context_vectors"])
    discovery_pair = typeid_triple = valueex_pair = None
    if settings.get("discovery_checkpoint"):
        from .discovery import load_discovery
        discovery_pair = load_discovery(settings["discovery_checkpoint"])
    if settings.get("typeid_checkpoint"):
        from .typeid import load_typeid
        typeid_triple = load_typeid(settings["typeid_checkpoint"])
    if settings.get("valueex_checkpoint"):
        from .valueex import load_valueex
        valueex_pair = load_valueex(settings["valueex_checkpoint"])
    return model_stages(discovery_pair, typeid_triple, valueex_pair, external)


def _snapshot(settings: dict) -> dict:
    drop = {"func"}
    return {
        k: v for k, v in sorted(settings.items())
        if k not in drop and isinstance(v, (str, int, float, bool, type(None)))
    }


def cmd_evaluate(args) -> int:
    from .pipeline import emit_report, run_pipeline, run_standalone

    settings = _merged_settings(args)
    mode = settings.get("mode", "standalone")
    if mode not in ("standalone", "pipeline"):
        raise UsageError(f"unknown mode {mode!r}")
    corpus = corpus_mod.load_corpus(_require(settings, "corpus"))
    seed_all(int(settings.get("seed", 0)))
    stages = _load_stages(settings)
    runner = run_standalone if mode == "standalone" else run_pipeline
    report = runner(
        corpus, stages,
        split=settings.get("split", "test"),
        config_snapshot=_snapshot(settings),
    )
    stem = _output_dir(settings) / settings.get("report_name", f"report-{mode}")
    json_path, text_path = emit_report(report, stem)
    print(f"wrote {json_path} and {text_path}")
    return EXIT_OK


def cmd_profile(args) -> int:
    from .pipeline import assemble_profiles, run_pipeline, run_standalone

    settings = _merged_settings(args)
    mode = settings.get("mode", "pipeline")
    corpus = corpus_mod.load_corpus(_require(settings, "corpus"))
    split = settings.get("split", "test")
    seed_all(int(settings.get("seed", 0)))
    stages = _load_stages(settings)
    runner = run_standalone if mode == "standalone" else run_pipeline
    report = runner(corpus, stages, split=split, config_snapshot=_snapshot(settings))
    dialogues = {d.id: d for d in corpus.get(split, [])}
    out = _output_dir(settings) / settings.get("profiles_name", "profiles.jsonl")
    with out.open("w", encoding="utf-8") as fh:
        for outputs in report.stage_outputs:
            profiles = assemble_profiles(dialogues[outputs.dialogue_id], outputs)
            fh.write(json.dumps({
                "dialogue": outputs.dialogue_id,
                "profiles": [p.to_json() for p in profiles],
            }, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .pipeline import EvalReport, render_report_text

    settings = _merged_settings(args)
    path = Path(_require(settings, "input"))
    if not path.exists():
        raise CorpusError(f"report file not found: {path}")
    report = EvalReport.from_json(json.loads(path.read_text(encoding="utf-8")))
    text = render_report_text(report)
    if settings.get("out"):
        Path(settings["out"]).write_text(text, encoding="utf-8")
        print(f"wrote {settings['out']}")
    else:
        print(text, end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser, *, training: bool = False) -> None:
    parser.add_argument("--config", help="key-value config file")
    parser.add_argument("--corpus", help="corpus JSONL path")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--seed", type=int)
    if training:
        parser.add_argument("--epochs", type=int)
        parser.add_argument("--lr", type=float)
        parser.add_argument("--embed-dim", dest="embed_dim", type=int)
        parser.add_argument("--hidden-dim", dest="hidden_dim", type=int)
        parser.add_argument("--num-layers", dest="num_layers", type=int)
        parser.add_argument("--num-heads", dest="num_heads", type=int)
        parser.add_argument("--max-sequence-length", dest="max_sequence_length", type=int)
        parser.add_argument("--dropout-rate", dest="dropout_rate", type=float)
        parser.add_argument("--checkpoint", help="checkpoint filename")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speaker-profiler",
        description="Speaker profiling over multiparty dialogue corpora.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="corpus statistics per split")
    _add_common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("validate", help="check annotation consistency")
    _add_common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("agreement", help="Krippendorff's alpha over an annotation file")
    _add_common(p)
    p.add_argument("--annotations", help="JSONL annotation file")
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("train-discovery", help="train the persona discovery stage")
    _add_common(p, training=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--smote-k", dest="smote_k", type=int)
    p.add_argument("--smote-ratio", dest="smote_ratio", type=float)
    p.set_defaults(func=cmd_train_discovery)

    p = sub.add_parser("train-typeid", help="train the persona-type stage")
    _add_common(p, training=True)
    p.add_argument("--disable-speaker-module", dest="disable_speaker_module",
                   action="store_const", const=True)
    p.add_argument("--disable-pretrained-context", dest="disable_pretrained_context",
                   action="store_const", const=True)
    p.add_argument("--context-vectors", dest="context_vectors")
    p.add_argument("--boundary-steps", dest="boundary_steps", type=int)
    p.add_argument("--boundary-lr", dest="boundary_lr", type=float)
    p.set_defaults(func=cmd_train_typeid)

    p = sub.add_parser("train-valueex", help="train the persona-value stage")
    _add_common(p, training=True)
    p.add_argument("--max-length", dest="max_length", type=int)
    p.add_argument("--strategy", choices=("greedy", "beam"))
    p.add_argument("--beam-width", dest="beam_width", type=int)
    p.add_argument("--prepend-type-token", dest="prepend_type_token",
                   action="store_const", const=True)
    p.set_defaults(func=cmd_train_valueex)

    p = sub.add_parser("evaluate", help="run standalone or pipeline evaluation")
    _add_common(p)
    p.add_argument("--mode", choices=("standalone", "pipeline"))
    p.add_argument("--split")
    p.add_argument("--discovery-checkpoint", dest="discovery_checkpoint")
    p.add_argument("--typeid-checkpoint", dest="typeid_checkpoint")
    p.add_argument("--valueex-checkpoint", dest="valueex_checkpoint")
    p.add_argument("--context-vectors", dest="context_vectors")
    p.add_argument("--report-name", dest="report_name")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("profile", help="emit per-speaker persona profiles")
    _add_common(p)
    p.add_argument("--mode", choices=("standalone", "pipeline"))
    p.add_argument("--split")
    p.add_argument("--discovery-checkpoint", dest="discovery_checkpoint")
    p.add_argument("--typeid-checkpoint", dest="typeid_checkpoint")
    p.add_argument("--valueex-checkpoint", dest="valueex_checkpoint")
    p.add_argument("--context-vectors", dest="context_vectors")
    p.add_argument("--profiles-name", dest="profiles_name")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("report", help="render a report JSON as a text table")
    _add_common(p)
    p.add_argument("--input", help="report JSON file")
    p.add_argument("--out", help="write the table here instead of stdout")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SPEAKER_PROFILER_LOG", "WARNING"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CorpusError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - boundary of the CLI
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
