"""Experiment driver: subcommands over one TOML-configured laboratory.

Every run creates a run directory holding a config snapshot and its
outputs; nothing outside the run directory is written, input files are
never mutated, and identical (config, seed) runs produce byte-identical
reports and image sidecars. All randomness descends from the single
master seed via documented stream splitting.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 provider
error, 4 internal numerical error. Failures print one machine-readable
JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .assets import load_unrelated_controls
from .attack import run_attack, write_trace_jsonl
from .config import (RunConfig, apply_overrides, load_config, write_snapshot)
from .errors import (AttackLabError, ConfigError, ContractError, DataError,
                     JudgeFormatError, NonFiniteError, ProviderError,
                     ShapeMismatchError)
from .evaluation import (AuditFixture, build_audit_fixtures,
                         draw_benchmark_samples, instruction_audit,
                         perceptual_report, run_benchmark,
                         shuffle_instructions, write_report_csv,
                         write_report_json)
from .imaging import load_image, resize, save_image
from .instructions import RemoteConfig, RemoteProvider
from .lab import Lab, build_lab
from .rng import derive_seed

DEFAULT_BENCH_METHODS = "instructta,mfii,mfit,mftt"
DEFAULT_EPS_GRID = "2,4,8,16,64"
DEFAULT_N_GRID = "1,5,10,50"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="attacklab", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--out", help="run directory (default from config)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--epsilon", type=float, help="L-inf budget, 1/255 units")
        p.add_argument("--eta", type=float, help="step size, 1/255 units")
        p.add_argument("--iterations", type=int, help="PGD iteration count")
        p.add_argument("--n-instructions", type=int,
                       help="instruction set size n")
        p.add_argument("--samples", type=int, help="benchmark sample count")
        p.add_argument("--workers", type=int, help="parallel sample workers")

    p = sub.add_parser("attack", help="craft one adversarial example")
    common(p)
    p.add_argument("--image", help="benign input image (.ppm/.f64/.png)")
    p.add_argument("--target-text", help="target response text")
    p.add_argument("--loss-mode", help="attack objective variant")

    p = sub.add_parser("bench", help="run the targeted-attack benchmark")
    common(p)
    p.add_argument("--methods", default=DEFAULT_BENCH_METHODS,
                   help="comma-separated methods (clean row always included)")

    p = sub.add_parser("sweep-eps", help="benchmark across L-inf budgets")
    common(p)
    p.add_argument("--grid", default=DEFAULT_EPS_GRID,
                   help="comma-separated epsilon values, 1/255 units")

    p = sub.add_parser("sweep-n", help="benchmark across instruction counts")
    common(p)
    p.add_argument("--grid", default=DEFAULT_N_GRID,
                   help="comma-separated n values")

    p = sub.add_parser("ablate", help="compare full attack against ablations")
    common(p)

    p = sub.add_parser("shuffle-eval",
                       help="benchmark with shuffled instruction pairing")
    common(p)
    p.add_argument("--methods", default=DEFAULT_BENCH_METHODS)
    p.add_argument("--shuffle-seed", type=int, default=0)

    p = sub.add_parser("audit-instructions",
                       help="similarity table over instruction classes")
    common(p)

    p = sub.add_parser("inspect", help="summarize an existing run directory")
    p.add_argument("--run", required=True, help="run directory to summarize")
    return parser


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {
        "attack.seed": getattr(args, "seed", None),
        "attack.epsilon": getattr(args, "epsilon", None),
        "attack.eta": getattr(args, "eta", None),
        "attack.iterations": getattr(args, "iterations", None),
        "attack.n_instructions": getattr(args, "n_instructions", None),
        "attack.loss_mode": getattr(args, "loss_mode", None),
        "data.sample_count": getattr(args, "samples", None),
        "output.run_dir": getattr(args, "out", None),
        "output.workers": getattr(args, "workers", None),
    }
    return apply_overrides(config, overrides)


def _make_provider(config: RunConfig):
    p = config.providers
    if p.instruction_mode == "offline":
        return None  # lab builds the seeded offline provider
    if p.instruction_mode == "remote":
        if not p.endpoint or not p.model:
            raise ConfigError(
                "remote instruction mode needs providers.endpoint and "
                "providers.model")
        return RemoteProvider(RemoteConfig(
            endpoint=p.endpoint, model=p.model, timeout=p.timeout,
            retries=p.retries, strict_parsing=p.strict_parsing,
            api_key_env=p.api_key_env),
            fallback_seed=derive_seed(config.attack.seed, 4))
    raise ConfigError(f"unknown instruction_mode {p.instruction_mode!r}")


def _make_judge(config: RunConfig):
    p = config.providers
    if p.judge_mode == "offline":
        return None  # lab scans for a separating offline judge
    if p.judge_mode == "remote":
        from .evaluation import RemoteJudge

        if not p.endpoint or not p.model:
            raise ConfigError(
                "remote judge mode needs providers.endpoint and providers.model")
        return RemoteJudge(RemoteProvider(RemoteConfig(
            endpoint=p.endpoint, model=p.model, timeout=p.timeout,
            retries=p.retries, api_key_env=p.api_key_env)))
    raise ConfigError(f"unknown judge_mode {p.judge_mode!r}")


def _build_lab(config: RunConfig) -> Lab:
    data = config.data
    return build_lab(
        config.attack.seed,
        gallery_manifest=data.gallery_manifest or None,
        caption_bank_path=data.caption_bank or None,
        instruction_library=(_load_library(data.instruction_library)
                             if data.instruction_library else None),
        provider=_make_provider(config),
        judge=_make_judge(config),
        judge_tau=config.providers.judge_tau,
        share_vision_encoder=config.models.share_vision_encoder,
        vision_arch=config.vision_arch(),
        text_arch=config.text_arch(),
        projector_arch=config.projector_arch(),
        workers=config.output.workers)


def _load_library(path) -> list[str]:
    try:
        lines = [ln.strip() for ln in
                 Path(path).read_text(encoding="utf-8").splitlines()]
    except OSError as exc:
        raise DataError(f"cannot read instruction library {path}: {exc}") from exc
    out = [ln for ln in lines if ln]
    if not out:
        raise DataError(f"instruction library {path} is empty")
    return out


def _prepare_run_dir(config: RunConfig) -> Path:
    run_dir = Path(config.output.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_snapshot(config, run_dir / "config.snapshot")
    return run_dir


def _artifact_sink(run_dir: Path, config: RunConfig):
    images = run_dir / "images"
    traces = run_dir / "traces"

    def sink(method, sample, result):
        if config.output.write_images:
            images.mkdir(exist_ok=True)
            save_image(result.adversarial,
                       images / f"{method}_{sample.sample_id}.f64")
        if config.output.write_traces and result.trace:
            traces.mkdir(exist_ok=True)
            write_trace_jsonl(result,
                              traces / f"{method}_{sample.sample_id}.jsonl")

    return sink


def _write_rows_csv(rows: list[dict], path, float_fmt="{:.6f}") -> None:
    if not rows:
        raise ContractError("no rows to write")
    headers = list(rows[0])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(headers)
        for row in rows:
            writer.writerow([
                float_fmt.format(v) if isinstance(v, float) else v
                for v in (row[h] for h in headers)])


def _write_rows_json(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- subcommand bodies ------------------------------------------------------------


def _cmd_attack(args) -> int:
    config = _load_run_config(args)
    lab = _build_lab(config)
    run_dir = _prepare_run_dir(config)
    size = config.models.image_size

    if args.image:
        benign = resize(load_image(args.image), size, size)
    else:
        benign = None
    target_text = args.target_text
    if benign is None or target_text is None:
        sample = draw_benchmark_samples(
            lab.victim, lab.gallery, lab.real_instructions, lab.judge,
            count=1, seed=config.attack.seed)[0]
        benign = benign if benign is not None else sample.image
        target_text = target_text if target_text is not None \
            else sample.target_text

    result = run_attack(benign, target_text, lab.deps, config.attack_config())
    images = run_dir / "images"
    images.mkdir(exist_ok=True)
    save_image(benign, images / "input.f64")
    save_image(result.adversarial, images / "adversarial.f64")
    if config.output.write_images:
        save_image(result.adversarial, images / "adversarial.ppm")
    if config.output.write_traces and result.trace:
        traces = run_dir / "traces"
        traces.mkdir(exist_ok=True)
        write_trace_jsonl(result, traces / "attack.jsonl")
    report = {
        "target_text": target_text,
        "loss_mode": result.config.loss_mode,
        "iterations": len(result.trace),
        "perceptual": perceptual_report(benign, result.adversarial),
        "final_loss": result.trace[-1].loss.total if result.trace else None,
    }
    (run_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"adversarial example written to {images / 'adversarial.f64'} "
          f"(linf {report['perceptual']['linf']:.6f})")
    return 0


def _bench_common(args, methods: list[str], shuffle_seed=None) -> int:
    config = _load_run_config(args)
    lab = _build_lab(config)
    run_dir = _prepare_run_dir(config)
    samples = draw_benchmark_samples(
        lab.victim, lab.gallery, lab.real_instructions, lab.judge,
        count=config.data.sample_count, seed=config.attack.seed)
    if shuffle_seed is not None:
        samples = shuffle_instructions(samples, shuffle_seed)
    reports = run_benchmark(samples, methods, lab.bench_context,
                            config.attack_config(),
                            artifact_sink=_artifact_sink(run_dir, config))
    order = ["clean"] + [m for m in methods if m != "clean"]
    write_report_csv(reports, run_dir / "report.csv", order=order)
    write_report_json(reports, run_dir / "report.json", order=order)
    for name in order:
        r = reports[name]
        print(f"{r.label:22s} ensemble {r.ensemble_score:.3f}  "
              f"NoS {r.nos}/{r.total}  ASR {r.asr:.3f}")
    print(f"report written to {run_dir / 'report.csv'}")
    return 0


def _cmd_bench(args) -> int:
    return _bench_common(args, _parse_methods(args.methods))


def _cmd_shuffle_eval(args) -> int:
    return _bench_common(args, _parse_methods(args.methods),
                         shuffle_seed=args.shuffle_seed)


def _cmd_ablate(args) -> int:
    return _bench_common(args, ["instructta", "womf", "womfg"])


def _parse_methods(text: str) -> list[str]:
    methods = [m.strip() for m in text.split(",") if m.strip()]
    if not methods:
        raise ConfigError("no benchmark methods given")
    return methods


def _parse_grid(text: str, cast) -> list:
    try:
        return [cast(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"malformed grid {text!r}: {exc}") from exc


def _cmd_sweep(args, kind: str) -> int:
    from .evaluation import sweep

    config = _load_run_config(args)
    lab = _build_lab(config)
    run_dir = _prepare_run_dir(config)
    grid = _parse_grid(args.grid, float if kind == "epsilon" else int)
    samples = draw_benchmark_samples(
        lab.victim, lab.gallery, lab.real_instructions, lab.judge,
        count=config.data.sample_count, seed=config.attack.seed)
    rows = sweep(kind, grid, samples, lab.bench_context,
                 config.attack_config())
    out_rows = []
    for row in rows:
        out = {("epsilon" if kind == "epsilon" else "n"): row["value"]}
        out.update({k: row[k] for k in row if k.startswith("enc")})
        out.update({k: row[k] for k in ("ensemble", "nos", "total", "asr")})
        out_rows.append(out)
    _write_rows_csv(out_rows, run_dir / "sweep.csv")
    _write_rows_json(out_rows, run_dir / "sweep.json")
    for row in out_rows:
        key = "epsilon" if kind == "epsilon" else "n"
        print(f"{key}={row[key]:<6} ensemble {row['ensemble']:.3f}  "
              f"NoS {row['nos']}/{row['total']}  ASR {row['asr']:.3f}")
    print(f"sweep written to {run_dir / 'sweep.csv'}")
    return 0


def _cmd_audit(args) -> int:
    config = _load_run_config(args)
    lab = _build_lab(config)
    run_dir = _prepare_run_dir(config)
    provider = lab.provider
    fixtures = build_audit_fixtures(
        provider, lab.captions, lab.real_instructions,
        n=config.attack.n_instructions, seed=config.attack.seed)
    embedder = lab.ensemble[0]
    table = instruction_audit(fixtures, embedder)
    controls = load_unrelated_controls()
    control_fixtures = [
        AuditFixture(inferred=fx.inferred, rephrasings=tuple(controls),
                     real=fx.real)
        for fx in fixtures]
    control = instruction_audit(control_fixtures, embedder)
    _write_rows_csv(table.rows(), run_dir / "audit.csv")
    payload = {
        "table": table.rows(),
        "control": {"inferred_vs_unrelated": control.inferred_vs_rephrased},
    }
    (run_dir / "audit.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for row in table.rows():
        print(f"{row['instruction']:>8s}: rephrased {row['rephrased']:.3f}  "
              f"real {row['real']:.3f}")
    print(f"control (inferred vs unrelated): "
          f"{control.inferred_vs_rephrased:.3f}")
    print(f"audit written to {run_dir / 'audit.csv'}")
    return 0


def _cmd_inspect(args) -> int:
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise DataError(f"run directory {run_dir} does not exist")
    snapshot = run_dir / "config.snapshot"
    if snapshot.exists():
        print(f"config snapshot: {snapshot}")
    shown = False
    for name in ("report.csv", "sweep.csv", "audit.csv"):
        path = run_dir / name
        if path.exists():
            print(f"-- {name} --")
            print(path.read_text(encoding="utf-8").rstrip())
            shown = True
    traces = sorted((run_dir / "traces").glob("*.jsonl")) \
        if (run_dir / "traces").is_dir() else []
    if traces:
        records = [json.loads(line) for line in
                   traces[0].read_text(encoding="utf-8").splitlines()]
        if records:
            print(f"-- {traces[0].name} ({len(records)} iterations) --")
            print(f"first: {json.dumps(records[0])}")
            print(f"last:  {json.dumps(records[-1])}")
        shown = True
    if not shown:
        print(f"run directory {run_dir} holds no reports or traces")
    return 0


_COMMANDS = {
    "attack": _cmd_attack,
    "bench": _cmd_bench,
    "sweep-eps": lambda a: _cmd_sweep(a, "epsilon"),
    "sweep-n": lambda a: _cmd_sweep(a, "n"),
    "ablate": _cmd_ablate,
    "shuffle-eval": _cmd_shuffle_eval,
    "audit-instructions": _cmd_audit,
    "inspect": _cmd_inspect,
}

_EXIT_CODES = (
    (ConfigError, 1),
    (DataError, 2),
    (ProviderError, 3),
    ((ShapeMismatchError, NonFiniteError, ContractError, JudgeFormatError), 4),
)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except AttackLabError as exc:
        for types, code in _EXIT_CODES:
            if isinstance(exc, types):
                break
        else:  # pragma: no cover - AttackLabError subclasses are covered
            code = 4
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
