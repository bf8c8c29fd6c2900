"""Command-line orchestration for the quantization reliability lab.

Subcommands: quantize, zeroshot, calibrate, ood, qat, spectral, report, synth.
Every output artifact embeds a run manifest (resolved config, SHA-256 digests
of the inputs, seed, tool version); reruns with identical inputs and seed
reproduce outputs byte for byte. Exit codes: 0 success, 1 validation error,
2 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .errors import BundleFormatError, HeaderMismatchError, QreliError

MANIFEST_PREFIX = "# qreli-manifest: "


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _apply_thread_cap():
    """Best-effort worker cap from QRELI_THREADS (0 or unset = automatic)."""
    cap = os.environ.get("QRELI_THREADS", "").strip()
    if not cap or cap == "0":
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(int(cap))
    except Exception:
        pass


def _manifest(subcommand: str, config: dict, input_paths: dict, seed=None) -> dict:
    from .core import sha256_file

    return {
        "subcommand": subcommand,
        "config": config,
        "inputs": {name: sha256_file(path) for name, path in input_paths.items() if path},
        "seed": seed,
        "version": __version__,
    }


def _write_json(path, payload: dict, manifest: dict):
    body = {"manifest": manifest}
    body.update(payload)
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(body, fp, indent=2, sort_keys=False)
        fp.write("\n")


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6g}"
    if value is None:
        return ""
    return str(value)


def _write_csv(path, columns, rows, manifest: dict):
    lines = [MANIFEST_PREFIX + json.dumps(manifest, separators=(",", ":"))]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in columns))
    with open(path, "w", encoding="utf-8") as fp:
        fp.write("\n".join(lines) + "\n")


def _read_csv(path):
    columns, rows = None, []
    with open(path, "r", encoding="utf-8") as fp:
        for line in fp:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if columns is None:
                columns = line.split(",")
                continue
            rows.append(dict(zip(columns, line.split(","))))
    if columns is None:
        raise HeaderMismatchError(f"{path}: no header row")
    return columns, rows


def _parse_grid(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise QreliError(f"bad grid {text!r}; expected e.g. 7x7") from exc


def _load_logit_set(path):
    """LogitSet from a logits bundle, or via zero-shot from an embedding bundle."""
    from .core import read_bundle
    from .zeroshot import EmbeddingSet, LogitSet, zero_shot_logits

    bundle = read_bundle(path)
    if "logits" in bundle.entries:
        import numpy as np

        labels = bundle.entries.get("labels")
        if labels is None:
            labels = np.full(bundle.entries["logits"].shape[0], -1, dtype=np.int64)
        return LogitSet(logits=bundle.entries["logits"], labels=labels)
    return zero_shot_logits(EmbeddingSet.from_bundle(bundle))


# ---------------------------------------------------------------------------
# subcommands


def _cmd_quantize(args) -> int:
    import numpy as np

    from .core import TensorBundle, read_bundle, write_bundle
    from .quantize import QuantConfig, compute_qparams, fake_quantize, verify_unique_values

    bundle = read_bundle(args.in_path)
    if args.tensor not in bundle.entries:
        raise QreliError(f"tensor {args.tensor!r} not found in {args.in_path}")
    granularity = args.granularity
    channel_axis = None
    if granularity.startswith("per-channel"):
        channel_axis = int(granularity.split(":", 1)[1]) if ":" in granularity else 0
    elif granularity != "per-tensor":
        raise QreliError(f"unknown granularity {granularity!r}")
    calibration, percentile = "minmax", 1.0
    if args.calibration.startswith("percentile"):
        calibration = "percentile"
        percentile = float(args.calibration.split(":", 1)[1]) if ":" in args.calibration else 0.999
    elif args.calibration != "minmax":
        raise QreliError(f"unknown calibration {args.calibration!r}")
    cfg = QuantConfig(
        bits=args.bits,
        symmetric=args.symmetric,
        channel_axis=channel_axis,
        calibration=calibration,
        percentile=percentile,
    )
    tensor = bundle.entries[args.tensor]
    if tensor.dtype != np.float32:
        raise QreliError(f"tensor {args.tensor!r} is not float32")
    qp = compute_qparams(tensor, cfg)
    quantized = fake_quantize(tensor, qp)
    manifest = _manifest(
        "quantize",
        {
            "tensor": args.tensor,
            "bits": args.bits,
            "symmetric": args.symmetric,
            "granularity": granularity,
            "calibration": args.calibration,
        },
        {"in": args.in_path},
    )
    entries = dict(bundle.entries)
    entries[args.tensor] = quantized
    meta = dict(bundle.meta)
    meta["run_manifest"] = json.dumps(manifest, separators=(",", ":"))
    write_bundle(TensorBundle(entries=entries, meta=meta), args.out)
    if args.verify:
        report = verify_unique_values(quantized, args.bits)
        _write_json(
            args.out + ".verify.json",
            {
                "tensor": args.tensor,
                "unique_count": report.unique_count,
                "limit": report.limit,
                "pass": report.passed,
            },
            manifest,
        )
    return 0


def _cmd_zeroshot(args) -> int:
    from .core import TensorBundle, read_bundle, write_bundle
    from .metrics import ece
    from .zeroshot import EmbeddingSet, accuracy, zero_shot_logits

    emb = EmbeddingSet.from_bundle(read_bundle(args.emb))
    lset = zero_shot_logits(emb)
    manifest = _manifest("zeroshot", {"logit_scale": emb.logit_scale}, {"emb": args.emb})
    if args.out:
        meta = {
            "logit_scale": float(emb.logit_scale),
            "run_manifest": json.dumps(manifest, separators=(",", ":")),
        }
        for key in ("dataset", "model_tag"):
            if key in emb.meta:
                meta[key] = emb.meta[key]
        write_bundle(
            TensorBundle(entries={"logits": lset.logits, "labels": lset.labels}, meta=meta),
            args.out,
        )
    if args.report:
        payload = {
            "n_samples": int(lset.logits.shape[0]),
            "n_classes": int(lset.logits.shape[1]),
        }
        if (lset.labels >= 0).any():
            rep = ece(lset)
            payload.update(accuracy=accuracy(lset), ece=rep.ece, nll=rep.nll)
        _write_json(args.report, payload, manifest)
    return 0


def _cmd_calibrate(args) -> int:
    import numpy as np

    from .core import make_rng, read_bundle
    from .metrics import bin_shift, ece, fit_temperature
    from .zeroshot import LogitSet, accuracy

    lset = _load_logit_set(args.logits)
    manifest = _manifest(
        "calibrate",
        {
            "bins": args.bins,
            "fit_temperature": args.fit_temperature,
            "fit_split": args.fit_split,
        },
        {"logits": args.logits, "bin_shift": args.bin_shift},
        seed=args.seed,
    )
    report = ece(lset, n_bins=args.bins)
    payload = {
        "accuracy": accuracy(lset),
        "ece": report.ece,
        "nll": report.nll,
        "n_bins": args.bins,
    }
    bins_rows = [
        {
            "lo": b.lo,
            "hi": b.hi,
            "count": b.count,
            "mean_confidence": b.mean_confidence,
            "empirical_accuracy": b.empirical_accuracy,
        }
        for b in report.bins
    ]
    if args.fit_temperature:
        labeled_idx = np.flatnonzero(lset.labels >= 0)
        rng = make_rng(args.seed)
        perm = rng.permutation(labeled_idx)
        n_fit = max(1, int(round(args.fit_split * perm.size)))
        fit_idx = np.sort(perm[:n_fit])
        hold_idx = np.sort(perm[n_fit:]) if n_fit < perm.size else fit_idx
        fit = fit_temperature(
            LogitSet(logits=lset.logits[fit_idx], labels=lset.labels[fit_idx])
        )
        hold = LogitSet(logits=lset.logits[hold_idx], labels=lset.labels[hold_idx])
        before = ece(hold, n_bins=args.bins)
        after = ece(
            LogitSet(logits=hold.logits / fit.t_star, labels=hold.labels), n_bins=args.bins
        )
        payload["temperature"] = {
            "t_star": fit.t_star,
            "fit_nll_before": fit.nll_before,
            "fit_nll_after": fit.nll_after,
            "holdout_ece_before": before.ece,
            "holdout_ece_after": after.ece,
            "holdout_nll_before": before.nll,
            "holdout_nll_after": after.nll,
        }
    if args.bin_shift:
        other = _load_logit_set(args.bin_shift)
        shift = bin_shift(lset, other, n_bins=args.bins)
        payload["bin_shift"] = [
            {
                "source_bin": g.source_bin,
                "lo": g.lo,
                "hi": g.hi,
                "count": g.count,
                "mean_conf_before": g.mean_conf_before,
                "mean_conf_after": g.mean_conf_after,
                "mean_acc_before": g.mean_acc_before,
                "mean_acc_after": g.mean_acc_after,
            }
            for g in shift.groups
        ]
    _write_json(args.out, payload, manifest)
    if args.bins_csv:
        _write_csv(
            args.bins_csv,
            ["lo", "hi", "count", "mean_confidence", "empirical_accuracy"],
            bins_rows,
            manifest,
        )
    return 0


def _cmd_ood(args) -> int:
    from .core import read_bundle
    from .ood import ScorerConfig, evaluate, score
    from .zeroshot import EmbeddingSet

    kind = args.scorer.replace("-", "_")
    negative_text = None
    if args.neg:
        neg_bundle = read_bundle(args.neg)
        for key in ("text", "class_text", "negative_text"):
            if key in neg_bundle.entries:
                from .core import cosine_normalize

                negative_text = cosine_normalize(neg_bundle.entries[key])
                break
        if negative_text is None:
            raise QreliError(f"{args.neg}: no text/class_text entry for negatives")
    cfg = ScorerConfig(
        kind=kind, temperature=args.temperature, tau=args.tau, negative_text=negative_text
    )

    def load_for_scorer(path):
        if kind in ("msp", "energy"):
            return _load_logit_set(path)
        return EmbeddingSet.from_bundle(read_bundle(path))

    id_data = load_for_scorer(args.id)
    ood_data = load_for_scorer(args.ood)
    rep = evaluate(score(cfg, id_data), score(cfg, ood_data))
    scenario = args.scenario
    if not scenario:
        id_name = read_bundle(args.id).meta.get("dataset", "id")
        ood_name = read_bundle(args.ood).meta.get("dataset", "ood")
        scenario = f"{id_name}->{ood_name}"
    method = args.method or read_bundle(args.id).meta.get("model_tag", "unknown")
    manifest = _manifest(
        "ood",
        {"scorer": args.scorer, "tau": args.tau, "temperature": args.temperature},
        {"id": args.id, "ood": args.ood, "neg": args.neg},
    )
    _write_csv(
        args.out,
        ["scenario", "method", "scorer", "auroc", "fpr95"],
        [
            {
                "scenario": scenario,
                "method": method,
                "scorer": args.scorer,
                "auroc": rep.auroc,
                "fpr95": rep.fpr_at_95tpr,
            }
        ],
        manifest,
    )
    return 0


def _load_qat_config(path, seed=None):
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib

    from .qat import AdamWConfig, DistillConfig, QatConfig

    with open(path, "rb") as fp:
        raw = tomllib.load(fp)
    opt = AdamWConfig(**raw.pop("optimizer", {}))
    distill = DistillConfig(**raw.pop("distill", {}))
    if seed is not None:
        raw["seed"] = seed
    return QatConfig(optimizer=opt, distill=distill, **raw)


def _cmd_qat(args) -> int:
    import numpy as np

    from .core import TensorBundle, read_bundle, write_bundle
    from .qat import train
    from .zeroshot import EmbeddingSet

    cfg = _load_qat_config(args.config, seed=args.seed)
    train_set = EmbeddingSet.from_bundle(read_bundle(args.train))
    eval_paths = [p for p in args.eval.split(",") if p] if args.eval else []
    eval_sets = [EmbeddingSet.from_bundle(read_bundle(p)) for p in eval_paths]
    checkpoints = [int(c) for c in args.checkpoints.split(",") if c]
    result = train(cfg, train_set, eval_sets, checkpoints)
    inputs = {"train": args.train, "config": args.config}
    inputs.update({f"eval{i}": p for i, p in enumerate(eval_paths)})
    manifest = _manifest(
        "qat",
        {"checkpoints": checkpoints, "aborted": result.aborted},
        inputs,
        seed=cfg.seed,
    )
    entries = {}
    for i, layer in enumerate(result.state.layers):
        entries[f"layer{i}.weight"] = layer.weight.astype(np.float32)
        entries[f"layer{i}.bias"] = layer.bias.astype(np.float32)
        entries[f"layer{i}.lora_a"] = layer.lora_a.astype(np.float32)
        entries[f"layer{i}.lora_b"] = layer.lora_b.astype(np.float32)
        entries[f"layer{i}.scales"] = np.array([layer.s_w, layer.s_a], dtype=np.float32)
    meta = {
        "step": result.state.step,
        "aborted": result.aborted,
        "run_manifest": json.dumps(manifest, separators=(",", ":")),
    }
    write_bundle(TensorBundle(entries=entries, meta=meta), args.out)
    if args.timeline:
        _write_csv(args.timeline, result.columns, result.timeline, manifest)
    return 0


def _cmd_spectral(args) -> int:
    import numpy as np

    from .core import TensorBundle, read_bundle, write_bundle
    from .spectral import FeatureMapSet, band_energy, rse, spectrum

    grid = _parse_grid(args.grid)

    def load_maps(path):
        bundle = read_bundle(path)
        if "tokens" not in bundle.entries:
            raise QreliError(f"{path}: missing 'tokens' entry")
        return FeatureMapSet(tokens=bundle.entries["tokens"], grid=grid)

    base = spectrum(load_maps(args.base))
    quant = spectrum(load_maps(args.quant))
    err = rse(base, quant, epsilon=args.epsilon)
    manifest = _manifest(
        "spectral",
        {"grid": args.grid, "epsilon": args.epsilon},
        {"base": args.base, "quant": args.quant},
    )
    write_bundle(
        TensorBundle(
            entries={
                "base_mag": base.mag.astype(np.float32),
                "quant_mag": quant.mag.astype(np.float32),
                "rse": err.rse.astype(np.float32),
            },
            meta={
                "grid": args.grid,
                "epsilon": float(args.epsilon),
                "run_manifest": json.dumps(manifest, separators=(",", ":")),
            },
        ),
        args.out,
    )
    if args.bands:
        rows = []
        for name, m in (("base", base), ("quant", quant), ("rse", err)):
            bands = band_energy(m)
            rows.append(
                {"map": name, "low": bands.low, "mid": bands.mid, "high": bands.high}
            )
        _write_csv(args.bands, ["map", "low", "mid", "high"], rows, manifest)
    return 0


def _cmd_report(args) -> int:
    columns = None
    rows = []
    for path in args.csvs:
        cols, file_rows = _read_csv(path)
        if columns is None:
            columns = cols
        elif cols != columns:
            raise HeaderMismatchError(f"{path}: columns {cols} != {columns}")
        rows.extend(file_rows)
    if columns is None:
        raise QreliError("no input CSVs")
    rows.sort(key=lambda r: (r.get("scenario", ""), r.get("method", "")))
    if args.delta:
        _, base_rows = _read_csv(args.delta)
        exact = {(r.get("scenario"), r.get("method"), r.get("scorer")): r for r in base_rows}
        loose = {}
        for r in base_rows:
            loose.setdefault((r.get("scenario"), r.get("scorer")), []).append(r)
        numeric = [c for c in columns if c not in ("scenario", "method", "scorer")]
        for row in rows:
            match = exact.get((row.get("scenario"), row.get("method"), row.get("scorer")))
            if match is None:
                cands = loose.get((row.get("scenario"), row.get("scorer")), [])
                match = cands[0] if len(cands) == 1 else None
            for col in numeric:
                key = f"{col}_delta"
                if match is None:
                    row[key] = ""
                else:
                    row[key] = float(row[col]) - float(match[col])
        columns = columns + [f"{c}_delta" for c in numeric]
    manifest = _manifest("report", {"delta": bool(args.delta)}, {})
    _write_csv(args.out, columns, rows, manifest)
    if args.json:
        _write_json(args.json, {"columns": columns, "rows": rows}, manifest)
    return 0


def _cmd_synth(args) -> int:
    import numpy as np

    from .core import TensorBundle, write_bundle
    from .quantize import QuantConfig, compute_qparams, fake_quantize
    from .synth import make_classification_task, make_feature_maps

    if args.kind == "task":
        train_set, eval_set = make_classification_task(
            n_classes=args.classes,
            dim=args.dim,
            n_train=args.n_train,
            n_eval=args.n_eval,
            noise=args.noise,
            center_spread=args.spread,
            n_outlier_dims=args.outlier_dims,
            outlier_amp=args.outlier_amp,
            outlier_rate=args.outlier_rate,
            logit_scale=args.logit_scale,
            seed=args.seed,
        )
        manifest = _manifest(
            "synth",
            {"kind": "task", "classes": args.classes, "dim": args.dim},
            {},
            seed=args.seed,
        )
        for path, es in ((args.out, train_set), (args.eval_out, eval_set)):
            if not path:
                continue
            bundle = es.to_bundle()
            bundle.meta["run_manifest"] = json.dumps(manifest, separators=(",", ":"))
            write_bundle(bundle, path)
        return 0
    maps = make_feature_maps(
        n_samples=args.samples,
        grid=_parse_grid(args.grid),
        channels=args.channels,
        smoothness=args.smoothness,
        seed=args.seed,
    )
    manifest = _manifest(
        "synth", {"kind": "maps", "grid": args.grid}, {}, seed=args.seed
    )
    meta = {
        "grid": args.grid,
        "dataset": "synthetic-maps",
        "run_manifest": json.dumps(manifest, separators=(",", ":")),
    }
    write_bundle(TensorBundle(entries={"tokens": maps.tokens}, meta=meta), args.out)
    if args.quant_out:
        qp = compute_qparams(maps.tokens, QuantConfig(bits=args.quant_bits, symmetric=True))
        tokens_q = fake_quantize(maps.tokens, qp)
        write_bundle(
            TensorBundle(entries={"tokens": tokens_q}, meta=dict(meta)), args.quant_out
        )
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="qreli", description=__doc__)
    parser.add_argument("--version", action="version", version=f"qreli {__version__}")
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

    p = sub.add_parser("quantize", help="fake-quantize one tensor of a bundle")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--tensor", required=True)
    p.add_argument("--bits", type=int, default=8)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--symmetric", dest="symmetric", action="store_true", default=True)
    group.add_argument("--asymmetric", dest="symmetric", action="store_false")
    p.add_argument("--granularity", default="per-tensor", help="per-tensor | per-channel[:AXIS]")
    p.add_argument("--calibration", default="minmax", help="minmax | percentile[:P]")
    p.add_argument("--out", required=True)
    p.add_argument("--verify", action="store_true", help="write <out>.verify.json")
    p.set_defaults(func=_cmd_quantize)

    p = sub.add_parser("zeroshot", help="cosine logits from an embedding bundle")
    p.add_argument("--emb", required=True)
    p.add_argument("--out", help="logits bundle path")
    p.add_argument("--report", help="accuracy report JSON")
    p.set_defaults(func=_cmd_zeroshot)

    p = sub.add_parser("calibrate", help="ECE/NLL, temperature fit, bin shift")
    p.add_argument("--logits", required=True)
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--fit-temperature", action="store_true")
    p.add_argument("--fit-split", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--bin-shift", help="second logits bundle on the same samples")
    p.add_argument("--out", required=True)
    p.add_argument("--bins-csv")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("ood", help="score an ID/OOD bundle pair")
    p.add_argument("--id", required=True)
    p.add_argument("--ood", required=True)
    p.add_argument(
        "--scorer",
        required=True,
        choices=["msp", "energy", "mcm", "generic-negative", "neglabel"],
    )
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--neg", help="negative text-embedding bundle")
    p.add_argument("--scenario")
    p.add_argument("--method")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ood)

    p = sub.add_parser("qat", help="train the quantized head over embeddings")
    p.add_argument("--config", required=True, help="TOML mirroring QatConfig fields")
    p.add_argument("--train", required=True)
    p.add_argument("--eval", default="", help="comma-separated embedding bundles")
    p.add_argument("--checkpoints", default="", help="comma-separated steps")
    p.add_argument("--out", required=True)
    p.add_argument("--timeline")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=_cmd_qat)

    p = sub.add_parser("spectral", help="spectra and relative spectral error")
    p.add_argument("--base", required=True)
    p.add_argument("--quant", required=True)
    p.add_argument("--grid", required=True, help="e.g. 7x7")
    p.add_argument("--epsilon", type=float, default=1e-9)
    p.add_argument("--out", required=True)
    p.add_argument("--bands")
    p.set_defaults(func=_cmd_spectral)

    p = sub.add_parser("report", help="merge row CSVs into a result table")
    p.add_argument("csvs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--json")
    p.add_argument("--delta", help="baseline CSV for relative-change columns")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("synth", help="deterministic synthetic fixtures")
    p.add_argument("--kind", choices=["task", "maps"], default="task")
    p.add_argument("--out", required=True)
    p.add_argument("--eval-out")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-eval", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.12)
    p.add_argument("--spread", type=float, default=0.0)
    p.add_argument("--outlier-dims", type=int, default=6)
    p.add_argument("--outlier-amp", type=float, default=2.0)
    p.add_argument("--outlier-rate", type=float, default=0.1)
    p.add_argument("--logit-scale", type=float, default=100.0)
    p.add_argument("--grid", default="7x7")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--smoothness", type=float, default=2.0)
    p.add_argument("--quant-out", help="also write fake-quantized feature maps")
    p.add_argument("--quant-bits", type=int, default=6)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=_cmd_synth)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 1
    _apply_thread_cap()
    try:
        return args.func(args)
    except (BundleFormatError, OSError) as exc:
        sys.stderr.write(f"qreli: I/O error: {exc}\n")
        return 2
    except QreliError as exc:
        sys.stderr.write(f"qreli: {exc}\n")
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
