"""Command-line entry point.

Settings are resolved as built-in defaults, then values from ``--config``
(a flat JSON object keyed by option name), then flags given on the command
line. Exit codes: 0 success, 1 pipeline error, 2 usage error, 3 a metric
floor passed to ``eval`` was missed.
"""

from __future__ import annotations

import argparse
import gzip
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import features as feat
from .csi_data import CLASS_NAMES, parse_labels, parse_session, records_from_uniform, serialize_labels, serialize_session
from .evalkit import DmlpConfig, DmlpModel, EvalReport, evaluate_model
from .model import AlesalModel, ModelConfig
from .preprocess import PreprocessParams, resample_session
from .synthgen import gen_dataset, scenario_to_json
from .train import TrainConfig, fit

log = logging.getLogger("alesal")

DEFAULTS: Dict[str, object] = {
    "seed": 0,
    "threads": 1,
    # acquisition and preprocessing
    "pairs": 4,
    "subcarriers": 114,
    "carrier": 5e9,
    "rate": 10.0,
    "window_sec": 20.0,
    "band": (0.1, 2.0),
    "tau": 10.0,
    "stft_hop": 1.0,
    "order": 4,
    "norm_mode": "instant",
    "hop": None,
    # synthesis
    "per_class": 50,
    "duration": None,
    "noise_std": 0.02,
    "weak_pair": None,
    "weak_factor": 0.1,
    # model
    "model": "alesal",
    "channels": 64,
    "gamma": 2.0,
    "b": 1.0,
    "gru_hidden": 32,
    "d_k": 32,
    "no_ta": False,
    "no_pa": False,
    "amplitude_only": False,
    "spectrum_only": False,
    "shared_gru": False,
    # training
    "epochs": 60,
    "batch_size": 32,
    "lr": 1e-3,
    "patience": 10,
    "val_fraction": 0.1,
    # evaluation
    "min_accuracy": None,
    "min_weighted_f1": None,
}


class UsageError(Exception):
    pass


def _band(text: str) -> Tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LOW:HIGH, got {text!r}") from None
    return lo, hi


# ---------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS thread cap (default 1)")
    g.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="JSON file of option defaults")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("preprocessing")
    S = argparse.SUPPRESS
    g.add_argument("--rate", type=float, default=S, help="resampling rate in Hz (default 10)")
    g.add_argument("--window-sec", type=float, default=S, help="window length in seconds (default 20)")
    g.add_argument("--band", type=_band, default=S, help="band-pass edges LOW:HIGH in Hz (default 0.1:2)")
    g.add_argument("--tau", type=float, default=S, help="STFT window in seconds (default 10)")
    g.add_argument("--stft-hop", type=float, default=S, help="STFT frame step in seconds (default 1)")
    g.add_argument("--order", type=int, default=S, help="Butterworth order (default 4)")
    g.add_argument("--norm-mode", choices=("instant", "window"), default=S)
    g.add_argument("--hop", type=float, default=S, help="window step in seconds (default: window length)")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    S = argparse.SUPPRESS
    g.add_argument("--model", choices=("alesal", "dmlp"), default=S)
    g.add_argument("--channels", type=int, default=S, help="feature maps over all pairs, N (default 64)")
    g.add_argument("--gamma", type=float, default=S, help="channel-attention kernel parameter (default 2)")
    g.add_argument("--b", type=float, default=S, help="channel-attention kernel offset (default 1)")
    g.add_argument("--gru-hidden", type=int, default=S)
    g.add_argument("--d-k", type=int, default=S)
    g.add_argument("--no-ta", action="store_true", default=S, help="replace time attention by a time mean")
    g.add_argument("--no-pa", action="store_true", default=S, help="fix pair-attention weights to 1")
    g.add_argument("--amplitude-only", action="store_true", default=S)
    g.add_argument("--spectrum-only", action="store_true", default=S)
    g.add_argument("--shared-gru", action="store_true", default=S)


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    S = argparse.SUPPRESS
    g.add_argument("--epochs", type=int, default=S, help="maximum epochs (default 60)")
    g.add_argument("--batch-size", type=int, default=S)
    g.add_argument("--lr", type=float, default=S)
    g.add_argument("--patience", type=int, default=S)
    g.add_argument("--val-fraction", type=float, default=S)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="alesal", description=__doc__.split("\n")[0], parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    S = argparse.SUPPRESS

    p = sub.add_parser("synth", parents=[common], help="generate labeled synthetic sessions")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--per-class", type=int, default=S, help="sessions per class (default 50)")
    p.add_argument("--duration", type=float, default=S, help="session length in seconds (default: window length)")
    p.add_argument("--noise-std", type=float, default=S)
    p.add_argument("--weak-pair", type=int, default=S, help="weaken this pair's chest path")
    p.add_argument("--weak-factor", type=float, default=S)
    p.add_argument("--pairs", type=int, default=S, help="antenna pairs P (default 4)")
    p.add_argument("--subcarriers", type=int, default=S, help="subcarriers S (default 114)")
    p.add_argument("--carrier", type=float, default=S, help="carrier frequency in Hz (default 5e9)")
    p.add_argument("--rate", type=float, default=S, help="sampling rate in Hz (default 10)")
    p.add_argument("--window-sec", type=float, default=S)

    p = sub.add_parser("preprocess", parents=[common], help="featurize a session directory into a blob")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _pipeline_flags(p)

    p = sub.add_parser("train", parents=[common], help="train a classifier")
    p.add_argument("--data", type=Path, required=True, help="session directory or feature blob")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--history", type=Path, help="write per-epoch CSV here")
    _pipeline_flags(p)
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on labeled data")
    p.add_argument("--model", dest="checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, help="write the CSV report here")
    p.add_argument("--min-accuracy", type=float, default=S)
    p.add_argument("--min-weighted-f1", type=float, default=S)

    p = sub.add_parser("infer", parents=[common], help="class probabilities per window")
    p.add_argument("--model", dest="checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, help="CSV path (default: standard output)")

    p = sub.add_parser("ablate", parents=[common], help="train and score the attention variants")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--with-baseline", action="store_true", help="also train the MLP baseline")
    _pipeline_flags(p)
    _train_flags(p)

    p = sub.add_parser("inspect-attention", parents=[common], help="dump attention weights as CSV")
    p.add_argument("--model", dest="checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--window", type=int, action="append", help="window id (repeatable; default all)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def resolve(ns: argparse.Namespace) -> Dict[str, object]:
    """Merge defaults, the optional JSON config and explicit flags."""
    settings = dict(DEFAULTS)
    given = vars(ns)
    cfg_path = given.get("config")
    if cfg_path is not None:
        try:
            doc = json.loads(Path(cfg_path).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in doc.items():
            k = key.replace("-", "_")
            if k not in DEFAULTS:
                raise UsageError(f"unknown config key {key!r}")
            settings[k] = tuple(value) if k == "band" else value
    settings.update({k: v for k, v in given.items() if k != "config"})
    return settings


# ---------------------------------------------------------------------------
# helpers


def preprocess_params(s: dict) -> PreprocessParams:
    return PreprocessParams(rate=float(s["rate"]), window_sec=float(s["window_sec"]), tau=float(s["tau"]),
                            stft_hop=float(s["stft_hop"]), band=tuple(map(float, s["band"])), order=int(s["order"]),
                            norm_mode=s["norm_mode"])


def session_files(directory: Path) -> List[Path]:
    files = sorted(p for p in directory.iterdir() if p.name.endswith((".csis", ".csis.gz")))
    if not files:
        raise FileNotFoundError(f"no .csis or .csis.gz session files in {directory}")
    return files


def _stem(path: Path) -> str:
    return path.name.removesuffix(".gz").removesuffix(".csis")


def load_sessions(directory: Path, rate: float):
    out = []
    for path in session_files(directory):
        label_path = path.with_name(_stem(path) + ".labels")
        labels = parse_labels(label_path.read_text()) if label_path.exists() else None
        meta, records = parse_session(path.read_bytes(), labels)
        out.append((meta, resample_session(meta, records, rate)))
    return out


def load_features(path: Path, params: PreprocessParams, hop: Optional[float] = None,
                  keep_unlabeled: bool = False) -> feat.FeatureSet:
    """A feature blob as stored, or a session directory featurized with ``params``."""
    if path.is_dir():
        return feat.featurize_sessions(load_sessions(path, params.rate), params, hop, keep_unlabeled)
    return feat.loads(path.read_bytes())


def load_checkpoint(path: Path):
    from .nn.checkpoint import loads

    blob = path.read_bytes()
    _, meta = loads(blob)
    cls = DmlpModel if meta.get("kind") == "dmlp" else AlesalModel
    return cls.from_bytes(blob)


def write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def build_model(s: dict, data: feat.FeatureSet, seed: int, **variant):
    if s["model"] == "dmlp":
        return DmlpModel(DmlpConfig(P=data.P, series_len=data.series.shape[2]), seed=seed)
    if s["channels"] % data.P:
        raise ValueError(f"--channels {s['channels']} is not a multiple of the {data.P} antenna pairs")
    sh = data.spectrograms.shape
    flags = dict(with_TA=not s["no_ta"], with_PA=not s["no_pa"], amplitude_only=bool(s["amplitude_only"]),
                 spectrum_only=bool(s["spectrum_only"]))
    flags.update(variant)
    cfg = ModelConfig(P=data.P, series_len=data.series.shape[2], n_frames=sh[2], n_bins=sh[3],
                      me_channels=s["channels"] // data.P, gru_hidden=int(s["gru_hidden"]), d_k=int(s["d_k"]),
                      pa_gamma=float(s["gamma"]), pa_b=float(s["b"]), shared_gru=bool(s["shared_gru"]), **flags)
    return AlesalModel(cfg, seed=seed)


def train_config(s: dict) -> TrainConfig:
    return TrainConfig(lr=float(s["lr"]), batch_size=int(s["batch_size"]), max_epochs=int(s["epochs"]),
                       patience=int(s["patience"]), val_fraction=float(s["val_fraction"]))


def history_csv(history) -> str:
    rows = ["epoch,train_loss,train_acc,val_loss,val_acc,param_digest"]
    fmt = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
    for h in history:
        rows.append(f"{h.epoch},{h.train_loss:.6f},{h.train_acc:.6f},{fmt(h.val_loss)},{fmt(h.val_acc)},{h.param_digest}")
    return "\n".join(rows) + "\n"


def _print_report(report: EvalReport) -> None:
    sys.stdout.write(report.to_text())


# ---------------------------------------------------------------------------
# commands


def cmd_synth(s: dict, ns) -> int:
    duration = s["duration"] if s["duration"] is not None else s["window_sec"]
    sessions = gen_dataset([int(s["per_class"])] * 3, int(s["seed"]), duration=float(duration), rate=float(s["rate"]),
                           P=int(s["pairs"]), S=int(s["subcarriers"]), noise_std=float(s["noise_std"]),
                           carrier=float(s["carrier"]), weak_pair=s["weak_pair"], weak_factor=float(s["weak_factor"]))
    out: Path = ns.out
    out.mkdir(parents=True, exist_ok=True)
    for i, sess in enumerate(sessions):
        text = serialize_session(sess.meta, records_from_uniform(sess.csi), single_precision=True).encode()
        (out / f"session_{i:04d}.csis.gz").write_bytes(gzip.compress(text, compresslevel=6, mtime=0))
        (out / f"session_{i:04d}.labels").write_text(serialize_labels(sess.meta.label_track))
        (out / f"session_{i:04d}.scenario.json").write_text(scenario_to_json(sess.spec))
    print(f"wrote {len(sessions)} sessions ({s['per_class']} per class) to {out}")
    return 0


def cmd_preprocess(s: dict, ns) -> int:
    params = preprocess_params(s)
    fs = feat.featurize_sessions(load_sessions(ns.data, params.rate), params, s["hop"])
    write_bytes(ns.out, feat.dumps(fs))
    print(f"wrote {len(fs)} windows x {fs.P} pairs to {ns.out}")
    return 0


def cmd_train(s: dict, ns) -> int:
    data = load_features(ns.data, preprocess_params(s), s["hop"])
    seed = int(s["seed"])
    model = build_model(s, data, seed)
    tc = train_config(s)
    result = fit(model, data, None, tc, seed=seed)
    extra = {"preprocess": data.params.to_dict(), "train": tc.to_dict(), "seed": seed,
             "best_epoch": result.best_epoch, "epochs_run": len(result.history)}
    write_bytes(ns.out, model.to_bytes(extra))
    if ns.history is not None:
        write_bytes(ns.history, history_csv(result.history).encode())
    last = result.history[result.best_epoch - 1]
    print(f"trained {s['model']} on {len(data)} windows: best epoch {result.best_epoch} of {len(result.history)}, "
          f"val loss {last.val_loss}, checkpoint {ns.out}")
    return 0


def _checkpoint_params(meta: dict) -> PreprocessParams:
    return PreprocessParams.from_dict(meta["preprocess"]) if "preprocess" in meta else PreprocessParams()


def cmd_eval(s: dict, ns) -> int:
    model, meta = load_checkpoint(ns.checkpoint)
    data = load_features(ns.data, _checkpoint_params(meta), s["hop"])
    if np.any(data.labels < 0):
        raise ValueError("evaluation data contains unlabeled windows")
    report = evaluate_model(model, data)
    _print_report(report)
    if ns.out is not None:
        write_bytes(ns.out, report.to_csv().encode())
    floors = {k: float(s[f"min_{k}"]) for k in ("accuracy", "weighted_f1") if s[f"min_{k}"] is not None}
    missed = report.check_floors(floors)
    if missed:
        print("metric floor missed: " + ", ".join(f"{k} {getattr(report, k):.2f} < {floors[k]}" for k in missed),
              file=sys.stderr)
        return 3
    return 0


def cmd_infer(s: dict, ns) -> int:
    model, meta = load_checkpoint(ns.checkpoint)
    data = load_features(ns.data, _checkpoint_params(meta), s["hop"], keep_unlabeled=True)
    probs = model.predict_proba(data.series, data.spectrograms)
    rows = ["window_id,start,predicted," + ",".join(f"p_{c}" for c in CLASS_NAMES)]
    for i in range(len(data)):
        ps = ",".join(f"{p:.6f}" for p in probs[i])
        rows.append(f"{int(data.window_ids[i])},{data.starts[i]:.3f},{CLASS_NAMES[int(probs[i].argmax())]},{ps}")
    text = "\n".join(rows) + "\n"
    if ns.out is None:
        sys.stdout.write(text)
    else:
        write_bytes(ns.out, text.encode())
    return 0


def cmd_ablate(s: dict, ns) -> int:
    from .benchmark import VARIANTS

    params = preprocess_params(s)
    train = load_features(ns.data, params, s["hop"])
    test = load_features(ns.test, train.params, s["hop"])
    seed, tc = int(s["seed"]), train_config(s)
    names = list(VARIANTS) + (["dmlp"] if ns.with_baseline else [])
    rows = ["variant,accuracy,weighted_f1,macro_f1,best_epoch"]
    for name in names:
        if name == "dmlp":
            model = build_model(dict(s, model="dmlp"), train, seed)
        else:
            model = build_model(dict(s, model="alesal"), train, seed, **VARIANTS[name])
        result = fit(model, train, None, tc, seed=seed)
        report = evaluate_model(model, test)
        write_bytes(ns.out / f"{name}.ckpt", model.to_bytes({"preprocess": train.params.to_dict(), "seed": seed}))
        rows.append(f"{name},{report.accuracy:.4f},{report.weighted_f1:.4f},{report.macro_f1:.4f},{result.best_epoch}")
        print(f"{name:<8} accuracy {report.accuracy:6.2f}  weighted F1 {report.weighted_f1:6.2f}")
    write_bytes(ns.out / "ablation.csv", ("\n".join(rows) + "\n").encode())
    return 0


def cmd_inspect_attention(s: dict, ns) -> int:
    model, meta = load_checkpoint(ns.checkpoint)
    if not isinstance(model, AlesalModel):
        raise ValueError("attention dumps need an attention model checkpoint")
    data = load_features(ns.data, _checkpoint_params(meta), s["hop"], keep_unlabeled=True)
    if ns.window:
        wanted = sorted(set(ns.window))
        missing = [w for w in wanted if w not in set(data.window_ids.tolist())]
        if missing:
            raise KeyError(f"window ids not in data: {missing}")
        data = data.subset(np.flatnonzero(np.isin(data.window_ids, wanted)))
    ta_rows, pa_rows = ["window_id,pair,frame_i,frame_j,weight"], ["window_id,channel,weight"]
    for i in range(0, len(data), 64):
        sl = slice(i, i + 64)
        out = model.forward(data.series[sl], data.spectrograms[sl], training=False)
        for b, wid in enumerate(data.window_ids[sl]):
            if out.ta_weights is not None:
                for p, mat in enumerate(out.ta_weights[b]):
                    for fi, row in enumerate(mat):
                        ta_rows.extend(f"{wid},{p},{fi},{fj},{float(w):.9f}" for fj, w in enumerate(row))
            if out.pa_weights is not None:
                pa_rows.extend(f"{wid},{c},{float(w):.9f}" for c, w in enumerate(out.pa_weights[b]))
    ns.out.mkdir(parents=True, exist_ok=True)
    written = []
    if model.config.use_spectrum and model.config.with_TA:
        write_bytes(ns.out / "ta_attention.csv", ("\n".join(ta_rows) + "\n").encode())
        written.append("ta_attention.csv")
    if model.config.use_amplitude and model.config.with_PA:
        write_bytes(ns.out / "pa_attention.csv", ("\n".join(pa_rows) + "\n").encode())
        written.append("pa_attention.csv")
    print(f"{len(data)} windows; wrote {', '.join(written) or 'nothing (attention disabled)'} to {ns.out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
    "inspect-attention": cmd_inspect_attention,
}


def _origin(exc: BaseException) -> str:
    tb, name = exc.__traceback__, "alesal"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("alesal"):
            name = mod
        tb = tb.tb_next
    return name


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        settings = resolve(ns)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"alesal: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if settings.get("verbose") else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        with threadpool_limits(limits=max(1, int(settings["threads"]))):
            return COMMANDS[ns.command](settings, ns)
    except Exception as exc:  # reported, not raised: the exit code carries the failure
        print(f"{_origin(exc)}: error: {exc}", file=sys.stderr)
        log.debug("%s", traceback.format_exc())
        return 1


if __name__ == "__main__":
    sys.exit(main())
