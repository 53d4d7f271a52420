"""Command-line front end.

Every command reads one JSON config (``--config``), applies flag overrides
and works inside ``<run_dir>/<name>/``.  Artifacts carry the checksum of the
config that produced them and later stages refuse inputs made under a
different config.

Exit codes: 0 success / signature detected, 1 detection failure,
2 usage or config error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import contextlib
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .attacks import (Owner, PruneConfig, attack_finetune, attack_overwrite, attack_prune,
                      build_zoo, integrity_suite, write_sweep)
from .data import Dataset, blob_splits, digits_standin, load_mnist
from .embedding import EmbedConfig
from .encoding import EncodingScheme, Signature
from .engine import CrossEntropy, Model, OptimizerConfig, Topology, accuracy, read_checkpoint_meta, train
from .extraction import extract
from .keygen import AttackConfig, WMKeySet
from .pipeline import (WatermarkSettings, derive_seed, embed_stage, filter_stage, keygen_stage,
                       scheme_stage)

log = logging.getLogger("blackmarks")

EXIT_OK, EXIT_UNDETECTED, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

DEFAULTS = {
    "name": "default",
    "run_dir": "run",
    "seed": 0,
    "dataset": {"kind": "blobs", "path": None, "num_classes": 10, "per_class": 120, "dim": 16,
                "separation": 6.0, "seed": 1, "train_copies": 16, "test_copies": 8},
    "topology": {"hidden": [256, 128]},
    "optimizer": {"kind": "sgd", "learning_rate": 0.05, "momentum": 0.9, "beta1": 0.9,
                  "beta2": 0.999, "eps": 1e-8, "batch_size": 32, "epochs": 10},
    "watermark": {"per_class": 100, "oversample": 10, "num_variants": 3, "variant_epochs": 5,
                  "variant_lr_factor": 0.1},
    "embed": {"lam": 0.5, "epochs": 15, "lr_factor": 0.1, "train_fraction": 1.0, "key_ratio": 0.1},
    "attack": {"epsilon": 0.5, "iterations": 10, "step_size": None, "decay": 1.0},
    "signature": {"length": 16, "bits": None, "seed": None},
}

# Location-only fields; they do not change what a run computes.
_UNHASHED = ("name", "run_dir")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.code = EXIT_CONFIG if isinstance(exc, ConfigError) else EXIT_RUNTIME


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in out:
            raise ConfigError(f"unknown config field {path + key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config field {path + key!r} must be an object")
            out[key] = _merge(out[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def _set_path(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config field {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config field {dotted!r}")
    node[parts[-1]] = value


@dataclass
class PipelineConfig:
    data: dict

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[list] = None) -> "PipelineConfig":
        doc = {}
        if path:
            try:
                doc = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
        data = _merge(DEFAULTS, doc)
        for item in overrides or []:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            _set_path(data, key, value)
        cfg = cls(data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        sig = self.data["signature"]
        bits = sig["bits"]
        length = len(bits) if bits else sig["length"]
        if not isinstance(length, int) or length < 1:
            raise ConfigError(f"signature length K must be >= 1, got {length}")
        if self.data["dataset"]["kind"] not in ("blobs", "mnist", "digits"):
            raise ConfigError(f"unknown dataset kind {self.data['dataset']['kind']!r}")
        hidden = self.data["topology"]["hidden"]
        if not isinstance(hidden, list) or any(not isinstance(h, int) or h < 1 for h in hidden):
            raise ConfigError("topology.hidden must be a list of positive integers")
        try:
            self.optimizer()
            self.settings()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def sha256(self) -> str:
        core = {k: v for k, v in self.data.items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()

    @property
    def run_path(self) -> Path:
        return Path(self.data["run_dir"]) / self.data["name"]

    def dataset(self) -> tuple:
        d = self.data["dataset"]
        if d["kind"] == "blobs":
            return blob_splits(d["num_classes"], d["per_class"], d["dim"], d["separation"], d["seed"])
        if d["kind"] == "digits":
            return digits_standin(d["seed"], d["train_copies"], d["test_copies"])
        path = d["path"] or os.environ.get("BLACKMARKS_MNIST_DIR")
        if not path or not Path(path).is_dir():
            raise ConfigError(f"MNIST directory not found: {path!r} (set dataset.path or --data-dir)")
        return load_mnist(path, "train"), load_mnist(path, "test")

    def topology(self, train_data: Dataset) -> Topology:
        return Topology.mlp(train_data.dim, self.data["topology"]["hidden"], train_data.num_classes)

    def optimizer(self) -> OptimizerConfig:
        o = self.data["optimizer"]
        return OptimizerConfig(o["kind"], o["learning_rate"], o["momentum"], o["beta1"], o["beta2"],
                               o["eps"], o["batch_size"], o["epochs"], derive_seed(self.seed, "train"))

    def settings(self) -> WatermarkSettings:
        w, e, a = self.data["watermark"], self.data["embed"], self.data["attack"]
        return WatermarkSettings(
            w["per_class"], w["oversample"], w["num_variants"], w["variant_epochs"], w["variant_lr_factor"],
            AttackConfig(a["epsilon"], a["iterations"], a["step_size"], a["decay"]),
            EmbedConfig(e["lam"], e["epochs"], e["lr_factor"], e["train_fraction"], e["key_ratio"]))

    def signature(self) -> Signature:
        s = self.data["signature"]
        if s["bits"]:
            return Signature.from_string(str(s["bits"]))
        seed = s["seed"] if s["seed"] is not None else derive_seed(self.seed, "signature")
        return Signature.random(s["length"], seed)


# ---------------------------------------------------------------------------
# Artifact plumbing
# ---------------------------------------------------------------------------


class Run:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.dir = cfg.run_path
        self.sha = cfg.sha256()
        self._data = None

    def path(self, name: str) -> Path:
        return self.dir / name

    def start(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.json").write_text(json.dumps(self.cfg.data, indent=2, sort_keys=True))

    @property
    def data(self) -> tuple:
        if self._data is None:
            self._data = self.cfg.dataset()
        return self._data

    def _check(self, what: str, sha: Optional[str]) -> None:
        if sha != self.sha:
            raise ConfigError(f"{what} was produced under a different config "
                              f"({(sha or 'none')[:12]} vs {self.sha[:12]})")

    def _need(self, name: str, producer: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise ConfigError(f"{p} is missing; run `blackmarks {producer}` first")
        return p

    def save_model(self, name: str, model: Model, stage: str) -> None:
        model.save(self.path(name), {"config_sha256": self.sha, "stage": stage})

    def load_model(self, name: str, producer: str) -> Model:
        p = self._need(name, producer)
        self._check(str(p), read_checkpoint_meta(p).get("config_sha256"))
        return Model.load(p)

    def load_scheme(self) -> EncodingScheme:
        p = self._need("scheme.json", "scheme")
        self._check(str(p), json.loads(p.read_text()).get("config_sha256"))
        return EncodingScheme.load(p)

    def load_keys(self, stem: str, producer: str) -> WMKeySet:
        p = self._need(f"{stem}.json", producer)
        self._check(str(p), json.loads(p.read_text()).get("config_sha256"))
        return WMKeySet.load(self.dir, stem)

    def report(self, name: str, doc: dict) -> Path:
        doc = dict(doc)
        doc["config"] = self.cfg.data
        doc["config_sha256"] = self.sha
        p = self.path(name)
        p.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable))
        return p


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # surfaced with the stage name, mapped to an exit code
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(run: Run, args) -> int:
    with stage("train"):
        train_data, test_data = run.data
        topo = run.cfg.topology(train_data)
        model = Model.init(topo, derive_seed(run.cfg.seed, "init"))
        model, seconds = train(model, train_data, run.cfg.optimizer(), CrossEntropy())
        run.save_model("base", model, "train")
        acc = accuracy(model, test_data.images, test_data.labels)
        run.report("train_report.json", {"seconds": seconds, "test_accuracy": acc,
                                         "train_accuracy": accuracy(model, train_data.images, train_data.labels),
                                         "model_sha256": model.sha256()})
    print(f"train: test accuracy {acc:.4f} in {seconds:.1f}s")
    return EXIT_OK


def cmd_scheme(run: Run, args) -> int:
    with stage("scheme"):
        base = run.load_model("base", "train")
        scheme = scheme_stage(base, run.data[0], run.cfg.settings(), run.cfg.seed)
        scheme.save(run.path("scheme.json"), {"config_sha256": run.sha})
    print(f"scheme: class_to_bit {list(scheme.class_to_bit)}")
    return EXIT_OK


def cmd_keygen(run: Run, args) -> int:
    with stage("keygen"):
        base = run.load_model("base", "train")
        scheme = run.load_scheme()
        cand = keygen_stage(base, scheme, run.cfg.signature(), run.data[0], run.cfg.settings(), run.cfg.seed)
        cand.save(run.dir, "candidates", {"config_sha256": run.sha})
    print(f"keygen: {len(cand)} candidates for {len(cand.signature)} bits")
    return EXIT_OK


def cmd_embed(run: Run, args) -> int:
    with stage("embed"):
        base = run.load_model("base", "train")
        scheme = run.load_scheme()
        cand = run.load_keys("candidates", "keygen")
        train_data, test_data = run.data
        settings, opt = run.cfg.settings(), run.cfg.optimizer()
        result = embed_stage(base, train_data, cand, scheme, opt, settings, run.cfg.seed, test_data)
        run.save_model("marked", result.model, "embed")
    with stage("filter"):
        keys, filt = filter_stage(cand, result.model, base, train_data, opt, settings, run.cfg.seed)
        keys.save(run.dir, "keys", {"config_sha256": run.sha})
        base_acc = accuracy(base, test_data.images, test_data.labels)
        marked_acc = accuracy(result.model, test_data.images, test_data.labels)
        doc = result.report(settings.embed)
        doc.update({"filter": {"candidates": len(cand), "marked_correct": len(filt.marked_correct),
                               "unmarked_wrong": len(filt.unmarked_wrong), "survivors": len(filt.survivors)},
                    "baseline_test_accuracy": base_acc, "marked_test_accuracy": marked_acc})
        run.report("embed_report.json", doc)
    print(f"embed: {result.seconds:.1f}s, accuracy {base_acc:.4f} -> {marked_acc:.4f}, "
          f"{len(filt.survivors)} surviving keys")
    return EXIT_OK


def _owner(run: Run) -> Owner:
    keys = run.load_keys("keys", "embed")
    signature = run.cfg.signature()
    if keys.signature.bits != signature.bits:
        raise ConfigError("key set carries a different signature than the config")
    return Owner(keys, run.load_scheme(), signature)


def cmd_extract(run: Run, args) -> int:
    with stage("extract"):
        owner = _owner(run)
        if args.model:
            model = Model.load(args.model)
        else:
            model = run.load_model("marked", "embed")
        report = extract(model, owner.keys, owner.scheme, owner.signature, run.data[1])
        run.report("extract_report.json", report.to_dict())
    print(f"extract: BER {report.ber:.4f}, detected {report.detected}")
    return EXIT_OK if report.detected else EXIT_UNDETECTED


def cmd_attack(run: Run, args) -> int:
    with stage(f"attack-{args.kind}"):
        owner = _owner(run)
        marked = run.load_model("marked", "embed")
        train_data, test_data = run.data
        opt = run.cfg.optimizer()
        seed = args.attack_seed if args.attack_seed is not None else derive_seed(run.cfg.seed, f"attack-{args.kind}")
        outcomes, rows = [], []
        if args.kind == "finetune":
            for ep in args.epochs:
                o = attack_finetune(marked, train_data, ep, seed, owner, opt, test_data, args.lr_factor)
                outcomes.append(o)
                rows.append({"epochs": ep, "test_accuracy": o.test_accuracy, "ber": o.report.ber,
                             "detected": o.report.detected})
        elif args.kind == "prune":
            for alpha in args.alpha:
                pc = PruneConfig(alpha, args.epochs[0] if args.epochs else 5, args.lr_factor, seed, args.global_prune)
                o = attack_prune(marked, pc, train_data, owner, opt, test_data)
                outcomes.append(o)
                rows.append({"alpha": alpha, "test_accuracy": o.test_accuracy, "ber": o.report.ber,
                             "detected": o.report.detected})
        else:
            k = args.k or len(owner.signature)
            o = attack_overwrite(marked, train_data, k, seed, owner, opt, run.cfg.settings(), test_data)
            outcomes.append(o)
            rows.append({"attacker_k": k, "test_accuracy": o.test_accuracy, "ber": o.report.ber,
                         "detected": o.report.detected, "attacker_ber": o.attacker_report.ber})
        run.report("attack_report.json", {"kind": args.kind, "runs": [o.to_dict() for o in outcomes]})
        if len(rows) > 1 or args.kind in ("finetune", "prune"):
            write_sweep(run.path("sweep.csv"), rows)
    for r in rows:
        print("attack " + ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    return EXIT_OK if all(r["detected"] for r in rows) else EXIT_UNDETECTED


def _zoo(run: Run, reference: Topology, zoo_seed: int) -> list:
    """Unmarked comparison models, cached under ``zoo/``."""
    tag = f"{run.sha}:{zoo_seed}"
    cached = run.path("zoo")
    names = sorted(p.name for p in cached.iterdir()) if cached.is_dir() else []
    if len(names) == 6 and all(read_checkpoint_meta(cached / n).get("zoo") == tag for n in names):
        return [(n, Model.load(cached / n)) for n in names]
    zoo = build_zoo(run.data[0], reference, run.cfg.optimizer(), zoo_seed)
    for name, model in zoo:
        model.save(cached / name, {"config_sha256": run.sha, "zoo": tag})
    return zoo


def cmd_integrity(run: Run, args) -> int:
    with stage("integrity"):
        owner = _owner(run)
        base = run.load_model("base", "train")
        zoo_seed = args.zoo_seed if args.zoo_seed is not None else derive_seed(run.cfg.seed, "zoo")
        result = integrity_suite(owner, _zoo(run, base.topology, zoo_seed), base.topology)
        run.report("integrity_report.json", result.to_dict())
    for name, r in zip(result.names, result.reports):
        print(f"integrity {name}: BER {r.ber:.4f}")
    return EXIT_OK if result.passed else EXIT_UNDETECTED


def cmd_overhead(run: Run, args) -> int:
    with stage("overhead"):
        train_data, _ = run.data
        opt = run.cfg.optimizer()
        settings = run.cfg.settings()
        scratch_epochs = args.scratch_epochs or opt.epochs
        if args.embed_epochs:
            settings.embed.epochs = args.embed_epochs
        topo = run.cfg.topology(train_data)
        _, scratch_seconds = train(Model.init(topo, derive_seed(run.cfg.seed, "init")), train_data,
                                   opt.replace(epochs=scratch_epochs), CrossEntropy())
        if run.path("base").exists():
            base = run.load_model("base", "train")
        else:
            base, _ = train(Model.init(topo, derive_seed(run.cfg.seed, "init")), train_data, opt, CrossEntropy())
        scheme = scheme_stage(base, train_data, settings, run.cfg.seed)
        cand = keygen_stage(base, scheme, run.cfg.signature(), train_data, settings, run.cfg.seed)
        embedded = embed_stage(base, train_data, cand, scheme, opt, settings, run.cfg.seed)
        ratio = embedded.seconds / scratch_seconds
        if not (np.isfinite(ratio) and ratio > 0):
            raise RuntimeError(f"overhead ratio {ratio} is not a positive finite number")
        run.report("overhead_report.json", {"embed_seconds": embedded.seconds, "scratch_seconds": scratch_seconds,
                                            "ratio": ratio, "embed_epochs": settings.embed.epochs,
                                            "scratch_epochs": scratch_epochs})
    print(f"overhead: embed {embedded.seconds:.2f}s / scratch {scratch_seconds:.2f}s = {ratio:.4f}")
    return EXIT_OK


def cmd_pipeline(run: Run, args) -> int:
    for cmd in (cmd_train, cmd_scheme, cmd_keygen, cmd_embed):
        cmd(run, args)
    args.model = None
    return cmd_extract(run, args)


COMMANDS = {"train": cmd_train, "scheme": cmd_scheme, "keygen": cmd_keygen, "embed": cmd_embed,
            "extract": cmd_extract, "attack": cmd_attack, "integrity": cmd_integrity,
            "overhead": cmd_overhead, "pipeline": cmd_pipeline}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE",
                        help="override a config field, e.g. --set embed.lam=0.5 (repeatable)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--name", help="run name (artifacts go to <run_dir>/<name>/)")
    common.add_argument("--run-dir", help="parent directory for runs")
    common.add_argument("--data-dir", help="directory with the four MNIST IDX files")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="blackmarks", description="Black-box multi-bit DNN watermarking.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("train", "scheme", "keygen", "embed", "integrity", "overhead", "pipeline"):
        p = sub.add_parser(name, parents=[common])
        if name == "integrity":
            p.add_argument("--zoo-seed", type=int)
        if name == "overhead":
            p.add_argument("--scratch-epochs", type=int)
            p.add_argument("--embed-epochs", type=int)
    p = sub.add_parser("extract", parents=[common])
    p.add_argument("--model", help="checkpoint directory to verify (default: the marked model)")

    p = sub.add_parser("attack", parents=[common])
    p.add_argument("kind", choices=["finetune", "prune", "overwrite"])
    p.add_argument("--epochs", type=int, nargs="+", default=None,
                   help="fine-tuning epochs (sweep), or sparse fine-tuning epochs for prune")
    p.add_argument("--alpha", type=float, nargs="+", default=[0.5], help="pruning fractions (sweep)")
    p.add_argument("--global", dest="global_prune", action="store_true", help="one threshold for all layers")
    p.add_argument("--lr-factor", type=float, default=0.1, help="attacker learning rate / base rate")
    p.add_argument("--k", type=int, help="attacker signature length (overwrite)")
    p.add_argument("--attack-seed", type=int)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "attack" and args.kind == "finetune" and args.epochs is None:
        args.epochs = [20]
    try:
        overrides = list(args.set)
        for flag, field in (("seed", "seed"), ("name", "name"), ("run_dir", "run_dir"), ("data_dir", "dataset.path")):
            value = getattr(args, flag)
            if value is not None:
                overrides.append(f"{field}={json.dumps(value)}")
        if args.data_dir:
            overrides.append('dataset.kind="mnist"')
        cfg = PipelineConfig.load(args.config, overrides)
        if args.command == "attack" and args.kind == "finetune" and min(args.epochs) < 1:
            raise ConfigError("fine-tuning epochs must be >= 1")
        run = Run(cfg)
        run.start()
        return COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"blackmarks: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        kind = "config error" if exc.code == EXIT_CONFIG else "error"
        print(f"blackmarks: {kind} {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
