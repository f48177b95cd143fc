"""Command-line pipeline: preprocess, pretrain, fewshot, table1, encrypt-experiment.

Every command loads the TOML config (``--config``), applies flag overrides,
validates everything up front, then writes its artifacts under ``--out``.
Each artifact embeds the seed and config hash; identical inputs give
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import crypto, encoder, packet_ingest, protonet, synthetic
from .config import ConfigError, RunConfig, load_config
from .seeding import config_hash, derive_seed

logger = logging.getLogger("fewshot_dpi")


class CommandError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(cfg: RunConfig) -> packet_ingest.TokenizedDataset:
    try:
        return packet_ingest.load_dataset(cfg.data.dataset)
    except packet_ingest.DatasetFormatError as exc:
        raise CommandError(f"load dataset {cfg.data.dataset}: {exc}") from exc


def _select(ds: packet_ingest.TokenizedDataset, names) -> packet_ingest.TokenizedDataset:
    try:
        return ds.select_classes(list(names))
    except KeyError:
        raise CommandError(f"unknown class in {list(names)}; available classes: {ds.class_names}") from None


def _fit_length(ds: packet_ingest.TokenizedDataset, max_positions: int) -> packet_ingest.TokenizedDataset:
    if ds.row_len > max_positions:
        logger.info("truncating payloads from %d to %d bytes for the encoder", ds.row_len, max_positions)
        return ds.truncate(max_positions)
    return ds


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(cfg: RunConfig) -> dict:
    """parse -> label -> dedup -> balance -> tokenize -> save, with counts at every stage."""
    out = _out(cfg)
    stats = packet_ingest.ParseStats()
    records = []
    per_file = {}
    for pcap in cfg.data.pcaps:
        file_stats = packet_ingest.ParseStats()
        try:
            records.extend(packet_ingest.parse_pcap(pcap, file_stats))
        except packet_ingest.PcapError as exc:
            raise CommandError(f"parse stage, {pcap}: {exc}") from exc
        per_file[str(pcap)] = file_stats.as_dict()
        stats.merge(file_stats)
    try:
        rules = packet_ingest.load_label_rules(cfg.data.rules) if cfg.data.rules else []
    except ValueError as exc:
        raise CommandError(f"label stage: {exc}") from exc
    labelled = packet_ingest.apply_labels(records, rules, cfg.data.default_label)
    deduped = packet_ingest.deduplicate(labelled) if cfg.data.dedup else labelled
    before = packet_ingest.class_counts(deduped)
    classes = cfg.data.classes or None
    if len(classes or before) < 2:
        raise CommandError(f"balance stage: need at least two classes, found {sorted(before)}")
    try:
        balanced = packet_ingest.balance_classes(deduped, derive_seed(cfg.seed, "ingest"), classes)
    except ValueError as exc:
        raise CommandError(f"balance stage: {exc}") from exc
    ds = packet_ingest.tokenize(balanced, cfg.data.max_len)
    ds.provenance = {"seed": cfg.seed, "config_hash": config_hash(cfg.to_dict())}
    dataset_path = Path(cfg.data.dataset) if cfg.data.dataset else out / "dataset.fsds"
    dataset_path.parent.mkdir(parents=True, exist_ok=True)
    packet_ingest.save_dataset(ds, dataset_path)
    report = {
        "command": "preprocess",
        "seed": cfg.seed,
        "config_hash": config_hash(cfg.to_dict()),
        "parse": stats.as_dict(),
        "files": per_file,
        "labelled": packet_ingest.class_counts(labelled),
        "after_dedup": before,
        "duplicates_removed": len(labelled) - len(deduped),
        "after_balance": packet_ingest.class_counts(balanced),
        "rows": len(ds),
        "row_len": ds.row_len,
        "class_names": ds.class_names,
        "dataset": str(dataset_path),
        "dataset_sha256": ds.digest(),
    }
    _write_json(out / "ingest_report.json", report)
    return report


def cmd_pretrain(cfg: RunConfig) -> dict:
    out = _out(cfg)
    ds = _load_dataset(cfg)
    pair = list(cfg.pretrain.class_pair) or (ds.class_names if len(ds.class_names) == 2 else [])
    if len(pair) != 2:
        raise CommandError(f"pretrain.class_pair must name two classes; available classes: {ds.class_names}")
    enc_cfg = cfg.encoder_config(n_classes=2)
    data = _fit_length(_select(ds, sorted(pair)), enc_cfg.max_positions)
    pcfg = cfg.pretrain_config(derive_seed(cfg.seed, "pretrain"))
    model = encoder.EncoderModel(enc_cfg, seed=derive_seed(cfg.seed, "pretrain", "init"))
    log_path = out / "pretrain_log.jsonl"
    with open(log_path, "w") as log:
        model, history = encoder.pretrain(
            model, data, pcfg, log_fn=lambda e: log.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
        )
    h = config_hash({"encoder": enc_cfg.to_dict(), "pretrain": pcfg.to_dict(), "classes": data.class_names,
                     "dataset": ds.digest()})
    model.metadata.update(seed=cfg.seed, config_hash=h, max_len=data.row_len)
    ckpt = out / "checkpoint.fsck"
    encoder.save_model(model, ckpt)
    report = {
        "command": "pretrain",
        "seed": cfg.seed,
        "config_hash": h,
        "classes": data.class_names,
        "encoder": enc_cfg.to_dict(),
        "pretrain": pcfg.to_dict(),
        "history": [e.to_dict() for e in history],
        "checkpoint": str(ckpt),
        "loss_log": str(log_path),
    }
    _write_json(out / "pretrain_report.json", report)
    return report


def cmd_fewshot(cfg: RunConfig) -> dict:
    out = _out(cfg)
    ds = _load_dataset(cfg)
    try:
        model = encoder.load_model(cfg.fewshot.checkpoint)
    except (encoder.CheckpointError, encoder.ConfigMismatchError) as exc:
        raise CommandError(f"load checkpoint: {exc}") from exc
    trained_on = model.metadata.get("classes", [])
    missing = [c for c in trained_on if c not in ds.class_names]
    if missing:
        raise CommandError(
            f"checkpoint/dataset mismatch: checkpoint was trained on {trained_on}, dataset has {ds.class_names}")
    if model.metadata.get("max_len") not in (None, min(ds.row_len, model.config.max_positions)):
        raise CommandError(
            f"checkpoint/dataset mismatch: checkpoint expects {model.metadata['max_len']}-byte rows, "
            f"dataset has {ds.row_len}")
    names = cfg.data.classes or ds.class_names
    data = _fit_length(_select(ds, names), model.config.max_positions)
    protocol = cfg.fewshot_protocol()
    if protocol.way > len(names):
        raise CommandError(f"{protocol.way}-way episodes need {protocol.way} classes, dataset has {names}")
    seed = derive_seed(cfg.seed, "fewshot")
    train_idx, test_idx = protonet.split_per_class(data.labels, cfg.fewshot.test_fraction,
                                                   np.random.default_rng(derive_seed(seed, "split")))
    train_emb = encoder.extract_embeddings(model, data.subset(train_idx))
    test_emb = encoder.extract_embeddings(model, data.subset(test_idx))
    try:
        head, curve = protonet.train_fewshot(train_emb, protocol, seed=derive_seed(seed, "train"))
        report = protonet.evaluate(test_emb, head, protocol, seed=derive_seed(seed, "eval"))
    except protonet.InsufficientSamplesError as exc:
        raise CommandError(f"fewshot stage: {exc}") from exc
    report.seed = cfg.seed
    report.config_hash = config_hash({"protocol": protocol.to_dict(), "checkpoint": model.metadata.get("config_hash"),
                                      "dataset": ds.digest(), "test_fraction": cfg.fewshot.test_fraction})
    doc = report.to_dict()
    doc["loss_curve"] = curve
    doc["checkpoint_config_hash"] = model.metadata.get("config_hash")
    _write_json(out / "fewshot_report.json", doc)
    return doc


def _table_text(rows: list[dict], shots: list[int]) -> str:
    head = f"{'Trained Classes':<36}{'Novel':<18}" + "".join(f"{f'{s}-shot Acc':>16}{f'{s}-shot F1':>16}" for s in shots)
    lines = [head, "-" * len(head)]
    for row in rows:
        cells = ""
        for s in shots:
            r = row["results"][str(s)]
            cells += f"{100 * r['accuracy']:>8.2f} ±{100 * r['accuracy_std']:>5.2f}"
            cells += f"{100 * r['f1_macro']:>8.2f} ±{100 * r['f1_macro_std']:>5.2f}"
        lines.append(f"{', '.join(row['trained_classes']):<36}{row['novel_class']:<18}{cells}")
    return "\n".join(lines) + "\n"


def cmd_table1(cfg: RunConfig) -> dict:
    """Every class pair as the trained classes, the third as novel, at each shot count."""
    out = _out(cfg)
    ds = _load_dataset(cfg)
    names = sorted(cfg.data.classes or ds.class_names)
    if len(names) != 3:
        raise CommandError(f"table1 needs exactly three classes (set data.classes); dataset has {ds.class_names}")
    data = _select(ds, names)
    enc_cfg = cfg.encoder_config()
    data = _fit_length(data, enc_cfg.max_positions)
    protocol = cfg.fewshot_protocol()
    shots = list(cfg.fewshot.shots)
    pcfg = cfg.pretrain_config(0)
    rows, reports = [], {}
    for pair in itertools.combinations(names, 2):
        novel = next(c for c in names if c not in pair)
        try:
            by_shot = protonet.run_experiment_shots(
                data, pair, novel, enc_cfg, pcfg, protocol, shots, cfg.fewshot.iterations,
                seed=derive_seed(cfg.seed, "fewshot", *pair), test_fraction=cfg.fewshot.test_fraction)
        except protonet.InsufficientSamplesError as exc:
            raise CommandError(f"table1 stage ({', '.join(pair)}): {exc}") from exc
        results = {
            str(s): {"accuracy": r.accuracy, "accuracy_std": r.accuracy_std, "f1_macro": r.f1_macro,
                     "f1_macro_std": r.f1_macro_std, "iterations": len(r.iterations)}
            for s, r in by_shot.items()
        }
        rows.append({"trained_classes": list(pair), "novel_class": novel, "results": results})
        reports[f"{pair[0]}+{pair[1]}"] = {str(s): r.to_dict() for s, r in by_shot.items()}
    doc = {
        "command": "table1",
        "seed": cfg.seed,
        "config_hash": config_hash(cfg.to_dict()),
        "classes": names,
        "shots": shots,
        "iterations": cfg.fewshot.iterations,
        "rows": rows,
        "reports": reports,
    }
    _write_json(out / "table1.json", doc)
    (out / "table1.txt").write_text(_table_text(rows, shots))
    return doc


def cmd_encrypt_experiment(cfg: RunConfig) -> dict:
    out = _out(cfg)
    c = cfg.crypto
    try:
        aes_key = crypto.load_aes_key(c.aes_key) if c.aes_key else None
        fernet_key = crypto.load_fernet_key(c.fernet_key) if c.fernet_key else None
    except (OSError, ValueError) as exc:
        raise CommandError(f"key stage: {exc}") from exc
    ds = _load_dataset(cfg)
    if cfg.data.classes:
        ds = _select(ds, cfg.data.classes)
    enc_cfg = cfg.encoder_config()
    report = crypto.run_encryption_experiment(
        ds, enc_cfg, cfg.pretrain_config(0), seed=derive_seed(cfg.seed, "crypto"), aes_key=aes_key,
        fernet_key=fernet_key, test_fraction=c.test_fraction, iv_policy=crypto.IVPolicy(c.iv_policy),
        test_mode=c.test_mode, fernet_as_text=c.fernet_as_text, benign_class=c.benign_class)
    doc = report.to_dict()
    doc["command"] = "encrypt-experiment"
    doc["root_seed"] = cfg.seed
    doc["run_config_hash"] = config_hash(cfg.to_dict())
    _write_json(out / "encryption_report.json", doc)
    return doc


def cmd_synth(cfg: RunConfig, families: int, per_class: int, payload_len: int) -> dict:
    """Write a synthetic capture plus a rule file that labels each family by source host."""
    out = _out(cfg)
    records = synthetic.motif_families(per_class, families, payload_len, seed=derive_seed(cfg.seed, "ingest", "synth"))
    pcap = out / "synthetic.pcap"
    synthetic.write_pcap(pcap, records)
    rules = out / "rules.csv"
    lines = [",".join(packet_ingest.RULE_FIELDS)]
    for label in sorted({r.label for r in records}):
        src = next(r.tuple.src_ip for r in records if r.label == label)
        lines.append(f"{src},*,*,*,*,*,*,{label}")
    rules.write_text("\n".join(lines) + "\n")
    return {"pcap": str(pcap), "rules": str(rules), "records": len(records)}


# ---------------------------------------------------------------------------
# argument handling


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    simple = {
        "pcap": ("data", "pcaps"), "rules": ("data", "rules"), "dataset": ("data", "dataset"),
        "max_len": ("data", "max_len"), "default_label": ("data", "default_label"),
        "preset": ("encoder", "preset"), "epochs": ("pretrain", "epochs"), "lr": ("pretrain", "learning_rate"),
        "batch_size": ("pretrain", "batch_size"), "checkpoint": ("fewshot", "checkpoint"), "way": ("fewshot", "way"),
        "shot": ("fewshot", "shot"), "query": ("fewshot", "query"), "episodes": ("fewshot", "episodes_per_epoch"),
        "fewshot_epochs": ("fewshot", "epochs"), "eval_episodes": ("fewshot", "eval_episodes"),
        "iterations": ("fewshot", "iterations"), "aes_key": ("crypto", "aes_key"),
        "fernet_key": ("crypto", "fernet_key"), "benign_class": ("crypto", "benign_class"),
    }
    for flag, (section, name) in simple.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(getattr(cfg, section), name, value)
    if getattr(args, "classes", None):
        names = [s.strip() for s in args.classes.split(",") if s.strip()]
        if args.command == "pretrain":
            cfg.pretrain.class_pair = names
        else:
            cfg.data.classes = names
    if getattr(args, "shots", None):
        cfg.fewshot.shots = [int(s) for s in args.shots.split(",")]
    if getattr(args, "fernet_as_text", False):
        cfg.crypto.fernet_as_text = True
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot-dpi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        return p

    def training_flags(p):
        p.add_argument("--preset", choices=["paper-scale", "toy-scale", "custom"])
        p.add_argument("--epochs", type=int, help="pretraining epochs")
        p.add_argument("--lr", type=float, help="peak pretraining learning rate")
        p.add_argument("--batch-size", type=int)

    p = command("preprocess", "pcaps + label rules -> balanced tokenised dataset")
    p.add_argument("--pcap", action="append", help="capture file (repeatable)")
    p.add_argument("--rules", help="label rule CSV")
    p.add_argument("--dataset", help="output dataset path")
    p.add_argument("--max-len", type=int)
    p.add_argument("--default-label")
    p.add_argument("--classes", help="comma-separated classes to keep")

    p = command("pretrain", "train the byte encoder on one pair of known classes")
    p.add_argument("--dataset")
    p.add_argument("--classes", help="the two known classes, comma-separated")
    training_flags(p)
    p.add_argument("--resume", action="store_true", help=argparse.SUPPRESS)

    p = command("fewshot", "extract embeddings, train the prototype head, evaluate")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--classes")
    p.add_argument("--way", type=int)
    p.add_argument("--shot", type=int)
    p.add_argument("--query", type=int)
    p.add_argument("--episodes", type=int, help="training episodes per epoch")
    p.add_argument("--fewshot-epochs", type=int)
    p.add_argument("--eval-episodes", type=int)

    p = command("table1", "all trained-pair / novel-class rows at each shot count")
    p.add_argument("--dataset")
    p.add_argument("--classes")
    training_flags(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--shots", help="comma-separated shot counts, e.g. 5,10")

    p = command("encrypt-experiment", "plaintext vs AES-256-CBC vs Fernet classifiability")
    p.add_argument("--dataset")
    p.add_argument("--classes")
    training_flags(p)
    p.add_argument("--aes-key", help="file holding a raw 32-byte key")
    p.add_argument("--fernet-key", help="file holding a url-safe base64 Fernet key")
    p.add_argument("--fernet-as-text", action="store_true", help="feed base64 token text instead of raw token bytes")
    p.add_argument("--benign-class", help="switch to benign-vs-malicious framing")

    p = command("synth", "write a synthetic capture and matching rule file")
    p.add_argument("--families", type=int, default=3)
    p.add_argument("--per-class", type=int, default=240)
    p.add_argument("--payload-len", type=int, default=32)
    return parser


COMMANDS = {
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "fewshot": cmd_fewshot,
    "table1": cmd_table1,
    "encrypt-experiment": cmd_encrypt_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "resume", False):
            raise CommandError("resuming pretraining is not supported; start a fresh run")
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "synth":
            result = cmd_synth(cfg, args.families, args.per_class, args.payload_len)
        else:
            cfg.validate(args.command)
            result = COMMANDS[args.command](cfg)
    except (ConfigError, CommandError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    summary = {k: v for k, v in result.items() if not isinstance(v, (dict, list))}
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
