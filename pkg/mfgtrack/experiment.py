import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from .box import BoundingBox
from .config import Settings
from .datanet import ClipInput, DaTANet, centroid_hit_rate, crop_template, train_attention
from .errors import ConfigError
from .evaluate import evaluate, evaluate_by_tag
from .mfgnet import export_filters
from .plot import plot_attention, plot_curves, plot_filters
from .sequence import SequenceRecord, read_boxes, write_boxes
from .synth import easy_spec, generate_sequence, occlusion_spec
from .tracker import MFGTrackNet, Tracker, train_tracker

Mode = Literal["attention-train", "tracker-train", "track", "eval", "sweep", "ablation"]
REPORT_FILE = "report.csv"
FILTERS_FILE = "filters.pt"
# Overrides under these keys change the shapes or weights of the tracking network
ARCHITECTURE_KEYS = ("backbone.", "cbam.", "mfgnet.", "tracker.hidden", "tracker.roi_grid")


@dataclass
class Report:
    mode: str
    table: pd.DataFrame
    paths: List[Path] = field(default_factory=list)

    def write(self, out_dir: Union[str, Path]) -> Path:
        path = Path(out_dir) / REPORT_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        self.table.to_csv(path)
        self.paths.append(path)
        return path


def build_sequences(
    settings: Settings,
    kind: Literal["easy", "occlusion"] = "easy",
    count: Optional[int] = None,
) -> List[SequenceRecord]:
    """Seeded synthetic sequences of the experiment's size."""
    cfg = settings.experiment
    sequences = []
    for index in range(count or cfg.num_sequences):
        seed = cfg.seed + index
        rng = np.random.default_rng(seed)
        name = f"{kind}-{index:02d}"
        if kind == "occlusion":
            start = cfg.num_frames // 3
            spec = occlusion_spec(cfg.num_frames, cfg.canvas, start, rng=rng, name=name)
        else:
            spec = easy_spec(cfg.num_frames, cfg.canvas, rng, name)
        sequences.append(generate_sequence(spec, seed))
    return sequences


def save_network(module: torch.nn.Module, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), path)
    return path


def load_network(settings: Settings, path: Union[str, Path]) -> MFGTrackNet:
    """Rebuilds a tracking network from a flat state dict, with as many domain branches as saved."""
    state = torch.load(path)
    domains = len({k.split(".")[2] for k in state if k.startswith("head.branches.")})
    net = MFGTrackNet(settings, max(domains, 1))
    net.load_state_dict(state)
    return net.eval()


def load_datanet(settings: Settings, path: Union[str, Path]) -> DaTANet:
    datanet = DaTANet(settings.datanet)
    datanet.load_state_dict(torch.load(path))
    return datanet.eval()


def _networks(settings: Settings) -> Tuple[Optional[MFGTrackNet], Optional[DaTANet]]:
    cfg = settings.experiment
    net = load_network(settings, cfg.network) if cfg.network else None
    datanet = load_datanet(settings, cfg.attention) if cfg.attention else None
    return net, datanet


def track_sequence(
    settings: Settings,
    record: SequenceRecord,
    net: Optional[MFGTrackNet] = None,
    datanet: Optional[DaTANet] = None,
    log: Optional[logging.Logger] = None,
) -> List[BoundingBox]:
    tracker = Tracker(settings, net, datanet, log)
    return [result.box for result in tracker.track(record.frames, record.boxes[0])]


def export_fusion_filters(
    settings: Settings,
    record: SequenceRecord,
    out_dir: Path,
    net: Optional[MFGTrackNet] = None,
) -> List[Path]:
    """Writes the filter banks predicted for the first frame as a tensor archive and as
    one kernel grid per modality. Nothing is written when dynamic fusion is off."""
    filters = Tracker(settings, net).fusion_filters(record.frames[0], record.boxes[0])
    if filters is None:
        return []
    out_dir.mkdir(parents=True, exist_ok=True)
    export_filters(*filters, out_dir / FILTERS_FILE)
    paths = [out_dir / FILTERS_FILE]
    for name, bank in zip(("visible", "thermal"), filters):
        path = out_dir / f"filters_{name}.png"
        plot_filters(bank.kernels.reshape(-1, bank.size, bank.size).numpy(), path)
        paths.append(path)
    return paths


def run_track(
    settings: Settings,
    sequences: Sequence[SequenceRecord],
    out_dir: Optional[Path] = None,
    net: Optional[MFGTrackNet] = None,
    datanet: Optional[DaTANet] = None,
    log: Optional[logging.Logger] = None,
) -> Report:
    """Tracks every sequence, writes one result file per sequence and a per-tag table,
    plus the curves and the first sequence's fusion filters."""
    out_dir = Path(out_dir or settings.experiment.out_dir)
    report = Report("track", pd.DataFrame())
    runs = []
    for record in sequences:
        pred = track_sequence(settings, record, net, datanet, log)
        path = out_dir / f"{record.name}.txt"
        write_boxes(path, pred)
        report.paths.append(path)
        runs.append((record.tags, pred, list(record.boxes)))
        if log:
            result = evaluate(pred, record.boxes, settings.experiment.pr_threshold)
            log.info("%s: PR %.3f, SR %.3f", record.name, result.pr_at_threshold, result.sr_auc)
    report.table = evaluate_by_tag(runs, settings.experiment.pr_threshold)
    pooled = [(p, g) for _, pred, gt in runs for p, g in zip(pred, gt)]
    curves = evaluate([p for p, _ in pooled], [g for _, g in pooled], settings.experiment.pr_threshold)
    report.paths.append(out_dir / "curves.png")
    plot_curves({"mfgtrack": curves}, out_dir / "curves.png")
    report.paths += export_fusion_filters(settings, sequences[0], out_dir, net)
    report.write(out_dir)
    return report


def run_eval(
    pred_path: Union[str, Path],
    gt_path: Union[str, Path],
    pr_threshold: float = 20.0,
) -> Report:
    result = evaluate(read_boxes(pred_path), read_boxes(gt_path), pr_threshold)
    return Report("eval", pd.DataFrame([result.as_row()], index=pd.Index(["all"], name="tag")))


def run_attention_training(
    settings: Settings,
    sequences: Sequence[SequenceRecord],
    out_dir: Optional[Path] = None,
    log: Optional[logging.Logger] = None,
) -> Tuple[Report, DaTANet]:
    """Trains the attention network, saves it and renders its map on the last frame
    of the first sequence."""
    out_dir = Path(out_dir or settings.experiment.out_dir)
    datanet = DaTANet(settings.datanet)
    losses = train_attention(datanet, sequences, settings.datanet, settings.train.seed, log)
    table = pd.DataFrame({"loss": losses}, index=pd.RangeIndex(1, len(losses) + 1, name="epoch"))
    report = Report("attention-train", table, [save_network(datanet, out_dir / "datanet.pt")])
    record = sequences[0]
    clip_len = settings.datanet.clip_len
    frames = list(record.frames[-clip_len:])
    frames = [frames[0]] * (clip_len - len(frames)) + frames
    template = crop_template(record.frames[0], record.boxes[0], settings.datanet.input_size)
    att = datanet.predict(ClipInput.build(frames, template, settings.datanet.input_size))
    att.resized(record.image_size).save(out_dir / "attention.png")
    plot_attention(record.frames[-1].visible, att, out_dir / "attention_overlay.png", record.name)
    report.paths += [out_dir / "attention.png", out_dir / "attention_overlay.png"]
    if log:
        log.info(
            "Attention centroid inside the target on %.0f%% of %s",
            100 * centroid_hit_rate(datanet, record, settings.datanet),
            record.name,
        )
    report.write(out_dir)
    return report, datanet


def run_tracker_training(
    settings: Settings,
    sequences: Sequence[SequenceRecord],
    out: Optional[Path] = None,
    log: Optional[logging.Logger] = None,
) -> Tuple[Report, MFGTrackNet]:
    out = Path(out or settings.experiment.out_dir / "network.pt")
    net = MFGTrackNet(settings, len(sequences))
    losses = train_tracker(net, sequences, settings, log)
    table = pd.DataFrame(
        [loss.__dict__ for loss in losses],
        index=pd.RangeIndex(1, len(losses) + 1, name="iteration"),
    )
    report = Report("tracker-train", table, [save_network(net, out)])
    report.write(out.parent)
    return report, net


def ablation_grid() -> List[Tuple[str, Dict[str, Any]]]:
    """Fusion mode x CBAM x global search, the baseline being plain concatenation."""
    rows = []
    for mode, cbam, global_search in itertools.product(
        ("off", "naive", "mfg"), (True, False), (True, False)
    ):
        name = "{}{}{}".format(
            "baseline" if mode == "off" else mode,
            "+cbam" if cbam else "",
            "+global" if global_search else "",
        )
        rows.append(
            (
                name,
                {
                    "mfgnet.mode": mode,
                    "cbam.enabled": cbam,
                    "tracker.global_search": global_search,
                },
            )
        )
    return rows


def changes_architecture(overrides: Dict[str, Any]) -> bool:
    return any(key.startswith(ARCHITECTURE_KEYS) for key in overrides)


def _variant_network(
    name: str,
    overrides: Dict[str, Any],
    variant: Settings,
    sequences: Sequence[SequenceRecord],
    net: Optional[MFGTrackNet],
    log: Optional[logging.Logger],
) -> Optional[MFGTrackNet]:
    """The given network when the overrides keep its architecture, otherwise a network
    of the variant's architecture trained on the same sequences."""
    if net is None or not changes_architecture(overrides):
        return net
    if log:
        log.info("%s changes the network architecture, training it first", name)
    trained = MFGTrackNet(variant, len(sequences))
    train_tracker(trained, sequences, variant, log)
    return trained


def _score_runs(
    rows: Sequence[Tuple[str, Dict[str, Any]]],
    settings: Settings,
    sequences: Sequence[SequenceRecord],
    net: Optional[MFGTrackNet],
    datanet: Optional[DaTANet],
    log: Optional[logging.Logger],
) -> pd.DataFrame:
    table = []
    for name, overrides in rows:
        row: Dict[str, Any] = {"run": name, **{k: str(v) for k, v in overrides.items()}}
        try:
            variant = settings.with_overrides(overrides)
        except ConfigError as e:
            if log:
                log.warning("%s rejected: %s", name, e)
            table.append({**row, "status": "rejected", "message": str(e).replace("\n", "; ")})
            continue
        variant_net = _variant_network(name, overrides, variant, sequences, net, log)
        runs = [
            (record.tags, track_sequence(variant, record, variant_net, datanet, log), list(record.boxes))
            for record in sequences
        ]
        result = evaluate_by_tag(runs, variant.experiment.pr_threshold).loc["all"]
        table.append(
            {**row, "status": "ok", "message": "", "pr": result["pr"], "sr_auc": result["sr_auc"]}
        )
        if log:
            log.info("%s: PR %.3f, SR %.3f", name, result["pr"], result["sr_auc"])
    return pd.DataFrame(table).set_index("run")


def _needs_datanet(settings: Settings, rows) -> bool:
    return settings.tracker.global_search or any(
        overrides.get("tracker.global_search") for _, overrides in rows
    )


def run_sweep(
    settings: Settings,
    param: str,
    values: Sequence[str],
    sequences: Sequence[SequenceRecord],
    out_dir: Optional[Path] = None,
    net: Optional[MFGTrackNet] = None,
    datanet: Optional[DaTANet] = None,
    log: Optional[logging.Logger] = None,
) -> Report:
    """Tracks all sequences once per value of one dotted config key. Values that fail
    validation become "rejected" rows.

    A given network is reused by every value that keeps its architecture; the other
    values get a network trained for them first.
    """
    out_dir = Path(out_dir or settings.experiment.out_dir)
    rows = [(f"{param}={value}", {param: value}) for value in values]
    if datanet is None and _needs_datanet(settings, rows):
        _, datanet = run_attention_training(settings, sequences, out_dir / "attention", log)
    report = Report("sweep", _score_runs(rows, settings, sequences, net, datanet, log))
    report.write(out_dir)
    return report


def run_ablation(
    settings: Settings,
    sequences: Sequence[SequenceRecord],
    out_dir: Optional[Path] = None,
    net: Optional[MFGTrackNet] = None,
    datanet: Optional[DaTANet] = None,
    log: Optional[logging.Logger] = None,
) -> Report:
    out_dir = Path(out_dir or settings.experiment.out_dir)
    rows = ablation_grid()
    if datanet is None:
        _, datanet = run_attention_training(settings, sequences, out_dir / "attention", log)
    report = Report("ablation", _score_runs(rows, settings, sequences, net, datanet, log))
    report.write(out_dir)
    return report


def run_experiment(
    settings: Settings,
    mode: Mode,
    sequences: Optional[Sequence[SequenceRecord]] = None,
    log: Optional[logging.Logger] = None,
    **options,
) -> Report:
    """Runs one experiment mode on the given sequences, or on generated ones.

    Args:
        settings (Settings): Validated configuration.
        mode (Mode): One of "attention-train", "tracker-train", "track", "eval",
            "sweep" and "ablation".
        sequences (Optional[Sequence[SequenceRecord]], optional): Input sequences.
            Defaults to `build_sequences(settings)`.
        log (Optional[logging.Logger], optional): Logger. Defaults to None.
        **options: `pred`/`gt`/`pr_threshold` for "eval", `param`/`values` for "sweep",
            `out` for "tracker-train", `out_dir` otherwise.

    Returns:
        Report: The metrics table and the written files.
    """
    if mode == "eval":
        return run_eval(
            options["pred"],
            options["gt"],
            options.get("pr_threshold", settings.experiment.pr_threshold),
        )
    if sequences is None:
        sequences = build_sequences(settings)
    out_dir = options.get("out_dir")
    if mode == "attention-train":
        return run_attention_training(settings, sequences, out_dir, log)[0]
    if mode == "tracker-train":
        return run_tracker_training(settings, sequences, options.get("out"), log)[0]
    net, datanet = _networks(settings)
    if mode == "track":
        return run_track(settings, sequences, out_dir, net, datanet, log)
    if mode == "sweep":
        return run_sweep(
            settings, options["param"], options["values"], sequences, out_dir, net, datanet, log
        )
    if mode == "ablation":
        return run_ablation(settings, sequences, out_dir, net, datanet, log)
    raise ValueError(f"Unknown experiment mode {mode!r}")
