from pathlib import Path

import pytest
import torch

from mfgtrack.__main__ import main
from mfgtrack.config import dump_flat
from mfgtrack.experiment import (
    ablation_grid,
    build_sequences,
    load_network,
    run_eval,
    run_experiment,
    run_sweep,
    run_tracker_training,
)
from mfgtrack.sequence import read_boxes, save_sequence
from mfgtrack.tracker import MFGTrackNet

FIXTURES = Path(__file__).parent / "fixtures"


def test_ablation_grid():
    rows = ablation_grid()
    assert len(rows) == 12
    assert len({name for name, _ in rows}) == 12
    names = dict(rows)
    assert names["baseline"] == {
        "mfgnet.mode": "off",
        "cbam.enabled": False,
        "tracker.global_search": False,
    }
    assert "mfg+cbam+global" in names


def test_eval_report():
    report = run_eval(FIXTURES / "pred.txt", FIXTURES / "gt.txt")
    assert report.table.loc["all", "pr"] == pytest.approx(2 / 3)
    assert report.table.loc["all", "frames"] == 3


def test_build_sequences_is_seeded(tiny_settings):
    a, b = build_sequences(tiny_settings, "occlusion"), build_sequences(tiny_settings, "occlusion")
    assert [r.boxes for r in a] == [r.boxes for r in b]
    assert len(a) == 1 and len(a[0]) == 12
    assert "occlusion" in a[0].tags


def test_track_writes_one_line_per_frame(tiny_settings, easy_record, tmp_path):
    report = run_experiment(tiny_settings, "track", [easy_record], out_dir=tmp_path)
    result = tmp_path / f"{easy_record.name}.txt"
    assert result in report.paths
    assert len(read_boxes(result)) == len(easy_record)
    assert (tmp_path / "report.csv").is_file()
    assert (tmp_path / "curves.png").is_file()
    assert report.table.loc["all", "frames"] == len(easy_record)
    filters = torch.load(tmp_path / "filters.pt")
    assert set(filters) == {"visible", "thermal"}
    for name in ("filters_visible.png", "filters_thermal.png"):
        assert tmp_path / name in report.paths
        assert (tmp_path / name).is_file()


def test_track_without_fusion_writes_no_filters(tiny_settings, easy_record, tmp_path):
    settings = tiny_settings.with_overrides({"mfgnet.mode": "off"})
    run_experiment(settings, "track", [easy_record], out_dir=tmp_path)
    assert not (tmp_path / "filters.pt").exists()


def test_sweep_rejects_even_kernels(tiny_settings, easy_record, tmp_path):
    settings = tiny_settings.with_overrides({"tracker.global_search": False})
    report = run_experiment(
        settings,
        "sweep",
        [easy_record],
        param="mfgnet.kernel_size",
        values=["3", "4"],
        out_dir=tmp_path,
    )
    table = report.table
    assert table.loc["mfgnet.kernel_size=3", "status"] == "ok"
    assert table.loc["mfgnet.kernel_size=4", "status"] == "rejected"
    assert "kernel_size" in table.loc["mfgnet.kernel_size=4", "message"]
    assert 0 <= table.loc["mfgnet.kernel_size=3", "pr"] <= 1


def test_network_checkpoint_keeps_domains(tiny_settings, easy_record, tmp_path):
    sequences = [easy_record, easy_record]
    report, net = run_tracker_training(tiny_settings, sequences, tmp_path / "network.pt")
    assert len(report.table) == tiny_settings.train.iterations
    loaded = load_network(tiny_settings, tmp_path / "network.pt")
    assert loaded.head.domains == 2


def test_cli_eval(capsys):
    main(["eval", "--pred", str(FIXTURES / "pred.txt"), "--gt", str(FIXTURES / "gt.txt")])
    assert "0.6667" in capsys.readouterr().out


def test_cli_reports_bad_input(tmp_path, capsys):
    (tmp_path / "bad.txt").write_text("1,2,3\n")
    with pytest.raises(SystemExit) as exit_info:
        main(["eval", "--pred", str(tmp_path / "bad.txt"), "--gt", str(FIXTURES / "gt.txt")])
    assert exit_info.value.code == 1
    assert capsys.readouterr().err.startswith("error:")
    with pytest.raises(SystemExit):
        main(["eval", "--pred", str(tmp_path / "missing.txt"), "--gt", str(FIXTURES / "gt.txt")])


def test_cli_track(tiny_settings, easy_record, tmp_path, capsys):
    config = tmp_path / "tiny.cfg"
    config.write_text(dump_flat(tiny_settings))
    save_sequence(easy_record, tmp_path / "seq")
    main(
        [
            "track",
            "--config",
            str(config),
            "--seq",
            str(tmp_path / "seq"),
            "--out",
            str(tmp_path / "result.txt"),
            "--box-format",
            "xywh",
        ]
    )
    assert len(read_boxes(tmp_path / "result.txt")) == len(easy_record)
    assert "all" in capsys.readouterr().out


def test_attention_training_outputs(tiny_settings, easy_record, tmp_path):
    report = run_experiment(tiny_settings, "attention-train", [easy_record], out_dir=tmp_path)
    assert len(report.table) == tiny_settings.datanet.epochs
    for name in ("datanet.pt", "attention.png", "attention_overlay.png", "report.csv"):
        assert (tmp_path / name).is_file()


def test_sweep_passes_the_network_through(tiny_settings, easy_record, tmp_path, monkeypatch):
    settings = tiny_settings.with_overrides({"tracker.global_search": False})
    net = MFGTrackNet(settings)
    calls = []

    def track(variant, record, variant_net, datanet, log):
        calls.append((variant, variant_net))
        return list(record.boxes)

    monkeypatch.setattr("mfgtrack.experiment.track_sequence", track)
    report = run_sweep(settings, "tracker.n_local", ["16", "24"], [easy_record], tmp_path, net)
    assert list(report.table["status"]) == ["ok", "ok"]
    assert [variant.tracker.n_local for variant, _ in calls] == [16, 24]
    assert all(variant_net is net for _, variant_net in calls)

    calls.clear()
    run_sweep(settings, "mfgnet.kernel_size", ["5"], [easy_record], tmp_path, net)
    [(variant, variant_net)] = calls
    assert variant.mfgnet.kernel_size == 5
    assert variant_net is not net and isinstance(variant_net, MFGTrackNet)
