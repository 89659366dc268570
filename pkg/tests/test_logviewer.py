import json

from fogseg.utils.logviewer import filter_entries, format_log_entry


def _line(level="INFO", message="hello", **extra):
    return json.dumps({"timestamp": "2024-01-01 00:00:00", "level": level, "logger": "fogseg",
                       "message": message, **extra})


def test_format_shows_context_and_losses():
    text = format_log_entry(_line(operation="train_seg", epoch=2, loss=0.123456), color=False)
    assert text.startswith("2024-01-01 00:00:00 INFO     hello")
    assert "operation=train_seg" in text
    assert "epoch=2" in text
    assert "loss=0.1235" in text


def test_format_shows_metrics_summary():
    text = format_log_entry(_line(metrics={"miou": 0.5, "global_acc": 0.9}), color=False)
    assert "miou=0.5" in text and "global_acc=0.9" in text


def test_non_json_passes_through():
    assert format_log_entry("plain text line") == "plain text line"


def test_filter_by_level_operation_and_text():
    lines = [
        _line("DEBUG", "noise", operation="gradcheck"),
        _line("INFO", "epoch done", operation="train_seg"),
        _line("ERROR", "broken", operation="train_seg"),
        "not json",
        "",
    ]
    assert len(list(filter_entries(lines))) == 4
    assert len(list(filter_entries(lines, level="INFO"))) == 2
    assert len(list(filter_entries(lines, operation="train_seg"))) == 2
    assert list(filter_entries(lines, text="BROKEN")) == [lines[2]]

