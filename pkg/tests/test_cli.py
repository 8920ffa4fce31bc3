import csv
import json
from pathlib import Path

import pytest

from shapecpc.cli import main
from shapecpc.checkpoint import load_checkpoint
from shapecpc.sequencing import build_sequences, enumerate_anchors

GOLDEN = Path(__file__).parent / "golden"
FULL_GRID_ARGS = ["--set", "grid.image_side=224", "--set", "grid.patch_side=56", "--set", "grid.stride=28"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["gensynth", "--out", str(out), "--seed", "7"]) == 0
    return out


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory, corpus):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", "--data", str(corpus / "manifest.csv"), "--out", str(out)]) == 0
    return out


class TestGensynth:
    def test_counts(self, corpus):
        files = sorted((corpus / "images").glob("*.imgf"))
        with open(corpus / "manifest.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(files) == 40 and len(rows) == 40
        assert {r["label"] for r in rows} == {"circle", "triangle", "square", "cross"}
        assert all((corpus / r["path"]).exists() for r in rows)

    def test_bitwise_deterministic(self, tmp_path, corpus):
        assert main(["gensynth", "--out", str(tmp_path), "--seed", "7"]) == 0
        for path in corpus.rglob("*"):
            if path.is_file():
                assert (tmp_path / path.relative_to(corpus)).read_bytes() == path.read_bytes(), path.name

    def test_seed_changes_corpus(self, tmp_path, corpus):
        main(["gensynth", "--out", str(tmp_path), "--seed", "8"])
        assert (tmp_path / "images/circle_0000.imgf").read_bytes() != (corpus / "images/circle_0000.imgf").read_bytes()

    def test_histogram_baseline_near_chance(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gensynth", "--out", tmp_path, "--set", "gensynth.images_per_class=50")
        assert code == 0
        assert json.loads(out)["texture_baseline_accuracy"] <= 0.35


class TestPretrain:
    def test_writes_checkpoint_metrics_and_config(self, pretrained):
        ckpt = load_checkpoint(pretrained / "pretrain.scpc")
        assert any(k.startswith("autoregressor.") for k in ckpt.params)
        lines = (pretrained / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 40 * 30
        first = json.loads(lines[0])
        assert set(first) == {"step", "epoch", "texture_losses", "combined", "mean_positive_logit", "mean_negative_logit", "wall_ms"}
        assert [json.loads(x)["step"] for x in lines] == list(range(len(lines)))
        resolved = json.loads((pretrained / "resolved_config.json").read_text())
        assert resolved["pretrain.lr"] == 0.01 and resolved["pretrain.epochs"] == 30

    def test_metrics_to_stdout(self, tmp_path, corpus, capsys):
        code, out, _ = run(capsys, "pretrain", "--data", corpus, "--out", tmp_path, "--metrics", "-",
                           "--set", "pretrain.epochs=1", "--set", "pretrain.n_textures=1")
        assert code == 0
        lines = out.strip().splitlines()
        assert len(lines) == 41
        assert json.loads(lines[0])["step"] == 0 and json.loads(lines[-1])["command"] == "pretrain"


class TestFinetuneAndProbe:
    def test_probe_missing_checkpoint(self, tmp_path, corpus, capsys):
        missing = tmp_path / "absent.scpc"
        code, out, err = run(capsys, "probe", "--data", corpus, "--out", tmp_path, "--checkpoint", missing)
        assert code == 2
        assert len(err.strip().splitlines()) == 1
        payload = json.loads(err)
        assert str(missing) in payload["message"]

    def test_finetune_lr_override_echoed(self, tmp_path, corpus, pretrained, capsys):
        code, out, _ = run(capsys, "finetune", "--data", corpus, "--out", tmp_path,
                           "--checkpoint", pretrained / "pretrain.scpc",
                           "--set", "finetune.lr=0.0375", "--set", "finetune.epochs=3")
        assert code == 0
        resolved = json.loads((tmp_path / "resolved_config.json").read_text())
        assert resolved["finetune.lr"] == 0.0375
        assert '"finetune.lr": 0.0375' in (tmp_path / "resolved_config.json").read_text()
        tuned = load_checkpoint(tmp_path / "finetune.scpc")
        assert tuned.config["labels"] == ["circle", "cross", "square", "triangle"]
        assert not any(k.startswith("autoregressor.") for k in tuned.params)

    def test_probe_reports_accuracies(self, tmp_path, corpus, pretrained, capsys):
        code, out, _ = run(capsys, "probe", "--data", corpus, "--out", tmp_path, "--checkpoint", pretrained / "pretrain.scpc")
        assert code == 0
        report = json.loads((tmp_path / "probe.json").read_text())
        assert report["train_size"] == 20 and report["test_size"] == 20
        assert 0.0 <= report["test_accuracy"] <= 1.0

    def test_digest_mismatch_needs_force(self, tmp_path, corpus, pretrained, capsys):
        args = ["probe", "--data", corpus, "--out", tmp_path, "--checkpoint", pretrained / "pretrain.scpc",
                "--set", "encoder.channels=16,32,32"]
        code, _, err = run(capsys, *args)
        assert code == 2 and json.loads(err)["error"] == "ConfigMismatchError"
        code, _, _ = run(capsys, *args, "--force")
        assert code == 0

    def test_class_count_mismatch(self, tmp_path, corpus, capsys):
        code, _, err = run(capsys, "finetune", "--data", corpus, "--out", tmp_path, "--set", "finetune.classes=3")
        assert code == 2 and json.loads(err)["error"] == "ClassCountMismatch"


class TestGridcheck:
    def test_full_grid_header_and_blocks(self, capsys):
        code, out, _ = run(capsys, "gridcheck", *FULL_GRID_ARGS)
        assert code == 0
        lines = out.splitlines()
        assert lines[0] == "grid 7x7"
        blocks = out.split("\n\n")[1:]
        assert len(blocks) == 9
        expected = {(a.row, a.col): build_sequences(a) for a in enumerate_anchors(7, 3, "forward")}
        for block in blocks:
            head, train, target = block.strip().splitlines()
            row, col = map(int, head.split()[1:])
            tr, tg = expected.pop((row, col))
            assert train.split()[1] == "9" and len(train.split()) == 2 + 9
            assert target.split()[1] == "16" and len(target.split()) == 2 + 16
            assert train.split()[2:] == [f"{r},{c}" for r, c in tr.coords]
            assert target.split()[2:] == [f"{r},{c}" for r, c in tg.coords]
        assert not expected

    @pytest.mark.parametrize(
        "golden, argv",
        [
            ("gridcheck_224_k3_forward.txt", FULL_GRID_ARGS),
            ("gridcheck_64_k2_backward.txt", ["--set", "gridcheck.direction=backward", "--set", "gridcheck.k=2"]),
        ],
    )
    def test_golden(self, capsys, golden, argv):
        code, out, _ = run(capsys, "gridcheck", *argv)
        assert code == 0
        assert out == (GOLDEN / golden).read_text()

    def test_invalid_spec_names_constraint(self, capsys):
        code, out, err = run(capsys, "gridcheck", "--set", "grid.image_side=60")
        assert code == 2 and out == ""
        assert "divisible" in json.loads(err)["message"]


class TestConfig:
    def test_every_bad_key_reported(self, tmp_path, capsys):
        code, _, err = run(capsys, "pretrain", "--data", tmp_path, "--out", tmp_path,
                           "--set", "nope=1", "--set", "pretrain.lr=fast", "--set", "grid.bogus=2")
        assert code == 2
        problems = json.loads(err)["problems"]
        assert len(problems) == 3
        assert any("nope" in p for p in problems) and any("grid.bogus" in p for p in problems)

    def test_config_file_and_threads_env(self, tmp_path, monkeypatch, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"gensynth": {"images_per_class": 2}, "seed": 3}))
        monkeypatch.setenv("SCPC_THREADS", "1")
        code, _, _ = run(capsys, "gensynth", "--config", cfg, "--out", tmp_path / "o")
        assert code == 0
        resolved = json.loads((tmp_path / "o/resolved_config.json").read_text())
        assert resolved["gensynth.images_per_class"] == 2 and resolved["seed"] == 3 and resolved["threads"] == 1
        assert len(list((tmp_path / "o/images").iterdir())) == 8

    def test_missing_manifest(self, tmp_path, capsys):
        code, _, err = run(capsys, "pretrain", "--data", tmp_path / "none.csv", "--out", tmp_path)
        assert code == 2 and "none.csv" in json.loads(err)["message"]


def test_texcheck_dumps_variants(tmp_path, corpus, capsys):
    code, out, _ = run(capsys, "texcheck", corpus / "images/square_0000.imgf", "--out", tmp_path)
    assert code == 0
    report = json.loads(out)
    assert report["files"] == [f"texture_{t}.png" for t in range(6)]
    assert all((tmp_path / f).exists() for f in report["files"])
    assert len(report["edge_overlap"]) == 5
