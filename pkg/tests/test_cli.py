import numpy as np
import pytest

from reaps import cli
from reaps.checkpoint import load_model
from reaps.imageio import read_pgm, write_ppm
from reaps.ran import compute_cam, ran_forward
from reaps.synthdata import generate_dataset
from reaps.tensor_core import Tensor, nn

TINY_SETS = [
    "model.channels=4,8",
    "model.pool_after=0,1",
    "model.seq_len=4",
    "model.hidden=8",
    "model.crop_size=32",
    "synth.num_classes=3",
    "synth.train_per_class=6",
    "synth.test_per_class=3",
    "synth.image_size=32",
    "synth.min_parts=2",
    "synth.max_parts=2",
    "epochs=2",
    "batch_size=8",
]


def sets(*extra):
    out = []
    for item in [*TINY_SETS, *extra]:
        out += ["--set", item]
    return out


def parse_metrics(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line and not line.startswith("#"))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["-q", "train", *sets(), "--out", str(out)]) == 0
    return out


def test_train_writes_artifacts(trained):
    for name in ("checkpoint.bin", "train_log.tsv", "config.txt", "metrics.txt", "curves.png", "accuracy.png"):
        assert (trained / name).stat().st_size > 0
    rows = (trained / "train_log.tsv").read_text().splitlines()
    assert rows[0].startswith("#epoch\tlr") and len(rows) == 3


def test_train_stdout_is_config_then_metrics(tmp_path, capsys):
    cli.main(["-q", "train", *sets("epochs=1"), "--out", str(tmp_path)])
    lines = capsys.readouterr().out.splitlines()
    comments = [ln for ln in lines if ln.startswith("# ")]
    assert any(ln == "# train.epochs = 1" for ln in comments)
    metrics = parse_metrics("\n".join(ln for ln in lines if not ln.startswith("#")))
    assert {"final_acc", "ran_acc", "psn_global_acc", "mean_iou"} <= metrics.keys()


def test_eval_reproduces_train_metrics(trained, capsys):
    assert cli.main(["-q", "eval", "--checkpoint", str(trained / "checkpoint.bin")]) == 0
    got = parse_metrics(capsys.readouterr().out)
    assert got == parse_metrics((trained / "metrics.txt").read_text())


def test_resume_extends_log(trained, tmp_path):
    out = tmp_path / "more"
    rc = cli.main(["-q", "train", "--checkpoint", str(trained / "checkpoint.bin"), "--set", "epochs=3", "--out", str(out)])
    assert rc == 0
    rows = (out / "train_log.tsv").read_text().splitlines()
    assert rows[-1].startswith("2\t")
    assert load_model(out / "checkpoint.bin")[1].epoch == 3


def test_bad_checkpoint_magic_names_file(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTACKPT" + bytes(32))
    assert cli.main(["eval", "--checkpoint", str(bad)]) == 1
    assert str(bad) in capsys.readouterr().err


def test_unknown_config_key_is_an_error(tmp_path, capsys):
    assert cli.main(["train", "--set", "model.depth=3", "--out", str(tmp_path)]) == 1
    assert "model.depth" in capsys.readouterr().err


def test_cam_exports_match_library(trained, capsys):
    out = trained / "cam"
    assert cli.main(["-q", "cam", "--checkpoint", str(trained / "checkpoint.bin"), "--count", "2", "--out", str(out)]) == 0
    rows = [ln.split("\t") for ln in capsys.readouterr().out.splitlines() if not ln.startswith("#")]
    assert len(rows) == 2
    model, ck = load_model(trained / "checkpoint.bin")
    _, test = generate_dataset(ck.config.synth)
    for i, row in enumerate(rows):
        name = row[0]
        assert (out / f"{name}.pgm").read_bytes().startswith(b"P5\n")
        x0, y0, x1, y1 = (int(v) for v in (out / f"{name}.bbox").read_text().split())
        assert 0 <= x0 < x1 <= 32 and 0 <= y0 < y1 <= 32
        assert [x0, y0, x1, y1] == [int(v) for v in row[2:6]]
        feats = ran_forward(Tensor(test.images[i]), model.ran)
        cam = compute_cam(feats.features, model.ran.head_weight, int(feats.logits.data.argmax()))
        gray = read_pgm(out / f"{name}.pgm")
        assert gray.shape == cam.values.shape
        assert np.unravel_index(gray.argmax(), gray.shape) == np.unravel_index(cam.values.argmax(), cam.values.shape)
        mask = read_pgm(out / f"{name}_mask.pgm")
        assert set(np.unique(mask)) <= {0, 255}
        assert (out / f"{name}.png").stat().st_size > 0


def test_cam_on_external_image(trained, tmp_path, capsys):
    img = np.random.default_rng(0).integers(0, 256, (40, 40, 3), dtype=np.uint8)
    write_ppm(tmp_path / "pic.ppm", img)
    rc = cli.main(["-q", "cam", "--checkpoint", str(trained / "checkpoint.bin"), "--image", str(tmp_path / "pic.ppm"), "--out", str(tmp_path)])
    assert rc == 0
    row = capsys.readouterr().out.splitlines()[-1].split("\t")
    assert row[0] == "pic" and row[-1] == "nan"


def test_gradcheck_command_passes(tmp_path, capsys):
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "failed=0" in out and (tmp_path / "gradcheck.png").exists()


def test_gradcheck_command_catches_broken_backward(monkeypatch, capsys):
    original = nn.Linear.backward

    def wrong(self, grad):
        gx, gw, gb = original(self, grad)
        return gx, gw * 1.01, gb

    monkeypatch.setattr(nn.Linear, "backward", wrong)
    assert cli.main(["gradcheck"]) == 1
    assert "FAIL" in capsys.readouterr().out
