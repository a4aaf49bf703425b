import numpy as np
import pytest

from ppkit.cli import format_percent, main
from ppkit.frames import PlanarFrame420, enhance_frame, iter_yuv, read_yuv, write_yuv
from ppkit.metrics import (bd_rate, curve, curve_from_csv, curve_to_csv, curves_from_long_csv, psnr, qp_subrange,
                           ssim_metric, table_from_manifest)
from ppkit.models import GeneratorConfig, ModelBundle, build_generator, load_model, model_to_bytes, save_model
from ppkit.training import BlockPairDataset

W, H = 64, 48
GEO = ["--width", str(W), "--height", str(H), "--bit-depth", "10"]


def _smooth_frames(seed, n):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W]
    out = []
    for _ in range(n):
        a, b, c = rng.uniform(0.02, 0.2, 3)
        y = 500 + 300 * np.sin(a * xx + b * yy + c)
        cb = np.full((H // 2, W // 2), 512) + rng.integers(-40, 40, (H // 2, W // 2))
        cr = np.full((H // 2, W // 2), 512) + rng.integers(-40, 40, (H // 2, W // 2))
        out.append(PlanarFrame420(W, H, 10, np.rint(y).astype(np.uint16), cb.astype(np.uint16),
                                  cr.astype(np.uint16)))
    return out


@pytest.fixture
def seqs(tmp_path):
    paths = []
    for i in range(2):
        c, o = tmp_path / f"c{i}.yuv", tmp_path / f"o{i}.yuv"
        orig = _smooth_frames(i, 3)
        noisy = [PlanarFrame420(W, H, 10, np.clip(f.y.astype(int) + (7 * np.arange(W * H).reshape(H, W) % 13) - 6,
                                                   64, 940).astype(np.uint16), f.cb, f.cr) for f in orig]
        write_yuv(o, orig)
        write_yuv(c, noisy)
        paths.append((str(c), str(o)))
    return paths


def _build(tmp_path, seqs, name="d.ppkd", seed="4", extra=()):
    out = tmp_path / name
    argv = ["dataset", "build", *GEO, "--blocks-per-frame", "4", "--frames-per-sequence", "2",
            "--block-size", "16", "--seed", seed, "--qp-group", "QP42", "-o", str(out), *extra]
    for c, o in seqs:
        argv += ["--pair", c, o]
    return main(argv), out


class TestDatasetBuild:
    def test_count_and_summary(self, tmp_path, seqs, capsys):
        code, out = _build(tmp_path, seqs)
        assert code == 0
        ds = BlockPairDataset.load(out)
        assert len(ds) == 16 and ds.block_size == 16 and ds.qp_group == "QP42"
        assert "16 block pairs" in capsys.readouterr().out

    def test_deterministic(self, tmp_path, seqs):
        _, a = _build(tmp_path, seqs, "a.ppkd")
        _, b = _build(tmp_path, seqs, "b.ppkd")
        assert a.read_bytes() == b.read_bytes()
        _, c = _build(tmp_path, seqs, "c.ppkd", seed="5")
        assert c.read_bytes() != a.read_bytes()

    def test_geometry_mismatch(self, tmp_path, seqs, capsys):
        bad = tmp_path / "bad.yuv"
        bad.write_bytes(open(seqs[1][1], "rb").read()[:-10])
        code, out = _build(tmp_path, [seqs[0], (seqs[1][0], str(bad))])
        assert code == 2 and not out.exists()
        assert "error:" in capsys.readouterr().err

    def test_list_file(self, tmp_path, seqs):
        lst = tmp_path / "pairs.txt"
        lst.write_text("# pairs\n" + "".join(f"{c} {o} {W} {H} 10\n" for c, o in seqs), encoding="utf-8")
        out = tmp_path / "l.ppkd"
        code = main(["dataset", "build", "--list", str(lst), "--blocks-per-frame", "4", "--frames-per-sequence",
                     "2", "--block-size", "16", "--seed", "4", "--qp-group", "QP42", "-o", str(out)])
        assert code == 0
        _, ref = _build(tmp_path, seqs, "r.ppkd")
        # Same pairs and seed, different source spelling in metadata only.
        assert np.array_equal(BlockPairDataset.load(out).original, BlockPairDataset.load(ref).original)

    def test_missing_input_is_io_error(self, tmp_path, seqs):
        code, out = _build(tmp_path, [(seqs[0][0], str(tmp_path / "nope.yuv"))])
        assert code == 1 and not out.exists()


TRAIN = ["--residual-blocks", "1", "--features", "4", "--epochs", "3", "--batch-size", "4", "--lr", "1e-3",
         "--disc-width", "2", "--disc-dense", "4", "--seed", "2"]


class TestTrain:
    def test_l1(self, tmp_path, seqs, capsys):
        _, ds = _build(tmp_path, seqs)
        out = tmp_path / "m.ppkm"
        assert main(["train", str(ds), "-o", str(out), "--method", "l1", *TRAIN]) == 0
        b = load_model(out)
        assert (b.method, b.codec, b.qp_group) == ("l1", "VVC", "QP42")
        assert b.generator_config == GeneratorConfig(1, 4, input_block_size=16)
        lines = (tmp_path / "m.ppkm.log.csv").read_text().splitlines()
        assert lines[0] == "epoch,step,loss_total,loss_ssim,loss_l1,loss_adv,lr" and len(lines) == 1 + 12

    def test_perceptual(self, tmp_path, seqs):
        _, ds = _build(tmp_path, seqs)
        out = tmp_path / "p.ppkm"
        assert main(["train", str(ds), "-o", str(out), "--method", "perceptual", *TRAIN]) == 0
        b = load_model(out)
        assert b.method == "perceptual" and b.discriminator_params is not None

    def test_resume_equals_straight(self, tmp_path, seqs):
        _, ds = _build(tmp_path, seqs)
        a, b, ck = tmp_path / "a.ppkm", tmp_path / "b.ppkm", tmp_path / "run.ppkc"
        assert main(["train", str(ds), "-o", str(a), "--method", "perceptual", *TRAIN]) == 0
        assert main(["train", str(ds), "-o", str(b), "--method", "perceptual", *TRAIN, "--checkpoint", str(ck),
                     "--stop-after-epoch", "0"]) == 0
        assert not b.exists() and ck.exists()
        assert main(["train", str(ds), "-o", str(b), "--method", "perceptual", *TRAIN, "--checkpoint", str(ck),
                     "--resume", str(ck)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a.ppkm.log.csv").read_text() == (tmp_path / "b.ppkm.log.csv").read_text()

    def test_resume_with_other_config_rejected(self, tmp_path, seqs):
        _, ds = _build(tmp_path, seqs)
        ck = tmp_path / "run.ppkc"
        main(["train", str(ds), "-o", str(tmp_path / "x"), *TRAIN, "--checkpoint", str(ck), "--stop-after-epoch", "0"])
        assert main(["train", str(ds), "-o", str(tmp_path / "x"), *TRAIN[:-2], "--seed", "9",
                     "--resume", str(ck)]) == 2

    def test_bad_inputs(self, tmp_path, seqs):
        _, ds = _build(tmp_path, seqs)
        assert main(["train", str(tmp_path / "none.ppkd"), "-o", str(tmp_path / "m")]) == 1
        assert main(["train", str(ds), "-o", str(tmp_path / "m"), *TRAIN, "--epochs", "0"]) == 2
        assert main(["train", str(ds), "-o", str(tmp_path / "no" / "m"), *TRAIN]) == 1
        assert not (tmp_path / "m").exists()


def _registry(tmp_path, groups, codec="VVC", method="l1"):
    cfg = GeneratorConfig(1, 2, input_block_size=16)
    lines = []
    for i, g in enumerate(groups):
        path = tmp_path / f"{codec}_{g}.ppkm"
        save_model(ModelBundle(codec, g, method, cfg, build_generator(cfg, seed=i).params), path)
        lines.append(f"{codec} {g} {method} {path.name}\n")
    reg = tmp_path / "models.txt"
    reg.write_text("".join(lines), encoding="utf-8")
    return reg


class TestEnhance:
    @pytest.mark.parametrize("qp,group", [(42, "QP42"), (24, "QP22"), (24.5, "QP22")])
    def test_dispatch(self, tmp_path, seqs, capsys, qp, group):
        reg = _registry(tmp_path, ["QP22", "QP42"])
        out = tmp_path / "e.yuv"
        code = main(["enhance", seqs[0][0], "-o", str(out), "--models", str(reg), "--codec", "VVC",
                     "--qp", str(qp), "--method", "l1", *GEO, "--frames", "2"])
        assert code == 0
        assert f"model: VVC {group} l1" in capsys.readouterr().out
        bundle = load_model(tmp_path / f"VVC_{group}.ppkm")
        got = list(iter_yuv(out, W, H, 10))
        assert len(got) == 2
        for i, frame in enumerate(got):
            assert frame == enhance_frame(bundle, read_yuv(seqs[0][0], W, H, 10, i))

    def test_missing_group(self, tmp_path, seqs, capsys):
        reg = _registry(tmp_path, ["QP22"])
        out = tmp_path / "e.yuv"
        code = main(["enhance", seqs[0][0], "-o", str(out), "--models", str(reg), "--codec", "VVC",
                     "--qp", "37", "--method", "l1", *GEO])
        assert code == 3 and not out.exists()
        err = capsys.readouterr().err
        assert "QP37" in err and "available: VVC QP22 l1" in err

    def test_single_model_and_workers(self, tmp_path, seqs):
        _registry(tmp_path, ["QP42"])
        a, b = tmp_path / "a.yuv", tmp_path / "b.yuv"
        m = str(tmp_path / "VVC_QP42.ppkm")
        assert main(["enhance", seqs[1][0], "-o", str(a), "--model", m, *GEO]) == 0
        assert main(["enhance", seqs[1][0], "-o", str(b), "--model", m, *GEO, "--workers", "3",
                     "--batch-size", "2"]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert a.stat().st_size == (tmp_path / seqs[1][0]).stat().st_size
        assert main(["enhance", seqs[1][0], "-o", str(a), "--model", m, *GEO, "--codec", "VVC",
                     "--qp", "30"]) == 2

    def test_bad_geometry(self, tmp_path, seqs):
        reg = _registry(tmp_path, ["QP42"])
        out = tmp_path / "e.yuv"
        assert main(["enhance", seqs[0][0], "-o", str(out), "--models", str(reg), "--codec", "VVC", "--qp", "42",
                     "--method", "l1", "--width", "62", "--height", str(H)]) == 2
        assert not out.exists()


class TestQuality:
    def test_identical(self, seqs, capsys):
        assert main(["quality", seqs[0][1], seqs[0][1], *GEO]) == 0
        rows = capsys.readouterr().out.splitlines()
        assert rows[0] == "frame,psnr_y,ssim_y" and len(rows) == 1 + 3 + 1
        for r in rows[1:]:
            _, p, s = r.split(",")
            assert float(p) == 100.0 and float(s) == pytest.approx(1.0, abs=1e-12)

    def test_delegates_to_metrics(self, seqs, capsys, tmp_path):
        out = tmp_path / "q.csv"
        assert main(["quality", seqs[0][1], seqs[0][0], *GEO, "--csv", str(out)]) == 0
        text = capsys.readouterr().out
        assert out.read_text() == text
        rows = text.splitlines()[1:]
        refs = list(iter_yuv(seqs[0][1], W, H, 10))
        tests = list(iter_yuv(seqs[0][0], W, H, 10))
        for i, (r, t) in enumerate(zip(refs, tests)):
            assert rows[i] == f"{i},{psnr(r, t)!r},{ssim_metric(r, t)!r}"
        mean = rows[-1].split(",")
        assert mean[0] == "mean"
        assert float(mean[1]) == pytest.approx(np.mean([psnr(r, t) for r, t in zip(refs, tests)]), rel=1e-15)

    def test_mismatch(self, tmp_path, seqs):
        short = tmp_path / "s.yuv"
        write_yuv(short, list(iter_yuv(seqs[0][1], W, H, 10))[:2])
        assert main(["quality", seqs[0][1], str(short), *GEO]) == 2
        assert main(["quality", seqs[0][1], seqs[0][1], "--width", "32", "--height", "40"]) == 2


RATES = [1000.0, 1800.0, 3100.0, 5200.0, 9000.0]
PSNRS = [30.1, 32.4, 34.2, 35.9, 37.3]
QPS = [42, 37, 32, 27, 22]


def _curve_file(tmp_path, name, rates, quals=PSNRS, qps=QPS):
    p = tmp_path / f"{name}.csv"
    curve_to_csv(curve(rates, quals, qps, name), p)
    return p


class TestBdrate:
    def test_identical(self, tmp_path, capsys):
        a = _curve_file(tmp_path, "a", RATES)
        assert main(["bdrate", str(a), str(a)]) == 0
        assert capsys.readouterr().out.strip() == "0.0%"

    def test_halved(self, tmp_path, capsys):
        a = _curve_file(tmp_path, "a", RATES)
        b = _curve_file(tmp_path, "b", [r / 2 for r in RATES])
        out = tmp_path / "r.csv"
        assert main(["bdrate", str(a), str(b), "--csv", str(out)]) == 0
        assert capsys.readouterr().out.strip() == "-50.0%"
        assert float(out.read_text().splitlines()[1].split(",")[-1]) == pytest.approx(-50.0, abs=1e-9)

    def test_high_range(self, tmp_path, capsys):
        a = _curve_file(tmp_path, "a", RATES)
        b = _curve_file(tmp_path, "b", [800.0, 1700.0, 3000.0, 5000.0, 8000.0])
        assert main(["bdrate", str(a), str(b), "--qp-range", "high"]) == 0
        got = capsys.readouterr().out.strip()
        ca, cb = curve_from_csv(a), curve_from_csv(b)
        high = bd_rate(qp_subrange(ca, "high"), qp_subrange(cb, "high"))
        assert [p.qp for p in qp_subrange(ca, "high").points] == [42, 37, 32, 27]
        assert got == format_percent(high)
        assert got != format_percent(bd_rate(qp_subrange(ca, "low"), qp_subrange(cb, "low")))

    def test_invalid_curve(self, tmp_path, capsys):
        a = _curve_file(tmp_path, "a", RATES)
        bad = tmp_path / "bad.csv"
        bad.write_text("bitrate_kbps,quality\n1,2\n2,1\n3,3\n4,4\n", encoding="utf-8")
        assert main(["bdrate", str(a), str(bad)]) == 2
        assert "quality" in capsys.readouterr().err
        assert main(["bdrate", str(a)]) == 2

    def test_table_byte_stable(self, tmp_path, capsys):
        _curve_file(tmp_path, "anchor1", RATES)
        _curve_file(tmp_path, "test1", [r * 0.9 for r in RATES])
        _curve_file(tmp_path, "test2", [r * 0.8 for r in RATES])
        man = tmp_path / "table.csv"
        man.write_text("sequence,column,anchor,test,qp_range\n"
                       "A1-Foo,PSNR low,anchor1.csv,test1.csv,low\n"
                       "B-Bar,PSNR low,anchor1.csv,test2.csv,low\n"
                       "A1-Foo,PSNR high,anchor1.csv,test2.csv,high\n", encoding="utf-8")
        out1, out2 = tmp_path / "t1.csv", tmp_path / "t2.csv"
        assert main(["bdrate", "--table", str(man), "--csv", str(out1)]) == 0
        first = capsys.readouterr().out
        assert main(["bdrate", "--table", str(man), "--csv", str(out2)]) == 0
        assert capsys.readouterr().out == first == table_from_manifest(man).to_text()
        assert out1.read_bytes() == out2.read_bytes()
        assert "Class A" in first and "-10.0%" in first


class TestCurves:
    def test_merge_round_trip(self, tmp_path):
        b = _curve_file(tmp_path, "zeta", [r * 1.1 for r in RATES])
        a = _curve_file(tmp_path, "alpha", RATES)
        out, gp = tmp_path / "all.csv", tmp_path / "all.dat"
        assert main(["curves", str(b), str(a), "-o", str(out), "--gnuplot", str(gp)]) == 0
        assert len(out.read_text().splitlines()) == 1 + 10
        back = curves_from_long_csv(out)
        assert [c.label for c in back] == ["zeta", "alpha"]
        for c, path in zip(back, (b, a)):
            orig = curve_from_csv(path)
            assert c.points == orig.points
        blocks = gp.read_text().split("\n\n\n")
        assert len(blocks) == 2 and blocks[0].startswith("# zeta")
        assert len([ln for ln in blocks[1].splitlines() if not ln.startswith("#")]) == 5

    def test_parse_failure(self, tmp_path):
        a = _curve_file(tmp_path, "a", RATES)
        bad = tmp_path / "bad.csv"
        bad.write_text("rate,psnr\n", encoding="utf-8")
        out = tmp_path / "o.csv"
        assert main(["curves", str(a), str(bad), "-o", str(out)]) == 2
        assert not out.exists()


def test_format_percent():
    assert format_percent(-1e-13) == "0.0%" and format_percent(-50.0) == "-50.0%"
    assert format_percent(12.345) == "12.3%"


def test_model_bytes_stable(tmp_path):
    cfg = GeneratorConfig(1, 2, input_block_size=16)
    b = ModelBundle("AV1", "QP63", "l1", cfg, build_generator(cfg, seed=0).params)
    assert model_to_bytes(b) == model_to_bytes(b)
