import numpy as np
import pytest
import scipy.sparse as sp
from scipy.io import mmwrite

from ptsne.cli import (
    config_from_meta,
    main,
    parse_run_meta,
    read_csv_column,
    read_embedding_csv,
    write_embedding_csv,
)
from ptsne.core import load_csv
from ptsne.engine import RunConfig
from ptsne.errors import ConfigError, DataFormatError
from ptsne.svg import PALETTE, PLAIN_FILL, label_colors, rank_colors, scatter_svg

RUN_ARGS = [
    "--ppx", "5", "--threads", "3", "--layers", "2",
    "--epochs", "3", "--iters", "5", "--seed", "1",
]


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Workspace with a generated dataset and its leaf labels."""
    root = tmp_path_factory.mktemp("cliws")
    data_csv = root / "data.csv"
    labels_csv = root / "labels.csv"
    rc = main([
        "generate", "gaussians", "--levels", "1", "--clusters", "4",
        "--points", "30", "--seed", "3",
        "--out", str(data_csv), "--labels-out", str(labels_csv),
    ])
    assert rc == 0
    return root, data_csv, labels_csv


@pytest.fixture(scope="module")
def run_out(ws):
    root, data_csv, _ = ws
    outdir = root / "run1"
    rc = main(["run", "--input", str(data_csv), "--outdir", str(outdir), *RUN_ARGS])
    assert rc == 0
    return outdir


class TestGenerate:
    def test_gaussians_products(self, ws):
        _, data_csv, labels_csv = ws
        ds = load_csv(data_csv)
        assert (ds.n, ds.m) == (120, 8)
        labels = read_csv_column(labels_csv, "label")
        assert len(labels) == 120
        assert sorted(set(labels)) == ["leaf0", "leaf1", "leaf2", "leaf3"]
        assert labels[0] == "leaf0" and labels[119] == "leaf3"

    def test_sierpinski(self, tmp_path):
        out = tmp_path / "tri.csv"
        assert main(["generate", "sierpinski", "--depth", "4", "--out", str(out)]) == 0
        ds = load_csv(out)
        assert (ds.n, ds.m) == (42, 42)

    def test_generate_without_kind(self):
        assert main(["generate"]) == 2

    def test_no_command(self):
        assert main([]) == 2


class TestRun:
    def test_writes_all_outputs(self, run_out, ws):
        for name in ("embedding.csv", "cost.csv", "knp.csv", "run_meta", "scatter.svg"):
            assert (run_out / name).exists(), name
        layers = read_embedding_csv(run_out / "embedding.csv")
        assert layers.shape == (2, 120, 2)
        assert np.all(np.isfinite(layers))
        cost_lines = (run_out / "cost.csv").read_text().strip().split("\n")
        assert cost_lines[0] == "epoch,thread,pseudo_normalized_cost"
        assert len(cost_lines) == 1 + 4 * 3  # (epochs + 1) rows x threads
        svg = (run_out / "scatter.svg").read_text()
        assert svg.startswith('<?xml version="1.0"')
        assert svg.count("<circle") == 120

    def test_meta_roundtrip(self, run_out):
        meta = parse_run_meta(run_out / "run_meta")
        cfg = config_from_meta(meta)
        assert cfg == RunConfig(
            ppx=5.0, threads=3, layers=2, theta=0.5,
            epochs=3, iters=5, seed=1, use_momentum=True,
        )
        assert meta["n"] == "120"
        assert meta["k"] == "15"
        assert float(meta["final_cost"]) < 1.0
        assert "linAUC" in meta and "logAUC" in meta

    def test_knp_csv_sane(self, run_out):
        lines = (run_out / "knp.csv").read_text().strip().split("\n")
        assert lines[0] == "k,preservation"
        ks, ps = [], []
        for line in lines[1:]:
            k, p = line.split(",")
            ks.append(int(k))
            ps.append(float(p))
        assert ks[0] == 1 and ks[-1] == 119
        assert all(0.0 <= p <= 1.0 for p in ps)

    def test_byte_determinism(self, ws, run_out):
        root, data_csv, _ = ws
        outdir = root / "run2"
        rc = main(["run", "--input", str(data_csv), "--outdir", str(outdir), *RUN_ARGS])
        assert rc == 0
        for name in ("embedding.csv", "cost.csv", "knp.csv", "scatter.svg"):
            assert (outdir / name).read_bytes() == (run_out / name).read_bytes(), name
        # run_meta matches except wall-clock timings
        a = parse_run_meta(run_out / "run_meta")
        b = parse_run_meta(outdir / "run_meta")
        for key in a:
            if "seconds" in key:
                continue
            assert a[key] == b[key], key

    def test_pool_width_invisible_in_output(self, ws, run_out, monkeypatch):
        root, data_csv, _ = ws
        outdir = root / "run_pw"
        monkeypatch.setenv("PTSNE_POOL_WIDTH", "8")
        rc = main(["run", "--input", str(data_csv), "--outdir", str(outdir), *RUN_ARGS])
        assert rc == 0
        assert (
            (outdir / "embedding.csv").read_bytes()
            == (run_out / "embedding.csv").read_bytes()
        )

    def test_matrix_market_input_identical(self, ws, run_out):
        root, data_csv, _ = ws
        ds = load_csv(data_csv)
        mtx = root / "data.mtx"
        mmwrite(str(mtx), sp.coo_matrix(ds.row_block(0, ds.n)), precision=17)
        outdir = root / "run_mtx"
        rc = main(["run", "--input", str(mtx), "--outdir", str(outdir), *RUN_ARGS])
        assert rc == 0
        assert (
            (outdir / "embedding.csv").read_bytes()
            == (run_out / "embedding.csv").read_bytes()
        )

    def test_debug_thread_trace(self, ws):
        root, data_csv, _ = ws
        outdir = root / "run_dbg"
        rc = main([
            "run", "--input", str(data_csv), "--outdir", str(outdir),
            *RUN_ARGS, "--debug-thread", "0",
        ])
        assert rc == 0
        lines = (outdir / "debug_thread_0.csv").read_text().strip().split("\n")
        assert lines[0] == "iteration,cost,diameter,mean_gain"
        assert len(lines) == 1 + 3 * 5  # epochs x iters

    def test_exit_2_on_bad_config(self, ws):
        root, data_csv, _ = ws
        out = str(root / "bad")
        assert main(["run", "--input", str(data_csv), "--outdir", out,
                     "--ppx", "100"]) == 2
        assert main(["run", "--input", str(data_csv), "--outdir", out,
                     "--ppx", "5", "--threads", "2", "--layers", "3"]) == 2
        assert main(["run", "--input", str(root / "nope.csv"), "--outdir", out,
                     "--ppx", "5"]) == 2

    def test_exit_3_on_degenerate_calibration(self, tmp_path):
        # one-hot rows: every neighbor sits at squared distance exactly 2,
        # and ppx = 2 is below the real-bandwidth floor for such rows
        path = tmp_path / "identity.csv"
        with path.open("w") as fh:
            fh.write(",".join(f"c{i}" for i in range(7)) + "\n")
            for i in range(7):
                fh.write(",".join("1.0" if j == i else "0.0" for j in range(7)) + "\n")
        rc = main(["run", "--input", str(path), "--outdir", str(tmp_path / "o"),
                   "--ppx", "2"])
        assert rc == 3


class TestIndexCache:
    def test_created_then_reused(self, ws, run_out):
        root, data_csv, _ = ws
        cache = root / "nbr.ptni"
        out1 = root / "cache_run1"
        rc = main(["run", "--input", str(data_csv), "--outdir", str(out1),
                   *RUN_ARGS, "--cache-index", str(cache)])
        assert rc == 0
        assert cache.exists()
        stamp = cache.stat().st_mtime_ns
        out2 = root / "cache_run2"
        rc = main(["run", "--input", str(data_csv), "--outdir", str(out2),
                   *RUN_ARGS, "--cache-index", str(cache)])
        assert rc == 0
        assert cache.stat().st_mtime_ns == stamp  # reused, not rebuilt
        assert (
            (out1 / "embedding.csv").read_bytes()
            == (run_out / "embedding.csv").read_bytes()
        )
        assert (
            (out2 / "embedding.csv").read_bytes()
            == (run_out / "embedding.csv").read_bytes()
        )

    def test_ppx_mismatch_rejected(self, ws):
        root, data_csv, _ = ws
        cache = root / "nbr.ptni"  # built for ppx=5 above
        rc = main(["run", "--input", str(data_csv), "--outdir", str(root / "x"),
                   "--ppx", "7", "--cache-index", str(cache)])
        assert rc == 2

    def test_corruption_rejected(self, ws):
        root, data_csv, _ = ws
        cache = root / "broken.ptni"
        cache.write_bytes(b"PTNI" + b"\x01" * 40)
        rc = main(["run", "--input", str(data_csv), "--outdir", str(root / "y"),
                   *RUN_ARGS, "--cache-index", str(cache)])
        assert rc == 2

    def test_size_mismatch_rejected(self, ws, tmp_path):
        root, data_csv, _ = ws
        other = tmp_path / "tri.csv"
        assert main(["generate", "sierpinski", "--depth", "4",
                     "--out", str(other)]) == 0
        cache = root / "nbr.ptni"  # built on the 120-point data
        rc = main(["run", "--input", str(other), "--outdir", str(tmp_path / "z"),
                   *RUN_ARGS, "--cache-index", str(cache)])
        assert rc == 2


class TestEval:
    def test_matches_run_outputs(self, ws, run_out, capsys):
        root, data_csv, _ = ws
        outdir = root / "eval1"
        rc = main(["eval", "--input", str(data_csv),
                   "--embedding", str(run_out / "embedding.csv"),
                   "--outdir", str(outdir)])
        assert rc == 0
        assert (
            (outdir / "knp.csv").read_bytes()
            == (run_out / "knp.csv").read_bytes()
        )
        meta = parse_run_meta(run_out / "run_meta")
        line = capsys.readouterr().out.strip().split("\n")[-1]
        assert line == (
            f"layer=1 linAUC={meta['linAUC']} logAUC={meta['logAUC']}"
        )
        assert (outdir / "eval_meta").read_text().startswith("layer=1 ")

    def test_all_layers(self, ws, run_out):
        root, data_csv, _ = ws
        outdir = root / "eval2"
        rc = main(["eval", "--input", str(data_csv),
                   "--embedding", str(run_out / "embedding.csv"),
                   "--outdir", str(outdir), "--all-layers"])
        assert rc == 0
        assert (outdir / "knp.csv").exists()
        assert (outdir / "knp_layer2.csv").exists()
        assert len((outdir / "eval_meta").read_text().strip().split("\n")) == 2

    def test_size_mismatch(self, ws, run_out, tmp_path):
        other = tmp_path / "tri.csv"
        main(["generate", "sierpinski", "--depth", "4", "--out", str(other)])
        rc = main(["eval", "--input", str(other),
                   "--embedding", str(run_out / "embedding.csv"),
                   "--outdir", str(tmp_path / "e")])
        assert rc == 2


class TestRefine:
    def test_zero_iters_is_identity(self, ws, run_out):
        root, data_csv, _ = ws
        outdir = root / "ref0"
        rc = main(["refine", "--input", str(data_csv),
                   "--embedding", str(run_out / "embedding.csv"),
                   "--outdir", str(outdir), "--ppx", "5", "--extra-iters", "0"])
        assert rc == 0
        before = read_embedding_csv(run_out / "embedding.csv")
        after = read_embedding_csv(outdir / "embedding.csv")
        assert after.shape == (1, 120, 2)
        assert np.array_equal(after[0], before[0])

    def test_polish_runs_and_reports(self, ws, run_out):
        root, data_csv, _ = ws
        outdir = root / "ref1"
        rc = main(["refine", "--input", str(data_csv),
                   "--embedding", str(run_out / "embedding.csv"),
                   "--outdir", str(outdir), "--ppx", "3", "--extra-iters", "30"])
        assert rc == 0
        cost_lines = (outdir / "cost.csv").read_text().strip().split("\n")
        assert len(cost_lines) == 3  # header + before + after
        after = float(cost_lines[2].split(",")[2])
        before = float(cost_lines[1].split(",")[2])
        assert after < before
        assert (outdir / "knp.csv").exists()
        assert (outdir / "scatter.svg").exists()


class TestPlot:
    def test_plain_and_rank_modes(self, ws, run_out, tmp_path):
        emb = str(run_out / "embedding.csv")
        plain = tmp_path / "plain.svg"
        assert main(["plot", "--embedding", emb, "--out", str(plain)]) == 0
        text = plain.read_text()
        assert text.count("<circle") == 120
        assert PLAIN_FILL in text

        ranked = tmp_path / "rank.svg"
        assert main(["plot", "--embedding", emb, "--out", str(ranked),
                     "--color-by", "pairwise-distance-rank",
                     "--ref-point", "7"]) == 0
        rtext = ranked.read_text()
        assert "#d62728" in rtext  # the near end of the ramp
        assert rtext != text

    def test_label_mode(self, ws, run_out, tmp_path):
        _, _, labels_csv = ws
        out = tmp_path / "lab.svg"
        rc = main(["plot", "--embedding", str(run_out / "embedding.csv"),
                   "--out", str(out), "--color-by", "label-column",
                   "--label-column", "label", "--input", str(labels_csv)])
        assert rc == 0
        text = out.read_text()
        for color in PALETTE[:4]:
            assert color in text

    def test_label_mode_requires_input(self, run_out, tmp_path):
        rc = main(["plot", "--embedding", str(run_out / "embedding.csv"),
                   "--out", str(tmp_path / "x.svg"),
                   "--color-by", "label-column", "--label-column", "label"])
        assert rc == 2

    def test_layer_selection(self, run_out, tmp_path):
        emb = str(run_out / "embedding.csv")
        one = tmp_path / "l1.svg"
        two = tmp_path / "l2.svg"
        assert main(["plot", "--embedding", emb, "--out", str(one)]) == 0
        assert main(["plot", "--embedding", emb, "--out", str(two),
                     "--layer", "2"]) == 0
        assert one.read_bytes() != two.read_bytes()
        assert main(["plot", "--embedding", emb, "--out", str(tmp_path / "x.svg"),
                     "--layer", "3"]) == 2

    def test_point_size(self, run_out, tmp_path):
        out = tmp_path / "big.svg"
        assert main(["plot", "--embedding", str(run_out / "embedding.csv"),
                     "--out", str(out), "--point-size", "5"]) == 0
        assert 'r="5.000"' in out.read_text()


class TestEmbeddingCsv:
    def test_roundtrip(self, tmp_path, rng):
        pos = rng.normal(size=(3, 17, 2))
        path = tmp_path / "e.csv"
        write_embedding_csv(path, pos)
        back = read_embedding_csv(path)
        assert np.array_equal(back, pos)

    def test_missing_rows_detected(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("id,layer,x,y\n0,1,0.0,0.0\n2,1,1.0,1.0\n")
        with pytest.raises(DataFormatError):
            read_embedding_csv(path)

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("id,layer,x,y\n0,1,0.0\n")
        with pytest.raises(DataFormatError):
            read_embedding_csv(path)
        path.write_text("wrong,header\n")
        with pytest.raises(DataFormatError):
            read_embedding_csv(path)


class TestSvg:
    def test_deterministic_bytes(self, rng):
        y = rng.normal(size=(40, 2))
        assert scatter_svg(y) == scatter_svg(y.copy())

    def test_validation(self, rng):
        with pytest.raises(ConfigError):
            scatter_svg(np.zeros((0, 2)))
        with pytest.raises(ConfigError):
            scatter_svg(np.zeros((4, 3)))
        with pytest.raises(ConfigError):
            scatter_svg(np.zeros((4, 2)), colors=["#fff"])
        with pytest.raises(ConfigError):
            scatter_svg(np.zeros((4, 2)), point_size=0.0)

    def test_rank_colors(self, rng):
        y = rng.normal(size=(10, 2))
        colors = rank_colors(y, 3)
        assert colors[3] == "#d62728"  # self has rank 0: pure near color
        assert len(set(colors)) == 10
        with pytest.raises(ConfigError):
            rank_colors(y, 10)

    def test_label_colors_cycle(self):
        labs = [f"c{i}" for i in range(15)]
        colors = label_colors(labs)
        assert colors[0] == PALETTE[0]
        assert colors[12] == PALETTE[0]  # palette wraps after 12
        assert label_colors(["b", "a", "b"]) == [PALETTE[0], PALETTE[1], PALETTE[0]]

    def test_coordinates_within_canvas(self, rng):
        y = rng.normal(size=(25, 2)) * 100
        text = scatter_svg(y)
        for line in text.split("\n"):
            if line.startswith("<circle"):
                cx = float(line.split('cx="')[1].split('"')[0])
                cy = float(line.split('cy="')[1].split('"')[0])
                assert 0 <= cx <= 800 and 0 <= cy <= 800
