import pytest

from clustile import cli
from clustile.aggregate import load_grid
from clustile.nmf import load_model
from clustile.tensor_io import load_manifest


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    out = root / "data"
    rc = cli.main([
        "synth", "--out", str(out), "--seed", "21", "--n-slides", "2",
    ])
    assert rc == 0
    manifests = sorted(str(p) for p in out.glob("*/manifest.txt"))
    assert len(manifests) == 2
    return root, manifests


@pytest.fixture(scope="module")
def trained(dataset):
    root, manifests = dataset
    out = root / "run"
    assert cli.main(["train", *manifests, "--k", "6", "--seed", "0",
                     "--out", str(out)]) == 0
    assert cli.main(["infer", *manifests, "--model", str(out / "model.clt"),
                     "--out", str(out)]) == 0
    return root, manifests, out


def test_synth_writes_valid_dataset(dataset):
    _, manifests = dataset
    for path in manifests:
        manifest = load_manifest(path)
        assert manifest.tiles


def test_synth_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["synth", "--out", str(a), "--seed", "5"]) == 0
    assert cli.main(["synth", "--out", str(b), "--seed", "5"]) == 0
    for pa in sorted(a.rglob("*")):
        if pa.is_file():
            pb = b / pa.relative_to(a)
            assert pb.read_bytes() == pa.read_bytes(), pa.name


def test_synth_rejects_bad_spec(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text("tiles_x = 0\n")
    rc = cli.main(["synth", "--spec", str(spec), "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_VALIDATION


def test_train_writes_monotone_log_and_model(trained):
    _, _, out = trained
    model = load_model(out / "model.clt")
    assert model.k == 6
    log_lines = (out / "training_log.tsv").read_text().splitlines()
    objective = [float(line.split("\t")[1]) for line in log_lines[1:]]
    assert len(objective) >= 2
    assert all(b <= a + 1e-10 for a, b in zip(objective, objective[1:]))


def test_infer_writes_weight_grids(trained):
    _, _, out = trained
    grids = sorted((out / "weights").glob("*.meta"))
    assert len(grids) == 2
    grid = load_grid(str(grids[0])[: -len(".meta")])
    assert grid.kind == "weights" and grid.channels == 6


def test_render_modes(trained):
    root, _, out = trained
    grids = sorted((out / "weights").glob("*.meta"))
    base = str(grids[0])[: -len(".meta")]
    render_out = root / "renders"
    assert cli.main(["render", base, "--out", str(render_out)]) == 0
    slide_id = load_grid(base).slide_id
    names = {p.name for p in render_out.glob("*.png")}
    assert f"{slide_id}.blend.6.png" in names
    assert f"{slide_id}.cluster.6.png" in names
    assert f"{slide_id}.class1.6.png" in names and f"{slide_id}.class6.6.png" in names


def test_render_composites_over_tissue(trained):
    root, _, out = trained
    grids = sorted((out / "weights").glob("*.meta"))
    base = str(grids[0])[: -len(".meta")]
    slide_img = sorted((root / "data").glob("*/slide.ppm"))[0]
    tissue_out = root / "tissue_render"
    assert cli.main(["render", base, "--out", str(tissue_out), "--mode", "cluster",
                     "--tissue", str(slide_img), "--opacity", "0.5"]) == 0
    assert len(list(tissue_out.glob("*.cluster.6.png"))) == 1


def test_analyze_reports(trained):
    root, manifests, out = trained
    analyze_out = root / "analysis"
    assert cli.main(["analyze", *manifests, "--model", str(out / "model.clt"),
                     "--out", str(analyze_out), "--all-kinds"]) == 0
    summary = (analyze_out / "summary.txt").read_text()
    assert "signs_sum = " in summary and "auc = " in summary
    for name in ("correlation.tsv", "cosine.tsv", "surrogate.tsv",
                 "cosine.clt", "correlation_mean.clt", "correlation_std.clt"):
        assert (analyze_out / name).exists()


def test_compare_reports(trained):
    root, manifests, out = trained
    compare_out = root / "compare"
    assert cli.main(["compare", *manifests, "--model", str(out / "model.clt"),
                     "--out", str(compare_out)]) == 0
    table = (compare_out / "gradcam_table.tsv").read_text().splitlines()
    assert len(table) == 7  # header + 6 classes


def test_infer_thread_count_invariance(trained):
    root, manifests, out = trained
    t1, t4 = root / "threads1", root / "threads4"
    assert cli.main(["infer", *manifests, "--model", str(out / "model.clt"),
                     "--out", str(t1), "--threads", "1"]) == 0
    assert cli.main(["infer", *manifests, "--model", str(out / "model.clt"),
                     "--out", str(t4), "--threads", "4"]) == 0
    for pa in sorted((t1 / "weights").iterdir()):
        pb = t4 / "weights" / pa.name
        assert pa.read_bytes() == pb.read_bytes()


def test_compare_without_gradients_names_missing_files(tmp_path, capsys):
    out = tmp_path / "nograd"
    assert cli.main(["synth", "--out", str(out), "--seed", "3",
                     "--no-gradients"]) == 0
    manifest = out / "manifest.txt"
    run = tmp_path / "run"
    assert cli.main(["train", str(manifest), "--k", "3", "--out", str(run)]) == 0
    rc = cli.main(["compare", str(manifest), "--model", str(run / "model.clt"),
                   "--out", str(tmp_path / "cmp")])
    assert rc == cli.EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "gradient" in err and ".clt" in err


def test_missing_input_is_io_error(tmp_path):
    rc = cli.main(["train", str(tmp_path / "nope.txt"), "--out", str(tmp_path)])
    assert rc == cli.EXIT_IO


def test_config_file_defaults_with_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 9\nn_slides = 1\n")
    out_a = tmp_path / "a"
    assert cli.main(["--config", str(cfg), "synth", "--out", str(out_a)]) == 0
    out_b = tmp_path / "b"
    assert cli.main(["synth", "--out", str(out_b), "--seed", "9"]) == 0
    assert (out_a / "manifest.txt").read_bytes() == (out_b / "manifest.txt").read_bytes()

    # explicit flag wins over the config value
    out_c = tmp_path / "c"
    assert cli.main(["--config", str(cfg), "synth", "--out", str(out_c),
                     "--seed", "10"]) == 0
    assert (out_c / "manifest.txt").read_bytes() != (out_a / "manifest.txt").read_bytes()