import csv
import json
import os

import numpy as np
import pytest

from pseudoedge import config as cfgmod
from pseudoedge.cli import main
from pseudoedge.data import load_dataset, write_mask
from pseudoedge.models import capacity_ladder


def minimal(**kw):
    doc = {"method": "pseudo_edge", "preset": "tiny",
           "loss": {"lam": 1.0, "weight_positive": 1.0, "weight_negative": 0.1},
           "evaluation": {"threshold": 0.5}}
    doc.update(kw)
    return doc


class TestResolve:
    def test_fills_defaults_explicitly(self):
        r = cfgmod.resolve(minimal(), env={})
        assert r["training"] == {"epochs": 30, "batch_size": 16, "patch_size": 64}
        assert r["networks"]["edge"]["family"] == "conv_stack" and r["networks"]["edge"]["depth"] == 4
        assert r["loss"] == {"lam": 1.0, "weight_positive": 1.0, "weight_negative": 0.1}
        assert r["evaluation"]["threshold"] == 0.5 and r["optimizer"]["lr"] == 1e-3

    def test_paper_preset(self):
        r = cfgmod.resolve(minimal(preset="paper"), env={})
        assert r["training"] == {"epochs": 120, "batch_size": 8, "patch_size": 256}
        assert r["networks"]["segmentation"]["depth"] == 50

    @pytest.mark.parametrize("doc", [minimal(extra=1),
                                     minimal(loss={"lam": 1.0, "weight_positive": 1.0, "weight_negative": 0.1,
                                                   "gamma": 2}),
                                     minimal(networks={"edge": {"widht": 3}}),
                                     minimal(augmentation={"twirl": 1.0})])
    def test_unknown_keys_rejected(self, doc):
        with pytest.raises(cfgmod.ConfigError, match="unknown"):
            cfgmod.resolve(doc, env={})

    @pytest.mark.parametrize("drop", [("method",), ("loss", "lam"), ("loss", "weight_negative"),
                                      ("evaluation", "threshold")])
    def test_method_critical_fields_required(self, drop):
        doc = minimal()
        node = doc
        for key in drop[:-1]:
            node = node[key]
        del node[drop[-1]]
        with pytest.raises(cfgmod.ConfigError, match="missing"):
            cfgmod.resolve(doc, env={})

    def test_bad_values(self):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.resolve(minimal(method="full"), env={})
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.resolve(minimal(evaluation={"threshold": 1.5}), env={})
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.resolve(minimal(networks={"edge": {"depth": 5}}), env={})
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.resolve(minimal(seed="7"), env={})

    def test_seed_env_override(self):
        assert cfgmod.resolve(minimal(seed=3), env={cfgmod.SEED_ENV: "11"})["seed"] == 11
        assert cfgmod.resolve(minimal(seed=3), env={})["seed"] == 3

    def test_hash_is_pure_and_ignores_output_dir(self):
        a = cfgmod.resolve(minimal(), env={})
        b = cfgmod.resolve(minimal(output_dir="elsewhere"), env={})
        assert cfgmod.config_hash(a) == cfgmod.config_hash(b)
        c = cfgmod.resolve(minimal(seed=1), env={})
        assert cfgmod.config_hash(a) != cfgmod.config_hash(c)

    def test_edge_swap_touches_only_the_edge_entry(self):
        r = cfgmod.resolve(minimal(), env={})
        for spec in capacity_ladder("tiny"):
            v = cfgmod.with_edge_spec(r, spec)
            assert {k: x for k, x in v.items() if k != "networks"} == {k: x for k, x in r.items() if k != "networks"}
            assert v["networks"]["segmentation"] == r["networks"]["segmentation"]
            assert v["networks"]["attention"] == r["networks"]["attention"]

    def test_train_config(self):
        t = cfgmod.train_config(cfgmod.resolve(minimal(method="pseudo_edge_attention"), env={}))
        assert t.loss.use_attention and t.patch_size == 64 and len(t.config_hash) == 16


# CLI ----------------------------------------------------------------------

def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = write_json(root / "synth.json", {"n_images": 9, "height": 32, "width": 32,
                                           "nuclei_per_image_range": [2, 4], "seed": 3})
    assert main(["synth", "--config", cfg, "--out", str(root / "data")]) == 0
    return root / "data"


def run_config(tmp_path, corpus_dir, **kw):
    doc = minimal(data={"root": str(corpus_dir)}, output_dir=str(tmp_path / "out"),
                  training={"epochs": 1, "batch_size": 4, "patch_size": 32},
                  evaluation={"threshold": 0.5, "k": 3, "folds": [0]},
                  augmentation={"hflip": 0.5})
    doc.update(kw)
    return write_json(tmp_path / "cfg.json", doc)


class TestCommands:
    def test_points(self, tmp_path):
        masks = tmp_path / "masks"
        masks.mkdir()
        m = np.zeros((10, 10), dtype=int)
        m[2:5, 2:5] = 1
        m[7, 7] = 2
        write_mask(masks / "a.png", m)
        write_mask(masks / "blank.png", np.zeros((6, 6), dtype=int))
        assert main(["points", "--masks", str(masks), "--out", str(tmp_path / "pts")]) == 0
        first = (tmp_path / "pts" / "a.csv").read_bytes()
        assert first.decode().splitlines() == ["row,col", "3,3", "7,7"]
        assert (tmp_path / "pts" / "blank.csv").read_text() == "row,col\n"
        assert main(["points", "--masks", str(masks), "--out", str(tmp_path / "pts")]) == 0
        assert (tmp_path / "pts" / "a.csv").read_bytes() == first

    def test_points_missing_dir(self, tmp_path):
        assert main(["points", "--masks", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2

    def test_synth_deterministic(self, tmp_path, corpus_dir):
        cfg = write_json(tmp_path / "s.json", {"n_images": 9, "height": 32, "width": 32,
                                               "nuclei_per_image_range": [2, 4], "seed": 3})
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
        for sub in ("images", "masks", "points"):
            for name in sorted(os.listdir(corpus_dir / sub)):
                assert (corpus_dir / sub / name).read_bytes() == (tmp_path / "again" / sub / name).read_bytes()

    def test_synth_empty(self, tmp_path):
        cfg = write_json(tmp_path / "s.json", {"n_images": 0})
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "empty")]) == 0
        assert json.loads((tmp_path / "empty" / "manifest.json").read_text())["count"] == 0

    def test_synth_rejects_unknown_key(self, tmp_path):
        cfg = write_json(tmp_path / "s.json", {"n_images": 1, "colour": "red"})
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "x")]) == 2

    def test_usage_errors(self, tmp_path):
        assert main([]) == 2
        assert main(["train"]) == 2
        assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2

    def test_missing_dataset_path(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", minimal(data={"root": str(tmp_path / "nowhere")}))
        assert main(["train", "--config", cfg]) == 2

    def test_invalid_config(self, tmp_path, corpus_dir):
        cfg = write_json(tmp_path / "c.json", minimal(data={"root": str(corpus_dir)}, bogus=True))
        assert main(["train", "--config", cfg]) == 2

    def test_train_then_eval(self, tmp_path, corpus_dir, capsys):
        cfg = run_config(tmp_path, corpus_dir, method="pseudo_edge_attention")
        assert main(["train", "--config", cfg, "--fold", "1"]) == 0
        out = tmp_path / "out" / "fold1"
        for name in ("checkpoint.pt", "checkpoint.gh.pt", "history.json", "config.resolved.json", "test.json"):
            assert (out / name).exists()
        resolved = json.loads((out / "config.resolved.json").read_text())
        assert resolved["loss"]["lam"] == 1.0 and resolved["evaluation"]["threshold"] == 0.5
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(out / "checkpoint.pt"), "--data", str(corpus_dir),
                     "--panels", str(tmp_path / "panels.png"), "--panel-rows", "2"]) == 0
        res = json.loads(capsys.readouterr().out)
        assert 0 <= res["iou"] <= 1 and len(res["image_ids"]) == 9
        assert (tmp_path / "panels.png").exists()

    def test_eval_errors(self, tmp_path, corpus_dir):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.pt"), "--data", str(corpus_dir)]) == 2
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"junk")
        assert main(["eval", "--checkpoint", str(bad), "--data", str(corpus_dir)]) == 2

    def test_eval_perfect_fixture(self, tmp_path, corpus_dir, capsys):
        """Masks equal to the model's own thresholded output score exactly 1.0."""
        cfg = run_config(tmp_path, corpus_dir, method="baseline_ce")
        assert main(["train", "--config", cfg]) == 0
        ck = tmp_path / "out" / "fold0" / "checkpoint.pt"
        from pseudoedge.train import Checkpoint, predict
        checkpoint = Checkpoint.load(ck)
        fixture = tmp_path / "fixture"
        (fixture / "masks").mkdir(parents=True)
        (fixture / "images").mkdir()
        for s in load_dataset(corpus_dir)[:3]:
            os.link(corpus_dir / "images" / f"{s.id}.png", fixture / "images" / f"{s.id}.png")
            write_mask(fixture / "masks" / f"{s.id}.png", (predict(checkpoint, s.image) > 0.5).astype(int))
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(ck), "--data", str(fixture)]) == 0
        assert json.loads(capsys.readouterr().out)["iou"] == 1.0

    def test_crossval_resumes(self, tmp_path, corpus_dir, capsys):
        cfg = run_config(tmp_path, corpus_dir)
        assert main(["crossval", "--config", cfg, "--methods", "baseline_ce,pseudo_edge"]) == 0
        fold = tmp_path / "out" / "pseudo_edge" / "checkpoints" / "fold0.pt"
        stamp = fold.stat().st_mtime_ns
        rows = list(csv.reader(open(tmp_path / "out" / "report.csv")))
        assert [r[0] for r in rows[1:]] == ["baseline_ce", "pseudo_edge"]
        assert main(["crossval", "--config", cfg, "--methods", "baseline_ce,pseudo_edge"]) == 0
        assert fold.stat().st_mtime_ns == stamp
        assert list(csv.reader(open(tmp_path / "out" / "report.csv"))) == rows

    def test_crossval_k_too_large(self, tmp_path, corpus_dir):
        cfg = run_config(tmp_path, corpus_dir, evaluation={"threshold": 0.5, "k": 20})
        assert main(["crossval", "--config", cfg]) == 2

    def test_crossval_unknown_method(self, tmp_path, corpus_dir):
        assert main(["crossval", "--config", run_config(tmp_path, corpus_dir), "--methods", "magic"]) == 2

    def test_ablate(self, tmp_path, corpus_dir):
        cfg = run_config(tmp_path, corpus_dir, seed=4)
        assert main(["ablate", "--config", cfg]) == 0
        rows = list(csv.reader(open(tmp_path / "out" / "ablation" / "report.csv")))
        header, body = rows[0], rows[1:]
        assert [r[0] for r in body] == [s.name for s in capacity_ladder("tiny")]
        assert len(body) == 7
        hashes = [r[header.index("config_hash")] for r in body]
        assert len(set(hashes)) == 7
        assert {r[header.index("seed")] for r in body} == {"4"}
