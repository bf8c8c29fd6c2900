"""Exporter tests: wire-format interop, determinism, corruption order, quant."""

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from qreli_export.bundle_io import write_bundle
from qreli_export.config import ExportConfig
from qreli_export.corruption import ResizeThenCorrupt, apply_corruption, resize_and_crop
from qreli_export.export import export_embeddings, export_feature_maps, export_negatives
from qreli_export.fakequant import (
    FakeQuantLinear,
    compute_qparams,
    fake_quantize,
    iter_wrapped,
    wrap_linear_layers,
)
from qreli_export.model_adapter import TinyClipAdapter

DATA = Path(__file__).parent / "data"


def tiny_config(**kw):
    defaults = dict(model_tag="openai", architecture="ViT-B/32", dataset="", batch_size=8)
    defaults.update(kw)
    return ExportConfig(**defaults)


@pytest.fixture()
def image_tree(tmp_path):
    rng = np.random.Generator(np.random.Philox(99))
    root = tmp_path / "data"
    for cname in ("cat", "dog", "ship"):
        d = root / cname
        d.mkdir(parents=True)
        for i in range(4):
            arr = rng.integers(0, 256, size=(64, 80, 3), dtype=np.uint8)
            Image.fromarray(arr, "RGB").save(d / f"{i}.png")
    return str(root)


# -- fake quantization equations --------------------------------------------


def test_golden_vectors_match_consumer_equations():
    """Same quantize-clamp-dequantize equations as the consumer, to 1e-6."""
    golden = json.loads((DATA / "fakequant_golden.json").read_text())
    for case in golden["cases"]:
        x = torch.tensor(case["input"], dtype=torch.float64)
        out = fake_quantize(
            x, case["scale"], case["zero_point"], case["qmin"], case["qmax"]
        )
        expected = torch.tensor(case["expected"], dtype=torch.float64)
        assert torch.all((out - expected).abs() < 1e-6), f"case {case['bits']}-bit"
        scale, zp, qmin, qmax = compute_qparams(
            x, case["bits"], symmetric=case["symmetric"]
        )
        assert scale == pytest.approx(case["scale"], rel=1e-9)
        assert zp == case["zero_point"]
        assert (qmin, qmax) == (case["qmin"], case["qmax"])


def test_wrapped_layers_pass_consumer_verification():
    from qreli.quantize import verify_unique_values

    torch.manual_seed(3)
    net = torch.nn.Sequential(
        torch.nn.Linear(16, 32), torch.nn.GELU(), torch.nn.Linear(32, 8)
    )
    n = wrap_linear_layers(net, bits_w=8, bits_a=8)
    assert n == 2
    for module in iter_wrapped(net):
        wq = module.quantized_weight().detach().numpy().astype(np.float32)
        assert verify_unique_values(wq, 8).passed
    x = torch.randn(4, 16)
    y = net(x)
    assert y.shape == (4, 8)
    assert torch.all(torch.isfinite(y))


# -- configuration ------------------------------------------------------------


def test_config_catalogue_and_grids():
    assert tiny_config(architecture="ViT-B/32").grid == (7, 7)
    assert tiny_config(architecture="ViT-L/14").grid == (16, 16)
    assert tiny_config(architecture="ViT-B/16").grid == (14, 14)
    with pytest.raises(ValueError):
        tiny_config(model_tag="laion2b")  # not in the evaluated catalogue
    with pytest.raises(ValueError):
        tiny_config(corruption="motion_blur")


def test_config_from_toml(tmp_path):
    path = tmp_path / "export.toml"
    path.write_text(
        "\n".join(
            [
                'model_tag = "laion400m_e32"',
                'architecture = "ViT-B/32"',
                'dataset = "cifar10:/data"',
                'prompt_template = "a photo of a {}"',
                "",
                "[quant]",
                "bits_w = 8",
                "bits_a = 8",
                "",
                "[corruption]",
                'name = "gaussian_blur"',
                "severity = 3",
            ]
        )
    )
    cfg = ExportConfig.from_toml(path)
    assert cfg.repo == "laion/CLIP-ViT-B-32-laion400M-e32"
    assert cfg.quant_bits_w == 8
    assert cfg.corruption == "gaussian_blur" and cfg.severity == 3


# -- corruption pipeline ------------------------------------------------------


def test_blur_severity_strictly_increases_pixel_delta():
    rng = np.random.Generator(np.random.Philox(5))
    img = Image.fromarray(rng.integers(0, 256, size=(96, 96, 3), dtype=np.uint8), "RGB")
    base = resize_and_crop(img, size=56)
    ref = np.asarray(base, dtype=np.float64)
    deltas = []
    for severity in range(6):
        out = apply_corruption(base, "gaussian_blur", severity)
        deltas.append(np.abs(np.asarray(out, dtype=np.float64) - ref).mean())
    assert deltas[0] == 0.0
    for a, b in zip(deltas, deltas[1:]):
        assert b > a, f"blur deltas not strictly increasing: {deltas}"


def test_resize_then_corrupt_order_differs_from_corrupt_then_resize():
    rng = np.random.Generator(np.random.Philox(6))
    img = Image.fromarray(rng.integers(0, 256, size=(120, 150, 3), dtype=np.uint8), "RGB")
    resize_first = apply_corruption(resize_and_crop(img, size=56), "pixelate", 4)
    corrupt_first = resize_and_crop(apply_corruption(img, "pixelate", 4), size=56)
    assert resize_first.tobytes() != corrupt_first.tobytes()


def test_no_corruption_equals_plain_pipeline():
    rng = np.random.Generator(np.random.Philox(7))
    img = Image.fromarray(rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8), "RGB")
    plain = ResizeThenCorrupt([img], name=None, severity=0, size=56)
    blurred = ResizeThenCorrupt([img], name="gaussian_blur", severity=0, size=56)
    assert np.array_equal(plain[0], blurred[0])
    assert plain[0].shape == (3, 56, 56)


# -- exports ------------------------------------------------------------------


def test_export_embeddings_interop_with_consumer(tmp_path, image_tree):
    cfg = tiny_config(dataset=image_tree)
    adapter = TinyClipAdapter(cfg)
    out = tmp_path / "emb.qrb"
    info = export_embeddings(cfg, out, adapter=adapter)
    assert info["n"] == 12 and info["classes"] == 3

    from qreli.core import read_bundle
    from qreli.zeroshot import EmbeddingSet, zero_shot_logits

    bundle = read_bundle(out)
    emb = EmbeddingSet.from_bundle(bundle)
    norms = np.linalg.norm(emb.image.astype(np.float64), axis=1)
    assert np.all(np.abs(norms - 1.0) < 1e-5)
    assert np.all(np.isfinite(emb.image))
    assert emb.labels.shape == (12,)
    lset = zero_shot_logits(emb)
    assert lset.logits.shape == (12, 3)
    assert bundle.meta["prompt_template"] == "a photo of a {}"

    # the consumer CLI accepts the exported bundle end to end
    report = tmp_path / "acc.json"
    proc = subprocess.run(
        [
            sys.executable,
            "-m",
            "qreli.cli",
            "zeroshot",
            "--emb",
            str(out),
            "--report",
            str(report),
        ],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert 0.0 <= json.loads(report.read_text())["accuracy"] <= 1.0


def test_export_determinism(tmp_path, image_tree):
    cfg = tiny_config(dataset=image_tree)
    a, b = tmp_path / "a.qrb", tmp_path / "b.qrb"
    export_embeddings(cfg, a, adapter=TinyClipAdapter(cfg))
    export_embeddings(cfg, b, adapter=TinyClipAdapter(cfg))
    assert a.read_bytes() == b.read_bytes()


def test_export_feature_maps_grid_and_cls_removal(tmp_path, image_tree):
    cfg = tiny_config(dataset=image_tree)
    adapter = TinyClipAdapter(cfg)
    out = tmp_path / "maps.qrb"
    info = export_feature_maps(cfg, out, n_samples=5, adapter=adapter)
    assert info["tokens"] == 49  # 7x7 grid, class token dropped

    from qreli.core import read_bundle
    from qreli.spectral import FeatureMapSet, spectrum

    bundle = read_bundle(out)
    assert bundle.meta["grid"] == "7x7"
    tokens = bundle.entries["tokens"]
    assert tokens.shape == (5, 49, adapter.embed_dim)
    spec = spectrum(FeatureMapSet(tokens=tokens, grid=(7, 7)))
    assert spec.mag.shape == (7, 7)

    with pytest.raises(ValueError):
        export_feature_maps(cfg, out, n_samples=999, adapter=adapter)


def test_export_with_in_model_quantization(tmp_path, image_tree):
    from qreli.quantize import verify_unique_values

    cfg = tiny_config(dataset=image_tree, quant_bits_w=8, quant_bits_a=8)
    adapter = TinyClipAdapter(cfg)
    wrapped = list(iter_wrapped(adapter.vision_tower))
    assert wrapped, "quant config must wrap the vision tower"
    for module in wrapped:
        wq = module.quantized_weight().detach().numpy().astype(np.float32)
        assert verify_unique_values(wq, 8).passed
    out = tmp_path / "emb_q.qrb"
    export_embeddings(cfg, out, adapter=adapter)
    from qreli.core import read_bundle

    bundle = read_bundle(out)
    assert bundle.meta["quant"] == "w8a8"
    plain_cfg = tiny_config(dataset=image_tree)
    plain_out = tmp_path / "emb_fp.qrb"
    export_embeddings(plain_cfg, plain_out, adapter=TinyClipAdapter(plain_cfg))
    plain = read_bundle(plain_out)
    assert not np.array_equal(bundle.entries["image"], plain.entries["image"])


def test_export_negatives(tmp_path, image_tree):
    cfg = tiny_config(dataset=image_tree)
    words = tmp_path / "neg.txt"
    words.write_text("something\nstuff\nan object\n")
    out = tmp_path / "neg.qrb"
    info = export_negatives(cfg, out, words_path=words, adapter=TinyClipAdapter(cfg))
    assert info["n"] == 3

    from qreli.core import read_bundle

    text = read_bundle(out).entries["text"]
    assert text.shape[0] == 3
    assert np.all(np.abs(np.linalg.norm(text.astype(np.float64), axis=1) - 1.0) < 1e-5)


def test_cli_end_to_end(tmp_path, image_tree):
    config = tmp_path / "export.toml"
    config.write_text(
        "\n".join(
            [
                'model_tag = "openai"',
                'architecture = "ViT-B/32"',
                f'dataset = "{image_tree}"',
            ]
        )
    )
    out = tmp_path / "emb.qrb"
    proc = subprocess.run(
        [
            sys.executable,
            "-m",
            "qreli_export.export",
            "--config",
            str(config),
            "--mode",
            "embeddings",
            "--adapter",
            "tiny",
            "--out",
            str(out),
        ],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["n"] == 12
    assert out.exists()
