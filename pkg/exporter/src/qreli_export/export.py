"""Export CLIP tensors to qreli bundles.

    qreli-export --config export.toml --mode embeddings --out bundle.qrb
    qreli-export --config export.toml --mode feature-maps --n-samples 64 --out maps.qrb
    qreli-export --config export.toml --mode negatives --words neg.txt --out neg.qrb

The exporter materializes tensors only; all metric math lives in the consumer.
Checkpoint, dataset, and runtime failures surface verbatim.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .bundle_io import write_bundle
from .config import ExportConfig
from .corruption import ResizeThenCorrupt
from .model_adapter import make_adapter

CIFAR10_CLASSES = (
    "airplane automobile bird cat deer dog frog horse ship truck".split()
)


def load_images(cfg: ExportConfig):
    """(images, labels, class_names) from CIFAR-10 or an ImageFolder tree."""
    name = cfg.dataset
    if name.startswith("cifar10"):
        import torchvision
        from PIL import Image

        root = name.split(":", 1)[1] if ":" in name else "./data"
        ds = torchvision.datasets.CIFAR10(
            root=root, train=cfg.split == "train", download=True
        )
        images = [Image.fromarray(ds.data[i]) for i in range(len(ds))]
        return images, list(ds.targets), list(CIFAR10_CLASSES)
    from PIL import Image

    root = Path(name)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for ci, cname in enumerate(class_names):
        for img_path in sorted((root / cname).iterdir()):
            images.append(Image.open(img_path).convert("RGB"))
            labels.append(ci)
    return images, labels, class_names


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def _encode_images(adapter, cfg: ExportConfig, images, seed: int = 0) -> np.ndarray:
    pipeline = ResizeThenCorrupt(
        images,
        name=cfg.corruption,
        severity=cfg.severity,
        size=adapter.image_size,
        mean=adapter.mean,
        std=adapter.std,
        seed=seed,
    )
    chunks = []
    for start in range(0, len(pipeline), cfg.batch_size):
        batch = np.stack([pipeline[i] for i in range(start, min(start + cfg.batch_size, len(pipeline)))])
        feats = adapter.encode_image(torch.tensor(batch, dtype=torch.float32))
        chunks.append(feats.cpu().numpy())
    return np.concatenate(chunks, axis=0)


def base_meta(cfg: ExportConfig) -> dict:
    meta = {
        "model_tag": cfg.model_tag,
        "architecture": cfg.architecture,
        "dataset": cfg.dataset,
        "split": cfg.split,
        "prompt_template": cfg.prompt_template,
        "prenormalized": "true",
    }
    if cfg.corruption:
        meta["corruption"] = cfg.corruption
        meta["severity"] = cfg.severity
    if cfg.quant_bits_w is not None:
        meta["quant"] = f"w{cfg.quant_bits_w}a{cfg.quant_bits_a or cfg.quant_bits_w}"
        meta["quant_mode"] = "in-model"
    meta.update(cfg.extra_meta)
    return meta


def export_embeddings(cfg: ExportConfig, out_path, adapter=None, limit=None) -> dict:
    adapter = adapter or make_adapter(cfg)
    images, labels, class_names = load_images(cfg)
    if limit:
        images, labels = images[:limit], labels[:limit]
    image_feats = _unit_rows(_encode_images(adapter, cfg, images))
    prompts = [cfg.prompt_template.format(c) for c in class_names]
    text_feats = _unit_rows(adapter.encode_text(prompts).cpu().numpy())
    meta = base_meta(cfg)
    meta["logit_scale"] = float(adapter.logit_scale)
    meta["class_names"] = json.dumps(class_names)
    write_bundle(
        {
            "image": image_feats,
            "labels": np.asarray(labels, dtype=np.int64),
            "class_text": text_feats,
        },
        meta,
        out_path,
    )
    return {"n": len(images), "classes": len(class_names), "dim": image_feats.shape[1]}


def export_feature_maps(cfg: ExportConfig, out_path, n_samples: int, adapter=None) -> dict:
    adapter = adapter or make_adapter(cfg)
    images, _, _ = load_images(cfg)
    if n_samples > len(images):
        raise ValueError(f"n_samples {n_samples} exceeds dataset size {len(images)}")
    images = images[:n_samples]
    pipeline = ResizeThenCorrupt(
        images,
        name=cfg.corruption,
        severity=cfg.severity,
        size=adapter.image_size,
        mean=adapter.mean,
        std=adapter.std,
    )
    chunks = []
    for start in range(0, len(pipeline), cfg.batch_size):
        batch = np.stack([pipeline[i] for i in range(start, min(start + cfg.batch_size, len(pipeline)))])
        tokens = adapter.feature_tokens(torch.tensor(batch, dtype=torch.float32))
        chunks.append(tokens[:, 1:, :].cpu().numpy())  # drop the class token
    tokens = np.concatenate(chunks, axis=0).astype(np.float32)
    g_h, g_w = adapter.grid
    if tokens.shape[1] != g_h * g_w:
        raise RuntimeError(
            f"token count {tokens.shape[1]} does not match the {g_h}x{g_w} grid"
        )
    meta = base_meta(cfg)
    meta["grid"] = f"{g_h}x{g_w}"
    write_bundle({"tokens": tokens}, meta, out_path)
    return {"n": tokens.shape[0], "tokens": tokens.shape[1], "dim": tokens.shape[2]}


def export_negatives(cfg: ExportConfig, out_path, words_path, adapter=None) -> dict:
    adapter = adapter or make_adapter(cfg)
    words = [w.strip() for w in open(words_path, encoding="utf-8") if w.strip()]
    if not words:
        raise ValueError(f"no concepts in {words_path}")
    prompts = [cfg.prompt_template.format(w) for w in words]
    text = _unit_rows(adapter.encode_text(prompts).cpu().numpy())
    meta = base_meta(cfg)
    meta["n_concepts"] = len(words)
    write_bundle({"text": text}, meta, out_path)
    return {"n": len(words), "dim": text.shape[1]}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qreli-export", description=__doc__)
    parser.add_argument("--config", required=True, help="TOML export configuration")
    parser.add_argument(
        "--mode", choices=["embeddings", "feature-maps", "negatives"], default="embeddings"
    )
    parser.add_argument("--out", required=True)
    parser.add_argument("--n-samples", type=int, default=64)
    parser.add_argument("--limit", type=int, default=None, help="cap the sample count")
    parser.add_argument("--words", help="concept list for --mode negatives")
    parser.add_argument(
        "--adapter", choices=["hf", "tiny"], default="hf", help="tiny = offline stub"
    )
    args = parser.parse_args(argv)
    cfg = ExportConfig.from_toml(args.config)
    adapter = make_adapter(cfg, kind=args.adapter)
    if args.mode == "embeddings":
        info = export_embeddings(cfg, args.out, adapter=adapter, limit=args.limit)
    elif args.mode == "feature-maps":
        info = export_feature_maps(cfg, args.out, n_samples=args.n_samples, adapter=adapter)
    else:
        if not args.words:
            parser.error("--mode negatives requires --words")
        info = export_negatives(cfg, args.out, words_path=args.words, adapter=adapter)
    print(json.dumps({"out": args.out, **info}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
