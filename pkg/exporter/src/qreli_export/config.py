"""Export configuration and the supported model catalogue."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

# (architecture, pre-training tag) pairs covered by the evaluation
SUPPORTED_MODELS = {
    ("ViT-B/32", "openai"): "openai/clip-vit-base-patch32",
    ("ViT-B/16", "openai"): "openai/clip-vit-base-patch16",
    ("ViT-L/14", "openai"): "openai/clip-vit-large-patch14",
    ("ViT-B/32", "laion400m_e32"): "laion/CLIP-ViT-B-32-laion400M-e32",
    ("ViT-B/16", "laion400m_e32"): "laion/CLIP-ViT-B-16-laion400M-e32",
    ("ViT-L/14", "laion400m_e32"): "laion/CLIP-ViT-L-14-laion400M-e32",
}

# patch grids at the standard 224 px input
GRIDS = {"ViT-B/32": (7, 7), "ViT-B/16": (14, 14), "ViT-L/14": (16, 16)}

CORRUPTIONS = ("gaussian_blur", "gaussian_noise", "brightness", "contrast", "pixelate")


@dataclass
class ExportConfig:
    model_tag: str = "openai"
    architecture: str = "ViT-B/32"
    dataset: str = ""  # "cifar10" or an ImageFolder-style directory
    split: str = "test"
    prompt_template: str = "a photo of a {}"
    corruption: Optional[str] = None
    severity: int = 0
    quant_bits_w: Optional[int] = None
    quant_bits_a: Optional[int] = None
    batch_size: int = 64
    device: str = "cpu"
    hf_repo: Optional[str] = None  # override the catalogue mapping
    extra_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        key = (self.architecture, self.model_tag)
        if self.hf_repo is None and key not in SUPPORTED_MODELS:
            raise ValueError(
                f"unsupported model {key}; pick one of {sorted(SUPPORTED_MODELS)} "
                "or set hf_repo explicitly"
            )
        if self.corruption is not None and self.corruption not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.corruption!r}; supported: {CORRUPTIONS}")
        if not 0 <= self.severity <= 5:
            raise ValueError("severity must be in 0..5")

    @property
    def repo(self) -> str:
        return self.hf_repo or SUPPORTED_MODELS[(self.architecture, self.model_tag)]

    @property
    def grid(self):
        return GRIDS[self.architecture]

    @classmethod
    def from_toml(cls, path) -> "ExportConfig":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib

        with open(path, "rb") as fp:
            raw = tomllib.load(fp)
        quant = raw.pop("quant", {})
        corruption = raw.pop("corruption", {})
        kwargs = dict(raw)
        if quant:
            kwargs["quant_bits_w"] = quant.get("bits_w")
            kwargs["quant_bits_a"] = quant.get("bits_a")
        if corruption:
            kwargs["corruption"] = corruption.get("name")
            kwargs["severity"] = corruption.get("severity", 0)
        return cls(**kwargs)
