"""Gray-box targeted adversarial attack laboratory for toy vision-language models."""

__version__ = "0.1.0"
