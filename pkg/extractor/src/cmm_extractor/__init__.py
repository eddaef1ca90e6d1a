"""Embedding-cache extraction with pretrained vision-language encoders."""

from .backends import ClipEncoder, HashEncoder, make_backend
from .datasets import ExtractJob, build_index
from .extract import extract_images, extract_texts, run_job
from .templates import load_builtin_templates, load_template_file

__version__ = "0.1.0"
