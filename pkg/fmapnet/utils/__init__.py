# Helpers shared by the pipeline modules: atomic output, hashing, logging setup.
from .io_utils import atomic_write, atomic_path, array_hash, ensure_dir, read_text_lines
from .logging_utils import configure_logging
