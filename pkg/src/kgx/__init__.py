"""Knowledge-guided retinal lesion feature extraction and grading."""

__version__ = "0.1.0"
