"""Python bindings of the region-motion gesture pipeline.

Stage functions return (artifact path, metrics as a JSON string, seconds).
"""
import json as _json

from ._angie import *  # noqa: F401,F403
from ._angie import PipelineConfig, evaluate as _evaluate


def evaluate_report(config: PipelineConfig, refine: bool = True) -> dict:
    """Runs evaluation on the held-out clips and returns the report as a dict."""
    return _json.loads(_evaluate(config, refine))
