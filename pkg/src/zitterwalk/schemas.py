"""JSON Schemas for run configurations and emitted reports.

Every emitted JSON document carries ``schema_version`` and ``report``; the
matching schema here is the contract for that version.
"""

from __future__ import annotations

import json

SCHEMA_VERSION = 1

ANALYSES = ("heisenberg", "decompose", "markov", "equivalence", "stability", "fractal")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_posint = {"type": "integer", "minimum": 1}
_nullable_num = {"type": ["number", "null"]}
_bool = {"type": "boolean"}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "zitterwalk run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "scenario": {"enum": ["free", "ou_nelson", "custom"]},
        "hbar": _pos,
        "mass": _pos,
        "omega": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "drift": {"type": ["number", "string", "null"]},
        "volatility": {"type": ["number", "string", "null"]},
        "x0": {
            "oneOf": [
                _num,
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": ["point", "normal", "uniform"]},
                        "value": _num, "mean": _num, "std": _nonneg, "low": _num, "high": _num,
                    },
                },
            ]
        },
        "n_steps": _posint,
        "horizon": _pos,
        "n_paths": _posint,
        "seed": {"type": "integer"},
        "reference_seed": {"type": ["integer", "null"]},
        "analyses": {"type": "array", "items": {"enum": list(ANALYSES)}, "uniqueItems": True},
        "out_dir": {"type": "string", "minLength": 1},
        "k_low": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "k_high": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "ks_threshold": {"oneOf": [{"const": "auto"}, _pos]},
        "w1_threshold": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "min_count": {"type": "integer", "minimum": 30},
        "n_xbins": _posint,
        "window": {"oneOf": [{"const": "auto"}, _posint]},
        "markov_min_group": {"type": "integer", "minimum": 2},
        "comparison_times": {"type": ["array", "null"], "items": _pos, "minItems": 1},
        "calibration_pairs": _posint,
        "calibration_quantile": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "delta_b": _nonneg,
        "delta_sigma": _nonneg,
        "delta_x0": _nonneg,
        "lipschitz_bound": {"type": ["number", "null"], "minimum": 0},
        "fractal_scales": {"type": "array", "items": _posint, "minItems": 1},
        "expected_dimension": _pos,
        "dimension_tolerance": _pos,
        "storage": {"enum": ["auto", "dense", "lazy", "thinned"]},
        "write_ensemble": _bool,
        "ensemble_stride": _posint,
        "noise_draws": {"type": "integer", "minimum": 100},
        "reference_method": {"enum": ["auto", "simulate"]},
    },
}

_header = {
    "schema_version": {"const": SCHEMA_VERSION},
    "report": {"type": "string"},
}


def _report(name: str, required: dict, verdict: bool = True) -> dict:
    props = dict(_header)
    props["report"] = {"const": name}
    props.update(required)
    req = ["schema_version", "report", *required]
    if verdict:
        props["pass"] = _bool
        req.append("pass")
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": f"zitterwalk {name} report",
        "type": "object",
        "properties": props,
        "required": req,
    }


_arr = {"type": "array"}
_obj = {"type": "object"}
_int = {"type": "integer"}
_str = {"type": "string"}

REPORT_SCHEMAS = {
    "heisenberg": _report("heisenberg", {
        "k_low": _pos, "k_high": _pos, "n_ratios": _int, "ratio_min": _nullable_num,
        "ratio_max": _nullable_num, "violations": _int, "violation_locations": _arr,
        "distribution": _obj,
    }),
    "decompose": _report("decompose", {
        "method": _str, "window": _posint, "n_xbins": _posint, "min_count": _int,
        "cells": _obj, "drift_regression": {"type": ["object", "null"]}, "residual_moments": _obj,
    }),
    "markov": _report("markov", {
        "verdict": {"enum": ["markov_consistent", "non_markov", "undetermined"]},
        "n_tests": _int, "z_threshold": _nullable_num, "max_abs_z": _nullable_num,
        "worst_cell": {"type": ["object", "null"]},
    }),
    "equivalence": _report("equivalence", {
        "times": _arr, "ks": _arr, "w1": _arr, "ks_threshold": _pos,
        "w1_threshold": _nullable_num, "verdicts": _arr, "calibration": {"type": ["object", "null"]},
        "reference": _obj,
    }),
    "stability": _report("stability", {
        "sup_gap": _nonneg, "gronwall_bound_final": _nonneg, "delta_b": _nonneg,
        "delta_sigma": _nonneg, "lipschitz_bound": _nonneg, "pass_strict": _bool,
    }),
    "fractal": _report("fractal", {
        "scales": _arr, "mean_increments": _arr, "hurst": _num, "r_squared": _num,
        "dimension": _nullable_num, "reliable": _bool, "expected_dimension": _pos,
        "tolerance": _pos,
    }),
    "noise": _report("noise", {
        "n": _int, "mean": _num, "chi_square_p": _num, "autocorrelations": _arr,
    }),
    "summary": _report("summary", {
        "config": _obj, "ensemble": _obj, "verdicts": _obj, "exit_code": _int, "runtime": _obj,
        "files": _arr,
    }),
    "convergence": _report("convergence", {
        "n_steps": _arr, "runs": _arr, "trends": _obj, "exit_code": _int, "runtime": _obj,
    }),
}


def schema_for(report: str) -> dict:
    return REPORT_SCHEMAS[report]


def validate_report(doc: dict) -> None:
    """Raise jsonschema.ValidationError if ``doc`` breaks its declared schema."""
    import jsonschema

    jsonschema.validate(doc, REPORT_SCHEMAS[doc["report"]])


def dump_schemas() -> str:
    return json.dumps({"config": CONFIG_SCHEMA, **REPORT_SCHEMAS}, indent=2, sort_keys=True)
