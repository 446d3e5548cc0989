"""Headless spreadsheet calculation engine with compiled sheet-defined
functions and an online partial evaluator (SPECIALIZE)."""

from .engine import (
    Builtin, Registry, SplitMix64, Workbook, default_registry, parse_content,
)
from .formula import (
    CellAddr, FormulaError, parse_expr, parse_formula, render_expr,
    render_formula,
)
from .values import (
    ArrayValue, ErrorValue, FunctionValue, HOLE, Number, Text, Value,
    display,
)

__version__ = "0.1.0"

__all__ = [
    "Workbook", "Builtin", "Registry", "default_registry", "SplitMix64",
    "parse_content", "CellAddr", "FormulaError", "parse_formula",
    "parse_expr", "render_expr", "render_formula", "Value", "Number",
    "Text", "ErrorValue", "ArrayValue", "FunctionValue", "HOLE", "display",
    "__version__",
]
