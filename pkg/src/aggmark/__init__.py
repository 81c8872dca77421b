"""Valuation engine for aggregate Markov multi-state life insurance models."""

from .catalogue import Constant, GompertzMakeham, Linear, Logistic, PiecewiseConstant, Product, Sum, from_spec
from .cashflow import (
    CashFlowTable,
    PaymentSpec,
    expected_cashflow_general,
    expected_cashflow_reset,
    fast_path_cashflow,
    reserve,
)
from .errors import AggmarkError
from .model import AggregateModel, MicroIndex, ResetStructure, load_model, save_model, validate
from .mpp import History
from .prodint import MatrixFunction, TimeGrid, product_integral

__version__ = "0.1.0"

__all__ = [
    "AggmarkError",
    "AggregateModel",
    "CashFlowTable",
    "Constant",
    "GompertzMakeham",
    "History",
    "Linear",
    "Logistic",
    "MatrixFunction",
    "MicroIndex",
    "PaymentSpec",
    "PiecewiseConstant",
    "Product",
    "ResetStructure",
    "Sum",
    "TimeGrid",
    "expected_cashflow_general",
    "expected_cashflow_reset",
    "fast_path_cashflow",
    "from_spec",
    "load_model",
    "product_integral",
    "reserve",
    "save_model",
    "validate",
]
