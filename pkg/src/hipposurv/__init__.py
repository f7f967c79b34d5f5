"""Deep hippocampal features and LASSO-Cox prognosis of progression to AD dementia."""

__version__ = "0.1.0"
