"""Numerical inner loops.

``_kernels`` is the compiled Cython build; ``pure`` holds the same
functions in Python/numpy.  :mod:`loocite.kernels` picks one at import.
"""
