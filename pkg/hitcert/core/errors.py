"""
Error types shared by every hitcert module
"""


class InputError(ValueError):
    """Malformed input or a violated precondition (CLI exit code 2)"""


class EnumerationCapError(InputError):
    """Exact subset enumeration would exceed the configured cap"""

    def __init__(self, n_subsets: int, cap: int):
        self.n_subsets = n_subsets
        self.cap = cap
        super().__init__(
            f"Exact enumeration needs {n_subsets} subsets (cap {cap}); "
            "use the randomized p-value instead"
        )
