"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class VocabularyError(ValueError):
    """A token id falls outside the vocabulary."""

    def __init__(self, token_id, vocab_size=None):
        self.token_id = token_id
        self.vocab_size = vocab_size
        msg = f"token id {token_id} outside vocabulary"
        if vocab_size is not None:
            msg += f" of size {vocab_size}"
        super().__init__(msg)


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class ConfigError(ValueError):
    """A configuration file or override is invalid."""
