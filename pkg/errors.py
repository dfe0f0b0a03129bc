class HatnetError(Exception):
    """Base class for all errors raised by this package"""
    key = None

    def to_dict(self):
        return {'error': type(self).__name__, 'message': str(self), 'key': self.key}


class ShapeError(HatnetError, ValueError):
    def __init__(self, message, *dims):
        self.dims = [list(d) for d in dims]
        if self.dims:
            message = f'{message}: ' + ' vs '.join(str(d) for d in self.dims)
        super().__init__(message)


class ConfigError(HatnetError, ValueError):
    def __init__(self, key, message):
        self.key = key
        self.detail = message
        super().__init__(f'"{key}": {message}')


class ContractError(HatnetError):
    pass


class NonFiniteError(HatnetError, ArithmeticError):
    pass


class TrainingError(HatnetError):
    def __init__(self, message, sample=None):
        self.sample = sample
        if sample is not None:
            message = f'{message} (sample: {sample})'
        super().__init__(message)


class FormatError(HatnetError, ValueError):
    pass
