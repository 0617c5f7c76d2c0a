"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the CLI can print a
single parseable line and exit nonzero.
"""


class VisCtrlError(Exception):
    code = "ERROR"


class ShapeError(VisCtrlError, ValueError):
    code = "SHAPE_ERROR"


class DomainError(VisCtrlError, ValueError):
    code = "DOMAIN_ERROR"


class ConfigError(VisCtrlError, ValueError):
    code = "CONFIG_ERROR"


class InputError(VisCtrlError, ValueError):
    code = "INPUT_ERROR"


class InjectionError(VisCtrlError, RuntimeError):
    code = "INJECTION_ERROR"


class FormatError(VisCtrlError, ValueError):
    code = "FORMAT_ERROR"


class IOFailure(VisCtrlError, OSError):
    code = "IO_ERROR"
