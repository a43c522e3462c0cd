from __future__ import annotations

from typing import NamedTuple

__all__ = (
    'NMNFaithError',
    'ProgramSyntaxError',
    'TypeIssue',
    'TypeCheckError',
    'AlgebraError',
    'GroundingError',
    'ProviderError',
    'ValidationError',
)


class NMNFaithError(Exception):
    """Base class of every error raised by this library."""


class ProgramSyntaxError(NMNFaithError, ValueError):
    """Malformed program string.

    Args:
        message (str): what went wrong.
        offset (int): character offset into the program string.
    """

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f'{message} (at offset {offset})')
        self.offset = offset


class TypeIssue(NamedTuple):
    """A single typechecking problem attached to the offending node."""

    node: int
    message: str

    def __str__(self) -> str:
        return f'node {self.node}: {self.message}'


class TypeCheckError(NMNFaithError, ValueError):
    """Program rejected by typecheck. `issues` holds every problem found."""

    def __init__(self, issues: tuple[TypeIssue, ...]) -> None:
        assert issues
        super().__init__('; '.join(str(issue) for issue in issues))
        self.issues = issues


class AlgebraError(NMNFaithError, ValueError):
    """Invalid parameters for a probabilistic value or operation."""


class GroundingError(NMNFaithError, LookupError):
    """No grounding available for a learned node."""

    def __init__(self, example_id: str | None, node: int, detail: str = 'missing grounding') -> None:
        where = f'example {example_id!r}, ' if example_id is not None else ''
        super().__init__(f'{detail} for {where}node {node}')
        self.example_id = example_id
        self.node = node


class ProviderError(NMNFaithError, ValueError):
    """A grounding provider returned scores outside its contract."""

    def __init__(self, node: int, detail: str) -> None:
        super().__init__(f'node {node}: {detail}')
        self.node = node


class ValidationError(NMNFaithError, ValueError):
    """A data file violates its schema.

    Args:
        message (str): what went wrong.
        source (str, optional): file name. Defaults to None.
        line (int, optional): 1-based line number. Defaults to None.
    """

    def __init__(self, message: str, source: str | None = None, line: int | None = None) -> None:
        location = ''
        if source is not None:
            location = source if line is None else f'{source}:{line}'
            location += ': '
        super().__init__(f'{location}{message}')
        self.source = source
        self.line = line
