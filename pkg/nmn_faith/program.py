from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import TYPE_CHECKING, NamedTuple

from .errors import ProgramSyntaxError, TypeCheckError, TypeIssue, ValidationError

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator, Mapping, Sequence
    from os import PathLike
    from typing import Any, Self

__all__ = (
    'ValueType',
    'ModuleSignature',
    'SignatureTable',
    'UtteranceAttention',
    'Node',
    'Program',
    'TypedProgram',
    'parse',
    'linearize',
    'typecheck',
    'load_signatures',
    'text_signatures',
    'VISUAL_SIGNATURES',
)

logger = logging.getLogger(__name__)

_NAME_RE = re.compile(r'[a-z][a-z0-9-]*')
_WEIGHT_TOLERANCE = 1e-6


class ValueType(Enum):
    """Types of module inputs and outputs. PROGRAM is only legal as a macro parameter."""

    BOOLEAN = 'BOOLEAN'
    NUMBER = 'NUMBER'
    BOX_ATTENTION = 'BOX_ATTENTION'
    TOKEN_DIST = 'TOKEN_DIST'
    PROGRAM = 'PROGRAM'


class ModuleSignature(NamedTuple):
    """Typed signature of one module.

    A signature with PROGRAM parameters is a macro; each such argument must be a BOOLEAN subprogram.
    """

    name: str
    arg_types: tuple[ValueType, ...]
    takes_utterance_attention: bool
    return_type: ValueType

    @property
    def is_macro(self) -> bool:
        return ValueType.PROGRAM in self.arg_types


class SignatureTable:
    """Module signatures of one domain.

    Args:
        domain (str): `visual` or `text`.
        signatures (Iterable[ModuleSignature]): module signatures. names must be unique.
        root_types (Iterable[ValueType]): types a whole program may evaluate to.
        aliases (Mapping[str, str], optional): alternative names mapped to canonical names. Defaults to None.
    """

    def __init__(
        self,
        domain: str,
        signatures: Iterable[ModuleSignature],
        root_types: Iterable[ValueType],
        aliases: Mapping[str, str] | None = None,
    ) -> None:
        self.domain = domain
        self.root_types = frozenset(root_types)
        self._signatures: dict[str, ModuleSignature] = {}
        for signature in signatures:
            self.register(signature)
        self.aliases: dict[str, str] = dict(aliases or {})
        for alias, target in self.aliases.items():
            if target not in self._signatures:
                raise ValueError(f'alias {alias!r} refers to unknown module {target!r}')

    def register(self, signature: ModuleSignature) -> None:
        """Add a module signature. Raises ValueError on a duplicate or malformed signature."""
        if not _NAME_RE.fullmatch(signature.name):
            raise ValueError(f'invalid module name {signature.name!r}')
        if signature.name in self._signatures:
            raise ValueError(f'duplicate module {signature.name!r}')
        if signature.return_type is ValueType.PROGRAM:
            raise ValueError(f'{signature.name}: PROGRAM is not a legal return type')
        if signature.is_macro and any(t is not ValueType.PROGRAM for t in signature.arg_types):
            raise ValueError(f'{signature.name}: macros take only PROGRAM parameters')
        self._signatures[signature.name] = signature

    def canonical_name(self, name: str) -> str:
        return self.aliases.get(name, name)

    def get(self, name: str) -> ModuleSignature | None:
        """Signature for name or alias, None if unknown."""
        return self._signatures.get(self.canonical_name(name))

    def __contains__(self, name: object) -> bool:
        return isinstance(name, str) and self.get(name) is not None

    def __iter__(self) -> Iterator[ModuleSignature]:
        return iter(self._signatures.values())

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> Self:
        """Build a table from its JSON form.

        The record looks like
        `{"domain": "text", "root_types": ["NUMBER"], "aliases": {...},
        "modules": [{"name": "find", "args": [], "utterance": true, "returns": "TOKEN_DIST"}]}`.
        """
        try:
            signatures = [
                ModuleSignature(
                    name=module['name'],
                    arg_types=tuple(ValueType(t) for t in module.get('args', ())),
                    takes_utterance_attention=bool(module.get('utterance', False)),
                    return_type=ValueType(module['returns']),
                )
                for module in record['modules']
            ]
            return cls(
                domain=record.get('domain', 'visual'),
                signatures=signatures,
                root_types=(ValueType(t) for t in record['root_types']),
                aliases=record.get('aliases'),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f'malformed signature table: {e}') from e


def load_signatures(path: str | PathLike[str]) -> SignatureTable:
    """Load a signature table from a JSON file."""
    with open(path, encoding='utf-8') as f:
        try:
            record = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(str(e), source=str(path)) from e
    return SignatureTable.from_record(record)


def text_signatures() -> SignatureTable:
    """The built-in text-domain (passage reading) signature table."""
    data = resources.files('nmn_faith').joinpath('signatures', 'text.json').read_text(encoding='utf-8')
    return SignatureTable.from_record(json.loads(data))


def _visual_signatures() -> SignatureTable:
    B, N, P, PROG = ValueType.BOOLEAN, ValueType.NUMBER, ValueType.BOX_ATTENTION, ValueType.PROGRAM
    sigs = [
        ModuleSignature('find', (), True, P),
        ModuleSignature('filter', (P,), True, P),
        ModuleSignature('with-relation', (P, P), True, P),
        ModuleSignature('project', (P,), True, P),
        ModuleSignature('count', (P,), False, N),
        ModuleSignature('exist', (P,), False, B),
        *(
            ModuleSignature(name, (N, N), False, B)
            for name in ('equal', 'less', 'greater', 'less-equal', 'greater-equal')
        ),
        ModuleSignature('and', (B, B), False, B),
        ModuleSignature('or', (B, B), False, B),
        *(ModuleSignature(name, (N, N), False, N) for name in ('sum', 'difference', 'division')),
        ModuleSignature('intersect', (P, P), False, P),
        ModuleSignature('discard', (P, P), False, P),
        ModuleSignature('in-left-image', (P,), False, P),
        ModuleSignature('in-right-image', (P,), False, P),
        ModuleSignature('in-at-least-one-image', (PROG,), False, B),
        ModuleSignature('in-each-image', (PROG,), False, B),
        ModuleSignature('in-one-other-image', (PROG, PROG), False, B),
    ]
    return SignatureTable('visual', sigs, root_types=(B, N), aliases={'relocate': 'project'})


VISUAL_SIGNATURES = _visual_signatures()


@dataclass(frozen=True)
class UtteranceAttention:
    """Bracketed module argument.

    `text` is opaque to the executor; `weights`, when supplied by data files, is a distribution over utterance tokens.
    """

    text: str
    weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.weights is None:
            return
        if any(not math.isfinite(w) or w < 0 for w in self.weights):
            raise ValueError('utterance weights must be finite and nonnegative')
        if abs(math.fsum(self.weights) - 1) > _WEIGHT_TOLERANCE:
            raise ValueError('utterance weights must sum to 1')

    def with_weights(self, weights: Sequence[float]) -> UtteranceAttention:
        return UtteranceAttention(self.text, tuple(float(w) for w in weights))


@dataclass(frozen=True)
class Node:
    """One module call. `children` are NodeIds; `source_offset` is ignored by equality."""

    id: int
    name: str
    utterance: UtteranceAttention | None
    children: tuple[int, ...]
    source_offset: int = field(default=-1, compare=False)


@dataclass(frozen=True)
class Program:
    """Module-call tree with dense pre-order NodeIds. The root is always node 0."""

    nodes: tuple[Node, ...]

    def __post_init__(self) -> None:
        if not self.nodes:
            raise ValueError('program has no nodes')
        parent_count = [0] * len(self.nodes)
        for index, node in enumerate(self.nodes):
            if node.id != index:
                raise ValueError(f'node ids must be dense pre-order ids, got {node.id} at {index}')
            for child in node.children:
                if not index < child < len(self.nodes):
                    raise ValueError(f'node {index} has invalid child {child}')
                parent_count[child] += 1
        if parent_count[0] != 0 or any(count != 1 for count in parent_count[1:]):
            raise ValueError('nodes do not form a tree rooted at node 0')

    @property
    def root(self) -> int:
        return 0

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, node: int) -> Node:
        return self.nodes[node]

    def subtree(self, node: int) -> tuple[int, ...]:
        """Pre-order ids of node and all its descendants."""
        out: list[int] = []
        stack = [node]
        while stack:
            current = stack.pop()
            out.append(current)
            stack.extend(reversed(self.nodes[current].children))
        return tuple(out)

    def __str__(self) -> str:
        return linearize(self)


class _Parser:
    def __init__(self, text: str) -> None:
        self.text = text
        self.pos = 0
        self.nodes: list[Node | None] = []

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ''

    def expect(self, char: str, context: str) -> None:
        if self.peek() != char:
            found = repr(self.text[self.pos]) if self.pos < len(self.text) else 'end of input'
            raise ProgramSyntaxError(f'expected {char!r} {context}, found {found}', self.pos)
        self.pos += 1

    def call(self) -> int:
        self.skip_ws()
        start = self.pos
        match = _NAME_RE.match(self.text, self.pos)
        if match is None:
            found = repr(self.text[self.pos]) if self.pos < len(self.text) else 'end of input'
            raise ProgramSyntaxError(f'expected module name, found {found}', self.pos)
        name = match.group()
        self.pos = match.end()

        node_id = len(self.nodes)
        self.nodes.append(None)  # reserve the pre-order slot

        utterance: UtteranceAttention | None = None
        if self.peek() == '[':
            bracket = self.pos
            close = self.text.find(']', bracket + 1)
            if close < 0:
                raise ProgramSyntaxError("unclosed '['", bracket)
            utterance = UtteranceAttention(self.text[bracket + 1 : close].strip())
            self.pos = close + 1

        children: list[int] = []
        if self.peek() == '(':
            paren = self.pos
            self.pos += 1
            if self.peek() == ')':
                raise ProgramSyntaxError('empty argument list', paren)
            children.append(self.call())
            while self.peek() == ',':
                self.pos += 1
                children.append(self.call())
            if self.peek() == '':
                raise ProgramSyntaxError("unclosed '('", paren)
            self.expect(')', f'to close the argument list of {name!r}')

        self.nodes[node_id] = Node(node_id, name, utterance, tuple(children), source_offset=start)
        return node_id


def parse(text: str) -> Program:
    """Parse a linearized program.

    Grammar: `call := name ('[' freetext ']')? ('(' call (',' call)* ')')?` with names matching `[a-z][a-z0-9-]*`.
    Whitespace between tokens is ignored; bracket text is kept verbatim apart from surrounding whitespace.

    Args:
        text (str): program string, e.g. `equal(count(find[dogs]), count(filter[black](find[dogs])))`.

    Returns:
        Program: the parsed tree with pre-order NodeIds.

    Raises:
        ProgramSyntaxError: on empty input, unbalanced parentheses or brackets, empty argument lists
            or trailing garbage. the error carries the character offset.
    """
    if not text.strip():
        raise ProgramSyntaxError('empty program', 0)
    parser = _Parser(text)
    parser.call()
    if parser.peek() != '':
        raise ProgramSyntaxError(f'trailing input {text[parser.pos :]!r}', parser.pos)
    nodes = tuple(node for node in parser.nodes if node is not None)
    return Program(nodes)


def linearize(program: Program) -> str:
    """Canonical program string: a single space after commas and no other whitespace."""

    def render(node_id: int) -> str:
        node = program[node_id]
        out = node.name
        if node.utterance is not None:
            out += f'[{node.utterance.text}]'
        if node.children:
            out += '(' + ', '.join(render(child) for child in node.children) + ')'
        return out

    return render(program.root)


@dataclass(frozen=True)
class TypedProgram:
    """A Program whose every node carries its checked ValueType."""

    program: Program
    types: tuple[ValueType, ...]
    signatures: SignatureTable = field(compare=False)

    def __len__(self) -> int:
        return len(self.program)

    @property
    def root_type(self) -> ValueType:
        return self.types[self.program.root]

    def type_of(self, node: int) -> ValueType:
        return self.types[node]

    def module(self, node: int) -> str:
        """Canonical module name of node (aliases resolved)."""
        return self.signatures.canonical_name(self.program[node].name)

    def signature(self, node: int) -> ModuleSignature:
        signature = self.signatures.get(self.program[node].name)
        assert signature is not None
        return signature

    def subtree(self, node: int) -> tuple[int, ...]:
        return self.program.subtree(node)


def typecheck(program: Program, signatures: SignatureTable = VISUAL_SIGNATURES) -> TypedProgram:
    """Assign a ValueType to every node or reject the program.

    Args:
        program (Program): parsed program.
        signatures (SignatureTable, optional): module signatures. Defaults to the visual table.

    Returns:
        TypedProgram: program annotated with node types.

    Raises:
        TypeCheckError: carries every issue found (unknown module, arity or argument-type mismatch,
            utterance misuse, nested macro, illegal root type), each naming its NodeId.
    """
    issues: list[TypeIssue] = []
    types: list[ValueType | None] = [None] * len(program)

    # children have larger pre-order ids, so a reverse sweep sees them first
    for node in reversed(program.nodes):
        signature = signatures.get(node.name)
        if signature is None:
            issues.append(TypeIssue(node.id, f'unknown module {node.name!r}'))
            continue
        types[node.id] = signature.return_type

        if signature.takes_utterance_attention and node.utterance is None:
            issues.append(TypeIssue(node.id, f'{node.name} requires an utterance attention argument'))
        elif not signature.takes_utterance_attention and node.utterance is not None:
            issues.append(TypeIssue(node.id, f'{node.name} takes no utterance attention argument'))

        if len(node.children) != len(signature.arg_types):
            issues.append(
                TypeIssue(
                    node.id, f'{node.name} expects {len(signature.arg_types)} argument(s), got {len(node.children)}'
                )
            )
            continue

        for position, (child, expected) in enumerate(zip(node.children, signature.arg_types, strict=True), start=1):
            actual = types[child]
            if actual is None:
                continue
            if expected is ValueType.PROGRAM:
                if actual is not ValueType.BOOLEAN:
                    issues.append(
                        TypeIssue(
                            node.id, f'{node.name} argument {position} must be a BOOLEAN program, got {actual.value}'
                        )
                    )
                nested = [n for n in program.subtree(child) if (s := signatures.get(program[n].name)) and s.is_macro]
                if nested:
                    message = f'{node.name} argument {position} contains nested macro node {nested[0]}'
                    issues.append(TypeIssue(node.id, message))
            elif actual is not expected:
                issues.append(
                    TypeIssue(
                        node.id, f'{node.name} expects {expected.value} as argument {position}, got {actual.value}'
                    )
                )

    root_type = types[program.root]
    if root_type is not None and root_type not in signatures.root_types:
        allowed = ', '.join(sorted(t.value for t in signatures.root_types))
        issues.append(TypeIssue(program.root, f'program evaluates to {root_type.value}, expected one of {allowed}'))

    if issues:
        issues.sort(key=lambda issue: issue.node)
        logger.debug('typecheck rejected %s: %d issue(s)', linearize(program), len(issues))
        raise TypeCheckError(tuple(issues))

    checked = tuple(t for t in types if t is not None)
    assert len(checked) == len(program)
    return TypedProgram(program, checked, signatures)
