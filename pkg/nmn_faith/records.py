from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, NamedTuple, TypedDict

import numpy as np

from .algebra import NumberValue, TruthProb
from .errors import NMNFaithError, ValidationError
from .executor import FileGroundingProvider, GroundingEntry, ImagePair
from .faithfulness import FaithfulnessReport, TextAnnotation, VisualAnnotation
from .program import VISUAL_SIGNATURES, Program, TypedProgram, parse, typecheck
from .scene import BoundingBox, BoxAttention, ImageSide, Scene
from .util import dumps_record, is_probability

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator, Mapping
    from os import PathLike

    from .executor import ExecutionTrace, TraceValue
    from .program import SignatureTable

    StrPath = str | PathLike[str]

__all__ = (
    'ProgramEntry',
    'NodeRecord',
    'TraceRecord',
    'iter_ndjson',
    'dumps_ndjson',
    'write_atomic',
    'load_json',
    'load_programs',
    'load_scenes',
    'load_groundings',
    'load_visual_annotations',
    'load_text_annotations',
    'load_text_outputs',
    'load_attentions',
    'load_report',
    'scene_record',
    'encode_value',
    'trace_record',
)

logger = logging.getLogger(__name__)


class ProgramEntry(NamedTuple):
    example_id: str
    utterance: str | None
    program: TypedProgram


class NodeRecord(TypedDict):
    node: int
    module: str
    type: str
    value: dict[str, Any]


class TraceRecord(TypedDict):
    id: str
    denotation: dict[str, Any]
    nodes: list[NodeRecord]


class _Reader:
    """Field access on one ndjson record that reports file and line on failure."""

    def __init__(self, source: str, line: int, record: Mapping[str, Any]) -> None:
        self.source = source
        self.line = line
        self.record = record

    def error(self, message: str) -> ValidationError:
        return ValidationError(message, self.source, self.line)

    def get(self, key: str, kind: type[Any] | tuple[type[Any], ...], *, required: bool = True) -> Any:
        if key not in self.record or self.record[key] is None:
            if required:
                raise self.error(f'missing field {key!r}')
            return None
        value = self.record[key]
        # bool is an int subclass; never accept it for numeric fields
        if not isinstance(value, kind) or (isinstance(value, bool) and bool not in _as_tuple(kind)):
            raise self.error(f'field {key!r} has the wrong type ({type(value).__name__})')
        return value

    def example_id(self) -> str:
        return self.get('id', str)

    def node(self) -> int:
        node = self.get('node', int)
        if node < 0:
            raise self.error(f'node must be nonnegative, got {node}')
        return node

    def floats(self, key: str, *, probabilities: bool = False, required: bool = True) -> tuple[float, ...] | None:
        values = self.get(key, list, required=required)
        if values is None:
            return None
        if not all(isinstance(v, int | float) and not isinstance(v, bool) for v in values):
            raise self.error(f'field {key!r} must be a list of numbers')
        out = tuple(float(v) for v in values)
        if not all(math.isfinite(v) for v in out):
            raise self.error(f'field {key!r} must be finite')
        if probabilities and not all(is_probability(v) for v in out):
            raise self.error(f'field {key!r} entries must lie in [0, 1]')
        return out

    def image(self, key: str = 'image', *, required: bool = True) -> ImageSide | None:
        value = self.get(key, str, required=required)
        if value is None:
            return None
        try:
            return ImageSide(value)
        except ValueError:
            raise self.error(f'{key!r} must be "left" or "right", got {value!r}') from None

    def box(self, coords: Any, image: ImageSide) -> BoundingBox:
        if not isinstance(coords, list) or len(coords) != 4:
            raise self.error(f'box must be [x1, y1, x2, y2], got {coords!r}')
        try:
            return BoundingBox.from_coords(coords, image)
        except (TypeError, ValueError) as e:
            raise self.error(str(e)) from e

    def number(self, value: Any) -> NumberValue:
        if not isinstance(value, dict):
            raise self.error('number must be an object {"mean", "var"}')
        try:
            return NumberValue(float(value['mean']), float(value['var']))
        except (KeyError, TypeError, ValueError) as e:
            raise self.error(f'malformed number: {e}') from e


def _as_tuple(kind: type[Any] | tuple[type[Any], ...]) -> tuple[type[Any], ...]:
    return kind if isinstance(kind, tuple) else (kind,)


def iter_ndjson(path: StrPath) -> Iterator[_Reader]:
    """Yield one reader per non-blank line of a newline-delimited JSON file."""
    source = str(path)
    try:
        f = open(path, encoding='utf-8')  # noqa: SIM115
    except OSError as e:
        raise ValidationError(f'cannot open: {e.strerror}', source) from e
    with f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValidationError(f'invalid JSON: {e.msg}', source, line_no) from e
            if not isinstance(record, dict):
                raise ValidationError('record must be a JSON object', source, line_no)
            yield _Reader(source, line_no, record)


def load_json(path: StrPath) -> Any:
    try:
        with open(path, encoding='utf-8') as f:
            return json.load(f)
    except OSError as e:
        raise ValidationError(f'cannot open: {e.strerror}', str(path)) from e
    except json.JSONDecodeError as e:
        raise ValidationError(f'invalid JSON: {e.msg}', str(path), e.lineno) from e


def dumps_ndjson(records: Iterable[Any]) -> str:
    return ''.join(dumps_record(record) + '\n' for record in records)


def write_atomic(path: StrPath, text: str) -> None:
    """Write text to path through a temporary file in the same directory."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f'.{target.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _with_weights(program: Program, weights: Mapping[str, Any], reader: _Reader) -> Program:
    nodes = list(program.nodes)
    for key, values in weights.items():
        try:
            node = int(key)
            utterance = nodes[node].utterance
        except (ValueError, IndexError):
            raise reader.error(f'utterance_weights refers to unknown node {key!r}') from None
        if utterance is None:
            raise reader.error(f'node {node} has no utterance attention to weight')
        try:
            nodes[node] = replace(nodes[node], utterance=utterance.with_weights([float(v) for v in values]))
        except (TypeError, ValueError) as e:
            raise reader.error(f'utterance_weights for node {node}: {e}') from e
    return Program(tuple(nodes))


def load_programs(path: StrPath, signatures: SignatureTable = VISUAL_SIGNATURES) -> dict[str, ProgramEntry]:
    """Parse and typecheck every record `{id, utterance, program, utterance_weights?}`."""
    out: dict[str, ProgramEntry] = {}
    for reader in iter_ndjson(path):
        example_id = reader.example_id()
        if example_id in out:
            raise reader.error(f'duplicate example id {example_id!r}')
        try:
            program = parse(reader.get('program', str))
            if (weights := reader.get('utterance_weights', dict, required=False)) is not None:
                program = _with_weights(program, weights, reader)
            typed = typecheck(program, signatures)
        except ValidationError:
            raise
        except NMNFaithError as e:
            raise reader.error(f'example {example_id!r}: {e}') from e
        out[example_id] = ProgramEntry(example_id, reader.get('utterance', str, required=False), typed)
    logger.debug('loaded %d programs from %s', len(out), path)
    return out


def load_scenes(path: StrPath) -> dict[str, Scene]:
    """Read records `{id, proposals: [{idx, image, box}]}`. idx values must be exactly 0..n-1."""
    out: dict[str, Scene] = {}
    for reader in iter_ndjson(path):
        example_id = reader.example_id()
        if example_id in out:
            raise reader.error(f'duplicate example id {example_id!r}')
        indexed: dict[int, BoundingBox] = {}
        for proposal in reader.get('proposals', list):
            if not isinstance(proposal, dict):
                raise reader.error('proposal must be an object')
            item = _Reader(reader.source, reader.line, proposal)
            idx = item.get('idx', int)
            if idx in indexed:
                raise reader.error(f'duplicate proposal idx {idx}')
            image = item.image()
            assert image is not None
            indexed[idx] = item.box(item.get('box', list), image)
        if sorted(indexed) != list(range(len(indexed))):
            raise reader.error('proposal idx values must be 0..n-1')
        out[example_id] = Scene(example_id, tuple(indexed[i] for i in range(len(indexed))))
    return out


def scene_record(scene: Scene) -> dict[str, Any]:
    return {
        'id': scene.example_id,
        'proposals': [
            {'idx': i, 'image': box.image.value, 'box': list(box.coords)} for i, box in enumerate(scene.proposals)
        ],
    }


def load_groundings(path: StrPath) -> FileGroundingProvider:
    """Read records `{id, node, scores?, find_scores?, number?, numbers?}` into a provider.

    `number` is `{mean, var}`; `numbers` maps `left`/`right` to numbers for nodes inside macros.
    """
    entries: dict[tuple[str, int], GroundingEntry] = {}
    for reader in iter_ndjson(path):
        key = (reader.example_id(), reader.node())
        if key in entries:
            raise reader.error(f'duplicate grounding for example {key[0]!r}, node {key[1]}')
        numbers: dict[ImageSide | None, NumberValue] = {}
        if (number := reader.get('number', dict, required=False)) is not None:
            numbers[None] = reader.number(number)
        for side, value in (reader.get('numbers', dict, required=False) or {}).items():
            try:
                numbers[ImageSide(side)] = reader.number(value)
            except ValueError:
                raise reader.error(f'numbers keys must be "left" or "right", got {side!r}') from None
        scores = reader.floats('scores', probabilities=True, required=False)
        find_scores = reader.floats('find_scores', probabilities=True, required=False)
        if scores is None and not numbers:
            raise reader.error('grounding needs scores or a number')
        entries[key] = GroundingEntry(
            scores=None if scores is None else np.asarray(scores),
            find_scores=None if find_scores is None else np.asarray(find_scores),
            numbers=numbers,
        )
    return FileGroundingProvider(entries)


def load_visual_annotations(path: StrPath) -> list[VisualAnnotation]:
    """Read records `{id, node, module, image, boxes: [[x1, y1, x2, y2], ...]}`."""
    out: list[VisualAnnotation] = []
    for reader in iter_ndjson(path):
        image = reader.image(required=False)
        raw_boxes = reader.get('boxes', list)
        if image is None and raw_boxes:
            raise reader.error('annotations with boxes must name their image')
        boxes = tuple(reader.box(coords, image) for coords in raw_boxes) if image is not None else ()
        out.append(VisualAnnotation(reader.example_id(), reader.node(), reader.get('module', str), boxes, image))
    if not out:
        raise ValidationError('no annotations', str(path))
    return out


def _spans(reader: _Reader, limit: int | None) -> tuple[tuple[int, int], ...]:
    spans: list[tuple[int, int]] = []
    for span in reader.get('spans', list):
        if not (isinstance(span, list) and len(span) == 2 and all(isinstance(t, int) for t in span)):
            raise reader.error(f'span must be [start, end], got {span!r}')
        start, end = span
        if not 0 <= start <= end:
            raise reader.error(f'span must satisfy 0 <= start <= end, got {span}')
        if limit is not None and end >= limit:
            raise reader.error(f'span {span} out of range for {limit} tokens')
        spans.append((start, end))
    if not spans:
        raise reader.error('at least one gold span is required')
    return tuple(spans)


def load_text_annotations(path: StrPath) -> list[TextAnnotation]:
    """Read records `{id, node, module, spans: [[s, e], ...], token_dist?}`."""
    out: list[TextAnnotation] = []
    for reader in iter_ndjson(path):
        dist = reader.floats('token_dist', required=False)
        if dist is not None and any(p < 0 for p in dist):
            raise reader.error('token_dist entries must be nonnegative')
        spans = _spans(reader, None if dist is None else len(dist))
        out.append(TextAnnotation(reader.example_id(), reader.node(), reader.get('module', str), spans, dist))
    if not out:
        raise ValidationError('no annotations', str(path))
    return out


def load_text_outputs(path: StrPath) -> dict[tuple[str, int], tuple[float, ...]]:
    """Read module outputs `{id, node, token_dist}`."""
    out: dict[tuple[str, int], tuple[float, ...]] = {}
    for reader in iter_ndjson(path):
        dist = reader.floats('token_dist')
        assert dist is not None
        if any(p < 0 for p in dist):
            raise reader.error('token_dist entries must be nonnegative')
        out[reader.example_id(), reader.node()] = dist
    return out


def encode_value(value: TraceValue) -> dict[str, Any]:
    match value:
        case ImagePair(left, right):
            return {'left': encode_value(left), 'right': encode_value(right)}
        case TruthProb():
            return {'truth': value.value}
        case NumberValue():
            return {'mean': value.mean, 'var': value.var}
        case BoxAttention():
            return {'probs': value.tolist()}
    raise TypeError(f'cannot encode {type(value).__name__}')


def trace_record(example_id: str, trace: ExecutionTrace) -> TraceRecord:
    program = trace.program
    return {
        'id': example_id,
        'denotation': encode_value(trace.denotation),
        'nodes': [
            {
                'node': node,
                'module': program.module(node),
                'type': program.type_of(node).value,
                'value': encode_value(trace[node]),
            }
            for node in trace
        ],
    }


def _decode_attention(reader: _Reader, value: Any) -> BoxAttention | None:
    if not isinstance(value, dict):
        raise reader.error('node value must be an object')
    if 'probs' in value:
        return BoxAttention.of(_Reader(reader.source, reader.line, value).floats('probs', probabilities=True))
    if 'left' in value and 'right' in value:
        left = _decode_attention(reader, value['left'])
        right = _decode_attention(reader, value['right'])
        if left is None or right is None:
            return None
        if len(left) != len(right):
            raise reader.error('left and right attentions differ in length')
        return BoxAttention(np.maximum(left.probs, right.probs))
    return None


def load_attentions(path: StrPath) -> dict[tuple[str, int], BoxAttention]:
    """Box attentions keyed by (example id, node) from a trace file or a module outputs file.

    Trace records carry `nodes`; module output records are `{id, node, probs}`. Groundings records are rejected
    since their scores feed the executor and are not module outputs. Per-image macro values are merged by
    elementwise maximum.
    """
    out: dict[tuple[str, int], BoxAttention] = {}
    for reader in iter_ndjson(path):
        example_id = reader.example_id()
        if 'nodes' in reader.record:
            for item in reader.get('nodes', list):
                if not isinstance(item, dict):
                    raise reader.error('trace node must be an object')
                node = _Reader(reader.source, reader.line, item).node()
                attention = _decode_attention(reader, item.get('value'))
                if attention is not None:
                    out[example_id, node] = attention
        else:
            if any(key in reader.record for key in ('scores', 'find_scores', 'number', 'numbers')):
                raise reader.error('groundings record; execute it with --programs or exec first')
            attention = _decode_attention(reader, reader.record)
            if attention is None:
                raise reader.error('module output record needs probs')
            out[example_id, reader.node()] = attention
    return out


def load_report(path: StrPath) -> FaithfulnessReport:
    record = load_json(path)
    if not isinstance(record, dict):
        raise ValidationError('report must be a JSON object', str(path))
    try:
        return FaithfulnessReport.from_record(record)
    except ValidationError as e:
        raise ValidationError(str(e), str(path)) from e
