from __future__ import annotations

__version__ = '0.1.0'

from .algebra import *
from .errors import *
from .executor import *
from .faithfulness import *
from .program import *
from .records import *
from .scene import *
from .significance import *
from .synth import *

__all__ = (
    'NMNFaithError',
    'ProgramSyntaxError',
    'TypeCheckError',
    'AlgebraError',
    'GroundingError',
    'ProviderError',
    'ValidationError',
    'ValueType',
    'SignatureTable',
    'Program',
    'TypedProgram',
    'parse',
    'linearize',
    'typecheck',
    'VISUAL_SIGNATURES',
    'text_signatures',
    'TruthProb',
    'NumberValue',
    'ValueDist',
    'discretize',
    'compare',
    'ImageSide',
    'BoundingBox',
    'Scene',
    'BoxAttention',
    'iou',
    'CountStrategy',
    'ExecutorConfig',
    'GroundingProvider',
    'FileGroundingProvider',
    'ExecutionTrace',
    'Executor',
    'execute',
    'execute_many',
    'AggregationScheme',
    'NegativePolicy',
    'MetricConfig',
    'VisualAnnotation',
    'TextAnnotation',
    'FaithfulnessReport',
    'score_instances',
    'aggregate',
    'upper_bound',
    'score_text',
    'text_aggregate',
    'permutation_test',
    'paired_scores',
    'SceneSpec',
    'generate_scene',
    'generate_program',
    'generate_example',
    'load_programs',
    'load_scenes',
    'load_groundings',
    'load_visual_annotations',
    'load_attentions',
)
