"""Interleaved benchmark: captions, scenes, data engine, metrics, dataset files."""
from .caption import CaptionEntity, CaptionParseError, InterleavedCaption, parse_caption, serialize_caption
from .dataset import (BenchRecord, DatasetError, EntityAnn, read_dataset, read_scenes,
                      record_from_scene, record_to_entry, write_dataset, write_scenes)
from .engine import (AnnotationError, HttpAnnotationClient, MockAnnotationClient, annotate,
                     build_corpus, build_prompt)
from .metrics import MetricError, metric_ciou, metric_ir_at_k, metric_miou, metric_pq
from .scenes import SceneError, generate_scene, template_caption
from .similarity import SimilarityIndex, build_similarity_index, match_segment, replace_entities
