"""Position-based prompting over masked-language-model encoders."""

from pbprompt.corpus import (
    MASK,
    AnnotatedSentence,
    PromptInstance,
    PromptType,
    SplitSpec,
    apply_custom_masking,
    apply_random_masking,
    build_generalisation_testset,
    classify_prompt_type,
    generate_synthetic_corpus,
    parse_annotations,
    split_dataset,
)
from pbprompt.position import (
    PositionEmbeddingTable,
    PositionIdSequence,
    all_mask_position_sequences,
    lookup_embeddings,
    mask_relative_ids,
)
from pbprompt.evaluation import (
    EvalReport,
    SpanPrediction,
    bucket_analysis,
    exact_match,
    fewshot_curves,
    partial_match,
    report_by_prompt_type,
)

__version__ = "0.1.0"
