"""Flexible keyword spotting with an audio-compliant text encoder.

A CTC-trained conformer provides frame embeddings; text is turned into the
same embedding space by looking up per-phoneme mean audio vectors (the P2V
database); a GRU head scores the alignment between the two.
"""

from .bundle import Bundle, VerificationResult, evaluate, verify
from .encoder import (
    DecodedSequence,
    Encoder,
    EncoderConfig,
    OptimizerConfig,
    encode,
    evaluate_cer,
    fine_tune,
    greedy_decode,
    predict_posteriors,
    train_ctc,
    transformer_lr,
)
from .errors import (
    AlignmentInfeasibleError,
    CEDError,
    ConsistencyError,
    CoverageError,
    GenerationFailedError,
    IncompatibleBundleError,
    IncompatibleCheckpointError,
    InvalidInputError,
    OOVError,
    UnsupportedFormatError,
)
from .evaluation import MetricsReport, ScoredPair, auc, build_test_pairs, eer
from .features import (
    Manifest,
    ManifestEntry,
    SyntheticCorpusSpec,
    build_synthetic_corpus,
    extract_filterbank,
    read_features,
    synthesize_utterance,
    write_features,
)
from .p2v import (
    LocalVectorRecord,
    P2VDatabase,
    build_p2v,
    collect_local_vectors,
    encode_phonemes,
    encode_text,
    export_local_vector_plot_data,
)
from .phonemes import (
    Lexicon,
    PhonemeVocabulary,
    cer,
    grapheme_to_phoneme,
    phoneme_edit_distance,
)
from .training import (
    CEDTrainingConfig,
    ConfusableSpec,
    SamplePair,
    TrainingBatch,
    build_batch,
    generate_confusable,
    train_ced,
)
from .verifier import (
    VerifierHead,
    check_path,
    cosine_matrix,
    dsp_align,
    masked_agreement,
    path_score,
    score,
)

__version__ = "0.1.0"
