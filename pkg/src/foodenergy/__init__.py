"""Food energy estimation from meal images via per-pixel calorie density maps."""
from .density import (
    FoodItemAnnotation,
    GrayscaleMap,
    combine_item_densities,
    decode_grayscale,
    encode_grayscale,
    flip,
    generate_item_density,
    render_visualization,
    summation_decode,
)
from .dataset import (
    EatingOccasion,
    SyntheticSceneConfig,
    augment_all,
    augment_fourfold,
    generate_synthetic,
    load_manifest,
    prune,
    save_manifest,
    select,
    split,
)
from .encoder import CGANEncoder, EncoderConfig, predict_density, train_encoder, training_arrays
from .decoder import GrayscaleDecoder, RegressionDecoder, SummationDecoder, decode
from .evaluate import AggregateReport, EvaluationReport, OracleEncoder, aggregate, evaluate

__version__ = "0.1.0"
