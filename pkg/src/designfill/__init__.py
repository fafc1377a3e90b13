"""Desk-scale multimodal markup modeling.

Graphic-design templates serialize to a canonical SVG-subset markup whose
image hrefs hold quantized image tokens; a dual-head causal transformer is
trained on infill-transformed token streams; grammar-routed decoding fills
attribute, text, and image spans back into valid templates.
"""

from .raster import (
    RasterImage,
    ShapeMismatch,
    composite_over_white,
    from_uint8,
    mse,
    read_png,
    resize_bilinear,
    to_uint8,
    write_png,
)
from .templates import (
    Canvas,
    DesignTemplate,
    ImageElement,
    ImageTokenBlock,
    TextElement,
    ValidationReport,
    Violation,
    validate,
)
from .svg_codec import (
    LengthMismatch,
    MarkupAttributeError,
    MarkupSyntaxError,
    UnknownTag,
    parse,
    serialize,
    split_multiline,
)
from .sequences import (
    Attribute,
    FimStream,
    ImageHref,
    MalformedFim,
    Modality,
    SpanNotFound,
    TextContent,
    Token,
    apply_fim,
    build_document_stream,
    make_completion_prompt,
    read_corpus,
    reassemble,
    tokenize_template,
    write_corpus,
)
from .quantizer import (
    QuantizerConfig,
    QuantizerModel,
    build_quantizer,
    init_alpha_from_rgb,
    load_quantizer,
    nearest_code,
    save_quantizer,
)
from .lm import DualHeadLM, LMConfig, load_lm, save_lm
from .sampling import (
    GenerationResult,
    GrammarViolation,
    RouterState,
    SamplerConfig,
    generate,
    next_modality,
    top_p_sample,
    validate_stream,
)
from .evaluation import AttrBinning, build_eval_set, recon_metrics, score_attribute
from .datagen import GenConfig, generate_template, generate_templates, render_preview
from .utils import NonFiniteLoss, set_determinism

__version__ = "0.1.0"
