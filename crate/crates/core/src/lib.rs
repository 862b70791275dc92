//! Bug-semantic features for C functions and their alignment with what a
//! vulnerability-detection model attends to.
//!
//! The pipeline: [`ast::parse`] a function, extract a [`BugFeatureSet`]
//! (PVS or buggy paths), map the model's input tokens onto AST tokens with
//! [`build_alignment`], then score the overlap with [`metrics`] and
//! [`interaction`]. [`annotate`] produces Mark/Prepend training inputs.

use std::collections::BTreeSet;

pub mod align;
pub mod annotate;
pub mod ast;
pub mod corpus;
pub mod dump;
pub mod error;
pub mod features;
pub mod interaction;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod summary;

/// AST-token indices.
pub type TokenSet = BTreeSet<usize>;

pub use align::{build_alignment, AttentionPooling, Coverage, InputToken, TokenAlignment};
pub use annotate::{AnnotatedExample, AnnotatedRecord, AnnotationConfig, AnnotationMode};
pub use ast::{parse, Ast, AstToken, Label, SourceFunction};
pub use corpus::{load_corpus, FeatureRecord};
pub use dump::{load_dump, AttentionTensor, ModelDump};
pub use error::{Error, Result};
pub use features::{BugFeatureSet, FeatureKind, PvsRuleSet, PvsVersion};
pub use interaction::InteractionMatrix;
pub use metrics::{AlignmentRecord, MetricKind};
pub use pipeline::{align_example, AlignConfig, KPolicy};
pub use report::{Report, ReportFormat};
pub use summary::{HeadAggregation, Stats};
