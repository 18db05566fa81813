//! Core building blocks for anonymizing and mining OCR-tokenized discharge
//! summaries.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`docmodel`]: tokens, bounding boxes, OCR-JSON ingestion and reading order.
//! - [`lfkit`]: labeling functions and the LF vote matrix.
//! - [`labelmodel`]: the generative reliability model jointly trained with a
//!   linear feature model.
//! - [`anonymizer`]: masking, patient-ID serialization and leak checks.
//! - [`fieldex`]: heading/stop-keyword field extraction and CSV output.
//! - [`promptex`]: the clinical question prompt, LLM transports and answer parsing.
//! - [`evalkit`]: confusion metrics, Cohen's kappa and table reconciliation.
//! - [`synthcorpus`]: synthetic discharge summaries with planted ground truth.

pub mod anonymizer;
pub mod docmodel;
pub mod evalkit;
pub mod fieldex;
pub mod labelmodel;
pub mod lfkit;
pub mod promptex;
pub mod synthcorpus;

pub use docmodel::{BBox, ClassLabel, Document, Token};
