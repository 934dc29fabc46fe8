//! Orchestration: configuration, corpus ingestion, the SCLR container, the
//! staged pipeline and reports.

mod config;
mod ingest;
mod pipeline;
mod report;
pub mod sclr;

pub use config::{JsaeStage, Precision, RunConfig, SaeStage, ScalarStage, Seeds, SegmentKind, JSAE_LABEL};
pub use ingest::{ingest, read_source, CorpusRecord, SONNETS};
pub use pipeline::{FileRecord, JsaeRecord, LmRecord, Manifest, MemberReport, Pipeline, SaeRecord, ScoreRow, Stage, StageRecord};
pub use report::{reductions, svg_plot, write_report, Reduction, Report, REDUCTION_HEADER, SCORE_HEADER};

#[cfg(test)]
mod tests;
