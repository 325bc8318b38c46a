//! Shared fixtures for the criterion benches.

use tds_core::dataset::{batch_plan, BatchOptions, FeatureSchema, SampleBatch, SpanDataset};
use tds_core::generator::{Generator, GeneratorConfig};

/// Spans of a reduced reference world: 200 users, 4 spans.
pub fn world() -> (FeatureSchema, Vec<SpanDataset>) {
    let cfg = GeneratorConfig {
        n_users: 200,
        n_spans: 4,
        ..GeneratorConfig::default()
    };
    let spans = Generator::new(cfg.clone()).unwrap().spans().unwrap();
    (cfg.schema(), spans)
}

/// The first shuffled batch of `span`.
pub fn first_batch(schema: &FeatureSchema, span: &SpanDataset, batch_size: usize) -> SampleBatch {
    let plan = batch_plan(
        span,
        BatchOptions {
            batch_size,
            shuffle_seed: 0,
            listwise: false,
        },
    )
    .unwrap();
    SampleBatch::from_records(schema, span, &plan[0])
}
