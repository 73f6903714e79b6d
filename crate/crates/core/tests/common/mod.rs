#![allow(dead_code)]

use graft::pipeline::PipelineConfig;

/// Overrides that shrink the desk preset to a few seconds per run.
pub const TINY: &[&str] = &[
    "data.synthetic.source_nodes=60",
    "data.synthetic.target_nodes=60",
    "gnn.hidden=16",
    "gnn.epochs=30",
    "subgraph.max_nodes=8",
    "subgraph.train_count=16",
    "tokenizer.epochs=2",
    "tokenizer.codebook_size=16",
    "tokenizer.num_queries=4",
    "tokenizer.steps=2",
    "tokenizer.denoiser_hidden=16",
    "tokenizer.warmup_subgraphs=8",
    "lm.width=16",
    "lm.layers=1",
    "lm.heads=2",
    "sft.epochs=1",
    "grpo.group_size=3",
    "align.steps=2",
    "align.prompts_per_step=2",
    "align.holdout=4",
];

pub fn tiny() -> PipelineConfig {
    let o: Vec<String> = TINY.iter().map(|s| s.to_string()).collect();
    PipelineConfig::desk().with_overrides(&o).unwrap()
}
