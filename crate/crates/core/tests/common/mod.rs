//! Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

pub mod corruptions;
pub mod gradcheck;
pub mod scan;

use ssm_circuits::ioi::{
    generate_batch, DatasetConfig, Lexicon, PromptPair, TemplateId, Tokenizer,
};

pub fn ioi_pairs(count: usize, seed: u64) -> Vec<PromptPair> {
    let tok = Tokenizer::for_lexicon(&Lexicon::default()).unwrap();
    let cfg = DatasetConfig {
        templates: TemplateId::ALL.to_vec(),
        count,
        seed,
        ..DatasetConfig::default()
    };
    generate_batch(&cfg, &tok).unwrap()
}
