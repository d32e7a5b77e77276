//! Shared fixtures for the criterion benchmarks.

use robad_core::data::{encode_users, filter_users, gen_synthetic, PreprocessSettings, Vocab};
use robad_core::{ModelConfig, UserSequence};

/// Preprocessed synthetic users and a tiny model config sized to their vocabulary.
pub fn fixture(n_users: usize, seed: u64) -> (Vec<UserSequence>, ModelConfig) {
    let raw = gen_synthetic(n_users, 0.9, seed).expect("synthetic corpus");
    let settings = PreprocessSettings::default();
    let kept = filter_users(&raw, &settings);
    let vocab = Vocab::build(&kept, settings.min_freq);
    let users = encode_users(&kept, &vocab, settings.tokens_per_post);
    (users, ModelConfig::tiny(vocab.len()))
}
