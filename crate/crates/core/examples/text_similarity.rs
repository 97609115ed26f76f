//! Surface overlap (WordSim) and feature-space similarity (SPS).
//!
//! SPS needs a feature provider; here it is backed by an in-memory table
//! keyed by text hash, the same format the pipeline reads from disk.

use mia_audit::metrics::{
    jaccard_words, ngram_overlap, sps, word_sim, FeatureRecord, FileFeatureProvider, NgramUnit,
    SparseFeatureVector,
};
use mia_audit::text_sha256;

fn record(text: &str, entries: &[(usize, f64)]) -> FeatureRecord {
    FeatureRecord {
        text_sha256: text_sha256(text),
        vector: SparseFeatureVector::from_entries(64, entries.iter().copied()).unwrap(),
    }
}

fn main() -> mia_audit::Result<()> {
    let x = "The plant hired 40 workers in 2020.";
    let y = "In 2020 the factory took on forty new staff.";

    println!("jaccard      {:.3}", jaccard_words(x, y));
    println!("word 3-gram  {:.3}", ngram_overlap(x, y, NgramUnit::Word3));
    println!("char 5-gram  {:.3}", ngram_overlap(x, y, NgramUnit::Char5));
    println!("wordsim      {:.3}", word_sim(x, y));

    let provider = FileFeatureProvider::from_records([
        record(x, &[(1, 0.9), (7, 0.4), (12, 0.2)]),
        record(y, &[(1, 0.8), (7, 0.5), (30, 0.1)]),
    ]);
    println!("sps          {:.3}", sps(&[x], &[y], &provider)?);
    Ok(())
}
