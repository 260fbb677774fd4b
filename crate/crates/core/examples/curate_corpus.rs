//! Run the curation pipeline on a synthetic corpus and compare the hidden
//! quality of what each selection rule keeps.
//!
//! cargo run --release --example curate_corpus

use yaart::curation::{
    curate, subsample_uniform, synth_corpus, top_by, CorpusRecord, CurateConfig, SynthConfig,
    AESTHETIC_FACTOR, IMAGE_OFFSET,
};
use yaart::rng::RngStream;

fn mean_quality(records: &[CorpusRecord]) -> f64 {
    records.iter().map(|r| r.gt_quality()).sum::<f64>() / records.len() as f64
}

fn main() -> yaart::Result<()> {
    let corpus = synth_corpus(5000, &SynthConfig::default(), &RngStream::new(3))?;
    let (selected, report) = curate(&corpus, &CurateConfig::default())?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    let aesthetic = top_by(
        &corpus,
        |r| r.factors.values()[IMAGE_OFFSET + AESTHETIC_FACTOR],
        0.03,
    )?;
    let uniform = subsample_uniform(&corpus, 0.1, &RngStream::new(4))?;
    println!("\nmean hidden quality");
    println!(
        "  full corpus          {:.3} ({} records)",
        mean_quality(&corpus),
        corpus.len()
    );
    println!(
        "  uniform 10%          {:.3} ({} records)",
        mean_quality(&uniform),
        uniform.len()
    );
    println!(
        "  aesthetics top 3%    {:.3} ({} records)",
        mean_quality(&aesthetic),
        aesthetic.len()
    );
    println!(
        "  curated top 10%      {:.3} ({} records)",
        mean_quality(&selected),
        selected.len()
    );
    Ok(())
}
