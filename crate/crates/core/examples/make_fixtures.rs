//! Writes the bundled 20-article fixture KB and its 20 queries.
//!
//! cargo run -p qkf-core --example make_fixtures -- crates/core/fixtures

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use qkf_core::corpus::{write_kb, write_queries};
use qkf_core::synth::{jitter, SynthCorpus, SynthSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn round6(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| (x * 1e6).round() / 1e6).collect()
}

fn main() -> qkf_core::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    std::fs::create_dir_all(&dir)?;
    let corpus = SynthCorpus::generate(SynthSpec {
        articles: 20,
        sections: 3,
        passage_filler: 30,
        seed: 20,
        ..SynthSpec::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let queries: Vec<_> = (0..corpus.articles.len())
        .map(|a| {
            let image = round6(jitter(&corpus.abstract_image(a), 0.05, &mut rng));
            corpus.query(format!("q{a:02}"), a, a % 3, image)
        })
        .collect();
    let mut articles = corpus.articles.clone();
    for a in &mut articles {
        if let Some(qkf_core::corpus::ImageInput::Vector(v)) = a.image.take() {
            a.image = Some(qkf_core::corpus::ImageInput::Vector(round6(v)));
        }
        for s in &mut a.sections {
            s.image = a.image.clone();
        }
    }
    write_kb(&articles, BufWriter::new(File::create(dir.join("kb.jsonl"))?))?;
    write_queries(&queries, BufWriter::new(File::create(dir.join("queries.jsonl"))?))?;
    println!("wrote {} articles, {} queries to {}", articles.len(), queries.len(), dir.display());
    Ok(())
}
