//! Corpus directories: `manifest.json`, `records.jsonl` and `images/*.ppm`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusRecord, FactorVector, Hidden, Labels, SynthConfig};
use crate::error::{ensure, Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// What produced the corpus (`synth`, `curate`, ...).
    pub generator: String,
    pub seed: Option<u64>,
    pub count: usize,
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    id: u64,
    image: String,
    tokens: Vec<u32>,
    width: u32,
    height: u32,
    factors: FactorVector,
    monotonic_bg: bool,
    labels: Option<Labels>,
    hidden: Hidden,
}

fn image_name(id: u64) -> String {
    format!("images/{id:06}.ppm")
}

pub fn save_corpus(dir: &Path, records: &[CorpusRecord], manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("records.jsonl");
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(f);
    for r in records {
        let name = image_name(r.id);
        r.image().write_pnm(&dir.join(&name))?;
        let line = Line {
            id: r.id,
            image: name,
            tokens: r.tokens.clone(),
            width: r.width,
            height: r.height,
            factors: r.factors.clone(),
            monotonic_bg: r.monotonic_bg,
            labels: r.labels,
            hidden: r.hidden,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    let mpath = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))
}

pub fn load_corpus(dir: &Path) -> Result<(Manifest, Vec<CorpusRecord>)> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let path = dir.join("records.jsonl");
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::with_capacity(manifest.count);
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if let Some(lab) = &l.labels {
            lab.validate()?;
        }
        ensure!(
            l.width > 0 && l.height > 0,
            Format,
            "record {} has an empty nominal size",
            l.id
        );
        let img = Image::read_pnm(&dir.join(&l.image))?;
        ensure!(
            img.shape() == CorpusRecord::shape(),
            Format,
            "image {} is {}, expected {}",
            l.image,
            img.shape(),
            CorpusRecord::shape()
        );
        records.push(CorpusRecord {
            id: l.id,
            pixels: img.to_bytes(),
            tokens: l.tokens,
            width: l.width,
            height: l.height,
            factors: l.factors,
            monotonic_bg: l.monotonic_bg,
            labels: l.labels,
            hidden: l.hidden,
        });
    }
    ensure!(
        records.len() == manifest.count,
        Format,
        "manifest lists {} records, found {}",
        manifest.count,
        records.len()
    );
    Ok((manifest, records))
}
