#![allow(dead_code)]

use std::path::{Path, PathBuf};

use instructforge_core::dataset::{write_records, Category, SeedInstruction};
use instructforge_core::pipeline::RunConfig;

pub fn reasoning_seeds(dir: &Path, n: usize) -> PathBuf {
    let seeds: Vec<_> = (0..n)
        .map(|i| SeedInstruction {
            id: format!("s{i:03}"),
            text: format!("What is {} + {}?", 10 + i, 3 * i + 1),
            category: None,
            gold_answer: Some((10 + i + 3 * i + 1).to_string()),
        })
        .collect();
    let path = dir.join("seeds.jsonl");
    write_records(&path, &seeds, false).unwrap();
    path
}

pub fn if_seeds(dir: &Path, n: usize) -> PathBuf {
    let cats = [Category::WritingStorytelling, Category::TechnicalProgramming, Category::BusinessMarketing];
    let seeds: Vec<_> = (0..n)
        .map(|i| SeedInstruction {
            id: format!("w{i:03}"),
            text: format!("Write a short note number {i} about the sea."),
            category: Some(cats[i % cats.len()]),
            gold_answer: None,
        })
        .collect();
    let path = dir.join("seeds.jsonl");
    write_records(&path, &seeds, false).unwrap();
    path
}

/// Parses a config body, then points it at `pool` and `out`.
pub fn config(body: &str, pool: &Path, out: &Path) -> RunConfig {
    let text = format!("pool = {:?}\n{body}", pool.display().to_string());
    let mut c = RunConfig::from_toml(&text, &[]).unwrap();
    c.output_dir = out.to_path_buf();
    c
}

/// Every regular file in `dir`, sorted by name, with its bytes.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

/// Seed texts substituted into the golden rendered prompts.
pub const GOLDEN_SEEDS: [&str; 2] = ["What is the sum of the first 10 positive integers?", "If 3x + 2 = 11, what is x?"];

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}
