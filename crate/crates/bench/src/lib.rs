//! Deterministic inputs for the benchmarks.

use instructforge_core::dataset::ResponseSample;
use instructforge_core::rng::derive_seed;

fn unit(seed: u64, i: u64) -> f64 {
    (derive_seed(seed, &[i]) >> 11) as f64 / (1u64 << 53) as f64
}

/// A mix of the answer shapes rollouts produce.
pub fn answer_texts(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match i % 6 {
            0 => format!("{}", i * 7),
            1 => format!("\\frac{{{}}}{{{}}}", i % 97 + 1, i % 13 + 2),
            2 => format!("{}\\sqrt{{{}}}", i % 5 + 1, i % 11 + 2),
            3 => format!("{}.{:03}", i % 40, i % 1000),
            4 => format!("\\frac{{2(n-{})(n-2)}}{{n(n+1)}}", i % 3 + 1),
            _ => ["yes", "(B)", "no", "D"][i % 4].to_string(),
        })
        .collect()
}

/// `k` rollouts for one record, about 60% of them answering 3/4.
pub fn rollouts(k: usize, seed: u64) -> Vec<ResponseSample> {
    (0..k)
        .map(|i| {
            let text = if unit(seed, i as u64) < 0.6 { "\\boxed{\\frac{3}{4}}".to_string() } else { format!("\\boxed{{{}}}", i % 5) };
            let mut s = ResponseSample::new("bench", i as u32, text.clone());
            s.answer = instructforge_core::extract::extract_rollout_answer(&text);
            s.reward = Some(unit(seed ^ 0x5eed, i as u64) * 10.0);
            s
        })
        .collect()
}

/// Reward vectors for `prompts` prompts with `k` responses each.
pub fn reward_matrix(prompts: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..prompts).map(|p| (0..k).map(|i| unit(seed, (p * k + i) as u64)).collect()).collect()
}

/// Instruction-like sentences over a small vocabulary.
pub fn sentences(n: usize, words: usize, seed: u64) -> Vec<String> {
    const VOCAB: [&str; 16] = [
        "write", "a", "short", "story", "about", "the", "sea", "explain", "how", "to", "sort", "list", "in", "python", "plan", "trip",
    ];
    (0..n)
        .map(|s| {
            (0..words)
                .map(|w| VOCAB[(derive_seed(seed, &[s as u64, w as u64]) % VOCAB.len() as u64) as usize])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}
