//! Deterministic pseudo-LLM.
//!
//! The "model" is a hash of a rolling digest over the full context (prompt
//! KV content plus generated tokens), the position, the model seed and the
//! adapter. Any change to the context, including a contaminated KV block,
//! changes every later token.

use crate::hashing::{combine, combine_all, hash_str, mix64, unit_f64};
use crate::report::TokenLogprob;
use crate::trace::Token;

/// Number of candidates carried in every synthetic distribution.
pub const MAX_CANDIDATES: usize = 20;

const TAIL_MASS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeParams {
    pub vocab_size: u32,
    pub gap_min: f64,
    /// Gap between the argmax and the runner-up when near-tie mode is on.
    pub near_tie_gap: Option<f64>,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            gap_min: 0.8,
            near_tie_gap: None,
        }
    }
}

pub fn adapter_tag(adapter: &str) -> u64 {
    hash_str(adapter) ^ 0x4144_4150_5445_5200
}

/// Starting digest for a request context under `adapter`.
pub fn digest_seed(adapter: &str) -> u64 {
    mix64(adapter_tag(adapter))
}

#[inline]
pub fn roll(digest: u64, token: Token) -> u64 {
    combine(digest, u64::from(token) + 1)
}

pub fn context_digest<'a>(adapter: &str, tokens: impl IntoIterator<Item = &'a Token>) -> u64 {
    tokens
        .into_iter()
        .fold(digest_seed(adapter), |d, t| roll(d, *t))
}

/// Candidate distribution at one position, sorted by descending logprob.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub candidates: Vec<TokenLogprob>,
    /// Hash used to derive sampling and flip decisions.
    pub entropy: u64,
}

impl Distribution {
    pub fn argmax(&self) -> Token {
        self.candidates[0].token
    }

    pub fn top(&self, n: usize) -> Vec<TokenLogprob> {
        self.candidates.iter().take(n).copied().collect()
    }

    /// Samples with temperature using a hash-derived uniform draw.
    pub fn sample(&self, temperature: f64, draw: u64) -> Token {
        if temperature <= 0.0 {
            return self.argmax();
        }
        let weights: Vec<f64> = self
            .candidates
            .iter()
            .map(|c| (c.logprob / temperature).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = unit_f64(draw) * total;
        for (c, w) in self.candidates.iter().zip(&weights) {
            if u < *w {
                return c.token;
            }
            u -= w;
        }
        self.candidates[self.candidates.len() - 1].token
    }
}

/// Next-token distribution for a context digest.
pub fn pseudo_decode(
    digest: u64,
    position: u32,
    seed: u64,
    adapter: &str,
    params: &DecodeParams,
) -> Distribution {
    let vocab = u64::from(params.vocab_size.max(2));
    let entropy = combine_all(digest, &[u64::from(position), seed, adapter_tag(adapter)]);
    let want = MAX_CANDIDATES.min(vocab as usize);

    let mut tokens: Vec<Token> = Vec::with_capacity(want);
    let mut h = entropy;
    while tokens.len() < want {
        h = mix64(h);
        let t = (h % vocab) as Token;
        if !tokens.contains(&t) {
            tokens.push(t);
        }
    }

    let mut cumulative = Vec::with_capacity(want);
    let mut gap_sum = 0.0f64;
    for i in 0..want {
        if i > 0 {
            let gap = match (i, params.near_tie_gap) {
                (1, Some(g)) => g,
                _ => params.gap_min + 1.5 * unit_f64(combine(entropy, i as u64)),
            };
            gap_sum += gap;
        }
        cumulative.push(gap_sum);
    }
    let mass: f64 = cumulative.iter().map(|g| (-g).exp()).sum::<f64>() * (1.0 + TAIL_MASS);
    let log_norm = mass.ln();

    let candidates = tokens
        .into_iter()
        .zip(cumulative)
        .map(|(token, g)| TokenLogprob {
            token,
            logprob: -g - log_norm,
        })
        .collect();
    Distribution {
        candidates,
        entropy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let p = DecodeParams::default();
        let d = context_digest("BASE", &[1, 2, 3]);
        assert_eq!(
            pseudo_decode(d, 4, 0, "BASE", &p),
            pseudo_decode(d, 4, 0, "BASE", &p)
        );
    }

    #[test]
    fn distribution_is_sorted_and_normalized() {
        let p = DecodeParams::default();
        let dist = pseudo_decode(12345, 0, 9, "lora_a", &p);
        assert_eq!(dist.candidates.len(), MAX_CANDIDATES);
        for w in dist.candidates.windows(2) {
            assert!(w[0].logprob > w[1].logprob);
        }
        let total: f64 = dist.candidates.iter().map(|c| c.logprob.exp()).sum();
        assert!(total < 1.0 && total > 0.9);
        let mut toks: Vec<_> = dist.candidates.iter().map(|c| c.token).collect();
        toks.sort();
        toks.dedup();
        assert_eq!(toks.len(), MAX_CANDIDATES);
    }

    #[test]
    fn one_token_change_changes_next_token() {
        let p = DecodeParams::default();
        let mut diverged = 0;
        for base in 0..50u32 {
            let a = [base, 1, 2, 3, 4];
            let mut b = a;
            b[3] = (b[3] + 1 + base) % 1024;
            let da = context_digest("BASE", &a);
            let db = context_digest("BASE", &b);
            assert_ne!(da, db);
            if pseudo_decode(da, 5, 0, "BASE", &p).argmax()
                != pseudo_decode(db, 5, 0, "BASE", &p).argmax()
            {
                diverged += 1;
            }
        }
        // 1/1024 chance per pair of an accidental match.
        assert!(diverged >= 48);
    }

    #[test]
    fn adapter_changes_output() {
        let p = DecodeParams::default();
        let a = pseudo_decode(context_digest("BASE", &[7; 8]), 0, 0, "BASE", &p);
        let b = pseudo_decode(context_digest("lora_a", &[7; 8]), 0, 0, "lora_a", &p);
        assert_ne!(a.candidates, b.candidates);
    }

    #[test]
    fn near_tie_gap_is_exact() {
        let p = DecodeParams {
            near_tie_gap: Some(0.01),
            ..DecodeParams::default()
        };
        let dist = pseudo_decode(99, 3, 0, "BASE", &p);
        let gap = dist.candidates[0].logprob - dist.candidates[1].logprob;
        assert!((gap - 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_temperature_is_argmax() {
        let dist = pseudo_decode(5, 0, 0, "BASE", &DecodeParams::default());
        for draw in 0..20 {
            assert_eq!(dist.sample(0.0, mix64(draw)), dist.argmax());
        }
        let sampled: std::collections::HashSet<_> =
            (0..200).map(|d| dist.sample(5.0, mix64(d))).collect();
        assert!(sampled.len() > 1);
    }
}
