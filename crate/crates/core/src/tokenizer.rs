//! Token counting used by every budget decision in the engine.
//!
//! The default [`HeuristicTokenizer`] needs no vocabulary: each maximal run of
//! ASCII bytes costs `ceil(bytes / 4)` tokens and every non-ASCII character
//! costs one token. Exact backend tokenizers can be plugged in through the
//! [`Tokenizer`] trait; all thresholds in the controller and summarizer are
//! compared against whatever instance the engine was configured with.

use std::sync::Arc;

/// A pure, deterministic token counter.
pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;

    fn count(&self, text: &str) -> usize;

    /// Longest prefix of `text` (on a char boundary) whose count is at most
    /// `max_tokens`.
    ///
    /// Relies on prefix monotonicity of `count`, which every tokenizer in this
    /// crate satisfies.
    fn truncate<'a>(&self, text: &'a str, max_tokens: usize) -> &'a str {
        if self.count(text) <= max_tokens {
            return text;
        }
        let boundaries: Vec<usize> = text
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(text.len()))
            .collect();
        // largest boundary b with count(text[..b]) <= max_tokens
        let (mut lo, mut hi) = (0usize, boundaries.len() - 1);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if self.count(&text[..boundaries[mid]]) <= max_tokens {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        &text[..boundaries[lo]]
    }
}

pub type SharedTokenizer = Arc<dyn Tokenizer>;

/// `ceil(ascii_bytes / 4)` per ASCII run, plus one token per non-ASCII char.
#[derive(Debug, Default, Clone, Copy)]
pub struct HeuristicTokenizer;

impl Tokenizer for HeuristicTokenizer {
    fn name(&self) -> &str {
        "heuristic-bytes4"
    }

    fn count(&self, text: &str) -> usize {
        let mut total = 0;
        let mut ascii_run = 0usize;
        for ch in text.chars() {
            if ch.is_ascii() {
                ascii_run += 1;
            } else {
                total += ascii_run.div_ceil(4) + 1;
                ascii_run = 0;
            }
        }
        total + ascii_run.div_ceil(4)
    }
}
