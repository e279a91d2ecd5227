//! Fixtures shared by the benchmarks.

use scm_core::embedding::hash_embed;
use scm_core::memory::NewInteraction;
use scm_core::{HeuristicTokenizer, MemoryStream};

const TOPICS: [&str; 8] = ["running", "pasta", "weather", "trains", "guitar", "garden", "chess", "rivers"];

pub fn turn_text(i: usize) -> String {
    let topic = TOPICS[i % TOPICS.len()];
    format!("turn {i}: we talked about {topic} and what {topic} means for week {}", i / 7)
}

/// A stream of `turns` interactions embedded with the hash embedder.
pub fn synthetic_stream(turns: usize, dimension: usize) -> MemoryStream {
    let mut stream = MemoryStream::new(dimension);
    for i in 0..turns {
        let observation = turn_text(i);
        let response = format!("noted, {}", TOPICS[(i * 3) % TOPICS.len()]);
        let embedding = hash_embed(&format!("{observation}\n{response}"), dimension);
        stream
            .append(
                NewInteraction {
                    observation_summary: observation.clone(),
                    response_summary: response.clone(),
                    observation,
                    response,
                    embedding,
                },
                &HeuristicTokenizer,
            )
            .expect("synthetic turn appends");
    }
    stream
}

/// Plain prose of roughly `paragraphs * 60` tokens.
pub fn synthetic_document(paragraphs: usize) -> String {
    (0..paragraphs)
        .map(|i| format!("{} {}\n\n", turn_text(i), "The road went on past the mill and the bridge. ".repeat(4)))
        .collect()
}
