//! Continual pre-training of a compact sequential recommender on mixed
//! multi-domain behaviour, followed by fine-tuning on a held-out domain.
//!
//! The guide in `book/` walks through each module.

pub mod corpus;
pub mod eval;
pub mod mixer;
pub mod model;
pub mod pipeline;
pub mod prompting;
pub mod scheduler;
pub mod synth;

// Book snippets run as doc-tests so the guide cannot drift from the code.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/mixing.md")]
    mod mixing {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    mod schedule {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
