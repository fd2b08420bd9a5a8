pub mod annotate;
pub mod corpus;
pub mod dataset;
pub mod embeddings;
pub mod evaluate;
pub mod http;
pub mod io;
pub mod llm;
pub mod promptkit;
pub mod rng;
pub mod splitter;
pub mod stats;
pub mod vectorstore;
