//! Adaptive, GenAI and hybrid programming-exercise recommendation.

pub mod assessment;
pub mod elo;
pub mod events;
pub mod genai;
pub mod graph;
pub mod llm;
pub mod rag;
pub mod session;
pub mod sim;
pub mod telemetry;
