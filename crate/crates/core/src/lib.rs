//! Token-level routing between an on-device small language model (SLM) and a
//! remote large language model (LLM).
//!
//! The small model decodes locally. After every step a lightweight MLP router
//! scores the small model's last-layer hidden state; tokens whose confidence
//! falls strictly below the configured threshold are generated by the large
//! model instead, over the wire schema in [`wire`].
//!
//! Module map:
//!
//! - [`types`]: shared vocabulary (routes, tagged tokens, generation config).
//! - [`engine`]: reference decoder-only transformer, tokenizer, KV cache and the
//!   [`engine::Backend`] contract every model runtime satisfies.
//! - [`router`]: MLP confidence scoring and routing policies.
//! - [`trainer`]: shortcut preference labels and router training.
//! - [`wire`]: routing request/response schema and canonical encoding.
//! - [`server`]: the large-model serving side with session management and
//!   latency injection.
//! - [`orchestrator`]: the collaborative decoding loop.
//! - [`metrics`]: TTFT / TBT / routing-number accounting from event logs.
//! - [`bench`]: threshold sweeps, scoring and the synthetic oracle task.

pub mod bench;
pub mod clock;
pub mod engine;
pub mod metrics;
pub mod orchestrator;
pub mod router;
pub mod server;
pub mod tensorfile;
pub mod trainer;
pub mod types;
pub mod wire;

pub use types::{
    ConfigError, GenerationConfig, HiddenState, KvPolicy, Mode, Route, Sampling, TaggedToken,
    TokenId,
};
