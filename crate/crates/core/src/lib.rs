//! Routing vague Earth-observation queries between direct answers and expert tools.

pub mod scene;
pub mod vagueeo;
pub mod reward;
pub mod mcp;
pub mod policy;
pub mod router;
pub mod grpo;
pub mod metrics;
