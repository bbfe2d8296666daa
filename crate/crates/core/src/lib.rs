//! Desk-scale lab for trust-aware reasoning rewards over speech prosody.
//!
//! The crate has two halves that meet in the middle:
//!
//! - A signal-level prosody annotation pipeline ([`dsp`] and [`prosody`])
//!   that turns raw audio into categorical pitch / energy / speed levels,
//!   intonation labels, and word-level stress.
//! - A reinforcement-learning reward stack ([`reward`], [`grpo`], [`toyenv`])
//!   implementing format/outcome/reasoning rewards, a group-level
//!   trustworthiness gate, progressive reward scheduling, and group-relative
//!   policy optimization over a fully observable toy policy.
//!
//! Everything is deterministic for a fixed seed. With the `parallel` feature
//! (on by default) per-query rollouts and batch jobs fan out over rayon while
//! producing bit-identical results to the sequential fallback.

pub mod dsp;
pub mod grpo;
pub mod par;
pub mod prosody;
pub mod reward;
pub mod toyenv;
