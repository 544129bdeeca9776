//! Perception/generation disaggregation for closed-loop embodied policies.
//!
//! A policy is split into a perception module that turns an observation into
//! a [`context::PublicContext`] and a generation module that iterates on that
//! context to produce an action. The [`executor`] runs the two as a frame-based
//! pipeline over a [`context::ContextStore`], next to sequential, decoupled and
//! parallel baselines, against the [`envsim`] tracking task. [`tuner`] searches
//! pipeline shapes, [`metrics`] aggregates traces and [`verify`] holds the
//! self-check suite.

pub mod config;
pub mod context;
pub mod envsim;
pub mod executor;
pub mod metrics;
pub mod par;
pub mod partition;
pub mod policy;
pub mod trace;
pub mod transformer;
pub mod tuner;
pub mod verify;
