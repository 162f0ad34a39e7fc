//! Explainable crash-severity analysis.
//!
//! The pipeline turns relational crash tables into narratives
//! ([`schema`], [`narrator`]), optionally rewrites them through a chat model
//! under mechanical fact-preservation checks ([`augment`]), explains a
//! severity prediction token by token ([`refmodel`], [`attribution`]), and
//! rolls the high-attribution words up into factor summaries and
//! co-occurrence graphs ([`analytics`]). [`evalharness`] covers the
//! prompting baselines, metrics, and the loss-masked fine-tuning dataset.

pub mod analytics;
pub mod attribution;
pub mod augment;
pub mod chat;
pub mod config;
pub mod corpus;
pub mod evalharness;
pub mod io;
pub mod narrator;
pub mod par;
pub mod refmodel;
pub mod schema;
