//! Core of the reading-competition platform: ground truth storage and
//! annotation workflow, task definitions, submission ingest, scoring
//! protocols and the evaluation job queue.

pub mod clock;
pub mod datastore;
pub mod evalcore;
pub mod evalservice;
pub mod fsutil;
pub mod geometry;
pub mod ingest;
pub mod synth;
pub mod taskdef;
pub mod workflow;
