//! Projection/call-back execution of clinical guidelines.
//!
//! A central engine ([`bedss::Bedss`]) applies a guideline plan tree and
//! ships personalized fragments of it, written in a small procedural
//! language ([`lang`]), to a local engine ([`mdss::Mdss`]) on the patient
//! device. The local engine runs each fragment as an independent task on a
//! logical clock and calls the central engine back when a breakout temporal
//! pattern ([`temporal`]) is detected. Both engines talk through an
//! acknowledged, retrying [`channel`], and [`sim::World`] drives the whole
//! system deterministically from scenario inputs.
//!
//! The crate is `no_std` and only needs `alloc`; file formats, sockets and
//! the command line live in the companion `pcb` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod bedss;
pub mod channel;
pub mod eval;
pub mod interp;
pub mod knowledge;
pub mod lang;
pub mod mdss;
pub mod metrics;
pub mod phr;
pub mod sim;
pub mod temporal;
pub mod time;

pub use knowledge::{KbStats, KnowledgeBase};
pub use lang::{ProjectionEnvelope, UnitProjection};
