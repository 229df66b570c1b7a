//! Seat inventory control and overbooking for a single flight, learned with deep Q-learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`market`] samples reproducible booking-request scripts (Poisson arrivals per fare class,
//!   pre-decided cancellations).
//! - [`env`] replays a script as an episodic decision process: accept/deny at each arrival,
//!   refunds on cancellation, bumping cost at departure.
//! - [`network`] is a dense ReLU Q-network with analytic gradients and an adaptive
//!   per-parameter optimizer.
//! - [`agent`] holds the DQN machinery: replay buffer, target network, annealed epsilon-greedy
//!   exploration and the training loop.
//! - [`oracle`] computes hindsight-optimal revenue and per-episode/aggregate metrics.
//! - [`tiny`] is an exact backward-induction solver for small discretised instances, used to
//!   validate learning.
//! - [`harness`] and [`config`] drive experiments from the command line.

pub mod agent;
pub mod config;
pub mod env;
pub mod error;
pub mod exec;
pub mod harness;
pub mod market;
pub mod network;
pub mod oracle;
pub mod rng;
pub mod tiny;

pub use error::{Error, Result};
