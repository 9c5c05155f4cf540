//! Meta-reinforcement learning for mandatory highway lane changes.
//!
//! The crate bundles everything needed to train and study a lane-change
//! policy across traffic-density tasks:
//!
//! - [`sim`]: a seedable three-lane highway simulator with IDM traffic.
//! - [`env`]: the episode interface over the simulator.
//! - [`reward`]: comfort/efficiency/safety reward and the one-step action shield.
//! - [`nn`]: the dense actor-critic network, exact gradients, Adam and SGD.
//! - [`ppo`]: rollout collection, GAE and the clipped-surrogate update.
//! - [`maml`]: MAML inner/outer loops, the multi-task baseline and adaptation.
//! - [`eval`]: success/collision metrics, the adaptation study and report files.

pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod maml;
pub mod nn;
pub mod ppo;
pub mod reward;
pub mod seed;
pub mod sim;

pub use error::{Error, Result};
