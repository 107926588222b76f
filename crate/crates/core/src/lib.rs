//! Knowledge recycling: train a class-conditional GAN and a teacher on real
//! images, distil soft-labelled synthetic datasets from the generator, pick
//! the generator checkpoint and sampling parameters by classification
//! accuracy score, and measure how much membership information the
//! resulting student leaks compared with its teacher.

pub mod augment;
pub mod checkpoint;
pub mod clf_training;
pub mod config;
pub mod datasets;
pub mod error;
pub mod gan_training;
pub mod nets;
pub mod pipeline;
pub mod privacy;
pub mod report;
pub mod run;
pub mod store;
pub mod synthesis;

pub use error::{KrError, Result};
pub use krlab_nn as nn;
