//! Network families: class-conditional generator, projection discriminator
//! and the 14-layer residual classifier, each with a full and a tiny
//! profile. Parameters live in a [`ParamStore`]; a network struct only knows
//! which entries belong to which layer.

mod classifier;
mod discriminator;
mod generator;

pub use classifier::{Classifier, ClassifierConfig};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig};

use krlab_nn::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{KrError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Full,
    Tiny,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Full => "full",
            Profile::Tiny => "tiny",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = KrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "tiny" => Ok(Profile::Tiny),
            other => Err(KrError::Config(format!("unknown profile `{other}` (expected full|tiny)"))),
        }
    }
}

/// Checks class labels against the class count.
pub(crate) fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= k) {
        Some(l) => Err(KrError::invalid(format!("label {l} out of range for {k} classes"))),
        None => Ok(()),
    }
}

/// Exponential moving average of network weights.
///
/// Before `start_step` the average simply tracks `live`; afterwards every
/// entry (parameters and buffers alike) moves by `ema = decay·ema + (1−decay)·live`.
pub fn ema_update(ema: &mut ParamStore, live: &ParamStore, decay: f32, step: u64, start_step: u64) -> Result<()> {
    if !ema.same_layout(live) {
        return Err(KrError::Nn(krlab_nn::NnError::LayoutMismatch));
    }
    if step < start_step {
        ema.copy_from(live)?;
        return Ok(());
    }
    for (e, l) in ema.entries_mut().iter_mut().zip(live.entries()) {
        for (a, &b) in e.value.data_mut().iter_mut().zip(l.value.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}
