//! Provenance-tagged values and the machine-readable run report.

use serde::{Deserialize, Serialize};

/// Where a reported number came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Produced by this tool from its inputs.
    Computed,
    /// A published reference value taken as an input, not recomputed.
    PaperInput,
    /// A tuning constant chosen so a model matches a published figure.
    Calibrated,
    /// Supplied on the command line or in a config file.
    UserInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tagged<T> {
    pub value: T,
    pub provenance: Provenance,
}

impl<T> Tagged<T> {
    pub fn computed(value: T) -> Self {
        Self {
            value,
            provenance: Provenance::Computed,
        }
    }

    pub fn paper(value: T) -> Self {
        Self {
            value,
            provenance: Provenance::PaperInput,
        }
    }

    pub fn calibrated(value: T) -> Self {
        Self {
            value,
            provenance: Provenance::Calibrated,
        }
    }

    pub fn user(value: T) -> Self {
        Self {
            value,
            provenance: Provenance::UserInput,
        }
    }
}
