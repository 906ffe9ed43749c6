//! On-disk feeder schema (JSON). Unknown fields are rejected.

use serde::{Deserialize, Serialize};

use crate::phase::PhaseSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederDocument {
    #[serde(default)]
    pub name: String,
    pub base: BaseDoc,
    pub substation: String,
    pub nodes: Vec<NodeDoc>,
    pub branches: Vec<BranchDoc>,
    #[serde(default)]
    pub loads: Vec<InjectionDoc>,
    #[serde(default)]
    pub dgs: Vec<InjectionDoc>,
    pub pmus: Vec<PmuDoc>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseDoc {
    /// Line-to-line base voltage in kV.
    pub kv_ll: f64,
    /// Three-phase base power in MVA.
    pub mva: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: String,
    pub phases: PhaseSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchDoc {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length_m: f64,
    /// Row-major 3×3 series resistance matrix in ohms.
    pub r_ohm: [f64; 9],
    /// Row-major 3×3 series reactance matrix in ohms.
    pub x_ohm: [f64; 9],
}

/// Per-phase constant power. Loads consume, DGs inject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionDoc {
    pub node: String,
    pub p_w: [f64; 3],
    pub q_var: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmuDoc {
    pub node: String,
    pub branches: Vec<String>,
}

impl FeederDocument {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("feeder document serializes")
    }
}
