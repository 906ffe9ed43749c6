//! Feeders shipped with the crate.

use crate::feeder::FeederModel;

pub const FEEDER34_JSON: &str = include_str!("../data/feeder34.json");
pub const FEEDER123_JSON: &str = include_str!("../data/feeder123.json");

pub const NAMES: [&str; 2] = ["feeder34", "feeder123"];

pub fn feeder34() -> FeederModel {
    FeederModel::from_json(FEEDER34_JSON).expect("bundled feeder34 is valid")
}

pub fn feeder123() -> FeederModel {
    FeederModel::from_json(FEEDER123_JSON).expect("bundled feeder123 is valid")
}

pub fn by_name(name: &str) -> Option<FeederModel> {
    match name {
        "feeder34" | "34" => Some(feeder34()),
        "feeder123" | "123" => Some(feeder123()),
        _ => None,
    }
}
