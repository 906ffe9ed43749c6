use std::fmt;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub type C64 = Complex64;
/// 3×3 complex phase-frame matrix (impedance or admittance).
pub type Mat3 = Matrix3<C64>;
/// Per-phase complex quantity, index 0 = a, 1 = b, 2 = c.
pub type Vec3 = Vector3<C64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn from_index(i: usize) -> Phase {
        Phase::ALL[i]
    }

    pub fn from_char(c: char) -> Option<Phase> {
        match c.to_ascii_lowercase() {
            'a' => Some(Phase::A),
            'b' => Some(Phase::B),
            'c' => Some(Phase::C),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Phase::A => 'a',
            Phase::B => 'b',
            Phase::C => 'c',
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// Set of present phases, stored as a bit mask (a = 1, b = 2, c = 4).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const ABC: PhaseSet = PhaseSet(0b111);
    pub const EMPTY: PhaseSet = PhaseSet(0);

    pub fn single(p: Phase) -> PhaseSet {
        PhaseSet(1 << p.index())
    }

    pub fn from_phases<I: IntoIterator<Item = Phase>>(it: I) -> PhaseSet {
        PhaseSet(it.into_iter().fold(0, |m, p| m | (1 << p.index())))
    }

    pub fn parse(s: &str) -> Option<PhaseSet> {
        let mut mask = 0u8;
        for c in s.chars() {
            let p = Phase::from_char(c)?;
            if mask & (1 << p.index()) != 0 {
                return None;
            }
            mask |= 1 << p.index();
        }
        Some(PhaseSet(mask))
    }

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn is_subset_of(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn insert(&mut self, p: Phase) {
        self.0 |= 1 << p.index();
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{}", p)?;
        }
        Ok(())
    }
}

impl Serialize for PhaseSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PhaseSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PhaseSet::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid phase set {s:?}")))
    }
}

/// Balanced positive-sequence voltage of the given magnitude.
pub fn balanced(magnitude: f64) -> Vec3 {
    let a = 2.0 * std::f64::consts::PI / 3.0;
    Vec3::new(
        C64::from_polar(magnitude, 0.0),
        C64::from_polar(magnitude, -a),
        C64::from_polar(magnitude, a),
    )
}

/// Zero out entries of a per-phase vector on absent phases.
pub fn mask_vec(v: Vec3, phases: PhaseSet) -> Vec3 {
    Vec3::from_fn(|i, _| {
        if phases.contains(Phase::from_index(i)) {
            v[i]
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

pub fn max_abs(v: &Vec3) -> f64 {
    v.iter().map(|c| c.norm()).fold(0.0, f64::max)
}
