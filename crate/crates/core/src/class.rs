//! Class and modality vocabulary shared by every stage.
//!
//! The class order `(A, O, G, N)` is global: network output index `i`
//! always means `Class::ALL[i]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Glioma sub-type, plus the negative class `N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Class {
    /// Lower-grade astrocytoma, IDH-mutant.
    A,
    /// Oligodendroglioma, IDH-mutant, 1p/19q co-deleted.
    O,
    /// Glioblastoma / diffuse astrocytic glioma, IDH-wildtype.
    G,
    /// Background, artifact, hemorrhage or lesion-free unit.
    N,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::A, Class::O, Class::G, Class::N];
    pub const SUBTYPES: [Class; 3] = [Class::A, Class::O, Class::G];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Class> {
        Class::ALL.get(i).copied().ok_or(Error::LabelOutOfRange {
            label: i,
            classes: Class::COUNT,
        })
    }

    pub fn is_subtype(self) -> bool {
        self != Class::N
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Class::A => "A",
            Class::O => "O",
            Class::G => "G",
            Class::N => "N",
        }
    }

    /// Parses a patient-level label; `N` is rejected.
    pub fn parse_subtype(s: &str) -> Result<Class> {
        match s.parse::<Class>()? {
            Class::N => Err(Error::UnknownLabel(s.to_string())),
            c => Ok(c),
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Class> {
        match s.trim() {
            "A" | "a" => Ok(Class::A),
            "O" | "o" => Ok(Class::O),
            "G" | "g" => Ok(Class::G),
            "N" | "n" => Ok(Class::N),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

/// Imaging source of a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "hist")]
    Histology,
    T1w,
    T2w,
    GdT1w,
    #[serde(rename = "FLAIR")]
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Histology,
        Modality::T1w,
        Modality::T2w,
        Modality::GdT1w,
        Modality::Flair,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Histology => "hist",
            Modality::T1w => "T1w",
            Modality::T2w => "T2w",
            Modality::GdT1w => "GdT1w",
            Modality::Flair => "FLAIR",
        }
    }

    pub fn is_radiology(self) -> bool {
        self != Modality::Histology
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Modality> {
        match s.trim().to_ascii_lowercase().replace('-', "").as_str() {
            "hist" | "histology" => Ok(Modality::Histology),
            "t1w" | "t1" => Ok(Modality::T1w),
            "t2w" | "t2" => Ok(Modality::T2w),
            "gdt1w" | "t1gd" | "t1ce" => Ok(Modality::GdT1w),
            "flair" => Ok(Modality::Flair),
            _ => Err(Error::InvalidArgument(format!("unknown modality {s:?}"))),
        }
    }
}
