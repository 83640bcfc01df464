//! Class label enums shared by the classifier, the generator and the fusion head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrafficLightState {
    Red,
    Green,
    Yellow,
    Off,
}

impl TrafficLightState {
    /// Class order of the 4-class configuration.
    pub const ALL: [TrafficLightState; 4] = [Self::Red, Self::Green, Self::Yellow, Self::Off];
    /// Class order of the 3-class configuration.
    pub const THREE: [TrafficLightState; 3] = [Self::Red, Self::Green, Self::Off];

    pub fn classes(n: usize) -> Option<&'static [TrafficLightState]> {
        match n {
            4 => Some(&Self::ALL),
            3 => Some(&Self::THREE),
            _ => None,
        }
    }

    /// Index within the class set of size `n_classes`.
    pub fn index(self, n_classes: usize) -> Option<usize> {
        Self::classes(n_classes)?.iter().position(|&s| s == self)
    }

    pub fn from_index(i: usize, n_classes: usize) -> Option<Self> {
        Self::classes(n_classes)?.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Red => "Red",
            Self::Green => "Green",
            Self::Yellow => "Yellow",
            Self::Off => "Off",
        }
    }
}

impl fmt::Display for TrafficLightState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrafficLightState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown traffic light state {s:?}")))
    }
}

/// Crossing decision. Index 0 is `Cross`, the positive ("safe") class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CrossingLabel {
    Cross,
    DontCross,
}

impl CrossingLabel {
    pub fn index(self) -> usize {
        match self {
            Self::Cross => 0,
            Self::DontCross => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Self::Cross
        } else {
            Self::DontCross
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cross => "Cross",
            Self::DontCross => "DontCross",
        }
    }
}

impl FromStr for CrossingLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim() {
            "Cross" => Ok(Self::Cross),
            "DontCross" => Ok(Self::DontCross),
            other => Err(Error::InvalidArgument(format!("unknown crossing label {other:?}"))),
        }
    }
}
