use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Signal-to-noise ratio as a positive rational (signal variance over noise
/// variance), e.g. `64` or `1/16`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SnrLevel {
    num: u32,
    den: u32,
}

impl SnrLevel {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::invalid(format!("SNR {num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        Ok(SnrLevel {
            num: num / g,
            den: den / g,
        })
    }

    pub const fn whole(v: u32) -> Self {
        SnrLevel { num: v, den: 1 }
    }

    pub const fn inverse(den: u32) -> Self {
        SnrLevel { num: 1, den }
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Standard deviation of additive noise for unit signal variance.
    pub fn noise_std(self) -> f64 {
        (self.den as f64 / self.num as f64).sqrt()
    }

    /// Default training set: 64, 16, 4, 1, 1/2, 1/4, 1/8.
    pub fn default_training_set() -> Vec<SnrLevel> {
        vec![
            Self::whole(64),
            Self::whole(16),
            Self::whole(4),
            Self::whole(1),
            Self::inverse(2),
            Self::inverse(4),
            Self::inverse(8),
        ]
    }

    /// Low training set: 16, 4, 1, 1/2, 1/4, 1/8, 1/16, 1/32.
    pub fn low_training_set() -> Vec<SnrLevel> {
        vec![
            Self::whole(16),
            Self::whole(4),
            Self::whole(1),
            Self::inverse(2),
            Self::inverse(4),
            Self::inverse(8),
            Self::inverse(16),
            Self::inverse(32),
        ]
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl PartialOrd for SnrLevel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SnrLevel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.num as u64 * other.den as u64).cmp(&(other.num as u64 * self.den as u64))
    }
}

impl fmt::Display for SnrLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for SnrLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("cannot parse SNR {s:?}; expected N or N/M"));
        let s = s.trim();
        match s.split_once('/') {
            Some((n, d)) => SnrLevel::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => SnrLevel::new(s.parse().map_err(|_| bad())?, 1),
        }
    }
}

impl Serialize for SnrLevel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SnrLevel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
