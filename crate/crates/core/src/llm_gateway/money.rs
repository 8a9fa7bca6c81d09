//! Exact currency amounts.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, Div, Mul};
use std::str::FromStr;

use num_integer::Integer;
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("`{0}` is not a non-negative decimal amount")]
pub struct MoneyParseError(String);

/// A non-negative amount held as an exact fraction.
///
/// Serialized as a decimal string (`"0.372422"`), or `"n/d"` when the value
/// has no finite decimal expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Money(Ratio<i128>);

impl Money {
    pub const ZERO: Money = Money(Ratio::new_raw(0, 1));

    pub fn from_ratio(r: Ratio<i128>) -> Self {
        Money(r)
    }

    pub fn exact(self) -> Ratio<i128> {
        self.0
    }

    /// Round half away from zero to two decimals.
    pub fn round_to_cents(self) -> Money {
        let scaled = self.0 * Ratio::from_integer(100);
        Money(scaled.round() / Ratio::from_integer(100))
    }

    pub fn to_f64(self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    /// Finite decimal rendering, if one exists.
    pub fn to_decimal_string(self) -> Option<String> {
        let mut denom = *self.0.denom();
        let mut scale: i128 = 1;
        // count factors of 2 and 5; anything else means no finite expansion
        let (mut twos, mut fives) = (0u32, 0u32);
        while denom.is_even() {
            denom /= 2;
            twos += 1;
        }
        while denom % 5 == 0 {
            denom /= 5;
            fives += 1;
        }
        if denom != 1 {
            return None;
        }
        let places = twos.max(fives);
        for _ in 0..places {
            scale *= 10;
        }
        let scaled = *self.0.numer() * (scale / *self.0.denom());
        let int = scaled / scale;
        let frac = scaled % scale;
        if places == 0 {
            Some(int.to_string())
        } else {
            Some(format!("{int}.{:0width$}", frac, width = places as usize))
        }
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.to_decimal_string() {
            Some(s) => f.write_str(&s),
            None => write!(f, "{}/{}", self.0.numer(), self.0.denom()),
        }
    }
}

impl FromStr for Money {
    type Err = MoneyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || MoneyParseError(s.to_string());
        let t = s.trim();
        if let Some((n, d)) = t.split_once('/') {
            let n: i128 = n.trim().parse().map_err(|_| err())?;
            let d: i128 = d.trim().parse().map_err(|_| err())?;
            if n < 0 || d <= 0 {
                return Err(err());
            }
            return Ok(Money(Ratio::new(n, d)));
        }
        let (int, frac) = t.split_once('.').unwrap_or((t, ""));
        if (int.is_empty() && frac.is_empty())
            || !int.bytes().all(|b| b.is_ascii_digit())
            || !frac.bytes().all(|b| b.is_ascii_digit())
            || frac.len() > 30
        {
            return Err(err());
        }
        let digits = format!("{int}{frac}");
        let numer: i128 = if digits.is_empty() { 0 } else { digits.parse().map_err(|_| err())? };
        let denom = 10i128.checked_pow(frac.len() as u32).ok_or_else(err)?;
        Ok(Money(Ratio::new(numer, denom)))
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Wire {
            Text(String),
            Number(serde_json::Number),
        }
        let text = match Wire::deserialize(d)? {
            Wire::Text(s) => s,
            Wire::Number(n) => n.to_string(),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl Mul<u64> for Money {
    type Output = Money;
    fn mul(self, rhs: u64) -> Money {
        Money(self.0 * Ratio::from_integer(rhs as i128))
    }
}

impl Div<u64> for Money {
    type Output = Money;
    fn div(self, rhs: u64) -> Money {
        Money(self.0 / Ratio::from_integer(rhs as i128))
    }
}

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money(Ratio::zero()), |a, b| a + b)
    }
}
