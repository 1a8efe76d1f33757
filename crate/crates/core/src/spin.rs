use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Occupation string in snake order: 0 = ground, 1 = Rydberg.
///
/// Basis index convention: snake site 0 is the least significant bit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpinConfiguration {
    bits: Vec<u8>,
}

impl SpinConfiguration {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::invalid(format!("occupation must be 0 or 1, got {b}")));
        }
        Ok(SpinConfiguration { bits })
    }

    pub fn zeros(n: usize) -> Self {
        SpinConfiguration { bits: vec![0; n] }
    }

    pub fn from_index(index: usize, n: usize) -> Self {
        SpinConfiguration {
            bits: (0..n).map(|i| ((index >> i) & 1) as u8).collect(),
        }
    }

    pub fn index(&self) -> usize {
        self.bits
            .iter()
            .enumerate()
            .fold(0usize, |acc, (i, &b)| acc | ((b as usize) << i))
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn flipped(&self, site: usize) -> Self {
        let mut bits = self.bits.clone();
        bits[site] ^= 1;
        SpinConfiguration { bits }
    }

    pub fn occupation(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }
}

impl fmt::Display for SpinConfiguration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b == 1 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for SpinConfiguration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .bytes()
            .map(|c| match c {
                b'0' => Ok(0),
                b'1' => Ok(1),
                other => Err(Error::invalid(format!(
                    "unexpected character {:?} in configuration",
                    other as char
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(SpinConfiguration { bits })
    }
}

/// All `2^n` configurations in basis-index order.
pub fn enumerate(n: usize) -> impl Iterator<Item = SpinConfiguration> {
    (0..1usize << n).map(move |i| SpinConfiguration::from_index(i, n))
}
