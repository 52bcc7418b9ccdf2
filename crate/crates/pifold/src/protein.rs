//! Backbone protein records and the 20-letter residue alphabet.

use crate::error::{Error, Result};

/// Residue one-letter codes in index order; code `i` maps to `ALPHABET[i]`.
pub const ALPHABET: [u8; 20] = *b"ACDEFGHIKLMNPQRSTVWY";

pub fn code_of(letter: char) -> Option<u8> {
    ALPHABET.iter().position(|&c| c as char == letter).map(|i| i as u8)
}

pub fn letter_of(code: u8) -> char {
    ALPHABET[code as usize] as char
}

/// A named backbone: per-residue N/CA/C/O coordinates (Ångström), the native
/// sequence, and a validity mask. Masked residues have unusable coordinates
/// and are excluded from graphs, losses and metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Protein {
    pub name: String,
    pub n: Vec<[f64; 3]>,
    pub ca: Vec<[f64; 3]>,
    pub c: Vec<[f64; 3]>,
    pub o: Vec<[f64; 3]>,
    /// Residue codes in `[0, 19]`.
    pub seq: Vec<u8>,
    pub mask: Vec<bool>,
    /// Sorted indices of residues that start a new chain (index 0 is an
    /// implicit chain start and never listed).
    pub breaks: Vec<usize>,
}

impl Protein {
    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    /// Whether residues `i` and `i + 1` are covalently connected for the
    /// purpose of backbone angles: both valid and not separated by a chain
    /// break.
    pub fn bonded(&self, i: usize) -> bool {
        i + 1 < self.len()
            && self.mask[i]
            && self.mask[i + 1]
            && !self.breaks.contains(&(i + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.seq.len();
        if n == 0 {
            return Err(Error::Invalid("protein has zero residues".into()));
        }
        for (label, coords) in [
            ("N", &self.n),
            ("CA", &self.ca),
            ("C", &self.c),
            ("O", &self.o),
        ] {
            if coords.len() != n {
                return Err(Error::Invalid(format!(
                    "{}: {} atom rows for {} residues",
                    label,
                    coords.len(),
                    n
                )));
            }
        }
        if self.mask.len() != n {
            return Err(Error::Invalid("mask length mismatch".into()));
        }
        if let Some(&code) = self.seq.iter().find(|&&c| c >= 20) {
            return Err(Error::Invalid(format!("residue code {code} out of range")));
        }
        for &b in &self.breaks {
            if b == 0 || b >= n {
                return Err(Error::Invalid(format!("chain break index {b} out of range")));
            }
        }
        Ok(())
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Apply a rigid transform `x -> R x + t` to every atom.
    pub fn rigid_transform(&self, rot: &[[f64; 3]; 3], t: &[f64; 3]) -> Protein {
        let map = |coords: &[[f64; 3]]| {
            coords
                .iter()
                .map(|p| {
                    [
                        rot[0][0] * p[0] + rot[0][1] * p[1] + rot[0][2] * p[2] + t[0],
                        rot[1][0] * p[0] + rot[1][1] * p[1] + rot[1][2] * p[2] + t[1],
                        rot[2][0] * p[0] + rot[2][1] * p[1] + rot[2][2] * p[2] + t[2],
                    ]
                })
                .collect()
        };
        Protein {
            name: self.name.clone(),
            n: map(&self.n),
            ca: map(&self.ca),
            c: map(&self.c),
            o: map(&self.o),
            seq: self.seq.clone(),
            mask: self.mask.clone(),
            breaks: self.breaks.clone(),
        }
    }
}
