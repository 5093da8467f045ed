//! Per-phase quantities with explicit phase presence.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const PHASES: [char; 3] = ['a', 'b', 'c'];

/// Phase presence for phases a, b, c.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Mask(pub [bool; 3]);

impl Mask {
    pub const ABC: Mask = Mask([true; 3]);
    pub const NONE: Mask = Mask([false; 3]);

    pub fn single(phase: usize) -> Mask {
        let mut m = [false; 3];
        m[phase] = true;
        Mask(m)
    }

    pub fn has(&self, phase: usize) -> bool {
        self.0[phase]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Indices of the present phases in a, b, c order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..3).filter(move |&p| self.0[p])
    }

    pub fn and(self, other: Mask) -> Mask {
        Mask([self.0[0] && other.0[0], self.0[1] && other.0[1], self.0[2] && other.0[2]])
    }

    pub fn is_subset_of(&self, other: Mask) -> bool {
        (0..3).all(|p| !self.0[p] || other.0[p])
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{}", PHASES[p])?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Mask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut m = [false; 3];
        for ch in s.chars() {
            let p = PHASES.iter().position(|&c| c == ch).ok_or_else(|| format!("unknown phase {ch:?}"))?;
            if m[p] {
                return Err(format!("phase {ch} repeated"));
            }
            m[p] = true;
        }
        Ok(Mask(m))
    }
}

impl Serialize for Mask {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Three real per-phase values; absent phases hold exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseVector {
    values: [f64; 3],
    mask: Mask,
}

impl PhaseVector {
    pub fn new(values: [f64; 3], mask: Mask) -> Self {
        let mut v = values;
        for p in 0..3 {
            if !mask.0[p] {
                v[p] = 0.0;
            }
        }
        Self { values: v, mask }
    }

    pub fn zeros(mask: Mask) -> Self {
        Self { values: [0.0; 3], mask }
    }

    pub fn splat(x: f64, mask: Mask) -> Self {
        Self::new([x; 3], mask)
    }

    pub fn mask(&self) -> Mask {
        self.mask
    }

    pub fn values(&self) -> [f64; 3] {
        self.values
    }

    pub fn get(&self, phase: usize) -> f64 {
        self.values[phase]
    }

    /// Writes to a present phase; writes to absent phases are ignored.
    pub fn set(&mut self, phase: usize, x: f64) {
        if self.mask.0[phase] {
            self.values[phase] = x;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut v = self.values;
        for p in self.mask.iter() {
            v[p] = f(v[p]);
        }
        Self::new(v, self.mask)
    }

    fn zip(&self, o: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        let mask = self.mask.and(o.mask);
        let mut v = [0.0; 3];
        for p in mask.iter() {
            v[p] = f(self.values[p], o.values[p]);
        }
        Self { values: v, mask }
    }

    /// Elementwise product (⊙).
    pub fn hadamard(&self, o: &Self) -> Self {
        self.zip(o, |a, b| a * b)
    }

    /// Elementwise quotient (⊘) over present phases.
    pub fn divide(&self, o: &Self) -> Self {
        self.zip(o, |a, b| a / b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|x| x * k)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn min(&self) -> Option<f64> {
        self.mask.iter().map(|p| self.values[p]).reduce(f64::min)
    }

    pub fn max(&self) -> Option<f64> {
        self.mask.iter().map(|p| self.values[p]).reduce(f64::max)
    }
}

impl Add for PhaseVector {
    type Output = PhaseVector;
    fn add(self, o: Self) -> Self {
        self.zip(&o, |a, b| a + b)
    }
}

impl Sub for PhaseVector {
    type Output = PhaseVector;
    fn sub(self, o: Self) -> Self {
        self.zip(&o, |a, b| a - b)
    }
}

impl Neg for PhaseVector {
    type Output = PhaseVector;
    fn neg(self) -> Self {
        self.map(|x| -x)
    }
}

impl Mul<f64> for PhaseVector {
    type Output = PhaseVector;
    fn mul(self, k: f64) -> Self {
        self.scale(k)
    }
}

// Files store only present phases: `{ a = 0.1, c = 0.2 }`.
#[derive(Serialize, Deserialize)]
struct PhaseRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c: Option<f64>,
}

impl Serialize for PhaseVector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let g = |p: usize| self.mask.0[p].then_some(self.values[p]);
        PhaseRecord { a: g(0), b: g(1), c: g(2) }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for PhaseVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = PhaseRecord::deserialize(d)?;
        let vals = [r.a, r.b, r.c];
        let mask = Mask([vals[0].is_some(), vals[1].is_some(), vals[2].is_some()]);
        Ok(PhaseVector::new(vals.map(|v| v.unwrap_or(0.0)), mask))
    }
}

/// 3×3 complex block (impedance) with rows and columns of absent phases
/// held at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseMatrix {
    m: [[Complex64; 3]; 3],
    mask: Mask,
}

impl PhaseMatrix {
    pub fn new(m: [[Complex64; 3]; 3], mask: Mask) -> Self {
        let mut out = m;
        for i in 0..3 {
            for j in 0..3 {
                if !mask.0[i] || !mask.0[j] {
                    out[i][j] = Complex64::new(0.0, 0.0);
                }
            }
        }
        Self { m: out, mask }
    }

    /// Self impedance `zs` on the diagonal and mutual `zm` elsewhere.
    pub fn symmetric(zs: Complex64, zm: Complex64, mask: Mask) -> Self {
        let mut m = [[zm; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = zs;
        }
        Self::new(m, mask)
    }

    pub fn mask(&self) -> Mask {
        self.mask
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.m[i][j]
    }

    pub fn raw(&self) -> [[Complex64; 3]; 3] {
        self.m
    }

    pub fn scale(&self, k: f64) -> Self {
        Self::new(self.m.map(|r| r.map(|z| z * k)), self.mask)
    }

    pub fn mul_vec(&self, v: &[Complex64; 3]) -> [Complex64; 3] {
        let mut out = [Complex64::new(0.0, 0.0); 3];
        for i in self.mask.iter() {
            for j in self.mask.iter() {
                out[i] += self.m[i][j] * v[j];
            }
        }
        out
    }

    /// True if any entry outside the mask is nonzero (only possible for
    /// matrices built through deserialization bypasses).
    pub fn leaks_outside_mask(&self) -> bool {
        (0..3).any(|i| (0..3).any(|j| (!self.mask.0[i] || !self.mask.0[j]) && self.m[i][j].norm() != 0.0))
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    phases: Mask,
    r: [[f64; 3]; 3],
    x: [[f64; 3]; 3],
}

impl Serialize for PhaseMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        MatrixRecord { phases: self.mask, r: self.m.map(|r| r.map(|z| z.re)), x: self.m.map(|r| r.map(|z| z.im)) }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PhaseMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = MatrixRecord::deserialize(d)?;
        let mut m = [[Complex64::new(0.0, 0.0); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = Complex64::new(rec.r[i][j], rec.x[i][j]);
            }
        }
        // keep the raw entries so validation can flag leaks
        Ok(PhaseMatrix { m, mask: rec.phases })
    }
}
