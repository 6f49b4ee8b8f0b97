//! Exact numbers of the form `q·√d` with `q` rational and `d` a squarefree
//! positive integer.

use num_bigint::{BigInt, Sign};
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// Radicands above this bound are not factored.
const MAX_RADICAND_BITS: u64 = 40;
/// Coefficients larger than this are treated as inexact.
const MAX_COEFF_BITS: u64 = 8192;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Surd {
    coeff: BigRational,
    radicand: BigInt,
}

impl Surd {
    pub fn rational(coeff: BigRational) -> Self {
        Surd { coeff, radicand: BigInt::one() }
    }

    pub fn one() -> Self {
        Surd::rational(BigRational::one())
    }

    /// Builds `coeff·√radicand`, pulling square factors out of the radicand.
    /// Returns `None` for a negative radicand or one too large to factor.
    pub fn new(coeff: BigRational, radicand: BigInt) -> Option<Self> {
        if radicand.is_negative() {
            return None;
        }
        if radicand.is_zero() || coeff.is_zero() {
            return Some(Surd::rational(BigRational::zero()));
        }
        if radicand.bits() > MAX_RADICAND_BITS {
            return None;
        }
        let (outside, inside) = squarefree_split(&radicand);
        Some(Surd { coeff: coeff * BigRational::from_integer(outside), radicand: inside })
    }

    pub fn coeff(&self) -> &BigRational {
        &self.coeff
    }

    pub fn radicand(&self) -> &BigInt {
        &self.radicand
    }

    pub fn as_rational(&self) -> Option<&BigRational> {
        self.radicand.is_one().then_some(&self.coeff)
    }

    pub fn is_zero(&self) -> bool {
        self.coeff.is_zero()
    }

    pub fn is_negative(&self) -> bool {
        self.coeff.is_negative()
    }

    pub fn is_oversized(&self) -> bool {
        self.coeff.numer().bits() > MAX_COEFF_BITS || self.coeff.denom().bits() > MAX_COEFF_BITS
    }

    pub fn to_f64(&self) -> f64 {
        ratio_to_f64(&self.coeff) * self.radicand.to_f64().unwrap_or(f64::NAN).sqrt()
    }

    pub fn neg(self) -> Self {
        Surd { coeff: -self.coeff, radicand: self.radicand }
    }

    /// Sum stays exact only when both terms share a radicand (or one is zero).
    pub fn checked_add(&self, other: &Surd) -> Option<Surd> {
        if self.is_zero() {
            return Some(other.clone());
        }
        if other.is_zero() {
            return Some(self.clone());
        }
        if self.radicand != other.radicand {
            return None;
        }
        let coeff = &self.coeff + &other.coeff;
        if coeff.is_zero() {
            return Some(Surd::rational(coeff));
        }
        Some(Surd { coeff, radicand: self.radicand.clone() })
    }

    /// Product; falls back to `None` when the combined radicand cannot be
    /// factored.
    pub fn checked_mul(&self, other: &Surd) -> Option<Surd> {
        let coeff = &self.coeff * &other.coeff;
        Surd::new(coeff, &self.radicand * &other.radicand)
    }

    /// `a / b` for non-zero `b`: `(c1·√d1)/(c2·√d2) = c1/(c2·d2) · √(d1·d2)`.
    pub fn checked_div(&self, other: &Surd) -> Option<Surd> {
        if other.is_zero() {
            return None;
        }
        let coeff = &self.coeff / (&other.coeff * BigRational::from_integer(other.radicand.clone()));
        Surd::new(coeff, &self.radicand * &other.radicand)
    }

    /// Square root of a non-negative rational: `√(a/b) = √(a·b) / b`.
    pub fn sqrt(&self) -> Option<Surd> {
        let r = self.as_rational()?;
        if r.is_negative() {
            return None;
        }
        let denom = r.denom().clone();
        let inner = r.numer() * &denom;
        Surd::new(BigRational::new(BigInt::one(), denom), inner)
    }
}

/// Splits `n > 0` into `(s, d)` with `n = s²·d` and `d` squarefree.
pub fn squarefree_split(n: &BigInt) -> (BigInt, BigInt) {
    let n = n.to_u64().expect("radicand bounded by MAX_RADICAND_BITS");
    let (s, d) = squarefree_split_u64(n);
    (BigInt::from(s), BigInt::from(d))
}

pub fn squarefree_split_u64(n: u64) -> (u64, u64) {
    let mut rest = n;
    let mut outside = 1u64;
    let mut inside = 1u64;
    let mut p = 2u64;
    while p * p <= rest {
        let mut e = 0u32;
        while rest % p == 0 {
            rest /= p;
            e += 1;
        }
        if e > 0 {
            outside *= p.pow(e / 2);
            if e % 2 == 1 {
                inside *= p;
            }
        }
        p += if p == 2 { 1 } else { 2 };
    }
    (outside, inside * rest)
}

pub fn ratio_to_f64(r: &BigRational) -> f64 {
    if let (Some(n), Some(d)) = (r.numer().to_f64(), r.denom().to_f64()) {
        if n.is_finite() && d.is_finite() {
            return n / d;
        }
    }
    // scale both down to keep the quotient finite
    let shift = r.numer().bits().max(r.denom().bits()).saturating_sub(1000);
    let n = (r.numer() >> shift as usize).to_f64().unwrap_or(f64::NAN);
    let d = (r.denom() >> shift as usize).to_f64().unwrap_or(f64::NAN);
    if d == 0.0 {
        return if r.numer().sign() == Sign::Minus { f64::NEG_INFINITY } else { f64::INFINITY };
    }
    n / d
}

