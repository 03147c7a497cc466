//! Contract and market primitives of the two-class bonus-malus model.
//!
//! A policyholder in class 1 who reports a claim moves to class 2 with its
//! clock reset to zero. A policyholder in class 2 returns to class 1 after
//! spending `reset_time` in class 2 without reporting. Premiums depend on the
//! class and on the clock; wealth grows at `income - premium` and drops by the
//! retained part of every reported claim or by the full size of every
//! unreported one.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Insurance class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    One,
    Two,
}

impl Class {
    pub const ALL: [Class; 2] = [Class::One, Class::Two];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Class::One => 0,
            Class::Two => 1,
        }
    }

    /// Class label as used in the model (1 or 2).
    #[inline]
    pub fn number(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Class::One),
            2 => Ok(Class::Two),
            _ => Err(Error::domain("class", format!("class must be 1 or 2, got {n}"))),
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Claim size distribution. Only laws with a continuous distribution function
/// and `F(0) = 0` are admissible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClaimLaw<T> {
    Exponential { mean: T },
}

impl<T: Scalar> ClaimLaw<T> {
    pub fn exponential(mean: T) -> Self {
        ClaimLaw::Exponential { mean }
    }

    pub fn mean(&self) -> T {
        match *self {
            ClaimLaw::Exponential { mean } => mean,
        }
    }

    pub fn second_moment(&self) -> T {
        match *self {
            ClaimLaw::Exponential { mean } => T::of(2.0) * mean * mean,
        }
    }

    /// Distribution function; zero for negative arguments.
    pub fn cdf(&self, y: T) -> T {
        if y <= T::zero() {
            return T::zero();
        }
        match *self {
            ClaimLaw::Exponential { mean } => -(-y / mean).exp_m1(),
        }
    }

    /// `1 - F(y)`, computed without cancellation. Infinite `y` gives zero.
    pub fn survival(&self, y: T) -> T {
        if y <= T::zero() {
            return T::one();
        }
        match *self {
            ClaimLaw::Exponential { mean } => (-y / mean).exp(),
        }
    }

    pub fn density(&self, y: T) -> T {
        if y < T::zero() {
            return T::zero();
        }
        match *self {
            ClaimLaw::Exponential { mean } => (-y / mean).exp() / mean,
        }
    }

    /// Inverse distribution function on `[0, 1)`.
    pub fn quantile(&self, p: T) -> T {
        match *self {
            ClaimLaw::Exponential { mean } => -mean * (-p).ln_1p(),
        }
    }

    /// Smallest `y` with `1 - F(y) <= eps`.
    pub fn tail_point(&self, eps: T) -> T {
        match *self {
            ClaimLaw::Exponential { mean } => -mean * eps.ln(),
        }
    }

    /// `∫_b^∞ min(y, m) dF(y)`, the expected retained amount of claims above `b`.
    pub fn retention_tail(&self, b: T, m: T) -> T {
        let b = b.max(T::zero());
        if b >= m {
            return m * self.survival(b);
        }
        match *self {
            ClaimLaw::Exponential { mean } => {
                // ∫_b^m y f(y) dy = (b + μ) e^{-b/μ} - (m + μ) e^{-m/μ}
                (b + mean) * self.survival(b) - (m + mean) * self.survival(m)
                    + m * self.survival(m)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            ClaimLaw::Exponential { mean } => {
                if !(mean > T::zero()) || !mean.is_finite() {
                    return Err(Error::InvalidParams(format!(
                        "claim mean must be positive and finite, got {mean}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Premium rate as a function of the clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PremiumSpec<T> {
    /// `intercept + slope * s`
    Affine { intercept: T, slope: T },
    Constant { rate: T },
}

impl<T: Scalar> PremiumSpec<T> {
    #[inline]
    pub fn rate(&self, s: T) -> T {
        match *self {
            PremiumSpec::Affine { intercept, slope } => intercept + slope * s,
            PremiumSpec::Constant { rate } => rate,
        }
    }

    /// `∫_a^b π(u) du`
    #[inline]
    pub fn integral(&self, a: T, b: T) -> T {
        self.integral_over(a, b - a)
    }

    /// `∫_s^{s+d} π(u) du`
    #[inline]
    pub fn integral_over(&self, s: T, d: T) -> T {
        match *self {
            PremiumSpec::Affine { intercept, slope } => (intercept + slope * (s + T::of(0.5) * d)) * d,
            PremiumSpec::Constant { rate } => rate * d,
        }
    }

    /// `(min, max)` of the rate over `[lo, hi]`.
    pub fn range_on(&self, lo: T, hi: T) -> (T, T) {
        let (a, b) = (self.rate(lo), self.rate(hi));
        (a.min(b), a.max(b))
    }
}

/// Terminal utility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UtilitySpec<T> {
    /// `max(floor, -exp(-gamma * x))`
    CappedExponential { gamma: T, floor: T },
}

impl<T: Scalar> UtilitySpec<T> {
    pub fn capped_exponential(gamma: T, floor: T) -> Self {
        UtilitySpec::CappedExponential { gamma, floor }
    }

    #[inline]
    pub fn eval(&self, x: T) -> T {
        match *self {
            UtilitySpec::CappedExponential { gamma, floor } => {
                let exponent = -gamma * x;
                // compare in log space so exp never overflows
                if exponent >= (-floor).ln() {
                    floor
                } else {
                    floor.max(-exponent.exp())
                }
            }
        }
    }

    /// Wealth below which the cap is active.
    pub fn saturation_point(&self) -> T {
        match *self {
            UtilitySpec::CappedExponential { gamma, floor } => -(-floor).ln() / gamma,
        }
    }

    /// Lipschitz constant on `[lo, hi]`.
    pub fn lipschitz_on(&self, lo: T, hi: T) -> T {
        match *self {
            UtilitySpec::CappedExponential { gamma, .. } => {
                let from = lo.max(self.saturation_point()).min(hi);
                gamma * (-gamma * from).exp()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            UtilitySpec::CappedExponential { gamma, floor } => {
                if !(gamma > T::zero()) || !gamma.is_finite() {
                    return Err(Error::InvalidParams(format!(
                        "risk aversion gamma must be positive, got {gamma}"
                    )));
                }
                if !(floor < -T::one()) || !floor.is_finite() {
                    return Err(Error::InvalidParams(format!(
                        "utility floor must be finite and below -1, got {floor}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Non-fatal findings of [`ModelParams::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Warning {
    /// Some class-2 premium is not above some class-1 premium.
    PremiumOrdering { max_class1: f64, min_class2: f64 },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::PremiumOrdering {
                max_class1,
                min_class2,
            } => write!(
                f,
                "class-2 premium ({min_class2}) is not above the class-1 premium ({max_class1}) everywhere"
            ),
        }
    }
}

/// All constants of the model.
///
/// Fields are public so that diagnostic set-ups (for example zero claim
/// intensity) can be built; [`ModelParams::validate`] enforces the invariants
/// of an actual contract and is called on every configuration load.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// Contract maturity `T`.
    pub horizon: T,
    /// Claim-free time in class 2 needed to return to class 1.
    pub reset_time: T,
    /// Claim arrival rate.
    pub intensity: T,
    pub claim_law: ClaimLaw<T>,
    /// Deductibles `m_1`, `m_2`.
    pub deductibles: [T; 2],
    pub premiums: [PremiumSpec<T>; 2],
    /// Income rate `c`.
    pub income: T,
    pub utility: UtilitySpec<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Parameters of the reference experiment: `T = 5`, reset after 2 years,
    /// unit intensity, exponential claims with mean 1, no deductibles,
    /// `π1(s) = 1 - 7s/(10T)`, `π2 = 1.1`, `c = 1.2`, `γ = 0.5`, floor `-1e10`.
    pub fn table1() -> Self {
        let horizon = T::of(5.0);
        ModelParams {
            horizon,
            reset_time: T::of(2.0),
            intensity: T::one(),
            claim_law: ClaimLaw::exponential(T::one()),
            deductibles: [T::zero(), T::zero()],
            premiums: [
                PremiumSpec::Affine {
                    intercept: T::one(),
                    slope: T::of(-7.0) / (T::of(10.0) * horizon),
                },
                PremiumSpec::Constant { rate: T::of(1.1) },
            ],
            income: T::of(1.2),
            utility: UtilitySpec::capped_exponential(T::of(0.5), T::of(-1e10)),
        }
    }

    /// Clock range of a class: `[0, T]` for class 1, `[0, reset_time]` for class 2.
    #[inline]
    pub fn clock_limit(&self, class: Class) -> T {
        match class {
            Class::One => self.horizon,
            Class::Two => self.reset_time,
        }
    }

    fn slack(&self) -> T {
        T::tol(1e-9) * self.horizon.max(T::one())
    }

    /// Check every hard invariant; returns soft warnings.
    pub fn validate(&self) -> Result<Vec<Warning>> {
        let t = self.horizon;
        if !(t > T::zero()) || !t.is_finite() {
            return Err(Error::InvalidParams(format!("horizon T must be positive, got {t}")));
        }
        if !(self.reset_time > T::zero()) || self.reset_time > t {
            return Err(Error::InvalidParams(format!(
                "reset time S must satisfy 0 < S <= T, got S = {}, T = {t}",
                self.reset_time
            )));
        }
        if !(self.intensity > T::zero()) || !self.intensity.is_finite() {
            return Err(Error::InvalidParams(format!(
                "claim intensity lambda must be positive, got {}",
                self.intensity
            )));
        }
        self.claim_law.validate()?;
        self.utility.validate()?;
        for (k, m) in self.deductibles.iter().enumerate() {
            if !(*m >= T::zero()) || !m.is_finite() {
                return Err(Error::InvalidParams(format!(
                    "deductible m{} must be finite and >= 0, got {m}",
                    k + 1
                )));
            }
        }
        for class in Class::ALL {
            let spec = self.premiums[class.index()];
            let (lo, hi) = spec.range_on(T::zero(), self.clock_limit(class));
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidParams(format!("premium of class {class} is not finite")));
            }
            if !(self.income > hi) {
                return Err(Error::InvalidParams(format!(
                    "income rate c = {} must exceed the class-{class} premium (max {hi})",
                    self.income
                )));
            }
        }
        let mut warnings = Vec::new();
        let (_, max1) = self.premiums[0].range_on(T::zero(), t);
        let (min2, _) = self.premiums[1].range_on(T::zero(), self.reset_time);
        if !(min2 > max1) {
            warnings.push(Warning::PremiumOrdering {
                max_class1: max1.as_f64(),
                min_class2: min2.as_f64(),
            });
        }
        Ok(warnings)
    }

    /// Largest drift `c - π_i(s)` over both classes and their clock ranges.
    pub fn max_drift_rate(&self) -> T {
        Class::ALL
            .iter()
            .map(|&c| {
                let (lo, _) = self.premiums[c.index()].range_on(T::zero(), self.clock_limit(c));
                self.income - lo
            })
            .fold(T::zero(), T::max)
    }

    /// Part of a reported claim paid by the policyholder, `min(y, m)`.
    pub fn retention(y: T, m: T) -> Result<T> {
        if !(y >= T::zero()) || !(m >= T::zero()) {
            return Err(Error::domain(
                "retention",
                format!("claim size and deductible must be >= 0, got y = {y}, m = {m}"),
            ));
        }
        Ok(y.min(m))
    }

    #[inline]
    pub fn deductible(&self, class: Class) -> T {
        self.deductibles[class.index()]
    }

    /// Premium rate of `class` at clock `s`.
    pub fn premium(&self, class: Class, s: T) -> Result<T> {
        if !(s >= -self.slack()) || s > self.horizon + self.slack() {
            return Err(Error::domain(
                "premium",
                format!("clock s = {s} outside [0, {}]", self.horizon),
            ));
        }
        Ok(self.premiums[class.index()].rate(s))
    }

    /// Wealth gained over a claim-free stretch: `∫_s^{s+delta} (c - π_i(u)) du`.
    pub fn drift_integral(&self, class: Class, s: T, delta: T) -> Result<T> {
        let limit = self.clock_limit(class);
        if !(s >= -self.slack()) || !(delta >= T::zero()) || s + delta > limit + self.slack() {
            return Err(Error::domain(
                "drift_integral",
                format!("interval [{s}, {s} + {delta}] outside the class-{class} clock range [0, {limit}]"),
            ));
        }
        Ok(self.drift_integral_unchecked(class, s, delta))
    }

    #[inline]
    pub(crate) fn drift_integral_unchecked(&self, class: Class, s: T, delta: T) -> T {
        self.income * delta - self.premiums[class.index()].integral_over(s, delta)
    }

    #[inline]
    pub fn utility(&self, x: T) -> T {
        self.utility.eval(x)
    }

    pub fn claim_cdf(&self, y: T) -> Result<T> {
        if !(y >= T::zero()) {
            return Err(Error::domain("claim_cdf", format!("claim size must be >= 0, got {y}")));
        }
        Ok(self.claim_law.cdf(y))
    }

    /// Whether `(t, s)` lies in the domain of `class`.
    pub fn in_domain(&self, class: Class, t: T, s: T) -> bool {
        let eps = self.slack();
        let ok = s >= -eps && s <= t + eps && t >= -eps && t <= self.horizon + eps;
        match class {
            Class::One => ok,
            Class::Two => ok && s <= self.reset_time + eps,
        }
    }

    /// Value of terminal utility restricted to paths without any jump in
    /// `(t, T]`, counting the class-2 to class-1 transition as a jump.
    pub fn v0(&self, class: Class, t: T, s: T, x: T) -> Result<T> {
        if !self.in_domain(class, t, s) {
            return Err(Error::domain(
                "v0",
                format!("(t, s) = ({t}, {s}) outside the class-{class} domain"),
            ));
        }
        let remaining = (self.horizon - t).max(T::zero());
        if remaining <= self.slack() {
            return Ok(self.utility(x));
        }
        if class == Class::Two && s + remaining >= self.reset_time - self.slack() {
            return Ok(T::zero());
        }
        let gain = self.drift_integral_unchecked(class, s, remaining);
        Ok(self.utility(x + gain) * (-self.intensity * remaining).exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p() -> ModelParams<f64> {
        ModelParams::table1()
    }

    #[test]
    fn retention_examples() {
        assert_eq!(ModelParams::retention(0.5, 1.0).unwrap(), 0.5);
        assert_eq!(ModelParams::retention(2.0, 1.5).unwrap(), 1.5);
        assert_eq!(ModelParams::retention(3.0, 0.0).unwrap(), 0.0);
        assert!(ModelParams::retention(-1.0, 0.0).is_err());
        assert!(ModelParams::retention(1.0, -0.5).is_err());
    }

    #[test]
    fn premium_examples() {
        let p = p();
        assert_eq!(p.premium(Class::One, 0.0).unwrap(), 1.0);
        assert_relative_eq!(p.premium(Class::One, 5.0).unwrap(), 0.3, epsilon = 1e-15);
        assert_eq!(p.premium(Class::Two, 1.3).unwrap(), 1.1);
        assert!(p.premium(Class::One, 5.5).is_err());
        assert!(p.premium(Class::Two, -0.1).is_err());
    }

    #[test]
    fn drift_integral_examples() {
        let p = p();
        assert_relative_eq!(p.drift_integral(Class::One, 0.0, 1.0).unwrap(), 0.27, epsilon = 1e-14);
        assert_relative_eq!(p.drift_integral(Class::Two, 0.0, 2.0).unwrap(), 0.2, epsilon = 1e-14);
        assert_eq!(p.drift_integral(Class::One, 1.7, 0.0).unwrap(), 0.0);
        assert_relative_eq!(p.drift_integral(Class::One, 0.0, 5.0).unwrap(), 2.75, epsilon = 1e-14);
        assert!(p.drift_integral(Class::Two, 1.5, 1.0).is_err());
    }

    #[test]
    fn utility_examples() {
        let p = p();
        assert_eq!(p.utility(0.0), -1.0);
        assert_relative_eq!(p.utility(5.0), -0.082_084_998_623_898_8, epsilon = 1e-15);
        assert_eq!(p.utility(-100.0), -1e10);
        assert_eq!(p.utility(-1e300), -1e10);
        assert!(p.utility(f64::MAX) <= 0.0);
    }

    #[test]
    fn claim_cdf_examples() {
        let p = p();
        assert_eq!(p.claim_cdf(0.0).unwrap(), 0.0);
        assert_relative_eq!(p.claim_cdf(1.0).unwrap(), 0.632_120_558_828_557_7, epsilon = 1e-15);
        assert!(1.0 - p.claim_cdf(28.0).unwrap() < 1e-12);
        assert!(p.claim_cdf(-0.1).is_err());
    }

    #[test]
    fn claim_law_moments_and_quantile() {
        let law = ClaimLaw::exponential(2.0f64);
        assert_eq!(law.mean(), 2.0);
        assert_eq!(law.second_moment(), 8.0);
        for &q in &[0.0, 0.1, 0.5, 0.999] {
            assert_relative_eq!(law.cdf(law.quantile(q)), q, epsilon = 1e-14);
        }
        assert!(law.survival(law.tail_point(1e-8)) <= 1e-8 * (1.0 + 1e-12));
    }

    #[test]
    fn retention_tail_matches_quadrature() {
        let law = ClaimLaw::exponential(1.3f64);
        for &(b, m) in &[(0.0, 0.0), (0.0, 0.7), (0.4, 0.7), (1.2, 0.7), (0.0, 50.0)] {
            // midpoint rule on [b, 60]
            let n = 200_000;
            let hi = 60.0;
            let h = (hi - b) / n as f64;
            let mut acc = 0.0;
            for k in 0..n {
                let y = b + (k as f64 + 0.5) * h;
                acc += y.min(m) * law.density(y) * h;
            }
            assert_relative_eq!(law.retention_tail(b, m), acc, epsilon = 1e-8);
        }
    }

    #[test]
    fn v0_examples() {
        let p = p();
        for &s in &[0.0, 1.0, 5.0] {
            assert_eq!(p.v0(Class::One, 5.0, s, 0.7).unwrap(), p.utility(0.7));
        }
        assert_eq!(p.v0(Class::Two, 0.0, 0.0, 1.0).unwrap(), 0.0);
        let expected = -(-0.135f64).exp() * (-1.0f64).exp();
        assert_relative_eq!(p.v0(Class::One, 4.0, 0.0, 0.0).unwrap(), expected, epsilon = 1e-14);
        assert_relative_eq!(expected, -0.321_422_1, epsilon = 1e-7);
        // class 2 terminal, including the clock at the reset boundary
        assert_eq!(p.v0(Class::Two, 5.0, 2.0, 3.0).unwrap(), p.utility(3.0));
        // class 2 that cannot reach the reset before maturity
        let v = p.v0(Class::Two, 4.0, 0.5, 1.0).unwrap();
        assert_relative_eq!(v, p.utility(1.1) * (-1.0f64).exp(), epsilon = 1e-14);
        assert!(p.v0(Class::Two, 4.0, 2.5, 1.0).is_err());
        assert!(p.v0(Class::One, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn table1_validates_without_warnings() {
        assert!(p().validate().unwrap().is_empty());
        let mut q = p();
        q.income = 1.05;
        assert!(matches!(q.validate(), Err(Error::InvalidParams(_))));
        let mut q = p();
        q.reset_time = 6.0;
        assert!(q.validate().is_err());
        let mut q = p();
        q.intensity = 0.0;
        assert!(q.validate().is_err());
        let mut q = p();
        q.premiums[1] = PremiumSpec::Constant { rate: 0.9 };
        let w = q.validate().unwrap();
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn max_drift_rate_table1() {
        assert_relative_eq!(p().max_drift_rate(), 0.9, epsilon = 1e-15);
    }

    #[test]
    fn f32_evaluations_agree() {
        let p32 = ModelParams::<f32>::table1();
        assert!((p32.drift_integral(Class::One, 0.0, 1.0).unwrap() - 0.27).abs() < 1e-6);
        assert!((p32.utility(5.0) + 0.082085).abs() < 1e-6);
    }

    #[test]
    fn claim_cdf_ladder_is_monotone() {
        let p = p();
        let mut prev = 0.0;
        for k in 0..10_000 {
            let y = k as f64 * 3e-3;
            let f = p.claim_cdf(y).unwrap();
            assert!(f >= prev);
            // right continuity: tiny step to the right changes little
            assert!(p.claim_cdf(y + 1e-12).unwrap() - f < 1e-11);
            prev = f;
        }
    }

    proptest! {
        #[test]
        fn retention_bounded(y in 0.0f64..100.0, m in 0.0f64..100.0) {
            let r = ModelParams::retention(y, m).unwrap();
            prop_assert!(r <= y && r <= m && r >= 0.0);
        }

        #[test]
        fn drift_flow_additivity(class2 in any::<bool>(), s in 0.0f64..1.0, a in 0.0f64..0.5, b in 0.0f64..0.5) {
            let p = p();
            let class = if class2 { Class::Two } else { Class::One };
            let whole = p.drift_integral(class, s, a + b).unwrap();
            let split = p.drift_integral(class, s, a).unwrap() + p.drift_integral(class, s + a, b).unwrap();
            prop_assert!((whole - split).abs() <= 1e-12 * whole.abs().max(1e-300) + 1e-15);
        }

        #[test]
        fn drift_positive(class2 in any::<bool>(), s in 0.0f64..1.0, d in 1e-6f64..1.0) {
            let class = if class2 { Class::Two } else { Class::One };
            prop_assert!(p().drift_integral(class, s, d).unwrap() > 0.0);
        }

        #[test]
        fn utility_nondecreasing(x1 in -200.0f64..50.0, dx in 0.0f64..50.0) {
            let p = p();
            prop_assert!(p.utility(x1) <= p.utility(x1 + dx));
            prop_assert!(p.utility(x1) <= 0.0);
        }

        #[test]
        fn v0_nondecreasing_in_x(class2 in any::<bool>(), t in 0.0f64..5.0, frac in 0.0f64..1.0, x in -10.0f64..10.0, dx in 0.0f64..3.0) {
            let p = p();
            let class = if class2 { Class::Two } else { Class::One };
            let s = frac * t.min(p.clock_limit(class));
            prop_assert!(p.v0(class, t, s, x).unwrap() <= p.v0(class, t, s, x + dx).unwrap());
        }
    }
}
