//! Dispersion-model families and link functions.
//!
//! Every family is written in dispersion form
//! `f(y; µ, λ) = a(y; λ) exp{-d(y, µ) / (2λ)}` where `d` is the unit deviance
//! and `λ` the dispersion parameter (the conditional variance is `λ V(µ)`).
//!
//! Observations may carry a prior weight `w` (the trial count for binomial
//! responses, 1 otherwise). A weighted observation contributes `w d(y, µ)` to
//! the deviance and has effective dispersion `λ / w`. Binomial responses are
//! held on the proportion scale `y = successes / trials`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

const INTEGER_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Normal,
    Poisson,
    Binomial,
    Gamma,
    InverseGaussian,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Normal,
        Family::Poisson,
        Family::Binomial,
        Family::Gamma,
        Family::InverseGaussian,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Family::Normal => "normal",
            Family::Poisson => "poisson",
            Family::Binomial => "binomial",
            Family::Gamma => "gamma",
            Family::InverseGaussian => "inverse_gaussian",
        }
    }

    /// Poisson and binomial responses have λ = 1 exactly.
    pub fn dispersion_fixed(self) -> bool {
        matches!(self, Family::Poisson | Family::Binomial)
    }

    pub fn canonical_link(self) -> Link {
        match self {
            Family::Normal => Link::Identity,
            Family::Poisson => Link::Log,
            Family::Binomial => Link::Logit,
            Family::Gamma => Link::Inverse,
            Family::InverseGaussian => Link::Log,
        }
    }

    /// Whether `mu` lies in the mean space 𝒰.
    pub fn in_mean_space(self, mu: f64) -> bool {
        if !mu.is_finite() {
            return false;
        }
        match self {
            Family::Normal => true,
            Family::Poisson | Family::Gamma | Family::InverseGaussian => mu > 0.0,
            Family::Binomial => mu > 0.0 && mu < 1.0,
        }
    }

    /// Whether `y` lies in the support for an observation with prior weight `weight`.
    pub fn in_support(self, y: f64, weight: f64) -> bool {
        if !y.is_finite() {
            return false;
        }
        match self {
            Family::Normal => true,
            Family::Poisson => y >= 0.0 && is_integer(y * weight),
            Family::Binomial => (0.0..=1.0).contains(&y) && is_integer(y * weight),
            Family::Gamma | Family::InverseGaussian => y > 0.0,
        }
    }

    fn check(self, y: f64, mu: f64) -> Result<()> {
        if !self.in_deviance_domain(y) {
            return Err(Error::domain(format!("y = {y} outside the {} support", self.id())));
        }
        if !self.in_mean_space(mu) {
            return Err(Error::domain(format!("mu = {mu} outside the {} mean space", self.id())));
        }
        Ok(())
    }

    // Deviances are defined for fractional counts and proportions; only the
    // density needs the lattice.
    fn in_deviance_domain(self, y: f64) -> bool {
        match self {
            Family::Poisson => y.is_finite() && y >= 0.0,
            Family::Binomial => (0.0..=1.0).contains(&y),
            _ => self.in_support(y, 1.0),
        }
    }

    /// Unit deviance d(y, µ).
    pub fn unit_deviance(self, y: f64, mu: f64) -> Result<f64> {
        self.check(y, mu)?;
        Ok(self.deviance_raw(y, mu))
    }

    /// ∂d(y, µ)/∂µ in closed form.
    pub fn deviance_dmu(self, y: f64, mu: f64) -> Result<f64> {
        self.check(y, mu)?;
        Ok(self.dmu_raw(y, mu))
    }

    /// ∂²d(y, µ)/∂µ² in closed form.
    pub fn deviance_d2mu(self, y: f64, mu: f64) -> Result<f64> {
        self.check(y, mu)?;
        Ok(self.d2mu_raw(y, mu))
    }

    /// V(µ) = 2 / {∂²d(µ, µ)/∂µ²}.
    pub fn variance_function(self, mu: f64) -> Result<f64> {
        if !self.in_mean_space(mu) {
            return Err(Error::domain(format!("mu = {mu} outside the {} mean space", self.id())));
        }
        Ok(self.variance_raw(mu))
    }

    /// log a(y; λ/w) - w d(y, µ) / (2λ).
    pub fn log_density(self, y: f64, mu: f64, lambda: f64, weight: f64) -> Result<f64> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::domain(format!("dispersion must be positive, got {lambda}")));
        }
        if !(weight > 0.0) {
            return Err(Error::domain(format!("prior weight must be positive, got {weight}")));
        }
        if !self.in_support(y, weight) {
            return Err(Error::domain(format!("y = {y} outside the {} support", self.id())));
        }
        if !self.in_mean_space(mu) {
            return Err(Error::domain(format!("mu = {mu} outside the {} mean space", self.id())));
        }
        let lambda = if self.dispersion_fixed() { 1.0 } else { lambda };
        Ok(self.log_normalizer(y, lambda, weight) - weight * self.deviance_raw(y, mu) / (2.0 * lambda))
    }

    /// log a(y; λ/w), chosen so that the dispersion form reproduces the exact density.
    pub fn log_normalizer(self, y: f64, lambda: f64, weight: f64) -> f64 {
        let phi = lambda / weight;
        match self {
            Family::Normal => -0.5 * (2.0 * PI * phi).ln(),
            Family::Poisson => {
                // s ~ Poisson(w µ) with s = w y.
                let s = weight * y;
                xlogy(s, s) - s - ln_gamma(s + 1.0)
            }
            Family::Binomial => {
                let m = weight;
                let s = m * y;
                ln_gamma(m + 1.0) - ln_gamma(s + 1.0) - ln_gamma(m - s + 1.0)
                    + xlogy(s, y)
                    + xlogy(m - s, 1.0 - y)
            }
            Family::Gamma => {
                let shape = 1.0 / phi;
                shape * shape.ln() - ln_gamma(shape) - y.ln() - shape
            }
            Family::InverseGaussian => -0.5 * (2.0 * PI * phi * y.powi(3)).ln(),
        }
    }

    /// Derivative of [`Family::log_normalizer`] with respect to ln λ.
    pub(crate) fn log_normalizer_dlog_lambda(self, lambda: f64, weight: f64) -> f64 {
        match self {
            Family::Normal | Family::InverseGaussian => -0.5,
            Family::Poisson | Family::Binomial => 0.0,
            Family::Gamma => {
                let shape = weight / lambda;
                -shape * (shape.ln() - digamma(shape))
            }
        }
    }

    pub(crate) fn deviance_raw(self, y: f64, mu: f64) -> f64 {
        match self {
            Family::Normal => (y - mu) * (y - mu),
            Family::Poisson => 2.0 * (xlogy(y, y / mu) - (y - mu)),
            Family::Binomial => 2.0 * (xlogy(y, y / mu) + xlogy(1.0 - y, (1.0 - y) / (1.0 - mu))),
            Family::Gamma => 2.0 * (-(y / mu).ln() + (y - mu) / mu),
            Family::InverseGaussian => (y - mu) * (y - mu) / (y * mu * mu),
        }
    }

    pub(crate) fn dmu_raw(self, y: f64, mu: f64) -> f64 {
        -2.0 * (y - mu) / self.variance_raw(mu)
    }

    pub(crate) fn d2mu_raw(self, y: f64, mu: f64) -> f64 {
        match self {
            Family::Normal => 2.0,
            Family::Poisson => 2.0 * y / (mu * mu),
            Family::Binomial => 2.0 * (y / (mu * mu) + (1.0 - y) / ((1.0 - mu) * (1.0 - mu))),
            Family::Gamma => 2.0 * (2.0 * y / mu.powi(3) - 1.0 / (mu * mu)),
            Family::InverseGaussian => 6.0 * y / mu.powi(4) - 4.0 / mu.powi(3),
        }
    }

    pub(crate) fn variance_raw(self, mu: f64) -> f64 {
        match self {
            Family::Normal => 1.0,
            Family::Poisson => mu,
            Family::Binomial => mu * (1.0 - mu),
            Family::Gamma => mu * mu,
            Family::InverseGaussian => mu * mu * mu,
        }
    }

    /// Draw a response with mean `mu`, dispersion `lambda` and prior weight `weight`.
    pub fn sample<R: Rng + ?Sized>(self, mu: f64, lambda: f64, weight: f64, rng: &mut R) -> Result<f64> {
        if !self.in_mean_space(mu) {
            return Err(Error::domain(format!("cannot sample {} with mean {mu}", self.id())));
        }
        let phi = lambda / weight;
        let y = match self {
            Family::Normal => {
                let z: f64 = StandardNormal.sample(rng);
                mu + phi.sqrt() * z
            }
            Family::Poisson => {
                let rate = weight * mu;
                let d = rand_distr::Poisson::new(rate).map_err(|e| Error::domain(e.to_string()))?;
                let s: f64 = d.sample(rng);
                s / weight
            }
            Family::Binomial => {
                let m = weight.round() as u64;
                let d = rand_distr::Binomial::new(m, mu).map_err(|e| Error::domain(e.to_string()))?;
                d.sample(rng) as f64 / weight
            }
            Family::Gamma => {
                let shape = 1.0 / phi;
                let d = rand_distr::Gamma::new(shape, mu / shape).map_err(|e| Error::domain(e.to_string()))?;
                d.sample(rng)
            }
            Family::InverseGaussian => {
                let d = rand_distr::InverseGaussian::new(mu, 1.0 / phi)
                    .map_err(|e| Error::domain(e.to_string()))?;
                d.sample(rng)
            }
        };
        Ok(y)
    }

    pub fn supports_link(self, link: Link) -> bool {
        match link {
            Link::Logit => self == Family::Binomial,
            Link::Sqrt => matches!(self, Family::Poisson | Family::Gamma | Family::InverseGaussian),
            Link::Identity | Link::Log => true,
            Link::Inverse => self != Family::Binomial,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.id() == s)
            .ok_or_else(|| Error::config(format!("unknown family '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Log,
    Logit,
    Inverse,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkMode {
    Apply,
    Invert,
    Derivative,
}

impl Link {
    pub const ALL: [Link; 5] = [Link::Identity, Link::Log, Link::Logit, Link::Inverse, Link::Sqrt];

    pub fn id(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
            Link::Logit => "logit",
            Link::Inverse => "inverse",
            Link::Sqrt => "sqrt",
        }
    }

    /// Domain of g on the mean scale.
    pub fn in_domain(self, mu: f64) -> bool {
        if !mu.is_finite() {
            return false;
        }
        match self {
            Link::Identity => true,
            Link::Log | Link::Sqrt => mu > 0.0,
            Link::Logit => mu > 0.0 && mu < 1.0,
            Link::Inverse => mu != 0.0,
        }
    }

    /// Domain of g⁻¹ on the linear-predictor scale.
    pub fn in_range(self, eta: f64) -> bool {
        if !eta.is_finite() {
            return false;
        }
        match self {
            Link::Identity | Link::Log | Link::Logit => true,
            Link::Inverse => eta != 0.0,
            Link::Sqrt => eta > 0.0,
        }
    }

    pub fn eval(self, mode: LinkMode, value: f64) -> Result<f64> {
        match mode {
            LinkMode::Apply | LinkMode::Derivative if !self.in_domain(value) => Err(Error::domain(format!(
                "mu = {value} outside the domain of the {} link",
                self.id()
            ))),
            LinkMode::Invert if !self.in_range(value) => Err(Error::domain(format!(
                "eta = {value} outside the range of the {} link",
                self.id()
            ))),
            LinkMode::Apply => Ok(self.apply(value)),
            LinkMode::Invert => Ok(self.inverse(value)),
            LinkMode::Derivative => Ok(self.derivative(value)),
        }
    }

    /// g(µ)
    pub fn apply(self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Log => mu.ln(),
            Link::Logit => (mu / (1.0 - mu)).ln(),
            Link::Inverse => 1.0 / mu,
            Link::Sqrt => mu.sqrt(),
        }
    }

    /// g⁻¹(η)
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
            Link::Logit => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
            Link::Inverse => 1.0 / eta,
            Link::Sqrt => eta * eta,
        }
    }

    /// g′(µ)
    pub fn derivative(self, mu: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Log => 1.0 / mu,
            Link::Logit => 1.0 / (mu * (1.0 - mu)),
            Link::Inverse => -1.0 / (mu * mu),
            Link::Sqrt => 0.5 / mu.sqrt(),
        }
    }

    /// g″(µ)
    pub fn second_derivative(self, mu: f64) -> f64 {
        match self {
            Link::Identity => 0.0,
            Link::Log => -1.0 / (mu * mu),
            Link::Logit => {
                let v = mu * (1.0 - mu);
                (2.0 * mu - 1.0) / (v * v)
            }
            Link::Inverse => 2.0 / mu.powi(3),
            Link::Sqrt => -0.25 * mu.powf(-1.5),
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Link::ALL
            .into_iter()
            .find(|l| l.id() == s)
            .ok_or_else(|| Error::config(format!("unknown link '{s}'")))
    }
}

/// `x log(y)` with the convention `0 log(0) = 0`.
fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

fn is_integer(v: f64) -> bool {
    (v - v.round()).abs() <= INTEGER_TOL * v.abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn fd_second(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-4 * x.abs().max(1.0);
        (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
    }

    fn fd_first(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn normalizer_lambda_derivative() {
        for f in [Family::Normal, Family::Gamma, Family::InverseGaussian] {
            let (y, w, l) = (1.7, 1.3, 0.6);
            let h: f64 = 1e-5;
            let num = (f.log_normalizer(y, l * h.exp(), w) - f.log_normalizer(y, l * (-h).exp(), w)) / (2.0 * h);
            assert!((num - f.log_normalizer_dlog_lambda(l, w)).abs() < 1e-7, "{f:?}");
        }
    }

    #[test]
    fn deviance_examples() {
        assert_eq!(Family::Normal.unit_deviance(3.0, 1.0).unwrap(), 4.0);
        assert_eq!(Family::Poisson.unit_deviance(2.0, 2.0).unwrap(), 0.0);
        // 2{y log(y/µ) - (y - µ)} at y = 2, µ = 1
        let oracle = 2.0 * (2.0 * (2.0f64 / 1.0).ln() - (2.0 - 1.0));
        assert_relative_eq!(Family::Poisson.unit_deviance(2.0, 1.0).unwrap(), oracle, max_relative = 1e-14);
        assert_relative_eq!(oracle, 0.772589, epsilon = 1e-6);
        // y = 0 uses the limiting value 2µ.
        assert_relative_eq!(Family::Poisson.unit_deviance(0.0, 1.5).unwrap(), 3.0);
    }

    #[test]
    fn deviance_domain_errors() {
        assert!(Family::Poisson.unit_deviance(-1.0, 1.0).is_err());
        assert!(Family::Poisson.unit_deviance(1.0, 0.0).is_err());
        assert!(Family::Binomial.unit_deviance(0.5, 1.0).is_err());
        assert!(Family::Gamma.unit_deviance(0.0, 1.0).is_err());
        assert!(Family::InverseGaussian.unit_deviance(1.0, -2.0).is_err());
    }

    #[test]
    fn variance_examples_against_finite_differences() {
        assert_eq!(Family::Normal.variance_function(7.0).unwrap(), 1.0);
        for (fam, mu, expect) in [(Family::Poisson, 3.0, 3.0), (Family::Gamma, 2.0, 4.0)] {
            let d2 = fd_second(|m| fam.deviance_raw(mu, m), mu);
            assert_relative_eq!(2.0 / d2, expect, max_relative = 1e-5);
            assert_relative_eq!(fam.variance_function(mu).unwrap(), expect, max_relative = 1e-14);
        }
        assert!(Family::Binomial.variance_function(1.2).is_err());
    }

    #[test]
    fn variance_matches_deviance_curvature_on_grid() {
        for fam in Family::ALL {
            let grid: Vec<f64> = match fam {
                Family::Normal => vec![-3.0, -0.5, 0.0, 2.0, 10.0],
                Family::Binomial => vec![0.05, 0.2, 0.5, 0.8, 0.95],
                _ => vec![0.1, 0.5, 1.0, 3.0, 20.0],
            };
            for mu in grid {
                let d2 = fd_second(|m| fam.deviance_raw(mu, m), mu);
                assert_relative_eq!(fam.variance_function(mu).unwrap(), 2.0 / d2, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn log_density_examples() {
        let v = Family::Normal.log_density(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(v, -0.5 * (2.0 * PI).ln(), epsilon = 1e-15);
        assert_relative_eq!(v, -0.918939, epsilon = 1e-6);
        // log of the Poisson pmf e^{-2} 2^0 / 0!
        assert_relative_eq!(Family::Poisson.log_density(0.0, 2.0, 1.0, 1.0).unwrap(), -2.0, epsilon = 1e-14);
        assert_relative_eq!(
            Family::Binomial.log_density(1.0, 0.5, 1.0, 1.0).unwrap(),
            0.5f64.ln(),
            epsilon = 1e-14
        );
        assert!(Family::Normal.log_density(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(Family::Normal.log_density(0.0, 0.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn fixed_dispersion_ignores_lambda() {
        let a = Family::Poisson.log_density(3.0, 2.0, 1.0, 1.0).unwrap();
        let b = Family::Poisson.log_density(3.0, 2.0, 7.5, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn poisson_and_binomial_densities_match_pmfs() {
        for s in 0..12 {
            let y = s as f64;
            let mu: f64 = 3.7;
            let pmf = y * mu.ln() - mu - ln_gamma(y + 1.0);
            assert_relative_eq!(Family::Poisson.log_density(y, mu, 1.0, 1.0).unwrap(), pmf, epsilon = 1e-12);
        }
        let m = 9.0;
        for s in 0..=9 {
            let s = s as f64;
            let p: f64 = 0.3;
            let pmf = ln_gamma(m + 1.0) - ln_gamma(s + 1.0) - ln_gamma(m - s + 1.0) + s * p.ln() + (m - s) * (1.0 - p).ln();
            assert_relative_eq!(Family::Binomial.log_density(s / m, p, 1.0, m).unwrap(), pmf, epsilon = 1e-12);
        }
    }

    #[test]
    fn densities_normalise() {
        // Discrete families: sum the pmf.
        let total: f64 = (0..200).map(|s| Family::Poisson.log_density(s as f64, 6.3, 1.0, 1.0).unwrap().exp()).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        let m = 15.0;
        let total: f64 = (0..=15)
            .map(|s| Family::Binomial.log_density(s as f64 / m, 0.37, 1.0, m).unwrap().exp())
            .sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);

        // Continuous families: composite Simpson on a wide interval.
        let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize| {
            let h = (b - a) / n as f64;
            let mut s = f(a) + f(b);
            for i in 1..n {
                let x = a + i as f64 * h;
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
            }
            s * h / 3.0
        };
        let normal = |y: f64| Family::Normal.log_density(y, 1.3, 0.7, 1.0).unwrap().exp();
        assert_relative_eq!(simpson(&normal, -15.0, 17.0, 20_000), 1.0, epsilon = 1e-9);
        let gamma = |y: f64| Family::Gamma.log_density(y, 2.0, 0.25, 1.0).unwrap().exp();
        assert_relative_eq!(simpson(&gamma, 1e-9, 40.0, 200_000), 1.0, epsilon = 1e-7);
        let ig = |y: f64| Family::InverseGaussian.log_density(y, 1.5, 0.2, 1.0).unwrap().exp();
        assert_relative_eq!(simpson(&ig, 1e-6, 80.0, 400_000), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn link_examples() {
        assert_eq!(Link::Log.eval(LinkMode::Apply, 1.0).unwrap(), 0.0);
        assert_eq!(Link::Logit.eval(LinkMode::Invert, 0.0).unwrap(), 0.5);
        let fd = fd_first(|m| Link::Log.apply(m), 4.0);
        assert_relative_eq!(fd, 0.25, max_relative = 1e-8);
        assert_eq!(Link::Log.eval(LinkMode::Derivative, 4.0).unwrap(), 0.25);
        assert!(Link::Logit.eval(LinkMode::Apply, 1.5).is_err());
        assert!(Link::Sqrt.eval(LinkMode::Invert, -1.0).is_err());
    }

    #[test]
    fn link_derivatives_match_finite_differences() {
        for link in Link::ALL {
            for mu in [0.1, 0.3, 0.5, 0.77, 0.9] {
                let fd = fd_first(|m| link.apply(m), mu);
                assert_relative_eq!(link.derivative(mu), fd, max_relative = 1e-6);
                let fd2 = fd_first(|m| link.derivative(m), mu);
                assert_relative_eq!(link.second_derivative(mu), fd2, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn score_derivatives_match_finite_differences() {
        let cases = [
            (Family::Normal, 1.7, 0.4),
            (Family::Poisson, 3.0, 2.2),
            (Family::Poisson, 0.0, 0.8),
            (Family::Binomial, 0.3, 0.55),
            (Family::Gamma, 2.5, 1.1),
            (Family::InverseGaussian, 0.7, 1.3),
        ];
        for (fam, y, mu) in cases {
            let fd = fd_first(|m| fam.deviance_raw(y, m), mu);
            assert_relative_eq!(fam.deviance_dmu(y, mu).unwrap(), fd, max_relative = 1e-6);
            let fd2 = fd_first(|m| fam.dmu_raw(y, m), mu);
            assert_relative_eq!(fam.deviance_d2mu(y, mu).unwrap(), fd2, max_relative = 1e-6);
        }
    }

    #[test]
    fn identifiers_round_trip() {
        for fam in Family::ALL {
            assert_eq!(fam.id().parse::<Family>().unwrap(), fam);
        }
        for link in Link::ALL {
            assert_eq!(link.id().parse::<Link>().unwrap(), link);
        }
        assert!("weibull".parse::<Family>().is_err());
        let js = serde_json::to_string(&Family::InverseGaussian).unwrap();
        assert_eq!(js, "\"inverse_gaussian\"");
    }

    fn family_point() -> impl Strategy<Value = (Family, f64, f64)> {
        prop_oneof![
            (-50.0..50.0f64, -50.0..50.0f64).prop_map(|(y, m)| (Family::Normal, y, m)),
            (0u32..40, 0.01..40.0f64).prop_map(|(y, m)| (Family::Poisson, y as f64, m)),
            (0.0..=1.0f64, 0.001..0.999f64).prop_map(|(y, m)| (Family::Binomial, y, m)),
            (0.01..30.0f64, 0.01..30.0f64).prop_map(|(y, m)| (Family::Gamma, y, m)),
            (0.01..30.0f64, 0.01..30.0f64).prop_map(|(y, m)| (Family::InverseGaussian, y, m)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn deviance_is_nonnegative_and_vanishes_on_diagonal((fam, y, mu) in family_point()) {
            let d = fam.deviance_raw(y, mu);
            prop_assert!(d >= 0.0 || d.abs() < 1e-12);
            if (y - mu).abs() > 1e-6 * mu.abs().max(1.0) {
                prop_assert!(d > 0.0);
            }
            if fam.in_mean_space(y) {
                prop_assert!(fam.deviance_raw(y, y).abs() < 1e-12);
            }
        }

        #[test]
        fn normal_log_density_is_gaussian(y in -20.0..20.0f64, mu in -20.0..20.0f64, lambda in 0.01..50.0f64) {
            let closed = -0.5 * (2.0 * PI * lambda).ln() - (y - mu).powi(2) / (2.0 * lambda);
            let got = Family::Normal.log_density(y, mu, lambda, 1.0).unwrap();
            prop_assert!((got - closed).abs() <= 1e-12 * closed.abs().max(1.0));
        }

        #[test]
        fn links_invert(mu in 0.0001..0.9999f64, scale in 0.1..30.0f64) {
            for link in Link::ALL {
                let m = if link == Link::Logit { mu } else { mu * scale };
                let back = link.inverse(link.apply(m));
                prop_assert!((back - m).abs() <= 1e-10 * m.abs().max(1.0));
            }
            let eta = (mu - 0.5) * 10.0;
            prop_assert!((Link::Identity.apply(Link::Identity.inverse(eta)) - eta).abs() < 1e-12);
        }
    }
}
