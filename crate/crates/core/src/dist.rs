//! Coordinate generators.
//!
//! `Uniform` and `Grid` are smooth in the (f₁, f₂) sense for any reasonable
//! parameters; `Zipf` and `PowerLaw` make up the restricted class used for
//! y-coordinates. All sampling is by inverse transform so that a seeded RNG
//! stream reproduces the same sequence.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum DistributionSpec {
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Integers in `[1, m]`.
    Grid {
        m: u64,
    },
    /// Ranks in `[1, n]` with probability ∝ `1/k^s`.
    Zipf {
        n: u64,
        s: f64,
    },
    /// CCDF `c·x^{−b}` conditioned on `x ≥ xmin`.
    PowerLaw {
        c: f64,
        b: f64,
        xmin: f64,
    },
    Mixture(Vec<(f64, DistributionSpec)>),
}

impl DistributionSpec {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        DistributionSpec::Uniform { lo, hi }
    }

    /// Power law starting where the CCDF reaches one.
    pub fn power_law(c: f64, b: f64) -> Self {
        DistributionSpec::PowerLaw {
            c,
            b,
            xmin: c.powf(1.0 / b),
        }
    }

    pub fn validate(&self) -> Result<()> {
        use DistributionSpec::*;
        match *self {
            Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::config(format!("uniform needs finite lo < hi, got {lo},{hi}")));
                }
            }
            Grid { m } => {
                if m < 1 {
                    return Err(Error::config("grid needs M >= 1"));
                }
            }
            Zipf { n, s } => {
                if n < 1 || !(s >= 0.0 && s.is_finite()) {
                    return Err(Error::config(format!("zipf needs N >= 1 and s >= 0, got {n},{s}")));
                }
            }
            PowerLaw { c, b, xmin } => {
                if !(c > 0.0 && b > 0.0 && xmin > 0.0 && c.is_finite() && b.is_finite()) {
                    return Err(Error::config("power law needs c, b, xmin > 0"));
                }
                if c * xmin.powf(-b) > 1.0 + 1e-9 {
                    return Err(Error::config(format!(
                        "power law CCDF exceeds 1 at xmin={xmin} (c={c}, b={b})"
                    )));
                }
            }
            Mixture(ref parts) => {
                if parts.is_empty() {
                    return Err(Error::config("empty mixture"));
                }
                let mut total = 0.0;
                for (w, spec) in parts {
                    if !(*w > 0.0) {
                        return Err(Error::config("mixture weights must be positive"));
                    }
                    total += w;
                    spec.validate()?;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::config(format!("mixture weights sum to {total}, not 1")));
                }
            }
        }
        Ok(())
    }

    pub fn sampler(&self) -> Result<Sampler> {
        self.validate()?;
        Ok(Sampler::build(self))
    }

    /// Whether draws are (almost surely) distinct, i.e. no atoms.
    pub fn is_continuous(&self) -> bool {
        match self {
            DistributionSpec::Uniform { .. } | DistributionSpec::PowerLaw { .. } => true,
            DistributionSpec::Grid { .. } | DistributionSpec::Zipf { .. } => false,
            DistributionSpec::Mixture(parts) => parts.iter().all(|(_, s)| s.is_continuous()),
        }
    }
}

impl fmt::Display for DistributionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistributionSpec::Uniform { lo, hi } => write!(f, "uniform:{lo},{hi}"),
            DistributionSpec::Grid { m } => write!(f, "grid:{m}"),
            DistributionSpec::Zipf { n, s } => write!(f, "zipf:{n},{s}"),
            DistributionSpec::PowerLaw { c, b, .. } => write!(f, "powerlaw:{c},{b}"),
            DistributionSpec::Mixture(parts) => {
                write!(f, "mix:")?;
                for (i, (w, s)) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, "+")?;
                    }
                    write!(f, "{w}*{s}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for DistributionSpec {
    type Err = Error;

    /// `uniform:lo,hi | grid:M | zipf:N,s | powerlaw:c,b | mix:w1*spec1+w2*spec2`
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (family, args) = s
            .split_once(':')
            .ok_or_else(|| Error::config(format!("distribution '{s}' lacks a ':'")))?;
        let nums = |n: usize| -> Result<Vec<f64>> {
            let v = args
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::config(format!("bad numbers in '{s}'")))?;
            if v.len() != n {
                return Err(Error::config(format!("'{family}' takes {n} parameters")));
            }
            Ok(v)
        };
        let int = |v: f64| -> Result<u64> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as u64)
            } else {
                Err(Error::config(format!("expected an integer in '{s}'")))
            }
        };
        let spec = match family {
            "uniform" => {
                let v = nums(2)?;
                DistributionSpec::Uniform { lo: v[0], hi: v[1] }
            }
            "grid" => DistributionSpec::Grid { m: int(nums(1)?[0])? },
            "zipf" => {
                let v = nums(2)?;
                DistributionSpec::Zipf { n: int(v[0])?, s: v[1] }
            }
            "powerlaw" => {
                let v = nums(2)?;
                DistributionSpec::power_law(v[0], v[1])
            }
            "mix" => {
                let mut parts = Vec::new();
                for term in args.split('+') {
                    let (w, inner) = term
                        .split_once('*')
                        .ok_or_else(|| Error::config(format!("mixture term '{term}' lacks '*'")))?;
                    let w: f64 = w
                        .trim()
                        .parse()
                        .map_err(|_| Error::config(format!("bad weight in '{term}'")))?;
                    let inner: DistributionSpec = inner.parse()?;
                    if matches!(inner, DistributionSpec::Mixture(_)) {
                        return Err(Error::config("nested mixtures are not supported"));
                    }
                    parts.push((w, inner));
                }
                DistributionSpec::Mixture(parts)
            }
            other => return Err(Error::config(format!("unknown distribution family '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Probability of rank `k` under Zipf's law with exponent `s` over `n` ranks.
pub fn zipf_pmf(k: u64, s: f64, n: u64) -> Result<f64> {
    if k < 1 || k > n {
        return Err(Error::domain(format!("zipf rank {k} outside [1, {n}]")));
    }
    Ok((k as f64).powf(-s) / harmonic(n, s))
}

/// Generalized harmonic number, summed smallest terms first.
fn harmonic(n: u64, s: f64) -> f64 {
    (1..=n).rev().map(|i| (i as f64).powf(-s)).sum()
}

/// `Pr[X ≥ x] = min(1, c·x^{−b})` for `x` at or above the support start `c^{1/b}`.
pub fn powerlaw_ccdf(x: f64, c: f64, b: f64) -> Result<f64> {
    if !(c > 0.0 && b > 0.0) {
        return Err(Error::domain("power law needs c, b > 0"));
    }
    let xmin = c.powf(1.0 / b);
    if !(x >= xmin * (1.0 - 1e-12)) {
        return Err(Error::domain(format!("x = {x} below support start {xmin}")));
    }
    Ok((c * x.powf(-b)).min(1.0))
}

/// A prepared generator for one `DistributionSpec`.
#[derive(Clone, Debug)]
pub struct Sampler {
    kind: SamplerKind,
}

#[derive(Clone, Debug)]
enum SamplerKind {
    Uniform {
        lo: f64,
        hi: f64,
    },
    Grid {
        m: u64,
    },
    /// Cumulative distribution over ranks 1..=N; last entry is exactly 1.
    Zipf {
        cdf: Vec<f64>,
    },
    PowerLaw {
        xmin: f64,
        inv_b: f64,
    },
    Mixture {
        cum_weights: Vec<f64>,
        parts: Vec<Sampler>,
    },
}

impl Sampler {
    fn build(spec: &DistributionSpec) -> Sampler {
        let kind = match *spec {
            DistributionSpec::Uniform { lo, hi } => SamplerKind::Uniform { lo, hi },
            DistributionSpec::Grid { m } => SamplerKind::Grid { m },
            DistributionSpec::Zipf { n, s } => {
                let mut cdf = Vec::with_capacity(n as usize);
                let mut acc = 0.0;
                for k in 1..=n {
                    acc += (k as f64).powf(-s);
                    cdf.push(acc);
                }
                for v in &mut cdf {
                    *v /= acc;
                }
                *cdf.last_mut().unwrap() = 1.0;
                SamplerKind::Zipf { cdf }
            }
            DistributionSpec::PowerLaw { b, xmin, .. } => SamplerKind::PowerLaw { xmin, inv_b: 1.0 / b },
            DistributionSpec::Mixture(ref parts) => {
                let mut acc = 0.0;
                let cum_weights = parts
                    .iter()
                    .map(|(w, _)| {
                        acc += w;
                        acc
                    })
                    .collect();
                SamplerKind::Mixture {
                    cum_weights,
                    parts: parts.iter().map(|(_, s)| Sampler::build(s)).collect(),
                }
            }
        };
        Sampler { kind }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.kind {
            SamplerKind::Uniform { lo, hi } => rng.gen_range(*lo..*hi),
            SamplerKind::Grid { m } => rng.gen_range(1..=*m) as f64,
            SamplerKind::Zipf { cdf } => {
                let u: f64 = rng.gen();
                (cdf.partition_point(|&c| c <= u).min(cdf.len() - 1) + 1) as f64
            }
            SamplerKind::PowerLaw { xmin, inv_b } => {
                // u in (0, 1]
                let u = 1.0 - rng.gen::<f64>();
                xmin * u.powf(-inv_b)
            }
            SamplerKind::Mixture { cum_weights, parts } => {
                let u: f64 = rng.gen::<f64>() * cum_weights.last().copied().unwrap_or(1.0);
                let i = cum_weights.partition_point(|&c| c <= u).min(parts.len() - 1);
                parts[i].sample(rng)
            }
        }
    }
}

/// `n` i.i.d. draws from `spec`.
pub fn generate<R: Rng + ?Sized>(spec: &DistributionSpec, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let sampler = spec.sampler()?;
    Ok((0..n).map(|_| sampler.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zipf_pmf_examples() {
        assert_eq!(zipf_pmf(1, 3.7, 1).unwrap(), 1.0);
        assert!((zipf_pmf(1, 1.0, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((zipf_pmf(3, 0.0, 4).unwrap() - 0.25).abs() < 1e-15);
        assert!(zipf_pmf(0, 1.0, 4).is_err());
        assert!(zipf_pmf(5, 1.0, 4).is_err());
    }

    #[test]
    fn zipf_pmf_sums_to_one() {
        for &n in &[1u64, 2, 17, 1000, 10_000] {
            for &s in &[0.0, 0.5, 1.0, 1.2, 2.0] {
                let h = harmonic(n, s);
                let total: f64 = (1..=n).map(|k| (k as f64).powf(-s) / h).sum();
                assert!((total - 1.0).abs() <= 1e-12, "n={n} s={s} total={total}");
                assert!((zipf_pmf(n, s, n).unwrap() - (n as f64).powf(-s) / h).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn powerlaw_ccdf_examples() {
        assert_eq!(powerlaw_ccdf(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((powerlaw_ccdf(10.0, 1.0, 2.0).unwrap() - 0.01).abs() < 1e-15);
        assert!((powerlaw_ccdf(4.0, 1.0, 1.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(powerlaw_ccdf(0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn generate_examples() {
        let mut r = rng(1);
        assert!(generate(&DistributionSpec::uniform(0.0, 1.0), 0, &mut r)
            .unwrap()
            .is_empty());
        let g = generate(&DistributionSpec::Grid { m: 5 }, 1000, &mut r).unwrap();
        assert!(g.iter().all(|&v| v.fract() == 0.0 && (1.0..=5.0).contains(&v)));
        for k in 1..=5 {
            assert!(g.contains(&(k as f64)));
        }
        let u = generate(&DistributionSpec::uniform(-2.0, 3.0), 10_000, &mut r).unwrap();
        assert!(u.iter().all(|&v| (-2.0..3.0).contains(&v)));
    }

    #[test]
    fn zipf_rank_one_frequency() {
        let mut r = rng(2);
        let v = generate(&DistributionSpec::Zipf { n: 2, s: 1.0 }, 1_000_000, &mut r).unwrap();
        let freq = v.iter().filter(|&&k| k == 1.0).count() as f64 / v.len() as f64;
        assert!((freq - 2.0 / 3.0).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn powerlaw_empirical_ccdf() {
        let mut r = rng(3);
        let spec = DistributionSpec::power_law(1.0, 2.0);
        let v = generate(&spec, 200_000, &mut r).unwrap();
        assert!(v.iter().all(|&x| x >= 1.0));
        for &x in &[1.5, 3.0, 10.0] {
            let emp = v.iter().filter(|&&s| s >= x).count() as f64 / v.len() as f64;
            let exact = powerlaw_ccdf(x, 1.0, 2.0).unwrap();
            assert!((emp - exact).abs() < 0.005, "x={x} emp={emp} exact={exact}");
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec: DistributionSpec = "mix:0.5*uniform:0,1+0.5*zipf:100,1.2".parse().unwrap();
        let a = generate(&spec, 500, &mut rng(9)).unwrap();
        let b = generate(&spec, 500, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parse_grammar() {
        assert_eq!(
            "uniform:0,1".parse::<DistributionSpec>().unwrap(),
            DistributionSpec::uniform(0.0, 1.0)
        );
        assert_eq!(
            "grid:5".parse::<DistributionSpec>().unwrap(),
            DistributionSpec::Grid { m: 5 }
        );
        assert_eq!(
            "zipf:1000000,1.2".parse::<DistributionSpec>().unwrap(),
            DistributionSpec::Zipf { n: 1_000_000, s: 1.2 }
        );
        let pl: DistributionSpec = "powerlaw:4,2".parse().unwrap();
        assert_eq!(
            pl,
            DistributionSpec::PowerLaw {
                c: 4.0,
                b: 2.0,
                xmin: 2.0
            }
        );
        let mix: DistributionSpec = "mix:0.25*grid:3+0.75*uniform:0,1".parse().unwrap();
        assert_eq!(mix.to_string(), "mix:0.25*grid:3+0.75*uniform:0,1");
        for bad in [
            "uniform:1,0",
            "grid:0",
            "zipf:0,1",
            "powerlaw:1,-1",
            "mix:0.5*grid:2",
            "nope:1",
            "grid",
        ] {
            assert!(bad.parse::<DistributionSpec>().is_err(), "{bad}");
        }
    }
}
