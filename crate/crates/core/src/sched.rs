//! Timestep grids, the resolution shift, training-time sampling and the
//! `(t, t′)` pairing rules used by consistency distillation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GridLabel {
    Fast,
    Slow,
    NInterval,
    Uniform,
}

/// Strictly increasing times in `(0, 1]` ending at exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Scheduler {
    grid: Vec<f64>,
    pub label: GridLabel,
}

impl Scheduler {
    pub fn new(grid: Vec<f64>, label: GridLabel) -> Result<Self> {
        let ok = !grid.is_empty()
            && grid[0] > 0.0
            && *grid.last().unwrap() == 1.0
            && grid.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::invalid("scheduler", format!("grid must rise strictly from >0 to 1, got {grid:?}")));
        }
        Ok(Self { grid, label })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn with_label(mut self, label: GridLabel) -> Self {
        self.label = label;
        self
    }

    /// Point preceding `grid[i]`, or 0 for the first.
    fn predecessor(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.grid[i - 1]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimePair {
    pub t: f64,
    pub t_prime: f64,
    pub delta_t: f64,
}

impl TimePair {
    fn new(t: f64, t_prime: f64) -> Option<Self> {
        (0.0 <= t && t < t_prime && t_prime <= 1.0).then_some(Self {
            t,
            t_prime,
            delta_t: t_prime - t,
        })
    }
}

/// `{1/n, 2/n, …, 1}`.
pub fn uniform_grid(n: usize) -> Result<Scheduler> {
    if n == 0 {
        return Err(Error::invalid("uniform_grid", "n must be >= 1"));
    }
    let grid = (1..=n).map(|i| if i == n { 1.0 } else { i as f64 / n as f64 }).collect();
    Scheduler::new(grid, GridLabel::Uniform)
}

/// `t ↦ s·t / (1 + (s − 1)·t)`: monotone, fixes 0 and 1, and moves mass
/// toward 1 when `s > 1`.
pub fn shift_time(t: f64, s: f64) -> f64 {
    if t == 1.0 {
        return 1.0;
    }
    s * t / (1.0 + (s - 1.0) * t)
}

pub fn shift_grid(g: &Scheduler, s: f64) -> Result<Scheduler> {
    check_shift(s)?;
    let grid = g.grid.iter().map(|&t| shift_time(t, s)).collect();
    Scheduler::new(grid, g.label)
}

fn check_shift(s: f64) -> Result<()> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::invalid("shift", format!("shift must be > 0, got {s}")));
    }
    Ok(())
}

/// Logistic of a `Normal(mu, sigma²)` draw, nudged strictly inside (0, 1).
pub fn sample_lognorm(mu: f64, sigma: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sample_lognorm", format!("sigma must be > 0, got {sigma}")));
    }
    let z = Normal::new(mu, sigma).expect("validated sigma").sample(rng);
    let t = 1.0 / (1.0 + (-z).exp());
    Ok(t.clamp(f64::EPSILON, 1.0 - f64::EPSILON))
}

/// Adjacent boundaries `(k/n, (k+1)/n)` of a uniform partition.
pub fn n_interval_pair(n: usize, rng: &mut impl Rng) -> Result<TimePair> {
    if n == 0 {
        return Err(Error::invalid("n_interval_pair", "n must be >= 1"));
    }
    let k = rng.random_range(0..n);
    let t_prime = if k + 1 == n { 1.0 } else { (k + 1) as f64 / n as f64 };
    Ok(TimePair::new(k as f64 / n as f64, t_prime).expect("ordered partition"))
}

const PAIR_RETRIES: usize = 64;

/// Pairs drawn across a coarse (fast) and fine (slow) grid.
///
/// Fast first (probability ½, always when the fast grid has one point):
/// `t′` is a fast point and `t` a slow point in `[previous fast point, t′)`.
/// Slow first: `t′` is a slow point and `t` the greatest fast point below
/// it, else its slow predecessor, else 0.
pub fn fast_slow_pair(fast: &Scheduler, slow: &Scheduler, rng: &mut impl Rng) -> Result<TimePair> {
    if fast.len() >= slow.len() {
        return Err(Error::invalid(
            "fast_slow_pair",
            format!("fast grid ({}) must be shorter than slow grid ({})", fast.len(), slow.len()),
        ));
    }
    for _ in 0..PAIR_RETRIES {
        let fast_first = fast.len() == 1 || rng.random_bool(0.5);
        let pair = if fast_first {
            let k = rng.random_range(0..fast.len());
            let (lo, t_prime) = (fast.predecessor(k), fast.grid[k]);
            let start = slow.grid.partition_point(|&s| s < lo);
            let end = slow.grid.partition_point(|&s| s < t_prime);
            if start == end {
                continue;
            }
            TimePair::new(slow.grid[rng.random_range(start..end)], t_prime)
        } else {
            let k = rng.random_range(0..slow.len());
            let t_prime = slow.grid[k];
            let below = fast.grid.partition_point(|&f| f < t_prime);
            let t = if below > 0 {
                fast.grid[below - 1]
            } else {
                slow.predecessor(k)
            };
            TimePair::new(t, t_prime)
        };
        if let Some(p) = pair {
            return Ok(p);
        }
    }
    Err(Error::invalid("fast_slow_pair", "no valid pair after repeated draws"))
}

/// `t′` from the slow grid, `t` its predecessor.
pub fn slow_only_pair(slow: &Scheduler, rng: &mut impl Rng) -> TimePair {
    let k = rng.random_range(0..slow.len());
    TimePair::new(slow.predecessor(k), slow.grid[k]).expect("strictly increasing grid")
}

/// Distribution of training times for the flow loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum TimeSampling {
    #[default]
    Uniform,
    Lognorm { mu: f64, sigma: f64 },
}

/// Parses `name` or `name(a)` / `name(a,b)`.
fn parse_call(s: &str) -> Option<(&str, Vec<&str>)> {
    let s = s.trim();
    match s.find('(') {
        None => Some((s, Vec::new())),
        Some(i) => {
            let args = s[i + 1..].strip_suffix(')')?;
            Some((s[..i].trim(), args.split(',').map(str::trim).collect()))
        }
    }
}

impl FromStr for TimeSampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("time_sampling must be uniform or lognorm(mu,sigma), got {s:?}"));
        let (name, args) = parse_call(s).ok_or_else(bad)?;
        match (name, args.as_slice()) {
            ("uniform", []) => Ok(Self::Uniform),
            ("lognorm", [mu, sigma]) => {
                let mu: f64 = mu.parse().map_err(|_| bad())?;
                let sigma: f64 = sigma.parse().map_err(|_| bad())?;
                if !(sigma > 0.0) {
                    return Err(bad());
                }
                Ok(Self::Lognorm { mu, sigma })
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for TimeSampling {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for TimeSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uniform => f.write_str("uniform"),
            Self::Lognorm { mu, sigma } => write!(f, "lognorm({mu},{sigma})"),
        }
    }
}

impl From<TimeSampling> for String {
    fn from(t: TimeSampling) -> String {
        t.to_string()
    }
}

/// Rule for drawing consistency pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum Pairing {
    #[default]
    FastSlow,
    NInterval(usize),
    SlowOnly,
}

impl FromStr for Pairing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("pairing must be fast_slow, slow_only or n_interval(N), got {s:?}"));
        let (name, args) = parse_call(s).ok_or_else(bad)?;
        match (name, args.as_slice()) {
            ("fast_slow", []) => Ok(Self::FastSlow),
            ("slow_only", []) => Ok(Self::SlowOnly),
            ("n_interval", [n]) => match n.parse() {
                Ok(n) if n > 0 => Ok(Self::NInterval(n)),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Pairing {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::FastSlow => f.write_str("fast_slow"),
            Self::NInterval(n) => write!(f, "n_interval({n})"),
            Self::SlowOnly => f.write_str("slow_only"),
        }
    }
}

impl From<Pairing> for String {
    fn from(p: Pairing) -> String {
        p.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedConfig {
    pub fast_steps: usize,
    pub slow_steps: usize,
    /// Applied to training times, pairing grids and inference grids.
    pub shift_s: f64,
    pub time_sampling: TimeSampling,
    pub pairing: Pairing,
}

impl Default for SchedConfig {
    fn default() -> Self {
        Self {
            fast_steps: 4,
            slow_steps: 1000,
            shift_s: 3.0,
            time_sampling: TimeSampling::Uniform,
            pairing: Pairing::FastSlow,
        }
    }
}

impl SchedConfig {
    pub fn validate(&self) -> Result<()> {
        check_shift(self.shift_s).map_err(|e| Error::Config(e.to_string()))?;
        if self.fast_steps == 0 || self.slow_steps == 0 {
            return Err(Error::Config("fast_steps and slow_steps must be >= 1".into()));
        }
        if self.pairing == Pairing::FastSlow && self.fast_steps >= self.slow_steps {
            return Err(Error::Config("fast_steps must be smaller than slow_steps".into()));
        }
        Ok(())
    }

    /// Shifted uniform grid with `steps` points, as used at inference.
    pub fn inference_grid(&self, steps: usize) -> Result<Scheduler> {
        shift_grid(&uniform_grid(steps)?, self.shift_s)
    }

    pub fn sampler(&self) -> Result<PairSampler> {
        self.validate()?;
        Ok(PairSampler {
            fast: self.inference_grid(self.fast_steps)?.with_label(GridLabel::Fast),
            slow: self.inference_grid(self.slow_steps)?.with_label(GridLabel::Slow),
            cfg: self.clone(),
        })
    }
}

/// Draws flow-loss times and consistency pairs according to a
/// [`SchedConfig`].
#[derive(Clone, Debug)]
pub struct PairSampler {
    cfg: SchedConfig,
    fast: Scheduler,
    slow: Scheduler,
}

impl PairSampler {
    pub fn fast(&self) -> &Scheduler {
        &self.fast
    }

    pub fn slow(&self) -> &Scheduler {
        &self.slow
    }

    /// Training time for the flow loss, in `[0, 1]`.
    pub fn flow_time(&self, rng: &mut impl Rng) -> f64 {
        let raw = match self.cfg.time_sampling {
            TimeSampling::Uniform => rng.random::<f64>(),
            TimeSampling::Lognorm { mu, sigma } => sample_lognorm(mu, sigma, rng).expect("validated sigma"),
        };
        shift_time(raw, self.cfg.shift_s)
    }

    pub fn pair(&self, rng: &mut impl Rng) -> Result<TimePair> {
        match self.cfg.pairing {
            Pairing::FastSlow => fast_slow_pair(&self.fast, &self.slow, rng),
            Pairing::SlowOnly => Ok(slow_only_pair(&self.slow, rng)),
            Pairing::NInterval(n) => {
                let p = n_interval_pair(n, rng)?;
                let s = self.cfg.shift_s;
                Ok(TimePair::new(shift_time(p.t, s), shift_time(p.t_prime, s)).expect("monotone shift"))
            }
        }
    }
}
