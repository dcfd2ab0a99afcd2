//! Jobs, traces, trace files and the synthetic trace generator.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Shape(pub [usize; 3]);

impl Shape {
    pub fn new(a: usize, b: usize, c: usize) -> Self {
        Shape([a, b, c])
    }

    pub fn extents(&self) -> [usize; 3] {
        self.0
    }

    pub fn size(&self) -> usize {
        self.0.iter().product()
    }

    /// Number of extents greater than one.
    pub fn dims(&self) -> usize {
        self.0.iter().filter(|&&e| e > 1).count()
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|&e| e >= 1)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.0;
        write!(f, "{a}x{b}x{c}")
    }
}

/// Parses `4x6x1`, `4,6,1` or a shorter form such as `18`, padding with 1s.
impl std::str::FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid shape {s:?}, expected e.g. 4x6x1"));
        let parts: Vec<&str> = s.split(['x', 'X', ',']).map(str::trim).collect();
        if parts.len() > 3 {
            return Err(bad());
        }
        let mut ext = [1; 3];
        for (e, p) in ext.iter_mut().zip(&parts) {
            *e = p.parse().map_err(|_| bad())?;
        }
        let shape = Shape(ext);
        if !shape.is_valid() {
            return Err(bad());
        }
        Ok(shape)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    #[serde(rename = "arrival_s")]
    pub arrival: f64,
    #[serde(rename = "duration_s")]
    pub duration: f64,
    pub shape: Shape,
}

impl Job {
    pub fn size(&self) -> usize {
        self.shape.size()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub jobs: Vec<Job>,
}

impl Trace {
    /// Sorts by arrival, breaking ties by id.
    pub fn new(mut jobs: Vec<Job>) -> Self {
        jobs.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then_with(|| a.id.cmp(&b.id)));
        Trace { jobs }
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for (i, job) in self.jobs.iter().enumerate() {
            validate_job(job).map_err(|m| Error::Validation(format!("job {}: {m}", job.id)))?;
            if !ids.insert(job.id.as_str()) {
                return Err(Error::Validation(format!("duplicate job id {}", job.id)));
            }
            if i > 0 && job.arrival < self.jobs[i - 1].arrival {
                return Err(Error::Validation(format!("arrivals out of order at job {}", job.id)));
            }
        }
        Ok(())
    }
}

fn validate_job(job: &Job) -> std::result::Result<(), String> {
    if !job.arrival.is_finite() || job.arrival < 0.0 {
        return Err(format!("arrival_s must be a non-negative number, got {}", job.arrival));
    }
    if !job.duration.is_finite() || job.duration <= 0.0 {
        return Err(format!("duration_s must be positive, got {}", job.duration));
    }
    if !job.shape.is_valid() {
        return Err(format!("shape extents must be positive, got {}", job.shape));
    }
    Ok(())
}

/// Reads a JSONL trace, one job per line. Blank lines are skipped.
pub fn load_trace(source: impl BufRead) -> Result<Trace> {
    let mut jobs: Vec<Job> = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let job: Job = serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        validate_job(&job).map_err(|msg| Error::Validation(format!("line {lineno}: {msg}")))?;
        if let Some(prev) = jobs.last() {
            if job.arrival < prev.arrival {
                return Err(Error::Validation(format!("line {lineno}: arrivals must be non-decreasing")));
            }
        }
        if !ids.insert(job.id.clone()) {
            return Err(Error::Validation(format!("line {lineno}: duplicate job id {}", job.id)));
        }
        jobs.push(job);
    }
    Ok(Trace { jobs })
}

pub fn save_trace(trace: &Trace, mut sink: impl Write) -> Result<()> {
    for job in &trace.jobs {
        serde_json::to_writer(&mut sink, job)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

/// Ordered factorizations of `size` into `dims` extents, each at least 2
/// (a single extent for `dims == 1`), lexicographic.
pub fn factorize(size: usize, dims: usize) -> Vec<Shape> {
    match dims {
        0 | 1 => vec![Shape::new(size.max(1), 1, 1)],
        2 => divisors(size)
            .into_iter()
            .filter(|&a| a >= 2 && size / a >= 2)
            .map(|a| Shape::new(a, size / a, 1))
            .collect(),
        _ => {
            let mut out = Vec::new();
            for a in divisors(size).into_iter().filter(|&a| a >= 2) {
                let rest = size / a;
                for b in divisors(rest).into_iter().filter(|&b| b >= 2 && rest / b >= 2) {
                    out.push(Shape::new(a, b, rest / b));
                }
            }
            out
        }
    }
}

fn divisors(n: usize) -> Vec<usize> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut i = 1;
    while i * i <= n {
        if n.is_multiple_of(i) {
            small.push(i);
            if i != n / i {
                large.push(n / i);
            }
        }
        i += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

/// Restrictions on which shapes the generator may emit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ShapeFilter {
    /// Largest extent allowed in any dimension.
    pub extent_cap: Option<usize>,
    /// Largest number of cubes the shape may span on a cluster of this cube size.
    pub footprint: Option<FootprintCap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintCap {
    pub cube_size: usize,
    pub cube_count: usize,
}

impl ShapeFilter {
    pub fn admits(&self, shape: &Shape) -> bool {
        if let Some(cap) = self.extent_cap {
            if shape.0.iter().any(|&e| e > cap) {
                return false;
            }
        }
        if let Some(fp) = self.footprint {
            let cubes: usize = shape.0.iter().map(|&e| e.div_ceil(fp.cube_size)).product();
            if cubes > fp.cube_count {
                return false;
            }
        }
        true
    }
}

/// Uniform draw over the factorizations of `size` into `dims` extents,
/// falling back to lower dimensionality when none exist.
pub fn sample_shape(size: usize, dims: usize, rng: &mut impl Rng) -> Shape {
    sample_shape_filtered(size, dims, &ShapeFilter::default(), rng).expect("1D shape always exists without a filter")
}

/// As [`sample_shape`], but drops candidates the filter rejects before the
/// draw. Returns `None` when nothing survives at any dimensionality.
pub fn sample_shape_filtered(size: usize, dims: usize, filter: &ShapeFilter, rng: &mut impl Rng) -> Option<Shape> {
    let mut d = dims.clamp(1, 3);
    loop {
        let candidates: Vec<Shape> = factorize(size, d).into_iter().filter(|s| filter.admits(s)).collect();
        if !candidates.is_empty() {
            return Some(candidates[rng.random_range(0..candidates.len())]);
        }
        if d == 1 {
            return None;
        }
        d -= 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeDistribution {
    Exponential { mean: f64 },
    LogNormal { mu: f64, sigma: f64 },
    Constant { value: f64 },
}

impl TimeDistribution {
    fn validate(&self, field: &str) -> Result<()> {
        let ok = match *self {
            TimeDistribution::Exponential { mean } => mean.is_finite() && mean > 0.0,
            TimeDistribution::LogNormal { mu, sigma } => mu.is_finite() && sigma.is_finite() && sigma >= 0.0,
            TimeDistribution::Constant { value } => value.is_finite() && value >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{field}: invalid distribution parameters {self:?}")))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            TimeDistribution::Exponential { mean } => {
                let u: f64 = rng.random();
                -mean * (1.0 - u).ln()
            }
            TimeDistribution::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).expect("validated").sample(rng),
            TimeDistribution::Constant { value } => value,
        }
    }
}

/// Probability of drawing a 1D, 2D or 3D shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimTable {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl DimTable {
    fn validate(&self, field: &str) -> Result<()> {
        let p = [self.d1, self.d2, self.d3];
        if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::Config(format!("{field}: probabilities must be non-negative")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("{field}: probabilities sum to {sum}, expected 1")));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        if u < self.d1 {
            1
        } else if u < self.d1 + self.d2 {
            2
        } else {
            3
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub job_count: usize,
    pub seed: u64,
    pub inter_arrival: TimeDistribution,
    pub duration: TimeDistribution,
    /// Scale of the truncated exponential size distribution.
    pub size_scale: f64,
    pub max_size: usize,
    pub small_threshold: usize,
    pub small_dims: DimTable,
    pub large_dims: DimTable,
    pub extent_cap: Option<usize>,
    pub footprint_cap: Option<FootprintCap>,
}

impl GenConfig {
    /// No extent or footprint restriction.
    pub fn uncapped(self) -> Self {
        Self { extent_cap: Some(0), footprint_cap: None, ..self }
    }
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            job_count: 500,
            seed: 1,
            inter_arrival: TimeDistribution::Exponential { mean: 400.0 },
            duration: TimeDistribution::LogNormal { mu: 8.0, sigma: 1.0 },
            size_scale: 256.0,
            max_size: 4096,
            small_threshold: 256,
            small_dims: DimTable { d1: 0.4, d2: 0.4, d3: 0.2 },
            large_dims: DimTable { d1: 0.0, d2: 0.5, d3: 0.5 },
            extent_cap: Some(256),
            footprint_cap: Some(FootprintCap { cube_size: 4, cube_count: 64 }),
        }
    }
}

const MAX_SIZE_REDRAWS: usize = 10_000;

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.inter_arrival.validate("inter_arrival")?;
        self.duration.validate("duration")?;
        if matches!(self.duration, TimeDistribution::Constant { value } if value <= 0.0) {
            return Err(Error::Config("duration: constant duration must be positive".into()));
        }
        if !self.size_scale.is_finite() || self.size_scale <= 0.0 {
            return Err(Error::Config(format!("size_scale: must be positive, got {}", self.size_scale)));
        }
        if self.max_size == 0 {
            return Err(Error::Config("max_size: must be at least 1".into()));
        }
        if self.small_threshold == 0 {
            return Err(Error::Config("small_threshold: must be at least 1".into()));
        }
        self.small_dims.validate("small_dims")?;
        self.large_dims.validate("large_dims")?;
        if let Some(fp) = self.footprint_cap {
            if fp.cube_size == 0 && fp.cube_count != 0 {
                return Err(Error::Config("footprint_cap: cube_size must be positive".into()));
            }
        }
        Ok(())
    }

    /// The generator's shape filter. A zero `extent_cap` or a zero
    /// `footprint_cap.cube_count` disables that restriction (TOML has no null).
    pub fn filter(&self) -> ShapeFilter {
        ShapeFilter {
            extent_cap: self.extent_cap.filter(|&c| c > 0),
            footprint: self.footprint_cap.filter(|fp| fp.cube_count > 0),
        }
    }

    /// Inverse-CDF draw from the continuous exponential truncated to
    /// `[1, max_size]`, rounded half-up and clamped.
    pub fn sample_size(&self, rng: &mut impl Rng) -> usize {
        let span = (self.max_size - 1) as f64;
        let tail = 1.0 - (-span / self.size_scale).exp();
        let u: f64 = rng.random();
        let x = 1.0 - self.size_scale * (1.0 - u * tail).ln();
        ((x + 0.5).floor() as usize).clamp(1, self.max_size)
    }

    /// Mean of the continuous truncated exponential on `[1, max_size]`.
    pub fn analytic_size_mean(&self) -> f64 {
        let span = (self.max_size - 1) as f64;
        let s = self.size_scale;
        let e = (-span / s).exp();
        1.0 + s - span * e / (1.0 - e)
    }
}

pub fn generate_trace(config: &GenConfig) -> Result<Trace> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let filter = config.filter();
    let width = config.job_count.max(1).to_string().len();
    let mut now = 0.0;
    let mut jobs = Vec::with_capacity(config.job_count);
    for i in 0..config.job_count {
        if i > 0 {
            now += config.inter_arrival.sample(&mut rng);
        }
        let duration = loop {
            let d = config.duration.sample(&mut rng);
            if d > 0.0 {
                break d;
            }
        };
        let shape = draw_shape(config, &filter, &mut rng)?;
        jobs.push(Job { id: format!("job-{i:0width$}"), arrival: now, duration, shape });
    }
    Ok(Trace { jobs })
}

fn draw_shape(config: &GenConfig, filter: &ShapeFilter, rng: &mut impl Rng) -> Result<Shape> {
    for _ in 0..MAX_SIZE_REDRAWS {
        let size = config.sample_size(rng);
        let table = if size <= config.small_threshold { &config.small_dims } else { &config.large_dims };
        let dims = table.sample(rng);
        if let Some(shape) = sample_shape_filtered(size, dims, filter, rng) {
            return Ok(shape);
        }
    }
    Err(Error::Config("extent_cap/footprint_cap admit no shape for the configured size distribution".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_parsing() {
        assert_eq!("4x6x1".parse::<Shape>().unwrap(), Shape::new(4, 6, 1));
        assert_eq!("1,6,4".parse::<Shape>().unwrap(), Shape::new(1, 6, 4));
        assert_eq!("18".parse::<Shape>().unwrap(), Shape::new(18, 1, 1));
        for bad in ["", "0x2", "1x2x3x4", "ax2"] {
            assert!(bad.parse::<Shape>().is_err(), "{bad}");
        }
    }

    /// Independent enumeration of ordered factorizations.
    fn brute_factorizations(size: usize, dims: usize) -> Vec<Shape> {
        let mut out = Vec::new();
        match dims {
            2 => {
                for a in 2..=size {
                    for b in 2..=size {
                        if a * b == size {
                            out.push(Shape::new(a, b, 1));
                        }
                    }
                }
            }
            3 => {
                for a in 2..=size {
                    for b in 2..=size {
                        for c in 2..=size {
                            if a * b * c == size {
                                out.push(Shape::new(a, b, c));
                            }
                        }
                    }
                }
            }
            _ => out.push(Shape::new(size, 1, 1)),
        }
        out
    }

    #[test]
    fn factorize_matches_brute_force() {
        for size in 1..=72 {
            for dims in 1..=3 {
                assert_eq!(factorize(size, dims), brute_factorizations(size, dims), "{size} {dims}");
            }
        }
        let f24 = factorize(24, 3);
        assert_eq!(f24.len(), 9);
        for s in [Shape::new(2, 2, 6), Shape::new(2, 3, 4), Shape::new(4, 2, 3)] {
            assert!(f24.contains(&s));
        }
        assert!(factorize(7, 2).is_empty());
        assert_eq!(factorize(18, 1), vec![Shape::new(18, 1, 1)]);
    }

    #[test]
    fn sample_shape_fallbacks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_shape(7, 2, &mut rng), Shape::new(7, 1, 1));
        assert_eq!(sample_shape(1, 3, &mut rng), Shape::new(1, 1, 1));
        // 3D impossible for 6, so 2D is used.
        assert_eq!(sample_shape(6, 3, &mut rng).dims(), 2);
        let filter = ShapeFilter { extent_cap: Some(4), footprint: None };
        // 2x2x6 and friends are filtered; 1D 24 is over the cap too, only 2x3x4 perms remain.
        for _ in 0..50 {
            let s = sample_shape_filtered(24, 3, &filter, &mut rng).unwrap();
            assert!(s.0.iter().all(|&e| e <= 4));
        }
        assert!(sample_shape_filtered(17, 2, &filter, &mut rng).is_none());
    }

    #[test]
    fn sample_shape_is_uniform_over_factorizations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let list = factorize(24, 3);
        let mut counts = vec![0usize; list.len()];
        let draws = 100_000;
        for _ in 0..draws {
            let s = sample_shape(24, 3, &mut rng);
            counts[list.iter().position(|x| *x == s).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 1.0 / 9.0).abs() < 0.02, "{f}");
        }
    }

    #[test]
    fn sizes_within_bounds_and_mean() {
        let cfg = GenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let s = cfg.sample_size(&mut rng);
            assert!((1..=4096).contains(&s));
            sum += s as f64;
        }
        let mean = sum / n as f64;
        let analytic = cfg.analytic_size_mean();
        assert!((mean - analytic).abs() / analytic < 0.05, "{mean} vs {analytic}");
    }

    #[test]
    fn large_jobs_use_large_table() {
        let cfg = GenConfig { extent_cap: None, footprint_cap: None, ..GenConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let size = cfg.sample_size(&mut rng);
            if size <= cfg.small_threshold {
                continue;
            }
            let d = cfg.large_dims.sample(&mut rng);
            assert!(d >= 2);
        }
        // size 300 is large: the default table never yields 1D.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert!(cfg.large_dims.sample(&mut rng) >= 2);
            assert!(sample_shape(300, cfg.large_dims.sample(&mut rng), &mut rng).dims() >= 2);
        }
    }

    #[test]
    fn generate_is_deterministic_and_filtered() {
        let cfg = GenConfig { job_count: 300, seed: 42, ..GenConfig::default() };
        let a = generate_trace(&cfg).unwrap();
        let b = generate_trace(&cfg).unwrap();
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        save_trace(&a, &mut ba).unwrap();
        save_trace(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
        a.validate().unwrap();
        let filter = cfg.filter();
        assert!(a.jobs.iter().all(|j| filter.admits(&j.shape)));
        let other = generate_trace(&GenConfig { seed: 43, ..cfg.clone() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = GenConfig { small_dims: DimTable { d1: 0.5, d2: 0.4, d3: 0.2 }, ..GenConfig::default() };
        let err = generate_trace(&cfg).unwrap_err().to_string();
        assert!(err.contains("small_dims"), "{err}");
        let cfg = GenConfig { size_scale: 0.0, ..GenConfig::default() };
        assert!(generate_trace(&cfg).unwrap_err().to_string().contains("size_scale"));
    }

    #[test]
    fn trace_file_io() {
        let line = r#"{"id":"a","arrival_s":0.0,"duration_s":5.5,"shape":[4,6,1]}"#;
        let t = load_trace(line.as_bytes()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.jobs[0].shape, Shape::new(4, 6, 1));
        assert!(load_trace("".as_bytes()).unwrap().is_empty());
        let zero = r#"{"id":"a","arrival_s":0.0,"duration_s":0,"shape":[4,6,1]}"#;
        assert!(matches!(load_trace(zero.as_bytes()), Err(Error::Validation(_))));
        let bad = format!("{line}\n{{\"id\":\"b\"");
        match load_trace(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let unsorted = "{\"id\":\"a\",\"arrival_s\":5,\"duration_s\":1,\"shape\":[1,1,1]}\n{\"id\":\"b\",\"arrival_s\":1,\"duration_s\":1,\"shape\":[1,1,1]}";
        assert!(matches!(load_trace(unsorted.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = GenConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: GenConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let partial: GenConfig = toml::from_str("job_count = 7\nseed = 3\n").unwrap();
        assert_eq!(partial.job_count, 7);
        assert_eq!(partial.small_threshold, 256);
    }
}
