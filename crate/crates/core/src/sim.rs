//! Exact simulation of the genome-level process, Monte Carlo estimators and
//! a uniformization oracle on the truncated two-type chain.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BdsError, Result};
use crate::model::{
    Genotype, ModelSpec, Observation, PanelDataset, RateTriple, ReducedInterval,
    RegressionCoefficients, INTERCEPT,
};

pub const DEFAULT_GENOME_SIZE: usize = 10_000;

/// Independent, reproducible stream `stream` under `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Birth,
    Shift,
    Death,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Birth => "birth",
            EventKind::Shift => "shift",
            EventKind::Death => "death",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub site_from: Option<String>,
    pub site_to: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    /// Apply the log to `init`, recording the genotype at each time.
    pub fn replay(&self, init: &Genotype, obs_times: &[f64]) -> Result<Vec<Genotype>> {
        let mut g = init.clone();
        let mut out = Vec::with_capacity(obs_times.len());
        let mut next = 0;
        for &t in obs_times {
            while next < self.events.len() && self.events[next].time <= t {
                let e = &self.events[next];
                let ok = match e.kind {
                    EventKind::Birth => g.insert(e.site_to.clone().unwrap_or_default()),
                    EventKind::Death => g.remove(e.site_from.as_deref().unwrap_or_default()),
                    EventKind::Shift => {
                        g.remove(e.site_from.as_deref().unwrap_or_default())
                            && g.insert(e.site_to.clone().unwrap_or_default())
                    }
                };
                if !ok {
                    return Err(BdsError::InvalidInput(format!(
                        "event {next} ({}) at t={} is inconsistent with the genotype",
                        e.kind.name(),
                        e.time
                    )));
                }
                next += 1;
            }
            out.push(g.clone());
        }
        Ok(out)
    }
}

/// Realized sufficient statistics of one path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    pub births: f64,
    pub shifts: f64,
    pub deaths: f64,
    pub particle_time: f64,
}

impl PathStats {
    pub fn as_array(&self) -> [f64; 4] {
        [self.births, self.shifts, self.deaths, self.particle_time]
    }
}

const EMPTY: u32 = u32::MAX;

/// Occupied sites with O(1) uniform sampling, insertion and removal.
struct Genome {
    occupied: Vec<u32>,
    pos: Vec<u32>,
}

impl Genome {
    fn new(size: usize) -> Self {
        Self {
            occupied: Vec::new(),
            pos: vec![EMPTY; size],
        }
    }

    fn size(&self) -> usize {
        self.pos.len()
    }

    fn len(&self) -> usize {
        self.occupied.len()
    }

    fn contains(&self, site: u32) -> bool {
        self.pos[site as usize] != EMPTY
    }

    fn insert(&mut self, site: u32) {
        debug_assert!(!self.contains(site));
        self.pos[site as usize] = self.occupied.len() as u32;
        self.occupied.push(site);
    }

    fn remove(&mut self, site: u32) {
        let i = self.pos[site as usize] as usize;
        let last = *self.occupied.last().expect("non-empty genome");
        self.occupied.swap_remove(i);
        if last != site {
            self.pos[last as usize] = i as u32;
        }
        self.pos[site as usize] = EMPTY;
    }

    fn random_occupied<R: Rng>(&self, rng: &mut R) -> u32 {
        self.occupied[rng.random_range(0..self.occupied.len())]
    }

    fn random_empty<R: Rng>(&self, rng: &mut R, t: f64) -> Result<u32> {
        if self.len() >= self.size() {
            return Err(BdsError::GenomeSaturated {
                sites: self.size(),
                t,
            });
        }
        loop {
            let s = rng.random_range(0..self.size()) as u32;
            if !self.contains(s) {
                return Ok(s);
            }
        }
    }
}

struct RawEvent {
    time: f64,
    kind: EventKind,
    from: Option<u32>,
    to: Option<u32>,
}

fn advance<R: Rng>(
    g: &mut Genome,
    rates: &RateTriple,
    t0: f64,
    t1: f64,
    rng: &mut R,
    stats: &mut PathStats,
    mut log: Option<&mut Vec<RawEvent>>,
) -> Result<()> {
    let theta = rates.theta();
    let mut t = t0;
    loop {
        let k = g.len();
        if k == 0 {
            return Ok(());
        }
        if theta == 0.0 {
            stats.particle_time += k as f64 * (t1 - t);
            return Ok(());
        }
        let wait = Exp::new(k as f64 * theta)
            .expect("positive rate")
            .sample(rng);
        if t + wait >= t1 {
            stats.particle_time += k as f64 * (t1 - t);
            return Ok(());
        }
        stats.particle_time += k as f64 * wait;
        t += wait;
        let u = rng.random::<f64>() * theta;
        let ev = if u < rates.lambda {
            let to = g.random_empty(rng, t)?;
            g.insert(to);
            stats.births += 1.0;
            RawEvent {
                time: t,
                kind: EventKind::Birth,
                from: None,
                to: Some(to),
            }
        } else if u < rates.lambda + rates.nu {
            let from = g.random_occupied(rng);
            let to = g.random_empty(rng, t)?;
            g.remove(from);
            g.insert(to);
            stats.shifts += 1.0;
            RawEvent {
                time: t,
                kind: EventKind::Shift,
                from: Some(from),
                to: Some(to),
            }
        } else {
            let from = g.random_occupied(rng);
            g.remove(from);
            stats.deaths += 1.0;
            RawEvent {
                time: t,
                kind: EventKind::Death,
                from: Some(from),
                to: None,
            }
        };
        if let Some(log) = log.as_deref_mut() {
            log.push(ev);
        }
    }
}

/// Labels for genome sites: initial sites keep their own names.
struct Labels {
    init: Vec<String>,
}

impl Labels {
    fn new(init: &Genotype, genome_size: usize) -> Result<Self> {
        let init: Vec<String> = init.sites().map(String::from).collect();
        if init.len() > genome_size {
            return Err(BdsError::InvalidInput(format!(
                "initial genotype has {} sites but the genome has only {genome_size}",
                init.len()
            )));
        }
        for name in &init {
            if let Some(idx) = name.strip_prefix('s').and_then(|d| d.parse::<usize>().ok()) {
                if idx >= init.len() && idx < genome_size && format!("s{idx}") == *name {
                    return Err(BdsError::InvalidInput(format!(
                        "initial site label `{name}` collides with a generated label"
                    )));
                }
            }
        }
        Ok(Self { init })
    }

    fn label(&self, site: u32) -> String {
        match self.init.get(site as usize) {
            Some(s) => s.clone(),
            None => format!("s{site}"),
        }
    }
}

/// Simulate one genotype trajectory started at time 0 from `init`.
pub fn simulate_with_rng<R: Rng>(
    genome_size: usize,
    rates: &RateTriple,
    init: &Genotype,
    obs_times: &[f64],
    rng: &mut R,
) -> Result<(Vec<Observation>, EventLog)> {
    RateTriple::new(rates.lambda, rates.nu, rates.mu)?;
    if genome_size == 0 || genome_size >= EMPTY as usize {
        return Err(BdsError::InvalidParameter(format!(
            "genome size {genome_size} out of range"
        )));
    }
    if obs_times.iter().any(|t| !t.is_finite() || *t < 0.0)
        || obs_times.windows(2).any(|w| !(w[1] > w[0]))
    {
        return Err(BdsError::InvalidInput(
            "observation times must be non-negative and strictly increasing".into(),
        ));
    }
    let labels = Labels::new(init, genome_size)?;
    let mut g = Genome::new(genome_size);
    for i in 0..labels.init.len() {
        g.insert(i as u32);
    }
    let mut raw = Vec::new();
    let mut stats = PathStats::default();
    let mut observations = Vec::with_capacity(obs_times.len());
    let mut t = 0.0;
    for &t_obs in obs_times {
        advance(&mut g, rates, t, t_obs, rng, &mut stats, Some(&mut raw))?;
        t = t_obs;
        let mut sites = g.occupied.clone();
        sites.sort_unstable();
        observations.push(Observation {
            time: t_obs,
            genotype: sites.into_iter().map(|s| labels.label(s)).collect(),
        });
    }
    let events = raw
        .into_iter()
        .map(|e| Event {
            time: e.time,
            kind: e.kind,
            site_from: e.from.map(|s| labels.label(s)),
            site_to: e.to.map(|s| labels.label(s)),
        })
        .collect();
    Ok((observations, EventLog { events }))
}

/// Seeded simulation on stream 0.
pub fn simulate(
    genome_size: usize,
    rates: &RateTriple,
    init: &Genotype,
    obs_times: &[f64],
    seed: u64,
) -> Result<(Vec<Observation>, EventLog)> {
    simulate_with_rng(genome_size, rates, init, obs_times, &mut rng_for(seed, 0))
}

/// One replicate from `(a, 0)`: reduced end state and path statistics.
fn reduced_path<R: Rng>(
    a: usize,
    t: f64,
    rates: &RateTriple,
    genome_size: usize,
    rng: &mut R,
) -> Result<((usize, usize), PathStats)> {
    let mut g = Genome::new(genome_size);
    for i in 0..a {
        g.insert(i as u32);
    }
    let mut stats = PathStats::default();
    advance(&mut g, rates, 0.0, t, rng, &mut stats, None)?;
    let l = g.occupied.iter().filter(|&&s| (s as usize) < a).count();
    Ok(((l, g.len() - l), stats))
}

/// End states and statistics of `n_reps` replicates, replicate `i` on stream `i`.
pub fn mc_paths(
    a: usize,
    t: f64,
    rates: &RateTriple,
    n_reps: usize,
    seed: u64,
    genome_size: usize,
) -> Result<Vec<((usize, usize), PathStats)>> {
    if a > genome_size {
        return Err(BdsError::InvalidInput("initial size exceeds genome size".into()));
    }
    (0..n_reps)
        .into_par_iter()
        .map(|rep| reduced_path(a, t, rates, genome_size, &mut rng_for(seed, rep as u64)))
        .collect()
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Empirical reduced end-state frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McTransition {
    pub a: usize,
    pub t: f64,
    pub n_reps: usize,
    pub counts: BTreeMap<(usize, usize), usize>,
}

impl McTransition {
    pub fn count(&self, l: usize, m: usize) -> usize {
        self.counts.get(&(l, m)).copied().unwrap_or(0)
    }

    pub fn frequency(&self, l: usize, m: usize) -> f64 {
        self.count(l, m) as f64 / self.n_reps as f64
    }

    /// Wilson 95% interval for one cell.
    pub fn interval(&self, l: usize, m: usize) -> (f64, f64) {
        wilson_interval(self.count(l, m), self.n_reps, 1.959963984540054)
    }
}

pub fn mc_transition(
    a: usize,
    t: f64,
    rates: &RateTriple,
    n_reps: usize,
    seed: u64,
    genome_size: usize,
) -> Result<McTransition> {
    let mut counts = BTreeMap::new();
    for (end, _) in mc_paths(a, t, rates, n_reps, seed, genome_size)? {
        *counts.entry(end).or_insert(0) += 1;
    }
    Ok(McTransition {
        a,
        t,
        n_reps,
        counts,
    })
}

/// Means and standard errors of `(births, shifts, deaths, particle time)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McMeans {
    pub n: usize,
    pub n_reps: usize,
    pub acceptance_rate: f64,
    pub means: [f64; 4],
    pub std_errors: [f64; 4],
}

fn summarize<'a>(samples: impl Iterator<Item = &'a PathStats>, n_reps: usize) -> McMeans {
    let mut n = 0usize;
    let mut s = [0.0; 4];
    let mut s2 = [0.0; 4];
    for p in samples {
        n += 1;
        for (i, x) in p.as_array().into_iter().enumerate() {
            s[i] += x;
            s2[i] += x * x;
        }
    }
    let nf = n.max(1) as f64;
    let mut means = [0.0; 4];
    let mut se = [0.0; 4];
    for i in 0..4 {
        means[i] = s[i] / nf;
        let var = if n > 1 {
            ((s2[i] - nf * means[i] * means[i]) / (nf - 1.0)).max(0.0)
        } else {
            0.0
        };
        se[i] = (var / nf).sqrt();
    }
    McMeans {
        n,
        n_reps,
        acceptance_rate: n as f64 / n_reps.max(1) as f64,
        means,
        std_errors: se,
    }
}

/// Unconditioned path-statistic means over all replicates.
pub fn mc_unconditioned_stats(
    a: usize,
    t: f64,
    rates: &RateTriple,
    n_reps: usize,
    seed: u64,
    genome_size: usize,
) -> Result<McMeans> {
    let paths = mc_paths(a, t, rates, n_reps, seed, genome_size)?;
    Ok(summarize(paths.iter().map(|(_, s)| s), n_reps))
}

/// Path-statistic means among replicates that end at `endpoint`.
pub fn mc_conditioned_stats(
    a: usize,
    endpoint: (usize, usize),
    t: f64,
    rates: &RateTriple,
    n_reps: usize,
    seed: u64,
    genome_size: usize,
) -> Result<McMeans> {
    let paths = mc_paths(a, t, rates, n_reps, seed, genome_size)?;
    let out = summarize(
        paths.iter().filter(|(e, _)| *e == endpoint).map(|(_, s)| s),
        n_reps,
    );
    if out.acceptance_rate < 1e-4 {
        return Err(BdsError::LowAcceptance {
            rate: out.acceptance_rate,
        });
    }
    Ok(out)
}

/// Sparse generator of the two-type chain on `{l ≤ l_cap, m ≤ m_cap}`.
#[derive(Debug, Clone)]
pub struct TruncatedGenerator {
    pub l_cap: usize,
    pub m_cap: usize,
    /// Off-diagonal rates within the truncated space.
    pub edges: Vec<Vec<(usize, f64)>>,
    /// Total exit rate of each state, including mass leaving the caps.
    pub exit: Vec<f64>,
    pub uniform_rate: f64,
}

impl TruncatedGenerator {
    pub fn new(rates: &RateTriple, l_cap: usize, m_cap: usize) -> Self {
        let idx = |l: usize, m: usize| l * (m_cap + 1) + m;
        let size = (l_cap + 1) * (m_cap + 1);
        let mut edges = vec![Vec::new(); size];
        let mut exit = vec![0.0; size];
        for l in 0..=l_cap {
            for m in 0..=m_cap {
                let i = idx(l, m);
                let (lf, mf) = (l as f64, m as f64);
                let mut push = |target: Option<usize>, rate: f64| {
                    if rate > 0.0 {
                        exit[i] += rate;
                        if let Some(j) = target {
                            edges[i].push((j, rate));
                        }
                    }
                };
                let up = (m < m_cap).then(|| idx(l, m + 1));
                push(up, (lf + mf) * rates.lambda);
                if l > 0 {
                    let shift = (m < m_cap).then(|| idx(l - 1, m + 1));
                    push(shift, lf * rates.nu);
                    push(Some(idx(l - 1, m)), lf * rates.mu);
                }
                if m > 0 {
                    push(Some(idx(l, m - 1)), mf * rates.mu);
                }
            }
        }
        let uniform_rate = exit.iter().copied().fold(0.0, f64::max);
        Self {
            l_cap,
            m_cap,
            edges,
            exit,
            uniform_rate,
        }
    }

    pub fn index(&self, l: usize, m: usize) -> usize {
        l * (self.m_cap + 1) + m
    }
}

/// Transient distribution from `(a, 0)` on the truncated chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformizedRow {
    pub l_cap: usize,
    pub m_cap: usize,
    pub p: Vec<f64>,
    /// Mass that left the truncated space or was cut from the Poisson series.
    pub leak: f64,
}

impl UniformizedRow {
    pub fn get(&self, l: usize, m: usize) -> f64 {
        if l > self.l_cap || m > self.m_cap {
            0.0
        } else {
            self.p[l * (self.m_cap + 1) + m]
        }
    }
}

pub fn uniformization_probs(
    a: usize,
    t: f64,
    rates: &RateTriple,
    caps: (usize, usize),
) -> Result<UniformizedRow> {
    let (l_cap, m_cap) = caps;
    if a > l_cap {
        return Err(BdsError::InvalidParameter(format!(
            "start count {a} exceeds type-1 cap {l_cap}"
        )));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(BdsError::InvalidParameter(format!("invalid time {t}")));
    }
    let gen = TruncatedGenerator::new(rates, l_cap, m_cap);
    let size = gen.exit.len();
    let mut v = vec![0.0; size];
    v[gen.index(a, 0)] = 1.0;
    let lam = gen.uniform_rate * t;
    if lam == 0.0 {
        return Ok(UniformizedRow {
            l_cap,
            m_cap,
            p: v,
            leak: 0.0,
        });
    }
    let big = gen.uniform_rate;
    let mut acc = vec![0.0; size];
    let mut log_w = -lam;
    let mut cum = 0.0;
    let max_terms = (lam + 50.0 * lam.sqrt() + 200.0) as usize;
    let mut next = vec![0.0; size];
    for k in 0..=max_terms {
        if k > 0 {
            next.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..size {
                let vi = v[i];
                if vi == 0.0 {
                    continue;
                }
                next[i] += vi * (1.0 - gen.exit[i] / big);
                for &(j, r) in &gen.edges[i] {
                    next[j] += vi * r / big;
                }
            }
            std::mem::swap(&mut v, &mut next);
            log_w += lam.ln() - (k as f64).ln();
        }
        let w = log_w.exp();
        cum += w;
        for (a, x) in acc.iter_mut().zip(&v) {
            *a += w * x;
        }
        if k as f64 > lam && 1.0 - cum < 1e-12 {
            break;
        }
    }
    let leak = (1.0 - acc.iter().sum::<f64>()).max(0.0);
    if leak > 1e-9 {
        return Err(BdsError::CapInsufficient { leaked: leak });
    }
    Ok(UniformizedRow {
        l_cap,
        m_cap,
        p: acc,
        leak,
    })
}

/// A simulated panel together with its genotype segments and event logs.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub dataset: PanelDataset,
    /// Genotype observations per contiguous trajectory segment.
    pub segments: Vec<(String, Vec<Observation>)>,
    /// Covariates of each segment (full width, intercept first).
    pub segment_covariates: Vec<Vec<f64>>,
    pub events: Vec<(String, EventLog)>,
}

fn fresh_genotype(k: usize) -> Genotype {
    (0..k).map(|i| format!("s{i}")).collect()
}

/// Independent intervals with a common rate triple and no covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimpleRecipe {
    pub n_intervals: usize,
    pub dt: f64,
    pub rates: RateTriple,
    pub init_min: usize,
    pub init_max: usize,
    pub genome_size: usize,
}

impl Default for SimpleRecipe {
    fn default() -> Self {
        Self {
            n_intervals: 200,
            dt: 0.4,
            rates: RateTriple {
                lambda: 0.07,
                nu: 0.02,
                mu: 0.12,
            },
            init_min: 1,
            init_max: 15,
            genome_size: DEFAULT_GENOME_SIZE,
        }
    }
}

/// Each interval is its own unit with two observations.
pub fn simulate_simple(recipe: &SimpleRecipe, seed: u64) -> Result<SimulatedPanel> {
    if recipe.init_min > recipe.init_max {
        return Err(BdsError::InvalidParameter("empty initial-size range".into()));
    }
    let width = (recipe.n_intervals.max(1) as f64).log10().floor() as usize + 1;
    let units: Vec<(String, Vec<Observation>, EventLog)> = (0..recipe.n_intervals)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i as u64);
            let k = rng.random_range(recipe.init_min..=recipe.init_max);
            let (obs, log) = simulate_with_rng(
                recipe.genome_size,
                &recipe.rates,
                &fresh_genotype(k),
                &[0.0, recipe.dt],
                &mut rng,
            )?;
            Ok((format!("u{i:0width$}"), obs, log))
        })
        .collect::<Result<_>>()?;
    let names = vec![INTERCEPT.to_string()];
    let inputs = units
        .iter()
        .map(|(id, obs, _)| crate::model::PatientInput {
            id: id.clone(),
            covariates: vec![1.0],
            observations: obs.clone(),
        })
        .collect();
    let dataset = PanelDataset::from_observations(names, inputs)?;
    Ok(SimulatedPanel {
        dataset,
        segment_covariates: vec![vec![1.0]; units.len()],
        segments: units.iter().map(|(id, o, _)| (id.clone(), o.clone())).collect(),
        events: units.into_iter().map(|(id, _, l)| (id, l)).collect(),
    })
}

/// Patients with uniform covariates and log-linear rates; every interval
/// starts from a freshly drawn initial genotype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRecipe {
    pub n_patients: usize,
    pub beta: RegressionCoefficients,
    /// Uniform sampling box for each non-intercept covariate.
    pub boxes: Vec<(f64, f64)>,
    pub obs_min: usize,
    pub obs_max: usize,
    pub dt: f64,
    pub init_min: usize,
    pub init_max: usize,
    pub genome_size: usize,
}

impl CovariateRecipe {
    /// The reference effect sizes on three covariates plus intercept.
    pub fn reference_beta() -> RegressionCoefficients {
        let ln = |v: [f64; 4]| v.iter().map(|x| x.ln()).collect::<Vec<_>>();
        RegressionCoefficients {
            beta_lambda: ln([7.5, 0.5, 0.3, 3.0]),
            beta_nu: ln([0.5, 8.0, 0.5, 0.9]),
            beta_mu: ln([4.0, 0.3, 0.8, 0.9]),
        }
    }

    pub fn covariate_names(&self) -> Vec<String> {
        let mut names = vec![INTERCEPT.to_string()];
        names.extend((1..=self.boxes.len()).map(|i| format!("z{i}")));
        names
    }
}

impl Default for CovariateRecipe {
    fn default() -> Self {
        Self {
            n_patients: 100,
            beta: Self::reference_beta(),
            boxes: vec![(0.0, 2.0), (6.0, 10.0), (4.0, 6.0)],
            obs_min: 2,
            obs_max: 7,
            dt: 0.4,
            init_min: 2,
            init_max: 14,
            genome_size: DEFAULT_GENOME_SIZE,
        }
    }
}

pub fn simulate_covariates(recipe: &CovariateRecipe, seed: u64) -> Result<SimulatedPanel> {
    let names = recipe.covariate_names();
    let model = ModelSpec::full(&names);
    if recipe.beta.widths() != model.widths() {
        return Err(BdsError::InvalidParameter(format!(
            "coefficient widths {:?} do not match {} covariates plus intercept",
            recipe.beta.widths(),
            recipe.boxes.len()
        )));
    }
    if recipe.obs_min < 2 || recipe.obs_min > recipe.obs_max || recipe.init_min > recipe.init_max {
        return Err(BdsError::InvalidParameter("invalid recipe ranges".into()));
    }
    let width = (recipe.n_patients.max(1) as f64).log10().floor() as usize + 1;
    type Unit = (String, Vec<f64>, Vec<ReducedInterval>, Vec<(String, Vec<Observation>, EventLog)>);
    let patients: Vec<Unit> = (0..recipe.n_patients)
        .into_par_iter()
        .map(|p| {
            let mut rng = rng_for(seed, p as u64);
            let mut z = vec![1.0];
            z.extend(recipe.boxes.iter().map(|&(lo, hi)| rng.random_range(lo..hi)));
            let rates = model.rates_for(&recipe.beta, &z)?;
            let n_obs = rng.random_range(recipe.obs_min..=recipe.obs_max);
            let id = format!("p{p:0width$}");
            let mut intervals = Vec::new();
            let mut segs = Vec::new();
            for j in 0..n_obs - 1 {
                let k = rng.random_range(recipe.init_min..=recipe.init_max);
                let t0 = j as f64 * recipe.dt;
                let (obs, log) = simulate_with_rng(
                    recipe.genome_size,
                    &rates,
                    &fresh_genotype(k),
                    &[0.0, recipe.dt],
                    &mut rng,
                )?;
                intervals.push(crate::model::reduce_pair(
                    &obs[0].genotype,
                    &obs[1].genotype,
                    recipe.dt,
                )?);
                let shifted = obs
                    .into_iter()
                    .map(|o| Observation {
                        time: o.time + t0,
                        genotype: o.genotype,
                    })
                    .collect();
                let log = EventLog {
                    events: log
                        .events
                        .into_iter()
                        .map(|e| Event {
                            time: e.time + t0,
                            ..e
                        })
                        .collect(),
                };
                segs.push((format!("{id}-{j}"), shifted, log));
            }
            Ok((id, z, intervals, segs))
        })
        .collect::<Result<_>>()?;

    let mut segments = Vec::new();
    let mut segment_covariates = Vec::new();
    let mut events = Vec::new();
    let mut units = Vec::with_capacity(patients.len());
    for (id, z, ivs, segs) in patients {
        for (sid, obs, log) in segs {
            segments.push((sid.clone(), obs));
            segment_covariates.push(z.clone());
            events.push((sid, log));
        }
        units.push((id, z, ivs));
    }
    Ok(SimulatedPanel {
        dataset: PanelDataset::from_intervals(names, units)?,
        segments,
        segment_covariates,
        events,
    })
}
