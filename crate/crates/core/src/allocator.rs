//! Budget-constrained pseudonym allocation.
//!
//! Each VMU receives `R` pseudonyms at the start of a period and then wants
//! `D ~ Poisson(f T)` changes. Its utility is
//!
//! ```text
//! U(R, D) = beta * H * min(R, D) - h * (R - D)^+ - r * (D - R)^+
//! ```
//!
//! with `H` the VMU's average privacy entropy at its nominal cadence. The
//! expected utility is concave in `R` and separable across VMUs, so the
//! greedy marginal allocator in [`optimize_exact`] is optimal under the
//! budget `sum R <= floor(theta T)`. [`optimize_ga`] is the genetic solver and
//! [`equal_allocation`] the baseline.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{DemandModel, PoissonTerms};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("invalid utility parameter `{field}`: {reason}")]
    BadUtility { field: &'static str, reason: &'static str },
    #[error("allocation problem needs at least one VMU")]
    NoVmus,
    #[error("invalid GA configuration: {0}")]
    BadGaConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityParams {
    pub beta: f64,
    pub h_store: f64,
    pub r_penalty: f64,
    pub avg_entropy: f64,
}

impl UtilityParams {
    pub fn new(beta: f64, h_store: f64, r_penalty: f64, avg_entropy: f64) -> Result<Self, AllocError> {
        let check = |field, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(AllocError::BadUtility {
                    field,
                    reason: "must be finite and non-negative",
                })
            }
        };
        check("beta", beta)?;
        check("h_store", h_store)?;
        check("r_penalty", r_penalty)?;
        check("avg_entropy", avg_entropy)?;
        Ok(Self {
            beta,
            h_store,
            r_penalty,
            avg_entropy,
        })
    }

    /// Profit of one served change.
    pub fn unit_profit(&self) -> f64 {
        self.beta * self.avg_entropy
    }
}

/// Utility of holding `r` pseudonyms when `d` changes were wanted.
pub fn realized_utility(r: u64, d: u64, params: &UtilityParams) -> f64 {
    let served = r.min(d) as f64;
    let leftover = r.saturating_sub(d) as f64;
    let shortage = d.saturating_sub(r) as f64;
    params.unit_profit() * served - params.h_store * leftover - params.r_penalty * shortage
}

/// Streams `E[U(k+1)] - E[U(k)]` for `k = 0, 1, ...`.
///
/// The increment is `(beta H + r) P(D > k) - h P(D <= k)`; survival values
/// are clamped to be non-increasing so the stream is exactly non-increasing.
#[derive(Debug, Clone)]
struct MarginalStream {
    terms: PoissonTerms,
    cdf: f64,
    survival: f64,
    upside: f64,
    h_store: f64,
}

impl MarginalStream {
    fn new(model: &DemandModel, params: &UtilityParams) -> Self {
        Self {
            terms: PoissonTerms::new(model.rate()),
            cdf: 0.0,
            survival: 1.0,
            upside: params.unit_profit() + params.r_penalty,
            h_store: params.h_store,
        }
    }

    /// Returns the next marginal and the survival value it used.
    fn next_pair(&mut self) -> (f64, f64) {
        self.cdf += self.terms.next().expect("infinite iterator");
        self.survival = (1.0 - self.cdf).max(0.0).min(self.survival);
        let s = self.survival;
        (self.upside * s - self.h_store * (1.0 - s), s)
    }
}

/// Expected utility as a function of the allocation, tabulated until the
/// demand survival function vanishes and extended linearly (slope `-h`)
/// beyond that point.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityCurve {
    values: Vec<f64>,
    tail_slope: f64,
}

impl UtilityCurve {
    pub fn new(model: &DemandModel, params: &UtilityParams, max_r: u64) -> Self {
        // E[U(0)] = -r * E[D]
        let mut values = vec![-params.r_penalty * model.rate()];
        let mut stream = MarginalStream::new(model, params);
        let mut acc = values[0];
        while (values.len() as u64) <= max_r {
            let (m, s) = stream.next_pair();
            acc += m;
            values.push(acc);
            if s == 0.0 {
                break;
            }
        }
        Self {
            values,
            tail_slope: -params.h_store,
        }
    }

    pub fn value(&self, r: u64) -> f64 {
        let last = self.values.len() as u64 - 1;
        if r <= last {
            self.values[r as usize]
        } else {
            self.values[last as usize] + self.tail_slope * (r - last) as f64
        }
    }
}

/// `E[U(r, D)]` for `D ~ Poisson(model.rate())`, evaluated through the
/// survival-sum identity `E[U(r)] = -r_pen E[D] + sum_{k<r} marginal_gain(k)`.
/// The result equals the pmf-weighted sum of [`realized_utility`] up to
/// floating-point rounding.
pub fn expected_utility(r: u64, model: &DemandModel, params: &UtilityParams) -> f64 {
    UtilityCurve::new(model, params, r).value(r)
}

pub fn marginal_gain(r: u64, model: &DemandModel, params: &UtilityParams) -> f64 {
    let mut stream = MarginalStream::new(model, params);
    let mut m = 0.0;
    for _ in 0..=r {
        let (next, s) = stream.next_pair();
        m = next;
        if s == 0.0 {
            break;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VmuDemand {
    pub model: DemandModel,
    pub params: UtilityParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    vmus: Vec<VmuDemand>,
    budget: u64,
}

impl AllocationProblem {
    pub fn new(vmus: Vec<VmuDemand>, budget: u64) -> Result<Self, AllocError> {
        if vmus.is_empty() {
            return Err(AllocError::NoVmus);
        }
        Ok(Self { vmus, budget })
    }

    /// Budget from a CA rate and period: `floor(theta * period)`.
    pub fn budget_from_rate(theta: f64, period: f64) -> u64 {
        (theta * period).floor().max(0.0) as u64
    }

    pub fn vmus(&self) -> &[VmuDemand] {
        &self.vmus
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.vmus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vmus.is_empty()
    }

    pub fn curves(&self) -> Vec<UtilityCurve> {
        self.vmus
            .iter()
            .map(|v| UtilityCurve::new(&v.model, &v.params, self.budget))
            .collect()
    }

    /// Global expected utility of a plan.
    pub fn objective(&self, plan: &AllocationPlan) -> f64 {
        self.vmus
            .iter()
            .zip(&plan.r)
            .map(|(v, &r)| expected_utility(r, &v.model, &v.params))
            .sum()
    }

    pub fn per_vmu_expected(&self, plan: &AllocationPlan) -> Vec<f64> {
        self.vmus
            .iter()
            .zip(&plan.r)
            .map(|(v, &r)| expected_utility(r, &v.model, &v.params))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub r: Vec<u64>,
}

impl AllocationPlan {
    pub fn zeros(m: usize) -> Self {
        Self { r: vec![0; m] }
    }

    pub fn total(&self) -> u64 {
        self.r.iter().sum()
    }

    pub fn is_feasible(&self, problem: &AllocationProblem) -> bool {
        self.r.len() == problem.len() && self.total() <= problem.budget()
    }
}

/// `floor(budget / m)` to every VMU; the remainder is withheld.
pub fn equal_allocation(problem: &AllocationProblem) -> AllocationPlan {
    let share = problem.budget() / problem.len() as u64;
    AllocationPlan {
        r: vec![share; problem.len()],
    }
}

/// Greedy marginal allocation: hand out pseudonyms one at a time to the VMU
/// with the largest positive marginal gain (lowest index on ties) until the
/// budget runs out or no marginal is positive.
pub fn optimize_exact(problem: &AllocationProblem) -> AllocationPlan {
    let mut streams: Vec<MarginalStream> = problem
        .vmus()
        .iter()
        .map(|v| MarginalStream::new(&v.model, &v.params))
        .collect();
    let mut next: Vec<f64> = streams.iter_mut().map(|s| s.next_pair().0).collect();
    let mut plan = AllocationPlan::zeros(problem.len());
    for _ in 0..problem.budget() {
        let (best, gain) = next.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |(bi, bg), (i, &g)| {
                if g > bg {
                    (i, g)
                } else {
                    (bi, bg)
                }
            },
        );
        if gain <= 0.0 {
            break;
        }
        plan.r[best] += 1;
        next[best] = streams[best].next_pair().0;
    }
    plan
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament_size: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub elitism: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 64,
            generations: 200,
            tournament_size: 3,
            crossover_rate: 0.9,
            mutation_rate: 0.05,
            elitism: 2,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), AllocError> {
        let bad = |m: &str| Err(AllocError::BadGaConfig(m.to_string()));
        if self.population < 2 {
            return bad("population must be at least 2");
        }
        if self.generations < 1 {
            return bad("generations must be at least 1");
        }
        if self.tournament_size < 1 {
            return bad("tournament_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return bad("crossover_rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad("mutation_rate must lie in [0, 1]");
        }
        if self.elitism > self.population {
            return bad("elitism cannot exceed the population");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Individual {
    genes: Vec<u64>,
    fitness: f64,
}

struct Fitness<'a> {
    curves: &'a [UtilityCurve],
}

impl Fitness<'_> {
    fn eval(&self, genes: &[u64]) -> f64 {
        self.curves.iter().zip(genes).map(|(c, &r)| c.value(r)).sum()
    }
}

/// Scales an over-budget chromosome proportionally and rounds down.
fn repair(genes: &mut [u64], budget: u64) {
    let total: u64 = genes.iter().sum();
    if total <= budget {
        return;
    }
    let scale = budget as f64 / total as f64;
    for g in genes.iter_mut() {
        *g = (*g as f64 * scale).floor() as u64;
    }
    // Float rounding can leave the sum a hair above budget.
    let mut i = 0;
    while genes.iter().sum::<u64>() > budget {
        if genes[i] > 0 {
            genes[i] -= 1;
        }
        i = (i + 1) % genes.len();
    }
}

/// Demand-proportional seed: expected demand, scaled into the budget.
fn proportional_plan(problem: &AllocationProblem) -> Vec<u64> {
    let mut genes: Vec<u64> = problem.vmus().iter().map(|v| v.model.rate().round() as u64).collect();
    repair(&mut genes, problem.budget());
    genes
}

fn by_fitness(a: &Individual, b: &Individual) -> Ordering {
    b.fitness.total_cmp(&a.fitness)
}

/// Genetic search over integer allocations.
///
/// Generation zero holds the equal plan, a demand-proportional plan and
/// random plans; elitism therefore guarantees the result is never worse than
/// [`equal_allocation`].
pub fn optimize_ga(problem: &AllocationProblem, ga: &GaConfig, seed: u64) -> Result<AllocationPlan, AllocError> {
    ga.validate()?;
    let budget = problem.budget();
    let m = problem.len();
    if budget == 0 {
        return Ok(AllocationPlan::zeros(m));
    }
    let curves = problem.curves();
    let fitness = Fitness { curves: &curves };
    let mut rng: ChaCha8Rng = seed::rng(seed, &[seed::stream::GA]);
    let step = Poisson::new(1.0).expect("valid rate");

    let make = |genes: Vec<u64>| {
        let fitness = fitness.eval(&genes);
        Individual { genes, fitness }
    };

    let mut population = vec![make(equal_allocation(problem).r)];
    if ga.population > 1 {
        population.push(make(proportional_plan(problem)));
    }
    let spread = (2 * budget / m as u64).max(1);
    while population.len() < ga.population {
        let mut genes: Vec<u64> = (0..m).map(|_| rng.gen_range(0..=spread)).collect();
        repair(&mut genes, budget);
        population.push(make(genes));
    }
    population.sort_by(by_fitness);
    let mut best = population[0].clone();

    for _ in 0..ga.generations {
        let mut next: Vec<Individual> = population[..ga.elitism].to_vec();
        while next.len() < ga.population {
            let a = tournament(&population, ga.tournament_size, &mut rng);
            let b = tournament(&population, ga.tournament_size, &mut rng);
            let mut genes = if rng.gen_bool(ga.crossover_rate) {
                a.genes
                    .iter()
                    .zip(&b.genes)
                    .map(|(&x, &y)| if rng.gen_bool(0.5) { x } else { y })
                    .collect()
            } else {
                a.genes.clone()
            };
            for g in genes.iter_mut() {
                if rng.gen_bool(ga.mutation_rate) {
                    let delta = step.sample(&mut rng) as u64;
                    *g = if rng.gen_bool(0.5) {
                        g.saturating_add(delta)
                    } else {
                        g.saturating_sub(delta)
                    };
                }
            }
            repair(&mut genes, budget);
            next.push(make(genes));
        }
        next.sort_by(by_fitness);
        if next[0].fitness > best.fitness {
            best = next[0].clone();
        }
        population = next;
    }
    Ok(AllocationPlan { r: best.genes })
}

fn tournament<'a>(population: &'a [Individual], size: usize, rng: &mut ChaCha8Rng) -> &'a Individual {
    let mut winner = population.choose(rng).expect("non-empty population");
    for _ in 1..size {
        let c = population.choose(rng).expect("non-empty population");
        if c.fitness > winner.fitness {
            winner = c;
        }
    }
    winner
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::demand_pmf;
    use proptest::prelude::*;

    fn params(beta: f64) -> UtilityParams {
        UtilityParams::new(beta, 0.1, 0.3, 0.625).unwrap()
    }

    fn model(rate: f64) -> DemandModel {
        DemandModel::new(rate, 1.0).unwrap()
    }

    /// Direct pmf-weighted expectation; the tail is treated as pure shortage.
    fn pmf_expectation(r: u64, m: &DemandModel, p: &UtilityParams) -> f64 {
        let pmf = demand_pmf(m, 1e-15).unwrap();
        let mut acc = 0.0;
        let mut head_mean = 0.0;
        for (d, &q) in pmf.probabilities.iter().enumerate() {
            acc += q * realized_utility(r, d as u64, p);
            head_mean += q * d as f64;
        }
        let tail_mean = m.rate() - head_mean;
        if r as usize <= pmf.n_trunc() {
            acc += pmf.truncation_mass * p.unit_profit() * r as f64
                - p.r_penalty * (tail_mean - r as f64 * pmf.truncation_mass);
        }
        acc
    }

    fn brute_force(problem: &AllocationProblem) -> f64 {
        fn rec(problem: &AllocationProblem, i: usize, left: u64, plan: &mut Vec<u64>, best: &mut f64) {
            if i == problem.len() {
                let v = problem.objective(&AllocationPlan { r: plan.clone() });
                if v > *best {
                    *best = v;
                }
                return;
            }
            for r in 0..=left {
                plan.push(r);
                rec(problem, i + 1, left - r, plan, best);
                plan.pop();
            }
        }
        let mut best = f64::NEG_INFINITY;
        rec(problem, 0, problem.budget(), &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn realized_utility_examples() {
        let p = UtilityParams::new(1.0, 0.1, 0.3, 0.625).unwrap();
        assert_eq!(realized_utility(0, 0, &p), 0.0);
        assert!((realized_utility(5, 5, &p) - 3.125).abs() < 1e-12);
        assert!((realized_utility(7, 5, &p) - 2.925).abs() < 1e-12);
        assert!((realized_utility(3, 5, &p) - 1.275).abs() < 1e-12);
    }

    #[test]
    fn expected_utility_limits() {
        let p = params(1.0);
        for r in [0, 3, 17] {
            assert!((expected_utility(r, &model(0.0), &p) + 0.1 * r as f64).abs() < 1e-12);
        }
        assert!((expected_utility(0, &model(2.0), &p) + 0.6).abs() < 1e-12);
    }

    #[test]
    fn expected_utility_matches_pmf_sum() {
        let p = params(1.0);
        for rate in [0.5, 2.0, 9.0, 60.0] {
            for r in [0u64, 1, 2, 5, 10, 70, 150] {
                let a = expected_utility(r, &model(rate), &p);
                let b = pmf_expectation(r, &model(rate), &p);
                assert!((a - b).abs() < 1e-9, "rate {rate} r {r}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn expected_utility_matches_monte_carlo() {
        let p = params(1.0);
        let m = model(2.0);
        let n = 10_000_000u64;
        let mut rng = seed::rng(11, &[]);
        let dist = Poisson::new(2.0).unwrap();
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let d: f64 = dist.sample(&mut rng);
            let u = realized_utility(2, d as u64, &p);
            sum += u;
            sq += u * u;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = expected_utility(2, &m, &p);
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn marginal_gain_limits_and_finite_difference() {
        let p = params(1.0);
        let m = model(3.0);
        assert!((marginal_gain(60, &m, &p) + 0.1).abs() < 1e-12);
        let big = model(500.0);
        assert!((marginal_gain(0, &big, &p) - (0.625 + 0.3)).abs() < 1e-12);
        for r in 0..40 {
            let fd = expected_utility(r + 1, &m, &p) - expected_utility(r, &m, &p);
            assert!((fd - marginal_gain(r, &m, &p)).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_with_zero_budget() {
        let prob = AllocationProblem::new(
            vec![
                VmuDemand {
                    model: model(5.0),
                    params: params(1.0)
                };
                3
            ],
            0,
        )
        .unwrap();
        assert_eq!(optimize_exact(&prob), AllocationPlan::zeros(3));
        assert_eq!(equal_allocation(&prob), AllocationPlan::zeros(3));
        assert_eq!(
            optimize_ga(&prob, &GaConfig::default(), 1).unwrap(),
            AllocationPlan::zeros(3)
        );
    }

    #[test]
    fn exact_single_vmu_hits_critical_fractile() {
        let p = params(1.0);
        let m = DemandModel::new(5.0, 1.0).unwrap();
        let prob = AllocationProblem::new(vec![VmuDemand { model: m, params: p }], 1_000).unwrap();
        let plan = optimize_exact(&prob);
        // Exhaustive scan oracle over r in 0..=200.
        let best = (0..=200u64)
            .max_by(|&a, &b| {
                expected_utility(a, &m, &p)
                    .total_cmp(&expected_utility(b, &m, &p))
                    .then(b.cmp(&a))
            })
            .unwrap();
        assert_eq!(plan.r[0], best);
        let ratio = p.h_store / (p.unit_profit() + p.r_penalty + p.h_store);
        let s = crate::demand::survival_curve(5.0, 200);
        let fractile = s.iter().position(|&x| x < ratio).unwrap() as u64;
        assert_eq!(plan.r[0], fractile);
    }

    #[test]
    fn exact_matches_enumeration_two_vmus() {
        let p = UtilityParams::new(1.0, 0.1, 0.3, 0.625).unwrap();
        let prob = AllocationProblem::new(
            vec![
                VmuDemand {
                    model: model(2.0),
                    params: p,
                },
                VmuDemand {
                    model: model(8.0),
                    params: p,
                },
            ],
            8,
        )
        .unwrap();
        let plan = optimize_exact(&prob);
        assert!(plan.is_feasible(&prob));
        assert!((prob.objective(&plan) - brute_force(&prob)).abs() < 1e-9);
    }

    #[test]
    fn equal_allocation_examples() {
        let vmu = VmuDemand {
            model: model(1.0),
            params: params(1.0),
        };
        let p6 = AllocationProblem::new(vec![vmu; 6], AllocationProblem::budget_from_rate(10.0, 60.0)).unwrap();
        assert_eq!(equal_allocation(&p6).r, vec![100; 6]);
        let p3 = AllocationProblem::new(vec![vmu; 3], 7).unwrap();
        assert_eq!(equal_allocation(&p3).r, vec![2, 2, 2]);
    }

    #[test]
    fn ga_config_validation() {
        let bad = GaConfig {
            population: 1,
            ..GaConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GaConfig {
            generations: 0,
            ..GaConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GaConfig {
            elitism: 100,
            ..GaConfig::default()
        };
        assert!(bad.validate().is_err());
        let prob = AllocationProblem::new(
            vec![VmuDemand {
                model: model(1.0),
                params: params(1.0),
            }],
            3,
        )
        .unwrap();
        assert!(optimize_ga(
            &prob,
            &GaConfig {
                mutation_rate: 2.0,
                ..GaConfig::default()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn ga_is_deterministic_and_feasible() {
        let vmus = [60.0, 72.0, 84.0, 96.0, 108.0, 120.0]
            .iter()
            .map(|&l| VmuDemand {
                model: DemandModel::new(l / 60.0, 60.0).unwrap(),
                params: params(1.0),
            })
            .collect();
        let prob = AllocationProblem::new(vmus, 600).unwrap();
        let a = optimize_ga(&prob, &GaConfig::default(), 7).unwrap();
        let b = optimize_ga(&prob, &GaConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        assert!(a.is_feasible(&prob));
        let exact = prob.objective(&optimize_exact(&prob));
        let ga = prob.objective(&a);
        assert!(ga >= prob.objective(&equal_allocation(&prob)));
        assert!(ga >= exact - 0.01 * exact.abs(), "ga {ga} exact {exact}");
    }

    #[test]
    fn repair_respects_budget() {
        let mut g = vec![10, 20, 30];
        repair(&mut g, 12);
        assert!(g.iter().sum::<u64>() <= 12);
        assert_eq!(g, vec![2, 4, 6]);
    }

    proptest! {
        #[test]
        fn realized_peaks_at_demand(d in 0u64..200, beta in 0.0f64..3.0, h in 0.0f64..1.0, r in 0.0f64..1.0, hbar in 0.0f64..2.0) {
            let p = UtilityParams::new(beta, h, r, hbar).unwrap();
            let at_d = realized_utility(d, d, &p);
            for k in 0..250 {
                prop_assert!(realized_utility(k, d, &p) <= at_d + 1e-12);
            }
        }

        #[test]
        fn budget_monotonicity(rates in proptest::collection::vec(0.0f64..12.0, 1..4), budget in 0u64..25) {
            let vmus: Vec<_> = rates.iter().map(|&l| VmuDemand { model: model(l), params: params(1.0) }).collect();
            let small = AllocationProblem::new(vmus.clone(), budget).unwrap();
            let large = AllocationProblem::new(vmus, budget + 1).unwrap();
            let a = small.objective(&optimize_exact(&small));
            let b = large.objective(&optimize_exact(&large));
            prop_assert!(b >= a - 1e-12);
        }
    }
}
