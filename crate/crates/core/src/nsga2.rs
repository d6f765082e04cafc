//! NSGA-II over bounded integer decision vectors with two objectives.
//!
//! The first objective is minimised and the second maximised. The engine is
//! generic over a [`Problem`]; fitness evaluation of a generation fans out over
//! the current rayon pool with per-individual seeds, while every operator draws
//! from one sequential RNG, so results never depend on the worker count.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics;
use crate::seed::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SearchError {
    #[error("{0}")]
    Argument(String),
}

/// Objective pair: `f1` is minimised, `f2` maximised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    pub f1: f64,
    pub f2: f64,
}

impl Objectives {
    pub fn new(f1: f64, f2: f64) -> Self {
        Self { f1, f2 }
    }
}

/// `a` is no worse than `b` in both objectives and strictly better in one.
pub fn dominates(a: &Objectives, b: &Objectives) -> bool {
    a.f1 <= b.f1 && a.f2 >= b.f2 && (a.f1 < b.f1 || a.f2 > b.f2)
}

/// Closed integer range of one decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneBounds {
    pub lo: i64,
    pub hi: i64,
}

impl GeneBounds {
    pub fn new(lo: i64, hi: i64) -> Self {
        assert!(lo <= hi, "empty range [{lo}, {hi}]");
        Self { lo, hi }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> i64 {
        rng.gen_range(self.lo..=self.hi)
    }

    pub fn clamp(&self, v: i64) -> i64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, v: i64) -> bool {
        (self.lo..=self.hi).contains(&v)
    }
}

pub trait Problem: Sync {
    /// Whatever the evaluation produces besides the objectives.
    type Output: Clone + Send;

    fn bounds(&self) -> &[GeneBounds];

    /// Must be a pure function of `(genes, seed)`.
    fn evaluate(&self, genes: &[i64], seed: u64) -> Self::Output;

    fn objectives(output: &Self::Output) -> Objectives;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual<O> {
    pub genes: Vec<i64>,
    pub output: O,
    pub objectives: Objectives,
    /// 1-based front index; 0 until sorted.
    pub rank: usize,
    pub crowding: f64,
}

impl<O> Individual<O> {
    pub fn new(genes: Vec<i64>, output: O, objectives: Objectives) -> Self {
        Self {
            genes,
            output,
            objectives,
            rank: 0,
            crowding: 0.0,
        }
    }
}

/// Partition of a population into fronts `F1..FK`, by index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrontSet {
    pub fronts: Vec<Vec<usize>>,
}

/// Fast non-dominated sort. Members of each front keep ascending index order.
pub fn non_dominated_sort(objs: &[Objectives]) -> FrontSet {
    let n = objs.len();
    let mut dominated_by_me: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut domination_count = vec![0usize; n];
    for i in 0..n {
        for j in i + 1..n {
            if dominates(&objs[i], &objs[j]) {
                dominated_by_me[i].push(j);
                domination_count[j] += 1;
            } else if dominates(&objs[j], &objs[i]) {
                dominated_by_me[j].push(i);
                domination_count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| domination_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by_me[i] {
                domination_count[j] -= 1;
                if domination_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::replace(&mut current, next));
    }
    FrontSet { fronts }
}

/// Crowding distance of each member of one front, in `members` order.
///
/// Per objective the extreme members get infinity and interior members the
/// normalised gap between their neighbours; objectives with zero spread are skipped.
pub fn crowding_distance(objs: &[Objectives], members: &[usize]) -> Vec<f64> {
    let mut dist = vec![0.0; members.len()];
    let getters: [fn(&Objectives) -> f64; 2] = [|o| o.f1, |o| o.f2];
    for get in getters {
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.sort_by(|&a, &b| {
            get(&objs[members[a]])
                .partial_cmp(&get(&objs[members[b]]))
                .unwrap_or(Ordering::Equal)
        });
        let lo = get(&objs[members[order[0]]]);
        let hi = get(&objs[members[*order.last().unwrap()]]);
        if hi == lo {
            continue;
        }
        dist[order[0]] = f64::INFINITY;
        dist[*order.last().unwrap()] = f64::INFINITY;
        for w in order.windows(3) {
            let gap = get(&objs[members[w[2]]]) - get(&objs[members[w[0]]]);
            dist[w[1]] += gap / (hi - lo);
        }
    }
    dist
}

/// Sorts `pop` into fronts and stores rank and crowding on every member.
pub fn assign_rank_and_crowding<O>(pop: &mut [Individual<O>]) -> FrontSet {
    let objs: Vec<Objectives> = pop.iter().map(|i| i.objectives).collect();
    let fronts = non_dominated_sort(&objs);
    for (r, front) in fronts.fronts.iter().enumerate() {
        let cd = crowding_distance(&objs, front);
        for (&i, d) in front.iter().zip(cd) {
            pop[i].rank = r + 1;
            pop[i].crowding = d;
        }
    }
    fronts
}

/// Crowded comparison: lower rank wins, then larger crowding; `None` on a full tie.
pub fn crowded_compare<O>(a: &Individual<O>, b: &Individual<O>) -> Option<Ordering> {
    match a.rank.cmp(&b.rank) {
        Ordering::Less => Some(Ordering::Greater),
        Ordering::Greater => Some(Ordering::Less),
        Ordering::Equal => match a.crowding.partial_cmp(&b.crowding) {
            Some(Ordering::Equal) | None => None,
            ord => ord,
        },
    }
}

/// One binary tournament: two uniform draws (with replacement), crowded comparison,
/// coin flip on a full tie. Returns the winner's index.
pub fn binary_tournament<O, R: Rng>(pop: &[Individual<O>], rng: &mut R) -> usize {
    let a = rng.gen_range(0..pop.len());
    let b = rng.gen_range(0..pop.len());
    match crowded_compare(&pop[a], &pop[b]) {
        Some(Ordering::Greater) => a,
        Some(_) => b,
        None => {
            if rng.gen_bool(0.5) {
                a
            } else {
                b
            }
        }
    }
}

/// `pop.len() / 2` parent pairs, each from two tournaments.
pub fn select_parents<O, R: Rng>(pop: &[Individual<O>], rng: &mut R) -> Vec<(usize, usize)> {
    (0..pop.len() / 2)
        .map(|_| (binary_tournament(pop, rng), binary_tournament(pop, rng)))
        .collect()
}

/// Swaps the tails `[cut, d)` of two parents.
pub fn crossover_at(a: &[i64], b: &[i64], cut: usize) -> (Vec<i64>, Vec<i64>) {
    let mut c1 = a[..cut].to_vec();
    c1.extend_from_slice(&b[cut..]);
    let mut c2 = b[..cut].to_vec();
    c2.extend_from_slice(&a[cut..]);
    (c1, c2)
}

/// With probability `p_c`, cuts at a uniform point in `[1, d-1]` and swaps tails;
/// otherwise returns copies.
pub fn single_point_crossover<R: Rng>(
    a: &[i64],
    b: &[i64],
    rng: &mut R,
    p_c: f64,
) -> Result<(Vec<i64>, Vec<i64>), SearchError> {
    if a.len() != b.len() {
        return Err(SearchError::Argument(format!(
            "parents of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() >= 2 && rng.gen_bool(p_c) {
        let cut = rng.gen_range(1..a.len());
        Ok(crossover_at(a, b, cut))
    } else {
        Ok((a.to_vec(), b.to_vec()))
    }
}

/// Redraws each gene independently with probability `p_m`, uniformly within its bounds.
pub fn uniform_mutation<R: Rng>(genes: &mut [i64], bounds: &[GeneBounds], rng: &mut R, p_m: f64) {
    for (g, b) in genes.iter_mut().zip(bounds) {
        if rng.gen_bool(p_m) {
            *g = b.sample(rng);
        }
    }
}

/// Elitist survivor selection from `P ∪ Q`: whole fronts by rank, then the most
/// isolated members of the first front that does not fit.
pub fn replacement<O>(parents: Vec<Individual<O>>, offspring: Vec<Individual<O>>) -> Vec<Individual<O>> {
    let target = parents.len();
    let mut merged: Vec<Option<Individual<O>>> = Vec::new();
    let mut pool: Vec<Individual<O>> = parents;
    pool.extend(offspring);
    let fronts = assign_rank_and_crowding(&mut pool);
    merged.extend(pool.into_iter().map(Some));

    let mut next = Vec::with_capacity(target);
    for front in fronts.fronts {
        if next.len() + front.len() <= target {
            next.extend(front.iter().map(|&i| merged[i].take().unwrap()));
            if next.len() == target {
                break;
            }
        } else {
            let mut rest: Vec<Individual<O>> =
                front.iter().map(|&i| merged[i].take().unwrap()).collect();
            // stable: equal distances keep index order
            rest.sort_by(|a, b| b.crowding.partial_cmp(&a.crowding).unwrap_or(Ordering::Equal));
            rest.truncate(target - next.len());
            next.extend(rest);
            break;
        }
    }
    next
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    pub pop_size: usize,
    pub generations: usize,
    pub p_c: f64,
    /// Per-gene mutation probability; `None` means `1 / d`.
    pub p_m: Option<f64>,
    pub seed: u64,
    /// Hypervolume reference point.
    pub reference: Objectives,
}

impl SearchParams {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.pop_size < 4 || self.pop_size % 2 != 0 {
            return Err(SearchError::Argument(format!(
                "population size must be even and at least 4, got {}",
                self.pop_size
            )));
        }
        if !(0.0..=1.0).contains(&self.p_c) {
            return Err(SearchError::Argument(format!("p_c {} outside [0, 1]", self.p_c)));
        }
        if let Some(p) = self.p_m {
            if !(0.0..=1.0).contains(&p) {
                return Err(SearchError::Argument(format!("p_m {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// A non-dominated point with the genes that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontEntry {
    pub objectives: Objectives,
    pub genes: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub gen: usize,
    pub front1: Vec<FrontEntry>,
    /// Hypervolume of the population's first front.
    pub hypervolume: f64,
    /// Hypervolume of everything evaluated so far.
    pub archive_hypervolume: f64,
    pub evals: usize,
}

#[derive(Debug, Clone)]
pub struct SearchResult<O> {
    pub population: Vec<Individual<O>>,
    pub history: Vec<GenerationRecord>,
    pub archive: Vec<FrontEntry>,
}

fn evaluate_all<P: Problem>(
    problem: &P,
    genes: Vec<Vec<i64>>,
    seed: u64,
    gen: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Vec<Individual<P::Output>> {
    match pool {
        Some(pool) => pool.install(|| evaluate_par(problem, genes, seed, gen)),
        None => evaluate_par(problem, genes, seed, gen),
    }
}

fn evaluate_par<P: Problem>(problem: &P, genes: Vec<Vec<i64>>, seed: u64, gen: usize) -> Vec<Individual<P::Output>> {
    genes
        .into_par_iter()
        .enumerate()
        .map(|(i, g)| {
            let s = derive_seed(seed, &[stream::EVAL, gen as u64, i as u64]);
            let out = problem.evaluate(&g, s);
            let obj = P::objectives(&out);
            Individual::new(g, out, obj)
        })
        .collect()
}

fn update_archive<O>(archive: &mut Vec<FrontEntry>, pop: &[Individual<O>]) {
    let mut all = std::mem::take(archive);
    for ind in pop {
        let e = FrontEntry {
            objectives: ind.objectives,
            genes: ind.genes.clone(),
        };
        if !all.contains(&e) {
            all.push(e);
        }
    }
    let objs: Vec<Objectives> = all.iter().map(|e| e.objectives).collect();
    let keep = metrics::nondominated_indices(&objs);
    *archive = keep.into_iter().map(|i| all[i].clone()).collect();
}

fn record<O>(
    gen: usize,
    pop: &[Individual<O>],
    archive: &[FrontEntry],
    evals: usize,
    reference: Objectives,
) -> GenerationRecord {
    let mut front1: Vec<FrontEntry> = pop
        .iter()
        .filter(|i| i.rank == 1)
        .map(|i| FrontEntry {
            objectives: i.objectives,
            genes: i.genes.clone(),
        })
        .collect();
    front1.sort_by(|a, b| {
        a.objectives
            .f1
            .partial_cmp(&b.objectives.f1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.genes.cmp(&b.genes))
    });
    let hv = |pts: &mut dyn Iterator<Item = Objectives>| {
        metrics::hypervolume_within(&pts.collect::<Vec<_>>(), reference)
    };
    GenerationRecord {
        gen,
        hypervolume: hv(&mut front1.iter().map(|e| e.objectives)),
        archive_hypervolume: hv(&mut archive.iter().map(|e| e.objectives)),
        front1,
        evals,
    }
}

/// Runs the full generational loop. `on_generation` sees every history record
/// as it is produced (generation 0 is the random initial population).
pub fn run<P: Problem>(
    problem: &P,
    params: &SearchParams,
    on_generation: &mut dyn FnMut(&GenerationRecord),
) -> Result<SearchResult<P::Output>, SearchError> {
    run_in(problem, params, None, on_generation)
}

/// [`run`] with evaluations confined to `pool` (the global pool when `None`).
pub fn run_in<P: Problem>(
    problem: &P,
    params: &SearchParams,
    pool: Option<&rayon::ThreadPool>,
    on_generation: &mut dyn FnMut(&GenerationRecord),
) -> Result<SearchResult<P::Output>, SearchError> {
    params.validate()?;
    let bounds = problem.bounds();
    if bounds.is_empty() {
        return Err(SearchError::Argument("problem has no decision variables".into()));
    }
    let p_m = params.p_m.unwrap_or(1.0 / bounds.len() as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let initial: Vec<Vec<i64>> = (0..params.pop_size)
        .map(|_| bounds.iter().map(|b| b.sample(&mut rng)).collect())
        .collect();
    let mut pop = evaluate_all(problem, initial, params.seed, 0, pool);
    assign_rank_and_crowding(&mut pop);
    let mut evals = pop.len();
    let mut archive = Vec::new();
    update_archive(&mut archive, &pop);
    let mut history = vec![record(0, &pop, &archive, evals, params.reference)];
    on_generation(&history[0]);

    for gen in 1..=params.generations {
        let pairs = select_parents(&pop, &mut rng);
        let mut children = Vec::with_capacity(params.pop_size);
        for (a, b) in pairs {
            let (mut c1, mut c2) =
                single_point_crossover(&pop[a].genes, &pop[b].genes, &mut rng, params.p_c)?;
            uniform_mutation(&mut c1, bounds, &mut rng, p_m);
            uniform_mutation(&mut c2, bounds, &mut rng, p_m);
            children.push(c1);
            children.push(c2);
        }
        let offspring = evaluate_all(problem, children, params.seed, gen, pool);
        evals += offspring.len();
        update_archive(&mut archive, &offspring);
        pop = replacement(pop, offspring);
        let rec = record(gen, &pop, &archive, evals, params.reference);
        on_generation(&rec);
        history.push(rec);
    }
    Ok(SearchResult {
        population: pop,
        history,
        archive,
    })
}
