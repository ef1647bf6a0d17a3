//! Hardware-oriented evolution search over subnet configurations.
//!
//! Candidates are scored by a caller-supplied fitness (one-shot supernet
//! accuracy in the full pipeline) subject to a frames-per-second floor from
//! the hardware model. Parents survive each generation unchanged (elitism);
//! children come from uniform per-layer crossover followed by depth and
//! per-layer mutation, and children that miss the constraint are discarded
//! before their fitness is ever evaluated.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nas::{sample_subnet, SearchSpace, SubnetConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvoParams {
    pub population_size: usize,
    pub generations: usize,
    pub top_k: usize,
    pub p_depth: f64,
    pub p_mutate: f64,
    pub target_fps: f64,
    pub seed: u64,
    pub max_attempts: usize,
}

impl Default for EvoParams {
    fn default() -> Self {
        EvoParams {
            population_size: 50,
            generations: 20,
            top_k: 10,
            p_depth: 0.2,
            p_mutate: 0.4,
            target_fps: 0.0,
            seed: 0,
            max_attempts: 100_000,
        }
    }
}

impl EvoParams {
    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 || self.top_k == 0 || self.top_k > self.population_size {
            return Err(Error::InvalidConfig(
                "need 0 < top_k <= population_size".into(),
            ));
        }
        for p in [self.p_depth, self.p_mutate] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig("mutation probabilities in [0,1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub config: SubnetConfig,
    pub fitness: f64,
    pub fps: f64,
    pub feasible: bool,
}

/// Uniform block-wise recombination: depth and embed dimension are picked
/// from either parent, and each layer copies its whole gene block
/// (hidden dim, expansion, ratio) from one parent. Layers beyond the
/// shorter parent's depth copy from the deeper one.
pub fn crossover(p1: &SubnetConfig, p2: &SubnetConfig, rng: &mut ChaCha8Rng) -> SubnetConfig {
    let depth = if rng.gen_bool(0.5) { p1.depth } else { p2.depth };
    let embed_dim = if rng.gen_bool(0.5) {
        p1.embed_dim
    } else {
        p2.embed_dim
    };
    let mut hidden_dims = Vec::with_capacity(depth);
    let mut expansion_ratios = Vec::with_capacity(depth);
    let mut mixed_ratios = Vec::with_capacity(depth);
    for l in 0..depth {
        let donor = if rng.gen_bool(0.5) { p1 } else { p2 };
        let donor = if l < donor.depth {
            donor
        } else if l < p1.depth {
            p1
        } else {
            p2
        };
        hidden_dims.push(donor.hidden_dims[l]);
        expansion_ratios.push(donor.expansion_ratios[l]);
        mixed_ratios.push(donor.mixed_ratios[l]);
    }
    SubnetConfig {
        embed_dim,
        depth,
        hidden_dims,
        expansion_ratios,
        mixed_ratios,
    }
}

/// Depth mutates with probability p_depth, then every layer's gene block
/// resamples with probability p_mutate. The result always stays inside the
/// space.
pub fn mutate(
    config: &SubnetConfig,
    space: &SearchSpace,
    p_depth: f64,
    p_mutate: f64,
    rng: &mut ChaCha8Rng,
) -> SubnetConfig {
    let mut out = config.clone();
    if rng.gen_bool(p_depth) {
        out.depth = *space.depths.choose(rng).unwrap();
    }
    // Depth growth appends freshly sampled layers; shrinkage truncates.
    while out.hidden_dims.len() < out.depth {
        out.hidden_dims.push(*space.hidden_dims.choose(rng).unwrap());
        out.expansion_ratios
            .push(*space.expansion_ratios.choose(rng).unwrap());
        out.mixed_ratios.push(*space.mixed_ratios.choose(rng).unwrap());
    }
    out.hidden_dims.truncate(out.depth);
    out.expansion_ratios.truncate(out.depth);
    out.mixed_ratios.truncate(out.depth);
    for l in 0..out.depth {
        if rng.gen_bool(p_mutate) {
            out.hidden_dims[l] = *space.hidden_dims.choose(rng).unwrap();
            out.expansion_ratios[l] = *space.expansion_ratios.choose(rng).unwrap();
            out.mixed_ratios[l] = *space.mixed_ratios.choose(rng).unwrap();
        }
    }
    out
}

fn evaluate_candidate<F, H>(
    config: SubnetConfig,
    target_fps: f64,
    fitness: &mut F,
    hw_eval: &mut H,
) -> Result<Option<Candidate>>
where
    F: FnMut(&SubnetConfig) -> Result<f64>,
    H: FnMut(&SubnetConfig) -> Result<f64>,
{
    let fps = hw_eval(&config)?;
    if fps < target_fps {
        return Ok(None);
    }
    let fitness = fitness(&config)?;
    Ok(Some(Candidate {
        config,
        fitness,
        fps,
        feasible: true,
    }))
}

/// Rejection-samples an initial population of feasible candidates within a
/// bounded attempt budget.
pub fn init_population<F, H>(
    space: &SearchSpace,
    params: &EvoParams,
    rng: &mut ChaCha8Rng,
    fitness: &mut F,
    hw_eval: &mut H,
) -> Result<Vec<Candidate>>
where
    F: FnMut(&SubnetConfig) -> Result<f64>,
    H: FnMut(&SubnetConfig) -> Result<f64>,
{
    let mut pop = Vec::with_capacity(params.population_size);
    let mut attempts = 0usize;
    while pop.len() < params.population_size {
        if attempts >= params.max_attempts {
            return Err(Error::ConstraintTooTight {
                found: pop.len(),
                attempts,
            });
        }
        attempts += 1;
        let config = sample_subnet(space, rng);
        if let Some(c) = evaluate_candidate(config, params.target_fps, fitness, hw_eval)? {
            pop.push(c);
        }
    }
    Ok(pop)
}

fn sort_by_fitness(pop: &mut [Candidate]) {
    pop.sort_by(|a, b| b.fitness.partial_cmp(&a.fitness).unwrap_or(std::cmp::Ordering::Equal));
}

/// Elitist evolution loop. Returns the final population sorted by fitness,
/// every member feasible. `fitness` is only invoked on candidates that
/// already passed the hardware constraint.
pub fn evolve<F, H>(
    space: &SearchSpace,
    params: &EvoParams,
    mut fitness: F,
    mut hw_eval: H,
) -> Result<Vec<Candidate>>
where
    F: FnMut(&SubnetConfig) -> Result<f64>,
    H: FnMut(&SubnetConfig) -> Result<f64>,
{
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut pop = init_population(space, params, &mut rng, &mut fitness, &mut hw_eval)?;
    sort_by_fitness(&mut pop);

    for gen in 0..params.generations {
        let parents: Vec<Candidate> = pop[..params.top_k.min(pop.len())].to_vec();
        let mut next = parents.clone();
        let mut attempts = 0usize;
        while next.len() < params.population_size && attempts < params.max_attempts {
            attempts += 1;
            let i = rng.gen_range(0..parents.len());
            let j = rng.gen_range(0..parents.len());
            let child = crossover(&parents[i].config, &parents[j].config, &mut rng);
            let child = mutate(&child, space, params.p_depth, params.p_mutate, &mut rng);
            if let Some(c) =
                evaluate_candidate(child, params.target_fps, &mut fitness, &mut hw_eval)?
            {
                next.push(c);
            }
        }
        sort_by_fitness(&mut next);
        log::debug!(
            "generation {gen}: best fitness {:.4}, population {}",
            next.first().map(|c| c.fitness).unwrap_or(f64::NAN),
            next.len()
        );
        pop = next;
    }
    Ok(pop)
}
