//! Finite joint distributions P and Q over a fixed support of feature
//! vectors. Every expectation over a world is an exact K x C sum, which lets
//! the asymptotic statements about importance-weighted training be checked
//! directly.

use std::io::{BufRead, BufWriter, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example, SourceTag, SparseVec};
use crate::error::{Error, Result};
use crate::losses::PROB_FLOOR;
use crate::model::{ClassifierParams, ForwardPass};
use crate::seeding::{rng_for, STREAM_DUP, STREAM_SAMPLE, STREAM_SWAP, STREAM_WORLD};

/// Floor applied to shifted conditional rows before renormalizing.
pub const Q_ROW_FLOOR: f64 = 1e-6;
const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Which {
    P,
    Q,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlDirection {
    /// KL(P || Q), weighted by P(x).
    PQ,
    /// KL(Q || P), weighted by Q(x).
    QP,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldSpec {
    /// Support size.
    pub k: usize,
    pub c: usize,
    pub d: usize,
    /// Nonzeros per support vector; `None` picks `max(2, d / 8)`.
    pub nnz: Option<usize>,
    /// Mixing weight of a random marginal into `q_x`; 0 forces `q_x = p_x`.
    pub covariate_shift: f64,
    /// Mixing weight of a random row into each `q(y|x)`; 0 forces equality.
    pub label_shift: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            k: 16,
            c: 3,
            d: 32,
            nnz: None,
            covariate_shift: 0.0,
            label_shift: 0.5,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::validation(m));
        if self.k < 2 || self.c < 2 {
            return fail(format!("world needs K >= 2 and C >= 2 (got K={}, C={})", self.k, self.c));
        }
        if self.d < 1 {
            return fail("world needs d >= 1".into());
        }
        let nnz = self.nnz();
        if nnz == 0 || nnz > self.d {
            return fail(format!("nnz {nnz} must be in 1..={}", self.d));
        }
        if !(0.0..=1.0).contains(&self.covariate_shift) {
            return fail(format!("covariate_shift {} not in [0, 1]", self.covariate_shift));
        }
        if !(0.0..=1.0).contains(&self.label_shift) {
            return fail(format!("label_shift {} not in [0, 1]", self.label_shift));
        }
        // With a single nonzero the unit-norm vectors are +-e_i, so only 2d are distinct.
        if nnz == 1 && self.k > 2 * self.d {
            return fail(format!("cannot draw {} distinct one-hot support vectors in d={}", self.k, self.d));
        }
        Ok(())
    }

    pub fn nnz(&self) -> usize {
        self.nnz.unwrap_or_else(|| (self.d / 8).max(2).min(self.d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointWorld {
    support: Vec<SparseVec>,
    p_x: Vec<f64>,
    q_x: Vec<f64>,
    p_y: Vec<Vec<f64>>,
    q_y: Vec<Vec<f64>>,
    num_classes: usize,
    feature_dim: usize,
    seed: u64,
}

fn check_distribution(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::validation(format!("{name} has a negative or non-finite entry")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::validation(format!("{name} sums to {s}")));
    }
    Ok(())
}

impl JointWorld {
    /// Assemble a world from explicit tables, checking every invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_tables(
        support: Vec<SparseVec>,
        p_x: Vec<f64>,
        q_x: Vec<f64>,
        p_y: Vec<Vec<f64>>,
        q_y: Vec<Vec<f64>>,
        num_classes: usize,
        feature_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let k = support.len();
        if k < 2 || num_classes < 2 {
            return Err(Error::validation("world needs K >= 2 and C >= 2"));
        }
        if p_x.len() != k || q_x.len() != k || p_y.len() != k || q_y.len() != k {
            return Err(Error::validation("world tables disagree on K"));
        }
        check_distribution("p_x", &p_x)?;
        check_distribution("q_x", &q_x)?;
        for (x, (p, q)) in p_y.iter().zip(&q_y).enumerate() {
            if p.len() != num_classes || q.len() != num_classes {
                return Err(Error::validation(format!("conditional rows at x={x} do not have C entries")));
            }
            check_distribution(&format!("p(y|x={x})"), p)?;
            check_distribution(&format!("q(y|x={x})"), q)?;
        }
        for (i, v) in support.iter().enumerate() {
            if v.max_index().is_some_and(|m| m >= feature_dim) {
                return Err(Error::validation(format!("support vector {i} exceeds d={feature_dim}")));
            }
            if support[..i].contains(v) {
                return Err(Error::validation(format!("support vector {i} is a duplicate")));
            }
        }
        Ok(JointWorld {
            support,
            p_x,
            q_x,
            p_y,
            q_y,
            num_classes,
            feature_dim,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.support.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn support(&self) -> &[SparseVec] {
        &self.support
    }

    pub fn marginal(&self, which: Which) -> &[f64] {
        match which {
            Which::P => &self.p_x,
            Which::Q => &self.q_x,
        }
    }

    pub fn conditional(&self, which: Which) -> &[Vec<f64>] {
        match which {
            Which::P => &self.p_y,
            Which::Q => &self.q_y,
        }
    }

    /// `P(y|x) / Q(y|x)` for support point `x`.
    pub fn true_ratio(&self, x: usize, y: usize) -> Result<f64> {
        let (p, q) = (self.p_y[x][y], self.q_y[x][y]);
        if q == 0.0 {
            return if p > 0.0 { Err(Error::SupportViolation { x, y }) } else { Ok(0.0) };
        }
        Ok(p / q)
    }

    /// Model log-probabilities at every support point, floored like the losses.
    fn model_log_probs(&self, params: &ClassifierParams) -> Result<Vec<Vec<f64>>> {
        if params.feature_dim() != self.feature_dim || params.num_classes() != self.num_classes {
            return Err(Error::validation(format!(
                "model expects (d={}, C={}) but world has (d={}, C={})",
                params.feature_dim(),
                params.num_classes(),
                self.feature_dim,
                self.num_classes
            )));
        }
        let mut fwd = ForwardPass::default();
        self.support
            .iter()
            .map(|x| {
                params.forward_into(x, &mut fwd)?;
                Ok(fwd.log_probs.iter().map(|l| l.max(PROB_FLOOR.ln())).collect())
            })
            .collect()
    }

    pub fn write_jsonl(&self, w: impl Write) -> Result<()> {
        let mut w = BufWriter::new(w);
        let header = WorldHeader {
            kind: WORLD_KIND.into(),
            version: 1,
            k: self.k(),
            c: self.num_classes,
            d: self.feature_dim,
            seed: self.seed,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for x in 0..self.k() {
            let row = WorldRow {
                x,
                support: self.support[x].iter().map(|(i, v)| (i.to_string(), v)).collect(),
                p_x: self.p_x[x],
                q_x: self.q_x[x],
                p_y: self.p_y[x].clone(),
                q_y: self.q_y[x].clone(),
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse { line, message };
        let (_, first) = lines.next().ok_or_else(|| parse_err(1, "empty world file".into()))?;
        let header: WorldHeader = serde_json::from_str(&first?).map_err(|e| parse_err(1, e.to_string()))?;
        if header.kind != WORLD_KIND {
            return Err(parse_err(1, format!("not a world file (kind {:?})", header.kind)));
        }
        let mut support = Vec::with_capacity(header.k);
        let (mut p_x, mut q_x, mut p_y, mut q_y) = (vec![], vec![], vec![], vec![]);
        for (k, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: WorldRow = serde_json::from_str(&line).map_err(|e| parse_err(k + 1, e.to_string()))?;
            if row.x != support.len() {
                return Err(parse_err(k + 1, format!("expected x={}, found {}", support.len(), row.x)));
            }
            let mut pairs = Vec::with_capacity(row.support.len());
            for (key, v) in row.support {
                let i = key
                    .parse()
                    .map_err(|_| parse_err(k + 1, format!("bad support index {key:?}")))?;
                pairs.push((i, v));
            }
            support.push(SparseVec::from_pairs(pairs));
            p_x.push(row.p_x);
            q_x.push(row.q_x);
            p_y.push(row.p_y);
            q_y.push(row.q_y);
        }
        if support.len() != header.k {
            return Err(Error::validation(format!("header declares K={}, found {} rows", header.k, support.len())));
        }
        JointWorld::from_tables(support, p_x, q_x, p_y, q_y, header.c, header.d, header.seed)
    }
}

const WORLD_KIND: &str = "joint_world";

#[derive(Serialize, Deserialize)]
struct WorldHeader {
    kind: String,
    version: u32,
    k: usize,
    c: usize,
    d: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct WorldRow {
    x: usize,
    support: std::collections::BTreeMap<String, f64>,
    p_x: f64,
    q_x: f64,
    p_y: Vec<f64>,
    q_y: Vec<f64>,
}

fn normalized_exponentials(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn mix(base: &[f64], other: &[f64], t: f64, floor: f64) -> Vec<f64> {
    let mixed: Vec<f64> = base.iter().zip(other).map(|(a, b)| ((1.0 - t) * a + t * b).max(floor)).collect();
    let s: f64 = mixed.iter().sum();
    mixed.into_iter().map(|v| v / s).collect()
}

/// Seeded world. All random draws happen regardless of the shift knobs, so
/// two specs differing only in shifts share the same P.
pub fn make_world(spec: &WorldSpec) -> Result<JointWorld> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, STREAM_WORLD);
    let nnz = spec.nnz();

    let mut support: Vec<SparseVec> = Vec::with_capacity(spec.k);
    while support.len() < spec.k {
        let idx = index::sample(&mut rng, spec.d, nnz);
        let vals: Vec<f64> = (0..nnz).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let v = SparseVec::from_pairs(idx.iter().zip(vals).map(|(i, v)| (i, v / norm)));
        if v.nnz() == nnz && !support.contains(&v) {
            support.push(v);
        }
    }

    let p_x = normalized_exponentials(&mut rng, spec.k);
    let r_x = normalized_exponentials(&mut rng, spec.k);
    let p_y: Vec<Vec<f64>> = (0..spec.k).map(|_| normalized_exponentials(&mut rng, spec.c)).collect();
    let r_y: Vec<Vec<f64>> = (0..spec.k).map(|_| normalized_exponentials(&mut rng, spec.c)).collect();

    let q_x = if spec.covariate_shift == 0.0 {
        p_x.clone()
    } else {
        mix(&p_x, &r_x, spec.covariate_shift, 0.0)
    };
    let q_y = if spec.label_shift == 0.0 {
        p_y.clone()
    } else {
        p_y.iter().zip(&r_y).map(|(p, r)| mix(p, r, spec.label_shift, Q_ROW_FLOOR)).collect()
    };
    JointWorld::from_tables(support, p_x, q_x, p_y, q_y, spec.c, spec.d, spec.seed)
}

/// `n` i.i.d. draws: x from the chosen marginal, then y from its row.
pub fn sample(world: &JointWorld, which: Which, n: usize, seed: u64) -> Result<Dataset> {
    Ok(sample_indexed(world, which, n, seed)?.0)
}

/// As [`sample`], also returning the support index of each draw.
pub fn sample_indexed(world: &JointWorld, which: Which, n: usize, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let stream = STREAM_SAMPLE
        + match which {
            Which::P => 0,
            Which::Q => 0x10,
        };
    let mut rng = rng_for(seed, stream);
    let weighted = |v: &[f64]| WeightedIndex::new(v).map_err(|e| Error::validation(format!("bad distribution: {e}")));
    let marginal = weighted(world.marginal(which))?;
    let rows = world
        .conditional(which)
        .iter()
        .map(|r| weighted(r))
        .collect::<Result<Vec<_>>>()?;
    let mut examples = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n);
    for _ in 0..n {
        let x = marginal.sample(&mut rng);
        let y = rows[x].sample(&mut rng);
        examples.push(Example::new(world.support[x].clone(), y));
        xs.push(x);
    }
    Ok((Dataset::new(examples, world.num_classes, world.feature_dim)?, xs))
}

/// `sum_x marginal(x) sum_y cond(y|x) (-log p_model(y|x))`.
pub fn exact_expected_ce(world: &JointWorld, which: Which, params: &ClassifierParams) -> Result<f64> {
    let logs = world.model_log_probs(params)?;
    let mut total = 0.0;
    for (x, row) in world.conditional(which).iter().enumerate() {
        let inner: f64 = row.iter().zip(&logs[x]).map(|(c, l)| -c * l).sum();
        total += world.marginal(which)[x] * inner;
    }
    Ok(total)
}

/// `E_Q[(P(y|x) / Q(y|x)) (-log p_model(y|x))]` by exact summation.
pub fn exact_weighted_expectation(world: &JointWorld, params: &ClassifierParams) -> Result<f64> {
    Ok(weighted_loss_moments(world, params)?.mean)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

/// Exact mean and variance under Q of `Z = (P(y|x)/Q(y|x)) (-log p_model(y|x))`.
pub fn weighted_loss_moments(world: &JointWorld, params: &ClassifierParams) -> Result<Moments> {
    let logs = world.model_log_probs(params)?;
    let mut first = 0.0;
    let mut second = 0.0;
    for x in 0..world.k() {
        let mut inner1 = 0.0;
        let mut inner2 = 0.0;
        for y in 0..world.num_classes {
            let q = world.q_y[x][y];
            let ratio = world.true_ratio(x, y)?;
            let z = ratio * -logs[x][y];
            inner1 += q * z;
            inner2 += q * z * z;
        }
        first += world.q_x[x] * inner1;
        second += world.q_x[x] * inner2;
    }
    Ok(Moments {
        mean: first,
        variance: (second - first * first).max(0.0),
    })
}

/// True-ratio importance weights for draws at support indices `xs`.
pub fn true_ratio_weights(world: &JointWorld, xs: &[usize], dataset: &Dataset) -> Result<Vec<f64>> {
    if xs.len() != dataset.len() {
        return Err(Error::validation("support indices not aligned with dataset"));
    }
    xs.iter()
        .zip(dataset.labels())
        .map(|(&x, y)| world.true_ratio(x, y))
        .collect()
}

pub fn true_conditional_entropy(world: &JointWorld, which: Which) -> f64 {
    world
        .conditional(which)
        .iter()
        .zip(world.marginal(which))
        .map(|(row, m)| m * row.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum::<f64>())
        .sum()
}

pub fn true_conditional_kl(world: &JointWorld, direction: KlDirection) -> Result<f64> {
    let (num, den) = match direction {
        KlDirection::PQ => (Which::P, Which::Q),
        KlDirection::QP => (Which::Q, Which::P),
    };
    let mut total = 0.0;
    for x in 0..world.k() {
        let mut inner = 0.0;
        for y in 0..world.num_classes {
            let a = world.conditional(num)[x][y];
            let b = world.conditional(den)[x][y];
            if a == 0.0 {
                continue;
            }
            if b == 0.0 {
                return Err(Error::SupportViolation { x, y });
            }
            inner += a * (a / b).ln();
        }
        total += world.marginal(num)[x] * inner;
    }
    Ok(total)
}

fn noise_count(fraction: f64, n: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::validation(format!("noise fraction {fraction} not in [0, 1]")));
    }
    // The epsilon keeps e.g. (1/3) * 9 from flooring to 2.
    Ok(((fraction * n as f64) + 1e-9).floor() as usize)
}

/// Replace the labels of a seeded `floor(fraction * N)` subset with a
/// uniformly drawn different label and tag them `swapped`.
pub fn inject_label_swap(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    let c = dataset.num_classes();
    if c < 2 {
        return Err(Error::validation("label swap needs at least two classes"));
    }
    let m = noise_count(fraction, dataset.len())?;
    let mut rng = rng_for(seed, STREAM_SWAP);
    let mut chosen = index::sample(&mut rng, dataset.len(), m).into_vec();
    chosen.sort_unstable();
    let mut examples = dataset.examples().to_vec();
    for i in chosen {
        let old = examples[i].label;
        let r = rng.random_range(0..c - 1);
        examples[i].label = if r >= old { r + 1 } else { r };
        examples[i].source = SourceTag::Swapped;
    }
    Dataset::new(examples, c, dataset.feature_dim())
}

/// Append one copy of a seeded `floor(fraction * N)` subset, in index order,
/// with the copies tagged `duplicated`.
pub fn inject_duplicates(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    let m = noise_count(fraction, dataset.len())?;
    let mut chosen = index::sample(&mut rng_for(seed, STREAM_DUP), dataset.len(), m).into_vec();
    chosen.sort_unstable();
    let mut examples = dataset.examples().to_vec();
    examples.extend(chosen.iter().map(|&i| dataset.get(i).clone().tagged(SourceTag::Duplicated)));
    Dataset::new(examples, dataset.num_classes(), dataset.feature_dim())
}
