//! Potentials of the two-layer CRF and the energy they add up to.

use serde::Serialize;

use crate::config::PipelineConfig;
use crate::crnn::ScoreTable;
use crate::hypothesis::HypothesisSet;
use crate::priors::PriorBank;
use crate::scene::{Category, FeatureImage};

/// Smallest confidence passed to the logarithm.
pub const MIN_CONFIDENCE: f64 = 1e-12;

/// Partition of the category set used by the confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CategoryGroup {
    /// Road and sky.
    SkyGround,
    Background,
    Object,
}

/// Group of `c` given the configured background categories.
pub fn category_group(c: Category, background: &[Category]) -> CategoryGroup {
    match c {
        Category::Road | Category::Sky => CategoryGroup::SkyGround,
        c if background.contains(&c) => CategoryGroup::Background,
        _ => CategoryGroup::Object,
    }
}

/// `exp(-|f_i - f_j|^2 / sigma^2)`.
pub fn pairwise_weight(fi: &[f64], fj: &[f64], sigma: f64) -> f64 {
    let d2: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (sigma * sigma)).exp()
}

/// Object-category consistency penalty.
pub fn coupling_cost(o: usize, c: usize, m2: &[usize]) -> f64 {
    if m2[o] == c {
        0.0
    } else {
        1.0
    }
}

/// A 4-neighbor edge, stored once with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Everything inference needs. Object labels run `0..num_object_labels`
/// (ground, clusters, sky); category labels index `categories`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfProblem {
    pub width: usize,
    pub height: usize,
    pub num_object_labels: usize,
    pub categories: Vec<Category>,
    /// Row-major `pixels x num_object_labels`.
    pub object_unary: Vec<f64>,
    /// Row-major `pixels x categories.len()`.
    pub category_unary: Vec<f64>,
    pub edges: Vec<Edge>,
    /// Category index of each object label.
    pub m2: Vec<usize>,
    pub lambda: [f64; 5],
}

/// Raw (unweighted) sums of each potential and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct EnergyTerms {
    pub object_unary: f64,
    pub category_unary: f64,
    pub object_smoothness: f64,
    pub category_smoothness: f64,
    pub coupling: f64,
    pub total: f64,
}

impl CrfProblem {
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn psi_o(&self, pixel: usize, o: usize) -> f64 {
        self.object_unary[pixel * self.num_object_labels + o]
    }

    pub fn psi_c(&self, pixel: usize, c: usize) -> f64 {
        self.category_unary[pixel * self.categories.len() + c]
    }

    /// 4-neighbor edges of a `width x height` grid with weights from `w`.
    pub fn grid_edges(width: usize, height: usize, mut w: impl FnMut(usize, usize) -> f64) -> Vec<Edge> {
        let mut edges = Vec::with_capacity(2 * width * height);
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                if x + 1 < width {
                    edges.push(Edge {
                        a: i,
                        b: i + 1,
                        weight: w(i, i + 1),
                    });
                }
                if y + 1 < height {
                    edges.push(Edge {
                        a: i,
                        b: i + width,
                        weight: w(i, i + width),
                    });
                }
            }
        }
        edges
    }

    /// Energy of a labeling, term by term.
    pub fn energy(&self, objects: &[usize], categories: &[usize]) -> EnergyTerms {
        let mut t = EnergyTerms::default();
        for i in 0..self.num_pixels() {
            t.object_unary += self.psi_o(i, objects[i]);
            t.category_unary += self.psi_c(i, categories[i]);
            t.coupling += coupling_cost(objects[i], categories[i], &self.m2);
        }
        for e in &self.edges {
            if objects[e.a] != objects[e.b] {
                t.object_smoothness += e.weight;
            }
            if categories[e.a] != categories[e.b] {
                t.category_smoothness += e.weight;
            }
        }
        let l = &self.lambda;
        t.total = l[0] * t.object_unary
            + l[1] * t.category_unary
            + l[2] * t.object_smoothness
            + l[3] * t.category_smoothness
            + l[4] * t.coupling;
        t
    }

    pub fn total_energy(&self, objects: &[usize], categories: &[usize]) -> f64 {
        self.energy(objects, categories).total
    }
}

/// `f(P_k, c)` for every object label `k` and category, as a
/// `(O + 2) x categories.len()` table.
pub fn confidence_table(
    scores: &ScoreTable,
    hyp: &HypothesisSet,
    categories: &[Category],
    config: &PipelineConfig,
) -> Vec<Vec<f64>> {
    let o = hyp.num_objects();
    (0..o + 2)
        .map(|k| {
            categories
                .iter()
                .map(|&c| {
                    let gate = if k >= 1 && k <= o && hyp.clusters[k - 1].bottom_height < config.t_h {
                        1.0
                    } else {
                        0.0
                    };
                    confidence_score(k, c, o, |c| scores.score(k - 1, c), gate, &config.background_categories)
                })
                .collect()
        })
        .collect()
}

/// `f(P_k, c)` for one pair. `score` is only consulted for clusters
/// (`1 <= k <= o`); the ground and sky patches carry no classifier score.
pub fn confidence_score(
    k: usize,
    c: Category,
    num_objects: usize,
    score: impl Fn(Category) -> f64,
    gate: f64,
    background: &[Category],
) -> f64 {
    let is_terminal_patch = k == 0 || k == num_objects + 1;
    match category_group(c, background) {
        CategoryGroup::SkyGround => {
            if is_terminal_patch {
                1.0
            } else {
                0.0
            }
        }
        _ if is_terminal_patch => 0.0,
        CategoryGroup::Background => score(c),
        CategoryGroup::Object => score(c) * gate,
    }
}

/// `M2`: the highest-confidence category per object label. The ground maps
/// to Road and the sky to Sky; remaining ties go to the earlier category.
pub fn object_categories(confidence: &[Vec<f64>], categories: &[Category]) -> Vec<usize> {
    let last = confidence.len() - 1;
    let position = |want: Category| categories.iter().position(|&c| c == want);
    confidence
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let fixed = match k {
                0 => position(Category::Road),
                k if k == last => position(Category::Sky),
                _ => None,
            };
            fixed.unwrap_or_else(|| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
        })
        .collect()
}

/// `psi^O`: per-pixel negative log-likelihoods under every object model,
/// floored at zero, with seed rows replaced by the hard-constraint costs
/// when the configuration enables them.
pub fn build_object_unary(
    features: &FeatureImage,
    bank: &PriorBank,
    hyp: &HypothesisSet,
    config: &PipelineConfig,
) -> Vec<f64> {
    let labels = hyp.num_objects() + 2;
    let dim = config.features.dim();
    let mut table = Vec::with_capacity(features.len() * labels);
    for f in &features.features {
        for o in 0..labels {
            let model = bank.model(o);
            let x = &f[..model.dim().min(dim)];
            table.push(model.nll(x).max(0.0));
        }
    }
    if config.features.hard_constraints() {
        for (pixel, owner) in hyp.seed_labels().into_iter().enumerate() {
            if let Some(owner) = owner {
                for o in 0..labels {
                    table[pixel * labels + o] = if o == owner { config.alpha_o } else { config.beta_o };
                }
            }
        }
    }
    table
}

/// `psi^C` from the confidence table, the object costs and `M2`.
///
/// Each pixel is covered by the ground patch (below the horizon) or the
/// sky patch (elsewhere) plus every cluster patch containing it; the cost
/// is the minimum over covering patches, capped at `alpha_c`.
pub fn build_category_unary(
    confidence: &[Vec<f64>],
    object_unary: &[f64],
    m2: &[usize],
    hyp: &HypothesisSet,
    num_categories: usize,
    alpha_c: f64,
) -> Vec<f64> {
    let labels = confidence.len();
    let (w, h) = (hyp.width, hyp.height);
    let members: Vec<Vec<usize>> = (0..num_categories)
        .map(|c| (0..labels).filter(|&o| m2[o] == c).collect())
        .collect();
    let neg_log: Vec<Vec<f64>> = confidence
        .iter()
        .map(|row| {
            row.iter()
                .map(|&f| if f > 0.0 { -f.max(MIN_CONFIDENCE).min(1.0).ln() } else { f64::INFINITY })
                .collect()
        })
        .collect();
    let mut table = vec![alpha_c; w * h * num_categories];
    let mut covering = Vec::with_capacity(labels);
    for pixel in 0..w * h {
        let (x, y) = (pixel % w, pixel / w);
        covering.clear();
        covering.push(if hyp.in_ground_patch(pixel) { 0 } else { labels - 1 });
        covering.extend(hyp.clusters.iter().filter(|c| c.patch.contains(x, y)).map(|c| c.id));
        let row = &object_unary[pixel * labels..(pixel + 1) * labels];
        for c in 0..num_categories {
            let Some(inner) = members[c].iter().map(|&o| row[o]).min_by(f64::total_cmp) else {
                continue;
            };
            let best = covering.iter().map(|&k| neg_log[k][c] + inner).fold(alpha_c, f64::min);
            table[pixel * num_categories + c] = best;
        }
    }
    table
}

/// Assembles the full problem for one frame.
pub fn build_problem(
    features: &FeatureImage,
    bank: &PriorBank,
    hyp: &HypothesisSet,
    scores: &ScoreTable,
    config: &PipelineConfig,
) -> (CrfProblem, Vec<Vec<f64>>) {
    let categories = Category::ALL.to_vec();
    let confidence = confidence_table(scores, hyp, &categories, config);
    let m2 = object_categories(&confidence, &categories);
    let object_unary = build_object_unary(features, bank, hyp, config);
    let category_unary = build_category_unary(&confidence, &object_unary, &m2, hyp, categories.len(), config.alpha_c);
    let dim = config.features.dim();
    let f = &features.features;
    let edges = CrfProblem::grid_edges(features.width, features.height, |i, j| {
        pairwise_weight(&f[i][..dim], &f[j][..dim], config.sigma)
    });
    let problem = CrfProblem {
        width: features.width,
        height: features.height,
        num_object_labels: hyp.num_objects() + 2,
        categories,
        object_unary,
        category_unary,
        edges,
        m2,
        lambda: [config.lambda1, config.lambda2, config.lambda3, config.lambda4, config.lambda5],
    };
    (problem, confidence)
}
