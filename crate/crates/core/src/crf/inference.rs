//! Alpha-expansion over the object and category layers.

use rayon::prelude::*;
use serde::Serialize;

use super::maxflow::{Graph, Segment};
use super::problem::{coupling_cost, CrfProblem, EnergyTerms};
use crate::scene::LabelMaps;

/// What a binary move lets each pixel switch to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Move {
    /// Object label `α`, category frozen.
    Object(usize),
    /// Category `α`, object frozen.
    Category(usize),
    /// Object `α` together with its category `M2(α)`.
    Joint(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MoveRecord {
    pub sweep: usize,
    pub kind: Move,
    pub energy_before: f64,
    pub energy_after: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRecord {
    pub sweep: usize,
    /// `"full"`, or `"segmentation"` for the first separated stage.
    pub objective: &'static str,
    pub energy: f64,
    pub accepted_moves: usize,
}

/// Inference schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceOptions {
    pub max_sweeps: usize,
    /// Also try joint object+category moves in every sweep.
    pub joint_moves: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 20,
            joint_moves: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelingResult {
    pub objects: Vec<usize>,
    pub categories: Vec<usize>,
    pub energy: f64,
    pub terms: EnergyTerms,
    /// Accepted moves, in order.
    pub moves: Vec<MoveRecord>,
    pub sweeps: Vec<SweepRecord>,
}

impl LabelingResult {
    pub fn label_maps(&self, problem: &CrfProblem) -> LabelMaps {
        LabelMaps {
            width: problem.width,
            height: problem.height,
            num_objects: problem.num_object_labels - 2,
            objects: self.objects.iter().map(|&o| o as u16).collect(),
            categories: self.categories.iter().map(|&c| problem.categories[c]).collect(),
        }
    }

    /// Per-term breakdown and the sweep log.
    pub fn report(&self) -> serde_json::Value {
        serde_json::json!({
            "energy": self.energy,
            "terms": self.terms,
            "sweeps": self.sweeps,
            "accepted_moves": self.moves.len(),
        })
    }
}

/// Solves one binary move and returns the proposed labeling.
pub fn propose_move(problem: &CrfProblem, objects: &[usize], categories: &[usize], kind: Move) -> (Vec<usize>, Vec<usize>) {
    let n = problem.num_pixels();
    let [l1, l2, l3, l4, l5] = problem.lambda;
    let unary = |i: usize, (o, c): (usize, usize)| {
        l1 * problem.psi_o(i, o) + l2 * problem.psi_c(i, c) + l5 * coupling_cost(o, c, &problem.m2)
    };
    let switched = |i: usize| -> (usize, usize) {
        match kind {
            Move::Object(a) => (a, categories[i]),
            Move::Category(a) => (objects[i], a),
            Move::Joint(a) => (a, problem.m2[a]),
        }
    };
    let pair = |w: f64, (oa, ca): (usize, usize), (ob, cb): (usize, usize)| {
        let mut v = 0.0;
        if oa != ob {
            v += l3 * w;
        }
        if ca != cb {
            v += l4 * w;
        }
        v
    };
    let mut e0: Vec<f64> = Vec::with_capacity(n);
    let mut e1: Vec<f64> = Vec::with_capacity(n);
    for i in 0..n {
        e0.push(unary(i, (objects[i], categories[i])));
        e1.push(unary(i, switched(i)));
    }
    let mut g = Graph::new(n);
    for e in &problem.edges {
        let (i, j) = (e.a, e.b);
        let (si, sj) = ((objects[i], categories[i]), (objects[j], categories[j]));
        let (ti, tj) = (switched(i), switched(j));
        let a = pair(e.weight, si, sj);
        let b = pair(e.weight, si, tj);
        let c = pair(e.weight, ti, sj);
        let d = pair(e.weight, ti, tj);
        debug_assert!(a + d <= b + c + 1e-9, "non-submodular move term");
        e1[i] += c - a;
        e1[j] += d - c;
        let cap = (b + c - a - d).max(0.0);
        if cap > 0.0 {
            g.add_edge(i, j, cap, 0.0).expect("nonnegative by submodularity");
        }
    }
    for i in 0..n {
        let delta = e1[i] - e0[i];
        let (s, t) = if delta > 0.0 { (delta, 0.0) } else { (0.0, -delta) };
        g.add_terminal(i, s, t).expect("finite costs");
    }
    g.max_flow();
    let mut o = objects.to_vec();
    let mut c = categories.to_vec();
    for i in 0..n {
        if g.segment(i) == Segment::Sink {
            let (no, nc) = switched(i);
            o[i] = no;
            c[i] = nc;
        }
    }
    (o, c)
}

struct Search<'a> {
    problem: &'a CrfProblem,
    objects: Vec<usize>,
    categories: Vec<usize>,
    energy: f64,
    moves: Vec<MoveRecord>,
    sweeps: Vec<SweepRecord>,
    objective: &'static str,
}

impl<'a> Search<'a> {
    fn new(problem: &'a CrfProblem, objects: Vec<usize>, categories: Vec<usize>) -> Self {
        let energy = problem.total_energy(&objects, &categories);
        Self {
            objective: "full",
            problem,
            objects,
            categories,
            energy,
            moves: Vec::new(),
            sweeps: Vec::new(),
        }
    }

    /// Applies the move if it strictly lowers the energy.
    fn try_move(&mut self, sweep: usize, kind: Move) -> bool {
        let (o, c) = propose_move(self.problem, &self.objects, &self.categories, kind);
        if o == self.objects && c == self.categories {
            return false;
        }
        let e = self.problem.total_energy(&o, &c);
        if e < self.energy {
            self.moves.push(MoveRecord {
                sweep,
                kind,
                energy_before: self.energy,
                energy_after: e,
            });
            self.objects = o;
            self.categories = c;
            self.energy = e;
            true
        } else {
            false
        }
    }

    fn run(&mut self, kinds: &[fn(usize) -> Move], labels: &[usize], max_sweeps: usize) {
        for sweep in 0..max_sweeps {
            let mut accepted = 0;
            for (kind, &count) in kinds.iter().zip(labels) {
                for a in 0..count {
                    accepted += self.try_move(sweep, kind(a)) as usize;
                }
            }
            self.sweeps.push(SweepRecord {
                sweep,
                objective: self.objective,
                energy: self.energy,
                accepted_moves: accepted,
            });
            if accepted == 0 {
                break;
            }
        }
    }

    fn finish(self) -> LabelingResult {
        let terms = self.problem.energy(&self.objects, &self.categories);
        LabelingResult {
            objects: self.objects,
            categories: self.categories,
            energy: terms.total,
            terms,
            moves: self.moves,
            sweeps: self.sweeps,
        }
    }
}

fn argmin_objects(problem: &CrfProblem) -> Vec<usize> {
    let l = problem.num_object_labels;
    (0..problem.num_pixels())
        .map(|i| {
            let row = &problem.object_unary[i * l..(i + 1) * l];
            let mut best = 0;
            for (o, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = o;
                }
            }
            best
        })
        .collect()
}

/// Joint minimization over both layers.
///
/// Each sweep expands every object label, then every category, then
/// (optionally) every joint pair `(α, M2(α))`; a search stops after a sweep
/// without an accepted move. Searches start from the per-pixel best object
/// label with its category, from the separated solution, and from each
/// uniform labeling `(α, M2(α))`. The lowest final energy wins, ties going
/// to the earlier start.
pub fn infer_holistic(problem: &CrfProblem, options: InferenceOptions) -> LabelingResult {
    infer_paired(problem, options).0
}

/// Holistic and separated results from one call; the separated solution
/// is computed once and reused as a holistic start.
pub fn infer_paired(problem: &CrfProblem, options: InferenceOptions) -> (LabelingResult, LabelingResult) {
    let n = problem.num_pixels();
    let objects = argmin_objects(problem);
    let categories = objects.iter().map(|&o| problem.m2[o]).collect();
    let separated = infer_separated(problem, options);
    let mut starts = vec![(objects, categories), (separated.objects.clone(), separated.categories.clone())];
    starts.extend((0..problem.num_object_labels).map(|a| (vec![a; n], vec![problem.m2[a]; n])));
    let results: Vec<LabelingResult> = starts
        .into_par_iter()
        .map(|(o, c)| holistic_search(problem, o, c, options))
        .collect();
    let best = results
        .into_iter()
        .reduce(|best, r| if r.energy < best.energy { r } else { best })
        .expect("at least one start");
    (best, separated)
}

fn holistic_search(
    problem: &CrfProblem,
    objects: Vec<usize>,
    categories: Vec<usize>,
    options: InferenceOptions,
) -> LabelingResult {
    let mut search = Search::new(problem, objects, categories);
    let (lo, lc) = (problem.num_object_labels, problem.num_categories());
    if options.joint_moves {
        search.run(&[Move::Object, Move::Category, Move::Joint], &[lo, lc, lo], options.max_sweeps);
    } else {
        search.run(&[Move::Object, Move::Category], &[lo, lc], options.max_sweeps);
    }
    search.finish()
}

/// Two-stage baseline: segment with the object terms alone, then label
/// categories with the segmentation frozen.
pub fn infer_separated(problem: &CrfProblem, options: InferenceOptions) -> LabelingResult {
    let mut stage1 = problem.clone();
    stage1.lambda[1] = 0.0;
    stage1.lambda[3] = 0.0;
    stage1.lambda[4] = 0.0;
    let objects = argmin_objects(problem);
    let categories: Vec<usize> = objects.iter().map(|&o| problem.m2[o]).collect();
    let mut seg = Search::new(&stage1, objects, categories);
    seg.objective = "segmentation";
    seg.run(&[Move::Object], &[problem.num_object_labels], options.max_sweeps);
    let objects = seg.objects;
    let categories = objects.iter().map(|&o| problem.m2[o]).collect();
    let mut lab = Search::new(problem, objects, categories);
    let offset = seg.sweeps.len();
    lab.run(&[Move::Category], &[problem.num_categories()], options.max_sweeps);
    for s in &mut lab.sweeps {
        s.sweep += offset;
    }
    for m in &mut lab.moves {
        m.sweep += offset;
    }
    let mut sweeps = seg.sweeps;
    sweeps.append(&mut lab.sweeps);
    let mut result = lab.finish();
    // only full-objective moves are logged; segmentation moves live on a
    // different energy scale
    result.sweeps = sweeps;
    result
}

