//! Sequential forward floating selection of supplementary model states.
//!
//! A candidate set is scored by fitting a DMDc model on each fold's training
//! trajectories and replaying training and test trajectories open loop. The
//! objective is the mean over folds of `(r_tr + r_te) / 2`, where `r` is the
//! per-state R² averaged over every state in the model and over the
//! trajectories. It is maximized.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::RankRule;
use crate::sysid::{assemble_snapshots, fit, mean_r2, Centering};
use crate::trajectory::Trajectory;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    /// Indices into the problem's trajectory list.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split `count` trajectories into `k` folds round-robin; fold `i` tests on
/// every trajectory with `index % k == i` and trains on the rest.
pub fn round_robin_folds(count: usize, k: usize) -> Vec<Fold> {
    (0..k)
        .map(|f| Fold {
            train: (0..count).filter(|i| i % k != f).collect(),
            test: (0..count).filter(|i| i % k == f).collect(),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SelectionProblem {
    /// States always in the model.
    pub mandatory: Vec<String>,
    pub candidates: Vec<String>,
    pub inputs: Vec<String>,
    pub max_added: usize,
    pub trajectories: Vec<Trajectory>,
    pub folds: Vec<Fold>,
    pub rank: RankRule,
    pub centering: Centering,
    pub floating: bool,
}

impl SelectionProblem {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.candidates.iter().find(|c| self.mandatory.contains(c)) {
            return Err(Error::Config(format!("`{c}` is both mandatory and a candidate")));
        }
        if self.max_added > self.candidates.len() {
            return Err(Error::Config(format!(
                "k_T = {} exceeds the {} candidates",
                self.max_added,
                self.candidates.len()
            )));
        }
        if self.folds.is_empty() {
            return Err(Error::Config("at least one fold is required".into()));
        }
        for f in &self.folds {
            if f.train.is_empty() || f.test.is_empty() {
                return Err(Error::Config("every fold needs train and test trajectories".into()));
            }
            if f.train.iter().any(|i| f.test.contains(i)) {
                return Err(Error::Config("fold train and test sets overlap".into()));
            }
            if f.train.iter().chain(&f.test).any(|&i| i >= self.trajectories.len()) {
                return Err(Error::Config("fold index out of range".into()));
            }
        }
        Ok(())
    }
}

/// Objective value and its spread across folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Score {
    pub j: f64,
    pub std: f64,
}

impl Score {
    const FAILED: Score = Score {
        j: f64::NEG_INFINITY,
        std: 0.0,
    };
}

fn mean_over(
    model: &crate::sysid::StateSpaceModel,
    trajs: &[Trajectory],
    idx: &[usize],
) -> Result<Option<f64>> {
    let mut vals = Vec::new();
    for &i in idx {
        if let Some(r) = mean_r2(&model.score(&trajs[i])?) {
            vals.push(r);
        }
    }
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

fn fold_value(problem: &SelectionProblem, states: &[String], fold: &Fold) -> Result<f64> {
    let train: Vec<Trajectory> = fold.train.iter().map(|&i| problem.trajectories[i].clone()).collect();
    let snaps = assemble_snapshots(&train, states, &problem.inputs, &problem.centering)?;
    let model = fit(&snaps, problem.rank)?;
    let r_tr = mean_over(&model, &problem.trajectories, &fold.train)?;
    let r_te = mean_over(&model, &problem.trajectories, &fold.test)?;
    match (r_tr, r_te) {
        (Some(a), Some(b)) => Ok(0.5 * a + 0.5 * b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(Error::Numeric("no trajectory with varying states".into())),
    }
}

/// Objective for the model with `states`; a fit failure on any fold scores
/// negative infinity.
pub fn objective(problem: &SelectionProblem, states: &[String]) -> Score {
    let mut vals = Vec::with_capacity(problem.folds.len());
    for fold in &problem.folds {
        match fold_value(problem, states, fold) {
            Ok(v) if v.is_finite() => vals.push(v),
            Ok(_) => return Score::FAILED,
            Err(e) => {
                log::debug!("objective failed for {states:?}: {e}");
                return Score::FAILED;
            }
        }
    }
    let n = vals.len() as f64;
    let j = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - j) * (v - j)).sum::<f64>() / n).sqrt();
    Score { j, std }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Move {
    Add,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStep {
    pub iteration: usize,
    pub feature: String,
    pub action: Move,
    pub j: f64,
    pub std: f64,
    /// Added set after this step.
    pub set: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult {
    /// Supplementary states chosen, in selection order.
    pub added: Vec<String>,
    /// Mandatory states followed by `added`.
    pub states: Vec<String>,
    pub trace: Vec<TraceStep>,
    /// Best objective found for each supplement count `0..=k_T`.
    pub best_by_size: Vec<Option<Score>>,
}

impl SelectionResult {
    /// `iteration,candidate,action,J,std` rows.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,candidate,action,J,std\n");
        for s in &self.trace {
            let action = match s.action {
                Move::Add => "add",
                Move::Remove => "remove",
            };
            out.push_str(&format!("{},{},{},{},{}\n", s.iteration, s.feature, action, s.j, s.std));
        }
        out
    }
}

fn with(base: &[String], extra: &[String]) -> Vec<String> {
    base.iter().chain(extra).cloned().collect()
}

/// Highest score; ties go to the candidate whose name sorts first.
fn best_of(scored: Vec<(String, Score)>) -> Option<(String, Score)> {
    scored.into_iter().reduce(|best, c| {
        if c.1.j > best.1.j || (c.1.j == best.1.j && c.0 < best.0) {
            c
        } else {
            best
        }
    })
}

pub fn select(problem: &SelectionProblem) -> Result<SelectionResult> {
    problem.validate()?;
    let h = &problem.mandatory;
    let mut added: Vec<String> = Vec::new();
    let mut trace = Vec::new();
    let mut best: Vec<Option<Score>> = vec![None; problem.max_added + 1];
    best[0] = Some(objective(problem, h));
    let mut iteration = 0;
    // Each removal strictly raises the best score of a smaller size, so the
    // loop terminates; the cap guards against pathological ties.
    let cap = 10 * (problem.max_added + 1) * (problem.candidates.len() + 1);

    while added.len() < problem.max_added && iteration < cap {
        iteration += 1;
        let pool: Vec<&String> = problem.candidates.iter().filter(|c| !added.contains(c)).collect();
        let scored: Vec<(String, Score)> = pool
            .par_iter()
            .map(|c| {
                let mut trial = added.clone();
                trial.push((*c).clone());
                ((*c).clone(), objective(problem, &with(h, &trial)))
            })
            .collect();
        let (x_plus, score) = best_of(scored).expect("candidate pool is non-empty while k < k_T");
        added.push(x_plus.clone());
        let k = added.len();
        if best[k].map(|b| score.j > b.j).unwrap_or(true) {
            best[k] = Some(score);
        }
        trace.push(TraceStep {
            iteration,
            feature: x_plus.clone(),
            action: Move::Add,
            j: score.j,
            std: score.std,
            set: added.clone(),
        });

        if !problem.floating || k < 2 {
            continue;
        }
        // Conditional removal: drop the feature whose removal leaves the best
        // smaller set, if that set beats the best seen at that size.
        let removable: Vec<String> = added.iter().filter(|c| **c != x_plus).cloned().collect();
        let scored: Vec<(String, Score)> = removable
            .par_iter()
            .map(|c| {
                let trial: Vec<String> = added.iter().filter(|a| *a != c).cloned().collect();
                (c.clone(), objective(problem, &with(h, &trial)))
            })
            .collect();
        if let Some((x_minus, score)) = best_of(scored) {
            let prev_best = best[k - 1].map(|b| b.j).unwrap_or(f64::NEG_INFINITY);
            if score.j > prev_best {
                added.retain(|a| *a != x_minus);
                best[k - 1] = Some(score);
                iteration += 1;
                trace.push(TraceStep {
                    iteration,
                    feature: x_minus,
                    action: Move::Remove,
                    j: score.j,
                    std: score.std,
                    set: added.clone(),
                });
            }
        }
    }
    Ok(SelectionResult {
        states: with(h, &added),
        added,
        trace,
        best_by_size: best,
    })
}
