//! Scores, the mean-response baseline, cross-validation folds and the
//! replicate harness used by the benchmark.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predict::{predict_cold, ColdQuery, ModeQuery};
use crate::simulate::TrainTestSplit;
use crate::state::{Hyperparams, ModelState};
use crate::tensor::{FeatureMatrix, Mask3, Tensor3};
use crate::vb::{train, TrainConfig, TrainTrace};

fn check_len(a: usize, b: usize, min: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("length mismatch: {a} vs {b}")));
    }
    if a < min {
        return Err(Error::Shape(format!("need at least {min} values, got {a}")));
    }
    Ok(())
}

/// `sqrt(mean((pred - truth)^2)) / train_sd`.
pub fn normalized_rmse(pred: &[f64], truth: &[f64], train_sd: f64) -> Result<f64> {
    check_len(pred.len(), truth.len(), 1)?;
    if !(train_sd > 0.0) {
        return Err(Error::Config(format!("train_sd must be positive, got {train_sd}")));
    }
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pred.len() as f64).sqrt() / train_sd)
}

/// Sample correlation; `None` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_len(x.len(), y.len(), 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks in half-units so the
/// result equals exhaustive pair counting exactly.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores.len(), labels.len(), 2)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Config("auroc scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config("auroc needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives; ranks are 1-based.
    let mut rank2_pos: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let twice_avg = (start + 1 + end + 1) as u64;
        for &i in &order[start..=end] {
            if labels[i] {
                rank2_pos += twice_avg;
            }
        }
        start = end + 1;
    }
    let u2 = rank2_pos - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceScore {
    /// L2 norm of the feature's row of `E[A]`.
    #[default]
    RowNorm,
    /// Mean of `1 / E[lambda]` over the feature's precisions.
    InversePrecision,
}

/// One score per input feature of `mode`; the bias row is excluded.
pub fn feature_importance(state: &ModelState, mode: usize, score: ImportanceScore) -> Vec<f64> {
    let ms = &state.modes[mode];
    let p = ms.features.ncols();
    match score {
        ImportanceScore::RowNorm => {
            let a = ms.proj_mean();
            (0..p).map(|r| a.row(r).norm()).collect()
        }
        ImportanceScore::InversePrecision => {
            let l = ms.proj.len();
            (0..p)
                .map(|r| {
                    (0..l).map(|c| 1.0 / ms.lambda.mean(ms.lambda_idx(r, c))).sum::<f64>()
                        / l as f64
                })
                .collect()
        }
    }
}

/// The nine prediction settings: training fit, warm start and the seven
/// combinations of new modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Train,
    Warm,
    M1,
    M2,
    M3,
    M12,
    M13,
    M23,
    M123,
}

impl Task {
    pub const ALL: [Task; 9] = [
        Task::Train,
        Task::Warm,
        Task::M1,
        Task::M2,
        Task::M3,
        Task::M12,
        Task::M13,
        Task::M23,
        Task::M123,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::Warm => "warm",
            Task::M1 => "m1",
            Task::M2 => "m2",
            Task::M3 => "m3",
            Task::M12 => "m1&2",
            Task::M13 => "m1&3",
            Task::M23 => "m2&3",
            Task::M123 => "m1,2&3",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.label() == s)
    }

    /// Which modes are new to the model in this task.
    pub fn new_modes(self) -> [bool; 3] {
        match self {
            Task::Train | Task::Warm => [false; 3],
            Task::M1 => [true, false, false],
            Task::M2 => [false, true, false],
            Task::M3 => [false, false, true],
            Task::M12 => [true, true, false],
            Task::M13 => [true, false, true],
            Task::M23 => [false, true, true],
            Task::M123 => [true; 3],
        }
    }

    pub fn is_cold(self) -> bool {
        self.new_modes().iter().any(|&b| b)
    }
}

fn observed_mean(y: &Tensor3, mask: &Mask3) -> Result<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for (&v, &o) in y.as_slice().iter().zip(mask.as_slice()) {
        if o {
            s += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Shape("training mask has no observed cells".into()));
    }
    Ok(s / n as f64)
}

/// Mean-response predictions for `task`.
///
/// Cold tasks return a tensor whose new modes have `n_new[m]` entries and
/// whose known modes match `y`; each cell averages the observed responses
/// sharing its known-mode indices. Warm and train tasks return a tensor the
/// shape of `y` holding, per cell, the mean of the three fiber means through
/// it. Empty supports fall back to the global observed mean.
pub fn mean_baseline(y: &Tensor3, mask: &Mask3, task: Task, n_new: [usize; 3]) -> Result<Tensor3> {
    mask.check_pairs(y)?;
    let global = observed_mean(y, mask)?;
    let d = y.dims();
    let obs = |i, j, k| mask.get(i, j, k);
    if !task.is_cold() {
        let mut sums = [vec![(0.0, 0usize); d[1] * d[2]], vec![(0.0, 0); d[0] * d[2]], vec![(0.0, 0); d[0] * d[1]]];
        for k in 0..d[2] {
            for j in 0..d[1] {
                for i in 0..d[0] {
                    if obs(i, j, k) {
                        let v = y.get(i, j, k);
                        for (acc, key) in sums.iter_mut().zip([j + d[1] * k, i + d[0] * k, i + d[0] * j]) {
                            acc[key].0 += v;
                            acc[key].1 += 1;
                        }
                    }
                }
            }
        }
        let mean = |(s, n): (f64, usize)| if n == 0 { global } else { s / n as f64 };
        return Ok(Tensor3::from_fn(d, |i, j, k| {
            (mean(sums[0][j + d[1] * k]) + mean(sums[1][i + d[0] * k]) + mean(sums[2][i + d[0] * j])) / 3.0
        }));
    }

    let new = task.new_modes();
    let known_dims = [0, 1, 2].map(|m| if new[m] { 1 } else { d[m] });
    let mut acc = vec![(0.0, 0usize); known_dims.iter().product()];
    let key = |i: usize, j: usize, k: usize| {
        let (i, j, k) = (
            if new[0] { 0 } else { i },
            if new[1] { 0 } else { j },
            if new[2] { 0 } else { k },
        );
        i + known_dims[0] * (j + known_dims[1] * k)
    };
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                if obs(i, j, k) {
                    let e = &mut acc[key(i, j, k)];
                    e.0 += y.get(i, j, k);
                    e.1 += 1;
                }
            }
        }
    }
    let out_dims = [0, 1, 2].map(|m| if new[m] { n_new[m] } else { d[m] });
    Ok(Tensor3::from_fn(out_dims, |i, j, k| {
        let (s, n) = acc[key(i, j, k)];
        if n == 0 {
            global
        } else {
            s / n as f64
        }
    }))
}

/// Held-out example indices per mode for each fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<[Vec<usize>; 3]>,
}

impl FoldPlan {
    /// Training indices of `fold` in `mode` (the complement of its holdout).
    pub fn train_indices(&self, fold: usize, mode: usize, n: usize) -> Vec<usize> {
        let held = &self.folds[fold][mode];
        (0..n).filter(|i| !held.contains(i)).collect()
    }
}

/// Random folds: each mode is shuffled once and fold `f` holds out the next
/// `holdout[m]` positions, wrapping around, so every index is held out
/// `floor` or `ceil` of `k * holdout / n` times.
pub fn make_folds(n: [usize; 3], k: usize, holdout: [usize; 3], seed: u64) -> Result<FoldPlan> {
    if k == 0 {
        return Err(Error::Config("need at least one fold".into()));
    }
    for m in 0..3 {
        if holdout[m] > 0 && holdout[m] >= n[m] {
            return Err(Error::Config(format!(
                "mode {}: holding out {} of {} examples leaves none to train on",
                m + 1,
                holdout[m],
                n[m]
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<usize>> = (0..3)
        .map(|m| {
            let mut p: Vec<usize> = (0..n[m]).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let folds = (0..k)
        .map(|f| {
            [0, 1, 2].map(|m| {
                let mut held: Vec<usize> =
                    (0..holdout[m]).map(|t| perms[m][(f * holdout[m] + t) % n[m]]).collect();
                held.sort_unstable();
                held
            })
        })
        .collect();
    Ok(FoldPlan { k, folds })
}

/// One split per fold of `make_folds`; fold `f` draws its warm cells with
/// seed `seed + 1 + f`.
pub fn fold_splits(n: [usize; 3], k: usize, holdout: [usize; 3], warm_frac: f64, seed: u64) -> Result<Vec<TrainTestSplit>> {
    let plan = make_folds(n, k, holdout, seed)?;
    plan.folds
        .into_iter()
        .enumerate()
        .map(|(f, test)| TrainTestSplit::from_holdout(n, test, warm_frac, seed.wrapping_add(1 + f as u64)))
        .collect()
}

/// Settings used for the simulated benchmark: Tucker with four learned
/// latent columns per mode or CP of rank 64, the given Gamma prior on
/// projections (and on the Tucker core), precisions shared across rows and
/// a latent variance of 0.01 on z-scored responses.
pub fn simulation_hyper(decomposition: crate::state::Decomposition, alpha: f64, beta: f64) -> Hyperparams {
    let mut h = match decomposition {
        crate::state::Decomposition::Tucker => Hyperparams::tucker([4, 4, 4], alpha, beta),
        crate::state::Decomposition::Cp => Hyperparams::cp(64, alpha, beta),
    };
    h.row_shared_precision = true;
    for m in &mut h.modes {
        m.sigma2 = SIMULATION_LATENT_VARIANCE;
    }
    h
}

pub const SIMULATION_LATENT_VARIANCE: f64 = 0.01;

/// Features for every example of each mode, the full response tensor with
/// its observation mask, and optional causal labels for feature scoring.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub features: [FeatureMatrix; 3],
    pub responses: Tensor3,
    pub observed: Mask3,
    pub causal: Option<[Vec<usize>; 3]>,
}

impl ExperimentData {
    pub fn from_sim(ds: &crate::simulate::SimDataset) -> Self {
        Self {
            features: ds.features.clone(),
            responses: ds.noisy.clone(),
            observed: Mask3::full(ds.noisy.dims()),
            causal: Some(ds.causal.clone()),
        }
    }

    /// Restricts every mode's features to the given columns.
    pub fn with_feature_subset(&self, cols: &[Vec<usize>; 3]) -> Self {
        let mut out = self.clone();
        for m in 0..3 {
            out.features[m] = self.features[m].select_cols(&cols[m]);
        }
        out.causal = self.causal.as_ref().map(|c| {
            [0, 1, 2].map(|m| {
                c[m].iter()
                    .filter_map(|f| cols[m].iter().position(|x| x == f))
                    .collect()
            })
        });
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: Task,
    pub nrmse: f64,
    /// `None` when the prediction or truth is constant.
    pub pearson: Option<f64>,
    pub n_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub replicate: usize,
    pub scores: Vec<TaskScore>,
    pub auroc: [Option<f64>; 3],
    pub runtime_ms: u64,
}

impl EvalReport {
    pub fn score(&self, task: Task) -> Option<&TaskScore> {
        self.scores.iter().find(|s| s.task == task)
    }

    pub fn nrmse(&self, task: Task) -> Option<f64> {
        self.score(task).map(|s| s.nrmse)
    }
}

fn collect_observed(pred: &Tensor3, truth: &Tensor3, mask: &Mask3) -> (Vec<f64>, Vec<f64>) {
    let mut p = Vec::new();
    let mut t = Vec::new();
    for ((&a, &b), &o) in pred.as_slice().iter().zip(truth.as_slice()).zip(mask.as_slice()) {
        if o {
            p.push(a);
            t.push(b);
        }
    }
    (p, t)
}

fn score_task(task: Task, pred: &Tensor3, truth: &Tensor3, mask: &Mask3, sd: f64) -> Result<Option<TaskScore>> {
    let (p, t) = collect_observed(pred, truth, mask);
    if p.is_empty() {
        return Ok(None);
    }
    let pearson = if p.len() >= 2 { pearson(&p, &t)? } else { None };
    Ok(Some(TaskScore {
        task,
        nrmse: normalized_rmse(&p, &t, sd)?,
        pearson,
        n_cells: p.len(),
    }))
}

/// Training tensor, training mask and per-task truth blocks for one split.
struct SplitView {
    y_train: Tensor3,
    train_mask: Mask3,
    warm_mask: Mask3,
    mean: f64,
    sd: f64,
}

fn split_view(data: &ExperimentData, split: &TrainTestSplit) -> Result<SplitView> {
    let tr = [&split.train[0][..], &split.train[1][..], &split.train[2][..]];
    let y_train = data.responses.select(tr);
    let observed = data.observed.select(tr);
    if split.warm.dims() != y_train.dims() {
        return Err(Error::Shape(format!(
            "warm mask {:?} does not match training block {:?}",
            split.warm.dims(),
            y_train.dims()
        )));
    }
    let flags: Vec<bool> = observed
        .as_slice()
        .iter()
        .zip(split.warm.as_slice())
        .map(|(&o, &w)| o && !w)
        .collect();
    let train_mask = Mask3::from_flags(y_train.dims(), flags)?;
    let warm_flags: Vec<bool> = observed
        .as_slice()
        .iter()
        .zip(split.warm.as_slice())
        .map(|(&o, &w)| o && w)
        .collect();
    let warm_mask = Mask3::from_flags(y_train.dims(), warm_flags)?;
    let vals: Vec<f64> = collect_observed(&y_train, &y_train, &train_mask).0;
    if vals.len() < 2 {
        return Err(Error::Shape("need at least two observed training responses".into()));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Shape("training responses are constant".into()));
    }
    Ok(SplitView {
        y_train,
        train_mask,
        warm_mask,
        mean,
        sd,
    })
}

/// Indices and truth for a cold task: test indices on new modes, training
/// indices on known ones.
fn cold_block(data: &ExperimentData, split: &TrainTestSplit, task: Task) -> (Tensor3, Mask3) {
    let new = task.new_modes();
    let idx: [&[usize]; 3] = [0, 1, 2].map(|m| {
        if new[m] {
            &split.test[m][..]
        } else {
            &split.train[m][..]
        }
    });
    (data.responses.select(idx), data.observed.select(idx))
}

/// Trains on one split and scores all nine tasks plus per-mode AUROC.
///
/// Responses are z-scored with the observed training statistics before
/// training and predictions are mapped back, so errors are on the original
/// scale and normalized by the training sd.
pub fn evaluate_split(
    data: &ExperimentData,
    split: &TrainTestSplit,
    hyper: &Hyperparams,
    cfg: &TrainConfig,
    replicate: usize,
) -> Result<(ModelState, TrainTrace, EvalReport)> {
    let start = Instant::now();
    let view = split_view(data, split)?;
    let mut y_std = view.y_train.clone();
    for v in y_std.as_mut_slice() {
        *v = (*v - view.mean) / view.sd;
    }
    let feats = [0, 1, 2].map(|m| data.features[m].select_rows(&split.train[m]));
    let mut state = ModelState::init_random(hyper.clone(), feats)?;
    let trace = train(&mut state, &y_std, &view.train_mask, cfg)?;

    let unscale = |t: Tensor3| -> Tensor3 {
        let mut t = t;
        for v in t.as_mut_slice() {
            *v = *v * view.sd + view.mean;
        }
        t
    };
    let mut scores = Vec::new();
    for task in Task::ALL {
        let query = ColdQuery {
            modes: [0, 1, 2].map(|m| {
                if task.new_modes()[m] {
                    ModeQuery::New(data.features[m].select_rows(&split.test[m]))
                } else {
                    ModeQuery::Known
                }
            }),
        };
        let pred = unscale(predict_cold(&state, &query)?);
        let s = match task {
            Task::Train => score_task(task, &pred, &view.y_train, &view.train_mask, view.sd)?,
            Task::Warm => score_task(task, &pred, &view.y_train, &view.warm_mask, view.sd)?,
            _ => {
                let (truth, mask) = cold_block(data, split, task);
                score_task(task, &pred, &truth, &mask, view.sd)?
            }
        };
        scores.extend(s);
    }
    let auroc = auroc_per_mode(&state, data.causal.as_ref(), ImportanceScore::RowNorm)?;
    let report = EvalReport {
        replicate,
        scores,
        auroc,
        runtime_ms: start.elapsed().as_millis() as u64,
    };
    Ok((state, trace, report))
}

pub fn auroc_per_mode(
    state: &ModelState,
    causal: Option<&[Vec<usize>; 3]>,
    score: ImportanceScore,
) -> Result<[Option<f64>; 3]> {
    let mut out = [None; 3];
    if let Some(causal) = causal {
        for m in 0..3 {
            let p = state.modes[m].features.ncols();
            let labels: Vec<bool> = (0..p).map(|f| causal[m].contains(&f)).collect();
            let n_pos = labels.iter().filter(|&&l| l).count();
            if n_pos > 0 && n_pos < p {
                out[m] = Some(auroc(&feature_importance(state, m, score), &labels)?);
            }
        }
    }
    Ok(out)
}

/// Scores the mean-response baseline on the same tasks; no training.
pub fn evaluate_baseline(data: &ExperimentData, split: &TrainTestSplit, replicate: usize) -> Result<EvalReport> {
    let start = Instant::now();
    let view = split_view(data, split)?;
    let n_new = [0, 1, 2].map(|m| split.test[m].len());
    let mut scores = Vec::new();
    for task in Task::ALL {
        let pred = mean_baseline(&view.y_train, &view.train_mask, task, n_new)?;
        let s = match task {
            Task::Train => score_task(task, &pred, &view.y_train, &view.train_mask, view.sd)?,
            Task::Warm => score_task(task, &pred, &view.y_train, &view.warm_mask, view.sd)?,
            _ => {
                let (truth, mask) = cold_block(data, split, task);
                score_task(task, &pred, &truth, &mask, view.sd)?
            }
        };
        scores.extend(s);
    }
    Ok(EvalReport {
        replicate,
        scores,
        auroc: [None; 3],
        runtime_ms: start.elapsed().as_millis() as u64,
    })
}

/// Indices of the `ceil(keep * scores.len())` highest scores, sorted.
pub fn top_fraction(scores: &[f64], keep: f64) -> Vec<usize> {
    let n = ((keep * scores.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top = order[..n.min(scores.len())].to_vec();
    top.sort_unstable();
    top
}

#[derive(Debug, Clone)]
pub struct TwoRoundResult {
    /// Union of the per-run selections, as column indices of the input features.
    pub selected: [Vec<usize>; 3],
    pub round1: Vec<EvalReport>,
    pub state: ModelState,
    pub report: EvalReport,
}

/// Round 1 trains on every split with the first settings and keeps, per
/// mode, the union of each run's top `keep_fraction` features. Round 2
/// retrains on `final_split` using only those features.
pub fn two_round_pipeline(
    data: &ExperimentData,
    round1_splits: &[TrainTestSplit],
    round1: (&Hyperparams, &TrainConfig),
    keep_fraction: f64,
    final_split: &TrainTestSplit,
    round2: (&Hyperparams, &TrainConfig),
) -> Result<TwoRoundResult> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep_fraction {keep_fraction} not in (0, 1]")));
    }
    if round1_splits.is_empty() {
        return Err(Error::Config("round 1 needs at least one split".into()));
    }
    let mut selected: [Vec<usize>; 3] = Default::default();
    let mut reports = Vec::new();
    for (r, split) in round1_splits.iter().enumerate() {
        let (state, _, report) = evaluate_split(data, split, round1.0, round1.1, r)?;
        for (m, sel) in selected.iter_mut().enumerate() {
            let scores = feature_importance(&state, m, ImportanceScore::RowNorm);
            for f in top_fraction(&scores, keep_fraction) {
                if !sel.contains(&f) {
                    sel.push(f);
                }
            }
            sel.sort_unstable();
        }
        reports.push(report);
    }
    if let Some(m) = selected.iter().position(|s| s.is_empty()) {
        return Err(Error::Config(format!("no features selected for mode {}", m + 1)));
    }
    let reduced = data.with_feature_subset(&selected);
    let (state, _, report) = evaluate_split(&reduced, final_split, round2.0, round2.1, 0)?;
    Ok(TwoRoundResult {
        selected,
        round1: reports,
        state,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// Mean and sample sd of the non-missing values.
pub fn summarize(values: impl IntoIterator<Item = Option<f64>>) -> Option<Summary> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(Summary { mean, sd, n: v.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut halves = 0u64;
        let mut pairs = 0u64;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1;
                    if scores[i] > scores[j] {
                        halves += 2;
                    } else if scores[i] == scores[j] {
                        halves += 1;
                    }
                }
            }
        }
        halves as f64 / (2 * pairs) as f64
    }

    #[test]
    fn nrmse_examples() {
        let t = [1.0, -2.0, 0.5];
        assert_eq!(normalized_rmse(&t, &t, 2.0).unwrap(), 0.0);
        let p: Vec<f64> = t.iter().map(|v| v + 2.0).collect();
        assert!((normalized_rmse(&p, &t, 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(normalized_rmse(&t, &t[..2], 1.0).is_err());
        assert!(normalized_rmse(&t, &t, 0.0).is_err());
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap().unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap().unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[4.0, 4.0, 4.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn auroc_examples() {
        let s = [0.9, 0.8, 0.2, 0.1];
        let l = [true, false, true, false];
        assert_eq!(auroc(&s, &l).unwrap(), 0.75);
        assert_eq!(pair_count_auroc(&s, &l), 0.75);
        assert_eq!(auroc(&s, &[true, true, false, false]).unwrap(), 1.0);
        let inv: Vec<bool> = l.iter().map(|b| !b).collect();
        assert_eq!(auroc(&s, &inv).unwrap(), 0.25);
        assert!(auroc(&s, &[true; 4]).is_err());
        assert_eq!(auroc(&[1.0, 1.0], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn baseline_global_mean_for_triple_cold() {
        let y = Tensor3::from_fn([2, 3, 2], |i, j, k| (i + 2 * j + 5 * k) as f64);
        let mut mask = Mask3::full([2, 3, 2]);
        mask.set(1, 2, 1, false);
        let p = mean_baseline(&y, &mask, Task::M123, [2, 2, 2]).unwrap();
        let global = observed_mean(&y, &mask).unwrap();
        assert_eq!(p.dims(), [2, 2, 2]);
        assert!(p.as_slice().iter().all(|&v| v == global));
    }

    #[test]
    fn baseline_warm_by_enumeration() {
        let vals = [1.0, 2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0];
        let y = Tensor3::from_vec([2, 2, 2], vals.to_vec()).unwrap();
        let p = mean_baseline(&y, &Mask3::full([2, 2, 2]), Task::Warm, [0; 3]).unwrap();
        // Fibers through (0,0,0): mode 1 {1,2}, mode 2 {1,3}, mode 3 {1,7}.
        let want = ((1.0 + 2.0) / 2.0 + (1.0 + 3.0) / 2.0 + (1.0 + 7.0) / 2.0) / 3.0;
        assert_eq!(p.get(0, 0, 0), want);
    }

    #[test]
    fn baseline_cold_single_mode() {
        let y = Tensor3::from_fn([3, 2, 2], |i, j, k| (i * 10 + j + 3 * k) as f64);
        let p = mean_baseline(&y, &Mask3::full([3, 2, 2]), Task::M1, [4, 0, 0]).unwrap();
        assert_eq!(p.dims(), [4, 2, 2]);
        for k in 0..2 {
            for j in 0..2 {
                let want = (0..3).map(|i| y.get(i, j, k)).sum::<f64>() / 3.0;
                for i in 0..4 {
                    assert!((p.get(i, j, k) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn baseline_constant_and_empty() {
        let y = Tensor3::filled([3, 3, 3], 2.5);
        for task in Task::ALL {
            let p = mean_baseline(&y, &Mask3::full([3, 3, 3]), task, [2, 2, 2]).unwrap();
            assert!(p.as_slice().iter().all(|&v| v == 2.5), "{task:?}");
        }
        assert!(mean_baseline(&y, &Mask3::empty([3, 3, 3]), Task::Warm, [0; 3]).is_err());
    }

    #[test]
    fn baseline_empty_fiber_falls_back_to_global() {
        let y = Tensor3::from_fn([2, 2, 1], |i, j, _| (1 + i + 2 * j) as f64);
        let mut mask = Mask3::full([2, 2, 1]);
        mask.set(0, 1, 0, false);
        mask.set(1, 1, 0, false);
        let p = mean_baseline(&y, &mask, Task::M1, [1, 0, 0]).unwrap();
        assert_eq!(p.get(0, 1, 0), observed_mean(&y, &mask).unwrap());
    }

    #[test]
    fn folds() {
        let plan = make_folds([35, 26, 5], 10, [4, 3, 0], 1).unwrap();
        assert_eq!(plan.folds.len(), 10);
        for f in &plan.folds {
            assert_eq!((f[0].len(), f[1].len(), f[2].len()), (4, 3, 0));
        }
        let mut counts = vec![0; 35];
        for f in &plan.folds {
            for &i in &f[0] {
                counts[i] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c == 1 || c == 2));
        assert_eq!(plan, make_folds([35, 26, 5], 10, [4, 3, 0], 1).unwrap());
        let one = make_folds([5, 5, 5], 1, [0; 3], 2).unwrap();
        assert!(one.folds[0].iter().all(|h| h.is_empty()));
        assert!(make_folds([5, 5, 5], 0, [0; 3], 2).is_err());
        assert!(make_folds([5, 5, 5], 2, [5, 0, 0], 2).is_err());
    }

    #[test]
    fn top_fraction_counts() {
        let s: Vec<f64> = (0..100).map(|v| v as f64).collect();
        let top = top_fraction(&s, 0.15);
        assert_eq!(top, (85..100).collect::<Vec<_>>());
        assert_eq!(top_fraction(&s, 1.0).len(), 100);
    }

    #[test]
    fn importance_is_permutation_invariant_and_zero_rows_score_zero() {
        let hyper = Hyperparams::tucker([2, 2, 2], 1.0, 1.0);
        let feats = crate::testutil::tiny_features(3, [4, 4, 4], [5, 5, 5]);
        let mut s = ModelState::init_random(hyper, feats).unwrap();
        for col in &mut s.modes[0].proj {
            col.mean[2] = 0.0;
        }
        let before = feature_importance(&s, 0, ImportanceScore::RowNorm);
        assert_eq!(before[2], 0.0);
        s.modes[0].proj.swap(0, 1);
        assert_eq!(before, feature_importance(&s, 0, ImportanceScore::RowNorm));
        let inv = feature_importance(&s, 0, ImportanceScore::InversePrecision);
        assert_eq!(inv.len(), 5);
    }

    #[test]
    fn summary_skips_missing() {
        let s = summarize([Some(1.0), None, Some(3.0)]).unwrap();
        assert_eq!((s.mean, s.n), (2.0, 2));
        assert!((s.sd - 2f64.sqrt()).abs() < 1e-15);
        assert!(summarize([None]).is_none());
    }

    fn nrmse_oracle(p: &[f64], t: &[f64], sd: f64) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            s += (p[i] - t[i]).powi(2);
        }
        (s / p.len() as f64).sqrt() / sd
    }

    fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_counting(
            data in prop::collection::vec((0u8..6, any::<bool>()), 2..200)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 * 0.5).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            let pos = labels.iter().filter(|&&l| l).count();
            prop_assume!(pos > 0 && pos < labels.len());
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), pair_count_auroc(&scores, &labels));
        }

        #[test]
        fn nrmse_matches_formula_and_scales(
            v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..100),
            sd in 0.1f64..5.0,
            s in 0.1f64..10.0,
        ) {
            let p: Vec<f64> = v.iter().map(|x| x.0).collect();
            let t: Vec<f64> = v.iter().map(|x| x.1).collect();
            let got = normalized_rmse(&p, &t, sd).unwrap();
            prop_assert!((got - nrmse_oracle(&p, &t, sd)).abs() < 1e-12);
            let ps: Vec<f64> = p.iter().map(|x| x * s).collect();
            let ts: Vec<f64> = t.iter().map(|x| x * s).collect();
            prop_assert!((normalized_rmse(&ps, &ts, sd * s).unwrap() - got).abs() < 1e-12);
        }

        #[test]
        fn pearson_matches_formula_and_is_affine_invariant(
            v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..100),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let x: Vec<f64> = v.iter().map(|p| p.0).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1).collect();
            let r = pearson(&x, &y).unwrap().unwrap();
            prop_assert!((r - pearson_oracle(&x, &y)).abs() < 1e-12);
            let xa: Vec<f64> = x.iter().map(|p| a * p + b).collect();
            prop_assert!((pearson(&xa, &y).unwrap().unwrap() - r).abs() < 1e-12);
        }

        #[test]
        fn baseline_is_permutation_equivariant(seed in 0u64..1000, task_idx in 0usize..9) {
            let task = Task::ALL[task_idx];
            let (y, mask) = crate::testutil::tiny_data(seed, [4, 3, 3], 0.2);
            let perm = [2usize, 0, 3, 1];
            let yp = Tensor3::from_fn([4, 3, 3], |i, j, k| y.get(perm[i], j, k));
            let flags = crate::simulate::cell_coords([4, 3, 3]).map(|(i, j, k)| mask.get(perm[i], j, k)).collect();
            let mp = Mask3::from_flags([4, 3, 3], flags).unwrap();
            let a = mean_baseline(&y, &mask, task, [2, 2, 2]).unwrap();
            let b = mean_baseline(&yp, &mp, task, [2, 2, 2]).unwrap();
            for (i, j, k) in crate::simulate::cell_coords(b.dims()) {
                let src = if task.new_modes()[0] { i } else { perm[i] };
                prop_assert!((b.get(i, j, k) - a.get(src, j, k)).abs() < 1e-12);
            }
        }
    }
}
