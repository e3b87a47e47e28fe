use std::path::{Path, PathBuf};

use batfled::eval::{evaluate_baseline, evaluate_split, fold_splits, ExperimentData};
use batfled::simulate::generate;
use batfled::{
    load_checkpoint, predict_cold, save_checkpoint, train, ColdQuery, Decomposition, FeatureMatrix, ModeQuery,
    ModelState, Tensor3, TrainTestSplit,
};
use rayon::prelude::*;

use crate::config::{parse_core_kind, parse_decomposition, RunConfig};
use crate::files::{self, Metric, Outcome, ResponseScale, SplitFile, TruthFile};
use crate::CliError;

pub struct Context {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
}

impl Context {
    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn ids(f: &[FeatureMatrix; 3]) -> [&[String]; 3] {
    [&f[0].row_ids, &f[1].row_ids, &f[2].row_ids]
}

fn load_features(ctx: &Context) -> Result<[FeatureMatrix; 3], CliError> {
    let paths = ctx
        .cfg
        .data
        .features
        .as_ref()
        .ok_or_else(|| CliError::Validation("data.features is required for this command".into()))?;
    Ok([
        files::read_features(&ctx.cfg.resolve(&paths[0]))?,
        files::read_features(&ctx.cfg.resolve(&paths[1]))?,
        files::read_features(&ctx.cfg.resolve(&paths[2]))?,
    ])
}

fn load_data(ctx: &Context) -> Result<ExperimentData, CliError> {
    let features = load_features(ctx)?;
    let path = ctx.cfg.require("data.responses", ctx.cfg.data.responses.as_ref())?;
    let (responses, observed) = files::read_long(&path, ids(&features))?;
    if observed.count() == 0 {
        return Err(CliError::Validation(format!("{}: no responses", path.display())));
    }
    let causal = match &ctx.cfg.data.truth {
        Some(p) => Some(files::read_json::<TruthFile>(&ctx.cfg.resolve(p))?.causal_indices(&features)?),
        None => None,
    };
    Ok(ExperimentData {
        features,
        responses,
        observed,
        causal,
    })
}

fn load_split(ctx: &Context, data: &ExperimentData) -> Result<Option<TrainTestSplit>, CliError> {
    match &ctx.cfg.data.split {
        Some(p) => {
            let file: SplitFile = files::read_json(&ctx.cfg.resolve(p))?;
            Ok(Some(file.to_split(ids(&data.features))?))
        }
        None => Ok(None),
    }
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let s = &ctx.cfg.simulate;
    let kind = parse_core_kind("simulate.core_kind", &s.core_kind)?;
    let sim = s.sim_config(kind, ctx.cfg.seed)?;
    let ds = generate(&sim)?;
    let split = ds.split(s.holdout, s.warm_frac, ctx.cfg.seed.wrapping_add(1))?;
    for m in 0..3 {
        files::write_text(&ctx.out(&format!("features_m{}.tsv", m + 1)), &files::format_features(&ds.features[m]))?;
    }
    files::write_text(&ctx.out("responses.tsv"), &files::format_long(&ds.noisy, None, ids(&ds.features)))?;
    files::write_json(&ctx.out("truth.json"), &TruthFile::from_dataset(&ds))?;
    files::write_json(&ctx.out("split.json"), &SplitFile::from_split(&split, ids(&ds.features)))?;
    Ok(())
}

pub fn train_cmd(ctx: &Context) -> Result<(), CliError> {
    let data = load_data(ctx)?;
    // With a split, train on its training block with the warm cells hidden.
    let (features, mut y, mask) = match load_split(ctx, &data)? {
        Some(split) => {
            let idx = [&split.train[0][..], &split.train[1], &split.train[2]];
            let mut mask = data.observed.select(idx);
            for (i, j, k) in split.warm_cells() {
                mask.set(i, j, k, false);
            }
            let feats = [0, 1, 2].map(|m| data.features[m].select_rows(&split.train[m]));
            (feats, data.responses.select(idx), mask)
        }
        None => (data.features.clone(), data.responses.clone(), data.observed.clone()),
    };
    if mask.count() == 0 {
        return Err(CliError::Validation("no observed training responses".into()));
    }
    let tc = ctx.cfg.train.train_config()?;
    if ctx.cfg.train.standardize_responses {
        let scale = observed_scale(&y, &mask)?;
        for v in y.as_mut_slice() {
            *v = (*v - scale.mean) / scale.sd;
        }
        files::write_json(&ctx.out("response_scale.json"), &scale)?;
    }
    let mut state = match &ctx.cfg.train.resume_from {
        Some(p) => {
            let state = load_checkpoint(&ctx.cfg.resolve(p))?;
            check_same_examples(&state, &features)?;
            state
        }
        None => {
            let dec = ctx.cfg.model.decomposition()?;
            ModelState::init_random(ctx.cfg.model.hyper(dec, ctx.cfg.seed)?, features)?
        }
    };
    let trace = train(&mut state, &y, &mask, &tc)?;
    save_checkpoint(&state, &ctx.out("model.ckpt"))?;
    files::write_text(&ctx.out("trace.tsv"), &files::format_trace(&trace, tc.elbo_every))?;
    Ok(())
}

fn observed_scale(y: &Tensor3, mask: &batfled::Mask3) -> Result<ResponseScale, CliError> {
    let v: Vec<f64> = y.as_slice().iter().zip(mask.as_slice()).filter(|(_, &o)| o).map(|(&x, _)| x).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    if !(sd > 0.0) {
        return Err(CliError::Validation(
            "training responses are constant; set train.standardize_responses = false".into(),
        ));
    }
    Ok(ResponseScale { mean, sd })
}

fn check_same_examples(state: &ModelState, features: &[FeatureMatrix; 3]) -> Result<(), CliError> {
    for m in 0..3 {
        let f = &state.modes[m].features;
        if f.row_ids != features[m].row_ids || f.col_ids != features[m].col_ids {
            return Err(CliError::Validation(format!(
                "resume_from: mode-{} examples or features differ from the checkpoint",
                m + 1
            )));
        }
    }
    Ok(())
}

/// Query features must carry exactly the training columns, in order.
fn check_schema(state: &ModelState, mode: usize, query: &FeatureMatrix) -> Result<(), CliError> {
    let trained = &state.modes[mode].features.col_ids;
    if *trained == query.col_ids {
        return Ok(());
    }
    let missing: Vec<&str> = trained.iter().filter(|c| !query.col_ids.contains(c)).map(String::as_str).collect();
    let extra: Vec<&str> = query.col_ids.iter().filter(|c| !trained.contains(c)).map(String::as_str).collect();
    let mut msg = format!("mode-{} query features do not match the training schema", mode + 1);
    if !missing.is_empty() {
        msg.push_str(&format!("; missing: {}", missing.join(", ")));
    }
    if !extra.is_empty() {
        msg.push_str(&format!("; unexpected: {}", extra.join(", ")));
    }
    if missing.is_empty() && extra.is_empty() {
        msg.push_str("; columns are in a different order");
    }
    Err(CliError::Validation(msg))
}

pub fn predict(ctx: &Context) -> Result<(), CliError> {
    let p = &ctx.cfg.predict;
    let state = load_checkpoint(&ctx.cfg.require("predict.checkpoint", p.checkpoint.as_ref())?)?;
    let mut new: Vec<Option<FeatureMatrix>> = Vec::new();
    for (m, path) in p.new_modes().into_iter().enumerate() {
        new.push(match path {
            Some(path) => {
                let x = files::read_features(&ctx.cfg.resolve(path))?;
                check_schema(&state, m, &x)?;
                Some(x)
            }
            None => None,
        });
    }
    let query = ColdQuery {
        modes: [0, 1, 2].map(|m| match &new[m] {
            Some(x) => ModeQuery::New(x.clone()),
            None => ModeQuery::Known,
        }),
    };
    let mut pred = predict_cold(&state, &query)?;
    if let Some(path) = &p.response_scale {
        let scale: ResponseScale = files::read_json(&ctx.cfg.resolve(path))?;
        for v in pred.as_mut_slice() {
            *v = *v * scale.sd + scale.mean;
        }
    }
    let row_ids: [&[String]; 3] = [0, 1, 2].map(|m| match &new[m] {
        Some(x) => x.row_ids.as_slice(),
        None => state.modes[m].features.row_ids.as_slice(),
    });
    files::write_text(&ctx.out("predictions.tsv"), &files::format_long(&pred, None, row_ids))?;
    Ok(())
}

fn failure(e: batfled::Error) -> String {
    e.to_string()
}

pub fn evaluate(ctx: &Context) -> Result<(), CliError> {
    let data = load_data(ctx)?;
    let ev = &ctx.cfg.evaluate;
    let n = data.responses.dims();
    let splits: Vec<TrainTestSplit> = match load_split(ctx, &data)? {
        Some(s) if ev.folds <= 1 => vec![s],
        _ => fold_splits(n, ev.folds.max(1), ev.holdout, ev.warm_frac, ctx.cfg.seed)?,
    };
    let method = ev.method.to_ascii_lowercase();
    if method != "model" && method != "mean" {
        return Err(CliError::Validation(format!(
            "evaluate.method: unknown method '{}' (expected model or mean)",
            ev.method
        )));
    }
    let (hyper, tc) = if method == "model" {
        let dec = ctx.cfg.model.decomposition()?;
        (Some(ctx.cfg.model.hyper(dec, ctx.cfg.seed)?), ctx.cfg.train.train_config()?)
    } else {
        (None, ctx.cfg.train.train_config()?)
    };
    let rows: Vec<(usize, Outcome)> = splits
        .par_iter()
        .enumerate()
        .map(|(f, split)| {
            let out = match &hyper {
                Some(h) => evaluate_split(&data, split, &h.clone().with_seed(h.seed.wrapping_add(f as u64)), &tc, f)
                    .map(|(_, _, r)| r),
                None => evaluate_baseline(&data, split, f),
            };
            (f, out.map_err(failure))
        })
        .collect();
    write_reports(ctx, "evaluate", &[("data".into(), method, rows)])
}

type Group = (String, String, Vec<(usize, Outcome)>);

fn write_reports(ctx: &Context, stem: &str, groups: &[Group]) -> Result<(), CliError> {
    let mut summary = files::summary_header();
    let mut timings = Vec::new();
    for (data, method, rows) in groups {
        let prefix = if stem == "evaluate" {
            "report".to_string()
        } else {
            format!("{data}_{method}")
        };
        files::write_text(&ctx.out(&format!("{prefix}_nrmse.tsv")), &files::format_report(rows, Metric::Nrmse))?;
        files::write_text(&ctx.out(&format!("{prefix}_pearson.tsv")), &files::format_report(rows, Metric::Pearson))?;
        summary.push_str(&files::format_summary_rows(data, method, rows));
        for (r, o) in rows {
            timings.push((data.clone(), method.clone(), *r, o.as_ref().ok().map(|x| x.runtime_ms)));
        }
    }
    files::write_text(&ctx.out("summary.tsv"), &summary)?;
    files::write_text(&ctx.out("timings.tsv"), &files::format_timings(&timings))?;
    Ok(())
}

/// Replicate `r` uses simulation seed `seed + 1000 + r`, split seed
/// `seed + 2000 + r` and model seed `seed + r`.
pub fn benchmark(ctx: &Context) -> Result<(), CliError> {
    let b = &ctx.cfg.benchmark;
    let s = &ctx.cfg.simulate;
    let seed = ctx.cfg.seed;
    let kinds = b
        .core_kinds
        .iter()
        .map(|k| parse_core_kind("benchmark.core_kinds", k))
        .collect::<Result<Vec<_>, _>>()?;
    let mut methods: Vec<(String, Option<Decomposition>)> = Vec::new();
    for m in &b.methods {
        let m = m.to_ascii_lowercase();
        let dec = if m == "mean" {
            None
        } else {
            Some(parse_decomposition("benchmark.methods", &m).map_err(|_| {
                CliError::Validation(format!("benchmark.methods: unknown method '{m}' (expected tucker, cp or mean)"))
            })?)
        };
        methods.push((m, dec));
    }
    if b.replicates == 0 || kinds.is_empty() || methods.is_empty() {
        return Err(CliError::Validation(
            "benchmark needs replicates >= 1 and at least one core kind and method".into(),
        ));
    }
    let tc = ctx.cfg.train.train_config()?;
    // Validate everything before any work starts.
    for &kind in &kinds {
        s.sim_config(kind, seed)?;
    }
    for (_, dec) in &methods {
        if let Some(d) = dec {
            ctx.cfg.model.hyper(*d, seed)?;
        }
    }
    let jobs: Vec<(usize, usize, usize)> = (0..kinds.len())
        .flat_map(|k| (0..methods.len()).flat_map(move |m| (0..b.replicates).map(move |r| (k, m, r))))
        .collect();
    let outcomes: Vec<Outcome> = jobs
        .par_iter()
        .map(|&(k, m, r)| {
            let r64 = r as u64;
            let run = || -> batfled::Result<batfled::eval::EvalReport> {
                let sim = s.sim_config(kinds[k], seed.wrapping_add(1000 + r64)).expect("validated");
                let ds = generate(&sim)?;
                let split = ds.split(s.holdout, s.warm_frac, seed.wrapping_add(2000 + r64))?;
                let data = ExperimentData::from_sim(&ds);
                match methods[m].1 {
                    Some(dec) => {
                        let h = ctx.cfg.model.hyper(dec, seed.wrapping_add(r64)).expect("validated");
                        evaluate_split(&data, &split, &h, &tc, r).map(|(_, _, rep)| rep)
                    }
                    None => evaluate_baseline(&data, &split, r),
                }
            };
            run().map_err(failure)
        })
        .collect();
    let mut groups: Vec<Group> = Vec::new();
    for (job, out) in jobs.iter().zip(outcomes) {
        let (k, m, r) = *job;
        let (data, method) = (kinds[k].name().to_string(), methods[m].0.clone());
        match groups.last_mut() {
            Some(g) if g.0 == data && g.1 == method => g.2.push((r, out)),
            _ => groups.push((data, method, vec![(r, out)])),
        }
    }
    write_reports(ctx, "benchmark", &groups)
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))
}
