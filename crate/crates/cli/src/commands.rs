//! Subcommand implementations. Every command writes its CSV outputs under
//! the configured output directory and returns whether its checks passed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sustain::data::io::{load_dataset, save_dataset};
use sustain::data::snapshot::{check_compatible, load_model};
use sustain::data::spec::Preset;
use sustain::data::synth::{generate_dataset, Split};
use sustain::data::Dataset;
use sustain::engine::{alpha_search, load_manifest, run_cascade, save_cascade, Cascade, EvalLabels, StagePlan};
use sustain::gradcheck;
use sustain::mil::model::WeaNet;
use sustain::noise::{monte_carlo_alignment, predicted_gain, TeacherSampler};
use sustain::transfer::LinearProbe;
use sustain::{Error, Result};

use crate::config::ExperimentConfig;
use crate::parallel::parallel_map;
use crate::svg::{heatmap, line_chart, Series};

/// Result of a command that ran to completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Passed,
    /// A statistical or acceptance check did not hold.
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub threads: usize,
}

impl Context {
    fn out(&self) -> Result<&Path> {
        let dir = self.config.output.as_path();
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        Ok(dir)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out()?.join(name);
        fs::write(&path, contents).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }

    /// Dataset from `path` when given, else generated from the config.
    pub fn dataset(&self, path: Option<&Path>) -> Result<Dataset> {
        match path.or(self.config.dataset.path.as_deref()) {
            Some(p) => load_dataset(p),
            None => generate_dataset(&self.config.dataset.spec(self.config.seed)?),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

pub fn generate(ctx: &Context, preset: Option<Preset>) -> Result<Outcome> {
    let mut section = ctx.config.dataset.clone();
    if let Some(p) = preset {
        section.preset = p;
    }
    let spec = section.spec(ctx.config.seed)?;
    let data = generate_dataset(&spec)?;
    let dir = ctx.out()?;
    save_dataset(&data, dir)?;
    println!("dataset written to {}", dir.display());
    println!("{:<6} {:>6}  positives per class (observed / true)", "split", "bags");
    for split in Split::ALL {
        let bags = data.split(split);
        let counts: Vec<String> = (0..data.n_classes)
            .map(|c| {
                let obs = bags.iter().filter(|b| b.observed_labels[c]).count();
                let tru = bags.iter().filter(|b| b.true_labels.as_ref().is_some_and(|t| t[c])).count();
                format!("{obs}/{tru}")
            })
            .collect();
        println!("{:<6} {:>6}  {}", split.name(), bags.len(), counts.join(" "));
    }
    Ok(Outcome::Passed)
}

fn stage_table(cascade: &Cascade) -> String {
    let mut out = String::from(
        "stage,teachers,alphas,selected_epoch,val_map,test_map,test_mauc,test_lwlrap,test_mean_accuracy,test_true_map\n",
    );
    for s in &cascade.stages {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{},{},{:.6},{}",
            s.stage,
            join(&s.plan.teachers, ";"),
            join(&s.plan.alphas, ";"),
            s.selected_epoch,
            s.val_map,
            s.test.map,
            fmt_opt(s.test.mauc),
            fmt_opt(s.test.lwlrap),
            s.test.mean_accuracy,
            fmt_opt(s.test_true.as_ref().map(|m| m.map)),
        );
    }
    out
}

pub fn write_cascade_reports(ctx: &Context, cascade: &Cascade) -> Result<()> {
    save_cascade(cascade, ctx.out()?)?;
    ctx.write("stages.csv", &stage_table(cascade))?;
    let mut hist = String::from("stage,epoch,train_loss,val_map,attention_frozen\n");
    for s in &cascade.stages {
        for e in &s.history {
            let _ = writeln!(
                hist,
                "{},{},{:.6},{},{}",
                s.stage,
                e.epoch,
                e.train_loss,
                fmt_opt(e.val_map),
                e.attention_frozen
            );
        }
        ctx.write(&format!("stage_{}_metrics.csv", s.stage), &s.test.to_csv())?;
    }
    ctx.write("history.csv", &hist)?;
    let label = match cascade.config.eval_labels {
        EvalLabels::Observed => "test mAP (observed labels)",
        EvalLabels::True => "test mAP (true labels)",
    };
    let pts = |f: &dyn Fn(usize) -> f64| (0..cascade.len()).map(|t| (t as f64, f(t))).collect();
    let series = [
        Series {
            name: "validation mAP",
            points: pts(&|t| cascade.stages[t].val_map),
        },
        Series {
            name: label,
            points: pts(&|t| cascade.stages[t].test.map),
        },
    ];
    ctx.write("stages.svg", &line_chart("Student performance by stage", "stage", "mAP", &series))?;
    Ok(())
}

pub fn train(ctx: &Context, data_path: Option<&Path>, stop_rule: bool) -> Result<Outcome> {
    let data = ctx.dataset(data_path)?;
    let mut cfg = ctx.config.cascade();
    cfg.stop_rule |= stop_rule;
    let schedule = ctx.config.schedule.plans()?;
    let cascade = run_cascade(&data, &schedule, &cfg)?;
    write_cascade_reports(ctx, &cascade)?;
    println!("{:>5}  {:<10} {:<16} {:>8} {:>8}", "stage", "teachers", "alphas", "val mAP", "test mAP");
    for s in &cascade.stages {
        println!(
            "{:>5}  {:<10} {:<16} {:>8.4} {:>8.4}",
            s.stage,
            join(&s.plan.teachers, ","),
            join(&s.plan.alphas, ","),
            s.val_map,
            s.test.map
        );
    }
    match cascade.stopped {
        Some(best) => println!("stopping rule fired after stage {}; T̄ = {best}", cascade.len() - 1),
        None => println!("best validation stage: {}", cascade.best_stage().unwrap_or(0)),
    }
    Ok(Outcome::Passed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyRow {
    pub delta: f64,
    pub eps: f64,
    pub alpha0: f64,
    pub delta_bar: f64,
    pub mc_agreement: f64,
    pub agreement_se: f64,
    pub agreement_pass: bool,
    pub alignment: f64,
    pub mc_alignment: f64,
    pub alignment_se: f64,
    pub alignment_pass: bool,
    pub stated_gain: f64,
    pub alignment_gain: f64,
    pub improves: bool,
}

/// Theory-vs-simulation grid: teacher agreement with the truth, and the
/// weight the blended target puts on the truth.
pub fn verify_grid(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<VerifyRow>> {
    let v = &cfg.verify;
    let cells: Vec<(usize, usize)> = (0..v.deltas.len())
        .flat_map(|i| (0..v.eps.len()).map(move |j| (i, j)))
        .collect();
    let base = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let rows = parallel_map(&cells, threads, |&(i, j)| -> Result<Vec<VerifyRow>> {
        let (delta, eps) = (v.deltas[i], v.eps[j]);
        let cell_seed = base ^ ((i as u64) << 32 | j as u64);
        let teacher = TeacherSampler::Composed { accuracy: eps };
        let agreement = monte_carlo_alignment(delta, teacher, 0.0, v.samples, cell_seed)?;
        v.alpha0
            .iter()
            .enumerate()
            .map(|(k, &a)| {
                let gain = predicted_gain(eps, delta, a);
                let mc = monte_carlo_alignment(delta, teacher, a, v.samples, cell_seed ^ ((k as u64 + 1) << 48))?;
                Ok(VerifyRow {
                    delta,
                    eps,
                    alpha0: a,
                    delta_bar: gain.delta_bar,
                    mc_agreement: agreement.estimate,
                    agreement_se: agreement.std_error,
                    agreement_pass: agreement.within(gain.delta_bar, v.sigmas),
                    alignment: gain.alignment,
                    mc_alignment: mc.estimate,
                    alignment_se: mc.std_error,
                    alignment_pass: mc.within(gain.alignment, v.sigmas),
                    stated_gain: gain.stated_gain,
                    alignment_gain: gain.alignment_gain,
                    improves: gain.improves,
                })
            })
            .collect()
    });
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

pub fn verify_csv(rows: &[VerifyRow]) -> String {
    let mut out = String::from(
        "delta,eps,alpha0,delta_bar,mc_agreement,agreement_se,agreement_pass,alignment,mc_alignment,alignment_se,alignment_pass,stated_gain,alignment_gain,improves\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{}",
            r.delta,
            r.eps,
            r.alpha0,
            r.delta_bar,
            r.mc_agreement,
            r.agreement_se,
            r.agreement_pass,
            r.alignment,
            r.mc_alignment,
            r.alignment_se,
            r.alignment_pass,
            r.stated_gain,
            r.alignment_gain,
            r.improves
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifySummary {
    /// Distinct `(δ, ε)` cells.
    pub agreement_cells: usize,
    pub agreement_pass_rate: f64,
    pub alignment_cells: usize,
    pub alignment_pass_rate: f64,
    /// Cells whose improvement flag differs from `δ < ½ ∧ ε < 1`.
    pub flag_mismatches: usize,
}

pub fn summarize_verify(rows: &[VerifyRow]) -> VerifySummary {
    let mut seen = Vec::new();
    let mut agree_pass = 0;
    for r in rows {
        if !seen.contains(&(r.delta.to_bits(), r.eps.to_bits())) {
            seen.push((r.delta.to_bits(), r.eps.to_bits()));
            agree_pass += usize::from(r.agreement_pass);
        }
    }
    let align_pass = rows.iter().filter(|r| r.alignment_pass).count();
    VerifySummary {
        agreement_cells: seen.len(),
        agreement_pass_rate: agree_pass as f64 / seen.len().max(1) as f64,
        alignment_cells: rows.len(),
        alignment_pass_rate: align_pass as f64 / rows.len().max(1) as f64,
        flag_mismatches: rows
            .iter()
            .filter(|r| r.improves != (r.delta < 0.5 && r.eps < 1.0))
            .count(),
    }
}

pub fn verify(ctx: &Context) -> Result<Outcome> {
    let cfg = &ctx.config;
    let rows = verify_grid(cfg, ctx.threads)?;
    ctx.write("verify.csv", &verify_csv(&rows))?;
    let v = &cfg.verify;
    let gains: Vec<Vec<f64>> = v
        .deltas
        .iter()
        .map(|&d| v.eps.iter().map(|&e| predicted_gain(e, d, 0.0).stated_gain).collect())
        .collect();
    let svg = heatmap(
        "Stated per-class gain (1 − ε)(1 − 2δ); rows δ, columns ε",
        &v.deltas.iter().map(|d| format!("δ={d}")).collect::<Vec<_>>(),
        &v.eps.iter().map(|e| format!("ε={e}")).collect::<Vec<_>>(),
        &gains,
    );
    ctx.write("verify_heatmap.svg", &svg)?;
    let s = summarize_verify(&rows);
    println!(
        "teacher agreement: {}/{} cells within {}σ",
        (s.agreement_pass_rate * s.agreement_cells as f64).round(),
        s.agreement_cells,
        v.sigmas
    );
    println!(
        "alignment:         {}/{} cells within {}σ",
        (s.alignment_pass_rate * s.alignment_cells as f64).round(),
        s.alignment_cells,
        v.sigmas
    );
    println!("improvement flag mismatches: {}", s.flag_mismatches);
    if s.agreement_pass_rate < v.min_pass_rate || s.alignment_pass_rate < v.min_pass_rate || s.flag_mismatches > 0 {
        return Ok(Outcome::Failed(format!(
            "pass rates {:.4} / {:.4} below {} or {} flag mismatches",
            s.agreement_pass_rate, s.alignment_pass_rate, v.min_pass_rate, s.flag_mismatches
        )));
    }
    Ok(Outcome::Passed)
}

pub fn alpha_sweep(ctx: &Context, data_path: Option<&Path>) -> Result<Outcome> {
    let data = ctx.dataset(data_path)?;
    let cfg = ctx.config.cascade();
    let base = run_cascade(&data, &[StagePlan::baseline()], &cfg)?;
    let sweep = alpha_search(&base, &data, &ctx.config.alpha_sweep.grid)?;
    ctx.write("alpha_sweep.csv", &sweep.to_csv())?;
    let series = [
        Series {
            name: "validation mAP",
            points: sweep.rows.iter().map(|r| (r.alpha0, r.val_map)).collect(),
        },
        Series {
            name: "test mAP",
            points: sweep.rows.iter().map(|r| (r.alpha0, r.test_map)).collect(),
        },
    ];
    ctx.write("alpha_sweep.svg", &line_chart("Single-teacher student vs α₀", "α₀", "mAP", &series))?;
    println!("{:>6} {:>8} {:>8}", "alpha0", "val mAP", "test mAP");
    for r in &sweep.rows {
        println!("{:>6} {:>8.4} {:>8.4}", r.alpha0, r.val_map, r.test_map);
    }
    println!("stage-0 baseline: val {:.4} test {:.4}", base.stages[0].val_map, base.stages[0].test.map);
    println!("best α₀ by validation: {}", sweep.best_alpha0);
    Ok(Outcome::Passed)
}

pub fn gradcheck_cmd(ctx: &Context, corrupt: bool) -> Result<Outcome> {
    let cases = gradcheck::suite(corrupt)?;
    let mut csv = String::from("case,scalars,max_rel_error,passed\n");
    for c in &cases {
        let _ = writeln!(csv, "{},{},{:.3e},{}", c.name, c.scalars, c.max_rel_error, c.passed);
        println!(
            "{:<24} {:>6} scalars  max rel err {:.3e}  {}",
            c.name,
            c.scalars,
            c.max_rel_error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    ctx.write("gradcheck.csv", &csv)?;
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(Outcome::Passed)
    } else {
        Ok(Outcome::Failed(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub stage: usize,
    pub map: f64,
    pub mauc: Option<f64>,
    pub mean_accuracy: f64,
}

/// Fits a linear probe on embeddings of each model and scores it on the
/// probe dataset's test split.
pub fn probe_models(
    ctx: &Context,
    models: &[(usize, WeaNet)],
    probe: &Dataset,
) -> Result<Vec<ProbeRow>> {
    if models.is_empty() {
        return Err(Error::Empty("cascade"));
    }
    let t = &ctx.config.transfer;
    let eval = |bags: &[sustain::mil::bag::Bag]| -> Result<Vec<Vec<bool>>> {
        match ctx.config.metrics.eval_labels {
            EvalLabels::Observed => Ok(bags.iter().map(|b| b.observed_labels.clone()).collect()),
            EvalLabels::True => bags
                .iter()
                .map(|b| b.true_labels.clone())
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Invalid("probe dataset has no true labels".into())),
        }
    };
    let train_labels: Vec<Vec<bool>> = probe.train.iter().map(|b| b.observed_labels.clone()).collect();
    let test_labels = eval(&probe.test)?;
    let mut rows = Vec::new();
    for (stage, model) in models {
        let fd = probe.feature_dim();
        if model.config().feature_dim != fd {
            return Err(Error::FeatureDimMismatch {
                expected: model.config().feature_dim,
                found: fd,
            });
        }
        let train_x = model.extract_embeddings(&probe.train)?;
        let test_x = model.extract_embeddings(&probe.test)?;
        let lp = LinearProbe::fit(&train_x, &train_labels, t.epochs, t.adam, ctx.config.seed)?;
        let r = lp.evaluate(&test_x, &test_labels, ctx.config.metrics.threshold)?;
        rows.push(ProbeRow {
            stage: *stage,
            map: r.map,
            mauc: r.mauc,
            mean_accuracy: r.mean_accuracy,
        });
    }
    Ok(rows)
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("stage,probe_map,probe_mauc,probe_mean_accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{},{:.6}", r.stage, r.map, fmt_opt(r.mauc), r.mean_accuracy);
    }
    out
}

pub fn transfer(ctx: &Context, cascade_dir: Option<&Path>, probe_dir: Option<&Path>) -> Result<Outcome> {
    let t = &ctx.config.transfer;
    let dir = cascade_dir
        .or(t.cascade.as_deref())
        .ok_or_else(|| Error::Invalid("transfer needs a cascade directory (--cascade)".into()))?;
    let manifest = load_manifest(dir)?;
    if manifest.stages.is_empty() {
        return Err(Error::Empty("cascade"));
    }
    let probe = match probe_dir.or(t.probe.as_deref()) {
        Some(p) => load_dataset(p)?,
        None => {
            let mut section = ctx.config.dataset.clone();
            section.preset = t.probe_preset;
            section.overrides.clear();
            generate_dataset(&section.spec(ctx.config.seed)?)?
        }
    };
    let wanted: Vec<usize> = if t.stages.is_empty() {
        manifest.stages.iter().map(|s| s.stage).collect()
    } else {
        t.stages.clone()
    };
    let mut models = Vec::new();
    for stage in wanted {
        let entry = manifest
            .stages
            .iter()
            .find(|s| s.stage == stage)
            .ok_or_else(|| Error::Invalid(format!("stage {stage} is not in the cascade")))?;
        let model = load_model(&dir.join(&entry.model_file))?;
        check_compatible(model.config(), &manifest.config.model)?;
        models.push((stage, model));
    }
    let rows = probe_models(ctx, &models, &probe)?;
    ctx.write("transfer.csv", &probe_csv(&rows))?;
    println!("{:>5} {:>10} {:>10}", "stage", "probe mAP", "probe AUC");
    for r in &rows {
        println!("{:>5} {:>10.4} {:>10}", r.stage, r.map, fmt_opt(r.mauc));
    }
    Ok(Outcome::Passed)
}

/// `class,segment,score,weight,uniform,event_overlap` rows for one bag.
pub fn attention_csv(model: &WeaNet, bag: &sustain::mil::bag::Bag) -> Result<String> {
    let out = model.forward_bag(bag)?;
    let s = &out.segment_scores;
    let k = s.segments();
    let (hop, rf) = (model.config().hop(), model.config().receptive_field());
    let mut csv = String::from("class,segment,score,weight,uniform,event_overlap\n");
    for c in 0..s.classes() {
        for seg in 0..k {
            let (lo, hi) = (seg * hop, seg * hop + rf);
            let covered = (lo..hi.min(bag.frames()))
                .filter(|&f| bag.events.iter().any(|e| e.class == c && e.start <= f && f < e.start + e.len))
                .count();
            let _ = writeln!(
                csv,
                "{c},{seg},{:.6},{:.6},{:.6},{:.4}",
                s.row(c)[seg],
                out.pooled.attention.row(c)[seg],
                1.0 / k as f64,
                covered as f64 / rf as f64
            );
        }
    }
    Ok(csv)
}

pub fn dump_attention(
    ctx: &Context,
    model_path: Option<&Path>,
    data_path: Option<&Path>,
    bag_id: Option<&str>,
) -> Result<Outcome> {
    let a = &ctx.config.attention;
    let path = model_path
        .or(a.model.as_deref())
        .ok_or_else(|| Error::Invalid("dump-attention needs a model snapshot (--model)".into()))?;
    let model = load_model(path)?;
    let data = ctx.dataset(data_path)?;
    let id = bag_id.or(a.bag_id.as_deref());
    let pool = if data.test.is_empty() { &data.train } else { &data.test };
    let bag = match id {
        Some(id) => data
            .train
            .iter()
            .chain(&data.val)
            .chain(&data.test)
            .find(|b| b.id == id)
            .ok_or_else(|| Error::Invalid(format!("no bag with id {id}")))?,
        None => pool.first().ok_or(Error::Empty("dataset"))?,
    };
    if model.config().n_classes != bag.n_classes() {
        return Err(Error::ClassCountMismatch {
            model: model.config().n_classes,
            data: bag.n_classes(),
        });
    }
    let csv = attention_csv(&model, bag)?;
    let path = ctx.write("attention.csv", &csv)?;
    println!("attention for bag {} written to {}", bag.id, path.display());
    Ok(Outcome::Passed)
}

pub fn config_schema() -> Result<Outcome> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(&crate::config::schema())?;
    // a closed pipe (e.g. `| head`) is not an error
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    Ok(Outcome::Passed)
}
