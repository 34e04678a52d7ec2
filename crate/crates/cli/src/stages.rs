//! One function per pipeline stage. Each returns the files it wrote.

use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;

use planlens::blocksworld::{
    generate_dataset, level_histogram, read_jsonl, write_jsonl, GenError, Level, PlanInstance,
    Split,
};
use planlens::figures;
use planlens::interp_flow::{self, extraction_rates, flow_analysis, Component, FlowMatrix};
use planlens::interp_probe::{
    self, future_matrix, impact_matrix, probe_records_csv, probe_sweep, FeatureBank, ProbeKind,
    ProbeRecord, ProbeTask,
};
use planlens::model::{checkpoint, Transformer};
use planlens::textgen::Vocab;
use planlens::training::{
    self, collect_analysis_set, evaluate, max_len, EpochLog, EvalReport, Progress, TrainLog,
};

use crate::config::RunConfig;
use crate::CliError;

pub const DATASET: &str = "data/dataset.jsonl";
pub const STATS: &str = "data/stats.csv";
pub const VOCAB: &str = "data/vocab.txt";
pub const CHECKPOINT: &str = "checkpoints/model.ckpt";
pub const TRAIN_LOG: &str = "checkpoints/train_log.json";
pub const TRAIN_CSV: &str = "checkpoints/train_log.csv";
pub const ANALYSIS_SET: &str = "analysis/eval/analysis_set.json";
pub const EXTRACT_CSV: &str = "analysis/extract/extraction.csv";
pub const EXTRACT_JSON: &str = "analysis/extract/extraction.json";
pub const FLOW_JSON: &str = "analysis/flow/flow.json";
pub const STATE_CSV: &str = "analysis/probe/state.csv";
pub const FUTURE_CSV: &str = "analysis/probe/future.csv";
pub const PROBE_JSON_STATE: &str = "analysis/probe/state.json";
pub const PROBE_JSON_FUTURE: &str = "analysis/probe/future.json";
pub const IMPACT_CSV: &str = "analysis/impact/impact.csv";
pub const IMPACT_JSON: &str = "analysis/impact/impact.json";
pub const SUMMARY: &str = "analysis/summary.json";

/// Number of held-out L3 six-block instances scored after each training epoch.
const TRAIN_MONITOR: usize = 300;

pub struct Ctx {
    pub run: PathBuf,
    pub cfg: RunConfig,
    pub vocab: Vocab,
}

impl Ctx {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.run.join(rel)
    }

    fn write(&self, rel: &str, contents: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(&p, contents).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<PathBuf, CliError> {
        let text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
        self.write(rel, &(text + "\n"))
    }

    fn require(&self, rel: &str, stage: &'static str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Missing { stage, path: p })
        }
    }

    pub fn dataset(&self) -> Result<Vec<PlanInstance>, CliError> {
        let p = self.require(DATASET, "gen-data")?;
        let f = std::fs::File::open(&p).map_err(|e| CliError::io(&p, e))?;
        read_jsonl(std::io::BufReader::new(f))
            .map_err(|e| CliError::Failed(format!("{}: {e}", p.display())))
    }

    pub fn model(&self) -> Result<Transformer<f32>, CliError> {
        let p = self.require(CHECKPOINT, "train")?;
        checkpoint::load(&p).map_err(|e| CliError::Failed(format!("{}: {e}", p.display())))
    }

    /// Instances of the analysis set, in id order.
    pub fn analysis_set(&self) -> Result<Vec<PlanInstance>, CliError> {
        let p = self.require(ANALYSIS_SET, "eval")?;
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        let set: AnalysisSetFile =
            serde_json::from_str(&text).map_err(|e| CliError::Failed(e.to_string()))?;
        let data = self.dataset()?;
        let mut out: Vec<PlanInstance> = data
            .into_iter()
            .filter(|i| set.ids.binary_search(&i.id).is_ok())
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        if out.is_empty() {
            return Err(CliError::Failed(
                "analysis set is empty; the model has no fully correct plans".into(),
            ));
        }
        Ok(out)
    }
}

fn level_name(l: Level) -> String {
    l.to_string()
}

pub fn gen_data(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let data = generate_dataset(&ctx.cfg.gen).map_err(|GenError::Config(m)| CliError::Config(m))?;
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &data).map_err(|e| CliError::Failed(e.to_string()))?;
    let p1 = ctx.write(DATASET, std::str::from_utf8(&buf).expect("json is utf-8"))?;

    let hist = level_histogram(&data);
    let mut csv = String::from("blocks,split,L1,L2,L3,total\n");
    let mut table = String::from("blocks      split   L1      L2      L3      total\n");
    let colors: Vec<usize> = {
        let mut c: Vec<usize> = hist.iter().map(|h| h.0).collect();
        c.dedup();
        c
    };
    for split in [Split::Train, Split::Test] {
        let mut totals = [0usize; 4];
        for &n in &colors {
            let counts: Vec<usize> = [Level::L1, Level::L2, Level::L3]
                .iter()
                .map(|&l| {
                    hist.iter().find(|h| h.0 == n && h.1 == l).map_or(0, |h| {
                        if split == Split::Train {
                            h.2
                        } else {
                            h.3
                        }
                    })
                })
                .collect();
            let total: usize = counts.iter().sum();
            for (t, c) in totals.iter_mut().zip(counts.iter().chain([&total])) {
                *t += c;
            }
            let name = if split == Split::Train {
                "train"
            } else {
                "test"
            };
            csv.push_str(&format!(
                "{n},{name},{},{},{},{total}\n",
                counts[0], counts[1], counts[2]
            ));
            table.push_str(&format!(
                "{n} blocks    {name:<7} {:<7} {:<7} {:<7} {total}\n",
                counts[0], counts[1], counts[2]
            ));
        }
        let name = if split == Split::Train {
            "train"
        } else {
            "test"
        };
        csv.push_str(&format!(
            "total,{name},{},{},{},{}\n",
            totals[0], totals[1], totals[2], totals[3]
        ));
        table.push_str(&format!(
            "total       {name:<7} {:<7} {:<7} {:<7} {}\n",
            totals[0], totals[1], totals[2], totals[3]
        ));
    }
    print!("{table}");
    let p2 = ctx.write(STATS, &csv)?;
    let p3 = ctx.write(VOCAB, &ctx.vocab.to_file_contents())?;
    Ok(vec![p1, p2, p3])
}

struct Reporter;

impl Progress for Reporter {
    fn epoch(&mut self, l: &EpochLog) {
        match &l.eval {
            Some(e) => eprintln!(
                "epoch {:>3}  loss {:.4}  {:.0}s  held-out L3/6 step {:.3} plan {:.3}",
                l.epoch, l.mean_loss, l.seconds, e.s_step, e.s_plan
            ),
            None => eprintln!(
                "epoch {:>3}  loss {:.4}  {:.0}s",
                l.epoch, l.mean_loss, l.seconds
            ),
        }
    }

    fn step(&mut self, step: usize, total: usize, loss: f64) {
        if step % 500 == 0 {
            eprintln!("  step {step}/{total}  loss {loss:.4}");
        }
    }
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    model: &'a planlens::model::ModelConfig,
    parameters: usize,
    train_instances: usize,
    log: &'a TrainLog,
}

pub fn train(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let data = ctx.dataset()?;
    let monitor: Vec<PlanInstance> = data
        .iter()
        .filter(|i| i.split == Split::Test && i.level == Level::L3 && i.num_colors == 6)
        .take(TRAIN_MONITOR)
        .cloned()
        .collect();
    let model_cfg = ctx
        .cfg
        .model_config(ctx.vocab.len(), max_len(&data, &ctx.vocab));
    let (model, log) = training::train(
        &data,
        model_cfg,
        &ctx.cfg.train,
        &ctx.vocab,
        &monitor,
        &mut Reporter,
    )
    .map_err(|e| CliError::Failed(e.to_string()))?;
    let ckpt = ctx.path(CHECKPOINT);
    std::fs::create_dir_all(ckpt.parent().unwrap()).map_err(|e| CliError::io(&ckpt, e))?;
    checkpoint::save(&model, &ckpt).map_err(|e| CliError::Failed(e.to_string()))?;
    let record = TrainRecord {
        model: &model.config,
        parameters: model.num_params(),
        train_instances: data.iter().filter(|i| i.split == Split::Train).count(),
        log: &log,
    };
    let p2 = ctx.write_json(TRAIN_LOG, &record)?;
    let mut csv = String::from("epoch,mean_loss,seconds,monitor_s_step,monitor_s_plan\n");
    for e in &log.epochs {
        let (a, b) = e.eval.as_ref().map_or((String::new(), String::new()), |r| {
            (format!("{:.6}", r.s_step), format!("{:.6}", r.s_plan))
        });
        csv.push_str(&format!(
            "{},{:.6},{:.1},{a},{b}\n",
            e.epoch, e.mean_loss, e.seconds
        ));
    }
    let p3 = ctx.write(TRAIN_CSV, &csv)?;
    eprintln!(
        "trained {} parameters in {:.0}s",
        model.num_params(),
        log.seconds
    );
    Ok(vec![ckpt, p2, p3])
}

#[derive(Clone, Debug, Default)]
pub struct EvalFilter {
    pub level: Option<Level>,
    pub colors: Option<usize>,
    pub split: Option<Split>,
}

#[derive(Serialize, serde::Deserialize)]
pub struct AnalysisSetFile {
    pub requested: usize,
    pub found: usize,
    pub warning: Option<String>,
    pub ids: Vec<String>,
}

fn report_csv(r: &EvalReport) -> String {
    let mut s = String::from("group,steps,plans,s_step,s_plan\n");
    s.push_str(&format!(
        "all,{},{},{:.6},{:.6}\n",
        r.steps, r.plans, r.s_step, r.s_plan
    ));
    for (k, b) in &r.breakdown {
        s.push_str(&format!(
            "{k},{},{},{:.6},{:.6}\n",
            b.steps, b.plans, b.s_step, b.s_plan
        ));
    }
    s
}

pub fn eval(ctx: &Ctx, filter: &EvalFilter) -> Result<Vec<PathBuf>, CliError> {
    let model = ctx.model()?;
    let data = ctx.dataset()?;
    let split = filter.split.unwrap_or(Split::Test);
    let chosen: Vec<PlanInstance> = data
        .iter()
        .filter(|i| i.split == split)
        .filter(|i| filter.level.map_or(true, |l| i.level == l))
        .filter(|i| filter.colors.map_or(true, |c| i.num_colors == c))
        .cloned()
        .collect();
    if chosen.is_empty() {
        return Err(CliError::Config(
            "no instances match the evaluation filter".into(),
        ));
    }
    let report = evaluate(&model, &chosen, &ctx.vocab);
    let split_name = if split == Split::Train {
        "train"
    } else {
        "test"
    };
    let stem = format!(
        "analysis/eval/{split_name}_{}_{}",
        filter.level.map_or("all".into(), level_name),
        filter.colors.map_or("all".into(), |c| format!("{c}blocks"))
    );
    println!(
        "{}",
        serde_json::to_string_pretty(
            &serde_json::json!({ "s_step": report.s_step, "s_plan": report.s_plan })
        )
        .unwrap()
    );
    let p1 = ctx.write_json(&format!("{stem}.json"), &report)?;
    let p2 = ctx.write(&format!("{stem}.csv"), &report_csv(&report))?;

    let test: Vec<PlanInstance> = data
        .into_iter()
        .filter(|i| i.split == Split::Test)
        .collect();
    let file = match collect_analysis_set(&model, &test, &ctx.vocab, &ctx.cfg.analysis) {
        Ok(ids) => AnalysisSetFile {
            requested: ctx.cfg.analysis.size,
            found: ids.len(),
            warning: None,
            ids,
        },
        Err((e, ids)) => {
            eprintln!("warning: {e}; using {} instances", ids.len());
            let found = match e {
                training::AnalysisSetError::InsufficientCorrectPlans { found } => found,
            };
            AnalysisSetFile {
                requested: ctx.cfg.analysis.size,
                found,
                warning: Some(e.to_string()),
                ids,
            }
        }
    };
    let p3 = ctx.write_json(ANALYSIS_SET, &file)?;
    Ok(vec![p1, p2, p3])
}

pub fn extract_rate(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let model = ctx.model()?;
    let set = ctx.analysis_set()?;
    let report = extraction_rates(&model, &set, &ctx.vocab, ctx.cfg.lens)
        .map_err(|e| CliError::Failed(e.to_string()))?;
    let csv = report.to_csv();
    let p1 = ctx.write(EXTRACT_CSV, &csv)?;
    let p2 = ctx.write_json(EXTRACT_JSON, &report)?;
    let svg = figures::extraction_figure(&csv).map_err(|e| CliError::Failed(e.to_string()))?;
    let p3 = ctx.write("figures/extraction.svg", &svg)?;
    Ok(vec![p1, p2, p3])
}

fn token_flow_csv(f: &FlowMatrix) -> Option<String> {
    let tok = f.token.as_ref()?;
    let mut s = String::from("layer,query,key,value\n");
    for (l, m) in tok.layers.iter().enumerate() {
        for i in 0..tok.n {
            for j in 0..=i {
                s.push_str(&format!("{},{i},{j},{:.8}\n", l + 1, m[i * tok.n + j]));
            }
        }
    }
    Some(s)
}

pub fn info_flow(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let model = ctx.model()?;
    let set = ctx.analysis_set()?;
    let flows = flow_analysis(&model, &set, &ctx.vocab, ctx.cfg.flow)
        .map_err(|e| CliError::Failed(e.to_string()))?;
    let mut out = Vec::new();
    for f in &flows {
        let csv = f.to_csv();
        out.push(ctx.write(&format!("analysis/flow/step_{}.csv", f.step), &csv)?);
        if let Some(tok) = token_flow_csv(f) {
            out.push(ctx.write(&format!("analysis/flow/token_step_{}.csv", f.step), &tok)?);
        }
        let svg = figures::flow_figure(
            &csv,
            &format!("Information flow into the last token, step {}", f.step),
        )
        .map_err(|e| CliError::Failed(e.to_string()))?;
        out.push(ctx.write(&format!("figures/flow_step_{}.svg", f.step), &svg)?);
    }
    let compact: Vec<FlowMatrix> = flows
        .iter()
        .map(|f| FlowMatrix {
            token: None,
            ..f.clone()
        })
        .collect();
    out.push(ctx.write_json(FLOW_JSON, &compact)?);
    Ok(out)
}

fn probe_stage(ctx: &Ctx, task: ProbeTask) -> Result<(Vec<ProbeRecord>, Vec<PathBuf>), CliError> {
    let model = ctx.model()?;
    let set = ctx.analysis_set()?;
    let bank = FeatureBank::extract(&model, &set, &ctx.vocab, ctx.cfg.probe.feature)
        .map_err(|e| CliError::Failed(e.to_string()))?;
    let kinds = [ProbeKind::Linear, ProbeKind::Nonlinear];
    let records = probe_sweep(&bank, task, &kinds, &ctx.cfg.probe)
        .map_err(|e| CliError::Failed(e.to_string()))?;
    for r in records
        .iter()
        .filter(|r| !r.skipped_slots.is_empty() && !r.control)
    {
        eprintln!(
            "note: {} {} probe at {} layer {} skipped single-class slots {:?}",
            r.task.label(),
            r.kind.label(),
            r.chunk.label(),
            r.layer,
            r.skipped_slots
        );
    }
    let csv = probe_records_csv(&records);
    let (csv_path, json_path) = match task {
        ProbeTask::StatePairs => (STATE_CSV, PROBE_JSON_STATE),
        ProbeTask::FutureDecision => (FUTURE_CSV, PROBE_JSON_FUTURE),
    };
    let mut out = vec![
        ctx.write(csv_path, &csv)?,
        ctx.write_json(json_path, &records)?,
    ];
    for kind in kinds {
        let title = match task {
            ProbeTask::StatePairs => {
                format!("Current block state, {} probe (weighted F1)", kind.label())
            }
            ProbeTask::FutureDecision => format!(
                "Decision probes, {} (accuracy, mean over future steps)",
                kind.label()
            ),
        };
        let svg = figures::probe_figure(&csv, task.label(), kind.label(), &title)
            .map_err(|e| CliError::Failed(e.to_string()))?;
        out.push(ctx.write(
            &format!("figures/probe_{}_{}.svg", task.label(), kind.label()),
            &svg,
        )?);
    }
    Ok((records, out))
}

pub fn probe_state(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    probe_stage(ctx, ProbeTask::StatePairs).map(|r| r.1)
}

pub fn probe_future(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let (records, mut out) = probe_stage(ctx, ProbeTask::FutureDecision)?;
    let steps = ctx.cfg.analysis.level.plan_len();
    for kind in [ProbeKind::Linear, ProbeKind::Nonlinear] {
        let m = future_matrix(&records, kind, steps);
        let csv = m.to_csv();
        out.push(ctx.write(
            &format!("analysis/probe/future_matrix_{}.csv", kind.label()),
            &csv,
        )?);
        let svg = figures::future_figure(
            &csv,
            &format!("Future decision, {} probe (max over layers)", kind.label()),
        )
        .map_err(|e| CliError::Failed(e.to_string()))?;
        out.push(ctx.write(&format!("figures/future_matrix_{}.svg", kind.label()), &svg)?);
    }
    Ok(out)
}

pub fn intervene(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let model = ctx.model()?;
    let set = ctx.analysis_set()?;
    let m = impact_matrix(&model, &set, &ctx.vocab).map_err(|e| CliError::Failed(e.to_string()))?;
    let csv = m.to_csv();
    let p1 = ctx.write(IMPACT_CSV, &csv)?;
    let p2 = ctx.write_json(IMPACT_JSON, &m)?;
    let svg = figures::impact_figure(&csv).map_err(|e| CliError::Failed(e.to_string()))?;
    let p3 = ctx.write("figures/impact.svg", &svg)?;
    Ok(vec![p1, p2, p3])
}

/// Qualitative findings computed from the stage outputs.
#[derive(Serialize, serde::Deserialize, Debug, Clone, PartialEq)]
pub struct Summary {
    pub analysis_samples: usize,
    pub mhsa_middle_third: f64,
    pub mlp_middle_third: f64,
    pub goal_state_top2_steps: usize,
    pub flow_steps: usize,
    pub recency_step5: Option<(f64, f64)>,
    pub lookahead_mean_by_distance: Vec<(usize, f64)>,
    pub future_column1_inversions: usize,
    pub control_state_accuracy: Option<f64>,
    pub control_future_accuracy: Option<f64>,
}

fn read_json<T: serde::de::DeserializeOwned>(
    ctx: &Ctx,
    rel: &str,
    stage: &'static str,
) -> Result<T, CliError> {
    let p = ctx.require(rel, stage)?;
    let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Failed(format!("{}: {e}", p.display())))
}

pub fn summarize(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let ex: interp_flow::ExtractionReport = read_json(ctx, EXTRACT_JSON, "extract-rate")?;
    let flows: Vec<FlowMatrix> = read_json(ctx, FLOW_JSON, "info-flow")?;
    let state: Vec<ProbeRecord> = read_json(ctx, PROBE_JSON_STATE, "probe-state")?;
    let future: Vec<ProbeRecord> = read_json(ctx, PROBE_JSON_FUTURE, "probe-future")?;
    let steps = ctx.cfg.analysis.level.plan_len();
    let fm = future_matrix(&future, ProbeKind::Linear, steps);
    let summary = Summary {
        analysis_samples: ex.samples,
        mhsa_middle_third: ex.middle_third_mean(Component::Mhsa),
        mlp_middle_third: ex.middle_third_mean(Component::Mlp),
        goal_state_top2_steps: interp_flow::goal_state_hits(&flows, 2),
        flow_steps: flows.len(),
        recency_step5: flows
            .iter()
            .find(|f| f.step == 5)
            .and_then(interp_flow::recency),
        lookahead_mean_by_distance: (1..steps)
            .filter_map(|d| fm.lookahead_mean(d).map(|m| (d, m)))
            .collect(),
        future_column1_inversions: fm.column_inversions(1),
        control_state_accuracy: interp_probe::control_accuracy(&state, ProbeTask::StatePairs),
        control_future_accuracy: interp_probe::control_accuracy(&future, ProbeTask::FutureDecision),
    };
    Ok(vec![ctx.write_json(SUMMARY, &summary)?])
}

pub fn elapsed(start: Instant) -> String {
    format!("{:.1}s", start.elapsed().as_secs_f64())
}
